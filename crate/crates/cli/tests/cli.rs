use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[sampling]
n_near = 400
n_uniform = 100

[fit]
steps = 40
batch = 128
eval_every = 20
triplane = { h = 8, w = 8, c = 4 }
heads = { hidden = [16] }

[extract]
count = 300
octree = { max_depth = 4 }
optimize = { steps = 20 }
"#;

fn gsfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsfield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = gsfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&["toy-set", "--out-dir", s(&dir.path().join("toy"))]);
    (dir, cfg)
}

#[test]
fn field_pipeline_runs_and_is_deterministic() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let ring = d.join("toy/ring.ply");
    let mut runs = Vec::new();
    for run in 0..2 {
        let o = d.join(format!("run{run}"));
        std::fs::create_dir(&o).unwrap();
        let (norm, labels, field, out, report) = (
            o.join("norm.ply"),
            o.join("labels.bin"),
            o.join("field.ck"),
            o.join("out.ply"),
            o.join("metrics.json"),
        );
        ok(&["--config", s(&cfg), "preprocess", s(&ring), "--out", s(&norm)]);
        ok(&["--config", s(&cfg), "sample-labels", s(&norm), "--out", s(&labels)]);
        ok(&["--config", s(&cfg), "fit-field", s(&norm), "--samples", s(&labels), "--out", s(&field)]);
        ok(&["--config", s(&cfg), "extract", "--field", s(&field), "--n", "257", "--out", s(&out)]);
        ok(&[
            "--config", s(&cfg), "metrics", "--reference", s(&norm), "--candidate", s(&out), "--field", s(&field),
            "--out", s(&report),
        ]);
        let stats: serde_json::Value =
            serde_json::from_slice(&std::fs::read(o.join("out.stats.json")).unwrap()).unwrap();
        assert_eq!(stats["count"], 257);
        assert!(stats["extract"].get("seconds_octree").is_none());
        assert!(o.join("out.timing.json").exists());
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert!(m["chamfer"].as_f64().unwrap() >= 0.0);
        runs.push(o);
    }
    for name in ["norm.ply", "labels.bin", "field.ck", "field.stats.json", "out.ply", "out.stats.json", "metrics.json"] {
        let a = std::fs::read(runs[0].join(name)).unwrap();
        let b = std::fs::read(runs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }
}

#[test]
fn dry_run_writes_nothing() {
    let (dir, cfg) = setup();
    let out = dir.path().join("x.ply");
    let o = gsfield(&["--config", s(&cfg), "--dry-run", "preprocess", s(&dir.path().join("toy/ring.ply")), "--out", s(&out)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("resolved config") && text.contains("seed = 3"), "{text}");
    assert!(!out.exists());
}

#[test]
fn error_lines_and_exit_codes() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    let o = gsfield(&["--config", s(&bad), "toy-set", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let last = String::from_utf8_lossy(&o.stderr).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(v["error"]["kind"], "usage");

    let o = gsfield(&["preprocess", "/nonexistent.ply", "--out", s(&dir.path().join("o.ply"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = gsfield(&["generate", "--out", "x.ply", "--vae", "a", "--ldm", "b"]);
    assert_eq!(o.status.code(), Some(1), "missing condition choice is a usage error");

    let garbage = dir.path().join("garbage.ply");
    std::fs::write(&garbage, b"not a ply").unwrap();
    let o = gsfield(&["preprocess", s(&garbage), "--out", s(&dir.path().join("o.ply"))]);
    assert_eq!(o.status.code(), Some(2));
}

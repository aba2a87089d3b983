use std::path::{Path, PathBuf};
use std::time::Instant;

use gsfield_core::diffusion::{
    load_condition_file, make_partial, train_ldm, ConditionEmbedding, ConditionInput, Ldm, LdmExample,
};
use gsfield_core::extraction::{extract_splat, ExtractConfig};
use gsfield_core::field::{fit_field, NeuralField};
use gsfield_core::gs_model::{clamp_appearance, clip_scales, load_ply, normalize, save_ply};
use gsfield_core::gt_functions::{sample_training_queries, FieldSampleSet, SamplingConfig};
use gsfield_core::io::write_atomic;
use gsfield_core::metrics::{attr_error, chamfer, field_l1, MetricReport};
use gsfield_core::rng::{derive_seed, derive_seed_n};
use gsfield_core::vae::{train_vae, EncoderInput, EncoderMode, GaussianVae, VaeExample};
use gsfield_core::{GaussianSplat, Mapping, Vec3};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::{manifest, Command, CondKind, CliError, ModelArgs, OutputArgs};

pub struct Context {
    pub dry_run: bool,
}

/// What a command reads and writes, printed by `--dry-run`.
struct Plan<'a> {
    command: &'a str,
    inputs: Vec<&'a Path>,
    outputs: Vec<PathBuf>,
}

impl Plan<'_> {
    /// Logs the resolved config; in dry-run mode checks inputs, prints the
    /// plan and returns `true`.
    fn announce(&self, cfg: &PipelineConfig, ctx: &Context) -> Result<bool, CliError> {
        log::info!(
            "{} resolved config: {}",
            self.command,
            serde_json::to_string(cfg).unwrap_or_default()
        );
        if !ctx.dry_run {
            return Ok(false);
        }
        for p in &self.inputs {
            if !p.exists() {
                return Err(data(format!("input {} does not exist", p.display())));
            }
        }
        println!("command: {}", self.command);
        for p in &self.inputs {
            println!("input: {}", p.display());
        }
        for p in &self.outputs {
            println!("output: {}", p.display());
        }
        println!("--- resolved config ---\n{}", cfg.to_toml());
        Ok(true)
    }
}

fn data(message: String) -> CliError {
    CliError { code: 2, message }
}

/// `g.ply` → `g.<kind>.json`.
fn sidecar(out: &Path, kind: &str) -> PathBuf {
    out.with_extension(format!("{kind}.json"))
}

/// Moves every `seconds*` key out of `v` so the remaining document is
/// reproducible byte for byte.
fn split_timings(v: &mut Value) -> Value {
    let mut timings = serde_json::Map::new();
    if let Value::Object(map) = v {
        let keys: Vec<String> = map.keys().filter(|k| k.starts_with("seconds")).cloned().collect();
        for k in keys {
            timings.insert(k.clone(), map.remove(&k).unwrap());
        }
        for (k, child) in map.iter_mut() {
            let sub = split_timings(child);
            if sub.as_object().is_some_and(|m| !m.is_empty()) {
                timings.insert(k.clone(), sub);
            }
        }
    }
    Value::Object(timings)
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| data(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Writes the deterministic stats document and, beside it, the wall times.
fn write_stats(out: &Path, mut stats: Value) -> Result<(), CliError> {
    let timings = split_timings(&mut stats);
    write_json(&sidecar(out, "stats"), &stats)?;
    write_json(&sidecar(out, "timing"), &timings)
}

fn apply_output(cfg: &mut PipelineConfig, o: &OutputArgs) {
    if let Some(n) = o.n {
        cfg.extract.count = n;
    }
    if let Some(d) = o.depth {
        cfg.extract.octree.max_depth = d;
    }
    if let Some(t) = o.theta {
        cfg.extract.octree.threshold = t;
    }
}

fn output_paths(o: &OutputArgs) -> Vec<PathBuf> {
    let mut v = vec![o.out.clone(), sidecar(&o.out, "stats"), sidecar(&o.out, "timing")];
    v.extend(o.field_out.clone());
    v
}

fn check_extract(cfg: &ExtractConfig) -> Result<(), CliError> {
    cfg.octree.validate()?;
    if cfg.count == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    Ok(())
}

/// Extracts `field` to `o.out` and writes the sidecars with `extra` merged in.
fn finish_field(field: &NeuralField, cfg: &PipelineConfig, o: &OutputArgs, mut extra: Value) -> Result<(), CliError> {
    if let Some(p) = &o.field_out {
        field.save(p)?;
    }
    let t = Instant::now();
    let (splat, stats) = extract_splat(field, &cfg.extract, derive_seed(cfg.seed, "extract"))?;
    save_ply(&splat, &o.out)?;
    extra["extract"] = serde_json::to_value(&stats).map_err(|e| data(e.to_string()))?;
    extra["count"] = json!(splat.count());
    extra["clamped_queries"] = json!(field.clamped_queries());
    extra["seconds_total"] = json!(t.elapsed().as_secs_f64());
    write_stats(&o.out, extra)
}

fn load_samples(
    splat: &GaussianSplat,
    cache: Option<&Path>,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<FieldSampleSet, CliError> {
    Ok(match cache {
        Some(p) => FieldSampleSet::load(p)?,
        None => sample_training_queries(
            splat,
            sampling.n_near,
            sampling.n_uniform,
            sampling.near_sigma,
            seed,
            &sampling.truncation,
        )?,
    })
}

fn load_points(path: &Path) -> Result<Vec<Vec3>, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        return Ok(load_ply(path)?.centers());
    }
    let text = std::fs::read_to_string(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(data(format!(
                "{} line {}: expected three finite coordinates",
                path.display(),
                i + 1
            )));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    Ok(pts)
}

fn guidance(cfg: &PipelineConfig, m: &ModelArgs) -> f64 {
    m.guidance.unwrap_or(cfg.ldm.guidance)
}

/// Samples a latent under `cond`, decodes it and extracts.
fn generate_from(
    vae: &GaussianVae,
    ldm: &Ldm,
    cond: &ConditionEmbedding,
    cfg: &PipelineConfig,
    models: &ModelArgs,
    o: &OutputArgs,
) -> Result<(), CliError> {
    if ldm.denoiser.config.latent_dim != vae.config.latent_dim {
        return Err(data(format!(
            "denoiser latent width {} does not match the VAE's {}",
            ldm.denoiser.config.latent_dim, vae.config.latent_dim
        )));
    }
    let t = Instant::now();
    let z = ldm.sample(cond, derive_seed(cfg.seed, "generate"), guidance(cfg, models))?;
    let field = vae.field(&z)?;
    let stats = json!({
        "latent": z,
        "condition": cond.source,
        "seconds_sampling": t.elapsed().as_secs_f64(),
    });
    finish_field(&field, cfg, o, stats)
}

pub fn dispatch(cmd: Command, mut cfg: PipelineConfig, ctx: &Context) -> Result<(), CliError> {
    match cmd {
        Command::Preprocess { input, out, scale_clip } => {
            if let Some(c) = scale_clip {
                cfg.scale_clip = c;
            }
            let plan = Plan {
                command: "preprocess",
                inputs: vec![&input],
                outputs: vec![out.clone()],
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let s = load_ply(&input)?;
            let s = clamp_appearance(&clip_scales(&normalize(&s)?, cfg.scale_clip)?);
            save_ply(&s, &out)?;
        }
        Command::SampleLabels {
            input,
            out,
            n_near,
            n_uniform,
            d_trunc,
            mapping,
        } => {
            let s = &mut cfg.sampling;
            s.n_near = n_near.unwrap_or(s.n_near);
            s.n_uniform = n_uniform.unwrap_or(s.n_uniform);
            s.truncation.d_trunc = d_trunc.unwrap_or(s.truncation.d_trunc);
            if let Some(m) = mapping {
                s.truncation.mapping = m.parse::<Mapping>()?;
            }
            let plan = Plan {
                command: "sample-labels",
                inputs: vec![&input],
                outputs: vec![out.clone()],
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let splat = load_ply(&input)?;
            load_samples(&splat, None, &cfg.sampling, derive_seed(cfg.seed, "sample-labels"))?.save(&out)?;
        }
        Command::FitField {
            input,
            samples,
            out,
            steps,
        } => {
            cfg.fit.steps = steps.unwrap_or(cfg.fit.steps);
            cfg.fit.seed = derive_seed(cfg.seed, "fit-field");
            let mut inputs = vec![input.as_path()];
            inputs.extend(samples.as_deref());
            let plan = Plan {
                command: "fit-field",
                inputs,
                outputs: vec![out.clone(), sidecar(&out, "stats"), sidecar(&out, "timing")],
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let t = Instant::now();
            let splat = load_ply(&input)?;
            let set = load_samples(&splat, samples.as_deref(), &cfg.sampling, derive_seed(cfg.seed, "sample-labels"))?;
            let r = fit_field(&splat, &set, &cfg.fit)?;
            r.field.save(&out)?;
            write_stats(
                &out,
                json!({
                    "final_train_loss": r.train_loss.last(),
                    "val_loss": r.val_loss,
                    "val_prob_l1": r.val_prob_l1,
                    "val_count": r.val_count,
                    "seconds_total": t.elapsed().as_secs_f64(),
                }),
            )?;
        }
        Command::TrainVae {
            manifest: mpath,
            out,
            epochs,
            beta,
            mode,
        } => {
            cfg.vae.epochs = epochs.unwrap_or(cfg.vae.epochs);
            cfg.vae.beta = beta.unwrap_or(cfg.vae.beta);
            cfg.vae.mode = mode.unwrap_or(cfg.vae.mode);
            cfg.vae.seed = derive_seed(cfg.seed, "train-vae");
            let plan = Plan {
                command: "train-vae",
                inputs: vec![&mpath],
                outputs: vec![out.clone(), sidecar(&out, "stats"), sidecar(&out, "timing")],
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let t = Instant::now();
            let entries = manifest::load(&mpath)?;
            let base = derive_seed(cfg.seed, "sample-labels");
            let mut data = Vec::with_capacity(entries.len());
            for (i, e) in entries.iter().enumerate() {
                let splat = load_ply(&e.ply)?;
                let samples = load_samples(&splat, e.samples.as_deref(), &cfg.sampling, derive_seed_n(base, i as u64))?;
                data.push(VaeExample { splat, samples });
            }
            let r = train_vae(&data, &cfg.vae, Some(&out))?;
            write_stats(
                &out,
                json!({
                    "shapes": data.len(),
                    "epoch_loss": r.epoch_loss,
                    "seconds_total": t.elapsed().as_secs_f64(),
                }),
            )?;
        }
        Command::TrainLdm {
            manifest: mpath,
            vae: vpath,
            out,
            condition,
            steps,
        } => {
            cfg.ldm.train.steps = steps.unwrap_or(cfg.ldm.train.steps);
            cfg.ldm.train.seed = derive_seed(cfg.seed, "train-ldm");
            cfg.ldm.model.seed = derive_seed(cfg.seed, "ldm-init");
            let plan = Plan {
                command: "train-ldm",
                inputs: vec![&mpath, &vpath],
                outputs: vec![out.clone(), sidecar(&out, "stats"), sidecar(&out, "timing")],
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let t = Instant::now();
            let vae = GaussianVae::load(&vpath)?;
            let entries = manifest::load(&mpath)?;
            let splats: Vec<GaussianSplat> = entries.iter().map(|e| load_ply(&e.ply)).collect::<Result<_, _>>()?;
            let inputs: Vec<EncoderInput> = splats.iter().map(EncoderInput::Splat).collect();
            let means: Vec<Vec<f64>> = vae.posterior(&inputs)?.into_iter().map(|(m, _)| m).collect();
            let mut model = cfg.ldm.model.clone();
            model.latent_dim = vae.config.latent_dim;
            let mut examples = Vec::new();
            match condition {
                CondKind::None => {
                    for m in &means {
                        examples.push(LdmExample {
                            latent: m.clone(),
                            cond: ConditionInput::Null,
                        });
                    }
                }
                CondKind::Partial => {
                    let base = derive_seed(cfg.seed, "partials");
                    for (i, (s, m)) in splats.iter().zip(&means).enumerate() {
                        for j in 0..cfg.ldm.partials_per_shape.max(1) {
                            let k = (i * cfg.ldm.partials_per_shape.max(1) + j) as u64;
                            examples.push(LdmExample {
                                latent: m.clone(),
                                cond: ConditionInput::Partial(make_partial(s, derive_seed_n(base, k))?),
                            });
                        }
                    }
                }
                CondKind::File => {
                    for (e, m) in entries.iter().zip(&means) {
                        let p = e.condition.as_ref().ok_or_else(|| {
                            data(format!("manifest entry {} has no condition file", e.ply.display()))
                        })?;
                        let v = load_condition_file(p)?;
                        if *model.file_dim.get_or_insert(v.len()) != v.len() {
                            return Err(data(format!(
                                "condition file {} has {} values, expected {}",
                                p.display(),
                                v.len(),
                                model.file_dim.unwrap_or_default()
                            )));
                        }
                        examples.push(LdmExample {
                            latent: m.clone(),
                            cond: ConditionInput::File(v),
                        });
                    }
                }
            }
            let r = train_ldm(&examples, &model, &cfg.ldm.train, Some(&out))?;
            let tail = &r.loss[r.loss.len().saturating_sub(100)..];
            write_stats(
                &out,
                json!({
                    "examples": examples.len(),
                    "latent_scale": r.ldm.latent_scale,
                    "final_loss_mean100": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                    "loss_every_100": r.loss.iter().step_by(100).collect::<Vec<_>>(),
                    "seconds_total": t.elapsed().as_secs_f64(),
                }),
            )?;
        }
        Command::Generate(g) => {
            apply_output(&mut cfg, &g.output);
            check_extract(&cfg.extract)?;
            let mut inputs = vec![g.models.vae.as_path(), g.models.ldm.as_path()];
            inputs.extend(g.condition.cond.as_deref());
            inputs.extend(g.condition.partial.as_deref());
            let plan = Plan {
                command: "generate",
                inputs,
                outputs: output_paths(&g.output),
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let vae = GaussianVae::load(&g.models.vae)?;
            let ldm = Ldm::load(&g.models.ldm)?;
            let cond = if let Some(p) = &g.condition.cond {
                ldm.denoiser.project_file(&load_condition_file(p)?)?
            } else if let Some(p) = &g.condition.partial {
                ldm.denoiser.embed_partial(&load_ply(p)?)?
            } else {
                ConditionEmbedding::null()
            };
            generate_from(&vae, &ldm, &cond, &cfg, &g.models, &g.output)?;
        }
        Command::Complete {
            input,
            models,
            output,
            partial_out,
        } => {
            apply_output(&mut cfg, &output);
            check_extract(&cfg.extract)?;
            let mut outputs = output_paths(&output);
            outputs.extend(partial_out.clone());
            let plan = Plan {
                command: "complete",
                inputs: vec![&input, &models.vae, &models.ldm],
                outputs,
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let vae = GaussianVae::load(&models.vae)?;
            let ldm = Ldm::load(&models.ldm)?;
            let partial = make_partial(&load_ply(&input)?, derive_seed(cfg.seed, "complete"))?;
            if let Some(p) = &partial_out {
                save_ply(&partial, p)?;
            }
            let cond = ldm.denoiser.embed_partial(&partial)?;
            generate_from(&vae, &ldm, &cond, &cfg, &models, &output)?;
        }
        Command::P2g { input, vae, output } => {
            apply_output(&mut cfg, &output);
            check_extract(&cfg.extract)?;
            let plan = Plan {
                command: "p2g",
                inputs: vec![&input, &vae],
                outputs: output_paths(&output),
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let model = GaussianVae::load(&vae)?;
            if model.config.mode != EncoderMode::Points {
                return Err(CliError::usage(format!(
                    "p2g needs a VAE trained in points mode, {} was trained in {} mode",
                    vae.display(),
                    model.config.mode.name()
                )));
            }
            let pts = load_points(&input)?;
            let field = model.reconstruct(EncoderInput::Points(&pts))?;
            finish_field(&field, &cfg, &output, json!({ "input_points": pts.len() }))?;
        }
        Command::Extract { field, output } => {
            apply_output(&mut cfg, &output);
            check_extract(&cfg.extract)?;
            let plan = Plan {
                command: "extract",
                inputs: vec![&field],
                outputs: output_paths(&output),
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let f = NeuralField::load(&field)?;
            finish_field(&f, &cfg, &output, json!({}))?;
        }
        Command::Metrics {
            reference,
            candidate,
            field,
            out,
        } => {
            let mut inputs = vec![reference.as_path()];
            inputs.extend(candidate.as_deref());
            inputs.extend(field.as_deref());
            let plan = Plan {
                command: "metrics",
                inputs,
                outputs: vec![out.clone(), sidecar(&out, "timing")],
            };
            if candidate.is_none() && field.is_none() {
                return Err(CliError::usage("metrics needs --candidate and/or --field"));
            }
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            let t = Instant::now();
            let r = load_ply(&reference)?;
            let mut report = MetricReport {
                reference_count: r.count(),
                ..Default::default()
            };
            if let Some(c) = &candidate {
                let c = load_ply(c)?;
                report.chamfer = Some(chamfer(&c.centers(), &r.centers())?);
                report.candidate_count = Some(c.count());
            }
            if let Some(f) = &field {
                let f = NeuralField::load(f)?;
                report.field_l1_prob = Some(field_l1(
                    &f,
                    &r,
                    &cfg.sampling,
                    cfg.metrics.n_queries,
                    derive_seed(cfg.seed, "metrics"),
                )?);
                report.attr_errors = Some(attr_error(&f, &r)?);
            }
            if !report.is_valid() {
                return Err(CliError {
                    code: 3,
                    message: "metric report holds non-finite or negative values".into(),
                });
            }
            write_json(&out, &serde_json::to_value(&report).map_err(|e| data(e.to_string()))?)?;
            write_json(&sidecar(&out, "timing"), &json!({ "seconds_total": t.elapsed().as_secs_f64() }))?;
        }
        Command::ToySet { out_dir } => {
            let names = gsfield_core::toy::TOY_NAMES;
            let mut outputs: Vec<PathBuf> = names.iter().map(|n| out_dir.join(format!("{n}.ply"))).collect();
            outputs.push(out_dir.join("manifest.txt"));
            let plan = Plan {
                command: "toy-set",
                inputs: vec![],
                outputs,
            };
            if plan.announce(&cfg, ctx)? {
                return Ok(());
            }
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| data(format!("cannot create {}: {e}", out_dir.display())))?;
            let mut manifest = String::new();
            for (name, s) in gsfield_core::toy::toy_set()? {
                save_ply(&s, &out_dir.join(format!("{name}.ply")))?;
                manifest.push_str(&format!("{name}.ply\n"));
            }
            write_atomic(&out_dir.join("manifest.txt"), manifest.as_bytes())?;
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use crate::CliError;

/// One dataset line: a splat, an optional label cache and an optional
/// condition file. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub ply: PathBuf,
    pub samples: Option<PathBuf>,
    pub condition: Option<PathBuf>,
}

/// Parses `ply [samples|-] [condition]` lines; blank lines and `#` comments
/// are skipped.
pub fn parse(text: &str, base: &Path) -> Result<Vec<Entry>, CliError> {
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() > 3 {
            return Err(CliError {
                code: 2,
                message: format!("manifest line {}: expected at most 3 columns, found {}", n + 1, cols.len()),
            });
        }
        out.push(Entry {
            ply: resolve(cols[0]),
            samples: cols.get(1).filter(|s| **s != "-").map(|s| resolve(s)),
            condition: cols.get(2).map(|s| resolve(s)),
        });
    }
    if out.is_empty() {
        return Err(CliError {
            code: 2,
            message: "manifest lists no shapes".into(),
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: 2,
        message: format!("cannot read manifest {}: {e}", path.display()),
    })?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_and_comments() {
        let m = parse("# toy\na.ply s.bin\n\n/abs/b.ply - c.gsce  # trailing\n", Path::new("/d")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].ply, PathBuf::from("/d/a.ply"));
        assert_eq!(m[0].samples, Some(PathBuf::from("/d/s.bin")));
        assert_eq!(m[1].ply, PathBuf::from("/abs/b.ply"));
        assert_eq!(m[1].samples, None);
        assert_eq!(m[1].condition, Some(PathBuf::from("/d/c.gsce")));
        assert!(parse("# nothing\n", Path::new(".")).is_err());
        assert!(parse("a b c d", Path::new(".")).is_err());
    }
}

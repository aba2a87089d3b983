use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gs_model::GaussianSplat;
use crate::io::{write_atomic, ByteReader};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GSCE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    None,
    File,
    PartialSplat,
}

/// An evaluated condition vector of the model's width E. `None` stands for
/// the learned null token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Option<Vec<f64>>,
    pub source: ConditionSource,
}

impl ConditionEmbedding {
    pub fn null() -> Self {
        Self {
            vector: None,
            source: ConditionSource::None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.vector.is_none()
    }
}

/// A raw condition before its encoder runs. Training keeps conditions in
/// this form so the projector and partial encoder receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionInput {
    Null,
    /// External vector of the projector's input width.
    File(Vec<f64>),
    Partial(GaussianSplat),
}

/// Header `GSCE`, u32 length, then little-endian f32 values.
pub fn save_condition_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_condition_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a condition embedding file", path.display())));
    }
    let n = r.u32()? as usize;
    let v: Vec<f64> = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after condition vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("condition vector holds non-finite values".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let v = vec![0.5, -1.25, 3.0];
        save_condition_file(&p, &v).unwrap();
        assert_eq!(load_condition_file(&p).unwrap(), v);
        std::fs::write(&p, b"GSCE\x02\0\0\0\0\0").unwrap();
        assert!(load_condition_file(&p).is_err());
        std::fs::write(&p, b"XXXX\0\0\0\0").unwrap();
        assert!(load_condition_file(&p).is_err());
    }
}

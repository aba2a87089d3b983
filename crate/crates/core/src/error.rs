use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input whose values violate a precondition.
    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Training or sampling produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty field: no octree cell reached the retention threshold")]
    EmptyField,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// A numerical routine reached a state its own invariants rule out.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("no box annotation for image `{image_id}`")]
    MissingAnnotation { image_id: String },

    #[error("degenerate rank after centering: need 3 components, achieved rank {rank}")]
    DegenerateRank { rank: usize },

    #[error("probe diverged at step {step} (lr = {lr})")]
    Divergence { step: usize, lr: f64 },

    #[error("bad magic: expected \"SAVT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

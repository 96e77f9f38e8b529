use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("tile origin ({row}, {col}) is not aligned to the {k}-element tile grid")]
    TileAlignment { row: usize, col: usize, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trace file: {0}")]
    TraceFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

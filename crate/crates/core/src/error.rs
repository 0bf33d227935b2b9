use thiserror::Error;

pub type Result<T> = std::result::Result<T, LasError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LasError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The UD coincides with an anchor, so a line-of-sight direction is undefined.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// The linearized system or the Fisher matrix lost column rank.
    #[error("degenerate geometry: singular value ratio {ratio:.3e} below threshold")]
    DegenerateGeometry { ratio: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),
}

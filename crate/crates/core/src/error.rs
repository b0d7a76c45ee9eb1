use thiserror::Error;

/// Errors raised by the numerical layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("expected a multivector of degree {expected}, got degree {got}")]
    DegreeMismatch { expected: usize, got: usize },
    #[error("kernel support box ({0} cells) exceeds half the periodic box ({1} cells)")]
    KernelTooWide(usize, usize),
    #[error("dilation node t = {t} under-resolved: fewer than {min_samples} samples across support at h = {h}")]
    UnderResolvedNode { t: f64, h: f64, min_samples: usize },
    #[error("kernel shell too thin for spacing h = {0}: fewer than {1} samples span it")]
    ShellTooThin(f64, usize),
    #[error("moment system singular after {0} re-seeds; choose different bump centers")]
    MomentSystemSingular(usize),
    #[error("could not certify Lipschitz constant {0} after {1} rescalings")]
    LipschitzNotCertified(f64, usize),
    #[error("aperture condition violated: sigma * A = {0} must be < 1")]
    ApertureCondition(f64),
    #[error("input field is not closed: relative ||du|| = {0}")]
    NotClosed(f64),
    #[error("support precondition violated: {0}")]
    SupportViolation(String),
    #[error("open set touches the full box; Whitney cover needs a proper subset")]
    NotProper,
    #[error("operator orientation does not match the domain side")]
    OrientationMismatch,
    #[error("field energy outside the admissible frequency band: fraction {0:.3e}")]
    OutOfBand(f64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("norm degenerate: input is numerically zero")]
    DegenerateNorm,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

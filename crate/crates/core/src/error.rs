use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("vector norm {0} deviates from 1")]
    NonUnitVector(f64),
    #[error("pixel ({x}, {y}) outside {width}x{height} grid")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("invalid equirectangular geometry {width}x{height}")]
    InvalidGeometry { width: usize, height: usize },
    #[error("all blend weights are zero")]
    AllWeightsZero,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no matches to fit")]
    EmptyMatches,
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("too few matches: need {need}, got {got}")]
    TooFewMatches { need: usize, got: usize },
    #[error("no consensus set")]
    NoConsensus,
    #[error("insufficient tracks for frame pair starting at {frame}")]
    InsufficientTracks { frame: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("flow magnitude {0} below threshold")]
    FlowTooSmall(f64),
    #[error("flow endpoints are parallel or antipodal")]
    DegenerateFlow,
    #[error("every frame of the track is missing")]
    AllMissing,
    #[error("region {0} has no pixels")]
    EmptyRegion(u32),
    #[error("no probability map available for frame {0}")]
    MissingFrames(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("objective increased at IRLS iteration {iteration}: {before} -> {after}")]
    ConvergenceFailure { iteration: usize, before: f64, after: f64 },
    #[error("conjugate gradient broke down after {0} iterations")]
    CgDivergence(usize),
    #[error("jump window {0} is infeasible")]
    InfeasibleWindow(usize),
    #[error("singular motion model at frame {0}")]
    SingularModel(usize),
    #[error("singular camera pose at frame {0}")]
    SingularPose(usize),
    #[error("singular transform")]
    SingularTransform,
    #[error("field of view {0} outside (0, 180)")]
    InvalidFov(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("run is incomplete: {0}")]
    IncompleteRun(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

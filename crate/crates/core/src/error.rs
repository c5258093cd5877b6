use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("waypoint sampling exhausted after {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("pose-log parse error at line {line}: {message}")]
    PoseLogParse { line: usize, message: String },
    #[error("non-monotone timestamp at line {line}")]
    NonMonotoneTimestamp { line: usize },
    #[error("pose outside arena: ({x}, {z})")]
    OutOfBounds { x: f64, z: f64 },
    #[error("cell ({0}, {1}) is occupied")]
    OccupiedCell(i32, i32),
    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("frame dimensions {height}x{width} not divisible by patch size {patch}")]
    IndivisibleDims { height: usize, width: usize, patch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache contract violated: {0}")]
    Cache(String),
    #[error("shard format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch")]
    ChecksumFailure,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("resolution mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ResolutionMismatch { expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },
    #[error("action count mismatch: expected {expected}, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

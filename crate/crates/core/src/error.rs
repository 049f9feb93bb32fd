use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm axis")]
    ZeroAxis,

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("camera index {0} out of range")]
    CameraIndex(usize),

    #[error("point outside camera field of view")]
    OutOfView,

    #[error("pixel outside image bounds or fisheye circle")]
    OutOfImage,

    #[error("direction not covered by any camera field of view")]
    NotCovered,

    #[error("degenerate baseline: observation rays nearly parallel")]
    DegenerateBaseline,

    #[error("degenerate plane: camera center at sphere center or parallel to bearing")]
    DegeneratePlane,

    #[error("underdetermined triangulation: fewer than two independent plane constraints")]
    Underdetermined,

    #[error("all rays parallel")]
    ParallelRays,

    #[error("non-monotonic timestamps in IMU stream")]
    NonMonotonicTimestamps,

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("pose graph: duplicate keyframe id {0}")]
    DuplicateKeyframe(u64),

    #[error("pose graph: factor references missing keyframe id {0}")]
    DanglingFactor(u64),

    #[error("pose graph: disconnected keyframes {0:?}")]
    DisconnectedGraph(Vec<u64>),

    #[error("trajectory time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("trajectory alignment failed: {0}")]
    Alignment(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

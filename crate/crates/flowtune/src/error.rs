//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// State spaces of two operands do not match, or a state violates its space.
    Space(String),
    /// Exact enumeration was requested on a space larger than the cap.
    NotEnumerable { size: u128, cap: u64 },
    /// A quantity left its mathematical domain (bad time, negative mass, ...).
    Domain(String),
    /// Strict-mode Euler kernel produced a negative staying probability.
    KernelOverstep { position: usize, stay_prob: f64 },
    /// NaN/inf encountered where a finite value is required.
    Numeric(String),
    /// A statistic is undefined on the given input (e.g. zero-variance profile).
    Undefined(String),
    /// Gradient cache does not match the current parameter version.
    StaleCache { cache_version: u64, model_version: u64 },
    /// Batch was generated by a different parameter snapshot than required.
    OffPolicy { batch_snapshot: u64, model_version: u64 },
    /// Checkpoint file is malformed or incompatible.
    Checkpoint(String),
    /// Config file parse or validation failure.
    Config { line: usize, msg: String },
    Io(std::io::Error),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Space(msg) => write!(f, "state space error: {msg}"),
            Error::NotEnumerable { size, cap } => {
                write!(f, "space not enumerable: {size} states exceeds cap {cap}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::KernelOverstep {
                position,
                stay_prob,
            } => write!(
                f,
                "euler kernel overstep at position {position}: staying probability {stay_prob} < 0 (reduce dt)"
            ),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Undefined(msg) => write!(f, "undefined: {msg}"),
            Error::StaleCache {
                cache_version,
                model_version,
            } => write!(
                f,
                "stale forward cache: built at parameter version {cache_version}, model is at {model_version}"
            ),
            Error::OffPolicy {
                batch_snapshot,
                model_version,
            } => write!(
                f,
                "off-policy batch: generated at snapshot {batch_snapshot}, model is at {model_version}"
            ),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Config { line, msg } => write!(f, "config error (line {line}): {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("assumption gate `{gate}` failed: {detail}")]
    Assumption { gate: String, detail: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("evaluation on the diagonal x = y is undefined for kernel {0}")]
    Diagonal(&'static str),
    #[error("region has zero mass")]
    ZeroMass,
    #[error("unresolvable singularity: {0}")]
    Unresolvable(String),
    #[error("cube enumeration exceeds cap ({count} > {cap}); use relaxed geometry")]
    Resolvability { count: usize, cap: usize },
    #[error("containment violation: {0}")]
    Containment(String),
    #[error("geometry precondition violated: {0}")]
    Geometry(String),
    #[error("root cube average {avg} exceeds threshold {threshold}")]
    RootAverage { avg: f64, threshold: f64 },
    #[error("combinatorial lemma violated: {0}")]
    Combinatorial(String),
    #[error("missing measurement: {0}")]
    Missing(String),
    #[error("unknown catalog function `{0}`")]
    UnknownFunction(String),
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

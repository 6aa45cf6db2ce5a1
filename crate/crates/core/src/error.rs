use thiserror::Error;

/// Broad classes used by front-ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Precondition,
    Solver,
    Verification,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("orbit cap exceeded: requested {requested} steps, cap {cap}")]
    OrbitCap { requested: usize, cap: usize },
    #[error("frame degenerate at ({x:.6}, {y:.6})")]
    FrameDegenerate { x: f64, y: f64 },
    #[error("cone iteration did not converge: angle {angle:e} above tolerance {tol:e}")]
    ConeNonConvergence { angle: f64, tol: f64 },
    #[error("window {window} longer than orbit of length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("empty H_t tail at level {t} from index {tail_start}")]
    EmptyTail { t: f64, tail_start: usize },
    #[error("point at orbit index {index} not covered at any level of the grid")]
    NotCovered { index: usize },
    #[error("insufficient orbit: need index range [{lo}, {hi}], have [0, {len}]")]
    InsufficientWindow { lo: i64, hi: i64, len: usize },
    #[error("no candidate power reaches density {theta}")]
    NoPower { theta: f64 },
    #[error("epsilon {epsilon} not below eps0 = {eps0}")]
    EpsilonTooLarge { epsilon: f64, eps0: f64 },
    #[error("zero vector")]
    ZeroVector,
    #[error("graph leaves the chart: {0}")]
    LeavesChart(String),
    #[error("radius collapse at step {step}")]
    RadiusCollapse { step: usize },
    #[error("no intersection: {0}")]
    NoIntersection(String),
    #[error("no block point within {beta:e} of an endpoint (gap {gap:e} at k = {k})")]
    NoBlockPoint { k: i64, gap: f64, beta: f64 },
    #[error("divisibility violated at k = {k}: {value} not divisible by {n}")]
    Divisibility { k: i64, value: i64, n: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ConeNonConvergence { .. }
            | Error::LeavesChart(_)
            | Error::RadiusCollapse { .. }
            | Error::NoIntersection(_)
            | Error::Solver(_) => ErrorKind::Solver,
            Error::Verification(_) => ErrorKind::Verification,
            _ => ErrorKind::Precondition,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

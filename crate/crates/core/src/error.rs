use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input contains no observations")]
    EmptyInput,

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("invalid weight {0}: weights must be finite and positive")]
    InvalidWeight(f64),

    #[error("conditioning event ({lower}, {upper}] has zero probability")]
    EmptyEvent { lower: f64, upper: f64 },

    #[error("probability level {0} is outside (0, 1)")]
    LevelOutOfRange(f64),

    #[error("horizon must be at least one day, got {0}")]
    InvalidHorizon(u32),

    #[error("need at least {required} distinct support points, found {found}")]
    SupportTooSmall { required: usize, found: usize },

    #[error("magnitudes must satisfy 0 <= m1 < m2, got m1 = {m1}, m2 = {m2}")]
    Ordering { m1: f64, m2: f64 },

    #[error("floor {floor} is not below the worst case {worst}")]
    InfeasibleFloor { floor: f64, worst: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("marginals do not match: sums {p_sum} and {q_sum}")]
    MarginalMismatch { p_sum: f64, q_sum: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid portfolio: {0}")]
    InvalidPortfolio(String),

    #[error("{obligors} obligors exceed the enumeration limit of {limit}")]
    EnumerationGuard { obligors: usize, limit: usize },

    #[error("quadrature order {0} is below the minimum of 8")]
    QuadratureOrder(usize),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

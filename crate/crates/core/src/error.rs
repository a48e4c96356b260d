use thiserror::Error;

/// Failures raised while building or reading a [`crate::data::Dataset`].
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: design weight must be positive, got {value}")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("variable of interest is missing for every unit")]
    AllMissing,
    #[error("dataset is empty")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("auxiliary column 0 must be the constant 1 (row {row} has {value})")]
    NotConstant { row: usize, value: f64 },
    #[error("nonrespondent at row {0} has not been imputed")]
    Unimputed(usize),
    #[error("MU284 data is not vendored in this build (expected crates/core/data/mu284.csv)")]
    Mu284Unavailable,
    #[error("unknown unit id `{0}`")]
    UnknownUnit(String),
}

/// Failures of the raking calibration solver.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum RakeError {
    #[error("raking did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("raking Jacobian is singular: target outside the attainable cone")]
    SingularJacobian,
    #[error("invalid raking input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PsiError {
    #[error("no respondents available as donors")]
    NoRespondents,
    #[error("every candidate donor of recipient {0} is forbidden")]
    EmptyColumn(usize),
    #[error("balanced imputation probabilities infeasible: {0}")]
    Infeasible(String),
    #[error("no feasible neighborhood size up to k = {0}")]
    AllInfeasible(usize),
    #[error("k = {k} exceeds the number of respondents ({n_r})")]
    KTooLarge { k: usize, n_r: usize },
    #[error("k = {k} is below the minimum admissible value {min}")]
    KTooSmall { k: usize, min: usize },
    #[error("neighbor count n_m*k = {nmk} must exceed Q = {q}")]
    DegenerateCorrection { nmk: usize, q: usize },
    #[error(transparent)]
    Rake(#[from] RakeError),
}

/// Top-level error used by the imputers, the harness and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error(transparent)]
    Rake(#[from] RakeError),
    #[error("SRSWOR needs n_m <= n_r (n_m = {n_m}, n_r = {n_r})")]
    NotEnoughDonors { n_m: usize, n_r: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{method} failed on response set {replicate}, imputation {imputation}: {source}")]
    Replicate {
        method: String,
        replicate: usize,
        imputation: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: String, column: String },

    #[error("non-numeric value `{value}` in column `{column}`, row {row} of {path}")]
    NonNumeric {
        path: String,
        column: String,
        row: usize,
        value: String,
    },

    #[error("non-positive value {value} in row {row}: log transform requires strictly positive values")]
    NonPositiveUnderLog { row: usize, value: f64 },

    #[error("duplicate location at rows {first} and {second}: ({lon}, {lat})")]
    DuplicateLocation {
        first: usize,
        second: usize,
        lon: f64,
        lat: f64,
    },

    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("no usable rows: every row has at least one missing category")]
    NoCompleteCases,

    #[error("too few points for mixture fit: {n} points for K = {k} (need at least {min})")]
    TooFewPoints { n: usize, k: usize, min: usize },

    #[error("all {restarts} EM restarts degenerated for K = {k}")]
    AllRestartsDegenerate { k: usize, restarts: usize },

    #[error("no converged mixture fit for any requested K")]
    NoConvergedFit,

    #[error("nonpositive anisotropy eigenvalue: phi1 = {phi1}, phi2 = {phi2}")]
    NonPositiveEigenvalue { phi1: f64, phi2: f64 },

    #[error("covariance matrix is not positive definite even after jitter escalation (n = {n})")]
    CholeskyFailure { n: usize },

    #[error("rank-deficient design matrix in trend regression")]
    RankDeficientDesign,

    #[error("empirical semivariogram has no pairs within max_dist = {max_dist}")]
    NoPairsInRange { max_dist: f64 },

    #[error("variogram fit failed on every start")]
    VariogramFitFailure,

    #[error("too few nonempty variogram bins: {found} (need at least {need})")]
    TooFewBins { found: usize, need: usize },

    #[error("invalid chain config: {0}")]
    InvalidChainConfig(String),

    #[error("initial state has non-finite likelihood after {attempts} re-initialization attempts")]
    BadInitialState { attempts: usize },

    #[error("non-finite log marginal likelihood for partition {partition_id}")]
    NonFiniteEvidence { partition_id: usize },

    #[error("partition {partition_id} has positive weight but no posterior draws")]
    MissingDraws { partition_id: usize },

    #[error("no block holdout cell contains at least {min_size} points")]
    NoBlockMeetsMinSize { min_size: usize },

    #[error("circular holdouts need m_neighbors + 1 <= n, got m = {m}, n = {n}")]
    TooFewForCircular { m: usize, n: usize },

    #[error("k-fold needs k <= n, got k = {k}, n = {n}")]
    TooManyFolds { k: usize, n: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Exit status classification: 2 for i/o and config errors, 1 for
    /// numeric or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Csv { .. }
            | Error::MissingColumn { .. }
            | Error::NonNumeric { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidChainConfig(_)
            | Error::Json { .. } => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

/// Every failure the estimation stack can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("no observations left after filtering {0}")]
    EmptyData(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("column `{0}` has zero variance and cannot be scaled")]
    DegenerateColumn(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("honest split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("residual covariance exhausted after {achieved} component(s)")]
    ResidualExhausted { achieved: usize },

    #[error("Krylov inner matrix is rank deficient (condition {condition:.3e}); use fewer components than {q}")]
    RankDeficient { q: usize, condition: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("empty policy arm: {0}")]
    ArmEmpty(String),

    #[error("tree degenerate: {0}")]
    TreeDegenerate(String),

    #[error("design matrix is singular")]
    Singular,

    #[error("coordinate descent did not converge after {sweeps} sweeps (max KKT violation {violation:.3e})")]
    Convergence { sweeps: usize, violation: f64 },

    #[error("input is a point mass (zero variance); density undefined")]
    PointMass,

    #[error("replication {replication} (seed {seed}) failed: {source}")]
    Replication {
        replication: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by the command line to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Estimation,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Schema(_) | Error::Precondition(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::EmptyData(_)
            | Error::InvalidData(_)
            | Error::DegenerateColumn(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::Replication { source, .. } => match source.class() {
                ErrorClass::Config => ErrorClass::Config,
                _ => ErrorClass::Estimation,
            },
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Estimation,
        }
    }

    /// Labels the pipeline stage that produced this error.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

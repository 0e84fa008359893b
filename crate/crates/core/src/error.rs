use thiserror::Error;

/// Errors raised anywhere in the filter stack.
#[derive(Debug, Error)]
pub enum DrfError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite after jitter{}", match .step { Some(s) => format!(" at step {s}"), None => String::new() })]
    SingularMatrix { step: Option<usize> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DrfError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DrfError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DrfError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attach a filter step index to a singular-matrix error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            DrfError::SingularMatrix { .. } => DrfError::SingularMatrix { step: Some(step) },
            other => other,
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        DrfError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any stage tags.
    pub fn root(&self) -> &DrfError {
        match self {
            DrfError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, DrfError>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented invariant or precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// The lifecycle trace does not carry enough events of one kind.
    #[error("insufficient trace: {found} {kind} events, at least {required} required")]
    InsufficientTrace {
        kind: &'static str,
        found: usize,
        required: usize,
    },

    #[error("insufficient samples: {found} provided, at least {required} required")]
    InsufficientSamples { found: usize, required: usize },

    #[error("degenerate truth curve: no threshold has true risk at or above {floor}")]
    DegenerateTruth { floor: f64 },

    /// Error raised inside a named pipeline stage.
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

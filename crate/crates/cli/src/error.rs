use slr_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("accuracy threshold {threshold:.4} not reached by: {methods}")]
    ThresholdNotReached { threshold: f64, methods: String },

    #[error(transparent)]
    Core(CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(what) => CliError::Diverged(what),
            CoreError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 ok, 1 configuration or input problems, 2 divergence, 3 threshold missed.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 2,
            CliError::ThresholdNotReached { .. } => 3,
            CliError::Config(_) | CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

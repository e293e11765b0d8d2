use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid DDIM plan: {0}")]
    Plan(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular clean-feature estimate at t={t}: alpha_bar is zero")]
    Singular { t: usize },

    #[error("timestep ordering violated: t_prev={t_prev} must be below t={t}")]
    Ordering { t: usize, t_prev: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("{file}: bad magic or version in section `{section}`: {detail}")]
    Format {
        file: &'static str,
        section: String,
        detail: String,
    },

    #[error("{file}: CRC mismatch in section `{section}`")]
    Crc { file: &'static str, section: String },

    #[error("{file}: truncated while reading section `{section}`")]
    Truncated { file: &'static str, section: String },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

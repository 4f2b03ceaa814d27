use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Network, parameter or experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor reached a layer with the wrong shape.
    #[error("shape mismatch at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    /// Caller-supplied data is out of range (labels, client counts, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed dataset file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Local training diverged on one client.
    #[error("training failed on client {client} in round {round}: {msg}")]
    Training {
        client: usize,
        round: usize,
        msg: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn shape(layer: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            msg: msg.into(),
        }
    }
}

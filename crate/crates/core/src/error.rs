use std::fmt;

/// Position of a diagnostic in a definition file (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// A positioned message produced while reading `.net` or `.solver` text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub pos: Pos,
    pub message: String,
}

impl Diagnostic {
    pub fn new(pos: Pos, message: impl Into<String>) -> Self {
        Diagnostic {
            pos,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.pos, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {0}")]
    Parse(Diagnostic),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("allocation error: {0}")]
    Alloc(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("layer `{layer}`: {message}")]
    Layer { layer: String, message: String },

    #[error("unknown blob `{name}` (available: {})", .available.join(", "))]
    UnknownBlob { name: String, available: Vec<String> },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at iteration {iter}: loss is {loss}")]
    Divergence { iter: u64, loss: f32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn layer(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Attaches a layer name to errors raised by a layer's kernels.
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Layer { .. } => self,
            Error::Shape(m) | Error::Config(m) | Error::State(m) | Error::Data(m) => {
                Error::layer(layer, m)
            }
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

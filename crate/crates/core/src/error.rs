use thiserror::Error;

pub type Result<T> = std::result::Result<T, HcpError>;

#[derive(Debug, Error)]
pub enum HcpError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("state error: {0}")]
    State(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("unsupported schema version {found} (supported: {supported}); upgrade the file first")]
    Version { found: u32, supported: u32 },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HcpError {
    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            HcpError::Shape(_) => "shape",
            HcpError::Domain(_) => "domain",
            HcpError::Contract(_) => "contract",
            HcpError::Bounds(_) => "bounds",
            HcpError::Protocol(_) => "protocol",
            HcpError::Config(_) => "config",
            HcpError::Dataset(_) => "dataset",
            HcpError::Registry(_) => "registry",
            HcpError::State(_) => "state",
            HcpError::Metric(_) => "metric",
            HcpError::NonFinite(_) => "nonfinite",
            HcpError::Version { .. } => "version",
            HcpError::Parse { .. } => "parse",
            HcpError::Io(_) => "io",
        }
    }

    /// Converts a serde_json error into a parse error carrying the byte offset
    /// of the failure within `text`.
    pub fn from_json(err: serde_json::Error, text: &str) -> Self {
        let line = err.line();
        let column = err.column();
        let offset = if line == 0 {
            0
        } else {
            text.split_inclusive('\n')
                .take(line - 1)
                .map(str::len)
                .sum::<usize>()
                + column.saturating_sub(1)
        };
        HcpError::Parse {
            offset,
            msg: err.to_string(),
        }
    }
}

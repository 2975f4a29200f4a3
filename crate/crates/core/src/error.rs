use alloc::string::String;

/// Errors surfaced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or configuration values that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called out of order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(&'static str),
    /// A loss or gradient became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// Environment labels were read on a gradient path of an unsupervised method.
    #[error("environment label read {0} time(s) during unsupervised training")]
    LabelLeak(usize),
    /// A parameter set could not be restored.
    #[error("load error: {0}")]
    Load(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

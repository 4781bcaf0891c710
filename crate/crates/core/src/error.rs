use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("{what} out of domain: {detail}")]
    Domain { what: &'static str, detail: String },
    #[error("point is behind the camera (z_c = {z_c})")]
    BehindCamera { z_c: f64 },
    #[error("non-finite activation at layer {layer} of {net}")]
    NonFinite { net: &'static str, layer: usize },
    #[error("variant {variant} does not match the supplied inputs: {detail}")]
    Variant { variant: &'static str, detail: String },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }
}

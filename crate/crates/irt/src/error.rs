use std::path::PathBuf;

pub type Result<T, E = IrtError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum IrtError {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest schema: {0}")]
    Schema(String),
    #[error("view {view}: rotation is not a proper rotation ({detail})")]
    Rotation { view: usize, detail: String },
    #[error("class palette: {0}")]
    Palette(String),
    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("capability: {0}")]
    Capability(String),
    #[error("numeric fault at step {step} (rays {rays}): {source}")]
    Numeric { step: u64, rays: String, source: irt_core::Error },
    #[error(transparent)]
    Core(#[from] irt_core::Error),
}

impl IrtError {
    /// Process exit code for this error class. 2 is reserved for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            IrtError::MissingFile { .. } => 3,
            IrtError::Io { .. } => 4,
            IrtError::Schema(_) => 5,
            IrtError::Rotation { .. } => 6,
            IrtError::Palette(_) => 7,
            IrtError::Image { .. } => 8,
            IrtError::Config(_) => 9,
            IrtError::Checkpoint { .. } => 10,
            IrtError::Capability(_) => 11,
            IrtError::Numeric { .. } => 12,
            IrtError::Core(_) => 13,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            IrtError::MissingFile { path }
        } else {
            IrtError::Io { path, source }
        }
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad configuration value; `key` is the dotted path of the offending entry.
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("cannot read {}: {detail}", path.display())]
    Input { path: PathBuf, detail: String },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] uanet_core::Error),
}

impl AppError {
    /// 2 for anything the user must fix in their invocation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config { .. } | AppError::Input { .. } => 2,
            AppError::Core(uanet_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        AppError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

pub fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| AppError::Input {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn write(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| AppError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| AppError::Io {
        path: path.to_path_buf(),
        source,
    })
}

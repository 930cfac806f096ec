use tmle_lens_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Bad configuration or input; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// A computation failed (divergence, non-finite values, degenerate data); exit code 2.
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps a core error, prefixing the pipeline stage it came from.
    pub fn core(stage: &str, e: CoreError) -> Self {
        let msg = format!("{stage}: {e}");
        match e {
            CoreError::InvalidSpec(_)
            | CoreError::InvalidParameter { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::IndexOutOfRange { .. }
            | CoreError::EmptyGrid => LabError::Validation(msg),
            _ => LabError::Numerical(msg),
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;

/// `.stage("train")` on core results.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> LabResult<T>;
}

impl<T> StageContext<T> for tmle_lens_core::Result<T> {
    fn stage(self, stage: &str) -> LabResult<T> {
        self.map_err(|e| LabError::core(stage, e))
    }
}

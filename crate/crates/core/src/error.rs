use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage that produced an error, used to tag diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Caption,
    Attention,
    Fusion,
    Encode,
    Generate,
    Optimize,
    Output,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Input => "input",
            Stage::Caption => "caption",
            Stage::Attention => "attention",
            Stage::Fusion => "fusion",
            Stage::Encode => "encode",
            Stage::Generate => "generate",
            Stage::Optimize => "optimize",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{role} backend error: {message}")]
    Backend { role: String, message: String },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("optimization diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("finite-difference oracle error: {0}")]
    Oracle(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(role: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            role: role.into(),
            message: message.into(),
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}

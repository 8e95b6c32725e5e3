use std::path::PathBuf;

use cod_lab::analysis::AnalysisError;
use cod_lab::sexpr::SexprError;
use cod_lab::taskgen::TaskgenError;
use cod_lab::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: field `{field}`: {reason}")]
    BadSpec {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}, line {line}: {reason}")]
    BadData {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no snapshots in {0}")]
    MissingSnapshots(PathBuf),
    #[error(transparent)]
    Generate(#[from] TaskgenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Sexpr(#[from] SexprError),
}

impl CliError {
    /// Stable tag printed as `error[kind]`.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::BadSpec { .. } => "bad-spec",
            CliError::BadData { .. } => "bad-data",
            CliError::MissingSnapshots(_) => "missing-snapshots",
            CliError::Generate(_) => "generate",
            CliError::Train(TrainError::Config(_)) => "config",
            CliError::Train(_) => "train",
            CliError::Analysis(_) => "analysis",
            CliError::Sexpr(_) => "sexpr",
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

use std::path::{Path, PathBuf};

use crate::criteria::CriteriaError;
use crate::data::DataError;
use crate::metrics::MetricError;
use crate::models::ModelError;
use crate::sampler::SampleError;
use crate::plot::PlotError;
use crate::schedule::ScheduleError;
use crate::train::TrainError;

/// Coarse failure class, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    MissingFile,
    Schema,
    Config,
    Other,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: unsupported format ({msg})", path.display())]
    Schema { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::MissingFile(_) => ErrorKind::MissingFile,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::MissingFile,
            Error::Data(DataError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::MissingFile
            }
            Error::Schema { .. } | Error::Data(DataError::Schema { .. }) => ErrorKind::Schema,
            Error::Config(_) => ErrorKind::Config,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Other,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source },
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Schema { path: path.to_path_buf(), msg: e.to_string() })
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

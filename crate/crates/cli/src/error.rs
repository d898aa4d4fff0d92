use std::path::{Path, PathBuf};

use bsdp_core::cluster::ClusterError;
use bsdp_core::eval::EvalError;
use bsdp_core::ggnn::GgnnError;
use bsdp_core::graph::GraphError;
use bsdp_core::ingest::IngestError;
use bsdp_core::recommend::RecommendError;
use bsdp_core::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ggnn(#[from] GgnnError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Machine-readable error class: the originating module for stage
    /// errors, otherwise the CLI's own category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Contract(_) => "contract",
            CliError::Ingest(_) => "ingest",
            CliError::Cluster(_) => "cluster",
            CliError::Graph(_) => "graph",
            CliError::Ggnn(_) => "ggnn",
            CliError::Recommend(_) => "recommend",
            CliError::Synth(_) => "synth",
            CliError::Eval(_) => "eval",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            CliError::MissingInput(p) | CliError::Io { path: p, .. } | CliError::Format { path: p, .. } => Some(p),
            _ => None,
        }
    }
}

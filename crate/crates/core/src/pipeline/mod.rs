//! End-to-end orchestration: corpus → training → ensembles → rendering →
//! scoring → simulated listening → report, with every artifact on disk.

mod artifacts;
mod config;
mod report;
mod stages;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::afp::AfpError;
use crate::corpus::CorpusError;
use crate::criteria::CriteriaError;
use crate::dsp::DspError;
use crate::eval::EvalError;

pub use artifacts::{read_features, write_features, FeatureHeader, Workspace};
pub use config::{Profile, Provenance, RunConfig, Seeds, RUN_FORMAT_VERSION};
pub use report::{report_stage, RunResults};
pub use stages::{
    ensemble_stage, evaluate, gen_corpus_stage, member_plan, render_stage, score_stage, score_standalone,
    simulate_stage, train_stage, Member, StandaloneInput, StandaloneScore, Timing,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {what}: {path} (run the earlier stage first)")]
    Missing { what: String, path: String },
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Afp(#[from] AfpError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 for usage and configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Missing { .. } => "missing_artifact",
            PipelineError::Artifact { .. } => "artifact",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Afp(_) => "afp",
            PipelineError::Dsp(_) => "dsp",
            PipelineError::Criteria(_) => "criteria",
            PipelineError::Eval(_) => "eval",
            PipelineError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn missing(what: &str, path: PathBuf) -> Self {
        PipelineError::Missing {
            what: what.to_string(),
            path: path.display().to_string(),
        }
    }
}

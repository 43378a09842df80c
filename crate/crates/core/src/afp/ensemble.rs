use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::AfpCheckpoint;
use super::model::Architecture;
use super::AfpError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnsembleLabel {
    #[serde(rename = "RNN-2")]
    Rnn2,
    #[serde(rename = "CONV-2")]
    Conv2,
    #[serde(rename = "RNN-CONV")]
    RnnConv,
    #[serde(rename = "custom")]
    Custom(String),
}

impl fmt::Display for EnsembleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleLabel::Rnn2 => f.write_str("RNN-2"),
            EnsembleLabel::Conv2 => f.write_str("CONV-2"),
            EnsembleLabel::RnnConv => f.write_str("RNN-CONV"),
            EnsembleLabel::Custom(name) => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for EnsembleLabel {
    type Err = AfpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "RNN-2" => EnsembleLabel::Rnn2,
            "CONV-2" => EnsembleLabel::Conv2,
            "RNN-CONV" => EnsembleLabel::RnnConv,
            _ => EnsembleLabel::Custom(s.trim_start_matches("custom:").to_string()),
        })
    }
}

/// Two predictors; member 0 renders version A, member 1 version B.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub label: EnsembleLabel,
    members: [Arc<AfpCheckpoint>; 2],
}

impl Ensemble {
    pub fn members(&self) -> &[Arc<AfpCheckpoint>; 2] {
        &self.members
    }

    pub fn member(&self, index: usize) -> &AfpCheckpoint {
        &self.members[index]
    }
}

/// Builds an ensemble, enforcing the label's composition rule.
pub fn build_ensemble(checkpoints: Vec<Arc<AfpCheckpoint>>, label: EnsembleLabel) -> Result<Ensemble, AfpError> {
    let members: [Arc<AfpCheckpoint>; 2] = checkpoints
        .try_into()
        .map_err(|v: Vec<_>| AfpError::Composition(format!("need exactly 2 checkpoints, got {}", v.len())))?;
    let [a, b] = &members;
    if a.model == b.model {
        return Err(AfpError::Composition("both members are the same predictor".into()));
    }
    let (arch_a, arch_b) = (a.architecture(), b.architecture());
    let same = |arch: Architecture| -> Result<(), AfpError> {
        if arch_a != arch || arch_b != arch {
            return Err(AfpError::Composition(format!(
                "{label} needs two {arch} members, got {arch_a} and {arch_b}"
            )));
        }
        if a.seed() == b.seed() {
            return Err(AfpError::Composition(format!(
                "{label} members share seed {}",
                a.seed()
            )));
        }
        Ok(())
    };
    match &label {
        EnsembleLabel::Rnn2 => same(Architecture::Recurrent)?,
        EnsembleLabel::Conv2 => same(Architecture::Convolutional)?,
        EnsembleLabel::RnnConv => {
            if arch_a == arch_b {
                return Err(AfpError::Composition(format!(
                    "RNN-CONV needs one member per architecture, got two {arch_a}"
                )));
            }
        }
        EnsembleLabel::Custom(_) => {}
    }
    Ok(Ensemble { label, members })
}

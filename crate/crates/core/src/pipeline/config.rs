use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::afp::{EnsembleLabel, TrainConfig};
use crate::corpus::CorpusConfig;
use crate::criteria::{CriterionSpec, RenderSettings};
use crate::digest::config_digest;
use crate::eval::{CiMethod, PanelConfig, DEFAULT_TAU};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Smoke,
    Full,
}

impl FromStr for Profile {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "smoke" => Ok(Profile::Smoke),
            "full" => Ok(Profile::Full),
            _ => Err(PipelineError::Config(format!("unknown profile {s:?}; expected smoke or full"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Smoke => "smoke",
            Profile::Full => "full",
        })
    }
}

/// Every source of randomness in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    /// Training seed of each architecture's first member.
    pub train_a: u64,
    /// Training seed of each architecture's second member.
    pub train_b: u64,
    pub panel: u64,
    /// Synthesis noise and the heterogeneous-ensemble member draw.
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            corpus: 20_240_917,
            train_a: 1,
            train_b: 2,
            panel: 30,
            noise: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub corpus: CorpusConfig,
    pub training: TrainConfig,
    pub render: RenderSettings,
    pub ensembles: Vec<EnsembleLabel>,
    /// Ensemble whose renditions go to the simulated listeners.
    pub study_ensemble: EnsembleLabel,
    pub criteria: Vec<CriterionSpec>,
    pub panel: PanelConfig,
    /// Also run the study with a random-preference panel.
    pub negative_control: bool,
    pub ci_method: CiMethod,
    pub diversity_tau: f64,
    pub seeds: Seeds,
    /// Upper bound on concurrent units of work; results do not depend on it.
    pub workers: usize,
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (corpus, iterations, listeners) = match profile {
            Profile::Smoke => (
                CorpusConfig {
                    train_size: 100,
                    val_size: 20,
                    test_size: 10,
                    ..CorpusConfig::default()
                },
                1000,
                10,
            ),
            Profile::Full => (CorpusConfig::default(), 5000, 30),
        };
        Self {
            profile,
            corpus,
            training: TrainConfig {
                iterations,
                ..TrainConfig::default()
            },
            render: RenderSettings::default(),
            ensembles: vec![EnsembleLabel::Rnn2, EnsembleLabel::Conv2, EnsembleLabel::RnnConv],
            study_ensemble: EnsembleLabel::RnnConv,
            criteria: CriterionSpec::defaults(),
            panel: PanelConfig {
                listeners,
                ..PanelConfig::default()
            },
            negative_control: true,
            ci_method: CiMethod::Wilson,
            diversity_tau: DEFAULT_TAU,
            seeds: Seeds::default(),
            workers: 1,
            output_dir: None,
        }
    }

    /// Profile defaults overlaid with `overrides` (a partial config object).
    /// The profile named in `overrides`, if any, picks the base; an explicit
    /// `profile` argument wins over both.
    pub fn from_json(overrides: &Value, profile: Option<Profile>) -> Result<Self, PipelineError> {
        let named = match overrides.get("profile") {
            Some(v) => Some(
                serde_json::from_value::<Profile>(v.clone())
                    .map_err(|e| PipelineError::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile.or(named).unwrap_or_default();
        let mut merged = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        merge(&mut merged, overrides);
        merged["profile"] = serde_json::to_value(profile).expect("profile serializes");
        let config: RunConfig = serde_json::from_value(merged).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !value.is_object() {
            return Err(PipelineError::Config(format!("config {} must be a JSON object", path.display())));
        }
        Self::from_json(&value, profile)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.corpus
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.criteria.is_empty() {
            return bad("at least one criterion is required".into());
        }
        if !self.ensembles.contains(&self.study_ensemble) {
            return bad(format!("study_ensemble {} is not among ensembles", self.study_ensemble));
        }
        for label in &self.ensembles {
            if matches!(label, EnsembleLabel::Custom(_)) {
                return bad(format!("pipeline ensembles are RNN-2, CONV-2 or RNN-CONV, not {label}"));
            }
        }
        if self.panel.listeners == 0 {
            return bad("panel.listeners must be positive".into());
        }
        if self.seeds.train_a == self.seeds.train_b {
            return bad("seeds.train_a and seeds.train_b must differ".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.corpus.test_size == 0 {
            return bad("corpus.test_size must be positive".into());
        }
        Ok(())
    }

    /// Digest of everything that can change a result. Output location and
    /// worker count are excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = 1;
        config_digest(&c)
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub config_digest: String,
    pub seeds: Seeds,
}

impl Provenance {
    pub fn of(config: &RunConfig) -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            config_digest: config.digest(),
            seeds: config.seeds,
        }
    }
}

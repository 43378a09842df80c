//! Simulated listening studies and their statistics.

mod accuracy;
mod diversity;
mod simulate;
mod stats;
mod study;

use thiserror::Error;

pub use accuracy::{accuracy, oracle_accuracy, oracle_select, tally, Accuracy, OracleOutcome, Tally};
pub use diversity::{diversity_report, pair_diversity, DiversityReport, PairDiversity, DEFAULT_TAU};
pub use simulate::{simulate_preferences, Choice, ExpressivityProxy, PanelConfig, PreferenceRecord, ProxyPair};
pub use stats::{binomial_two_sided, fisher_exact_two_sided, gap_closure, holm_bonferroni, proportion_ci_95, CiMethod};
pub use study::{analyze_study, CriterionOutcome, StudyResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("negative count in table {0:?}")]
    NegativeCount([[i64; 2]; 2]),
    #[error("binomial test needs k <= n, got k={k}, n={n}")]
    BadBinomial { k: u64, n: u64 },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("no gap to close: oracle {oracle} does not exceed baseline {baseline}")]
    NoGap { baseline: f64, oracle: f64 },
    #[error("no rendition pairs to simulate")]
    EmptyPairs,
    #[error("panel has no listeners")]
    NoListeners,
    #[error("invalid panel: {0}")]
    BadPanel(String),
    #[error("no criterion choice for utterance {0:?}")]
    MissingChoice(String),
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::simulate::{Choice, PreferenceRecord};
use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// `None` when no decided record was considered.
    pub rate: Option<f64>,
    pub matched: u64,
    pub considered: u64,
    /// Undecided records plus records outside the evaluated subset.
    pub excluded: u64,
}

impl Accuracy {
    pub fn total(&self) -> u64 {
        self.considered + self.excluded
    }
}

/// Per-response agreement between a selector and the listeners.
///
/// Undecided records are excluded; with `subset`, so is every record of an
/// utterance outside it.
pub fn accuracy(
    choices: &BTreeMap<String, usize>,
    records: &[PreferenceRecord],
    subset: Option<&BTreeSet<String>>,
) -> Result<Accuracy, EvalError> {
    let (mut matched, mut considered, mut excluded) = (0u64, 0u64, 0u64);
    for r in records {
        let chosen = *choices
            .get(&r.utterance_id)
            .ok_or_else(|| EvalError::MissingChoice(r.utterance_id.clone()))?;
        let included = subset.map_or(true, |s| s.contains(&r.utterance_id));
        match r.choice.index() {
            Some(pref) if included => {
                considered += 1;
                matched += u64::from(pref == chosen);
            }
            _ => excluded += 1,
        }
    }
    Ok(Accuracy {
        rate: (considered > 0).then(|| matched as f64 / considered as f64),
        matched,
        considered,
        excluded,
    })
}

/// Label counts for one utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub a: u64,
    pub b: u64,
    pub undecided: u64,
}

pub fn tally(records: &[PreferenceRecord]) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for r in records {
        let t = out.entry(r.utterance_id.clone()).or_default();
        match r.choice {
            Choice::A => t.a += 1,
            Choice::B => t.b += 1,
            Choice::Undecided => t.undecided += 1,
        }
    }
    out
}

/// Majority label per utterance, or `None` when the utterance is excluded:
/// Undecided is (jointly) the most frequent label, or A and B tie.
pub fn oracle_select(records: &[PreferenceRecord]) -> BTreeMap<String, Option<usize>> {
    tally(records)
        .into_iter()
        .map(|(id, t)| {
            let decision = if t.undecided >= t.a.max(t.b) || t.a == t.b {
                None
            } else if t.a > t.b {
                Some(0)
            } else {
                Some(1)
            };
            (id, decision)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub accuracy: Accuracy,
    pub choices: BTreeMap<String, usize>,
    pub excluded_utterances: Vec<String>,
}

impl OracleOutcome {
    pub fn included(&self) -> BTreeSet<String> {
        self.choices.keys().cloned().collect()
    }
}

pub fn oracle_accuracy(records: &[PreferenceRecord]) -> OracleOutcome {
    let mut choices = BTreeMap::new();
    let mut excluded_utterances = Vec::new();
    for (id, d) in oracle_select(records) {
        match d {
            Some(c) => {
                choices.insert(id, c);
            }
            None => excluded_utterances.push(id),
        }
    }
    let included: BTreeSet<String> = choices.keys().cloned().collect();
    // Excluded utterances still need an entry for the bookkeeping pass.
    let mut all = choices.clone();
    for id in &excluded_utterances {
        all.insert(id.clone(), 0);
    }
    let accuracy = accuracy(&all, records, Some(&included)).expect("every utterance has a choice");
    OracleOutcome {
        accuracy,
        choices,
        excluded_utterances,
    }
}

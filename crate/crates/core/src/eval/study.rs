use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::accuracy::{accuracy, oracle_accuracy, Accuracy};
use super::simulate::{Choice, PreferenceRecord};
use super::stats::{binomial_two_sided, fisher_exact_two_sided, gap_closure, holm_bonferroni, proportion_ci_95, CiMethod};
use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub label: String,
    pub accuracy: Accuracy,
    pub ci_95: (f64, f64),
    /// Two-sided binomial test against chance (0.5).
    pub p_vs_chance: f64,
    /// Two-sided Fisher test against the baseline member.
    pub p_vs_baseline: f64,
    pub p_vs_baseline_holm: f64,
    /// `None` when the oracle does not beat the baseline.
    pub gap_closure: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub total_records: u64,
    pub undecided_records: u64,
    pub ci_method: CiMethod,
    /// Accuracy of always choosing member 0 and member 1.
    pub members: [Accuracy; 2],
    /// The better single member.
    pub baseline_member: usize,
    pub baseline_ci_95: (f64, f64),
    pub oracle: Accuracy,
    pub oracle_ci_95: (f64, f64),
    pub oracle_excluded_utterances: Vec<String>,
    pub criteria: Vec<CriterionOutcome>,
}

impl StudyResult {
    pub fn criterion(&self, label: &str) -> Option<&CriterionOutcome> {
        self.criteria.iter().find(|c| c.label == label)
    }

    pub fn baseline(&self) -> &Accuracy {
        &self.members[self.baseline_member]
    }
}

fn ci(a: &Accuracy, method: CiMethod) -> (f64, f64) {
    proportion_ci_95(a.matched, a.considered, method)
}

/// Scores every selector against the records.
///
/// `criteria` maps a label to per-utterance chosen indices. Holm's
/// correction runs over the criteria's p-values against the baseline.
pub fn analyze_study(
    records: &[PreferenceRecord],
    criteria: &[(String, BTreeMap<String, usize>)],
    ci_method: CiMethod,
) -> Result<StudyResult, EvalError> {
    let ids: Vec<String> = records.iter().map(|r| r.utterance_id.clone()).collect();
    let constant = |m: usize| -> BTreeMap<String, usize> { ids.iter().map(|id| (id.clone(), m)).collect() };
    let members = [accuracy(&constant(0), records, None)?, accuracy(&constant(1), records, None)?];
    let baseline_member = usize::from(members[1].rate.unwrap_or(0.0) > members[0].rate.unwrap_or(0.0));
    let baseline = members[baseline_member];
    let oracle = oracle_accuracy(records);

    let mut outcomes = Vec::with_capacity(criteria.len());
    for (label, choices) in criteria {
        let acc = accuracy(choices, records, None)?;
        let table = [
            [acc.matched as i64, (acc.considered - acc.matched) as i64],
            [baseline.matched as i64, (baseline.considered - baseline.matched) as i64],
        ];
        let gap = match (acc.rate, baseline.rate, oracle.accuracy.rate) {
            (Some(c), Some(b), Some(o)) => gap_closure(c, b, o).ok(),
            _ => None,
        };
        outcomes.push(CriterionOutcome {
            label: label.clone(),
            accuracy: acc,
            ci_95: ci(&acc, ci_method),
            p_vs_chance: binomial_two_sided(acc.matched, acc.considered, 0.5)?,
            p_vs_baseline: fisher_exact_two_sided(table)?,
            p_vs_baseline_holm: f64::NAN,
            gap_closure: gap,
        });
    }
    let raw: Vec<f64> = outcomes.iter().map(|o| o.p_vs_baseline).collect();
    for (o, adj) in outcomes.iter_mut().zip(holm_bonferroni(&raw)) {
        o.p_vs_baseline_holm = adj;
    }

    Ok(StudyResult {
        total_records: records.len() as u64,
        undecided_records: records.iter().filter(|r| r.choice == Choice::Undecided).count() as u64,
        ci_method,
        members,
        baseline_member,
        baseline_ci_95: ci(&baseline, ci_method),
        oracle: oracle.accuracy,
        oracle_ci_95: ci(&oracle.accuracy, ci_method),
        oracle_excluded_utterances: oracle.excluded_utterances,
        criteria: outcomes,
    })
}

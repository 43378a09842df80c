use serde::{Deserialize, Serialize};

use crate::afp::{AfpError, AfpInput, Ensemble};
use crate::corpus::{ProsodyTargets, Utterance};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiversity {
    pub utterance_id: String,
    /// Mean |Δf0_z| over voiced phones (0 without any).
    pub f0: f64,
    pub logdur: f64,
    pub energy: f64,
    pub different: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub label: String,
    pub tau: f64,
    pub pairs: Vec<PairDiversity>,
    pub fraction_different: f64,
}

fn mean_abs_diff(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        sum += (x - y).abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Objective stand-in for "do A and B sound different?": the pair differs
/// when any per-feature mean absolute difference is nonzero and reaches
/// `tau`.
pub fn pair_diversity(utterance_id: &str, a: &ProsodyTargets, b: &ProsodyTargets, tau: f64) -> PairDiversity {
    let f0 = mean_abs_diff(a.voiced_f0(), b.voiced_f0());
    let logdur = mean_abs_diff(a.logdur_z.iter().copied(), b.logdur_z.iter().copied());
    let energy = mean_abs_diff(a.energy_z.iter().copied(), b.energy_z.iter().copied());
    PairDiversity {
        utterance_id: utterance_id.to_string(),
        f0,
        logdur,
        energy,
        different: [f0, logdur, energy].iter().any(|m| *m > 0.0 && *m >= tau),
    }
}

pub fn diversity_report(ensemble: &Ensemble, test: &[Utterance], tau: f64) -> Result<DiversityReport, AfpError> {
    let mut pairs = Vec::with_capacity(test.len());
    for u in test {
        let input = AfpInput::new(&u.phones, u.style_id);
        let a = ensemble.member(0).model.predict(&input)?;
        let b = ensemble.member(1).model.predict(&input)?;
        pairs.push(pair_diversity(&u.id, &a, &b, tau));
    }
    let different = pairs.iter().filter(|p| p.different).count();
    Ok(DiversityReport {
        label: ensemble.label.to_string(),
        tau,
        fraction_different: if pairs.is_empty() {
            0.0
        } else {
            different as f64 / pairs.len() as f64
        },
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(f0: &[f64]) -> ProsodyTargets {
        ProsodyTargets {
            f0_z: f0.to_vec(),
            energy_z: vec![0.0; f0.len()],
            logdur_z: vec![0.0; f0.len()],
            voiced_mask: vec![true, false, true][..f0.len()].to_vec(),
        }
    }

    #[test]
    fn identical_pairs_are_not_different() {
        let p = pair_diversity("u", &t(&[1.0, 0.0, 2.0]), &t(&[1.0, 0.0, 2.0]), 0.0);
        assert_eq!((p.f0, p.logdur, p.energy), (0.0, 0.0, 0.0));
        assert!(!p.different);
        let p = pair_diversity("u", &t(&[1.0, 0.0, 2.0]), &t(&[1.0, 0.0, 2.001]), 0.0);
        assert!(p.different);
    }

    #[test]
    fn only_voiced_f0_counts() {
        let mut b = t(&[1.6, 0.0, 2.0]);
        b.f0_z[1] = 50.0;
        let p = pair_diversity("u", &t(&[1.0, 0.0, 2.0]), &b, DEFAULT_TAU);
        assert!((p.f0 - 0.3).abs() < 1e-12);
        assert!(!p.different);
    }
}

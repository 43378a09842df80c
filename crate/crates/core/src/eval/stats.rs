//! Exact tests and intervals for the listening-study analysis.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use super::EvalError;

/// Relative slack when comparing table probabilities against the observed
/// one, so ties computed through different rounding paths still count.
const TIE_SLACK: f64 = 1e-7;
/// 97.5th percentile of the standard normal.
const Z_975: f64 = 1.959_963_984_540_054;

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

struct LnFactorials(Vec<f64>);

impl LnFactorials {
    fn up_to(n: u64) -> Self {
        let mut t = Vec::with_capacity(n as usize + 1);
        t.push(0.0);
        for k in 1..=n {
            t.push(t[k as usize - 1] + (k as f64).ln());
        }
        Self(t)
    }

    fn get(&self, n: u64) -> f64 {
        self.0[n as usize]
    }
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`: the total probability
/// of all tables with the observed margins that are no more likely than
/// the observed table.
pub fn fisher_exact_two_sided(table: [[i64; 2]; 2]) -> Result<f64, EvalError> {
    if table.iter().flatten().any(|v| *v < 0) {
        return Err(EvalError::NegativeCount(table));
    }
    let [[a, b], [c, d]] = table.map(|r| r.map(|v| v as u64));
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let lf = LnFactorials::up_to(n);
    let ln_denom = lf.get(n) - lf.get(r1) - lf.get(r2) - lf.get(c1) - lf.get(n - c1);
    let ln_p = |x: u64| -> f64 {
        -(lf.get(x) + lf.get(r1 - x) + lf.get(c1 - x) + lf.get(r2 + x - c1)) - ln_denom
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = ln_p(a).exp();
    let p: f64 = (lo..=hi)
        .map(|x| ln_p(x).exp())
        .filter(|p| *p <= observed * (1.0 + TIE_SLACK))
        .sum();
    Ok(p.min(1.0))
}

fn binomial_pmf(k: u64, n: u64, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln_choose = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
    (ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Two-sided exact binomial test of `k` successes in `n` trials.
///
/// For `p0 = 0.5` this is `2 · min(P(X ≤ k), P(X ≥ k))`; otherwise the
/// outcomes no more likely than `k` are summed.
pub fn binomial_two_sided(k: u64, n: u64, p0: f64) -> Result<f64, EvalError> {
    if k > n {
        return Err(EvalError::BadBinomial { k, n });
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(EvalError::BadProbability(p0));
    }
    let pmf: Vec<f64> = (0..=n).map(|i| binomial_pmf(i, n, p0)).collect();
    let p = if p0 == 0.5 {
        let lower: f64 = pmf[..=k as usize].iter().sum();
        let upper: f64 = pmf[k as usize..].iter().sum();
        2.0 * lower.min(upper)
    } else {
        let observed = pmf[k as usize];
        pmf.iter().filter(|p| **p <= observed * (1.0 + TIE_SLACK)).sum()
    };
    Ok(p.min(1.0))
}

/// Holm step-down adjustment; results in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| p_values[*a].total_cmp(&p_values[*b]).then(a.cmp(b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p_values[i]).min(1.0));
        adjusted[i] = running;
    }
    adjusted
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    #[default]
    Wilson,
    ClopperPearson,
}

/// 95% interval for a proportion. With no observations the interval is
/// the whole of [0, 1].
pub fn proportion_ci_95(matched: u64, considered: u64, method: CiMethod) -> (f64, f64) {
    if considered == 0 {
        return (0.0, 1.0);
    }
    let (x, n) = (matched as f64, considered as f64);
    match method {
        CiMethod::Wilson => {
            let p = x / n;
            let z2 = Z_975 * Z_975;
            let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
            let half = Z_975 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
            let lo = if matched == 0 { 0.0 } else { (centre - half).max(0.0) };
            let hi = if matched == considered { 1.0 } else { (centre + half).min(1.0) };
            (lo, hi)
        }
        CiMethod::ClopperPearson => {
            let lo = if matched == 0 {
                0.0
            } else {
                Beta::new(x, n - x + 1.0).expect("positive shapes").inverse_cdf(0.025)
            };
            let hi = if matched == considered {
                1.0
            } else {
                Beta::new(x + 1.0, n - x).expect("positive shapes").inverse_cdf(0.975)
            };
            (lo, hi)
        }
    }
}

/// Fraction of the baseline-to-oracle gap recovered by a criterion.
pub fn gap_closure(acc_criterion: f64, acc_baseline: f64, acc_oracle: f64) -> Result<f64, EvalError> {
    let denom = acc_oracle - acc_baseline;
    if denom <= 0.0 {
        return Err(EvalError::NoGap {
            baseline: acc_baseline,
            oracle: acc_oracle,
        });
    }
    Ok((acc_criterion - acc_baseline) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fisher_examples() {
        let p = fisher_exact_two_sided([[3, 1], [1, 3]]).unwrap();
        assert!((p - 0.485_714_285_714).abs() < 1e-9);
        assert_eq!(fisher_exact_two_sided([[0, 0], [0, 0]]).unwrap(), 1.0);
        assert!(fisher_exact_two_sided([[-1, 0], [0, 0]]).is_err());
    }

    #[test]
    fn binomial_examples() {
        assert_eq!(binomial_two_sided(5, 10, 0.5).unwrap(), 1.0);
        assert!((binomial_two_sided(0, 10, 0.5).unwrap() - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
        assert!(binomial_two_sided(11, 10, 0.5).is_err());
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_bonferroni(&[0.01, 0.04]), vec![0.02, 0.04]);
        assert_eq!(holm_bonferroni(&[0.04, 0.01]), vec![0.04, 0.02]);
        assert_eq!(holm_bonferroni(&[0.3; 4]), vec![1.0; 4]);
        assert_eq!(holm_bonferroni(&[0.1; 3]), vec![0.30000000000000004; 3]);
        assert!(holm_bonferroni(&[]).is_empty());
    }

    #[test]
    fn ci_examples() {
        for method in [CiMethod::Wilson, CiMethod::ClopperPearson] {
            assert_eq!(proportion_ci_95(0, 20, method).0, 0.0);
            assert_eq!(proportion_ci_95(20, 20, method).1, 1.0);
            let (lo, hi) = proportion_ci_95(50, 100, method);
            assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-9);
            assert!(lo < 0.5 && hi > 0.5);
        }
        // Reference Wilson interval for 50/100.
        let (lo, hi) = proportion_ci_95(50, 100, CiMethod::Wilson);
        assert!((lo - 0.403_831_4).abs() < 1e-6 && (hi - 0.596_168_6).abs() < 1e-6);
    }

    #[test]
    fn gap_examples() {
        assert!((gap_closure(0.6, 0.5, 0.9).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(gap_closure(0.9, 0.5, 0.9).unwrap(), 1.0);
        assert_eq!(gap_closure(0.5, 0.5, 0.9).unwrap(), 0.0);
        assert!(gap_closure(0.5, 0.6, 0.6).is_err());
    }
}

//! Viterbi search over per-frame hypotheses.

/// One hypothesis for a frame: a voiced candidate at `f0_hz`, or the
/// unvoiced state when `f0_hz` is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    pub f0_hz: Option<f64>,
    pub nccf: f64,
    pub local_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionCosts {
    /// Cost per octave of F0 change between voiced frames.
    pub octave_weight: f64,
    /// Fixed cost of entering or leaving voicing.
    pub voicing_switch: f64,
}

impl Default for TransitionCosts {
    fn default() -> Self {
        Self {
            octave_weight: 0.4,
            voicing_switch: 0.2,
        }
    }
}

impl TransitionCosts {
    pub fn cost(&self, from: &Hypothesis, to: &Hypothesis) -> f64 {
        match (from.f0_hz, to.f0_hz) {
            (Some(a), Some(b)) => self.octave_weight * (b / a).log2().abs(),
            (None, None) => 0.0,
            _ => self.voicing_switch,
        }
    }
}

/// Total cost of following `path` (one hypothesis index per frame).
pub fn path_cost(frames: &[Vec<Hypothesis>], path: &[usize], costs: &TransitionCosts) -> f64 {
    let mut total = 0.0;
    for (t, &i) in path.iter().enumerate() {
        total += frames[t][i].local_cost;
        if t > 0 {
            total += costs.cost(&frames[t - 1][path[t - 1]], &frames[t][i]);
        }
    }
    total
}

/// Minimum-cost path through `frames`, with its cost. Ties resolve to the
/// lowest hypothesis index. Every frame must offer at least one hypothesis.
pub fn viterbi(frames: &[Vec<Hypothesis>], costs: &TransitionCosts) -> (Vec<usize>, f64) {
    if frames.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut acc: Vec<f64> = frames[0].iter().map(|h| h.local_cost).collect();
    let mut back: Vec<Vec<usize>> = vec![vec![0; frames[0].len()]];
    for t in 1..frames.len() {
        let mut next = Vec::with_capacity(frames[t].len());
        let mut ptr = Vec::with_capacity(frames[t].len());
        for h in &frames[t] {
            let (best, cost) = frames[t - 1]
                .iter()
                .enumerate()
                .map(|(j, prev)| (j, acc[j] + costs.cost(prev, h)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            next.push(cost + h.local_cost);
            ptr.push(best);
        }
        acc = next;
        back.push(ptr);
    }
    let (mut state, total) = acc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let mut path = vec![0; frames.len()];
    for t in (0..frames.len()).rev() {
        path[t] = state;
        state = back[t][state];
    }
    (path, total)
}

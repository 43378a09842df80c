//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use prosody_ensemble::numkernel::{KernelError, OpKind, Tape, Tensor, Var};
use prosody_ensemble::pitch::{Hypothesis, TransitionCosts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

pub type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var, KernelError>;

/// One catalogue op: how to draw its differentiable inputs and apply it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Keeps inputs away from kinks (relu).
    pub min_abs: f64,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        min_abs: 0.0,
        build,
    }
}

pub fn catalogue() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 5], &[2, 5]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 5], &[2, 5]], |t, v| t.mul(v[0], v[1])),
        case("tanh", &[&[2, 5]], |t, v| t.tanh(v[0])),
        case("sigmoid", &[&[2, 5]], |t, v| t.sigmoid(v[0])),
        OpCase {
            min_abs: 0.05,
            ..case("relu", &[&[2, 5]], |t, v| t.relu(v[0]))
        },
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("concat_cols", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4])),
        case("mse_masked", &[&[4, 3], &[4, 3]], |t, v| {
            let mask = t.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0, 1.0]));
            t.mse_masked(v[0], v[1], mask)
        }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        case("dropout", &[&[4, 5]], |t, v| t.dropout(v[0], 0.3)),
        case("conv1d", &[&[2, 5, 3], &[3, 3, 4]], |t, v| t.conv1d(v[0], v[1])),
        case("embedding", &[&[6, 3]], |t, v| t.embedding(v[0], vec![0, 2, 2, 5])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
    ]
}

/// Every op kind of the catalogue, for a completeness check.
pub fn catalogue_kinds() -> Vec<&'static str> {
    let all = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Concat { axis: 0 },
        OpKind::Slice { axis: 0, start: 0, len: 1 },
        OpKind::Reshape { shape: vec![] },
        OpKind::MseMasked,
        OpKind::LayerNorm { eps: 1e-5 },
        OpKind::Dropout { p: 0.0 },
        OpKind::Conv1d,
        OpKind::Embedding { indices: vec![] },
        OpKind::Mean,
        OpKind::Sum,
    ];
    all.iter()
        .map(|k| match k {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Concat { .. } => "concat_rows",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::MseMasked => "mse_masked",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Conv1d => "conv1d",
            OpKind::Embedding { .. } => "embedding",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        })
        .collect()
}

const TAPE_SEED: u64 = 99;
pub const FD_STEP: f64 = 1e-5;

/// `sum(op(inputs) * weights)`, on a fresh training-mode tape so dropout
/// draws the same mask every time.
fn weighted_loss(c: &OpCase, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::with_mode(true, TAPE_SEED);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (c.build)(&mut tape, &vars).expect("op applies");
    let shape = tape.value(out).shape().to_vec();
    let w = weights
        .get_or_insert_with(|| {
            let n = shape.iter().product();
            Tensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        })
        .clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).expect("same shape");
    let loss = tape.sum(prod).expect("sum");
    (tape, vars, loss)
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        (a - n).abs() / 1e-6
    } else {
        (a - n).abs() / scale
    }
}

/// Largest relative error between the tape's gradients and central
/// differences, over `points` random input draws and every input element.
pub fn gradcheck(c: &OpCase, points: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let inputs: Vec<Tensor<f64>> = c
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let mut x: f64 = rng.gen_range(-1.5..1.5);
                        if x.abs() < c.min_abs {
                            x += c.min_abs.copysign(x) * 2.0;
                        }
                        x
                    })
                    .collect();
                Tensor::new(s.clone(), data).unwrap()
            })
            .collect();
        let mut weights = None;
        let (mut tape, vars, loss) = weighted_loss(c, &inputs, &mut weights, &mut rng);
        tape.backward(loss).expect("backward");
        let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).expect("leaf grad").to_vec()).collect();
        let eval = |inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng| {
            let mut w = weights.clone();
            let (tape, _, loss) = weighted_loss(c, inputs, &mut w, rng);
            tape.value(loss).item().unwrap()
        };
        for (i, grads) in analytic.iter().enumerate() {
            for j in 0..grads.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= FD_STEP;
                let numeric = (eval(&plus, &mut rng) - eval(&minus, &mut rng)) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grads[j], numeric));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- variance

/// Mean first, then mean squared deviation.
pub fn two_pass_variance(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------- statistics

pub fn choose_u128(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Two-sided Fisher p-value by enumerating every table with the observed
/// margins in exact integer arithmetic.
pub fn fisher_enumeration(t: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = t;
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let weight = |x: u64| choose_u128(r1, x) * choose_u128(r2, c1 - x);
    let observed = weight(a);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let num: u128 = (lo..=hi).map(weight).filter(|w| *w <= observed).sum();
    (num as f64 / choose_u128(n, c1) as f64).min(1.0)
}

/// Two-sided binomial p-value by summing the pmf of every outcome no more
/// likely than `k`.
pub fn binomial_direct(k: u64, n: u64, p: f64) -> f64 {
    let pmf: Vec<f64> = (0..=n)
        .map(|i| choose_u128(n, i) as f64 * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32))
        .collect();
    let obs = pmf[k as usize];
    pmf.iter().filter(|x| **x <= obs * (1.0 + 1e-7)).sum::<f64>().min(1.0)
}

// ---------------------------------------------------------------- pitch DP

/// Minimum total cost over every path, by exhaustive enumeration.
pub fn brute_force_path(frames: &[Vec<Hypothesis>], costs: &TransitionCosts) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::INFINITY);
    let mut idx = vec![0usize; frames.len()];
    loop {
        let mut total = 0.0;
        for (t, &i) in idx.iter().enumerate() {
            total += frames[t][i].local_cost;
            if t > 0 {
                total += costs.cost(&frames[t - 1][idx[t - 1]], &frames[t][i]);
            }
        }
        if total < best.1 {
            best = (idx.clone(), total);
        }
        let mut t = frames.len();
        loop {
            if t == 0 {
                return best;
            }
            t -= 1;
            idx[t] += 1;
            if idx[t] < frames[t].len() {
                break;
            }
            idx[t] = 0;
        }
    }
}

pub fn random_lattice(rng: &mut ChaCha8Rng, max_frames: usize, max_cands: usize) -> Vec<Vec<Hypothesis>> {
    let n = rng.gen_range(1..=max_frames);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=max_cands);
            (0..k)
                .map(|j| Hypothesis {
                    f0_hz: if j == 0 { None } else { Some(rng.gen_range(50.0..500.0)) },
                    nccf: rng.gen_range(0.0..1.0),
                    local_cost: rng.gen_range(0.0..1.0),
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------- signals

pub fn sine(freq: f64, secs: f64, amp: f64) -> Vec<f64> {
    let n = (secs * 16_000.0) as usize;
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
        .collect()
}

pub fn white_noise(secs: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..(secs * 16_000.0) as usize).map(|_| r.gen_range(-0.5..0.5)).collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

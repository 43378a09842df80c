//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into the leaves. A tape lives for one training
//! step and is dropped afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use super::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation catalogue. Attributes travel with the kind.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Elementwise; the right operand may also be a vector matching the
    /// last dimension of the left one (bias broadcast).
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Inputs: prediction `[rows, c]`, target `[rows, c]`, mask `[rows]`.
    MseMasked,
    /// Inputs: `x [.., d]`, gain `[d]`, bias `[d]`; normalizes each row.
    LayerNorm { eps: f64 },
    /// Inverted dropout. Identity when the tape is not in training mode.
    Dropout { p: f64 },
    /// Inputs: `x [b, t, c_in]`, kernel `[k, c_in, c_out]`; odd `k`,
    /// "same" zero padding.
    Conv1d,
    /// Input: table `[v, d]`; output `[indices.len(), d]`.
    Embedding { indices: Vec<usize> },
    Mean,
    Sum,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::MseMasked => "mse_masked",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Conv1d => "conv1d",
            OpKind::Embedding { .. } => "embedding",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }
}

enum Saved<F> {
    None,
    /// Layer norm: normalized input and per-row reciprocal std.
    Norm { xhat: Vec<F>, rstd: Vec<F> },
    /// Dropout: per-element multiplier (0 or 1/keep).
    Mask(Vec<F>),
    /// Conv1d: unfolded input `[b*t, k*c_in]`.
    Cols(Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    saved: Saved<F>,
    requires_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(outer, axis, inner)` sizes of a shape split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Tape<F> {
    /// A tape in inference mode (dropout disabled).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, None, vec![], Saved::None, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, None, vec![], Saved::None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[F]> {
        self.nodes[var.0].value.grad()
    }

    /// Name of the operation that produced `var`, `None` for leaves.
    pub fn op_name(&self, var: Var) -> Option<&'static str> {
        self.nodes[var.0].op.as_ref().map(OpKind::name)
    }

    fn push(
        &mut self,
        value: Tensor<F>,
        op: Option<OpKind>,
        inputs: Vec<usize>,
        saved: Saved<F>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// Applies `op` to `inputs`, recording the result on the tape.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, KernelError> {
        let arity = match op {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Conv1d => 2,
            OpKind::MseMasked | OpKind::LayerNorm { .. } => 3,
            OpKind::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(KernelError::Arity {
                op: op.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, saved) = self.forward_op(&op, inputs)?;
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Some(op), ids, saved, requires_grad))
    }

    fn forward_op(&mut self, op: &OpKind, inputs: &[Var]) -> Result<(Tensor<F>, Saved<F>), KernelError> {
        let plain = |t: Tensor<F>| Ok((t, Saved::None));
        match op {
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(mismatch("matmul", sa, sb));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![F::zero(); m * n];
                F::gemm(m, k, n, self.data(a), false, self.data(b), false, F::zero(), &mut out);
                plain(Tensor::from_parts(vec![m, n], out))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let name = op.name();
                let (da, db) = (self.data(a), self.data(b));
                let out: Vec<F> = if sa == sb {
                    match op {
                        OpKind::Add => da.iter().zip(db).map(|(x, y)| *x + *y).collect(),
                        OpKind::Sub => da.iter().zip(db).map(|(x, y)| *x - *y).collect(),
                        _ => da.iter().zip(db).map(|(x, y)| *x * *y).collect(),
                    }
                } else if matches!(op, OpKind::Add)
                    && sb.len() == 1
                    && !sa.is_empty()
                    && sa[sa.len() - 1] == sb[0]
                {
                    let d = sb[0];
                    da.iter()
                        .enumerate()
                        .map(|(i, x)| *x + db[i % d])
                        .collect()
                } else {
                    return Err(mismatch(name, sa, sb));
                };
                plain(Tensor::from_parts(sa.to_vec(), out))
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Relu => {
                let x = inputs[0];
                let f: fn(F) -> F = match op {
                    OpKind::Tanh => |v: F| v.tanh(),
                    OpKind::Sigmoid => |v: F| F::one() / (F::one() + (-v).exp()),
                    _ => |v: F| if v > F::zero() { v } else { F::zero() },
                };
                let out = self.data(x).iter().map(|v| f(*v)).collect();
                plain(Tensor::from_parts(self.shape(x).to_vec(), out))
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let first = self.shape(inputs[0]).to_vec();
                if axis >= first.len() {
                    return Err(mismatch("concat", &first, &[axis]));
                }
                let mut total = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(i, (x, y))| i == axis || x == y);
                    if !compatible {
                        return Err(mismatch("concat", &first, s));
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = split_at_axis(&first, axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for v in inputs {
                        let len = self.shape(*v)[axis] * inner;
                        out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
                    }
                }
                let mut shape = first;
                shape[axis] = total;
                plain(Tensor::from_parts(shape, out))
            }
            OpKind::Slice { axis, start, len } => {
                let s = self.shape(inputs[0]).to_vec();
                if *axis >= s.len() || start + len > s[*axis] {
                    return Err(mismatch("slice", &s, &[*axis, *start, *len]));
                }
                let (outer, size, inner) = split_at_axis(&s, *axis);
                let src = self.data(inputs[0]);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    out.extend_from_slice(&src[base..base + len * inner]);
                }
                let mut shape = s;
                shape[*axis] = *len;
                plain(Tensor::from_parts(shape, out))
            }
            OpKind::Reshape { shape } => {
                let s = self.shape(inputs[0]);
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(mismatch("reshape", s, shape));
                }
                plain(Tensor::from_parts(shape.clone(), self.data(inputs[0]).to_vec()))
            }
            OpKind::MseMasked => {
                let (p, t, m) = (inputs[0], inputs[1], inputs[2]);
                let (sp, st, sm) = (self.shape(p), self.shape(t), self.shape(m));
                if sp != st || sp.len() != 2 {
                    return Err(mismatch("mse_masked", sp, st));
                }
                if sm.len() != 1 || sm[0] != sp[0] {
                    return Err(mismatch("mse_masked", sp, sm));
                }
                let cols = sp[1];
                let (dp, dt, dm) = (self.data(p), self.data(t), self.data(m));
                let weight: F = dm.iter().copied().sum();
                let mut acc = F::zero();
                for (r, mask) in dm.iter().enumerate() {
                    if *mask == F::zero() {
                        continue;
                    }
                    let row: F = (0..cols)
                        .map(|c| {
                            let d = dp[r * cols + c] - dt[r * cols + c];
                            d * d
                        })
                        .sum();
                    acc = acc + *mask * row;
                }
                let denom = weight * F::from_f64(cols as f64);
                let loss = if denom > F::zero() { acc / denom } else { F::zero() };
                plain(Tensor::scalar(loss))
            }
            OpKind::LayerNorm { eps } => {
                let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
                let sx = self.shape(x);
                let d = *sx.last().ok_or_else(|| mismatch("layer_norm", sx, &[]))?;
                if self.shape(g) != [d] {
                    return Err(mismatch("layer_norm", sx, self.shape(g)));
                }
                if self.shape(b) != [d] {
                    return Err(mismatch("layer_norm", sx, self.shape(b)));
                }
                let rows = if d == 0 { 0 } else { self.data(x).len() / d };
                let eps = F::from_f64(*eps);
                let inv_d = F::from_f64(1.0 / d as f64);
                let (dx, dg, db) = (self.data(x), self.data(g), self.data(b));
                let mut xhat = vec![F::zero(); dx.len()];
                let mut rstd = vec![F::zero(); rows];
                let mut out = vec![F::zero(); dx.len()];
                for r in 0..rows {
                    let row = &dx[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<F>() * inv_d;
                    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
                    let rs = F::one() / (var + eps).sqrt();
                    rstd[r] = rs;
                    for c in 0..d {
                        let h = (row[c] - mean) * rs;
                        xhat[r * d + c] = h;
                        out[r * d + c] = h * dg[c] + db[c];
                    }
                }
                Ok((
                    Tensor::from_parts(sx.to_vec(), out),
                    Saved::Norm { xhat, rstd },
                ))
            }
            OpKind::Dropout { p } => {
                let x = inputs[0];
                if !(0.0..1.0).contains(p) {
                    return Err(KernelError::BadAttribute {
                        op: "dropout",
                        detail: format!("p = {p} outside [0, 1)"),
                    });
                }
                let shape = self.shape(x).to_vec();
                if !self.training {
                    return plain(Tensor::from_parts(shape, self.data(x).to_vec()));
                }
                let keep = 1.0 - p;
                let scale = F::from_f64(1.0 / keep);
                let n = self.data(x).len();
                let mask: Vec<F> = (0..n)
                    .map(|_| {
                        if self.rng.gen::<f64>() < keep {
                            scale
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let out = self.data(x).iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                Ok((Tensor::from_parts(shape, out), Saved::Mask(mask)))
            }
            OpKind::Conv1d => {
                let (x, w) = (inputs[0], inputs[1]);
                let (sx, sw) = (self.shape(x), self.shape(w));
                if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[0] % 2 == 0 {
                    return Err(mismatch("conv1d", sx, sw));
                }
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let cols = im2col(self.data(x), b, t, cin, k);
                let mut out = vec![F::zero(); b * t * cout];
                F::gemm(b * t, k * cin, cout, &cols, false, self.data(w), false, F::zero(), &mut out);
                Ok((Tensor::from_parts(vec![b, t, cout], out), Saved::Cols(cols)))
            }
            OpKind::Embedding { indices } => {
                let table = inputs[0];
                let s = self.shape(table);
                if s.len() != 2 {
                    return Err(mismatch("embedding", s, &[]));
                }
                let (v, d) = (s[0], s[1]);
                if let Some(bad) = indices.iter().find(|i| **i >= v) {
                    return Err(mismatch("embedding", s, &[*bad]));
                }
                let src = self.data(table);
                let mut out = Vec::with_capacity(indices.len() * d);
                for i in indices {
                    out.extend_from_slice(&src[i * d..(i + 1) * d]);
                }
                plain(Tensor::from_parts(vec![indices.len(), d], out))
            }
            OpKind::Mean | OpKind::Sum => {
                let data = self.data(inputs[0]);
                let total: F = data.iter().copied().sum();
                let value = match op {
                    OpKind::Mean if !data.is_empty() => total / F::from_f64(data.len() as f64),
                    OpKind::Mean => F::zero(),
                    _ => total,
                };
                plain(Tensor::scalar(value))
            }
        }
    }

    /// Propagates gradients from a single-element `loss` back to every leaf.
    ///
    /// Leaves not reachable from `loss` end up with an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), KernelError> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(KernelError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                grads[id] = Some(g);
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let contribs = self.backward_op(id, op, &g);
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[*input].requires_grad {
                    continue;
                }
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a = *a + *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if node.op.is_none() && node.requires_grad {
                let g = slot.unwrap_or_else(|| vec![F::zero(); node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Per-input gradient contributions of node `id` given its output gradient.
    fn backward_op(&self, id: usize, op: &OpKind, g: &[F]) -> Vec<Option<Vec<F>>> {
        let node = &self.nodes[id];
        let inp = |i: usize| &self.nodes[node.inputs[i]].value;
        let needs = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        match op {
            OpKind::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| {
                    let mut out = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g, false, b.data(), true, F::zero(), &mut out);
                    out
                });
                let gb = needs(1).then(|| {
                    let mut out = vec![F::zero(); k * n];
                    F::gemm(k, m, n, a.data(), true, g, false, F::zero(), &mut out);
                    out
                });
                vec![ga, gb]
            }
            OpKind::Add | OpKind::Sub => {
                let b = inp(1);
                let sign = if matches!(op, OpKind::Sub) { -F::one() } else { F::one() };
                let gb = if !needs(1) {
                    None
                } else if b.len() == g.len() {
                    Some(g.iter().map(|v| *v * sign).collect())
                } else {
                    let d = b.len();
                    let mut acc = vec![F::zero(); d];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % d] = acc[i % d] + *v;
                    }
                    Some(acc)
                };
                vec![needs(0).then(|| g.to_vec()), gb]
            }
            OpKind::Mul => {
                let (a, b) = (inp(0), inp(1));
                let ga = needs(0).then(|| g.iter().zip(b.data()).map(|(x, y)| *x * *y).collect());
                let gb = needs(1).then(|| g.iter().zip(a.data()).map(|(x, y)| *x * *y).collect());
                vec![ga, gb]
            }
            OpKind::Tanh => {
                let y = node.value.data();
                vec![Some(g.iter().zip(y).map(|(g, y)| *g * (F::one() - *y * *y)).collect())]
            }
            OpKind::Sigmoid => {
                let y = node.value.data();
                vec![Some(g.iter().zip(y).map(|(g, y)| *g * *y * (F::one() - *y)).collect())]
            }
            OpKind::Relu => {
                let x = inp(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > F::zero() { *g } else { F::zero() })
                        .collect(),
                )]
            }
            OpKind::Concat { axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|i| {
                        let len = self.nodes[*i].value.shape()[*axis];
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        Some(out)
                    })
                    .collect()
            }
            OpKind::Slice { axis, start, len } => {
                let src = inp(0);
                let (outer, size, inner) = split_at_axis(src.shape(), *axis);
                let mut out = vec![F::zero(); src.len()];
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    let from = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                vec![Some(out)]
            }
            OpKind::Reshape { .. } => vec![Some(g.to_vec())],
            OpKind::MseMasked => {
                let (p, t, m) = (inp(0), inp(1), inp(2));
                let cols = p.shape()[1];
                let weight: F = m.data().iter().copied().sum();
                let denom = weight * F::from_f64(cols as f64);
                let mut gp = vec![F::zero(); p.len()];
                if denom > F::zero() {
                    let scale = g[0] * F::from_f64(2.0) / denom;
                    for (r, mask) in m.data().iter().enumerate() {
                        for c in 0..cols {
                            let i = r * cols + c;
                            gp[i] = scale * *mask * (p.data()[i] - t.data()[i]);
                        }
                    }
                }
                let gt = gp.iter().map(|v| -*v).collect();
                vec![Some(gp), Some(gt), None]
            }
            OpKind::LayerNorm { .. } => {
                let Saved::Norm { xhat, rstd } = &node.saved else {
                    unreachable!("layer norm without saved statistics")
                };
                let gain = inp(1).data();
                let d = gain.len();
                let inv_d = F::from_f64(1.0 / d as f64);
                let mut gx = vec![F::zero(); xhat.len()];
                let mut gg = vec![F::zero(); d];
                let mut gb = vec![F::zero(); d];
                for (r, rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for c in 0..d {
                        let dh = gr[c] * gain[c];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[c];
                        gg[c] = gg[c] + gr[c] * hr[c];
                        gb[c] = gb[c] + gr[c];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for c in 0..d {
                        let dh = gr[c] * gain[c];
                        gx[r * d + c] = *rs * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }
            OpKind::Dropout { .. } => match &node.saved {
                Saved::Mask(mask) => {
                    vec![Some(g.iter().zip(mask).map(|(g, m)| *g * *m).collect())]
                }
                _ => vec![Some(g.to_vec())],
            },
            OpKind::Conv1d => {
                let Saved::Cols(cols) = &node.saved else {
                    unreachable!("conv1d without unfolded input")
                };
                let (x, w) = (inp(0), inp(1));
                let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (k, cout) = (w.shape()[0], w.shape()[2]);
                let rows = b * t;
                let gw = needs(1).then(|| {
                    let mut out = vec![F::zero(); k * cin * cout];
                    F::gemm(k * cin, rows, cout, cols, true, g, false, F::zero(), &mut out);
                    out
                });
                let gx = needs(0).then(|| {
                    let mut gcols = vec![F::zero(); rows * k * cin];
                    F::gemm(rows, cout, k * cin, g, false, w.data(), true, F::zero(), &mut gcols);
                    col2im(&gcols, b, t, cin, k)
                });
                vec![gx, gw]
            }
            OpKind::Embedding { indices } => {
                let table = inp(0);
                let d = table.shape()[1];
                let mut out = vec![F::zero(); table.len()];
                for (row, i) in indices.iter().enumerate() {
                    for c in 0..d {
                        out[i * d + c] = out[i * d + c] + g[row * d + c];
                    }
                }
                vec![Some(out)]
            }
            OpKind::Mean => {
                let n = inp(0).len();
                let v = if n > 0 { g[0] / F::from_f64(n as f64) } else { F::zero() };
                vec![Some(vec![v; n])]
            }
            OpKind::Sum => vec![Some(vec![g[0]; inp(0).len()])],
        }
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, KernelError> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, KernelError> {
        self.apply(OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, KernelError> {
        self.apply(OpKind::Reshape { shape }, &[x])
    }

    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::MseMasked, &[pred, target, mask])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, KernelError> {
        if !self.training {
            return Ok(x);
        }
        self.apply(OpKind::Dropout { p }, &[x])
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Conv1d, &[x, kernel])
    }

    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var, KernelError> {
        self.apply(OpKind::Embedding { indices }, &[table])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpKind::Sum, &[x])
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Unfolds `[b, t, c]` into `[b*t, k*c]` rows of zero-padded neighborhoods.
fn im2col<F: Scalar>(x: &[F], b: usize, t: usize, c: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let width = k * c;
    let mut cols = vec![F::zero(); b * t * width];
    for bi in 0..b {
        for ti in 0..t {
            let row = &mut cols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = (bi * t + src - pad) * c;
                row[ki * c..(ki + 1) * c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], b: usize, t: usize, c: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let width = k * c;
    let mut x = vec![F::zero(); b * t * c];
    for bi in 0..b {
        for ti in 0..t {
            let row = &cols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = (bi * t + src - pad) * c;
                for ci in 0..c {
                    x[s + ci] = x[s + ci] + row[ki * c + ci];
                }
            }
        }
    }
    x
}

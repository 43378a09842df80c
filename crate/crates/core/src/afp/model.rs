use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{Batch, Layout};
use super::AfpError;
use crate::corpus::{Phone, ProsodyTargets};
use crate::numkernel::{Tape, Tensor, Var};

/// Bi-LSTM sizes, units per direction.
pub const LSTM_DIMS: [usize; 4] = [64, 64, 32, 32];
pub const FC_DIM: usize = 16;
pub const CONV_BLOCKS: usize = 2;
pub const CONV_KERNEL: usize = 3;
pub const CONV_FILTERS: usize = 256;
pub const CONV_DROPOUT: f64 = 0.1;
pub const OUTPUT_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Recurrent,
    Convolutional,
}

impl Architecture {
    pub fn short_name(self) -> &'static str {
        match self {
            Architecture::Recurrent => "rnn",
            Architecture::Convolutional => "conv",
        }
    }

    fn layout(self) -> Layout {
        match self {
            Architecture::Recurrent => Layout::TimeMajor,
            Architecture::Convolutional => Layout::BatchMajor,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Recurrent => "recurrent",
            Architecture::Convolutional => "convolutional",
        })
    }
}

impl FromStr for Architecture {
    type Err = AfpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "recurrent" | "rnn" => Ok(Architecture::Recurrent),
            "convolutional" | "conv" => Ok(Architecture::Convolutional),
            _ => Err(AfpError::UnknownArchitecture(s.to_string())),
        }
    }
}

/// Sizes of the input side: embedding tables and their widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_phones: usize,
    pub n_styles: usize,
    pub phone_embedding: usize,
    pub style_embedding: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            n_phones: 32,
            n_styles: 8,
            phone_embedding: 32,
            style_embedding: 8,
        }
    }
}

impl ModelDims {
    /// Per-phone input width: phone embedding, style embedding, position.
    pub fn input_dim(&self) -> usize {
        self.phone_embedding + self.style_embedding + 1
    }
}

/// Parameter names and shapes of an architecture, in initialization order.
pub fn param_manifest(arch: Architecture, dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let mut m = vec![
        ("phone_embedding".to_string(), vec![dims.n_phones, dims.phone_embedding]),
        ("style_embedding".to_string(), vec![dims.n_styles, dims.style_embedding]),
    ];
    match arch {
        Architecture::Recurrent => {
            let mut input = dims.input_dim();
            for (l, h) in LSTM_DIMS.iter().enumerate() {
                for dir in ["fwd", "bwd"] {
                    m.push((format!("lstm{l}.{dir}.w_ih"), vec![input, 4 * h]));
                    m.push((format!("lstm{l}.{dir}.w_hh"), vec![*h, 4 * h]));
                    m.push((format!("lstm{l}.{dir}.bias"), vec![4 * h]));
                }
                input = 2 * h;
            }
            m.push(("fc.weight".into(), vec![input, FC_DIM]));
            m.push(("fc.bias".into(), vec![FC_DIM]));
            m.push(("proj.weight".into(), vec![FC_DIM, OUTPUT_DIM]));
            m.push(("proj.bias".into(), vec![OUTPUT_DIM]));
        }
        Architecture::Convolutional => {
            let mut input = dims.input_dim();
            for b in 0..CONV_BLOCKS {
                m.push((format!("conv{b}.weight"), vec![CONV_KERNEL, input, CONV_FILTERS]));
                m.push((format!("conv{b}.bias"), vec![CONV_FILTERS]));
                m.push((format!("conv{b}.ln_gain"), vec![CONV_FILTERS]));
                m.push((format!("conv{b}.ln_bias"), vec![CONV_FILTERS]));
                input = CONV_FILTERS;
            }
            m.push(("proj.weight".into(), vec![input, OUTPUT_DIM]));
            m.push(("proj.bias".into(), vec![OUTPUT_DIM]));
        }
    }
    m
}

/// Named parameter tensors.
pub type Parameters = BTreeMap<String, Tensor<f32>>;

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let len: usize = shape.iter().product();
    let data = if name.ends_with("ln_gain") {
        vec![1.0; len]
    } else if shape.len() == 1 {
        vec![0.0; len]
    } else {
        let (fan_in, fan_out) = match shape {
            [k, cin, cout] => (k * cin, k * cout),
            [rows, cols] => (*rows, *cols),
            _ => unreachable!("parameters are vectors, matrices or conv kernels"),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("manifest shape matches length")
}

/// The network inputs for one utterance. The 41-wide per-phone vectors are
/// assembled inside the model from these ids, since the embedding tables
/// are learned.
#[derive(Clone, Debug, PartialEq)]
pub struct AfpInput {
    pub phone_ids: Vec<usize>,
    pub voiced: Vec<bool>,
    pub style_id: usize,
}

impl AfpInput {
    pub fn new(phones: &[Phone], style_id: usize) -> Self {
        Self {
            phone_ids: phones.iter().map(|p| p.id).collect(),
            voiced: phones.iter().map(|p| p.voiced).collect(),
            style_id,
        }
    }

    pub fn len(&self) -> usize {
        self.phone_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_ids.is_empty()
    }
}

/// An acoustic feature predictor: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AfpModel {
    pub architecture: Architecture,
    pub seed: u64,
    pub dims: ModelDims,
    pub params: Parameters,
}

struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Output of a batched forward pass.
pub(crate) struct ForwardOutput {
    pub prediction: Var,
    pub layers: Vec<(String, Var)>,
}

impl AfpModel {
    pub fn build(architecture: Architecture, seed: u64, dims: ModelDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_manifest(architecture, &dims)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Self {
            architecture,
            seed,
            dims,
            params,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that parameter names and shapes match the architecture.
    pub fn check_manifest(&self) -> Result<(), AfpError> {
        let manifest = param_manifest(self.architecture, &self.dims);
        if manifest.len() != self.params.len() {
            return Err(AfpError::Manifest(format!(
                "{} parameters, architecture defines {}",
                self.params.len(),
                manifest.len()
            )));
        }
        for (name, shape) in manifest {
            match self.params.get(&name) {
                None => return Err(AfpError::Manifest(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(AfpError::Manifest(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    pub(crate) fn layout(&self) -> Layout {
        self.architecture.layout()
    }

    /// Records the forward pass for `batch` on `tape`, returning the
    /// parameter leaves and the `[rows, 3]` prediction in the model's layout.
    pub(crate) fn forward_batch(
        &self,
        tape: &mut Tape<f32>,
        batch: &Batch,
    ) -> Result<(BTreeMap<String, Var>, ForwardOutput), AfpError> {
        let bound = self.bind(tape);
        let layout = self.layout();
        let mut layers = Vec::new();
        let pe = tape.embedding(bound.get("phone_embedding"), batch.phone_indices(layout))?;
        let se = tape.embedding(bound.get("style_embedding"), batch.style_indices(layout))?;
        let pos = tape.constant(batch.positions(layout));
        let x = tape.concat(&[pe, se, pos], 1)?;
        layers.push(("input".to_string(), x));
        let prediction = match self.architecture {
            Architecture::Recurrent => self.recurrent(tape, &bound, batch, x, &mut layers)?,
            Architecture::Convolutional => self.convolutional(tape, &bound, batch, x, &mut layers)?,
        };
        Ok((bound.vars, ForwardOutput { prediction, layers }))
    }

    fn recurrent(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        batch: &Batch,
        mut x: Var,
        layers: &mut Vec<(String, Var)>,
    ) -> Result<Var, AfpError> {
        let b = batch.size();
        let t_len = batch.max_len();
        for (l, h) in LSTM_DIMS.iter().copied().enumerate() {
            let mut outputs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let name = |part: &str| format!("lstm{l}.{dir}.{part}");
                let projected = tape.matmul(x, p.get(&name("w_ih")))?;
                let projected = tape.add(projected, p.get(&name("bias")))?;
                let w_hh = p.get(&name("w_hh"));
                let zeros = Tensor::zeros(vec![b, h]);
                let mut hidden = tape.constant(zeros.clone());
                let mut cell = tape.constant(zeros);
                let mut steps = vec![hidden; t_len];
                let order: Box<dyn Iterator<Item = usize>> = if reverse {
                    Box::new((0..t_len).rev())
                } else {
                    Box::new(0..t_len)
                };
                for t in order {
                    let xt = tape.slice(projected, 0, t * b, b)?;
                    let rec = tape.matmul(hidden, w_hh)?;
                    let gates = tape.add(xt, rec)?;
                    let act = tape.sigmoid(gates)?;
                    let i = tape.slice(act, 1, 0, h)?;
                    let f = tape.slice(act, 1, h, h)?;
                    let o = tape.slice(act, 1, 3 * h, h)?;
                    let g = tape.slice(gates, 1, 2 * h, h)?;
                    let g = tape.tanh(g)?;
                    let keep = tape.mul(f, cell)?;
                    let write = tape.mul(i, g)?;
                    cell = tape.add(keep, write)?;
                    let squashed = tape.tanh(cell)?;
                    hidden = tape.mul(o, squashed)?;
                    // Running right-to-left, trailing padding must leave the
                    // state at zero until the sequence's last real phone.
                    if reverse && batch.has_padding() {
                        let m = tape.constant(batch.step_mask(t, h));
                        cell = tape.mul(cell, m)?;
                        hidden = tape.mul(hidden, m)?;
                    }
                    steps[t] = hidden;
                }
                outputs.push(tape.concat(&steps, 0)?);
            }
            x = tape.concat(&outputs, 1)?;
            layers.push((format!("lstm{l}"), x));
        }
        let fc = tape.matmul(x, p.get("fc.weight"))?;
        let fc = tape.add(fc, p.get("fc.bias"))?;
        let fc = tape.tanh(fc)?;
        layers.push(("fc".to_string(), fc));
        let out = tape.matmul(fc, p.get("proj.weight"))?;
        let out = tape.add(out, p.get("proj.bias"))?;
        layers.push(("proj".to_string(), out));
        Ok(out)
    }

    fn convolutional(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        batch: &Batch,
        x: Var,
        layers: &mut Vec<(String, Var)>,
    ) -> Result<Var, AfpError> {
        let (b, t_len) = (batch.size(), batch.max_len());
        let mut h = tape.reshape(x, vec![b, t_len, self.dims.input_dim()])?;
        let mask = batch
            .has_padding()
            .then(|| tape.constant(batch.frame_mask(CONV_FILTERS)));
        if batch.has_padding() {
            let input_mask = tape.constant(batch.frame_mask(self.dims.input_dim()));
            h = tape.mul(h, input_mask)?;
        }
        for blk in 0..CONV_BLOCKS {
            let name = |part: &str| format!("conv{blk}.{part}");
            h = tape.conv1d(h, p.get(&name("weight")))?;
            h = tape.add(h, p.get(&name("bias")))?;
            h = tape.relu(h)?;
            h = tape.layer_norm(h, p.get(&name("ln_gain")), p.get(&name("ln_bias")))?;
            h = tape.dropout(h, CONV_DROPOUT)?;
            // Padded frames must stay zero so the next convolution sees the
            // same zero padding as an unbatched sequence.
            if let Some(m) = mask {
                h = tape.mul(h, m)?;
            }
            layers.push((format!("conv{blk}"), h));
        }
        let flat = tape.reshape(h, vec![b * t_len, CONV_FILTERS])?;
        let out = tape.matmul(flat, p.get("proj.weight"))?;
        let out = tape.add(out, p.get("proj.bias"))?;
        layers.push(("proj".to_string(), out));
        Ok(out)
    }

    /// Predicts prosody for one utterance. With `train_mode` the dropout
    /// layers are active, driven by `dropout_seed`.
    pub fn forward(
        &self,
        input: &AfpInput,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<ProsodyTargets, AfpError> {
        self.validate_input(input)?;
        let batch = Batch::single(input);
        let mut tape = Tape::with_mode(train_mode, dropout_seed);
        let (_, out) = self.forward_batch(&mut tape, &batch)?;
        let pred = tape.value(out.prediction);
        if !pred.is_finite() {
            let layer = out
                .layers
                .iter()
                .find(|(_, v)| !tape.value(*v).is_finite())
                .map(|(name, _)| name.clone())
                .unwrap_or_else(|| "proj".into());
            return Err(AfpError::NonFiniteOutput { layer });
        }
        let data = pred.data();
        let n = input.len();
        let col = |c: usize| (0..n).map(|i| data[i * OUTPUT_DIM + c] as f64).collect();
        Ok(ProsodyTargets {
            f0_z: col(0),
            energy_z: col(1),
            logdur_z: col(2),
            voiced_mask: input.voiced.clone(),
        })
    }

    /// Inference-mode prediction.
    pub fn predict(&self, input: &AfpInput) -> Result<ProsodyTargets, AfpError> {
        self.forward(input, false, 0)
    }

    fn validate_input(&self, input: &AfpInput) -> Result<(), AfpError> {
        if input.is_empty() {
            return Err(AfpError::InvalidInput("empty phone sequence".into()));
        }
        if input.voiced.len() != input.len() {
            return Err(AfpError::InvalidInput("voicing mask length differs".into()));
        }
        if let Some(id) = input.phone_ids.iter().find(|id| **id >= self.dims.n_phones) {
            return Err(AfpError::InvalidInput(format!(
                "phone id {id} outside inventory of {}",
                self.dims.n_phones
            )));
        }
        if input.style_id >= self.dims.n_styles {
            return Err(AfpError::InvalidInput(format!(
                "style id {} outside {} styles",
                input.style_id, self.dims.n_styles
            )));
        }
        Ok(())
    }
}

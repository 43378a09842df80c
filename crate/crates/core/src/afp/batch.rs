//! Padded mini-batches and length-bucketed sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{AfpInput, OUTPUT_DIM};
use crate::corpus::{normalized_position, Utterance};
use crate::numkernel::Tensor;

/// Row order of a flattened `[batch, time]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Row `t * batch + b`; recurrent steps read contiguous blocks.
    TimeMajor,
    /// Row `b * time + t`; reshapes directly to `[batch, time, channels]`.
    BatchMajor,
}

#[derive(Clone, Debug)]
struct Sequence {
    phone_ids: Vec<usize>,
    style_id: usize,
    targets: Option<Vec<[f32; OUTPUT_DIM]>>,
}

/// Zero-padded batch of sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    seqs: Vec<Sequence>,
    max_len: usize,
}

impl Batch {
    pub fn single(input: &AfpInput) -> Self {
        Self {
            max_len: input.len(),
            seqs: vec![Sequence {
                phone_ids: input.phone_ids.clone(),
                style_id: input.style_id,
                targets: None,
            }],
        }
    }

    pub fn from_utterances(utts: &[&Utterance]) -> Self {
        let seqs: Vec<Sequence> = utts
            .iter()
            .map(|u| Sequence {
                phone_ids: u.phones.iter().map(|p| p.id).collect(),
                style_id: u.style_id,
                targets: Some(
                    (0..u.len())
                        .map(|i| {
                            [
                                u.targets.f0_z[i] as f32,
                                u.targets.energy_z[i] as f32,
                                u.targets.logdur_z[i] as f32,
                            ]
                        })
                        .collect(),
                ),
            })
            .collect();
        let max_len = seqs.iter().map(|s| s.phone_ids.len()).max().unwrap_or(0);
        Self { seqs, max_len }
    }

    pub fn size(&self) -> usize {
        self.seqs.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn has_padding(&self) -> bool {
        self.seqs.iter().any(|s| s.phone_ids.len() < self.max_len)
    }

    /// Number of real (unpadded) positions.
    pub fn real_positions(&self) -> usize {
        self.seqs.iter().map(|s| s.phone_ids.len()).sum()
    }

    /// Visits every grid cell in layout order as `(b, t)`.
    fn cells(&self, layout: Layout) -> Vec<(usize, usize)> {
        let (nb, nt) = (self.size(), self.max_len);
        match layout {
            Layout::TimeMajor => (0..nt).flat_map(|t| (0..nb).map(move |b| (b, t))).collect(),
            Layout::BatchMajor => (0..nb).flat_map(|b| (0..nt).map(move |t| (b, t))).collect(),
        }
    }

    pub fn phone_indices(&self, layout: Layout) -> Vec<usize> {
        self.cells(layout)
            .into_iter()
            .map(|(b, t)| self.seqs[b].phone_ids.get(t).copied().unwrap_or(0))
            .collect()
    }

    pub fn style_indices(&self, layout: Layout) -> Vec<usize> {
        self.cells(layout)
            .into_iter()
            .map(|(b, _)| self.seqs[b].style_id)
            .collect()
    }

    pub fn positions(&self, layout: Layout) -> Tensor<f32> {
        let data: Vec<f32> = self
            .cells(layout)
            .into_iter()
            .map(|(b, t)| {
                let n = self.seqs[b].phone_ids.len();
                if t < n {
                    normalized_position(t, n) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(vec![data.len(), 1], data).expect("column vector")
    }

    /// `[rows, 3]` training targets; zero on padding.
    pub fn targets(&self, layout: Layout) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.size() * self.max_len * OUTPUT_DIM);
        for (b, t) in self.cells(layout) {
            let row = self.seqs[b]
                .targets
                .as_ref()
                .and_then(|ts| ts.get(t).copied())
                .unwrap_or([0.0; OUTPUT_DIM]);
            data.extend_from_slice(&row);
        }
        let rows = data.len() / OUTPUT_DIM;
        Tensor::new(vec![rows, OUTPUT_DIM], data).expect("rows x 3")
    }

    /// `[rows]` with 1 on real positions, 0 on padding.
    pub fn mask(&self, layout: Layout) -> Tensor<f32> {
        let data = self
            .cells(layout)
            .into_iter()
            .map(|(b, t)| if t < self.seqs[b].phone_ids.len() { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(data)
    }

    /// `[batch, width]` mask for recurrent step `t`.
    pub fn step_mask(&self, t: usize, width: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.size() * width);
        for s in &self.seqs {
            let v = if t < s.phone_ids.len() { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat(v).take(width));
        }
        Tensor::new(vec![self.size(), width], data).expect("batch x width")
    }

    /// `[batch, time, width]` mask, batch-major.
    pub fn frame_mask(&self, width: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.size() * self.max_len * width);
        for s in &self.seqs {
            for t in 0..self.max_len {
                let v = if t < s.phone_ids.len() { 1.0 } else { 0.0 };
                data.extend(std::iter::repeat(v).take(width));
            }
        }
        Tensor::new(vec![self.size(), self.max_len, width], data).expect("batch x time x width")
    }
}

/// Draws batches of similar-length utterances.
///
/// Each epoch shuffles the split, cuts it into pools of `pool_batches`
/// batches, sorts every pool by length and slices it into batches, then
/// shuffles the batch order.
pub struct BucketSampler {
    lengths: Vec<usize>,
    batch_size: usize,
    pool_batches: usize,
    queue: Vec<Vec<usize>>,
}

impl BucketSampler {
    pub fn new(lengths: Vec<usize>, batch_size: usize) -> Self {
        Self {
            lengths,
            batch_size: batch_size.max(1),
            pool_batches: 8,
            queue: Vec::new(),
        }
    }

    fn refill(&mut self, rng: &mut impl Rng) {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(rng);
        let mut batches = Vec::new();
        for pool in order.chunks(self.batch_size * self.pool_batches) {
            let mut pool = pool.to_vec();
            pool.sort_by_key(|i| (self.lengths[*i], *i));
            batches.extend(pool.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(rng);
        batches.reverse();
        self.queue = batches;
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill(rng);
        }
        self.queue.pop().unwrap_or_default()
    }
}

/// Deterministic length-sorted batches covering every index once.
pub fn sorted_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|i| (lengths[*i], *i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

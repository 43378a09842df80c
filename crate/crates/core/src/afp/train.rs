//! Mini-batch training of a predictor against ground-truth prosody.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{sorted_batches, Batch, BucketSampler};
use super::checkpoint::{AfpCheckpoint, TrainingMeta};
use super::model::AfpModel;
use super::AfpError;
use crate::corpus::{Corpus, Utterance};
use crate::digest::config_digest;
use crate::numkernel::{adam_step, AdamConfig, AdamState, KernelError, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Validation cadence in iterations; the final iteration is always
    /// evaluated.
    pub eval_every: usize,
    /// Stop as soon as a validation check falls below this value.
    pub target_val_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 16,
            adam: AdamConfig::default(),
            eval_every: 250,
            target_val_loss: None,
        }
    }
}

/// One line of the training loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

/// Masked mean squared error over every real phone of `utts`, inference mode.
pub fn validation_loss(model: &AfpModel, utts: &[Utterance]) -> Result<f64, AfpError> {
    let lengths: Vec<usize> = utts.iter().map(Utterance::len).collect();
    let layout = model.layout();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for idx in sorted_batches(&lengths, 16) {
        let members: Vec<&Utterance> = idx.iter().map(|i| &utts[*i]).collect();
        let batch = Batch::from_utterances(&members);
        let mut tape = Tape::new();
        let (_, out) = model.forward_batch(&mut tape, &batch)?;
        let targets = tape.constant(batch.targets(layout));
        let mask = tape.constant(batch.mask(layout));
        let loss = tape.mse_masked(out.prediction, targets, mask)?;
        let value = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
        let n = batch.real_positions();
        sum += value * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains `model` on the corpus' train split, validating on its val split.
///
/// `log` receives the iteration-0 validation loss and one entry per
/// validation check.
pub fn train(
    mut model: AfpModel,
    corpus: &Corpus,
    config: &TrainConfig,
    mut log: impl FnMut(&LossLogEntry),
) -> Result<AfpCheckpoint, AfpError> {
    if corpus.train.is_empty() {
        return Err(AfpError::EmptyTrainSplit);
    }
    let digest = config_digest(&(
        model.architecture,
        model.seed,
        &model.dims,
        config,
        corpus.config_digest(),
    ));
    let initial_val_loss = validation_loss(&model, &corpus.val)?;
    log(&LossLogEntry {
        iteration: 0,
        train_loss: None,
        val_loss: initial_val_loss,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x7472_6169_6e5f_7267);
    let mut sampler = BucketSampler::new(corpus.train.iter().map(Utterance::len).collect(), config.batch_size);
    let mut states: BTreeMap<String, AdamState> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), AdamState::new(t.len(), config.adam)))
        .collect();
    let layout = model.layout();
    let eval_every = config.eval_every.max(1);

    let mut final_train = None;
    let mut final_val = initial_val_loss;
    let (mut window_sum, mut window_n) = (0.0f64, 0usize);
    let mut done = 0;
    for iteration in 1..=config.iterations {
        let idx = sampler.next_batch(&mut rng);
        let members: Vec<&Utterance> = idx.iter().map(|i| &corpus.train[*i]).collect();
        let batch = Batch::from_utterances(&members);
        let mut tape = Tape::with_mode(true, rng.gen());
        let (vars, out) = model.forward_batch(&mut tape, &batch)?;
        let targets = tape.constant(batch.targets(layout));
        let mask = tape.constant(batch.mask(layout));
        let loss = tape.mse_masked(out.prediction, targets, mask)?;
        let loss_value = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
        if !loss_value.is_finite() {
            return Err(AfpError::Divergence { iteration });
        }
        tape.backward(loss)?;
        for (name, var) in &vars {
            let grad = tape.grad(*var).expect("parameter leaves receive gradients");
            let param = model.params.get_mut(name).expect("bound from the same map");
            let state = states.get_mut(name).expect("state per parameter");
            match adam_step(param.data_mut(), grad, state) {
                Ok(()) => {}
                Err(KernelError::NonFiniteGradient) => {
                    log::warn!("iteration {iteration}: non-finite gradient for {name}, update skipped");
                }
                Err(e) => return Err(e.into()),
            }
        }
        window_sum += loss_value;
        window_n += 1;
        done = iteration;

        if iteration % eval_every == 0 || iteration == config.iterations {
            let val_loss = validation_loss(&model, &corpus.val)?;
            if !val_loss.is_finite() {
                return Err(AfpError::Divergence { iteration });
            }
            let train_loss = window_sum / window_n as f64;
            (window_sum, window_n) = (0.0, 0);
            final_train = Some(train_loss);
            final_val = val_loss;
            log(&LossLogEntry {
                iteration,
                train_loss: Some(train_loss),
                val_loss,
            });
            if config.target_val_loss.is_some_and(|target| val_loss < target) {
                break;
            }
        }
    }
    Ok(AfpCheckpoint {
        model,
        meta: TrainingMeta {
            iterations: done,
            initial_val_loss,
            final_train_loss: final_train,
            final_val_loss: final_val,
            config_digest: digest,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afp::{Architecture, ModelDims};
    use crate::corpus::{gen_corpus, CorpusConfig};

    fn tiny_corpus() -> Corpus {
        gen_corpus(
            &CorpusConfig {
                train_size: 20,
                val_size: 4,
                test_size: 2,
                max_phones: 16,
                ..CorpusConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let corpus = tiny_corpus();
        let model = AfpModel::build(Architecture::Recurrent, 3, ModelDims::default());
        let config = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let ckpt = train(model.clone(), &corpus, &config, |_| {}).unwrap();
        assert_eq!(ckpt.model, model);
        assert_eq!(ckpt.meta.iterations, 0);
        assert_eq!(ckpt.meta.final_val_loss, ckpt.meta.initial_val_loss);
    }

    #[test]
    fn empty_train_split_rejected() {
        let mut corpus = tiny_corpus();
        corpus.train.clear();
        let model = AfpModel::build(Architecture::Convolutional, 3, ModelDims::default());
        assert!(matches!(
            train(model, &corpus, &TrainConfig::default(), |_| {}),
            Err(AfpError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            iterations: 6,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut entries = Vec::new();
            let model = AfpModel::build(Architecture::Convolutional, 8, ModelDims::default());
            let ckpt = train(model, &corpus, &config, |e| entries.push(*e)).unwrap();
            (ckpt, entries)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a.model, b.model);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.iter().map(|e| e.iteration).collect::<Vec<_>>(), vec![0, 3, 6]);
    }

    #[test]
    fn divergence_reports_iteration() {
        let corpus = tiny_corpus();
        let mut model = AfpModel::build(Architecture::Convolutional, 8, ModelDims::default());
        model.params.get_mut("proj.bias").unwrap().data_mut()[0] = f32::INFINITY;
        let config = TrainConfig {
            iterations: 3,
            ..TrainConfig::default()
        };
        // The first training loss is already infinite.
        let err = train(model, &corpus, &config, |_| {}).unwrap_err();
        assert!(matches!(err, AfpError::Divergence { iteration: 1 }), "{err:?}");
    }
}

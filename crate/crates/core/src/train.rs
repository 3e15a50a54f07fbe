//! Training loop and evaluation.
//!
//! All randomness is derived from the run seed and the epoch or step counter,
//! so a run restored from a checkpoint continues exactly like an
//! uninterrupted one.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_batch, AugmentConfig};
use crate::ctc::{beam_search, ctc_loss_batch, greedy_decode, FrameLogProbs, LabelSeq};
use crate::data::{pad_batch, AlphabetCodec, Sample};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Scored};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig, LrSchedule, PolyakState};
use crate::tensor::{Real, Tensor};

/// Smallest batch for which batch renormalization is defined.
pub const MIN_BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub polyak_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Stop once validation CER falls to this value.
    pub target_cer: Option<f64>,
    pub beam_width: usize,
    pub top_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            polyak_decay: 0.999,
            augment: AugmentConfig::default(),
            seed: 0,
            target_cer: None,
            beam_width: 10,
            top_n: 6,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < MIN_BATCH {
            v.push(format!(
                "batch_size must be at least {MIN_BATCH} for batch renormalization, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        v.extend(self.schedule.violations());
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            v.push(format!("adam betas must lie in [0, 1), got {} and {}", a.beta1, a.beta2));
        }
        if !(a.epsilon > 0.0) {
            v.push(format!("adam epsilon must be positive, got {}", a.epsilon));
        }
        if !(0.0..1.0).contains(&self.polyak_decay) {
            v.push(format!("polyak_decay must lie in [0, 1), got {}", self.polyak_decay));
        }
        v.extend(self.augment.violations());
        if self.beam_width == 0 {
            v.push("beam_width must be at least 1".into());
        }
        if self.top_n == 0 {
            v.push("top_n must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Everything a run needs to continue.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub polyak: PolyakState<T>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, config: &TrainConfig) -> Self {
        TrainState {
            adam: Adam::new(&model.store, config.adam),
            polyak: PolyakState::new(&model.store, config.polyak_decay),
            model,
            epoch: 0,
            step: 0,
            seed: config.seed,
        }
    }

    /// The model with Polyak-averaged parameters.
    pub fn averaged_model(&self) -> Model<T> {
        let mut m = self.model.clone();
        m.store = self.polyak.averaged(&self.model.store);
        m
    }
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_DOMAIN: u64 = 1 << 62;
const DROPOUT_DOMAIN: u64 = 1 << 61;

/// Sample order of `epoch`: a permutation of `0..n`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, SHUFFLE_DOMAIN + epoch));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean CTC loss over the feasible samples of the batch.
    pub loss: f64,
    pub lr: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Forward and backward pass without touching the model. Returns the loss,
/// per-trainable-parameter gradients (in `Adam::ids` order) and the batch
/// norm updates.
pub fn compute_gradients<T: Real>(
    state: &TrainState<T>,
    images: &Tensor<T>,
    widths: &[usize],
    targets: &[LabelSeq],
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor<T>>, Vec<crate::layers::BatchNormUpdate<T>>)> {
    let model = &state.model;
    let mut f = model.begin(true, true, dropout_seed);
    let x = f.graph.input(images.clone());
    let out = model.forward(&mut f, x)?;
    let out_val = f.graph.value(out).clone();
    let [n, _, w, c] = out_val.dims4("training")?;
    let seqs = FrameLogProbs::batch_from_output(&out_val, Some(widths))?;
    let (loss, per_sample) = ctc_loss_batch(&seqs, targets)?;
    let mut grad = vec![T::zero(); n * w * c];
    for (i, g) in per_sample.iter().enumerate() {
        for (dst, &src) in grad[i * w * c..].iter_mut().zip(g) {
            *dst = T::from_f64(src);
        }
    }
    let grad = Tensor::from_vec(&[n, 1, w, c], grad)?;
    let l = f.graph.external_loss(out, T::from_f64(loss), grad)?;
    let mut grads = f.graph.backward(l)?;
    let out_grads = state
        .adam
        .ids
        .iter()
        .map(|&id| {
            let v = f.bindings.var(id);
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()))
        })
        .collect();
    Ok((loss, out_grads, f.bn_updates))
}

/// One optimizer step on `batch`. Samples whose transcript cannot be aligned
/// to their width are dropped from the batch.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &[&Sample<T>], config: &TrainConfig) -> Result<StepOutcome> {
    let (feasible, skipped): (Vec<&Sample<T>>, Vec<&Sample<T>>) =
        batch.iter().partition(|s| s.labels.min_frames() <= s.width());
    for s in &skipped {
        log::warn!(
            "skipping sample {}: {} frames cannot emit {:?}",
            s.id,
            s.width(),
            s.transcript
        );
    }
    let lr = config.schedule.lr_at(state.step);
    let step = state.step;
    state.step += 1;
    if feasible.is_empty() {
        return Ok(StepOutcome {
            loss: f64::NAN,
            lr,
            used: 0,
            skipped: skipped.len(),
        });
    }
    let images: Vec<&Tensor<T>> = feasible.iter().map(|s| &s.image).collect();
    let (padded, widths) = pad_batch(&images)?;
    let mut aug_rng = derived_rng(config.augment.rng_seed, step);
    let (padded, _) = augment_batch(&padded, &config.augment, &mut aug_rng)?;
    let targets: Vec<LabelSeq> = feasible.iter().map(|s| s.labels.clone()).collect();
    let dropout_seed = derived_rng(state.seed, DROPOUT_DOMAIN + step).random();
    let (loss, grads, updates) = compute_gradients(state, &padded, &widths, &targets, dropout_seed)?;
    state.adam.step(&mut state.model.store, &grads, lr)?;
    state.model.apply_batch_norm_updates(&updates);
    state.polyak.update(&state.model.store);
    Ok(StepOutcome {
        loss,
        lr,
        used: feasible.len(),
        skipped: skipped.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    /// Mean of the finite per-step losses.
    pub mean_loss: f64,
    pub steps: usize,
    pub samples: usize,
    pub skipped: usize,
    pub seconds: f64,
    pub samples_per_second: f64,
    pub last_lr: f64,
}

/// One shuffled pass over `samples` without replacement.
pub fn train_epoch<T: Real>(state: &mut TrainState<T>, samples: &[Sample<T>], config: &TrainConfig) -> Result<EpochStats> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let order = epoch_order(state.seed, state.epoch, samples.len());
    let mut loss_sum = 0.0;
    let mut finite = 0;
    let mut used = 0;
    let mut skipped = 0;
    let mut steps = 0;
    let mut last_lr = config.schedule.lr_at(state.step);
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
        let out = train_step(state, &batch, config)?;
        if out.loss.is_finite() {
            loss_sum += out.loss;
            finite += 1;
        }
        used += out.used;
        skipped += out.skipped;
        steps += 1;
        last_lr = out.lr;
    }
    state.epoch += 1;
    let seconds = start.elapsed().as_secs_f64();
    Ok(EpochStats {
        epoch: state.epoch,
        mean_loss: if finite > 0 { loss_sum / finite as f64 } else { f64::NAN },
        steps,
        samples: used,
        skipped,
        seconds,
        samples_per_second: used as f64 / seconds.max(1e-9),
        last_lr,
    })
}

/// Inference-mode log-probabilities of one sample as frame rows.
pub fn frame_log_probs<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<FrameLogProbs> {
    let out = model.infer(image)?;
    Ok(FrameLogProbs::batch_from_output(&out, None)?.remove(0))
}

/// Greedy transcripts of every sample, scored as top-1 candidates.
pub fn evaluate_greedy<T: Real>(model: &Model<T>, samples: &[Sample<T>], codec: &AlphabetCodec) -> Result<MetricsReport> {
    let scored = samples
        .par_iter()
        .map(|s| {
            let lp = frame_log_probs(model, &s.image)?;
            Ok(Scored {
                truth: s.transcript.clone(),
                candidates: vec![codec.decode(&greedy_decode(&lp))],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scored(&scored, 1)
}

/// Beam-search evaluation with CER@TopN for `N = 1..=top_n`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[Sample<T>],
    codec: &AlphabetCodec,
    beam_width: usize,
    top_n: usize,
) -> Result<MetricsReport> {
    let scored = samples
        .par_iter()
        .map(|s| {
            let lp = frame_log_probs(model, &s.image)?;
            let candidates = beam_search(&lp, beam_width, top_n)
                .into_iter()
                .map(|h| codec.decode(&h.labels))
                .collect();
            Ok(Scored {
                truth: s.transcript.clone(),
                candidates,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scored(&scored, top_n)
}

/// One validation record of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stats: EpochStats,
    pub step: u64,
    pub val_cer: Option<f64>,
}

impl EpochRecord {
    /// A single `key=value` line for the metrics log.
    pub fn log_line(&self) -> String {
        let s = &self.stats;
        let mut line = format!(
            "epoch={} step={} lr={:e} loss={:.6} samples={} skipped={} seconds={:.3}",
            s.epoch, self.step, s.last_lr, s.mean_loss, s.samples, s.skipped, s.seconds
        );
        if let Some(c) = self.val_cer {
            line.push_str(&format!(" val_cer={c:.6}"));
        }
        line
    }
}

/// Trains until `config.epochs` epochs are complete or the greedy validation
/// CER of the averaged model reaches `config.target_cer`. `on_epoch` sees
/// every record and the state after it.
pub fn fit<T: Real>(
    state: &mut TrainState<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    codec: &AlphabetCodec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    while (state.epoch as usize) < config.epochs {
        let stats = train_epoch(state, train, config)?;
        let val_cer = if val.is_empty() {
            None
        } else {
            Some(evaluate_greedy(&state.averaged_model(), val, codec)?.cer)
        };
        let rec = EpochRecord {
            stats,
            step: state.step,
            val_cer,
        };
        log::info!("{}", rec.log_line());
        on_epoch(&rec, state)?;
        let done = matches!((val_cer, config.target_cer), (Some(c), Some(t)) if c <= t);
        records.push(rec);
        if done {
            break;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_of_one_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("at least 2"), "{err}");
        assert!(err.contains("batch renormalization"), "{err}");
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 5, 100);
        assert_ne!(o, (0..100).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..100).collect::<Vec<_>>());
        assert_eq!(epoch_order(3, 5, 100), epoch_order(3, 5, 100));
    }
}

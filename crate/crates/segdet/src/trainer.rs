//! Training: the Adam optimizer, the alternating-phase step, and the full
//! `fit` loop with logging, validation, and checkpointing.
//!
//! Each training step runs two phases. The detection phase draws `n_det`
//! batches from the full pool and optimizes the joint loss — the box loss
//! plus the mask loss in which samples without masks carry zero weight —
//! through every parameter. The segmentation phase then draws `n_seg`
//! batches from the mask-annotated subset and optimizes the mask loss alone,
//! touching only the mask network: the box head is not part of that graph
//! and is left bit-identical. A loss ledger tracks the most recent value of
//! each phase (the segmentation entry starts at 1, the mask loss's upper
//! bound) and reports their sum as the joint loss of the step.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, AdamSlotState, TrainerState};
use crate::data::{self, BatchStream, Sample};
use crate::dethead::{det_loss, DetLossBreakdown, DetLossWeights, DetectionTarget};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::segnet::seg_loss_weighted;
use crate::tensor::{Mode, Tape, Tensor};

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Detection-supervised batches per step.
    pub n_det: usize,
    /// Segmentation-only batches per step.
    pub n_seg: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: u64,
    /// Fraction of the dataset held out for validation by [`Trainer::fit`].
    pub validation_fraction: f64,
    /// Validate (and consider checkpointing the best model) every this many
    /// steps. 0 disables validation.
    pub validation_every: u64,
    /// Write the resumable checkpoint every this many steps (and at the
    /// end). 0 writes it only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Random flips and shifts on training batches.
    pub augment: bool,
    /// Largest augmentation shift, as a fraction of the image extent.
    pub max_shift_fraction: f64,
    /// Soft-mask binarization threshold used during validation.
    pub mask_threshold: f64,
    pub det_weights: DetLossWeights,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            n_det: 8,
            n_seg: 1,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 2000,
            validation_fraction: 0.2,
            validation_every: 50,
            checkpoint_every: 200,
            seed: 0,
            augment: true,
            max_shift_fraction: 0.1,
            mask_threshold: 0.5,
            det_weights: DetLossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_det + self.n_seg == 0 {
            return Err(Error::config("a step needs at least one batch in some phase"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation fraction must be in [0, 1)"));
        }
        if !(0.0..=0.5).contains(&self.max_shift_fraction) {
            return Err(Error::config("max shift fraction must be in [0, 0.5]"));
        }
        if !(0.0 < self.mask_threshold && self.mask_threshold < 1.0) {
            return Err(Error::config("mask threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamSlot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. A parameter is updated only when the last
/// backward pass actually reached it; parameters outside the current graph
/// keep both their value and their optimizer state untouched.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    slots: Vec<(String, Tensor, AdamSlot)>,
}

impl Adam {
    pub fn new(
        params: Vec<(String, Tensor)>,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Adam {
        let slots = params
            .into_iter()
            .map(|(name, tensor)| {
                let n = tensor.numel();
                (
                    name,
                    tensor,
                    AdamSlot {
                        t: 0,
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            slots,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) -> Result<()> {
        for (name, tensor, slot) in &mut self.slots {
            let Some(grad) = tensor.grad() else {
                continue; // not part of the current graph
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient on parameter {name}"
                )));
            }
            slot.t += 1;
            let correction1 = 1.0 - self.beta1.powi(slot.t as i32);
            let correction2 = 1.0 - self.beta2.powi(slot.t as i32);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
            let (m, v) = (&mut slot.m, &mut slot.v);
            tensor.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let m_hat = m[i] / correction1;
                    let v_hat = v[i] / correction2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Snapshot the optimizer state for checkpointing.
    pub fn state(&self) -> Vec<(String, AdamSlotState)> {
        self.slots
            .iter()
            .map(|(name, _, slot)| {
                (
                    name.clone(),
                    AdamSlotState {
                        t: slot.t,
                        m: slot.m.clone(),
                        v: slot.v.clone(),
                    },
                )
            })
            .collect()
    }

    /// Restore a snapshot produced by [`Adam::state`].
    pub fn restore(&mut self, state: &[(String, AdamSlotState)]) -> Result<()> {
        let mut by_name: HashMap<&str, &AdamSlotState> =
            state.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for (name, tensor, slot) in &mut self.slots {
            let saved = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::data(format!("optimizer state lacks parameter {name}"))
            })?;
            if saved.m.len() != tensor.numel() {
                return Err(Error::data(format!(
                    "optimizer state for {name} has {} entries, parameter has {}",
                    saved.m.len(),
                    tensor.numel()
                )));
            }
            slot.t = saved.t;
            slot.m = saved.m.clone();
            slot.v = saved.v.clone();
        }
        if !by_name.is_empty() {
            return Err(Error::data(
                "optimizer state names parameters that are not in this model",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss ledger
// ---------------------------------------------------------------------------

/// Most recent loss of each phase. The segmentation entry starts at the mask
/// loss's upper bound so the joint value is meaningful before the first
/// segmentation batch has run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLedger {
    pub det: f64,
    pub seg: f64,
}

impl Default for LossLedger {
    fn default() -> LossLedger {
        LossLedger { det: 0.0, seg: 1.0 }
    }
}

impl LossLedger {
    /// The joint loss: the plain sum of the two stored values.
    pub fn joint(&self) -> f64 {
        self.det + self.seg
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// What one training step observed, for logging.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: u64,
    /// Ledger value after the step: detection phase + segmentation phase.
    pub joint: f64,
    /// Mean joint loss over the detection-phase batches.
    pub det_phase: f64,
    /// Mean mask loss over the segmentation-phase batches.
    pub seg_phase: f64,
    /// Mean box-loss component within the detection phase.
    pub det_component: f64,
    /// Mean mask-loss component within the detection phase.
    pub seg_component: f64,
    /// Mean unweighted box-loss terms within the detection phase.
    pub breakdown: DetLossBreakdown,
}

/// Owns the model, the optimizer, and the batch streams of one training run.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    adam: Adam,
    samples: Vec<Sample>,
    /// Indices into `samples` with a mask, served to the segmentation phase.
    masked: Vec<usize>,
    det_stream: BatchStream,
    seg_stream: Option<BatchStream>,
    ledger: LossLedger,
    step: u64,
    det_batches: u64,
    seg_batches: u64,
    augment_counter: u64,
}

impl Trainer {
    /// Set up a run over a training pool. Every sample feeds the detection
    /// phase; the mask-annotated subset feeds the segmentation phase.
    pub fn new(model: Model, config: TrainConfig, samples: Vec<Sample>) -> Result<Trainer> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::data("cannot train on an empty sample pool"));
        }
        let masked: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.mask.is_some())
            .map(|(i, _)| i)
            .collect();
        if config.n_seg > 0 && masked.is_empty() {
            return Err(Error::data(
                "the segmentation phase needs at least one mask-annotated sample",
            ));
        }
        let det_stream = BatchStream::new(samples.len(), config.seed, "det-order")?;
        let seg_stream = if config.n_seg > 0 {
            Some(BatchStream::new(masked.len(), config.seed, "seg-order")?)
        } else {
            None
        };
        let adam = Adam::new(
            model.named_params(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
        Ok(Trainer {
            model,
            config,
            adam,
            samples,
            masked,
            det_stream,
            seg_stream,
            ledger: LossLedger::default(),
            step: 0,
            det_batches: 0,
            seg_batches: 0,
            augment_counter: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ledger(&self) -> LossLedger {
        self.ledger
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Batches served to the detection phase so far.
    pub fn det_batches(&self) -> u64 {
        self.det_batches
    }

    /// Batches served to the segmentation phase so far.
    pub fn seg_batches(&self) -> u64 {
        self.seg_batches
    }

    fn prepare_batch(&mut self, indices: &[usize], pool: Option<&[usize]>) -> Vec<Sample> {
        let mut batch = Vec::with_capacity(indices.len());
        let mut rng = crate::rng::derived(self.config.seed, "augment", self.augment_counter);
        self.augment_counter += 1;
        for &i in indices {
            let sample = match pool {
                Some(subset) => &self.samples[subset[i]],
                None => &self.samples[i],
            };
            batch.push(if self.config.augment {
                data::augment(sample, &mut rng, self.config.max_shift_fraction)
            } else {
                sample.clone()
            });
        }
        batch
    }

    fn detection_batch(&mut self) -> Result<(f64, f64, f64, DetLossBreakdown)> {
        let indices = self.det_stream.next_batch(self.config.batch_size);
        let batch = self.prepare_batch(&indices, None);
        let refs: Vec<&Sample> = batch.iter().collect();
        let input_size = self.model.config().segnet.input_size;

        let tape = Tape::new();
        let images = data::batch_images(&refs)?;
        let (seg_out, raw) = self.model.forward(&tape, &images, Mode::Train)?;
        let (mask_target, mask_weights) = data::batch_masks(&refs)?;
        let seg = seg_loss_weighted(&tape, &seg_out.soft_mask, &mask_target, &mask_weights)?;
        let targets: Vec<DetectionTarget> = refs
            .iter()
            .map(|s| {
                self.model
                    .head
                    .grid()
                    .assign_targets(&s.boxes, input_size)
                    .map_err(|e| Error::data(format!("sample {}: {e}", s.id)))
            })
            .collect::<Result<_>>()?;
        let (det, breakdown) =
            det_loss(&tape, self.model.head.grid(), &raw, &targets, &self.config.det_weights)?;
        let joint = tape.add(&det, &seg)?;
        tape.backward(&joint)?;
        self.adam.step()?;
        self.det_batches += 1;
        Ok((joint.item(), det.item(), seg.item(), breakdown))
    }

    fn segmentation_batch(&mut self) -> Result<f64> {
        let stream = self
            .seg_stream
            .as_mut()
            .expect("segmentation phase requires a stream");
        let indices = stream.next_batch(self.config.batch_size);
        let masked = self.masked.clone();
        let batch = self.prepare_batch(&indices, Some(&masked));
        let refs: Vec<&Sample> = batch.iter().collect();

        let tape = Tape::new();
        let images = data::batch_images(&refs)?;
        // Only the mask network runs here; the box head stays out of the
        // graph and out of the update.
        let seg_out = self.model.segnet.forward(&tape, &images, Mode::Train)?;
        let (mask_target, weights) = data::batch_masks(&refs)?;
        let loss = seg_loss_weighted(&tape, &seg_out.soft_mask, &mask_target, &weights)?;
        tape.backward(&loss)?;
        self.adam.step()?;
        self.seg_batches += 1;
        Ok(loss.item())
    }

    /// One interleaved step: `n_det` joint batches, then `n_seg` mask-only
    /// batches, updating the ledger entry of each phase it ran.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let mut det_phase = 0.0;
        let mut det_component = 0.0;
        let mut seg_component = 0.0;
        let mut breakdown = DetLossBreakdown {
            centers: 0.0,
            dimensions: 0.0,
            confidence: 0.0,
            classes: 0.0,
        };
        for _ in 0..self.config.n_det {
            let (joint, det, seg, b) = self.detection_batch()?;
            det_phase += joint;
            det_component += det;
            seg_component += seg;
            breakdown.centers += b.centers;
            breakdown.dimensions += b.dimensions;
            breakdown.confidence += b.confidence;
            breakdown.classes += b.classes;
        }
        if self.config.n_det > 0 {
            let n = self.config.n_det as f64;
            det_phase /= n;
            det_component /= n;
            seg_component /= n;
            breakdown.centers /= n;
            breakdown.dimensions /= n;
            breakdown.confidence /= n;
            breakdown.classes /= n;
            self.ledger.det = det_phase;
        }

        let mut seg_phase = 0.0;
        for _ in 0..self.config.n_seg {
            seg_phase += self.segmentation_batch()?;
        }
        if self.config.n_seg > 0 {
            seg_phase /= self.config.n_seg as f64;
            self.ledger.seg = seg_phase;
        } else {
            seg_phase = self.ledger.seg;
        }

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            joint: self.ledger.joint(),
            det_phase,
            seg_phase,
            det_component,
            seg_component,
            breakdown,
        })
    }

    fn trainer_state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            det_loss: self.ledger.det,
            seg_loss: self.ledger.seg,
            adam: self.adam.state(),
        }
    }

    /// Save a resumable checkpoint of this run.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.trainer_state()))
    }

    /// Rebuild a trainer from a resumable checkpoint. The sample pool and
    /// configuration must be supplied again; batch streams restart, the
    /// step counter and optimizer state continue where they left off.
    pub fn resume(path: &Path, config: TrainConfig, samples: Vec<Sample>) -> Result<Trainer> {
        let (model, state) = checkpoint::load(path)?;
        let state = state.ok_or_else(|| {
            Error::usage(format!(
                "{} has no optimizer state; it cannot resume training",
                path.display()
            ))
        })?;
        let mut trainer = Trainer::new(model, config, samples)?;
        trainer.adam.restore(&state.adam)?;
        trainer.step = state.step;
        trainer.ledger = LossLedger {
            det: state.det_loss,
            seg: state.seg_loss,
        };
        Ok(trainer)
    }
}

// ---------------------------------------------------------------------------
// The fit loop
// ---------------------------------------------------------------------------

/// Files produced by a [`Trainer::fit`] run.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub steps_run: u64,
    pub final_joint: f64,
    pub train_log: PathBuf,
    pub val_log: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_step: Option<u64>,
}

/// Split indices into train/validation, stratified so mask-annotated and
/// box-only samples are held out in proportion. Deterministic in the seed.
pub fn split_validation(
    samples: &[Sample],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = crate::rng::derived(seed, "split", 0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for want_mask in [true, false] {
        let mut group: Vec<usize> = (0..samples.len())
            .filter(|i| samples[*i].mask.is_some() == want_mask)
            .collect();
        group.shuffle(&mut rng);
        let mut held = (group.len() as f64 * fraction).floor() as usize;
        // Never hold out a whole group.
        held = held.min(group.len().saturating_sub(1));
        val.extend(group.drain(..held));
        train.extend(group);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn aggregate_csv_fields(report: &crate::metrics::EvalReport) -> String {
    let agg = report.aggregate();
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{},{}", cell(agg.mean_iou), cell(agg.mean_dice));
    for class in 0..report.classes {
        write!(
            out,
            ",{},{},{}",
            cell(agg.mean_distance[class]),
            cell(agg.mean_normalized[class]),
            cell(agg.hit_rate_percent[class]),
        )
        .unwrap();
    }
    out
}

/// A score for "which validation snapshot is best": mean mask overlap plus
/// the average hit rate, each in [0, 1]. Higher is better.
fn validation_score(report: &crate::metrics::EvalReport) -> f64 {
    let agg = report.aggregate();
    let rates: Vec<f64> = agg.hit_rate_percent.iter().filter_map(|r| *r).collect();
    let hit = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64 / 100.0
    };
    agg.mean_iou.unwrap_or(0.0) + hit
}

impl Trainer {
    /// Run the full training loop: step until `max_steps`, log every step to
    /// `train_log.csv`, periodically evaluate the held-out split into
    /// `val_log.csv` (tracking the best snapshot in `best.ckpt`), and keep a
    /// resumable `checkpoint.ckpt` current.
    ///
    /// The trainer must be constructed on the TRAIN split; pass the
    /// validation samples here. [`prepare_split`] wires both from one pool.
    pub fn fit(&mut self, out_dir: &Path, validation: &[Sample]) -> Result<FitSummary> {
        fs::create_dir_all(out_dir)?;
        let train_log_path = out_dir.join("train_log.csv");
        let checkpoint_path = out_dir.join("checkpoint.ckpt");
        let best_path = out_dir.join("best.ckpt");
        let val_log_path = out_dir.join("val_log.csv");

        let mut train_log = String::from(
            "step,joint,det_phase,seg_phase,det_component,seg_component,\
             centers,dimensions,confidence,classes\n",
        );
        let mut val_log = String::from("step,mean_iou,mean_dice");
        for class in 0..self.model.config().classes {
            let name = data::class_name(class);
            write!(val_log, ",{name}_dist,{name}_dist_norm,{name}_hit_rate").unwrap();
        }
        val_log.push('\n');

        let validate = self.config.validation_every > 0 && !validation.is_empty();
        let mut best: Option<(f64, u64)> = None;
        let val_refs: Vec<&Sample> = validation.iter().collect();

        // A budget at or below the restored step still leaves a checkpoint
        // of the current weights behind.
        if self.step >= self.config.max_steps {
            self.save_checkpoint(&checkpoint_path)?;
        }
        while self.step < self.config.max_steps {
            let report = self.train_step()?;
            writeln!(
                train_log,
                "{},{},{},{},{},{},{},{},{},{}",
                report.step,
                report.joint,
                report.det_phase,
                report.seg_phase,
                report.det_component,
                report.seg_component,
                report.breakdown.centers,
                report.breakdown.dimensions,
                report.breakdown.confidence,
                report.breakdown.classes,
            )
            .unwrap();
            log::info!(
                "step {}: joint {:.4} (det phase {:.4}, seg phase {:.4})",
                report.step,
                report.joint,
                report.det_phase,
                report.seg_phase
            );

            let last = self.step == self.config.max_steps;
            if validate && (self.step % self.config.validation_every == 0 || last) {
                let eval = self.model.evaluate(&val_refs, self.config.mask_threshold)?;
                writeln!(val_log, "{},{}", report.step, aggregate_csv_fields(&eval)).unwrap();
                let score = validation_score(&eval);
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, self.step));
                    checkpoint::save(&best_path, &self.model, None)?;
                }
            }
            if last || (self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0)
            {
                self.save_checkpoint(&checkpoint_path)?;
            }
        }

        fs::write(&train_log_path, &train_log)?;
        if validate {
            fs::write(&val_log_path, &val_log)?;
        }
        Ok(FitSummary {
            steps_run: self.step,
            final_joint: self.ledger.joint(),
            train_log: train_log_path,
            val_log: validate.then_some(val_log_path),
            checkpoint: checkpoint_path,
            best_checkpoint: best.map(|_| best_path),
            best_step: best.map(|(_, s)| s),
        })
    }
}

/// Split a pool according to the config and return (train, validation).
pub fn prepare_split(samples: Vec<Sample>, config: &TrainConfig) -> (Vec<Sample>, Vec<Sample>) {
    if config.validation_fraction == 0.0 {
        return (samples, Vec::new());
    }
    let (train_idx, val_idx) = split_validation(&samples, config.validation_fraction, config.seed);
    let mut train = Vec::with_capacity(train_idx.len());
    let mut val = Vec::with_capacity(val_idx.len());
    for (i, sample) in samples.into_iter().enumerate() {
        if val_idx.binary_search(&i).is_ok() {
            val.push(sample);
        } else {
            train.push(sample);
        }
    }
    let _ = train_idx;
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::segnet::SegNetConfig;

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            segnet: SegNetConfig {
                input_size: 16,
                depth: 2,
                base_channels: 2,
                ..SegNetConfig::default()
            },
            classes: 2,
            priors: vec![(2.0, 2.0), (4.0, 4.0)],
        };
        Model::build(&config, seed).unwrap()
    }

    fn tiny_samples(n: usize, masks: usize) -> Vec<Sample> {
        let spec = data::SceneSpec {
            seed: 31,
            distractors: 1,
            ..data::SceneSpec::for_size(16)
        };
        let mut samples = data::generate(&spec, n).unwrap();
        data::drop_masks(&mut samples, masks);
        samples
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            n_det: 1,
            n_seg: 1,
            batch_size: 2,
            validation_fraction: 0.0,
            validation_every: 0,
            augment: false,
            max_steps: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_about_the_learning_rate() {
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        let mut adam = Adam::new(vec![("w".into(), w.clone())], 0.01, 0.9, 0.999, 1e-8);
        let tape = Tape::new();
        let loss = tape.mul(&w, &w).unwrap();
        let loss = tape.sum_all(&loss);
        tape.backward(&loss).unwrap();
        adam.step().unwrap();
        // Bias-corrected first step is lr·g/(|g|+ε'): one learning rate.
        let moved = 3.0 - w.data()[0];
        assert!((moved - 0.01).abs() < 1e-5, "moved {moved}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(vec![("w".into(), w.clone())], 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let tape = Tape::new();
            let loss = tape.mul(&w, &w).unwrap();
            let loss = tape.sum_all(&loss);
            tape.backward(&loss).unwrap();
            adam.step().unwrap();
        }
        assert!(w.data()[0].abs() < 0.02, "w = {}", w.data()[0]);
    }

    #[test]
    fn adam_reports_non_finite_gradients_by_name() {
        let w = Tensor::param(&[1], vec![-1.0]).unwrap();
        let mut adam = Adam::new(vec![("enc0.kernel".into(), w.clone())], 0.01, 0.9, 0.999, 1e-8);
        let tape = Tape::new();
        // d/dw log w at w = −1 is finite, but log(−1) is NaN and the chain
        // through exp(log w) poisons the gradient.
        let loss = tape.log(&w);
        let loss = tape.exp(&loss);
        let loss = tape.sum_all(&loss);
        tape.backward(&loss).unwrap();
        let err = adam.step().unwrap_err().to_string();
        assert!(err.contains("enc0.kernel"), "error was: {err}");
    }

    #[test]
    fn untouched_parameters_keep_optimizer_state_frozen() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        let u = Tensor::param(&[1], vec![5.0]).unwrap();
        let mut adam = Adam::new(
            vec![("w".into(), w.clone()), ("u".into(), u.clone())],
            0.01,
            0.9,
            0.999,
            1e-8,
        );
        // Two steps that involve only w.
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.sum_all(&tape.mul(&w, &w).unwrap());
            tape.backward(&loss).unwrap();
            adam.step().unwrap();
        }
        assert_eq!(u.data()[0], 5.0);
        let state = adam.state();
        let u_state = &state.iter().find(|(n, _)| n == "u").unwrap().1;
        assert_eq!(u_state.t, 0);
        assert!(u_state.m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_counts_deliver_the_configured_batches() {
        let config = TrainConfig {
            n_det: 2,
            n_seg: 1,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(tiny_model(1), config, tiny_samples(4, 2)).unwrap();
        for _ in 0..3 {
            trainer.train_step().unwrap();
        }
        assert_eq!(trainer.step_count(), 3);
        assert_eq!(trainer.det_batches(), 6);
        assert_eq!(trainer.seg_batches(), 3);
    }

    #[test]
    fn segmentation_phase_leaves_the_head_bit_identical() {
        let config = TrainConfig {
            n_det: 0,
            n_seg: 2,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(tiny_model(2), config, tiny_samples(4, 4)).unwrap();
        let before: Vec<(String, Vec<f64>)> = trainer
            .model()
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        trainer.train_step().unwrap();
        let mut head_same = 0;
        let mut segnet_changed = 0;
        for ((name, old), (_, new)) in before.iter().zip(trainer.model().named_params()) {
            if name.starts_with("head.") {
                assert_eq!(old, &new.to_vec(), "{name} changed in the seg phase");
                head_same += 1;
            } else if old != &new.to_vec() {
                segnet_changed += 1;
            }
        }
        assert_eq!(head_same, 2);
        assert!(segnet_changed > 10, "only {segnet_changed} mask-net params moved");
        // Ledger: det entry untouched (still 0), seg entry updated.
        assert_eq!(trainer.ledger().det, 0.0);
        assert!(trainer.ledger().seg < 1.0);
    }

    #[test]
    fn detection_phase_updates_every_parameter() {
        let config = TrainConfig {
            n_det: 1,
            n_seg: 0,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(tiny_model(3), config, tiny_samples(4, 2)).unwrap();
        let before: Vec<(String, Vec<f64>)> = trainer
            .model()
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        trainer.train_step().unwrap();
        for ((name, old), (_, new)) in before.iter().zip(trainer.model().named_params()) {
            assert_ne!(old, &new.to_vec(), "{name} did not move in the joint phase");
        }
        // n_seg = 0 keeps the ledger's segmentation entry at its initial 1.
        assert_eq!(trainer.ledger().seg, 1.0);
        assert!(trainer.ledger().det > 0.0);
    }

    #[test]
    fn ledger_joint_is_the_exact_sum() {
        let mut trainer =
            Trainer::new(tiny_model(4), tiny_config(), tiny_samples(4, 2)).unwrap();
        let report = trainer.train_step().unwrap();
        let ledger = trainer.ledger();
        assert_eq!(report.joint, ledger.det + ledger.seg);
        assert_eq!(report.det_phase, ledger.det);
        assert_eq!(report.seg_phase, ledger.seg);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let run = || {
            let mut trainer =
                Trainer::new(tiny_model(5), TrainConfig { augment: true, ..tiny_config() }, tiny_samples(4, 2)).unwrap();
            let mut reports = Vec::new();
            for _ in 0..2 {
                let r = trainer.train_step().unwrap();
                reports.push((r.joint, r.det_phase, r.seg_phase));
            }
            let params: Vec<Vec<f64>> = trainer
                .model()
                .named_params()
                .iter()
                .map(|(_, t)| t.to_vec())
                .collect();
            (reports, params)
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn fit_writes_logs_and_checkpoints_deterministically() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            max_steps: 3,
            validation_fraction: 0.5,
            validation_every: 2,
            checkpoint_every: 2,
            augment: true,
            ..tiny_config()
        };
        let run = |dir: &Path| {
            let (train, val) = prepare_split(tiny_samples(6, 3), &config);
            let mut trainer = Trainer::new(tiny_model(6), config.clone(), train).unwrap();
            trainer.fit(dir, &val).unwrap()
        };
        let sa = run(dir_a.path());
        let sb = run(dir_b.path());
        assert_eq!(sa.steps_run, 3);
        let log_a = std::fs::read(&sa.train_log).unwrap();
        let log_b = std::fs::read(&sb.train_log).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b, "training logs differ between same-seed runs");
        assert_eq!(
            std::fs::read(sa.val_log.as_ref().unwrap()).unwrap(),
            std::fs::read(sb.val_log.as_ref().unwrap()).unwrap()
        );
        assert!(sa.checkpoint.exists());
        assert!(sa.best_checkpoint.as_ref().unwrap().exists());
        // Lines: header + one per step.
        assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 4);
    }

    #[test]
    fn resume_restores_step_ledger_and_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.ckpt");
        let samples = tiny_samples(4, 2);
        let mut trainer =
            Trainer::new(tiny_model(7), tiny_config(), samples.clone()).unwrap();
        trainer.train_step().unwrap();
        trainer.train_step().unwrap();
        trainer.save_checkpoint(&path).unwrap();
        let ledger = trainer.ledger();

        let resumed = Trainer::resume(&path, tiny_config(), samples).unwrap();
        assert_eq!(resumed.step_count(), 2);
        assert_eq!(resumed.ledger(), ledger);
        for ((an, at), (bn, bt)) in trainer
            .model()
            .named_params()
            .iter()
            .zip(resumed.model().named_params().iter())
        {
            assert_eq!(an, bn);
            assert_eq!(at.to_vec(), bt.to_vec());
        }
        assert_eq!(trainer.adam.state(), resumed.adam.state());
        // A checkpoint without optimizer state cannot resume.
        let plain = dir.path().join("plain.ckpt");
        checkpoint::save(&plain, trainer.model(), None).unwrap();
        assert!(Trainer::resume(&plain, tiny_config(), tiny_samples(4, 2)).is_err());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let samples = tiny_samples(8, 4);
        let (train, val) = split_validation(&samples, 0.25, 3);
        assert_eq!(train.len() + val.len(), 8);
        assert_eq!(val.len(), 2);
        let val_masked = val.iter().filter(|i| samples[**i].mask.is_some()).count();
        assert_eq!(val_masked, 1, "one of the two held-out samples has a mask");
        let (t2, v2) = split_validation(&samples, 0.25, 3);
        assert_eq!((train.clone(), val.clone()), (t2, v2));
        let (_, v3) = split_validation(&samples, 0.25, 4);
        assert!(val != v3 || v3.len() == 2); // different seed may reshuffle
    }
}

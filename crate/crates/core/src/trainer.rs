//! The alternating training loop.
//!
//! Every mini-batch runs, in order:
//!
//! 1. a tape-free forward pass of the encoder on both domains (on the very
//!    first batch these source features also initialize the centers);
//! 2. `disc_steps` discriminator updates on those features, detached;
//! 3. one encoder/classifier update on the combined objective, with the
//!    discriminator bound as a constant;
//! 4. a center update from the detached source features of step 1.
//!
//! Learning-rate decay counts global epochs. Training stops at
//! `max_epochs`, or once the epoch-mean objective has failed to improve on
//! its best value by `min_improvement` for `patience` consecutive epochs of
//! the final schedule stage. Target labels are never read.
//!
//! ## Report format
//!
//! [`TrainReport::to_jsonl`] writes one JSON object per epoch with the
//! fields of [`EpochRecord`] except the wall time. Terms a variant does not
//! compute are `null`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerState, Tape, Var};
use crate::checkpoint::load_checkpoint;
use crate::config::{train_stage_weights, TrainConfig, Variant};
use crate::data::{Batch, BatchIterator, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::losses::{
    adversarial_losses, center_loss_source, conditional_loss_target, filter_target, init_centers,
    source_classification_loss, total_objective, update_centers, CenterTable, FilteredBatch, LossWeights,
    ObjectiveParts,
};
use crate::models::{Group, ModelParams, ParamVars};
use crate::rng::derive_seed;
use crate::tensor::Tensor2;

const BATCH_STREAM: u64 = 0xba7c;
const ENCODER_CLASSIFIER: [Group; 2] = [Group::Encoder, Group::Classifier];

/// Epoch-mean statistics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub disc_loss: Option<f64>,
    pub enc_adv_loss: Option<f64>,
    pub source_cls_loss: f64,
    pub source_center_loss: Option<f64>,
    pub target_center_loss: Option<f64>,
    pub objective: f64,
    /// Share of target rows that passed the confidence threshold.
    pub kept_fraction: Option<f64>,
    /// Frobenius norm of the center change over the epoch.
    pub center_drift: f64,
    pub source_test_acc: f64,
    pub target_test_acc: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("report line {}: {e}", i + 1))))
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub centers: CenterTable,
    pub report: TrainReport,
}

/// Source and target inputs of one step.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    pub source_x: &'a Tensor2,
    pub source_y: &'a [usize],
    pub target_x: &'a Tensor2,
}

impl<'a> From<&'a Batch> for BatchInputs<'a> {
    fn from(b: &'a Batch) -> Self {
        Self { source_x: &b.source_x, source_y: &b.source_y, target_x: &b.target_x }
    }
}

/// Handles of the recorded encoder/classifier objective.
#[derive(Debug, Clone)]
pub struct RecordedObjective {
    pub parts: ObjectiveParts,
    pub total: Var,
    pub filtered: Option<FilteredBatch>,
}

/// Records `enc_adv + alpha*L_s + beta1*L_cs + beta2*L_ct` for `variant`.
///
/// Pseudo-labels come from the classifier probabilities of this same
/// forward pass and are not computed at all while `beta2` is zero.
pub fn encoder_classifier_objective(
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: BatchInputs<'_>,
    centers: &CenterTable,
    weights: &LossWeights,
    variant: Variant,
) -> Result<RecordedObjective> {
    let xs = tape.constant(inputs.source_x.detached());
    let fs = vars.encode(tape, xs)?;
    let logits_s = vars.classify(tape, fs)?;
    let (ls, _) = source_classification_loss(tape, logits_s, inputs.source_y)?;

    let use_target_center = variant.target_center() && weights.beta2 > 0.0;
    let ft = if variant.adversarial() || use_target_center {
        let xt = tape.constant(inputs.target_x.detached());
        Some(vars.encode(tape, xt)?)
    } else {
        None
    };

    let (mut enc_adv, mut disc_adv) = (None, None);
    if variant.adversarial() {
        let ft = ft.expect("target features recorded");
        let ds = vars.discriminate(tape, fs)?;
        let dt = vars.discriminate(tape, ft)?;
        let adv = adversarial_losses(tape, ds, dt)?;
        enc_adv = Some(adv.encoder);
        disc_adv = Some(adv.discriminator);
    }

    let source_center = if variant.source_center() {
        Some(center_loss_source(tape, fs, inputs.source_y, centers)?)
    } else {
        None
    };

    let (mut target_center, mut filtered) = (None, None);
    if use_target_center {
        let ft = ft.expect("target features recorded");
        let logits_t = vars.classify(tape, ft)?;
        let probs = tape.value(logits_t).softmax_rows();
        let kept = filter_target(&probs, weights.threshold)?;
        target_center = Some(conditional_loss_target(tape, ft, &kept, centers)?);
        filtered = Some(kept);
    }

    let parts = ObjectiveParts {
        encoder_adversarial: enc_adv,
        discriminator_adversarial: disc_adv,
        source_classification: ls,
        source_center,
        target_center,
    };
    let total = total_objective(tape, &parts, weights)?.encoder_classifier;
    Ok(RecordedObjective { parts, total, filtered })
}

/// Mutable state of a run: parameters, centers and both optimizers.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub centers: CenterTable,
    pub config: TrainConfig,
    disc_opt: OptimizerState,
    enc_opt: OptimizerState,
}

/// Scalar losses of one batch.
#[derive(Debug, Clone, Default)]
pub struct StepLosses {
    pub disc: Option<f64>,
    pub enc_adv: Option<f64>,
    pub source_cls: f64,
    pub source_center: Option<f64>,
    pub target_center: Option<f64>,
    pub objective: f64,
    pub kept: Option<(usize, usize)>,
}

fn finite(term: &'static str, epoch: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, epoch, value })
    }
}

impl TrainState {
    pub fn new(params: ModelParams, centers: CenterTable, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.variant.adversarial() != params.discriminator.is_some() {
            return Err(Error::Compatibility(format!(
                "variant {} {} a discriminator",
                config.variant.name(),
                if config.variant.adversarial() { "needs" } else { "must not have" }
            )));
        }
        let disc_opt = OptimizerState::new(config.optimizer.clone())?;
        let enc_opt = OptimizerState::new(config.optimizer.clone())?;
        Ok(Self { params, centers, config, disc_opt, enc_opt })
    }

    /// Fresh parameters and uninitialized centers for a dataset.
    pub fn init(dataset: &DomainDataset, config: &TrainConfig) -> Result<Self> {
        let arch = config.arch(dataset.input_dim, dataset.num_classes);
        let params = ModelParams::init(&arch, config.seed)?;
        let centers = CenterTable::uninitialized(dataset.num_classes, arch.feature_dim(), config.center_gamma)?;
        Self::new(params, centers, config.clone())
    }

    /// One discriminator update on detached features. Returns the loss
    /// before the update.
    pub fn discriminator_step(&mut self, source_f: &Tensor2, target_f: &Tensor2, epoch: usize) -> Result<f64> {
        let disc = self.params.discriminator.as_mut().ok_or_else(|| Error::State("no discriminator to train".into()))?;
        let mut tape = Tape::new();
        let dvars = disc.bind(&mut tape, true);
        let fs = tape.constant(source_f.detached());
        let ft = tape.constant(target_f.detached());
        let ls = dvars.forward(&mut tape, fs)?;
        let lt = dvars.forward(&mut tape, ft)?;
        let adv = adversarial_losses(&mut tape, ls, lt)?;
        let loss = finite("disc_adv", epoch, tape.scalar_value(adv.discriminator))?;
        tape.backward(adv.discriminator)?;
        disc.collect_grads(&tape, &dvars)?;
        let mut tensors = self.params.named_tensors_mut(&[Group::Discriminator]);
        self.disc_opt.step(&mut tensors, epoch)?;
        Ok(loss)
    }

    /// One encoder/classifier update; the discriminator is not moved.
    pub fn encoder_classifier_step(&mut self, inputs: BatchInputs<'_>, weights: &LossWeights, epoch: usize) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, &ENCODER_CLASSIFIER);
        let rec = encoder_classifier_objective(&mut tape, &vars, inputs, &self.centers, weights, self.config.variant)?;
        let value = |v: Option<Var>| v.map(|v| tape.scalar_value(v));
        let out = StepLosses {
            disc: None,
            enc_adv: value(rec.parts.encoder_adversarial).map(|v| finite("enc_adv", epoch, v)).transpose()?,
            source_cls: finite("source_cls", epoch, tape.scalar_value(rec.parts.source_classification))?,
            source_center: value(rec.parts.source_center).map(|v| finite("source_center", epoch, v)).transpose()?,
            target_center: value(rec.parts.target_center).map(|v| finite("target_center", epoch, v)).transpose()?,
            objective: finite("objective", epoch, tape.scalar_value(rec.total))?,
            kept: rec.filtered.as_ref().map(|f| (f.rows.len(), f.batch_size)),
        };
        tape.backward(rec.total)?;
        self.params.collect_grads(&tape, &vars, &ENCODER_CLASSIFIER)?;
        let mut tensors = self.params.named_tensors_mut(&ENCODER_CLASSIFIER);
        self.enc_opt.step(&mut tensors, epoch)?;
        Ok(out)
    }

    /// Steps 1 to 4 on one batch.
    pub fn train_batch(&mut self, inputs: BatchInputs<'_>, epoch: usize) -> Result<StepLosses> {
        let weights = train_stage_weights(&self.config, epoch);
        let source_f = self.params.encode(inputs.source_x)?;
        if !self.centers.is_initialized() {
            self.centers = init_centers(&source_f, inputs.source_y, self.params.num_classes(), self.config.center_gamma)?;
        }
        let mut disc = None;
        if self.config.variant.adversarial() {
            let target_f = self.params.encode(inputs.target_x)?;
            for _ in 0..self.config.disc_steps {
                disc = Some(self.discriminator_step(&source_f, &target_f, epoch)?);
            }
        }
        let mut losses = self.encoder_classifier_step(inputs, &weights, epoch)?;
        losses.disc = disc;
        update_centers(&mut self.centers, &source_f, inputs.source_y)?;
        if !self.centers.centers().all_finite() {
            return Err(Error::NonFinite { term: "centers", epoch, value: f64::NAN });
        }
        Ok(losses)
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    disc: (f64, usize),
    enc_adv: (f64, usize),
    source_cls: f64,
    source_center: (f64, usize),
    target_center: (f64, usize),
    objective: f64,
    kept: (usize, usize),
}

fn add(slot: &mut (f64, usize), v: Option<f64>) {
    if let Some(v) = v {
        slot.0 += v;
        slot.1 += 1;
    }
}

fn mean(slot: (f64, usize)) -> Option<f64> {
    (slot.1 > 0).then(|| slot.0 / slot.1 as f64)
}

impl Accum {
    fn push(&mut self, s: &StepLosses) {
        self.n += 1;
        add(&mut self.disc, s.disc);
        add(&mut self.enc_adv, s.enc_adv);
        self.source_cls += s.source_cls;
        add(&mut self.source_center, s.source_center);
        add(&mut self.target_center, s.target_center);
        self.objective += s.objective;
        if let Some((k, n)) = s.kept {
            self.kept.0 += k;
            self.kept.1 += n;
        }
    }
}

fn run(
    dataset: &DomainDataset,
    mut state: TrainState,
    start_epoch: usize,
    batch_seed: u64,
) -> Result<TrainOutcome> {
    let config = state.config.clone();
    let view = dataset.training_view();
    let mut batches = BatchIterator::for_view(&view, config.batch_size, batch_seed)?;
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in start_epoch..config.max_epochs {
        let started = Instant::now();
        let before = state.centers.centers().clone();
        let mut acc = Accum::default();
        while let Some(batch) = batches.next_batch(&view) {
            let losses = state.train_batch((&batch).into(), epoch)?;
            acc.push(&losses);
        }
        batches.next_epoch();

        let drift = before.values().iter().zip(state.centers.centers().values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let w = train_stage_weights(&config, epoch);
        let objective = acc.objective / acc.n as f64;
        let record = EpochRecord {
            epoch,
            stage: config.stage_index(epoch),
            alpha: w.alpha,
            beta1: w.beta1,
            beta2: w.beta2,
            lr: config.optimizer.effective_lr(epoch),
            disc_loss: mean(acc.disc),
            enc_adv_loss: mean(acc.enc_adv),
            source_cls_loss: acc.source_cls / acc.n as f64,
            source_center_loss: mean(acc.source_center),
            target_center_loss: mean(acc.target_center),
            objective,
            kept_fraction: (acc.kept.1 > 0).then(|| acc.kept.0 as f64 / acc.kept.1 as f64),
            center_drift: drift,
            source_test_acc: accuracy(&state.params, &dataset.source_test.features, &dataset.source_test.labels)?,
            target_test_acc: accuracy(&state.params, &dataset.target_test.features, &dataset.target_test.labels)?,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} stage {} objective {:.5} source_cls {:.5} disc {:?} target_acc {:.4}",
            record.stage,
            record.objective,
            record.source_cls_loss,
            record.disc_loss,
            record.target_test_acc
        );
        records.push(record);

        if config.patience > 0 && config.is_final_stage(epoch) {
            if !config.is_final_stage(epoch.saturating_sub(1)) || epoch == start_epoch {
                best = f64::INFINITY;
                stale = 0;
            }
            if objective < best - config.min_improvement {
                best = objective;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stop_reason = StopReason::Converged;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: state.params,
        centers: state.centers,
        report: TrainReport { records, stop_reason },
    })
}

/// Trains from scratch; see the module documentation for the step order.
pub fn train(dataset: &DomainDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let state = TrainState::init(dataset, config)?;
    run(dataset, state, 0, derive_seed(config.seed, BATCH_STREAM))
}

/// Continues from a checkpoint at `start_epoch`, emitting records for
/// `start_epoch..max_epochs` only.
///
/// Schedule stage and learning rate are evaluated at the global epoch.
/// Optimizer accumulators start fresh and batches are drawn from seed
/// `seed + start_epoch`, so a resumed run is deterministic but does not
/// reproduce an uninterrupted one.
pub fn resume(dataset: &DomainDataset, config: &TrainConfig, checkpoint: &Path, start_epoch: usize) -> Result<TrainOutcome> {
    let (params, centers) = load_checkpoint(checkpoint)?;
    let expected = config.arch(dataset.input_dim, dataset.num_classes);
    if params.arch() != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            params.arch(),
            expected
        )));
    }
    let centers = CenterTable::from_parts(centers.centers().clone(), config.center_gamma, centers.is_initialized());
    let state = TrainState::new(params, centers, config.clone())?;
    run(dataset, state, start_epoch, derive_seed(config.seed.wrapping_add(start_epoch as u64), BATCH_STREAM))
}

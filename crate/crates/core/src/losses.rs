//! Loss terms of the adaptation objective and the class-center table.
//!
//! Normalization follows the objective as written: the adversarial and
//! classification terms are batch means, the two center terms are batch
//! sums. The batch-size sensitivity of the sums is absorbed by `beta1` and
//! `beta2`.
//!
//! Centers never enter the tape. They move only through
//! [`update_centers`], so the center losses produce gradients for the
//! features and nothing else.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// The `K` class centers and their update rate `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTable {
    centers: Tensor2,
    gamma: f64,
    initialized: bool,
    unseen_at_init: Vec<usize>,
}

impl CenterTable {
    /// Zero centers awaiting [`init_centers`]-style initialization.
    pub fn uninitialized(num_classes: usize, dim: usize, gamma: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Spec("center table needs at least one class".into()));
        }
        Ok(Self { centers: Tensor2::zeros(num_classes, dim)?, gamma, initialized: false, unseen_at_init: Vec::new() })
    }

    /// Restores a table from stored values (checkpoints).
    pub fn from_parts(centers: Tensor2, gamma: f64, initialized: bool) -> Self {
        Self { centers, gamma, initialized, unseen_at_init: Vec::new() }
    }

    pub fn centers(&self) -> &Tensor2 {
        &self.centers
    }

    pub fn center(&self, k: usize) -> &[f64] {
        self.centers.row(k)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Classes that had no sample in the initializing batch.
    pub fn unseen_at_init(&self) -> &[usize] {
        &self.unseen_at_init
    }

    fn require_initialized(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::State("class centers used before initialization".into()))
        }
    }

    /// Center rows gathered for the given labels.
    fn gather(&self, labels: &[usize]) -> Result<Tensor2> {
        let k = self.num_classes();
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::Label(format!("label {y} at row {row} is outside [0, {k})")));
        }
        self.centers.select_rows(labels)
    }
}

/// Weights of the combined encoder/classifier objective plus the
/// pseudo-label confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub threshold: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        validate_threshold(self.threshold)
    }
}

fn validate_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {t} is outside (0, 1]")))
    }
}

/// Target rows whose top class probability reached the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBatch {
    pub rows: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub max_probs: Vec<f64>,
    pub batch_size: usize,
}

impl FilteredBatch {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.rows.len() as f64 / self.batch_size as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdversarialLosses {
    /// Minimized by `D`: source rows labelled 1, target rows labelled 0.
    pub discriminator: Var,
    /// Minimized by `E`: target rows labelled 1 (non-saturating form).
    pub encoder: Var,
}

/// Discriminator and encoder sides of the adversarial game, from the
/// discriminator logits of a source and a target batch.
pub fn adversarial_losses(tape: &mut Tape, d_logits_src: Var, d_logits_tgt: Var) -> Result<AdversarialLosses> {
    let (ns, nt) = (tape.value(d_logits_src).rows(), tape.value(d_logits_tgt).rows());
    for (name, v) in [("source", d_logits_src), ("target", d_logits_tgt)] {
        let t = tape.value(v);
        if t.cols() != 1 {
            return Err(Error::Dimension(format!("{name} domain logits must be n x 1, got {}x{}", t.rows(), t.cols())));
        }
    }
    let both = tape.concat_rows(d_logits_src, d_logits_tgt)?;
    let mut domain = vec![1.0; ns];
    domain.extend(std::iter::repeat_n(0.0, nt));
    let discriminator = tape.bce_with_logits(both, &domain)?;
    let encoder = tape.bce_with_logits(d_logits_tgt, &vec![1.0; nt])?;
    Ok(AdversarialLosses { discriminator, encoder })
}

/// Mean softmax cross-entropy on the labelled source batch. Also returns
/// the class probabilities.
pub fn source_classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<(Var, Tensor2)> {
    tape.softmax_cross_entropy(logits, labels)
}

/// `sum_i ||E(x_i) - c_{y_i}||^2` over the source batch.
pub fn center_loss_source(tape: &mut Tape, features: Var, labels: &[usize], centers: &CenterTable) -> Result<Var> {
    centers.require_initialized()?;
    check_width(tape.value(features), centers)?;
    if labels.len() != tape.value(features).rows() {
        return Err(Error::Dimension(format!("{} labels for {} feature rows", labels.len(), tape.value(features).rows())));
    }
    let anchors = centers.gather(labels)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    tape.squared_distance(features, &rows, &anchors)
}

/// `sum over kept rows of ||E(x_i) - c_{pseudo_i}||^2`; a constant zero
/// when nothing passed the threshold.
pub fn conditional_loss_target(
    tape: &mut Tape,
    features: Var,
    filtered: &FilteredBatch,
    centers: &CenterTable,
) -> Result<Var> {
    centers.require_initialized()?;
    let n = tape.value(features).rows();
    if let Some(&r) = filtered.rows.iter().find(|&&r| r >= n) {
        return Err(Error::Index(format!("kept row {r} of a {n}-row target batch")));
    }
    if filtered.is_empty() {
        return Ok(tape.constant(Tensor2::scalar(0.0)));
    }
    check_width(tape.value(features), centers)?;
    let anchors = centers.gather(&filtered.pseudo_labels)?;
    tape.squared_distance(features, &filtered.rows, &anchors)
}

fn check_width(features: &Tensor2, centers: &CenterTable) -> Result<()> {
    if features.cols() != centers.dim() {
        return Err(Error::Dimension(format!(
            "feature width {} against centers of dimension {}",
            features.cols(),
            centers.dim()
        )));
    }
    Ok(())
}

/// Centers from the first batch: the mean feature of each class. Classes
/// absent from the batch start at the zero vector and are logged.
pub fn init_centers(features: &Tensor2, labels: &[usize], num_classes: usize, gamma: f64) -> Result<CenterTable> {
    let mut table = CenterTable::uninitialized(num_classes, features.cols(), gamma)?;
    if labels.len() != features.rows() {
        return Err(Error::Dimension(format!("{} labels for {} feature rows", labels.len(), features.rows())));
    }
    let d = features.cols();
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![0.0; num_classes * d];
    for (row, &y) in features.row_iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Label(format!("label {y} is outside [0, {num_classes})")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            table.unseen_at_init.push(k);
            continue;
        }
        for c in 0..d {
            table.centers.set(k, c, sums[k * d + c] / n as f64);
        }
    }
    if !table.unseen_at_init.is_empty() {
        log::warn!("classes {:?} absent from the first batch; their centers start at zero", table.unseen_at_init);
    }
    table.initialized = true;
    Ok(table)
}

/// One damped mean-pull step:
/// `delta_k = sum_{y_i = k} (c_k - f_i) / (1 + N_k)`, `c_k -= gamma * delta_k`.
///
/// Features must be detached values; classes absent from the batch keep
/// their centers.
pub fn update_centers(centers: &mut CenterTable, features: &Tensor2, labels: &[usize]) -> Result<()> {
    centers.require_initialized()?;
    check_width(features, centers)?;
    if labels.len() != features.rows() {
        return Err(Error::Dimension(format!("{} labels for {} feature rows", labels.len(), features.rows())));
    }
    let (k_total, d) = (centers.num_classes(), centers.dim());
    let mut counts = vec![0usize; k_total];
    let mut diff = vec![0.0; k_total * d];
    for (row, &y) in features.row_iter().zip(labels) {
        if y >= k_total {
            return Err(Error::Label(format!("label {y} is outside [0, {k_total})")));
        }
        counts[y] += 1;
        let c = centers.centers.row(y);
        for j in 0..d {
            diff[y * d + j] += c[j] - row[j];
        }
    }
    let gamma = centers.gamma;
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        for j in 0..d {
            let delta = diff[k * d + j] / (1.0 + n as f64);
            let c = centers.centers.get(k, j);
            centers.centers.set(k, j, c - gamma * delta);
        }
    }
    Ok(())
}

/// Keeps rows whose largest probability is at least `threshold`; the
/// pseudo-label is the row argmax, ties to the lowest class.
pub fn filter_target(probabilities: &Tensor2, threshold: f64) -> Result<FilteredBatch> {
    validate_threshold(threshold)?;
    let labels = probabilities.argmax_rows();
    let mut out = FilteredBatch {
        rows: Vec::new(),
        pseudo_labels: Vec::new(),
        max_probs: Vec::new(),
        batch_size: probabilities.rows(),
    };
    for (i, (row, y)) in probabilities.row_iter().zip(labels).enumerate() {
        let p = row[y];
        if p >= threshold {
            out.rows.push(i);
            out.pseudo_labels.push(y);
            out.max_probs.push(p);
        }
    }
    Ok(out)
}

/// Scalar terms feeding the combined objective. `None` marks a term the
/// current variant does not use.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    pub encoder_adversarial: Option<Var>,
    pub discriminator_adversarial: Option<Var>,
    pub source_classification: Var,
    pub source_center: Option<Var>,
    pub target_center: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    /// `enc_adv + alpha*L_s + beta1*L_cs + beta2*L_ct`, minimized over `E`, `C`.
    pub encoder_classifier: Var,
    /// Minimized over `D`.
    pub discriminator: Option<Var>,
}

pub fn total_objective(tape: &mut Tape, parts: &ObjectiveParts, weights: &LossWeights) -> Result<Objective> {
    weights.validate()?;
    let mut total = tape.scale(parts.source_classification, weights.alpha);
    if let Some(adv) = parts.encoder_adversarial {
        total = tape.add(adv, total)?;
    }
    for (term, w) in [(parts.source_center, weights.beta1), (parts.target_center, weights.beta2)] {
        if let Some(term) = term {
            let scaled = tape.scale(term, w);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(Objective { encoder_classifier: total, discriminator: parts.discriminator_adversarial })
}

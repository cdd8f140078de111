//! Domain-shift datasets: containers, standardization, CSV export and
//! seeded mini-batching.

mod batch;
pub mod idx;
mod synth;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub use batch::{Batch, BatchIterator};
pub use idx::{load_idx, IdxDatasetSpec};
pub use synth::{gen_blobs, gen_two_moons, BlobsSpec, MoonsSpec, ShiftSpec};

/// Features with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub features: Tensor2,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn new(features: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!("{} labels for {} samples", labels.len(), features.rows())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Target training split. Its labels exist only so evaluation code can
/// score it; the training loop sees the features alone.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSplit {
    features: Tensor2,
    labels: Vec<usize>,
}

impl UnlabeledSplit {
    pub fn new(features: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!("{} labels for {} samples", labels.len(), features.rows())));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    /// Ground truth for evaluation and export. Never read during training.
    pub fn labels_for_evaluation(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labelled source splits, an unlabelled target training split and a
/// labelled target test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub source_train: LabeledSplit,
    pub source_test: LabeledSplit,
    pub target_train: UnlabeledSplit,
    pub target_test: LabeledSplit,
    pub num_classes: usize,
    pub input_dim: usize,
}

/// What the training loop may read.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub source: &'a LabeledSplit,
    pub target_features: &'a Tensor2,
}

impl DomainDataset {
    pub fn new(
        source_train: LabeledSplit,
        source_test: LabeledSplit,
        target_train: UnlabeledSplit,
        target_test: LabeledSplit,
        num_classes: usize,
    ) -> Result<Self> {
        let input_dim = source_train.features.cols();
        let splits: [(&str, &Tensor2, &[usize]); 4] = [
            ("source_train", &source_train.features, &source_train.labels),
            ("source_test", &source_test.features, &source_test.labels),
            ("target_train", &target_train.features, &target_train.labels),
            ("target_test", &target_test.features, &target_test.labels),
        ];
        for (name, x, y) in splits {
            if x.cols() != input_dim {
                return Err(Error::Consistency(format!("{name} has width {} but source_train has {input_dim}", x.cols())));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Label(format!("{name} contains label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self { source_train, source_test, target_train, target_test, num_classes, input_dim })
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { source: &self.source_train, target_features: self.target_train.features() }
    }

    /// Every split standardized with the source training statistics.
    pub fn standardized(&self) -> Result<Self> {
        let stats = &self.source_train.features;
        Ok(Self {
            source_train: LabeledSplit::new(normalize(&self.source_train.features, stats)?, self.source_train.labels.clone())?,
            source_test: LabeledSplit::new(normalize(&self.source_test.features, stats)?, self.source_test.labels.clone())?,
            target_train: UnlabeledSplit::new(normalize(self.target_train.features(), stats)?, self.target_train.labels.clone())?,
            target_test: LabeledSplit::new(normalize(&self.target_test.features, stats)?, self.target_test.labels.clone())?,
            num_classes: self.num_classes,
            input_dim: self.input_dim,
        })
    }

    /// Writes `source_train.csv`, `source_test.csv`, `target_train.csv` and
    /// `target_test.csv` into `dir`, each with header `f0..f{d-1},label,domain`.
    pub fn write_csv_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let splits: [(&str, &Tensor2, &[usize], char); 4] = [
            ("source_train", &self.source_train.features, &self.source_train.labels, 'S'),
            ("source_test", &self.source_test.features, &self.source_test.labels, 'S'),
            ("target_train", self.target_train.features(), self.target_train.labels_for_evaluation(), 'T'),
            ("target_test", &self.target_test.features, &self.target_test.labels, 'T'),
        ];
        for (name, x, y, domain) in splits {
            let path = dir.join(format!("{name}.csv"));
            let mut out = String::new();
            out.push_str(&feature_header(x.cols()));
            out.push_str(",label,domain\n");
            for (row, label) in x.row_iter().zip(y) {
                push_row(&mut out, row);
                out.push_str(&format!(",{label},{domain}\n"));
            }
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(out.as_bytes()))
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub(crate) fn feature_header(d: usize) -> String {
    (0..d).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn push_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
}

/// Per-column standardization of `features` with the mean and population
/// standard deviation of `stats_from`. Columns with zero spread in
/// `stats_from` pass through untouched.
pub fn normalize(features: &Tensor2, stats_from: &Tensor2) -> Result<Tensor2> {
    if features.cols() != stats_from.cols() {
        return Err(Error::Dimension(format!(
            "normalizing width {} with statistics of width {}",
            features.cols(),
            stats_from.cols()
        )));
    }
    let (n, d) = (stats_from.rows() as f64, stats_from.cols());
    let mut mean = vec![0.0; d];
    for row in stats_from.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in stats_from.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    let mut out = features.detached();
    let cols = out.cols();
    for row in out.values_mut().chunks_exact_mut(cols) {
        for j in 0..d {
            if std[j] > 1e-12 {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
    }
    Ok(out)
}

/// Dataset source for configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobsSpec),
    Moons(MoonsSpec),
    Idx(IdxDatasetSpec),
}

/// A dataset source plus preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    /// Standardize every split with source-train column statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { spec: DatasetSpec::Blobs(BlobsSpec::default()), standardize: true }
    }
}

impl DataConfig {
    pub fn build(&self) -> Result<DomainDataset> {
        let raw = match &self.spec {
            DatasetSpec::Blobs(s) => gen_blobs(s)?,
            DatasetSpec::Moons(s) => gen_two_moons(s)?,
            DatasetSpec::Idx(s) => s.load()?,
        };
        if self.standardize {
            raw.standardized()
        } else {
            Ok(raw)
        }
    }
}

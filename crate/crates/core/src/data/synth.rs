use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor2;

use super::{DomainDataset, LabeledSplit, UnlabeledSplit};

const BLOB_RADIUS: f64 = 3.0;
const BLOB_SIGMA: f64 = 0.5;

/// Affine map from the source distribution to the target distribution:
/// rotate the first two coordinates, scale, translate, then add isotropic
/// Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub rotation: f64,
    /// Added to the leading coordinates; shorter vectors are zero-padded.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { rotation: 0.0, translation: Vec::new(), scale: 1.0, noise_sigma: 0.0 }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Spec(format!("shift scale must be positive, got {}", self.scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!("shift noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if self.translation.len() > dim {
            return Err(Error::Spec(format!("translation has {} entries for dimension {dim}", self.translation.len())));
        }
        Ok(())
    }

    pub fn apply(&self, point: &mut [f64], rng: &mut SeededRng) {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (point[0], point[1]);
        point[0] = c * x - s * y;
        point[1] = s * x + c * y;
        for (j, v) in point.iter_mut().enumerate() {
            *v = *v * self.scale + self.translation.get(j).copied().unwrap_or(0.0);
            if self.noise_sigma > 0.0 {
                *v += self.noise_sigma * rng.normal();
            }
        }
    }
}

/// Gaussian clusters placed evenly on a circle of radius 3 in the first
/// two coordinates (sigma 0.5 on every coordinate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsSpec {
    pub classes: usize,
    pub n_per_class: usize,
    /// Test samples per class in each domain; defaults to `n_per_class`.
    pub test_per_class: Option<usize>,
    pub dim: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            n_per_class: 300,
            test_per_class: None,
            dim: 8,
            shift: ShiftSpec { rotation: 0.6, translation: vec![1.5, 0.0], ..ShiftSpec::default() },
            seed: 0,
        }
    }
}

/// Two interleaved unit half-circles, one class each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoonsSpec {
    /// Samples per split per domain.
    pub n: usize,
    /// Gaussian jitter around the half-circles, both domains.
    pub noise: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        Self { n: 400, noise: 0.1, shift: ShiftSpec { rotation: 0.5, ..ShiftSpec::default() }, seed: 0 }
    }
}

// Independent streams per (domain, split).
const STREAMS: [u64; 4] = [0x51, 0x52, 0x71, 0x72];

fn assemble(
    num_classes: usize,
    parts: [(Vec<Vec<f64>>, Vec<usize>); 4],
) -> Result<DomainDataset> {
    let [st, ss, tt, ts] = parts.map(|(rows, labels)| (Tensor2::from_rows(&rows), labels));
    DomainDataset::new(
        LabeledSplit::new(st.0?, st.1)?,
        LabeledSplit::new(ss.0?, ss.1)?,
        UnlabeledSplit::new(tt.0?, tt.1)?,
        LabeledSplit::new(ts.0?, ts.1)?,
        num_classes,
    )
}

pub fn gen_blobs(spec: &BlobsSpec) -> Result<DomainDataset> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Spec(format!("blobs need at least 2 classes and 2 dimensions, got {} and {}", spec.classes, spec.dim)));
    }
    let test_n = spec.test_per_class.unwrap_or(spec.n_per_class);
    if spec.n_per_class == 0 || test_n == 0 {
        return Err(Error::Spec("blobs need at least one sample per class".into()));
    }
    spec.shift.validate(spec.dim)?;
    let sizes = [spec.n_per_class, test_n, spec.n_per_class, test_n];
    let parts = std::array::from_fn(|i| {
        let mut rng = SeededRng::new(derive_seed(spec.seed, STREAMS[i]));
        let shifted = i >= 2;
        let mut rows = Vec::with_capacity(sizes[i] * spec.classes);
        let mut labels = Vec::with_capacity(sizes[i] * spec.classes);
        for k in 0..spec.classes {
            let angle = std::f64::consts::TAU * k as f64 / spec.classes as f64;
            for _ in 0..sizes[i] {
                let mut p: Vec<f64> = (0..spec.dim).map(|_| BLOB_SIGMA * rng.normal()).collect();
                p[0] += BLOB_RADIUS * angle.cos();
                p[1] += BLOB_RADIUS * angle.sin();
                if shifted {
                    spec.shift.apply(&mut p, &mut rng);
                }
                rows.push(p);
                labels.push(k);
            }
        }
        (rows, labels)
    });
    assemble(spec.classes, parts)
}

pub fn gen_two_moons(spec: &MoonsSpec) -> Result<DomainDataset> {
    if spec.n < 20 {
        return Err(Error::Spec(format!("two moons need at least 20 samples, got {}", spec.n)));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Spec("moon noise must be non-negative".into()));
    }
    spec.shift.validate(2)?;
    let parts = std::array::from_fn(|i| {
        let mut rng = SeededRng::new(derive_seed(spec.seed, STREAMS[i]));
        let shifted = i >= 2;
        let mut rows = Vec::with_capacity(spec.n);
        let mut labels = Vec::with_capacity(spec.n);
        for j in 0..spec.n {
            let label = usize::from(j >= spec.n.div_ceil(2));
            let theta = std::f64::consts::PI * rng.uniform();
            let mut p = if label == 0 {
                vec![theta.cos(), theta.sin()]
            } else {
                vec![1.0 - theta.cos(), 0.5 - theta.sin()]
            };
            if spec.noise > 0.0 {
                p.iter_mut().for_each(|v| *v += spec.noise * rng.normal());
            }
            if shifted {
                spec.shift.apply(&mut p, &mut rng);
            }
            rows.push(p);
            labels.push(label);
        }
        (rows, labels)
    });
    assemble(2, parts)
}

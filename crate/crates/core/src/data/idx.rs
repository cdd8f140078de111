//! IDX files as used by the MNIST family of digit datasets.
//!
//! Images: big-endian `u32` magic `0x00000803`, count, rows, cols, then
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, count,
//! then `count` unsigned bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor2;

use super::{DomainDataset, LabeledSplit, UnlabeledSplit};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Length(format!("{what} at byte {offset} runs past the end of a {}-byte file", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, kind: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        let b = &bytes[..4];
        return Err(Error::Format(format!(
            "{kind} file has magic bytes [{:02x} {:02x} {:02x} {:02x}], expected 0x{expected:08x}",
            b[0], b[1], b[2], b[3]
        )));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, payload: usize, kind: &str) -> Result<()> {
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::Length(format!("{kind} file truncated: {} bytes, header promises {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Length(format!("{kind} file has {} trailing bytes", bytes.len() - expected)));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC, "image")?;
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    check_payload(bytes, 16, payload, "image")?;
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, "label")?;
    let count = read_u32(bytes, 4, "label count")? as usize;
    check_payload(bytes, 8, count, "label")?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixels scaled to `[0, 1]`, optionally average-pooled to `side x side`,
/// one flattened image per row.
pub fn images_to_features(images: &IdxImages, downsample_to: Option<usize>) -> Result<Tensor2> {
    let (h, w) = (images.rows, images.cols);
    let side = downsample_to.unwrap_or(0);
    if let Some(s) = downsample_to {
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Spec(format!("cannot average-pool {h}x{w} images to {s}x{s}")));
        }
    }
    let (out_h, out_w) = if side > 0 { (side, side) } else { (h, w) };
    let (bh, bw) = (h / out_h, w / out_w);
    let block = (bh * bw) as f64;
    let mut values = Vec::with_capacity(images.count * out_h * out_w);
    for img in images.pixels.chunks_exact(h * w) {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for y in oy * bh..(oy + 1) * bh {
                    for x in ox * bw..(ox + 1) * bw {
                        acc += img[y * w + x] as f64 / 255.0;
                    }
                }
                values.push(acc / block);
            }
        }
    }
    Tensor2::new(images.count, out_h * out_w, values)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an image/label file pair into features and labels.
pub fn load_idx(images_path: &Path, labels_path: &Path, downsample_to: Option<usize>) -> Result<(Tensor2, Vec<usize>)> {
    let images = parse_images(&read_file(images_path)?)?;
    let labels = parse_labels(&read_file(labels_path)?)?;
    idx_pair(&images, &labels, downsample_to)
}

pub fn idx_pair(images: &IdxImages, labels: &[u8], downsample_to: Option<usize>) -> Result<(Tensor2, Vec<usize>)> {
    if images.count != labels.len() {
        return Err(Error::Consistency(format!("{} images but {} labels", images.count, labels.len())));
    }
    let features = images_to_features(images, downsample_to)?;
    Ok((features, labels.iter().map(|&l| l as usize).collect()))
}

/// Four image/label pairs forming a source→target digit task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDatasetSpec {
    pub source_train_images: PathBuf,
    pub source_train_labels: PathBuf,
    pub source_test_images: PathBuf,
    pub source_test_labels: PathBuf,
    pub target_train_images: PathBuf,
    pub target_train_labels: PathBuf,
    pub target_test_images: PathBuf,
    pub target_test_labels: PathBuf,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub downsample_to: Option<usize>,
    /// Keep at most this many source training samples, after a seeded shuffle.
    #[serde(default)]
    pub source_limit: Option<usize>,
    #[serde(default)]
    pub target_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}

fn subsample(x: Tensor2, y: Vec<usize>, limit: Option<usize>, rng: &mut SeededRng) -> Result<(Tensor2, Vec<usize>)> {
    match limit {
        Some(n) if n < y.len() => {
            let mut idx = rng.permutation(y.len());
            idx.truncate(n);
            let labels = idx.iter().map(|&i| y[i]).collect();
            Ok((x.select_rows(&idx)?, labels))
        }
        _ => Ok((x, y)),
    }
}

impl IdxDatasetSpec {
    pub fn load(&self) -> Result<DomainDataset> {
        let ds = self.downsample_to;
        let (sx, sy) = load_idx(&self.source_train_images, &self.source_train_labels, ds)?;
        let (sxt, syt) = load_idx(&self.source_test_images, &self.source_test_labels, ds)?;
        let (tx, ty) = load_idx(&self.target_train_images, &self.target_train_labels, ds)?;
        let (txt, tyt) = load_idx(&self.target_test_images, &self.target_test_labels, ds)?;
        let mut rng = SeededRng::new(derive_seed(self.seed, 0x1d));
        let (sx, sy) = subsample(sx, sy, self.source_limit, &mut rng)?;
        let (tx, ty) = subsample(tx, ty, self.target_limit, &mut rng)?;
        DomainDataset::new(
            LabeledSplit::new(sx, sy)?,
            LabeledSplit::new(sxt, syt)?,
            UnlabeledSplit::new(tx, ty)?,
            LabeledSplit::new(txt, tyt)?,
            self.num_classes,
        )
    }
}

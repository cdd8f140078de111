use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor2;

use super::TrainingView;

/// One lockstep step: a labelled source batch and an equally sized target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_x: Tensor2,
    pub source_y: Vec<usize>,
    pub target_x: Tensor2,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_y.is_empty()
    }
}

/// Seeded mini-batch order over the source and target training splits.
///
/// An epoch is one pass over the source split (the last partial batch is
/// kept). Target rows come from an independent permutation that is
/// reshuffled whenever it runs out, so when both splits have the same size
/// each epoch also visits every target row exactly once.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    batch_size: usize,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    source_pos: usize,
    target_pos: usize,
    epoch: usize,
    rng: SeededRng,
}

impl BatchIterator {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if n_source == 0 || n_target == 0 {
            return Err(Error::Data("cannot batch an empty split".into()));
        }
        let mut rng = SeededRng::new(seed);
        let source_order = rng.permutation(n_source);
        let target_order = rng.permutation(n_target);
        Ok(Self { batch_size, source_order, target_order, source_pos: 0, target_pos: 0, epoch: 0, rng })
    }

    pub fn for_view(view: &TrainingView<'_>, batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(view.source.len(), view.target_features.rows(), batch_size, seed)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.source_order.len().div_ceil(self.batch_size)
    }

    /// Next batch of the current epoch, or `None` once the epoch is done.
    pub fn next_batch(&mut self, view: &TrainingView<'_>) -> Option<Batch> {
        if self.source_pos >= self.source_order.len() {
            return None;
        }
        let end = (self.source_pos + self.batch_size).min(self.source_order.len());
        let source_indices = self.source_order[self.source_pos..end].to_vec();
        self.source_pos = end;

        let mut target_indices = Vec::with_capacity(source_indices.len());
        while target_indices.len() < source_indices.len() {
            if self.target_pos == self.target_order.len() {
                self.rng.shuffle(&mut self.target_order);
                self.target_pos = 0;
            }
            target_indices.push(self.target_order[self.target_pos]);
            self.target_pos += 1;
        }

        let source_x = view.source.features.select_rows(&source_indices).ok()?;
        let target_x = view.target_features.select_rows(&target_indices).ok()?;
        let source_y = source_indices.iter().map(|&i| view.source.labels[i]).collect();
        Some(Batch { source_x, source_y, target_x, source_indices, target_indices })
    }

    /// Starts the next epoch with a fresh source order.
    pub fn next_epoch(&mut self) {
        self.rng.shuffle(&mut self.source_order);
        self.source_pos = 0;
        self.epoch += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobsSpec};

    fn dataset() -> crate::data::DomainDataset {
        gen_blobs(&BlobsSpec { classes: 3, n_per_class: 7, dim: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn large_batch_holds_everything() {
        let d = dataset();
        let view = d.training_view();
        let mut it = BatchIterator::for_view(&view, 100, 1).unwrap();
        let b = it.next_batch(&view).unwrap();
        assert_eq!(b.len(), 21);
        assert_eq!(b.target_x.rows(), 21);
        assert!(it.next_batch(&view).is_none());
        let mut idx = b.source_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_each_sample_once_with_partial_tail() {
        let d = dataset();
        let view = d.training_view();
        let mut it = BatchIterator::for_view(&view, 4, 9).unwrap();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        let mut hist = vec![0; 3];
        while let Some(b) = it.next_batch(&view) {
            assert_eq!(b.source_x.rows(), b.target_x.rows());
            sizes.push(b.len());
            seen.extend(b.source_indices);
            for y in b.source_y {
                hist[y] += 1;
            }
        }
        assert_eq!(sizes, vec![4, 4, 4, 4, 4, 1]);
        seen.sort_unstable();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
        assert_eq!(hist, d.source_train.class_histogram(3));
        assert_eq!(it.batches_per_epoch(), 6);
    }

    #[test]
    fn same_seed_same_sequence() {
        let d = dataset();
        let view = d.training_view();
        let run = |seed| {
            let mut it = BatchIterator::for_view(&view, 5, seed).unwrap();
            let mut order = Vec::new();
            for _ in 0..2 {
                while let Some(b) = it.next_batch(&view) {
                    order.push((b.source_indices, b.target_indices));
                }
                it.next_epoch();
            }
            order
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn rejects_zero_batch() {
        assert!(BatchIterator::new(3, 3, 0, 0).is_err());
    }
}

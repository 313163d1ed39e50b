//! In-memory labelled image sets and batching.

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        // Batch::new carries the shape, range and finiteness checks.
        let batch = Batch::new(images, labels, num_classes)?;
        if batch.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("dataset images must lie in [0, 1]"));
        }
        Ok(Dataset {
            images: batch.images,
            labels: batch.labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.select(&idx);
        Dataset {
            images: b.images,
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    /// Deterministic permutation of `0..len` for a given seed.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Consecutive batches in the given order; the last one may be short.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| self.select(idx))
    }

    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
            self.select(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let images = Array4::from_shape_fn((5, 1, 2, 2), |(b, _, i, j)| (b * 4 + i * 2 + j) as f32 / 20.0);
        Dataset::new(images, vec![0, 1, 2, 0, 1], 3).unwrap()
    }

    #[test]
    fn same_seed_same_order() {
        let d = toy();
        assert_eq!(d.shuffled_order(3), d.shuffled_order(3));
        let mut o = d.shuffled_order(3);
        o.sort();
        assert_eq!(o, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batches_cover_everything() {
        let d = toy();
        let sizes: Vec<usize> = d.sequential_batches(2).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let b = d.select(&[4, 0]);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(b.images[[1, 0, 0, 1]], d.images[[0, 0, 0, 1]]);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let images = Array4::from_elem((1, 1, 2, 2), 1.5);
        assert!(Dataset::new(images, vec![0], 2).is_err());
    }
}

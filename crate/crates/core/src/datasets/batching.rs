use rand::seq::SliceRandom;
use rand::Rng;

use super::{DatasetError, LabeledImageDataset};

/// Endless stream of index batches drawn from `pool`, reshuffled every epoch.
/// A short tail that does not fill a batch is dropped.
#[derive(Debug, Clone)]
pub struct MinibatchIter<R> {
    pool: Vec<usize>,
    batch_size: usize,
    rng: R,
    order: Vec<usize>,
    pos: usize,
}

impl<R: Rng> MinibatchIter<R> {
    pub fn new(pool: Vec<usize>, batch_size: usize, rng: R) -> Result<Self, DatasetError> {
        if batch_size < 2 || batch_size > pool.len() {
            return Err(DatasetError::BatchSize {
                batch: batch_size,
                available: pool.len(),
            });
        }
        Ok(Self {
            pool,
            batch_size,
            rng,
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    /// Current epoch order, position within it, and the shuffling rng.
    pub fn state(&self) -> (&[usize], usize, &R) {
        (&self.order, self.pos, &self.rng)
    }

    pub fn restore(&mut self, order: Vec<usize>, pos: usize, rng: R) -> Result<(), DatasetError> {
        if !order.is_empty() && order.len() != self.pool.len() {
            return Err(DatasetError::Inconsistent(format!(
                "epoch order of length {} for a pool of {}",
                order.len(),
                self.pool.len()
            )));
        }
        self.order = order;
        self.pos = pos;
        self.rng = rng;
        Ok(())
    }
}

impl<R: Rng> Iterator for MinibatchIter<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch_size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(batch)
    }
}

/// Random train/test partition of `0..n`; both parts come back sorted.
pub fn split_indices(n: usize, test_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut test = all[..n_test].to_vec();
    let mut train = all[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Two row indices whose images share the value of factor `k`; every other
/// factor is drawn independently and uniformly for each image.
pub fn sample_pair_with_shared_factor(
    ds: &LabeledImageDataset,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize), DatasetError> {
    let grid = &ds.grid;
    if k >= grid.num_factors() {
        return Err(DatasetError::Config(format!(
            "factor {k} out of range for {} factors",
            grid.num_factors()
        )));
    }
    if let Some(f) = (0..grid.num_factors()).find(|&f| f != k && grid.counts[f] < 2) {
        return Err(DatasetError::DegenerateGrid {
            factor: grid.names[f].clone(),
        });
    }
    let shared = rng.random_range(0..grid.counts[k]) as u32;
    let mut draw = || -> usize {
        let tuple: Vec<u32> = grid
            .counts
            .iter()
            .enumerate()
            .map(|(f, &c)| if f == k { shared } else { rng.random_range(0..c) as u32 })
            .collect();
        grid.flat_index(&tuple)
    };
    let a = draw();
    let b = draw();
    Ok((a, b))
}

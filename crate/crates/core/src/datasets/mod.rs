//! Procedurally generated image datasets with known generative factors.
//!
//! Images are stored in canonical mixed-radix order over the factor grid: row
//! `r` holds the factor tuple obtained by writing `r` in the radix given by the
//! factor value counts (last factor varying fastest). Constructors check this,
//! so a factor tuple can always be turned back into a row index arithmetically.

mod batching;
pub mod dsprites;
pub mod fading;
mod io;

pub use batching::{sample_pair_with_shared_factor, split_indices, MinibatchIter};
pub use dsprites::{gen_dsprites, DspritesConfig, Shape};
pub use fading::{gen_fading_squares, FADING_BLOCK, FADING_SIDE};
pub use io::{load_dataset, save_dataset, DATASET_MAGIC};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown shape {0:?} (expected square, ellipse or heart)")]
    UnknownShape(String),
    #[error("factor {factor} has a single value; cannot draw pairs differing in it")]
    DegenerateGrid { factor: String },
    #[error("batch size {batch} is invalid for {available} images")]
    BatchSize { batch: usize, available: usize },
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Names, cardinalities and values of the generative factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGrid {
    pub names: Vec<String>,
    pub counts: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl FactorGrid {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, DatasetError> {
        if names.len() != values.len() || names.is_empty() {
            return Err(DatasetError::Config(format!(
                "{} factor names for {} value lists",
                names.len(),
                values.len()
            )));
        }
        if values.iter().any(Vec::is_empty) {
            return Err(DatasetError::Config("every factor needs at least one value".into()));
        }
        let counts = values.iter().map(Vec::len).collect();
        Ok(Self {
            names,
            counts,
            values,
        })
    }

    pub fn num_factors(&self) -> usize {
        self.counts.len()
    }

    pub fn num_images(&self) -> usize {
        self.counts.iter().product()
    }

    /// Number of factors that actually vary.
    pub fn intrinsic_dim(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 1).count()
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Row of a factor tuple in canonical order.
    pub fn flat_index(&self, tuple: &[u32]) -> usize {
        tuple
            .iter()
            .zip(&self.counts)
            .fold(0, |acc, (&v, &c)| acc * c + v as usize)
    }

    /// Factor tuple of a row in canonical order.
    pub fn tuple_of(&self, mut row: usize) -> Vec<u32> {
        let mut out = vec![0u32; self.counts.len()];
        for (slot, &c) in out.iter_mut().zip(&self.counts).rev() {
            *slot = (row % c) as u32;
            row /= c;
        }
        out
    }
}

/// Images with per-image factor indices into a [`FactorGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageDataset {
    pub width: usize,
    pub height: usize,
    pixels: Vec<f64>,
    factors: Vec<u32>,
    pub grid: FactorGrid,
}

impl LabeledImageDataset {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        factors: Vec<u32>,
        grid: FactorGrid,
    ) -> Result<Self, DatasetError> {
        let n = grid.num_images();
        let k = grid.num_factors();
        if width == 0 || height == 0 {
            return Err(DatasetError::Inconsistent("empty image dimensions".into()));
        }
        if pixels.len() != n * width * height {
            return Err(DatasetError::Inconsistent(format!(
                "{} pixels for {n} images of {width}x{height}",
                pixels.len()
            )));
        }
        if factors.len() != n * k {
            return Err(DatasetError::Inconsistent(format!(
                "{} factor entries for {n} images with {k} factors",
                factors.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DatasetError::Inconsistent(format!("pixel value {p} outside [0,1]")));
        }
        for (row, tuple) in factors.chunks(k).enumerate() {
            if tuple != grid.tuple_of(row).as_slice() {
                return Err(DatasetError::Inconsistent(format!(
                    "row {row} has factors {tuple:?}, expected canonical order"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
            factors,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.num_images()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.width * self.height
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn factors_of(&self, i: usize) -> &[u32] {
        let k = self.grid.num_factors();
        &self.factors[i * k..(i + 1) * k]
    }

    pub fn factor_table(&self) -> &[u32] {
        &self.factors
    }

    /// `indices.len() × (width·height)` tensor of the selected images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_size());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), self.image_size()], data).expect("non-empty batch")
    }

    pub fn mean_pixel(&self, i: usize) -> f64 {
        let img = self.image(i);
        img.iter().sum::<f64>() / img.len() as f64
    }
}

/// `count` evenly spaced values over `[lo, hi]`; a single value sits at `single`.
pub(crate) fn linspace(lo: f64, hi: f64, count: usize, single: f64) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![single],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_roundtrip() {
        let grid = FactorGrid::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0.0; 3], vec![0.0; 1], vec![0.0; 4]],
        )
        .unwrap();
        assert_eq!(grid.num_images(), 12);
        assert_eq!(grid.intrinsic_dim(), 2);
        for r in 0..12 {
            assert_eq!(grid.flat_index(&grid.tuple_of(r)), r);
        }
        assert_eq!(grid.tuple_of(5), vec![1, 0, 1]);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let grid = FactorGrid::new(vec!["c".into()], vec![vec![0.0, 1.0]]).unwrap();
        let err = LabeledImageDataset::new(1, 1, vec![0.0, 1.5], vec![0, 1], grid).unwrap_err();
        assert!(matches!(err, DatasetError::Inconsistent(_)));
    }
}

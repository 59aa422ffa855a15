//! In-memory labelled datasets and synthetic generators.

use crate::error::{LabError, Result};
use crate::numerics::{gaussian, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × dim`
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Shuffled mini-batches of at most `batch` rows covering every sample once.
    pub fn epoch_batches(&self, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Gaussian clusters: class `c` is centred on the unit vector `e_c` with
/// per-coordinate standard deviation `std`. Labels cycle through the classes.
pub fn synth_classification(n: usize, dim: usize, classes: usize, std: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes == 0 || classes > dim {
        return Err(LabError::InvalidArgument(format!(
            "need 1 ≤ classes ≤ dim, got {classes} classes in {dim} dimensions"
        )));
    }
    let mut x = gaussian(rng, n, dim, 0.0, std);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (r, &c) in labels.iter().enumerate() {
        x.row_mut(r)[c] += 1.0;
    }
    Ok(Dataset { x, labels, classes })
}

/// Standard-normal inputs with uniformly random labels.
pub fn synthetic_gaussian(n: usize, dim: usize, classes: usize, rng: &mut Rng) -> Dataset {
    let x = gaussian(rng, n, dim, 0.0, 1.0);
    let labels = (0..n).map(|_| rng.below(classes.max(1))).collect();
    Dataset { x, labels, classes }
}

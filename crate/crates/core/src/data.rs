//! Dense row-major feature matrices and a synthetic clustered dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `rows × dim` matrix of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::invalid("zero-dimensional rows cannot hold data"));
        }
        if dim > 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        FeatureMatrix { dim, data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix { dim: self.dim, data }
    }

    /// Per-dimension population standard deviation.
    pub fn column_std(&self) -> Vec<f64> {
        let n = self.rows();
        if n == 0 {
            return vec![0.0; self.dim];
        }
        let mut mean = vec![0.0; self.dim];
        for r in self.iter_rows() {
            mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; self.dim];
        for r in self.iter_rows() {
            for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.into_iter().map(|v| (v / n as f64).sqrt()).collect()
    }
}

/// Labelled Gaussian blobs: `k` centers drawn with std `center_std` per
/// coordinate, points scattered around them with unit std. Items cycle through
/// the clusters and are then shuffled.
pub fn gaussian_clusters(
    n: usize,
    dim: usize,
    k: usize,
    center_std: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<u32>)> {
    if k == 0 || dim == 0 {
        return Err(Error::invalid("need at least one cluster and one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..k * dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            center_std * g
        })
        .collect();
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &c in &labels {
        let center = &centers[c as usize * dim..(c as usize + 1) * dim];
        for &mu in center {
            let g: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + g);
        }
    }
    Ok((FeatureMatrix { dim, data }, labels))
}

//! Principal-component projection of site features.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// Row-major `n x dims` site coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedField {
    pub n: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl ReducedField {
    pub fn new(n: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dims {
            return Err(Error::Length {
                expected: n * dims,
                found: data.len(),
            });
        }
        Ok(Self { n, dims, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl PcaTransform {
    /// Learns the top `dims` directions of `n` row-major samples of length `dim`.
    /// Fewer directions are kept when the sample covariance has lower rank.
    pub fn fit(samples: &[f64], n: usize, dim: usize, dims: usize) -> Result<Self> {
        if samples.len() != n * dim {
            return Err(Error::Length {
                expected: n * dim,
                found: samples.len(),
            });
        }
        if n <= dims {
            return Err(Error::InsufficientData(format!(
                "{n} sites for {dims} principal components"
            )));
        }
        let mut mean = vec![0.0; dim];
        for row in samples.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let centered = DMatrix::from_fn(n, dim, |i, j| samples[i * dim + j] - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut components = Vec::new();
        let mut variances = Vec::new();
        for &k in order.iter().take(dims) {
            let lambda = eig.eigenvalues[k];
            if !(lambda > RANK_TOL * top) {
                break;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // fix the sign: largest-magnitude entry positive
            let pivot = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(lambda);
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn dims(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of one sample.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn apply(&self, samples: &[f64], dim: usize) -> ReducedField {
        let n = samples.len() / dim.max(1);
        let data = samples.chunks_exact(dim).flat_map(|x| self.project(x)).collect();
        ReducedField {
            n,
            dims: self.dims(),
            data,
        }
    }

    /// Maps coordinates back to feature space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }
}

/// Centers the site features and projects them on their top `dims`
/// principal directions.
pub fn reduce_features(
    field: &super::FeatureField,
    dims: usize,
) -> Result<(ReducedField, PcaTransform)> {
    let t = PcaTransform::fit(&field.features, field.sites(), field.dim, dims)?;
    Ok((t.apply(&field.features, field.dim), t))
}

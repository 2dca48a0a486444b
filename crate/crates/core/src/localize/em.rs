//! Two-component Gaussian mixture fitted by expectation-maximization.
//!
//! Covariances carry a weak `exp(-delta/2 * tr(Sigma^-1))` prior, which makes
//! the update `Sigma_k = (S_k + delta I) / n_k` (S_k the weighted scatter).
//! `delta` is proportional to the site count, so duplicating every site
//! leaves the fit unchanged. The traced objective is the penalized
//! log-likelihood, which EM never decreases.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pca::ReducedField;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    /// Share of sites, farthest from the global fit, seeding component 1.
    pub init_fraction: f64,
    /// Covariance ridge relative to the mean global variance.
    pub reg: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            init_fraction: 0.1,
            reg: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoModelFit {
    pub dims: usize,
    pub pi: [f64; 2],
    pub means: [Vec<f64>; 2],
    /// Row-major `dims x dims`.
    pub covariances: [Vec<f64>; 2],
    /// Per-site responsibilities; each pair sums to 1.
    pub posteriors: Vec<[f64; 2]>,
    pub loglik_trace: Vec<f64>,
    /// Completed M-steps.
    pub iterations: usize,
    pub converged: bool,
}

impl TwoModelFit {
    /// Component with the smaller weight; ties go to component 1.
    pub fn minority(&self) -> usize {
        usize::from(self.pi[1] <= self.pi[0])
    }

    pub fn minority_posteriors(&self) -> Vec<f64> {
        let k = self.minority();
        self.posteriors.iter().map(|p| p[k]).collect()
    }
}

struct Component {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Component {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numerical("covariance not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x.len() as f64;
        let diff = x - &self.mean;
        let y = self
            .chol
            .l()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + y.norm_squared())
    }

    fn trace_of_inverse(&self) -> f64 {
        self.chol.inverse().trace()
    }
}

/// Weighted mean and scatter `sum w (x - mean)(x - mean)^T`.
fn weighted_moments(xs: &[DVector<f64>], w: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (x, &wi) in xs.iter().zip(w) {
        mean.axpy(wi, x, 1.0);
    }
    if total > 0.0 {
        mean /= total;
    }
    let mut scatter = DMatrix::zeros(d, d);
    for (x, &wi) in xs.iter().zip(w) {
        let diff = x - &mean;
        scatter.ger(wi, &diff, &diff, 1.0);
    }
    (total, mean, scatter)
}

fn regularized(scatter: &DMatrix<f64>, delta: f64, count: f64) -> DMatrix<f64> {
    let d = scatter.nrows();
    (scatter + DMatrix::identity(d, d) * delta) / count
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fits a dominant and a minority Gaussian to the sites. Component 0 starts
/// from the global fit and component 1 from the `init_fraction` of sites
/// with the largest Mahalanobis distance to it; `seed` only breaks ties in
/// that ranking.
pub fn em_fit(field: &ReducedField, seed: u64, cfg: &EmConfig) -> Result<TwoModelFit> {
    let (n, d) = (field.n, field.dims);
    if d == 0 {
        return Err(Error::InsufficientData("no feature dimensions to fit".into()));
    }
    if n < 2 * d {
        return Err(Error::InsufficientData(format!(
            "{n} sites for a {d}-dimensional fit (need {})",
            2 * d
        )));
    }
    let xs: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_row_slice(field.row(i))).collect();

    let ones = vec![1.0; n];
    let (_, global_mean, global_scatter) = weighted_moments(&xs, &ones);
    let mean_var = global_scatter.trace() / (n * d) as f64;
    let delta = cfg.reg * mean_var.max(f64::MIN_POSITIVE) * n as f64;
    let global = Component::new(global_mean, regularized(&global_scatter, delta, n as f64))?;

    // seed the minority component with the outliers of the global fit
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "em-init", 0));
    let maha: Vec<f64> = xs.iter().map(|x| -2.0 * global.log_density(x)).collect();
    order.sort_by(|&a, &b| maha[b].total_cmp(&maha[a]));
    let m = ((cfg.init_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut w1 = vec![0.0; n];
    for &i in &order[..m] {
        w1[i] = 1.0;
    }
    let (c1, mean1, scatter1) = weighted_moments(&xs, &w1);
    let mut comps = [
        global,
        Component::new(mean1, regularized(&scatter1, delta, c1))?,
    ];
    let mut pi = [1.0 - m as f64 / n as f64, m as f64 / n as f64];

    let mut trace = Vec::new();
    let mut resp = vec![[0.0; 2]; n];
    let mut iterations = 0;
    let mut converged = false;
    loop {
        // E-step and objective at the current parameters
        let mut loglik = 0.0;
        for (x, r) in xs.iter().zip(resp.iter_mut()) {
            let a = pi[0].ln() + comps[0].log_density(x);
            let b = pi[1].ln() + comps[1].log_density(x);
            let lse = log_sum_exp2(a, b);
            loglik += lse;
            r[0] = (a - lse).exp();
            r[1] = (b - lse).exp();
        }
        let penalty = 0.5 * delta * (comps[0].trace_of_inverse() + comps[1].trace_of_inverse());
        let objective = loglik - penalty;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "EM objective {objective} at iteration {iterations}"
            )));
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (objective - prev).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        trace.push(objective);
        if converged || iterations >= cfg.max_iter {
            break;
        }
        // M-step
        for k in 0..2 {
            let w: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let (nk, mean, scatter) = weighted_moments(&xs, &w);
            pi[k] = nk / n as f64;
            if nk > 1e-12 * n as f64 {
                comps[k] = Component::new(mean, regularized(&scatter, delta, nk))?;
            }
        }
        iterations += 1;
    }

    let to_vec = |c: &Component| c.cov.transpose().as_slice().to_vec();
    Ok(TwoModelFit {
        dims: d,
        pi,
        means: [
            comps[0].mean.as_slice().to_vec(),
            comps[1].mean.as_slice().to_vec(),
        ],
        covariances: [to_vec(&comps[0]), to_vec(&comps[1])],
        posteriors: resp,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

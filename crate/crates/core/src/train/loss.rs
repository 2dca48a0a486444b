//! Distance-based logistic loss, spectral-flatness regularizer and their
//! analytic gradients with respect to the residuals.
//!
//! Residuals are handled as flat `f64` slices of `K*K` samples.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::matmul;

/// Guard added to every PSD bin inside the logarithms.
pub const PSD_EPS: f64 = 1e-12;

/// Group id per patch; two patches are a positive pair iff their ids match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLabels {
    pub groups: Vec<usize>,
}

impl GroupLabels {
    pub fn new(groups: Vec<usize>) -> Self {
        Self { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `l_ij = +1`; the diagonal is never positive.
    #[inline]
    pub fn positive(&self, i: usize, j: usize) -> bool {
        i != j && self.groups[i] == self.groups[j]
    }

    pub fn positives_in_row(&self, i: usize) -> usize {
        (0..self.len()).filter(|&j| self.positive(i, j)).count()
    }
}

/// Symmetric `N x N` matrix of scaled squared distances; diagonal is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseDistances {
    pub n: usize,
    pub d: Vec<f64>,
}

impl PairwiseDistances {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

fn check_equal_lengths(residuals: &[&[f64]]) -> Result<usize> {
    let len = residuals
        .first()
        .map(|r| r.len())
        .ok_or_else(|| Error::Shape("no residuals".into()))?;
    if residuals.iter().any(|r| r.len() != len) {
        return Err(Error::Shape("residuals differ in size".into()));
    }
    Ok(len)
}

/// `d_ij = ||r_i - r_j||^2 / tau`.
pub fn pairwise_distances(residuals: &[&[f64]], tau: f64) -> Result<PairwiseDistances> {
    check_equal_lengths(residuals)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("distance scale {tau} must be positive")));
    }
    let n = residuals.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = residuals[i]
                .iter()
                .zip(residuals[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s / tau;
            d[j * n + i] = s / tau;
        }
    }
    Ok(PairwiseDistances { n, d })
}

/// Row-wise softmax of `-d` with the diagonal excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSoftmax {
    pub n: usize,
    /// `p_i(j)`, zero on the diagonal.
    pub p: Vec<f64>,
    /// `log p_i(j)`, `-inf` on the diagonal.
    pub log_p: Vec<f64>,
}

impl RowSoftmax {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(d: &PairwiseDistances) -> RowSoftmax {
    let n = d.n;
    let mut p = vec![0.0; n * n];
    let mut log_p = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        let row = (0..n).filter(|&j| j != i).map(|j| -d.get(i, j));
        let lse = log_sum_exp(row);
        for j in (0..n).filter(|&j| j != i) {
            let lp = -d.get(i, j) - lse;
            log_p[i * n + j] = lp;
            p[i * n + j] = lp.exp();
        }
    }
    RowSoftmax { n, p, log_p }
}

/// Per-patch losses `L_i = -log sum_{l_ij=+1} p_i(j)` and their sum.
pub fn dbl_loss(p: &RowSoftmax, labels: &GroupLabels) -> Result<(Vec<f64>, f64)> {
    if labels.len() != p.n {
        return Err(Error::Shape(format!(
            "{} labels for {} patches",
            labels.len(),
            p.n
        )));
    }
    let n = p.n;
    let mut per_patch = Vec::with_capacity(n);
    for i in 0..n {
        if labels.positives_in_row(i) == 0 {
            return Err(Error::InsufficientData(format!(
                "patch {i} has no positive partner"
            )));
        }
        let pos = (0..n)
            .filter(|&j| labels.positive(i, j))
            .map(|j| p.log_p[i * n + j]);
        per_patch.push((-log_sum_exp(pos)).max(0.0));
    }
    let total = per_patch.iter().sum();
    Ok((per_patch, total))
}

/// Power spectral density estimate of a batch of square residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStats {
    pub k: usize,
    /// `S(u, v)`, row-major `K x K`.
    pub s: Vec<f64>,
    /// Geometric and arithmetic means of `S + PSD_EPS`.
    pub gm: f64,
    pub am: f64,
}

fn fft2(buf: &mut [Complex<f64>], k: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let fft = if inverse {
        planner.plan_fft_inverse(k)
    } else {
        planner.plan_fft_forward(k)
    };
    for row in buf.chunks_exact_mut(k) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); k];
    for c in 0..k {
        for r in 0..k {
            col[r] = buf[r * k + c];
        }
        fft.process(&mut col);
        for r in 0..k {
            buf[r * k + c] = col[r];
        }
    }
}

fn spectra(residuals: &[&[f64]], k: usize) -> Vec<Vec<Complex<f64>>> {
    let mut planner = FftPlanner::new();
    residuals
        .iter()
        .map(|r| {
            let mut buf: Vec<Complex<f64>> = r.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft2(&mut buf, k, false, &mut planner);
            buf
        })
        .collect()
}

fn side_of(len: usize) -> Result<usize> {
    let k = (len as f64).sqrt().round() as usize;
    if k * k != len {
        return Err(Error::Shape(format!("{len} samples is not a square patch")));
    }
    Ok(k)
}

/// `S(u,v) = (1/N) sum_i |DFT2(r_i)(u,v)|^2` with the unnormalized DFT.
pub fn psd(residuals: &[&[f64]], height: usize, width: usize) -> Result<SpectralStats> {
    if height != width {
        return Err(Error::Shape(format!("non-square patch {height}x{width}")));
    }
    let len = check_equal_lengths(residuals)?;
    if len != height * width {
        return Err(Error::Shape(format!("{len} samples for {height}x{width}")));
    }
    Ok(psd_from_spectra(&spectra(residuals, height), height))
}

fn psd_from_spectra(spec: &[Vec<Complex<f64>>], k: usize) -> SpectralStats {
    let n = spec.len() as f64;
    let mut s = vec![0.0; k * k];
    for f in spec {
        for (acc, z) in s.iter_mut().zip(f) {
            *acc += z.norm_sqr();
        }
    }
    for v in &mut s {
        *v /= n;
    }
    let am = s.iter().map(|v| v + PSD_EPS).sum::<f64>() / s.len() as f64;
    let gm = (s.iter().map(|v| (v + PSD_EPS).ln()).sum::<f64>() / s.len() as f64).exp();
    SpectralStats { k, s, gm, am }
}

/// `R = mean(log(S + eps)) - log(mean(S + eps))`, always `<= 0`.
pub fn gm_am_regularizer(s: &[f64]) -> f64 {
    let m = s.len() as f64;
    let mean_log = s.iter().map(|v| (v + PSD_EPS).ln()).sum::<f64>() / m;
    let log_mean = (s.iter().map(|v| v + PSD_EPS).sum::<f64>() / m).ln();
    // AM >= GM; clamp the rounding residue
    (mean_log - log_mean).min(0.0)
}

pub fn total_loss(l0: f64, r: f64, lambda: f64) -> f64 {
    l0 - lambda * r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_patch: Vec<f64>,
    pub l0: f64,
    pub r: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Forward evaluation of the full objective.
pub fn evaluate_loss(
    residuals: &[&[f64]],
    labels: &GroupLabels,
    lambda: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    Ok(loss_and_gradient(residuals, labels, lambda, tau, false)?.0)
}

/// Exact gradient of `L = L_0 - lambda * R` with respect to every residual sample.
pub fn loss_backward(
    residuals: &[&[f64]],
    labels: &GroupLabels,
    lambda: f64,
    tau: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    loss_and_gradient(residuals, labels, lambda, tau, true)
}

fn loss_and_gradient(
    residuals: &[&[f64]],
    labels: &GroupLabels,
    lambda: f64,
    tau: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let len = check_equal_lengths(residuals)?;
    let k = side_of(len)?;
    let n = residuals.len();
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be nonnegative")));
    }
    let d = pairwise_distances(residuals, tau)?;
    let p = softmax_rows(&d);
    let (per_patch, l0) = dbl_loss(&p, labels)?;

    let spec = spectra(residuals, k);
    let stats = psd_from_spectra(&spec, k);
    let r = gm_am_regularizer(&stats.s);
    let breakdown = LossBreakdown {
        per_patch,
        l0,
        r,
        lambda,
        total: total_loss(l0, r, lambda),
    };
    if !want_grad {
        return Ok((breakdown, Vec::new()));
    }

    // dL0/dd_ij = q_i(j) - p_i(j), q being p renormalized over the positives
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let log_pos = log_sum_exp(
            (0..n)
                .filter(|&j| labels.positive(i, j))
                .map(|j| p.log_p[i * n + j]),
        );
        for j in (0..n).filter(|&j| j != i) {
            let q = if labels.positive(i, j) {
                (p.log_p[i * n + j] - log_pos).exp()
            } else {
                0.0
            };
            a[i * n + j] += q - p.get(i, j);
            a[j * n + i] += q - p.get(i, j);
        }
    }
    // grad_i = (2/tau) * (rowsum(A)_i * r_i - (A R)_i)
    let flat: Vec<f64> = residuals.iter().flat_map(|r| r.iter().copied()).collect();
    let mut ar = vec![0.0; n * len];
    matmul(n, n, len, &a, &flat, &mut ar, false);
    let mut grads: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let rs: f64 = a[i * n..(i + 1) * n].iter().sum();
            residuals[i]
                .iter()
                .zip(&ar[i * len..(i + 1) * len])
                .map(|(&ri, &ari)| 2.0 / tau * (rs * ri - ari))
                .collect()
        })
        .collect();

    if lambda != 0.0 {
        let m = (k * k) as f64;
        let total_s: f64 = stats.s.iter().map(|v| v + PSD_EPS).sum();
        let g: Vec<f64> = stats
            .s
            .iter()
            .map(|v| 1.0 / (m * (v + PSD_EPS)) - 1.0 / total_s)
            .collect();
        let mut planner = FftPlanner::new();
        let coef = -lambda * 2.0 / n as f64;
        for (grad, f) in grads.iter_mut().zip(&spec) {
            let mut buf: Vec<Complex<f64>> = f.iter().zip(&g).map(|(z, &gv)| z * gv).collect();
            fft2(&mut buf, k, true, &mut planner);
            for (gr, z) in grad.iter_mut().zip(&buf) {
                *gr += coef * z.re;
            }
        }
    }
    Ok((breakdown, grads))
}

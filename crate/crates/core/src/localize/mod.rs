//! Blind localization: co-occurrence features of the quantized noiseprint,
//! a two-Gaussian EM fit, and a heatmap of minority-component posteriors.

mod em;
mod features;
mod pca;

pub use em::{em_fit, EmConfig, TwoModelFit};
pub use features::{
    cooccurrence_features, quantize_residual, residual_sigma, FeatureField, QuantizedResidual, BINS,
    FEATURE_DIM,
};
pub use pca::{reduce_features, PcaTransform, ReducedField};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ExtractorParams, Mode};
use crate::raster::{self, to_luminance, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub window: usize,
    pub stride: usize,
    pub dims: usize,
    /// Quantizer gain: levels switch at `0.5 * sigma / scale`.
    pub quant_scale: f64,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            window: 64,
            stride: 8,
            dims: 25,
            quant_scale: 1.0,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

/// EM diagnostics written next to a heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub loglik_trace: Vec<f64>,
    pub pi: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
    /// Feature dimensions actually used by the fit.
    pub dims: usize,
    /// Largest minus smallest site score; near 0 when nothing stands out.
    pub posterior_spread: f64,
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub heatmap: Raster,
    pub residual: Raster,
    pub diagnostics: EmDiagnostics,
}

fn axis_weights(centers: &[usize], len: usize) -> Vec<(usize, usize, f64)> {
    let last = centers.len() - 1;
    (0..len)
        .map(|p| {
            if p <= centers[0] {
                (0, 0, 0.0)
            } else if p >= centers[last] {
                (last, last, 0.0)
            } else {
                let i = centers.partition_point(|&c| c <= p) - 1;
                let t = (p - centers[i]) as f64 / (centers[i + 1] - centers[i]) as f64;
                (i, i + 1, t)
            }
        })
        .collect()
}

/// Bilinear interpolation of per-site scores to an `height`x`width` map,
/// constant beyond the outermost site centers.
pub fn make_heatmap(scores: &[f64], field: &FeatureField, height: usize, width: usize) -> Result<Raster> {
    if scores.len() != field.sites() || field.sites() == 0 {
        return Err(Error::Length {
            expected: field.sites(),
            found: scores.len(),
        });
    }
    let ry = axis_weights(&field.center_rows, height);
    let rx = axis_weights(&field.center_cols, width);
    let at = |i: usize, j: usize| scores[i * field.cols + j];
    let mut data = Vec::with_capacity(height * width);
    for &(i0, i1, ty) in &ry {
        for &(j0, j1, tx) in &rx {
            let top = (1.0 - tx) * at(i0, j0) + tx * at(i0, j1);
            let bottom = (1.0 - tx) * at(i1, j0) + tx * at(i1, j1);
            data.push(((1.0 - ty) * top + ty * bottom) as f32);
        }
    }
    Raster::new(height, width, 1, data)
}

/// Heatmap from an already extracted noiseprint.
pub fn localize_residual(residual: &Raster, cfg: &LocalizeConfig) -> Result<(Raster, EmDiagnostics)> {
    let z = quantize_residual(residual, cfg.quant_scale)?;
    let field = cooccurrence_features(&z, cfg.window, cfg.stride)?;
    // small images have too few sites for the configured dimension
    let dims = cfg.dims.min(field.sites() / 2);
    let (reduced, _) = reduce_features(&field, dims)?;
    let (scores, diag) = if reduced.dims == 0 {
        // every site has the same feature vector
        (
            vec![0.0; field.sites()],
            EmDiagnostics {
                loglik_trace: Vec::new(),
                pi: [1.0, 0.0],
                iterations: 0,
                converged: true,
                dims: 0,
                posterior_spread: 0.0,
            },
        )
    } else {
        let fit = em_fit(&reduced, cfg.seed, &cfg.em)?;
        let scores = fit.minority_posteriors();
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let diag = EmDiagnostics {
            loglik_trace: fit.loglik_trace,
            pi: fit.pi,
            iterations: fit.iterations,
            converged: fit.converged,
            dims: fit.dims,
            posterior_spread: hi - lo,
        };
        (scores, diag)
    };
    let heat = make_heatmap(&scores, &field, residual.height(), residual.width())?;
    Ok((heat, diag))
}

/// Full pipeline: eval-mode noiseprint, then [`localize_residual`].
pub fn localize(params: &ExtractorParams<f32>, image: &Raster, cfg: &LocalizeConfig) -> Result<Localization> {
    let gray = if image.channels() == 1 {
        image.clone()
    } else {
        to_luminance(image)?
    };
    if gray.height() < cfg.window || gray.width() < cfg.window {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than window {}",
            gray.height(),
            gray.width(),
            cfg.window
        )));
    }
    let residual = params.clone().with_mode(Mode::Eval).extract(&gray)?;
    let (heatmap, diagnostics) = localize_residual(&residual, cfg)?;
    Ok(Localization {
        heatmap,
        residual,
        diagnostics,
    })
}

pub fn save_diagnostics(diag: &EmDiagnostics, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(diag)?;
    raster::write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests;

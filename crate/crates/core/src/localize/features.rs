//! Residual quantization and windowed co-occurrence histograms.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Quantization levels per residual sample.
pub const LEVELS: usize = 3;
/// Samples per co-occurrence pattern.
pub const PATTERN_LEN: usize = 4;
/// Histogram bins per direction, `LEVELS^PATTERN_LEN`.
pub const BINS: usize = 81;
/// Feature length: one histogram per direction.
pub const FEATURE_DIM: usize = 2 * BINS;

/// Residual mapped to levels `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedResidual {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<u8>,
}

impl QuantizedResidual {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.levels[row * self.width + col]
    }
}

/// Population standard deviation of all samples.
pub fn residual_sigma(np: &Raster) -> f64 {
    let mean = np.mean();
    let n = np.len().max(1) as f64;
    (np.data()
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// `clamp(round(x / sigma * scale), -1, 1) + 1`. A constant residual has
/// zero spread and quantizes to the middle level everywhere.
pub fn quantize_residual(np: &Raster, scale: f64) -> Result<QuantizedResidual> {
    np.require_single_channel()?;
    let sigma = residual_sigma(np);
    let levels = if sigma > 0.0 && sigma.is_finite() {
        np.data()
            .iter()
            .map(|&v| ((f64::from(v) / sigma * scale).round().clamp(-1.0, 1.0) + 1.0) as u8)
            .collect()
    } else {
        vec![1; np.len()]
    };
    Ok(QuantizedResidual {
        height: np.height(),
        width: np.width(),
        levels,
    })
}

/// Feature vectors on a regular grid of square windows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub window: usize,
    pub stride: usize,
    /// Grid shape in sites.
    pub rows: usize,
    pub cols: usize,
    /// Pixel coordinates of the site centers along each axis.
    pub center_rows: Vec<usize>,
    pub center_cols: Vec<usize>,
    pub dim: usize,
    /// Site-major, `rows * cols * dim` values.
    pub features: Vec<f64>,
}

impl FeatureField {
    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn site(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }
}

fn grid(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..=(extent - window) / stride).map(|i| i * stride).collect()
}

/// Pattern code of every horizontal (`vertical = false`) or vertical
/// 4-sample run starting at each pixel; runs leaving the image get no code.
fn pattern_codes(z: &QuantizedResidual, vertical: bool) -> Vec<u8> {
    let (h, w) = (z.height, z.width);
    let mut codes = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let fits = if vertical { r + PATTERN_LEN <= h } else { c + PATTERN_LEN <= w };
            if !fits {
                continue;
            }
            let mut code = 0u8;
            for k in 0..PATTERN_LEN {
                let v = if vertical { z.get(r + k, c) } else { z.get(r, c + k) };
                code = code * LEVELS as u8 + v;
            }
            codes[r * w + c] = code;
        }
    }
    codes
}

/// Per window of side `window` on a `stride` grid: histograms of horizontal
/// and vertical 4-sample level patterns fully inside the window, each
/// L1-normalized and square-rooted, concatenated.
pub fn cooccurrence_features(
    z: &QuantizedResidual,
    window: usize,
    stride: usize,
) -> Result<FeatureField> {
    if window < PATTERN_LEN || stride == 0 {
        return Err(Error::Config(format!(
            "window {window} must be >= {PATTERN_LEN} and stride positive"
        )));
    }
    if z.height < window || z.width < window {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than window {window}",
            z.height, z.width
        )));
    }
    let tops = grid(z.height, window, stride);
    let lefts = grid(z.width, window, stride);
    let horizontal = pattern_codes(z, false);
    let vertical = pattern_codes(z, true);
    let w = z.width;
    let span = window - PATTERN_LEN + 1;
    let per_direction = (window * span) as f64;

    let sites: Vec<(usize, usize)> = tops
        .iter()
        .flat_map(|&t| lefts.iter().map(move |&l| (t, l)))
        .collect();
    let features: Vec<f64> = sites
        .par_iter()
        .flat_map_iter(|&(top, left)| {
            let mut hist = [0u32; FEATURE_DIM];
            for r in top..top + window {
                for &code in &horizontal[r * w + left..r * w + left + span] {
                    hist[code as usize] += 1;
                }
            }
            for r in top..top + span {
                for &code in &vertical[r * w + left..r * w + left + window] {
                    hist[BINS + code as usize] += 1;
                }
            }
            hist.into_iter()
                .map(move |count| (f64::from(count) / per_direction).sqrt())
        })
        .collect();
    Ok(FeatureField {
        window,
        stride,
        rows: tops.len(),
        cols: lefts.len(),
        center_rows: tops.iter().map(|t| t + window / 2).collect(),
        center_cols: lefts.iter().map(|l| l + window / 2).collect(),
        dim: FEATURE_DIM,
        features,
    })
}

//! Synthetic camera models.
//!
//! Scenes are generated procedurally and passed through a parametric
//! in-camera pipeline: gray-level CFA resampling, gamma, an additive periodic
//! tile, 8x8 DCT quantization and read noise. Every model leaves a
//! different set of artifacts with period 8, anchored at pixel (0, 0).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Raster};
use crate::rng::rng_for;

/// Spatial period shared by the pattern tile and block quantization.
pub const ARTIFACT_PERIOD: usize = 8;

pub const DEFAULT_PATTERN_AMPLITUDE: f32 = 0.004;
pub const DEFAULT_READ_NOISE: f32 = 0.002;
const GAMMAS: [f32; 4] = [1.8, 2.0, 2.2, 2.4];
const QUALITIES: [u8; 8] = [92, 86, 96, 89, 94, 84, 98, 90];
const CFA_PHASES: [(u8, u8); 4] = [(0, 0), (1, 1), (0, 1), (1, 0)];

/// Standard JPEG luminance quantization table, row-major.
pub const JPEG_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModelSpec {
    pub model_id: u32,
    /// Row/column parity of the pixels kept by the CFA stage.
    pub cfa_phase: (u8, u8),
    pub demosaic: bool,
    /// Quantization quality in 50..=100; 100 bypasses the stage.
    pub block_quality: u8,
    pub pattern_amplitude: f32,
    /// Zero-mean additive tile, peak magnitude `pattern_amplitude`.
    pub pattern_tile: [[f32; 8]; 8],
    pub gamma: f32,
    pub read_noise_sigma: f32,
}

impl CameraModelSpec {
    /// Default spec for a model id: phase, quality and gamma are cycled and
    /// the tile is drawn from a generator seeded by the id.
    pub fn for_model(model_id: u32) -> Self {
        let i = model_id as usize;
        Self {
            model_id,
            cfa_phase: CFA_PHASES[i % CFA_PHASES.len()],
            demosaic: true,
            block_quality: QUALITIES[i % QUALITIES.len()],
            pattern_amplitude: DEFAULT_PATTERN_AMPLITUDE,
            pattern_tile: pattern_tile(model_id, DEFAULT_PATTERN_AMPLITUDE),
            gamma: GAMMAS[i % GAMMAS.len()],
            read_noise_sigma: DEFAULT_READ_NOISE,
        }
    }

    /// A spec whose every stage is a no-op.
    pub fn neutral(model_id: u32) -> Self {
        Self {
            model_id,
            cfa_phase: (0, 0),
            demosaic: false,
            block_quality: 100,
            pattern_amplitude: 0.0,
            pattern_tile: [[0.0; 8]; 8],
            gamma: 1.0,
            read_noise_sigma: 0.0,
        }
    }

    /// Same artifacts, different id.
    pub fn with_id(&self, model_id: u32) -> Self {
        Self {
            model_id,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(50..=100).contains(&self.block_quality) {
            return Err(Error::Config(format!(
                "block quality {} outside 50..=100",
                self.block_quality
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if self.cfa_phase.0 > 1 || self.cfa_phase.1 > 1 {
            return Err(Error::Config(format!("cfa phase {:?}", self.cfa_phase)));
        }
        Ok(())
    }
}

/// Zero-mean 8x8 tile seeded by the model id, scaled to peak `amplitude`.
pub fn pattern_tile(model_id: u32, amplitude: f32) -> [[f32; 8]; 8] {
    let mut rng = rng_for(u64::from(model_id), "pattern-tile", 0);
    let mut raw = [[0f64; 8]; 8];
    for row in raw.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mean = raw.iter().flatten().sum::<f64>() / 64.0;
    let peak = raw
        .iter()
        .flatten()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max);
    let mut tile = [[0f32; 8]; 8];
    for (out, row) in tile.iter_mut().zip(raw.iter()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = ((v - mean) / peak * f64::from(amplitude)) as f32;
        }
    }
    // re-center after rounding to f32
    let m = tile.iter().flatten().map(|&v| f64::from(v)).sum::<f64>() / 64.0;
    for v in tile.iter_mut().flatten() {
        *v -= m as f32;
    }
    tile
}

/// Procedural scene: smooth gradients, Gaussian blobs and one textured band,
/// clipped to [0.05, 0.95].
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Raster {
    let mut rng = rng_for(seed, "scene", 0);
    let (h, w) = (height as f64, width as f64);

    let base = rng.gen_range(0.3..0.7);
    let gy = rng.gen_range(-0.3..0.3);
    let gx = rng.gen_range(-0.3..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.03..0.1),
                rng.gen_range(-2.0..2.0) * std::f64::consts::TAU / h,
                rng.gen_range(-2.0..2.0) * std::f64::consts::TAU / w,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let n_blobs = rng.gen_range(5..12);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..h),
                rng.gen_range(0.0..w),
                rng.gen_range(h.min(w) / 16.0..h.min(w) / 4.0),
                rng.gen_range(-0.3..0.3),
            )
        })
        .collect();

    let vertical = rng.gen_bool(0.5);
    let extent = if vertical { w } else { h };
    let band_width = rng.gen_range(extent / 8.0..extent / 4.0);
    let band_start = rng.gen_range(0.0..extent - band_width);
    let tones: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.gen_range(3.0..12.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let k = std::f64::consts::TAU / period;
            (
                rng.gen_range(0.03..0.08),
                k * theta.sin(),
                k * theta.cos(),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    // coarse value noise, bilinearly interpolated
    let cell = 4usize;
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-0.06..0.06)).collect();

    Raster::from_fn(height, width, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let mut v = base + gy * (y / h - 0.5) + gx * (x / w - 0.5);
        for &(a, ky, kx, ph) in &waves {
            v += a * (ky * y + kx * x + ph).sin();
        }
        for &(cy, cx, s, a) in &blobs {
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            v += a * (-d2 / (2.0 * s * s)).exp();
        }
        let t = if vertical { x } else { y };
        if t >= band_start && t < band_start + band_width {
            for &(a, ky, kx, ph) in &tones {
                v += a * (ky * y + kx * x + ph).sin();
            }
            let (fy, fx) = (y / cell as f64, x / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * gw + b];
            v += (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
        }
        v.clamp(0.05, 0.95) as f32
    })
}

/// Keeps pixels of the given parity class and bilinearly refills the rest.
pub fn cfa_resample(img: &Raster, phase: (u8, u8)) -> Raster {
    let (h, w) = img.dims();
    let (pr, pc) = (phase.0 as usize, phase.1 as usize);
    let kept = |r: usize, c: usize| r % 2 == pr && c % 2 == pc;
    // average of the in-bounds kept samples among the offsets
    let avg = |r: usize, c: usize, offsets: &[(isize, isize)]| -> f32 {
        let mut sum = 0f32;
        let mut n = 0u32;
        for &(dr, dc) in offsets {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                let (rr, cc) = (rr as usize, cc as usize);
                if kept(rr, cc) {
                    sum += img.get(rr, cc);
                    n += 1;
                }
            }
        }
        if n == 0 {
            img.get(r, c)
        } else {
            sum / n as f32
        }
    };
    Raster::from_fn(h, w, |r, c| {
        let row_match = r % 2 == pr;
        let col_match = c % 2 == pc;
        match (row_match, col_match) {
            (true, true) => img.get(r, c),
            (true, false) => avg(r, c, &[(0, -1), (0, 1)]),
            (false, true) => avg(r, c, &[(-1, 0), (1, 0)]),
            (false, false) => avg(r, c, &[(-1, -1), (-1, 1), (1, -1), (1, 1)]),
        }
    })
}

/// Quantization table for a quality factor, using the usual IJG scaling law.
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0f64; 64];
    for (o, &t) in out.iter_mut().zip(JPEG_LUMA_TABLE.iter()) {
        *o = ((u32::from(t) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut a = [[0f64; 8]; 8];
    for (u, row) in a.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (m, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * m + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    a
}

/// Blockwise 8x8 DCT quantization in the 0..255 domain. Partial edge blocks
/// are padded by edge replication.
pub fn block_quantize(img: &Raster, quality: u8) -> Raster {
    let (h, w) = img.dims();
    let table = quant_table(quality);
    let a = dct_basis();
    let mut out = img.clone();
    let mut block = [[0f64; 8]; 8];
    let mut tmp = [[0f64; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let r = (by + i).min(h - 1);
                    let c = (bx + j).min(w - 1);
                    *v = f64::from(img.get(r, c)) * 255.0 - 128.0;
                }
            }
            // coef = A * block * A^T
            for u in 0..8 {
                for n in 0..8 {
                    tmp[u][n] = (0..8).map(|m| a[u][m] * block[m][n]).sum();
                }
            }
            let mut coef = [[0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let c: f64 = (0..8).map(|n| tmp[u][n] * a[v][n]).sum();
                    let q = table[u * 8 + v];
                    coef[u][v] = (c / q).round() * q;
                }
            }
            // block = A^T * coef * A
            for m in 0..8 {
                for v in 0..8 {
                    tmp[m][v] = (0..8).map(|u| a[u][m] * coef[u][v]).sum();
                }
            }
            for i in 0..8.min(h - by) {
                for j in 0..8.min(w - bx) {
                    let v: f64 = (0..8).map(|v| tmp[i][v] * a[v][j]).sum();
                    out.set(by + i, bx + j, ((v + 128.0) / 255.0) as f32);
                }
            }
        }
    }
    out
}

/// Passes a single-channel scene through the camera pipeline.
pub fn render(scene: &Raster, spec: &CameraModelSpec, seed: u64) -> Result<Raster> {
    scene.require_single_channel()?;
    spec.validate()?;
    let mut img = if spec.demosaic {
        cfa_resample(scene, spec.cfa_phase)
    } else {
        scene.clone()
    };
    if spec.gamma != 1.0 {
        let inv = 1.0 / spec.gamma;
        img = img.map(|v| v.max(0.0).powf(inv));
    }
    if spec.pattern_amplitude != 0.0 {
        let w = img.width();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            *v += spec.pattern_tile[r % ARTIFACT_PERIOD][c % ARTIFACT_PERIOD];
        }
    }
    if spec.block_quality < 100 {
        img = block_quantize(&img, spec.block_quality);
    }
    if spec.read_noise_sigma > 0.0 {
        let mut rng = rng_for(seed, "read-noise", u64::from(spec.model_id));
        let normal = Normal::new(0.0f32, spec.read_noise_sigma)
            .map_err(|e| Error::Config(e.to_string()))?;
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Rectangle,
    Ellipse,
}

/// Where the donor content lands in the host and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceRegion {
    pub shape: RegionShape,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Destination minus source, in pixels.
    pub offset: (isize, isize),
    pub grid_aligned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpliceCase {
    pub composite: Raster,
    pub gt: Raster,
    pub host_model: u32,
    pub donor_model: u32,
    pub region: SpliceRegion,
}

/// Target area fraction range of the pasted region.
pub const SPLICE_AREA_RANGE: (f64, f64) = (0.05, 0.3);
const MAX_OFFSET: isize = 24;

/// Pastes a rectangular or elliptical donor region into the host.
///
/// Half of the time the paste offset is a multiple of the artifact period,
/// otherwise it is deliberately off-grid.
pub fn splice(
    host: &Raster,
    host_model: u32,
    donor: &Raster,
    donor_model: u32,
    seed: u64,
) -> Result<SpliceCase> {
    if host.dims() != donor.dims() || host.channels() != donor.channels() {
        return Err(Error::Shape(format!(
            "host {:?} vs donor {:?}",
            host.dims(),
            donor.dims()
        )));
    }
    host.require_single_channel()?;
    if host_model == donor_model {
        return Err(Error::Config("host and donor share a camera model".into()));
    }
    let (h, w) = host.dims();
    let mut rng = rng_for(seed, "splice", 0);
    let shape = if rng.gen_bool(0.5) {
        RegionShape::Rectangle
    } else {
        RegionShape::Ellipse
    };
    let total = (h * w) as f64;
    let (rh, rw, mask) = loop {
        let frac = rng.gen_range(SPLICE_AREA_RANGE.0..SPLICE_AREA_RANGE.1);
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let area = frac * total;
        // ellipse bounding box must be larger to cover the same area
        let box_area = match shape {
            RegionShape::Rectangle => area,
            RegionShape::Ellipse => area * 4.0 / std::f64::consts::PI,
        };
        let rh = (box_area * aspect).sqrt().round() as usize;
        let rw = (box_area / aspect).sqrt().round() as usize;
        if rh + 2 * MAX_OFFSET as usize >= h || rw + 2 * MAX_OFFSET as usize >= w || rh < 4 || rw < 4 {
            continue;
        }
        let mask = region_mask(shape, rh, rw);
        let count = mask.iter().filter(|&&m| m).count() as f64 / total;
        if (0.02..=0.4).contains(&count) {
            break (rh, rw, mask);
        }
    };
    let aligned = rng.gen_bool(0.5);
    let period = ARTIFACT_PERIOD as isize;
    let (top, left, offset) = loop {
        let (dy, dx) = if aligned {
            (
                rng.gen_range(-MAX_OFFSET / period..=MAX_OFFSET / period) * period,
                rng.gen_range(-MAX_OFFSET / period..=MAX_OFFSET / period) * period,
            )
        } else {
            let dy = rng.gen_range(-MAX_OFFSET..=MAX_OFFSET);
            let dx = rng.gen_range(-MAX_OFFSET..=MAX_OFFSET);
            if dy.rem_euclid(period) == 0 && dx.rem_euclid(period) == 0 {
                continue;
            }
            (dy, dx)
        };
        let top = rng.gen_range(0..=h - rh) as isize;
        let left = rng.gen_range(0..=w - rw) as isize;
        let (sy, sx) = (top - dy, left - dx);
        if sy >= 0 && sx >= 0 && sy as usize + rh <= h && sx as usize + rw <= w {
            break (top as usize, left as usize, (dy, dx));
        }
    };

    let mut composite = host.clone();
    let mut gt = Raster::zeros(h, w, 1);
    for i in 0..rh {
        for j in 0..rw {
            if mask[i * rw + j] {
                let (r, c) = (top + i, left + j);
                let sr = (r as isize - offset.0) as usize;
                let sc = (c as isize - offset.1) as usize;
                composite.set(r, c, donor.get(sr, sc));
                gt.set(r, c, 1.0);
            }
        }
    }
    Ok(SpliceCase {
        composite,
        gt,
        host_model,
        donor_model,
        region: SpliceRegion {
            shape,
            top,
            left,
            height: rh,
            width: rw,
            offset,
            grid_aligned: aligned,
        },
    })
}

fn region_mask(shape: RegionShape, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![true; h * w];
    if shape == RegionShape::Ellipse {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ay, ax) = (h as f64 / 2.0, w as f64 / 2.0);
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 - cy) / ay;
                let dx = (j as f64 - cx) / ax;
                m[i * w + j] = dy * dy + dx * dx <= 1.0;
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub image_path: String,
    pub model_id: u32,
    pub split: Split,
    pub spec: CameraModelSpec,
}

/// Dataset index, stored as a bare JSON array of entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn model_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.model_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-model split counts for `n` images, 70:15:15.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.70).round() as usize;
    let val = (n as f64 * 0.15).round() as usize;
    let val = val.min(n - train);
    (train, val, n - train - val)
}

pub fn split_of(index: usize, n: usize) -> Split {
    let (train, val, _) = split_counts(n);
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

pub struct DatasetConfig {
    pub n_models: usize,
    pub images_per_model: usize,
    pub size: usize,
    pub seed: u64,
}

/// Renders `n_models x images_per_model` images into `out_dir` and writes the
/// manifest plus a `specs.json` listing the model specs.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    build_dataset_with_specs(
        &(0..cfg.n_models as u32)
            .map(CameraModelSpec::for_model)
            .collect::<Vec<_>>(),
        cfg,
        out_dir,
    )
}

pub fn build_dataset_with_specs(
    specs: &[CameraModelSpec],
    cfg: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 camera models, got {}",
            specs.len()
        )));
    }
    if cfg.size < 64 {
        return Err(Error::Config(format!("image size {} below 64", cfg.size)));
    }
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let n = cfg.images_per_model;
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|m| (0..n).map(move |i| (m, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(m, i)| -> Result<ManifestEntry> {
            let spec = &specs[m];
            let index = (m * n + i) as u64;
            let scene = generate_scene(
                crate::rng::derive_seed(cfg.seed, "dataset-scene", index),
                cfg.size,
                cfg.size,
            );
            let img = render(
                &scene,
                spec,
                crate::rng::derive_seed(cfg.seed, "dataset-render", index),
            )?;
            let rel = format!("images/m{:02}_{:04}.png", spec.model_id, i);
            raster::save_image(&img, out_dir.join(&rel))?;
            Ok(ManifestEntry {
                image_path: rel,
                model_id: spec.model_id,
                split: split_of(i, n),
                spec: spec.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    raster::write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    raster::write_atomic(
        &out_dir.join("specs.json"),
        serde_json::to_string_pretty(specs)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Manifest together with its directory, loading images on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Raster> {
        raster::load_gray(self.root.join(&entry.image_path))
    }

    /// Loads all images of a split, paired with their model ids, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(u32, Raster)>> {
        let entries: Vec<&ManifestEntry> = self.manifest.split(split).collect();
        entries
            .par_iter()
            .map(|e| Ok((e.model_id, self.load(e)?)))
            .collect()
    }
}

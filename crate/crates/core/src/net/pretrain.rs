//! Denoiser pre-training: the net learns to output the AWGN pattern that
//! was added to a clean patch.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ExtractorParams, Mode, Real};
use crate::error::{Error, Result};
use crate::raster::{extract_patch, PatchRef, Raster};
use crate::rng::rng_for;
use crate::train::adam::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisePretrainSample {
    pub size: usize,
    pub clean: Vec<f32>,
    pub noise: Vec<f32>,
    pub noisy: Vec<f32>,
}

impl DenoisePretrainSample {
    /// Adds `noise` to `clean`. The stored noise is recomputed as
    /// `noisy - clean` so that the difference is exact in `f32`.
    pub fn new(clean: &Raster, noise: &[f32]) -> Result<Self> {
        clean.require_single_channel()?;
        if clean.height() != clean.width() || noise.len() != clean.len() {
            return Err(Error::Shape("pretrain sample must be square".into()));
        }
        let noisy: Vec<f32> = clean.data().iter().zip(noise).map(|(c, w)| c + w).collect();
        let noise = noisy.iter().zip(clean.data()).map(|(x, c)| x - c).collect();
        Ok(Self {
            size: clean.height(),
            clean: clean.data().to_vec(),
            noise,
            noisy,
        })
    }
}

/// Mean over the batch of `||f(x_i) - w_i||^2 / K^2`, followed by one Adam
/// update. Returns the loss before the update.
pub fn pretrain_denoiser_step<T: Real>(
    params: &mut ExtractorParams<T>,
    batch: &[DenoisePretrainSample],
    adam: &mut AdamState<T>,
) -> Result<f64> {
    if params.mode() != Mode::Train {
        return Err(Error::Config("pre-training requires train-mode params".into()));
    }
    let k = batch
        .first()
        .map(|s| s.size)
        .ok_or_else(|| Error::InsufficientData("empty pretrain batch".into()))?;
    if batch.iter().any(|s| s.size != k) {
        return Err(Error::Shape("mixed patch sizes in batch".into()));
    }
    let inputs: Vec<Vec<T>> = batch
        .iter()
        .map(|s| s.noisy.iter().map(|&v| T::lit(f64::from(v))).collect())
        .collect();
    let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
    let tape = params.forward_batch(&refs, k, k)?;
    let scale = 1.0 / (k * k * batch.len()) as f64;
    let mut loss = 0.0;
    let d_out: Vec<Vec<T>> = tape
        .output
        .iter()
        .zip(batch)
        .map(|(r, s)| {
            r.iter()
                .zip(&s.noise)
                .map(|(&ri, &wi)| {
                    let e = ri.as_f64() - f64::from(wi);
                    loss += e * e * scale;
                    T::lit(2.0 * e * scale)
                })
                .collect()
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iter: params.step as usize,
            what: format!("pretrain loss {loss}"),
        });
    }
    let (grads, _) = params.backward(&tape, &d_out)?;
    params.update_running_stats(&tape);
    adam_step(&mut params.trainable_mut(), &grads.tensors(), adam)?;
    params.step += 1;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub sigma_min: f32,
    pub sigma_max: f32,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch: 16,
            patch: 40,
            sigma_min: 0.005,
            sigma_max: 0.05,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Draws a batch of noisy/clean pairs from random windows of `images`.
pub fn sample_pretrain_batch(
    images: &[Raster],
    cfg: &PretrainConfig,
    iter: usize,
) -> Result<Vec<DenoisePretrainSample>> {
    if images.is_empty() {
        return Err(Error::InsufficientData("no images for pre-training".into()));
    }
    let mut rng = rng_for(cfg.seed, "pretrain-batch", iter as u64);
    (0..cfg.batch)
        .map(|_| {
            let src = rng.gen_range(0..images.len());
            let img = &images[src];
            if img.height() < cfg.patch || img.width() < cfg.patch {
                return Err(Error::Shape("image smaller than pretrain patch".into()));
            }
            let patch = PatchRef {
                source: src,
                top: rng.gen_range(0..=img.height() - cfg.patch),
                left: rng.gen_range(0..=img.width() - cfg.patch),
                size: cfg.patch,
            };
            let clean = extract_patch(img, &patch)?;
            let sigma = rng.gen_range(cfg.sigma_min..=cfg.sigma_max);
            let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let noise: Vec<f32> = (0..clean.len()).map(|_| normal.sample(&mut rng)).collect();
            DenoisePretrainSample::new(&clean, &noise)
        })
        .collect()
}

/// Runs the full pre-training loop, returning the per-iteration losses.
pub fn pretrain<T: Real>(
    params: &mut ExtractorParams<T>,
    images: &[Raster],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    params.set_mode(Mode::Train);
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params.trainable(),
    );
    (0..cfg.iterations)
        .map(|it| {
            let batch = sample_pretrain_batch(images, cfg, it)?;
            pretrain_denoiser_step(params, &batch, &mut adam)
        })
        .collect()
}

//! Fully-convolutional residual extractor.
//!
//! Layer 1 is conv+ReLU, layers 2..D-1 are conv+channel-norm+ReLU and layer
//! D is a plain conv with a single output channel. All convolutions are 3x3
//! with zero padding, so the residual has the same size as the input.

mod io;
mod pretrain;
mod real;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::rng_for;

pub use io::{decode_params, encode_params, load_params, save_params, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use pretrain::{pretrain_denoiser_step, DenoisePretrainSample, PretrainConfig, pretrain};
pub use real::Real;
pub(crate) use real::{matmul, matmul_at, matmul_bt};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
    pub mode: Mode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 16,
            mode: Mode::Train,
        }
    }
}

impl NetConfig {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            mode: Mode::Train,
        }
    }

    pub fn receptive_field(&self) -> usize {
        2 * self.depth + 1
    }

    /// Checks the production architecture constraints for a patch size.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!("depth {} below 3", self.depth)));
        }
        if self.width < 1 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if self.receptive_field() > patch_size {
            return Err(Error::Config(format!(
                "receptive field {} exceeds patch size {patch_size}",
                self.receptive_field()
            )));
        }
        Ok(())
    }

    fn channels(&self, layer: usize) -> (usize, usize) {
        let cin = if layer == 0 { 1 } else { self.width };
        let cout = if layer + 1 == self.depth { 1 } else { self.width };
        (cin, cout)
    }

    fn has_norm(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.depth
    }

    fn has_relu(&self, layer: usize) -> bool {
        layer + 1 < self.depth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub cin: usize,
    pub cout: usize,
    /// `[cout][cin][3][3]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<ChannelNorm<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams<T> {
    pub config: NetConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub step: u64,
}

/// Gradients of the trainable tensors, mirroring [`ExtractorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> ParamGrads<T> {
    /// Trainable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let (Some(g), Some(b)) = (&mut l.gamma, &mut l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_zero()))
    }
}

impl<T: Real> ExtractorParams<T> {
    /// Random initialization without the production depth check: kernels are
    /// normal with variance `2 / fan_in`, biases zero, norms identity.
    pub fn random(config: NetConfig, seed: u64) -> Result<Self> {
        if config.depth < 1 || config.width < 1 {
            return Err(Error::Config(format!("{config:?}")));
        }
        let mut rng = rng_for(seed, "init", 0);
        let layers = (0..config.depth)
            .map(|l| {
                let (cin, cout) = config.channels(l);
                let fan_in = (cin * TAPS) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let weight = (0..cout * cin * TAPS)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect();
                let norm = config.has_norm(l).then(|| ChannelNorm {
                    gamma: vec![T::one(); cout],
                    beta: vec![T::zero(); cout],
                    running_mean: vec![T::zero(); cout],
                    running_var: vec![T::one(); cout],
                });
                ConvLayer {
                    cin,
                    cout,
                    weight,
                    bias: vec![T::zero(); cout],
                    norm,
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            step: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.config.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.config.mode = mode;
        self
    }

    pub fn cast<U: Real>(&self) -> ExtractorParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ExtractorParams {
            config: self.config,
            step: self.step,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    cin: l.cin,
                    cout: l.cout,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    norm: l.norm.as_ref().map(|n| ChannelNorm {
                        gamma: conv(&n.gamma),
                        beta: conv(&n.beta),
                        running_mean: conv(&n.running_mean),
                        running_var: conv(&n.running_var),
                    }),
                })
                .collect(),
        }
    }

    /// Trainable tensors in declaration order (weight, bias, gamma, beta per layer).
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                    gamma: l.norm.as_ref().map(|n| vec![T::zero(); n.gamma.len()]),
                    beta: l.norm.as_ref().map(|n| vec![T::zero(); n.beta.len()]),
                })
                .collect(),
        }
    }

    /// Folds the batch statistics recorded in a train-mode tape into the
    /// running averages.
    pub fn update_running_stats(&mut self, tape: &ForwardTape<T>) {
        if tape.mode != Mode::Train {
            return;
        }
        let m = T::lit(NORM_MOMENTUM);
        let one_m = T::one() - m;
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(n), Some(stats)) = (&mut layer.norm, &lt.norm) {
                for c in 0..n.running_mean.len() {
                    n.running_mean[c] = m * n.running_mean[c] + one_m * stats.mean[c];
                    n.running_var[c] = m * n.running_var[c] + one_m * stats.var[c];
                }
            }
        }
    }
}

/// Validated constructor for the production architecture.
pub fn init_params<T: Real>(
    config: &NetConfig,
    patch_size: usize,
    seed: u64,
) -> Result<ExtractorParams<T>> {
    config.validate(patch_size)?;
    ExtractorParams::random(*config, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Normalized pre-activations per sample, `[c][hw]`.
    pub xhat: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTape<T> {
    /// Layer input per sample, `[cin][hw]`.
    pub input: Vec<Vec<T>>,
    pub norm: Option<NormStats<T>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTape<T> {
    pub height: usize,
    pub width: usize,
    pub mode: Mode,
    pub depth: usize,
    pub layers: Vec<LayerTape<T>>,
    pub output: Vec<Vec<T>>,
}

impl<T> ForwardTape<T> {
    pub fn batch(&self) -> usize {
        self.output.len()
    }
}

/// Fills `cols[(ci*9 + ky*3 + kx)][y*w + x] = input[ci][y+ky-1][x+kx-1]`
/// with zeros outside the image.
fn im2col<T: Real>(input: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    out.fill(T::zero());
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(layer: &ConvLayer<T>, input: &[T], h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let k = layer.cin * TAPS;
    let mut cols = vec![T::zero(); k * hw];
    im2col(input, layer.cin, h, w, &mut cols);
    let mut out = vec![T::zero(); layer.cout * hw];
    for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(layer.bias[co]);
    }
    matmul(layer.cout, k, hw, &layer.weight, &cols, &mut out, true);
    out
}

impl<T: Real> ExtractorParams<T> {
    /// Runs a batch of equally sized single-channel inputs through the net.
    ///
    /// In train mode channel normalization uses the statistics of the whole
    /// batch; in eval mode it uses the running averages.
    pub fn forward_batch(
        &self,
        inputs: &[&[T]],
        height: usize,
        width: usize,
    ) -> Result<ForwardTape<T>> {
        let hw = height * width;
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != hw) {
            return Err(Error::Channels {
                expected: 1,
                found: bad.len() / hw.max(1),
            });
        }
        if height < 2 || width < 2 {
            return Err(Error::Shape(format!("input {height}x{width} too small")));
        }
        let mode = self.config.mode;
        let mut acts: Vec<Vec<T>> = inputs.iter().map(|x| x.to_vec()).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z: Vec<Vec<T>> = acts
                .par_iter()
                .map(|a| conv_forward(layer, a, height, width))
                .collect();
            let norm = match &layer.norm {
                None => None,
                Some(n) => Some(normalize(n, &mut z, hw, mode)),
            };
            if self.config.has_relu(l) {
                for zs in &mut z {
                    for v in zs.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
            }
            layers.push(LayerTape {
                input: std::mem::replace(&mut acts, z),
                norm,
            });
        }
        Ok(ForwardTape {
            height,
            width,
            mode,
            depth: self.layers.len(),
            layers,
            output: acts,
        })
    }

    /// Extracts the residual of a single-channel image.
    pub fn forward(&self, img: &Raster) -> Result<(Raster, ForwardTape<T>)> {
        img.require_single_channel()?;
        let x: Vec<T> = img.data().iter().map(|&v| T::lit(f64::from(v))).collect();
        let tape = self.forward_batch(&[&x], img.height(), img.width())?;
        let data = tape.output[0].iter().map(|v| v.as_f32()).collect();
        let out = Raster::new(img.height(), img.width(), 1, data)?;
        Ok((out, tape))
    }

    /// Residual only; the tape is dropped.
    pub fn extract(&self, img: &Raster) -> Result<Raster> {
        Ok(self.forward(img)?.0)
    }

    /// Exact gradients of a scalar loss given its gradient with respect to
    /// every output sample of the tape's batch.
    pub fn backward(
        &self,
        tape: &ForwardTape<T>,
        d_output: &[Vec<T>],
    ) -> Result<(ParamGrads<T>, Vec<Vec<T>>)> {
        let (h, w) = (tape.height, tape.width);
        let hw = h * w;
        if tape.depth != self.layers.len() || tape.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "tape depth {} vs params depth {}",
                tape.depth,
                self.layers.len()
            )));
        }
        for (layer, lt) in self.layers.iter().zip(&tape.layers) {
            if lt.input.first().map(|x| x.len()) != Some(layer.cin * hw)
                || lt.norm.is_some() != layer.norm.is_some()
            {
                return Err(Error::Shape("tape does not match parameters".into()));
            }
        }
        if d_output.len() != tape.batch() || d_output.iter().any(|d| d.len() != hw) {
            return Err(Error::Shape("output gradient shape".into()));
        }

        let mut grads = self.zero_grads();
        let mut delta: Vec<Vec<T>> = d_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lt = &tape.layers[l];
            if self.config.has_relu(l) {
                // the layer output is the next layer's input
                let out = &tape.layers.get(l + 1).map(|n| &n.input).unwrap_or(&tape.output);
                for (d, a) in delta.iter_mut().zip(out.iter()) {
                    for (dv, &av) in d.iter_mut().zip(a) {
                        if av <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                }
            }
            if let (Some(n), Some(stats)) = (&layer.norm, &lt.norm) {
                let g = &mut grads.layers[l];
                let (dg, db) = norm_backward(n, stats, &mut delta, hw, tape.mode);
                g.gamma = Some(dg);
                g.beta = Some(db);
            }
            let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = delta
                .par_iter()
                .zip(lt.input.par_iter())
                .map(|(dz, x)| conv_backward(layer, x, dz, h, w))
                .collect();
            let g = &mut grads.layers[l];
            for (dw, db, _) in &per_sample {
                for (a, &b) in g.weight.iter_mut().zip(dw) {
                    *a += b;
                }
                for (a, &b) in g.bias.iter_mut().zip(db) {
                    *a += b;
                }
            }
            delta = per_sample.into_iter().map(|(_, _, dx)| dx).collect();
        }
        Ok((grads, delta))
    }
}

fn normalize<T: Real>(
    n: &ChannelNorm<T>,
    z: &mut [Vec<T>],
    hw: usize,
    mode: Mode,
) -> NormStats<T> {
    let channels = n.gamma.len();
    let eps = T::lit(NORM_EPS);
    let (mean, var) = match mode {
        Mode::Eval => (n.running_mean.clone(), n.running_var.clone()),
        Mode::Train => {
            let count = T::lit((z.len() * hw) as f64);
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for c in 0..channels {
                let s: T = z.iter().map(|zs| zs[c * hw..(c + 1) * hw].iter().copied().sum::<T>()).sum();
                let mu = s / count;
                let ss: T = z
                    .iter()
                    .map(|zs| {
                        zs[c * hw..(c + 1) * hw]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>()
                    })
                    .sum();
                mean[c] = mu;
                var[c] = ss / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(z.len());
    for zs in z.iter_mut() {
        let mut xs = vec![T::zero(); zs.len()];
        for c in 0..channels {
            let (mu, is, g, b) = (mean[c], inv_std[c], n.gamma[c], n.beta[c]);
            for (zv, xv) in zs[c * hw..(c + 1) * hw]
                .iter_mut()
                .zip(&mut xs[c * hw..(c + 1) * hw])
            {
                *xv = (*zv - mu) * is;
                *zv = g * *xv + b;
            }
        }
        xhat.push(xs);
    }
    NormStats {
        mean,
        var,
        inv_std,
        xhat,
    }
}

/// Turns `delta` (gradient w.r.t. the normalized output) into the gradient
/// w.r.t. the conv output, returning the gamma and beta gradients.
fn norm_backward<T: Real>(
    n: &ChannelNorm<T>,
    stats: &NormStats<T>,
    delta: &mut [Vec<T>],
    hw: usize,
    mode: Mode,
) -> (Vec<T>, Vec<T>) {
    let channels = n.gamma.len();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        for (d, xs) in delta.iter().zip(&stats.xhat) {
            let ds = &d[c * hw..(c + 1) * hw];
            let xh = &xs[c * hw..(c + 1) * hw];
            dbeta[c] += ds.iter().copied().sum::<T>();
            dgamma[c] += ds.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    match mode {
        Mode::Eval => {
            for d in delta.iter_mut() {
                for c in 0..channels {
                    let s = n.gamma[c] * stats.inv_std[c];
                    for v in &mut d[c * hw..(c + 1) * hw] {
                        *v *= s;
                    }
                }
            }
        }
        Mode::Train => {
            // dxhat = dy * gamma; sums of dxhat and dxhat*xhat are gamma-scaled dbeta/dgamma
            let count = T::lit((delta.len() * hw) as f64);
            for (d, xs) in delta.iter_mut().zip(&stats.xhat) {
                for c in 0..channels {
                    let g = n.gamma[c];
                    let sum_dx = g * dbeta[c] / count;
                    let sum_dx_x = g * dgamma[c] / count;
                    let is = stats.inv_std[c];
                    for (v, &xh) in d[c * hw..(c + 1) * hw]
                        .iter_mut()
                        .zip(&xs[c * hw..(c + 1) * hw])
                    {
                        *v = is * (g * *v - sum_dx - xh * sum_dx_x);
                    }
                }
            }
        }
    }
    (dgamma, dbeta)
}

fn conv_backward<T: Real>(
    layer: &ConvLayer<T>,
    input: &[T],
    dz: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let k = layer.cin * TAPS;
    let mut cols = vec![T::zero(); k * hw];
    im2col(input, layer.cin, h, w, &mut cols);
    let mut dw = vec![T::zero(); layer.cout * k];
    matmul_bt(layer.cout, hw, k, dz, &cols, &mut dw, false);
    let db: Vec<T> = dz.chunks_exact(hw).map(|p| p.iter().copied().sum()).collect();
    let mut dx = vec![T::zero(); layer.cin * hw];
    // reuse the column buffer for dcols = W^T * dz
    matmul_at(k, layer.cout, hw, &layer.weight, dz, &mut cols);
    col2im(&cols, layer.cin, h, w, &mut dx);
    (dw, db, dx)
}

//! Minibatch assembly: groups of patches sharing camera model and grid
//! position class.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::loss::GroupLabels;
use crate::camera::ARTIFACT_PERIOD;
use crate::error::{Error, Result};
use crate::raster::{extract_patch, PatchRef, Raster};
use crate::rng::rng_for;

/// Images of one split, indexed by model.
#[derive(Clone, Debug)]
pub struct PatchPool {
    images: Vec<Raster>,
    models: Vec<u32>,
    by_model: BTreeMap<u32, Vec<usize>>,
}

impl PatchPool {
    pub fn new(images: Vec<(u32, Raster)>) -> Result<Self> {
        let mut by_model: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut models = Vec::with_capacity(images.len());
        let mut rasters = Vec::with_capacity(images.len());
        for (i, (m, img)) in images.into_iter().enumerate() {
            img.require_single_channel()?;
            by_model.entry(m).or_default().push(i);
            models.push(m);
            rasters.push(img);
        }
        Ok(Self {
            images: rasters,
            models,
            by_model,
        })
    }

    pub fn model_ids(&self) -> Vec<u32> {
        self.by_model.keys().copied().collect()
    }

    pub fn image(&self, index: usize) -> &Raster {
        &self.images[index]
    }

    pub fn model_of(&self, index: usize) -> u32 {
        self.models[index]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinibatchGroupSet {
    pub patch_size: usize,
    /// Patch samples, row-major `K*K` each.
    pub patches: Vec<Vec<f32>>,
    /// `source` indexes the pool the set was drawn from.
    pub refs: Vec<PatchRef>,
    pub models: Vec<u32>,
    pub labels: GroupLabels,
}

impl MinibatchGroupSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `+1` for same-group pairs, `-1` otherwise; the diagonal is `0`.
    pub fn label(&self, i: usize, j: usize) -> i8 {
        if i == j {
            0
        } else if self.labels.positive(i, j) {
            1
        } else {
            -1
        }
    }
}

/// Draws `groups` groups of `members` `size`x`size` patches. Every group
/// comes from a single model and a single position class modulo
/// [`ARTIFACT_PERIOD`]; its members are taken from distinct images while the
/// model has enough of them. Group models cycle through the pool so that at
/// least two models appear whenever `groups >= 2`.
pub fn assemble_minibatch(
    pool: &PatchPool,
    groups: usize,
    members: usize,
    size: usize,
    seed: u64,
    index: u64,
) -> Result<MinibatchGroupSet> {
    let models = pool.model_ids();
    if models.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "minibatch needs at least 2 camera models, pool has {}",
            models.len()
        )));
    }
    if groups < 2 || members < 2 {
        return Err(Error::Config(format!(
            "need at least 2 groups of 2 members, got {groups}x{members}"
        )));
    }
    if groups > models.len() * ARTIFACT_PERIOD * ARTIFACT_PERIOD {
        return Err(Error::Config(format!(
            "{groups} groups exceed the distinct (model, position) classes"
        )));
    }
    let period = ARTIFACT_PERIOD;
    if let Some(small) = pool
        .images
        .iter()
        .find(|img| img.height() < size + period - 1 || img.width() < size + period - 1)
    {
        return Err(Error::InsufficientData(format!(
            "image {}x{} too small for {size}px patches at every grid phase",
            small.height(),
            small.width()
        )));
    }

    let mut rng = rng_for(seed, "minibatch", index);
    let start = rng.gen_range(0..models.len());
    let mut used = HashSet::new();
    let n = groups * members;
    let mut patches = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    let mut batch_models = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for g in 0..groups {
        let model = models[(start + g) % models.len()];
        let phase = loop {
            let p = (rng.gen_range(0..period), rng.gen_range(0..period));
            if used.insert((model, p)) {
                break p;
            }
        };
        let mut candidates = pool.by_model[&model].clone();
        candidates.shuffle(&mut rng);
        for m in 0..members {
            let src = candidates[m % candidates.len()];
            let img = &pool.images[src];
            let top = phase.0 + period * rng.gen_range(0..=(img.height() - size - phase.0) / period);
            let left = phase.1 + period * rng.gen_range(0..=(img.width() - size - phase.1) / period);
            let patch = PatchRef {
                source: src,
                top,
                left,
                size,
            };
            patches.push(extract_patch(img, &patch)?.into_data());
            refs.push(patch);
            batch_models.push(model);
            labels.push(g);
        }
    }
    Ok(MinibatchGroupSet {
        patch_size: size,
        patches,
        refs,
        models: batch_models,
        labels: GroupLabels::new(labels),
    })
}

//! Siamese training loop with validation-based checkpoint selection.

use std::path::Path;
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::batch::{assemble_minibatch, MinibatchGroupSet, PatchPool};
use super::loss::{loss_backward, pairwise_distances};
use crate::camera::{Dataset, Split};
use crate::error::{Error, Result};
use crate::net::{ExtractorParams, Mode, NetConfig, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub groups: usize,
    pub members: usize,
    pub patch: usize,
    /// Distance temperature; `None` means `patch^2`.
    pub tau: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Groups in the fixed validation minibatch.
    pub val_groups: usize,
    /// Minibatches assembled ahead of the update step.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            iterations: 5000,
            groups: 50,
            members: 4,
            patch: 48,
            tau: None,
            seed: 0,
            checkpoint_every: 100,
            val_groups: 50,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Patches per minibatch.
    pub fn batch_size(&self) -> usize {
        self.groups * self.members
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or((self.patch * self.patch) as f64)
    }

    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        net.validate(self.patch)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.tau() > 0.0 && self.tau().is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.groups < 2 || self.members < 2 || self.val_groups < 2 {
            return Err(Error::Config("need at least 2 groups of 2 members".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub val_margin: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation margin, in eval mode.
    pub best: ExtractorParams<f32>,
    /// Iteration after which `best` was taken; `None` for the initial params.
    pub best_iter: Option<usize>,
    pub best_margin: f64,
    pub last: ExtractorParams<f32>,
    pub log: Vec<TrainLogEntry>,
}

/// Mean same-group distance minus mean cross-group distance of the eval-mode
/// residuals. More negative is better.
pub fn validation_margin<T: Real>(
    params: &ExtractorParams<T>,
    set: &MinibatchGroupSet,
    tau: f64,
) -> Result<f64> {
    let eval = params.clone().with_mode(Mode::Eval);
    let inputs: Vec<Vec<T>> = set
        .patches
        .iter()
        .map(|p| p.iter().map(|&v| T::lit(f64::from(v))).collect())
        .collect();
    let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
    let k = set.patch_size;
    let tape = eval.forward_batch(&refs, k, k)?;
    let out: Vec<Vec<f64>> = tape
        .output
        .iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect();
    let out_refs: Vec<&[f64]> = out.iter().map(|v| v.as_slice()).collect();
    let d = pairwise_distances(&out_refs, tau)?;
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..set.len() {
        for j in (i + 1)..set.len() {
            if set.labels.positive(i, j) {
                same += d.get(i, j);
                ns += 1;
            } else {
                cross += d.get(i, j);
                nc += 1;
            }
        }
    }
    if ns == 0 || nc == 0 {
        return Err(Error::InsufficientData("validation set lacks pairs".into()));
    }
    Ok(same / ns as f64 - cross / nc as f64)
}

/// One update on a minibatch. Returns the log entry (without margin).
pub fn train_step(
    params: &mut ExtractorParams<f32>,
    batch: &MinibatchGroupSet,
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<TrainLogEntry> {
    let k = batch.patch_size;
    let refs: Vec<&[f32]> = batch.patches.iter().map(|p| p.as_slice()).collect();
    let tape = params.forward_batch(&refs, k, k)?;
    let out: Vec<Vec<f64>> = tape
        .output
        .iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let out_refs: Vec<&[f64]> = out.iter().map(|v| v.as_slice()).collect();
    let (loss, grad) = loss_backward(&out_refs, &batch.labels, cfg.lambda, cfg.tau())?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            iter,
            what: format!("L0 {} R {} L {}", loss.l0, loss.r, loss.total),
        });
    }
    let d_out: Vec<Vec<f32>> = grad
        .iter()
        .map(|g| g.iter().map(|&v| v as f32).collect())
        .collect();
    let (grads, _) = params.backward(&tape, &d_out)?;
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            iter,
            what: "non-finite parameter gradient".into(),
        });
    }
    params.update_running_stats(&tape);
    adam_step(&mut params.trainable_mut(), &grads.tensors(), adam)?;
    params.step += 1;
    Ok(TrainLogEntry {
        iter,
        l0: loss.l0,
        r: loss.r,
        l: loss.total,
        val_margin: None,
    })
}

/// Trains `init` on `train` images, selecting the checkpoint with the lowest
/// margin on a fixed minibatch drawn from `val`. `on_entry` sees every log
/// entry as soon as it is complete.
pub fn train_on(
    init: ExtractorParams<f32>,
    train: &PatchPool,
    val: &PatchPool,
    cfg: &TrainConfig,
    mut on_entry: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    cfg.validate(&init.config)?;
    let tau = cfg.tau();
    let val_set = assemble_minibatch(val, cfg.val_groups, cfg.members, cfg.patch, cfg.seed, u64::MAX)
        .map_err(|e| match e {
            Error::InsufficientData(m) => Error::InsufficientData(format!("validation split: {m}")),
            other => other,
        })?;
    // surface data errors before spawning the producer
    assemble_minibatch(train, cfg.groups, cfg.members, cfg.patch, cfg.seed, 0)?;

    let mut params = init.with_mode(Mode::Train);
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params.trainable(),
    );
    let mut best = params.clone().with_mode(Mode::Eval);
    let mut best_margin = validation_margin(&params, &val_set, tau)?;
    let mut best_iter = None;
    let mut log = Vec::with_capacity(cfg.iterations);

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<MinibatchGroupSet>>(cfg.prefetch.max(1));
        s.spawn(move || {
            for it in 0..cfg.iterations {
                let b = assemble_minibatch(train, cfg.groups, cfg.members, cfg.patch, cfg.seed, it as u64);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for it in 0..cfg.iterations {
            let batch = rx
                .recv()
                .map_err(|_| Error::InsufficientData("minibatch producer stopped".into()))??;
            let mut entry = train_step(&mut params, &batch, &mut adam, cfg, it)?;
            if (it + 1) % cfg.checkpoint_every == 0 || it + 1 == cfg.iterations {
                let m = validation_margin(&params, &val_set, tau)?;
                if !m.is_finite() {
                    return Err(Error::Diverged {
                        iter: it,
                        what: format!("validation margin {m}"),
                    });
                }
                if m < best_margin {
                    best_margin = m;
                    best_iter = Some(it);
                    best = params.clone().with_mode(Mode::Eval);
                }
                entry.val_margin = Some(m);
            }
            on_entry(&entry);
            log.push(entry);
        }
        Ok(())
    })?;

    Ok(TrainOutcome {
        best,
        best_iter,
        best_margin,
        last: params.with_mode(Mode::Eval),
        log,
    })
}

/// Loads the train and val splits of `dataset` and runs [`train_on`].
pub fn train(
    dataset: &Dataset,
    init: ExtractorParams<f32>,
    cfg: &TrainConfig,
    on_entry: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    let train_pool = PatchPool::new(dataset.load_split(Split::Train)?)?;
    let val_pool = PatchPool::new(dataset.load_split(Split::Val)?)?;
    if train_pool.is_empty() || val_pool.is_empty() {
        return Err(Error::InsufficientData("train and val splits must be nonempty".into()));
    }
    train_on(init, &train_pool, &val_pool, cfg, on_entry)
}

//! Camera-model identification by nearest averaged reference noiseprint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Dataset, ManifestEntry, Split, ARTIFACT_PERIOD};
use crate::error::{Error, Result};
use crate::net::{ExtractorParams, Mode};
use crate::raster::{extract_window, Raster};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePattern {
    pub model_id: u32,
    pub pattern: Raster,
    pub count: usize,
}

/// Element-wise mean of equally sized crops.
pub fn estimate_reference(crops: &[Raster], model_id: u32) -> Result<ReferencePattern> {
    let first = crops
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("no crops for model {model_id}")))?;
    let mut acc = vec![0f64; first.len()];
    for c in crops {
        if c.dims() != first.dims() || c.channels() != first.channels() {
            return Err(Error::Shape(format!(
                "crop {:?} vs {:?}",
                c.dims(),
                first.dims()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(c.data()) {
            *a += f64::from(v);
        }
    }
    let n = crops.len() as f64;
    let data = acc.into_iter().map(|a| (a / n) as f32).collect();
    Ok(ReferencePattern {
        model_id,
        pattern: Raster::new(first.height(), first.width(), first.channels(), data)?,
        count: crops.len(),
    })
}

fn squared_distance(a: &Raster, b: &Raster) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum()
}

/// Model of the nearest reference in Euclidean distance; ties go to the
/// lowest model id.
pub fn classify(crop: &Raster, references: &[ReferencePattern]) -> Result<u32> {
    if references.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 references".into()));
    }
    let mut best: Option<(f64, u32)> = None;
    for r in references {
        if r.pattern.dims() != crop.dims() {
            return Err(Error::Shape(format!(
                "crop {:?} vs reference {:?}",
                crop.dims(),
                r.pattern.dims()
            )));
        }
        let d = squared_distance(crop, &r.pattern);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && r.model_id < bid),
        };
        if better {
            best = Some((d, r.model_id));
        }
    }
    Ok(best.expect("references are nonempty").1)
}

/// Top-left corner of a centered `crop`x`crop` window snapped down to the
/// artifact grid.
pub fn aligned_center_crop(height: usize, width: usize, crop: usize) -> Result<(usize, usize)> {
    if crop == 0 || crop > height || crop > width {
        return Err(Error::Shape(format!("crop {crop} does not fit {height}x{width}")));
    }
    let snap = |extent: usize| (extent - crop) / 2 / ARTIFACT_PERIOD * ARTIFACT_PERIOD;
    Ok((snap(height), snap(width)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub models: Vec<u32>,
    /// `counts[true][predicted]`, indexed like `models`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(models: Vec<u32>) -> Self {
        let n = models.len();
        Self {
            models,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, model: u32) -> Result<usize> {
        self.models
            .iter()
            .position(|&m| m == model)
            .ok_or_else(|| Error::Config(format!("unknown model {model}")))
    }

    pub fn record(&mut self, truth: u32, predicted: u32) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.models.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Aligned text table, rows are true models.
    pub fn to_table(&self) -> String {
        let width = self
            .counts
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(self.models.iter().map(|m| format!("m{m}").len()))
            .max()
            .unwrap_or(1)
            .max(4);
        let mut s = format!("{:>width$}", "true");
        for m in &self.models {
            s.push_str(&format!(" {:>width$}", format!("m{m}")));
        }
        s.push('\n');
        for (m, row) in self.models.iter().zip(&self.counts) {
            s.push_str(&format!("{:>width$}", format!("m{m}")));
            for c in row {
                s.push_str(&format!(" {c:>width$}"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "accuracy {}/{} = {:.4}\n",
            self.correct(),
            self.total(),
            self.accuracy()
        ));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    pub crop: usize,
    /// Train images per model used for each reference; all when `None`.
    pub reference_images: Option<usize>,
    pub test_split: Split,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            crop: 128,
            reference_images: None,
            test_split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub crop: usize,
    /// Top-left corner of the crop.
    pub offset: (usize, usize),
    pub reference_counts: Vec<(u32, usize)>,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
}

/// Noiseprint crops of `entries`, in order.
fn crops_of(
    dataset: &Dataset,
    params: &ExtractorParams<f32>,
    entries: &[&ManifestEntry],
    crop: usize,
) -> Result<Vec<(Raster, (usize, usize))>> {
    entries
        .par_iter()
        .map(|e| {
            let img = dataset.load(e)?;
            let (top, left) = aligned_center_crop(img.height(), img.width(), crop)?;
            let np = params.extract(&img)?;
            Ok((extract_window(&np, top, left, crop, crop)?, (top, left)))
        })
        .collect()
}

/// References from the train split, classification of `cfg.test_split`.
pub fn run_identification(
    dataset: &Dataset,
    params: &ExtractorParams<f32>,
    cfg: &IdentifyConfig,
) -> Result<IdentificationReport> {
    let params = params.clone().with_mode(Mode::Eval);
    let models = dataset.manifest.model_ids();
    if models.len() < 2 {
        return Err(Error::InsufficientData("identification needs at least 2 models".into()));
    }
    let mut references = Vec::new();
    let mut offset = None;
    for &m in &models {
        let mut entries: Vec<&ManifestEntry> = dataset
            .manifest
            .split(Split::Train)
            .filter(|e| e.model_id == m)
            .collect();
        if let Some(k) = cfg.reference_images {
            entries.truncate(k);
        }
        let crops = crops_of(dataset, &params, &entries, cfg.crop)?;
        for (_, o) in &crops {
            if *offset.get_or_insert(*o) != *o {
                return Err(Error::Shape("images of different sizes".into()));
            }
        }
        let crops: Vec<Raster> = crops.into_iter().map(|(c, _)| c).collect();
        references.push(estimate_reference(&crops, m).map_err(|e| match e {
            Error::InsufficientData(_) => {
                Error::InsufficientData(format!("model {m} has no train images"))
            }
            other => other,
        })?);
    }
    let tests: Vec<&ManifestEntry> = dataset.manifest.split(cfg.test_split).collect();
    if tests.is_empty() {
        return Err(Error::InsufficientData(format!("{:?} split is empty", cfg.test_split)));
    }
    let mut confusion = ConfusionMatrix::new(models);
    for (entry, (crop, o)) in tests.iter().zip(crops_of(dataset, &params, &tests, cfg.crop)?) {
        if Some(o) != offset {
            return Err(Error::Shape("images of different sizes".into()));
        }
        confusion.record(entry.model_id, classify(&crop, &references)?)?;
    }
    Ok(IdentificationReport {
        crop: cfg.crop,
        offset: offset.expect("at least one reference crop"),
        reference_counts: references.iter().map(|r| (r.model_id, r.count)).collect(),
        accuracy: confusion.accuracy(),
        confusion,
    })
}

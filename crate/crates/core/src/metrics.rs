//! Pixel-level localization metrics: confusion counts, F1/MCC/accuracy,
//! threshold-max over both heatmap polarities, average precision and
//! boundary exclusion, plus per-dataset reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Raster};

/// Binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Length {
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Pixels above 0.5 of a single-channel raster.
    pub fn from_raster(r: &Raster) -> Result<Self> {
        r.require_single_channel()?;
        Ok(Self {
            height: r.height(),
            width: r.width(),
            data: r.data().iter().map(|&v| v > 0.5).collect(),
        })
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims are consistent")
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    fn same_dims(&self, other_h: usize, other_w: usize) -> Result<()> {
        if (self.height, self.width) != (other_h, other_w) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other_h, other_w
            )));
        }
        Ok(())
    }
}

/// Ground truth together with the pixels left out of evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub mask: Mask,
    pub exclusion: Mask,
}

impl GroundTruthMask {
    pub fn new(mask: Mask, radius: f64) -> Self {
        let exclusion = boundary_exclusion_mask(&mask, radius);
        Self { mask, exclusion }
    }
}

/// Pixels whose center lies within Euclidean distance `radius` of the
/// midpoint of an edge between two differently labeled 4-neighbours. At
/// radius 1 a lone foreground pixel excludes itself and its 4-neighbourhood.
pub fn boundary_exclusion_mask(gt: &Mask, radius: f64) -> Mask {
    let (h, w) = (gt.height, gt.width);
    let mut out = Mask::empty(h, w);
    if radius < 0.0 {
        return out;
    }
    let r2 = radius * radius;
    let reach = radius.ceil() as isize + 1;
    // edge midpoints in doubled coordinates
    let mut mids = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w && gt.get(y, x) != gt.get(y, x + 1) {
                mids.push((2 * y as isize, 2 * x as isize + 1));
            }
            if y + 1 < h && gt.get(y, x) != gt.get(y + 1, x) {
                mids.push((2 * y as isize + 1, 2 * x as isize));
            }
        }
    }
    for (my, mx) in mids {
        let (cy, cx) = (my / 2, mx / 2);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let dy = (2 * y - my) as f64 / 2.0;
                let dx = (2 * x - mx) as f64 / 2.0;
                if dy * dy + dx * dx <= r2 {
                    out.data[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn errors(&self) -> u64 {
        self.fp + self.fn_
    }
}

/// Counts over the pixels not marked in `exclusion`.
pub fn confusion(map: &Mask, gt: &Mask, exclusion: &Mask) -> Result<ConfusionCounts> {
    map.same_dims(gt.height, gt.width)?;
    map.same_dims(exclusion.height, exclusion.width)?;
    let mut c = ConfusionCounts::default();
    for ((&m, &g), &x) in map.data.iter().zip(&gt.data).zip(&exclusion.data) {
        if x {
            continue;
        }
        match (m, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `0` with errors present, `1` otherwise, for an empty denominator.
fn ratio(num: u64, den: u64, c: &ConfusionCounts) -> f64 {
    if den == 0 {
        if c.errors() > 0 {
            0.0
        } else {
            1.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total(), c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp, c)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_, c)
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp, c)
}

/// `0` when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Normal,
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    F1,
    Mcc,
    Accuracy,
}

impl Metric {
    pub fn eval(self, c: &ConfusionCounts) -> f64 {
        match self {
            Metric::F1 => f1(c),
            Metric::Mcc => mcc(c),
            Metric::Accuracy => accuracy(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBest {
    pub value: f64,
    /// Pixels with `score >= threshold` are declared positive, the score
    /// being negated under inverted polarity. `None` declares nothing
    /// positive.
    pub threshold: Option<f64>,
    pub polarity: Polarity,
    pub counts: ConfusionCounts,
}

/// Non-excluded (score, label) pairs sorted by descending score.
fn ranked(heatmap: &Raster, gt: &Mask, exclusion: &Mask, polarity: Polarity) -> Result<Vec<(f64, bool)>> {
    heatmap.require_single_channel()?;
    gt.same_dims(heatmap.height(), heatmap.width())?;
    gt.same_dims(exclusion.height, exclusion.width)?;
    if let Some(v) = heatmap.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("heatmap value {v}")));
    }
    let sign = if polarity == Polarity::Normal { 1.0 } else { -1.0 };
    let mut pairs: Vec<(f64, bool)> = heatmap
        .data()
        .iter()
        .zip(&gt.data)
        .zip(&exclusion.data)
        .filter(|(_, &x)| !x)
        .map(|((&s, &g), _)| (sign * f64::from(s), g))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}

/// Counts after each group of tied scores is declared positive, preceded by
/// the all-negative state; thresholds descend.
fn sweep(pairs: &[(f64, bool)]) -> Vec<(Option<f64>, ConfusionCounts)> {
    let pos = pairs.iter().filter(|p| p.1).count() as u64;
    let neg = pairs.len() as u64 - pos;
    let mut c = ConfusionCounts {
        tp: 0,
        tn: neg,
        fp: 0,
        fn_: pos,
    };
    let mut out = vec![(None, c)];
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                c.tp += 1;
                c.fn_ -= 1;
            } else {
                c.fp += 1;
                c.tn -= 1;
            }
            i += 1;
        }
        out.push((Some(t), c));
    }
    out
}

/// Maximum of `metric` over every distinct threshold of the heatmap and of
/// its negation. Earlier candidates win ties: normal polarity first, then
/// descending thresholds.
pub fn threshold_max(metric: Metric, heatmap: &Raster, gt: &Mask, exclusion: &Mask) -> Result<ThresholdBest> {
    let mut best: Option<ThresholdBest> = None;
    for polarity in [Polarity::Normal, Polarity::Inverted] {
        let pairs = ranked(heatmap, gt, exclusion, polarity)?;
        for (threshold, counts) in sweep(&pairs) {
            let value = metric.eval(&counts);
            if best.map_or(true, |b| value > b.value) {
                best = Some(ThresholdBest {
                    value,
                    threshold,
                    polarity,
                    counts,
                });
            }
        }
    }
    Ok(best.expect("sweep always yields the all-negative state"))
}

/// Area under the step precision-recall curve for one polarity: each group
/// of tied scores is one threshold, contributing its recall gain times the
/// precision reached after admitting it. `None` without positives.
pub fn average_precision_oriented(
    heatmap: &Raster,
    gt: &Mask,
    exclusion: &Mask,
    polarity: Polarity,
) -> Result<Option<f64>> {
    let pairs = ranked(heatmap, gt, exclusion, polarity)?;
    let pos = pairs.iter().filter(|p| p.1).count();
    if pos == 0 {
        return Ok(None);
    }
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for (_, c) in sweep(&pairs).into_iter().skip(1) {
        if c.tp > prev_tp {
            ap += (c.tp - prev_tp) as f64 / pos as f64 * (c.tp as f64 / (c.tp + c.fp) as f64);
            prev_tp = c.tp;
        }
    }
    Ok(Some(ap))
}

/// Best of the two polarities.
pub fn average_precision(heatmap: &Raster, gt: &Mask, exclusion: &Mask) -> Result<Option<f64>> {
    let a = average_precision_oriented(heatmap, gt, exclusion, Polarity::Normal)?;
    let b = average_precision_oriented(heatmap, gt, exclusion, Polarity::Inverted)?;
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    })
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InsufficientData("ROC AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&v| (v, true))
        .chain(negative.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|v| v.0.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of midranks of the positives (Mann-Whitney U)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub exclusion_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { exclusion_radius: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub f1: f64,
    pub mcc: f64,
    /// `None` when no positive pixel survives exclusion.
    pub ap: Option<f64>,
    /// F1-maximizing threshold and polarity.
    pub threshold: Option<f64>,
    pub polarity: Polarity,
    pub mcc_threshold: Option<f64>,
    pub mcc_polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub f1: f64,
    pub mcc: f64,
    pub ap: Option<f64>,
    pub images: usize,
    pub ap_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub means: Means,
    pub skipped: Vec<Skipped>,
}

/// Threshold-max F1 and MCC plus AP of one heatmap.
pub fn evaluate_image(name: &str, heatmap: &Raster, gt: &GroundTruthMask) -> Result<ImageMetrics> {
    let bf = threshold_max(Metric::F1, heatmap, &gt.mask, &gt.exclusion)?;
    let bm = threshold_max(Metric::Mcc, heatmap, &gt.mask, &gt.exclusion)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        f1: bf.value,
        mcc: bm.value,
        ap: average_precision(heatmap, &gt.mask, &gt.exclusion)?,
        threshold: bf.threshold,
        polarity: bf.polarity,
        mcc_threshold: bm.threshold,
        mcc_polarity: bm.polarity,
    })
}

impl MetricsReport {
    pub fn from_images(mut images: Vec<ImageMetrics>, skipped: Vec<Skipped>) -> Self {
        images.sort_by(|a, b| a.name.cmp(&b.name));
        let n = images.len();
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let aps: Vec<f64> = images.iter().filter_map(|m| m.ap).collect();
        let means = Means {
            f1: mean(&|m| m.f1),
            mcc: mean(&|m| m.mcc),
            ap: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
            images: n,
            ap_images: aps.len(),
        };
        Self {
            images,
            means,
            skipped,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pol = |p: Polarity| match p {
            Polarity::Normal => "normal",
            Polarity::Inverted => "inverted",
        };
        let mut s = String::from("name,f1,mcc,ap,threshold,polarity,mcc_threshold,mcc_polarity\n");
        for m in &self.images {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.name,
                m.f1,
                m.mcc,
                opt(m.ap),
                opt(m.threshold),
                pol(m.polarity),
                opt(m.mcc_threshold),
                pol(m.mcc_polarity)
            ));
        }
        s
    }

    /// One summary row: image count and mean F1, MCC and AP.
    pub fn table_row(&self, label: &str) -> String {
        let ap = self
            .means
            .ap
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        format!(
            "{label:<16} n={:<4} F1 {:.3}  MCC {:.3}  AP {ap}",
            self.means.images, self.means.f1, self.means.mcc
        )
    }
}

const RASTER_EXTENSIONS: [&str; 4] = ["nprt", "png", "pgm", "pnm"];

/// Raster files of a directory by stem; `nprt` wins over image formats.
fn rasters_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out: BTreeMap<String, (usize, PathBuf)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let Some(rank) = ext.and_then(|e| RASTER_EXTENSIONS.iter().position(|&x| x == e)) else {
            continue;
        };
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match out.get(&stem) {
            Some((r, _)) if *r <= rank => {}
            _ => {
                out.insert(stem, (rank, path));
            }
        }
    }
    Ok(out.into_iter().map(|(k, (_, p))| (k, p)).collect())
}

fn load_single(path: &Path) -> Result<Raster> {
    let r = raster::load_any(path)?;
    if r.channels() == 1 {
        Ok(r)
    } else {
        raster::to_luminance(&r)
    }
}

/// Pairs heatmaps in `pred_dir` with masks in `gt_dir` by file stem and
/// evaluates every pair. Unpaired or unreadable files are listed as skipped.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, cfg: &EvalConfig) -> Result<MetricsReport> {
    let preds = rasters_by_stem(pred_dir.as_ref())?;
    let gts = rasters_by_stem(gt_dir.as_ref())?;
    let mut skipped: Vec<Skipped> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| Skipped {
            name: k.clone(),
            reason: "no ground truth".into(),
        })
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| Skipped {
            name: k.clone(),
            reason: "no prediction".into(),
        }))
        .collect();
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (k, p, g)))
        .collect();
    let results: Vec<std::result::Result<ImageMetrics, Skipped>> = pairs
        .par_iter()
        .map(|&(name, p, g)| {
            let run = || -> Result<ImageMetrics> {
                let heat = load_single(p)?;
                let mask = Mask::from_raster(&load_single(g)?)?;
                if mask.height != heat.height() || mask.width != heat.width() {
                    return Err(Error::Shape(format!(
                        "heatmap {}x{} vs mask {}x{}",
                        heat.height(),
                        heat.width(),
                        mask.height,
                        mask.width
                    )));
                }
                evaluate_image(name, &heat, &GroundTruthMask::new(mask, cfg.exclusion_radius))
            };
            run().map_err(|e| Skipped {
                name: name.clone(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut images = Vec::new();
    for r in results {
        match r {
            Ok(m) => images.push(m),
            Err(s) => skipped.push(s),
        }
    }
    skipped.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(MetricsReport::from_images(images, skipped))
}

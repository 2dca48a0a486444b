//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line.
//!
//! Criteria 6 to 9 share a single 5000-iteration training run (roughly half
//! an hour on one core). Their verdicts are always printed, but they only
//! fail the test run when `NOISEPRINT_ACCEPTANCE_STRICT=1` is set.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noiseprint::camera::{self, build_dataset, Dataset, DatasetConfig, Split};
use noiseprint::localize::{self, em_fit, EmConfig, LocalizeConfig, ReducedField};
use noiseprint::metrics::{
    self, average_precision, confusion, evaluate_image, threshold_max, ConfusionCounts, GroundTruthMask, Mask,
    Metric, Polarity,
};
use noiseprint::net::{self, ExtractorParams, Mode, NetConfig, PretrainConfig};
use noiseprint::raster::extract_window;
use noiseprint::rng::derive_seed;
use noiseprint::source_id::{run_identification, IdentifyConfig};
use noiseprint::train::loss::{
    dbl_loss, gm_am_regularizer, loss_backward, pairwise_distances, psd, softmax_rows,
};
use noiseprint::train::{self as training, assemble_minibatch, GroupLabels, PatchPool, TrainConfig};
use noiseprint::Raster;

// C1
const GRAD_FD_STEP: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-3;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
const GRAD_REL_FLOOR: f64 = 1e-6;
/// Smallest step tried for coordinates whose nominal step crosses a kink.
const GRAD_MIN_STEP: f64 = 1e-7;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// C2
const LOSS_TRIALS: usize = 10_000;
const SOFTMAX_TOL: f64 = 1e-12;
const FLAT_PSD_TOL: f64 = 1e-9;
const SCALAR_L0: f64 = 2.20578;
const SCALAR_TOL: f64 = 1e-4;
// C3
const PARSEVAL_TRIALS: usize = 500;
const PARSEVAL_TOL: f64 = 1e-6;
// C4
const METRIC_TRIALS: u64 = 1000;
const RATIO_TOL: f64 = 1e-12;
// C5
const EM_RUNS: u64 = 100;
const EM_DROP_TOL: f64 = 1e-9;
// C6 to C9
const TRAIN_ITERS: usize = 5000;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const AUC_MIN: f64 = 0.90;
const SPLICES: u64 = 20;
const F1_MIN: f64 = 0.50;
const MCC_MIN: f64 = 0.40;
const LOCALIZE_BUDGET: Duration = Duration::from_secs(5);
const ID_ACCURACY_MIN: f64 = 0.95;
const ID_CROP: usize = 128;
const ID_REFERENCES: usize = 40;
const GRID_PAIRS: usize = 500;
const GRID_WIN_RATE: f64 = 0.80;
const PATCH: usize = 48;

fn strict() -> bool {
    std::env::var("NOISEPRINT_ACCEPTANCE_STRICT").map_or(false, |v| v == "1")
}

/// Written to the process stdout directly so the line survives test output capture.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("{} [C{id}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    pass
}

// ---------------------------------------------------------------- C1

fn relu_signs(p: &ExtractorParams<f64>, xs: &[&[f64]], k: usize) -> Vec<bool> {
    let tape = p.forward_batch(xs, k, k).unwrap();
    tape.layers[1..]
        .iter()
        .flat_map(|l| l.input.iter().flatten().map(|&v| v > 0.0))
        .collect()
}

fn full_objective(p: &ExtractorParams<f64>, xs: &[&[f64]], k: usize, labels: &GroupLabels, tau: f64) -> f64 {
    let tape = p.forward_batch(xs, k, k).unwrap();
    let out: Vec<&[f64]> = tape.output.iter().map(|o| o.as_slice()).collect();
    loss_backward(&out, labels, 1.0, tau).unwrap().0.total
}

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut p = ExtractorParams::<f64>::random(NetConfig::new(2, 4), 7).unwrap().with_mode(Mode::Train);
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..k * k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let labels = GroupLabels::new(vec![0, 0, 1, 1]);
    let tau = (k * k) as f64;

    let tape = p.forward_batch(&refs, k, k).unwrap();
    let out: Vec<&[f64]> = tape.output.iter().map(|o| o.as_slice()).collect();
    let (_, d_out) = loss_backward(&out, &labels, 1.0, tau).unwrap();
    let (grads, _) = p.backward(&tape, &d_out).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let base = relu_signs(&p, &refs, k);
    let (mut worst, mut reduced, mut total) = (0.0f64, 0usize, 0usize);
    for (ti, tensor) in analytic.iter().enumerate() {
        for (ei, &a) in tensor.iter().enumerate() {
            total += 1;
            // shrink the step only where the nominal one straddles a ReLU kink
            let mut h = GRAD_FD_STEP;
            let (plus, minus) = loop {
                let mut plus = p.clone();
                plus.trainable_mut()[ti][ei] += h;
                let mut minus = p.clone();
                minus.trainable_mut()[ti][ei] -= h;
                if h <= GRAD_MIN_STEP
                    || (relu_signs(&plus, &refs, k) == base && relu_signs(&minus, &refs, k) == base)
                {
                    break (plus, minus);
                }
                h /= 10.0;
            };
            if h < GRAD_FD_STEP {
                reduced += 1;
            }
            let numeric = (full_objective(&plus, &refs, k, &labels, tau) - full_objective(&minus, &refs, k, &labels, tau))
                / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_REL_TOL && elapsed < GRAD_BUDGET;
    let detail = format!(
        "max rel err {worst:.2e} (< {GRAD_REL_TOL:e}) over all {total} parameters, h = {GRAD_FD_STEP:e} ({reduced} near a ReLU kink used a smaller step), {:.1}s",
        elapsed.as_secs_f64()
    );
    assert!(verdict(1, "gradient correctness", pass, &detail));
}

// ---------------------------------------------------------------- C2

#[test]
fn c2_loss_regularizer_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_row, mut min_li, mut max_r, mut worst_flat) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..LOSS_TRIALS {
        let groups = rng.gen_range(2..5);
        let members = rng.gen_range(2..4);
        let k = 4;
        let scale = rng.gen_range(0.01..3.0);
        let labels = GroupLabels::new((0..groups * members).map(|i| i / members).collect());
        let rs: Vec<Vec<f64>> = (0..groups * members)
            .map(|_| (0..k * k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rs.iter().map(|r| r.as_slice()).collect();
        let p = softmax_rows(&pairwise_distances(&refs, (k * k) as f64).unwrap());
        for i in 0..p.n {
            let s: f64 = (0..p.n).map(|j| p.get(i, j)).sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
        let (li, _) = dbl_loss(&p, &labels).unwrap();
        min_li = li.iter().copied().fold(min_li, f64::min);
        max_r = max_r.max(gm_am_regularizer(&psd(&refs, k, k).unwrap().s));
        let c = rng.gen_range(0.0..10.0);
        worst_flat = worst_flat.max(gm_am_regularizer(&vec![c; k * k]).abs());
    }
    let scalar: Vec<Vec<f64>> = [0.0, 0.0, 1.0, 1.0].iter().map(|&v| vec![v]).collect();
    let refs: Vec<&[f64]> = scalar.iter().map(|r| r.as_slice()).collect();
    let p = softmax_rows(&pairwise_distances(&refs, 1.0).unwrap());
    let (_, l0) = dbl_loss(&p, &GroupLabels::new(vec![0, 0, 1, 1])).unwrap();

    let pass = worst_row <= SOFTMAX_TOL
        && min_li >= 0.0
        && max_r <= 0.0
        && worst_flat <= FLAT_PSD_TOL
        && (l0 - SCALAR_L0).abs() <= SCALAR_TOL;
    let detail = format!(
        "{LOSS_TRIALS} trials: row-sum err {worst_row:.1e}, min L_i {min_li:.3e}, max R {max_r:.3e}, flat |R| {worst_flat:.1e}; scalar L0 {l0:.5}"
    );
    assert!(verdict(2, "loss/regularizer algebra", pass, &detail));
}

// ---------------------------------------------------------------- C3

#[test]
fn c3_parseval_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..PARSEVAL_TRIALS {
        let k = [4usize, 8, 16, 32][rng.gen_range(0..4)];
        let n = rng.gen_range(1..12);
        let scale: f64 = rng.gen_range(0.001..10.0);
        let rs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k * k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rs.iter().map(|r| r.as_slice()).collect();
        let lhs: f64 = psd(&refs, k, k).unwrap().s.iter().sum();
        let energy: f64 = rs.iter().flatten().map(|v| v * v).sum();
        let rhs = (k * k) as f64 / n as f64 * energy;
        worst = worst.max((lhs - rhs).abs() / rhs);
    }
    let detail = format!("{PARSEVAL_TRIALS} batches, max rel err {worst:.2e} (<= {PARSEVAL_TOL:e})");
    assert!(verdict(3, "Parseval identity", worst <= PARSEVAL_TOL, &detail));
}

// ---------------------------------------------------------------- C4

/// Reference ratio convention: an empty denominator scores 1 when there
/// are no errors at all and 0 otherwise.
fn ref_ratio(num: u64, den: u64, c: &ConfusionCounts) -> f64 {
    if den == 0 {
        if c.fp + c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn ref_metric(metric: Metric, c: &ConfusionCounts) -> f64 {
    match metric {
        Metric::F1 => ref_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, c),
        Metric::Accuracy => ref_ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_, c),
        Metric::Mcc => {
            let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
            let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
            if den == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / den.sqrt()
            }
        }
    }
}

fn ref_counts(pred: impl Fn(usize) -> bool, gt: &Mask, excl: &Mask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..gt.data.len() {
        if excl.data[i] {
            continue;
        }
        match (pred(i), gt.data[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Signed scores of non-excluded pixels, distinct, descending.
fn ref_thresholds(heat: &Raster, excl: &Mask, sign: f64) -> Vec<f64> {
    let mut t: Vec<f64> = heat
        .data()
        .iter()
        .zip(&excl.data)
        .filter(|(_, &x)| !x)
        .map(|(&v, _)| sign * f64::from(v))
        .collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Exhaustive threshold maximization; the first candidate wins ties.
fn ref_threshold_max(metric: Metric, heat: &Raster, gt: &Mask, excl: &Mask) -> (f64, ConfusionCounts, Option<f64>, Polarity) {
    let mut best: Option<(f64, ConfusionCounts, Option<f64>, Polarity)> = None;
    for (polarity, sign) in [(Polarity::Normal, 1.0), (Polarity::Inverted, -1.0)] {
        let cands = std::iter::once(None).chain(ref_thresholds(heat, excl, sign).into_iter().map(Some));
        for t in cands {
            let c = ref_counts(|i| t.map_or(false, |t| sign * f64::from(heat.data()[i]) >= t), gt, excl);
            let v = ref_metric(metric, &c);
            if best.map_or(true, |b| v > b.0) {
                best = Some((v, c, t, polarity));
            }
        }
    }
    best.unwrap()
}

fn ref_ap(heat: &Raster, gt: &Mask, excl: &Mask) -> Option<f64> {
    let pos = (0..gt.data.len()).filter(|&i| gt.data[i] && !excl.data[i]).count();
    if pos == 0 {
        return None;
    }
    let one = |sign: f64| {
        let (mut ap, mut prev_recall) = (0.0, 0.0);
        for t in ref_thresholds(heat, excl, sign) {
            let c = ref_counts(|i| sign * f64::from(heat.data()[i]) >= t, gt, excl);
            let recall = c.tp as f64 / pos as f64;
            if recall > prev_recall {
                ap += (recall - prev_recall) * (c.tp as f64 / (c.tp + c.fp) as f64);
                prev_recall = recall;
            }
        }
        ap
    };
    Some(one(1.0).max(one(-1.0)))
}

#[test]
fn c4_metric_oracle_equivalence() {
    let n = 16;
    let mut mismatches = Vec::new();
    let mut worst = 0.0f64;
    for trial in 0..METRIC_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(404, "metric-case", trial));
        let levels = [2u32, 5, 17, 1 << 20][(trial % 4) as usize];
        let heat = Raster::from_fn(n, n, |_, _| rng.gen_range(0..levels) as f32 / levels as f32);
        let fg = rng.gen_range(0.0..0.6);
        let gt = Mask::new(n, n, (0..n * n).map(|_| rng.gen_bool(fg)).collect()).unwrap();
        let excl = if trial % 3 == 0 {
            Mask::empty(n, n)
        } else {
            Mask::new(n, n, (0..n * n).map(|_| rng.gen_bool(0.15)).collect()).unwrap()
        };
        // fixed-threshold metrics
        let t = rng.gen_range(0.0..1.0f32);
        let pred = Mask::new(n, n, heat.data().iter().map(|&v| v >= t).collect()).unwrap();
        let c = confusion(&pred, &gt, &excl).unwrap();
        let rc = ref_counts(|i| pred.data[i], &gt, &excl);
        if c != rc {
            mismatches.push(format!("trial {trial}: counts {c:?} vs {rc:?}"));
        }
        for (m, v) in [
            (Metric::F1, metrics::f1(&c)),
            (Metric::Mcc, metrics::mcc(&c)),
            (Metric::Accuracy, metrics::accuracy(&c)),
        ] {
            let e = (v - ref_metric(m, &rc)).abs();
            worst = worst.max(e);
            if e > RATIO_TOL {
                mismatches.push(format!("trial {trial}: {m:?} {v} vs {}", ref_metric(m, &rc)));
            }
        }
        for m in [Metric::F1, Metric::Mcc, Metric::Accuracy] {
            let got = threshold_max(m, &heat, &gt, &excl).unwrap();
            let (v, rc, rt, rp) = ref_threshold_max(m, &heat, &gt, &excl);
            let e = (got.value - v).abs();
            worst = worst.max(e);
            if got.counts != rc || got.threshold != rt || got.polarity != rp || e > RATIO_TOL {
                mismatches.push(format!("trial {trial}: threshold_max {m:?} {got:?} vs {v} {rc:?} {rt:?} {rp:?}"));
            }
        }
        let ap = average_precision(&heat, &gt, &excl).unwrap();
        let rap = ref_ap(&heat, &gt, &excl);
        match (ap, rap) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                if (a - b).abs() > RATIO_TOL {
                    mismatches.push(format!("trial {trial}: AP {a} vs {b}"));
                }
            }
            (None, None) => {}
            _ => mismatches.push(format!("trial {trial}: AP {ap:?} vs {rap:?}")),
        }
    }
    let mcc_case = metrics::mcc(&ConfusionCounts { tp: 2, tn: 2, fp: 1, fn_: 1 });
    let mcc_ok = (mcc_case - 1.0 / 3.0).abs() <= RATIO_TOL;
    for m in mismatches.iter().take(5) {
        println!("  {m}");
    }
    let detail = format!(
        "{METRIC_TRIALS} cases, {} mismatches, max ratio diff {worst:.1e}; MCC(2,2,1,1) = {mcc_case:.15}",
        mismatches.len()
    );
    assert!(verdict(4, "metric oracle equivalence", mismatches.is_empty() && mcc_ok, &detail));
}

// ---------------------------------------------------------------- C5

#[test]
fn c5_em_monotonicity() {
    let mut worst_drop = 0.0f64;
    let mut iterations = 0;
    for run in 0..EM_RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(505, "em-field", run));
        let dims = rng.gen_range(1..8);
        let n = rng.gen_range(4 * dims.max(10)..400);
        let minority = rng.gen_range(0.0..0.4);
        let shift: Vec<f64> = (0..dims).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut data = Vec::with_capacity(n * dims);
        for _ in 0..n {
            let out = rng.gen_bool(minority);
            for &s in &shift {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                data.push(z * rng.gen_range(0.5..1.5) + if out { s } else { 0.0 });
            }
        }
        let field = ReducedField::new(n, dims, data).unwrap();
        let fit = em_fit(&field, run, &EmConfig::default()).unwrap();
        iterations += fit.loglik_trace.len();
        for w in fit.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let detail = format!("{EM_RUNS} runs, {iterations} trace points, largest decrease {worst_drop:.2e} (<= {EM_DROP_TOL:e})");
    assert!(verdict(5, "EM monotonicity", worst_drop <= EM_DROP_TOL, &detail));
}

// ---------------------------------------------------------------- shared training run

struct Trained {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    net: ExtractorParams<f32>,
    train_time: Duration,
    /// Test-split images, their models and noiseprints.
    test: Vec<(u32, Raster, Raster)>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(
            &DatasetConfig {
                n_models: 4,
                images_per_model: 60,
                size: 256,
                seed: 606,
            },
            dir.path(),
        )
        .unwrap();
        let dataset = Dataset::open(dir.path()).unwrap();
        let start = Instant::now();
        let net_cfg = NetConfig::new(8, 16);
        let mut init = ExtractorParams::<f32>::random(net_cfg, derive_seed(606, "init", 0)).unwrap();
        let train_images: Vec<Raster> = dataset.load_split(Split::Train).unwrap().into_iter().map(|(_, r)| r).collect();
        net::pretrain(&mut init, &train_images, &PretrainConfig { iterations: 300, seed: 606, ..Default::default() })
            .unwrap();
        let cfg = TrainConfig {
            iterations: TRAIN_ITERS,
            groups: 10,
            members: 4,
            patch: 32,
            val_groups: 16,
            seed: 606,
            ..Default::default()
        };
        let mut last = 0;
        let outcome = training::train(&dataset, init, &cfg, |e| {
            if e.val_margin.is_some() && e.iter >= last + 1000 {
                last = e.iter;
                eprintln!("  train iter {} L0 {:.3} margin {:?}", e.iter, e.l0, e.val_margin);
            }
        })
        .unwrap();
        let train_time = start.elapsed();
        let net = outcome.best;
        let test = dataset
            .load_split(Split::Test)
            .unwrap()
            .into_iter()
            .map(|(m, img)| {
                let np = net.extract(&img).unwrap();
                (m, img, np)
            })
            .collect();
        Trained {
            _dir: dir,
            dataset,
            net,
            train_time,
            test,
        }
    })
}

fn soft_assert(pass: bool) {
    if strict() {
        assert!(pass);
    }
}

fn window_distance(a: &Raster, at: (usize, usize), b: &Raster, bt: (usize, usize), k: usize) -> f64 {
    let pa = extract_window(a, at.0, at.1, k, k).unwrap();
    let pb = extract_window(b, bt.0, bt.1, k, k).unwrap();
    pa.data()
        .iter()
        .zip(pb.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum()
}

// ---------------------------------------------------------------- C6

#[test]
fn c6_discriminative_training() {
    let t = trained();
    let pool = PatchPool::new(t.test.iter().map(|(m, _, np)| (*m, np.clone())).collect()).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for index in 0..4 {
        let set = assemble_minibatch(&pool, 16, 4, PATCH, 616, index).unwrap();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let d: f64 = set.patches[i]
                    .iter()
                    .zip(&set.patches[j])
                    .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                    .sum();
                if set.labels.positive(i, j) {
                    pos.push(-d);
                } else if set.models[i] != set.models[j] {
                    neg.push(-d);
                }
            }
        }
    }
    let auc = metrics::roc_auc(&pos, &neg).unwrap();
    let pass = auc >= AUC_MIN && t.train_time <= TRAIN_BUDGET;
    let detail = format!(
        "ROC AUC {auc:.4} (>= {AUC_MIN}) on {} positive / {} negative held-out pairs; training {:.0}s (<= {}s)",
        pos.len(),
        neg.len(),
        t.train_time.as_secs_f64(),
        TRAIN_BUDGET.as_secs()
    );
    soft_assert(verdict(6, "discriminative training", pass, &detail));
}

// ---------------------------------------------------------------- C7

#[test]
fn c7_localization() {
    let t = trained();
    let n = t.test.len() as u64;
    let cfg = LocalizeConfig::default();
    let (mut f1, mut mcc, mut slowest) = (0.0, 0.0, Duration::ZERO);
    for k in 0..SPLICES {
        let host = &t.test[(derive_seed(707, "host", k) % n) as usize];
        let donors: Vec<_> = t.test.iter().filter(|d| d.0 != host.0).collect();
        let donor = donors[(derive_seed(707, "donor", k) % donors.len() as u64) as usize];
        let case = camera::splice(&host.1, host.0, &donor.1, donor.0, derive_seed(707, "splice", k)).unwrap();
        // stored and reloaded like any dataset image
        let composite = case.composite.map(|v| (v * 255.0).round() / 255.0);
        let start = Instant::now();
        let loc = localize::localize(&t.net, &composite, &cfg).unwrap();
        slowest = slowest.max(start.elapsed());
        let gt = GroundTruthMask::new(Mask::from_raster(&case.gt).unwrap(), 8.0);
        let m = evaluate_image(&format!("case_{k:03}"), &loc.heatmap, &gt).unwrap();
        f1 += m.f1;
        mcc += m.mcc;
    }
    let (f1, mcc) = (f1 / SPLICES as f64, mcc / SPLICES as f64);
    let pass = f1 >= F1_MIN && mcc >= MCC_MIN && slowest <= LOCALIZE_BUDGET;
    let detail = format!(
        "{SPLICES} splices: mean F1 {f1:.3} (>= {F1_MIN}), mean MCC {mcc:.3} (>= {MCC_MIN}), slowest image {:.2}s (<= {}s)",
        slowest.as_secs_f64(),
        LOCALIZE_BUDGET.as_secs()
    );
    soft_assert(verdict(7, "localization", pass, &detail));
}

// ---------------------------------------------------------------- C8

#[test]
fn c8_source_identification() {
    let t = trained();
    let cfg = IdentifyConfig {
        crop: ID_CROP,
        reference_images: Some(ID_REFERENCES),
        test_split: Split::Test,
    };
    let report = run_identification(&t.dataset, &t.net, &cfg).unwrap();
    let refs_ok = report.reference_counts.iter().all(|&(_, c)| c == ID_REFERENCES);
    let pass = report.accuracy >= ID_ACCURACY_MIN && refs_ok;
    let detail = format!(
        "accuracy {:.4} (>= {ID_ACCURACY_MIN}) on {} held-out images, {}x{} crops, {:?} references",
        report.accuracy,
        report.confusion.total(),
        ID_CROP,
        ID_CROP,
        report.reference_counts
    );
    print!("{}", report.confusion.to_table());
    soft_assert(verdict(8, "source identification", pass, &detail));
}

// ---------------------------------------------------------------- C9

#[test]
fn c9_grid_position_sensitivity() {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let size = t.test[0].2.height();
    let mut wins = 0;
    for _ in 0..GRID_PAIRS {
        let a = rng.gen_range(0..t.test.len());
        let same: Vec<usize> = (0..t.test.len()).filter(|&i| i != a && t.test[i].0 == t.test[a].0).collect();
        let b = same[rng.gen_range(0..same.len())];
        let span = size - PATCH - 8;
        let at = (rng.gen_range(0..span), rng.gen_range(0..span));
        let aligned = (
            at.0 % 8 + 8 * rng.gen_range(0..=(span - at.0 % 8) / 8),
            at.1 % 8 + 8 * rng.gen_range(0..=(span - at.1 % 8) / 8),
        );
        let shift = loop {
            let s = (rng.gen_range(0..8), rng.gen_range(0..8));
            if s != (0, 0) {
                break s;
            }
        };
        let misaligned = (aligned.0 + shift.0, aligned.1 + shift.1);
        let d_aligned = window_distance(&t.test[a].2, at, &t.test[b].2, aligned, PATCH);
        let d_misaligned = window_distance(&t.test[a].2, at, &t.test[b].2, misaligned, PATCH);
        if d_aligned < d_misaligned {
            wins += 1;
        }
    }
    let rate = wins as f64 / GRID_PAIRS as f64;
    let detail = format!("aligned pair closer in {wins}/{GRID_PAIRS} = {rate:.3} (>= {GRID_WIN_RATE})");
    soft_assert(verdict(9, "grid-position sensitivity", rate >= GRID_WIN_RATE, &detail));
}

// ---------------------------------------------------------------- C10

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_noiseprint")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "noiseprint {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().map_or(false, |n| n != "run_config.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn same_files(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn c10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let mut results = Vec::new();

    for run in ["a", "b"] {
        cli(&["simulate", "--models", "3", "--images", "10", "--size", "96", "--seed", "5", "--out", &p(&format!("ds_{run}"))]);
    }
    let ds_a = tree_bytes(&tmp.path().join("ds_a"));
    results.push(("simulate", !ds_a.is_empty() && ds_a == tree_bytes(&tmp.path().join("ds_b"))));

    for run in ["a", "b"] {
        cli(&[
            "train", "--data", &p("ds_a"), "--net-depth", "4", "--net-width", "4", "--iters", "30", "--groups", "3",
            "--members", "2", "--patch", "24", "--checkpoint-every", "10", "--seed", "5", "--out", &p(&format!("m_{run}.npwt")),
        ]);
    }
    results.push((
        "train",
        same_files(&tmp.path().join("m_a.npwt"), &tmp.path().join("m_b.npwt"))
            && same_files(&tmp.path().join("m_a.npwt.log.jsonl"), &tmp.path().join("m_b.npwt.log.jsonl")),
    ));

    cli(&["splice", "--data", &p("ds_a"), "--count", "2", "--split", "train", "--seed", "5", "--out", &p("sp")]);
    for run in ["a", "b"] {
        for case in ["case_000", "case_001"] {
            cli(&[
                "localize", "--model", &p("m_a.npwt"), "--image", &p(&format!("sp/images/{case}.png")), "--out",
                &p(&format!("heat_{run}/{case}.nprt")), "--png", &p(&format!("heat_{run}/{case}.png")),
                "--window", "32", "--dims", "5", "--seed", "5",
            ]);
        }
    }
    results.push((
        "localize",
        ["case_000.nprt", "case_000.png", "case_001.nprt", "case_001.png"]
            .iter()
            .all(|f| same_files(&tmp.path().join("heat_a").join(f), &tmp.path().join("heat_b").join(f))),
    ));

    for run in ["a", "b"] {
        cli(&["evaluate", "--pred", &p("heat_a"), "--gt", &p("sp/gt"), "--report", &p(&format!("rep_{run}.json"))]);
    }
    results.push(("evaluate", same_files(&tmp.path().join("rep_a.json"), &tmp.path().join("rep_b.json"))));

    for run in ["a", "b"] {
        cli(&["identify", "--model", &p("m_a.npwt"), "--data", &p("ds_a"), "--crop", "64", "--report", &p(&format!("id_{run}.json"))]);
    }
    results.push(("identify", same_files(&tmp.path().join("id_a.json"), &tmp.path().join("id_b.json"))));

    let pass = results.iter().all(|r| r.1);
    let detail = results
        .iter()
        .map(|(c, ok)| format!("{c} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    assert!(verdict(10, "determinism", pass, &detail));
}

use super::*;
use crate::net::NetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field_with_scores(rows: usize, cols: usize) -> FeatureField {
    FeatureField {
        window: 16,
        stride: 8,
        rows,
        cols,
        center_rows: (0..rows).map(|i| 8 + 8 * i).collect(),
        center_cols: (0..cols).map(|j| 8 + 8 * j).collect(),
        dim: 1,
        features: vec![0.0; rows * cols],
    }
}

#[test]
fn heatmap_interpolates_through_site_centers() {
    let f = field_with_scores(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
    let h = make_heatmap(&scores, &f, 40, 48).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(h.get(f.center_rows[i], f.center_cols[j]), scores[i * 4 + j] as f32);
        }
    }
    assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // halfway between two horizontal neighbours
    let mid = h.get(8, 12);
    assert!((mid - ((scores[0] + scores[1]) / 2.0) as f32).abs() < 1e-6);
    let flat = make_heatmap(&[0.25; 12], &f, 40, 48).unwrap();
    assert!(flat.data().iter().all(|&v| v == 0.25));
    assert!(make_heatmap(&[0.0; 5], &f, 40, 48).is_err());
}

#[test]
fn constant_residual_gives_constant_heatmap() {
    let r = Raster::filled(96, 96, 1, 0.3);
    let (h, d) = localize_residual(&r, &LocalizeConfig::default()).unwrap();
    let first = h.data()[0];
    assert!(h.data().iter().all(|&v| v == first));
    assert_eq!(d.dims, 0);
    assert_eq!(d.posterior_spread, 0.0);
}

/// White noise outside a rectangle, horizontally smoothed noise inside.
fn textured_residual(seed: u64, size: usize, rect: (usize, usize, usize, usize)) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..size * size + 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (t, l, h, w) = rect;
    Raster::from_fn(size, size, |r, c| {
        let i = r * size + c;
        if r >= t && r < t + h && c >= l && c < l + w {
            (noise[i] + noise[i + 1]) * 0.7
        } else {
            noise[i]
        }
    })
}

#[test]
fn anomalous_region_scores_higher() {
    let rect = (64, 96, 96, 96);
    let r = textured_residual(2, 256, rect);
    let (h, d) = localize_residual(&r, &LocalizeConfig::default()).unwrap();
    let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
    for y in 0..256 {
        for x in 0..256 {
            let v = f64::from(h.get(y, x));
            if y >= rect.0 && y < rect.0 + rect.2 && x >= rect.1 && x < rect.1 + rect.3 {
                inside += v;
                ni += 1;
            } else {
                outside += v;
                no += 1;
            }
        }
    }
    assert!(inside / ni as f64 > outside / no as f64 + 0.3);
    assert!(d.pi[0] + d.pi[1] > 1.0 - 1e-12);
    for w in d.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
}

#[test]
fn pipeline_is_deterministic_and_shape_preserving() {
    let p = ExtractorParams::<f32>::random(NetConfig::new(3, 4), 1).unwrap();
    let img = crate::camera::generate_scene(3, 100, 90);
    let cfg = LocalizeConfig {
        window: 32,
        stride: 8,
        dims: 8,
        ..LocalizeConfig::default()
    };
    let a = localize(&p, &img, &cfg).unwrap();
    let b = localize(&p, &img, &cfg).unwrap();
    assert_eq!(a.heatmap, b.heatmap);
    assert_eq!(a.diagnostics, b.diagnostics);
    assert_eq!(a.heatmap.dims(), (100, 90));
    assert!(a.heatmap.data().iter().all(|v| v.is_finite()));
    assert!(localize(&p, &crate::camera::generate_scene(3, 20, 90), &cfg).is_err());
}

#[test]
fn diagnostics_sidecar_has_the_documented_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = EmDiagnostics {
        loglik_trace: vec![-3.0, -2.0],
        pi: [0.8, 0.2],
        iterations: 1,
        converged: true,
        dims: 4,
        posterior_spread: 0.9,
    };
    let path = dir.path().join("heat.json");
    save_diagnostics(&d, &path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["loglik_trace", "pi", "iterations"] {
        assert!(v.get(key).is_some());
    }
}

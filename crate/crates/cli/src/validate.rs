//! Fast invariant suite behind `driftcomp validate`.

use std::path::Path;

use driftcomp::compensation::{init_shared_projections, vera_plus_forward, LayerVectors, ScalingVectorSet};
use driftcomp::cost::{energy_estimate, HardwareProfile};
use driftcomp::data::{encode_binary_images, make_synthetic_dataset, parse_binary_images, SyntheticConfig};
use driftcomp::drift::{drift_mean, drift_std, sample_drifted_conductance, DriftLevel};
use driftcomp::model::{build_mlp, build_toy_resnet};
use driftcomp::rng::{derive_seed, rng_from_seed, Stream};
use driftcomp::training::finite_difference_check;
use driftcomp::{
    AnalyticDriftParams, Backbone, CompensationArchive, MeasuredDriftTable, ModelWeights, QuantScheme, Shape,
};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<String, String>;

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn drift_anchors(_: u64) -> Result<String, String> {
    let p = AnalyticDriftParams::default();
    let m1 = drift_mean(1.0, &p).map_err(|e| e.to_string())?;
    let s1 = drift_std(1.0, &p).map_err(|e| e.to_string())?;
    let m10 = drift_mean(10f64.exp(), &p).map_err(|e| e.to_string())?;
    ensure(
        m1 == 0.0 && s1 == 0.4118 && (m10 - 0.89).abs() < 1e-12,
        format!("mu(1)={m1}, sigma(1)={s1}, mu(e^10)={m10}"),
    )
}

fn drift_statistics(seed: u64) -> Result<String, String> {
    let p = AnalyticDriftParams {
        sigma_eps: 0.0,
        ..Default::default()
    };
    let t = 5f64.exp();
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Validate, &[1]));
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_drifted_conductance(20.0, t, &p, &mut rng).map(|g| g - 20.0))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let want = 0.042 * 5.0 + 0.4118;
    ensure(
        (mean - 0.445).abs() <= 0.01 && (sd / want - 1.0).abs() <= 0.02,
        format!("mean shift {mean:.4} (0.445±0.01), std {sd:.4} ({want:.4}±2%)"),
    )
}

fn gradient_check(seed: u64) -> Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let s = derive_seed(seed, Stream::Validate, &[2, i]);
        let spec = build_mlp(Shape::new(1, 1, 5), &[4], 3).map_err(|e| e.to_string())?;
        let w = ModelWeights::init(&spec, s);
        let (d_in, d_out) = spec.max_comp_dims();
        let proj = init_shared_projections(2, d_in, d_out, s ^ 1).map_err(|e| e.to_string())?;
        let c_outs: Vec<usize> = spec.compensated_dims().iter().map(|d| d.c_out).collect();
        let mut set = ScalingVectorSet::initial(0, 1.0, 2, &c_outs);
        let mut rng = rng_from_seed(s ^ 2);
        for l in &mut set.layers {
            l.d_vec.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            l.b_vec.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let x: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_difference_check(&spec, &w, &proj, &set, &x, &[0, 1, 2], 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    ensure(worst < 1e-5, format!("max relative error {worst:.2e} over 20 instances"))
}

fn hand_example(_: u64) -> Result<String, String> {
    let p = driftcomp::SharedProjections {
        rank: 1,
        d_max_in: 2,
        d_max_out: 2,
        seed: 0,
        a_max: vec![1.0, 2.0],
        b_max: vec![3.0, 4.0],
    };
    let s = p.slice(2, 2).map_err(|e| e.to_string())?;
    let v = LayerVectors {
        d_vec: vec![2.0],
        b_vec: vec![1.0, -1.0],
    };
    let y = vera_plus_forward(&[1.0, 1.0], &s, &v).map_err(|e| e.to_string())?;
    ensure(y == [18.0, -24.0], format!("output {y:?}"))
}

fn energy(_: u64) -> Result<String, String> {
    let e = energy_estimate(1e9, 0.0, &HardwareProfile::default());
    ensure(((e - 1e9 / 209e12) / e).abs() < 1e-12, format!("1e9 RRAM ops -> {e:.4e} J"))
}

fn round_trips(seed: u64) -> Result<String, String> {
    let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 8, 8)).map_err(|e| e.to_string())?;
    let b = Backbone::quantize(&spec, &ModelWeights::init(&spec, seed), QuantScheme::default()).map_err(|e| e.to_string())?;
    let bytes = b.to_bytes().map_err(|e| e.to_string())?;
    let back = Backbone::from_bytes(&bytes, Path::new("backbone")).map_err(|e| e.to_string())?;
    if back != b {
        return Err("backbone checkpoint round trip differs".into());
    }
    let (d_in, d_out) = spec.max_comp_dims();
    let c_outs: Vec<usize> = spec.compensated_dims().iter().map(|d| d.c_out).collect();
    let a = CompensationArchive {
        projections: init_shared_projections(1, d_in, d_out, seed).map_err(|e| e.to_string())?,
        sets: vec![
            ScalingVectorSet::initial(0, 1.0, 1, &c_outs),
            ScalingVectorSet::initial(1, 2.25, 1, &c_outs),
        ],
    };
    if CompensationArchive::from_bytes(&a.to_bytes(), Path::new("archive")).map_err(|e| e.to_string())? != a {
        return Err("compensation archive round trip differs".into());
    }
    let (train, _) = make_synthetic_dataset(&SyntheticConfig {
        train_per_class: 2,
        eval_per_class: 1,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let raw = encode_binary_images(&train);
    let parsed = parse_binary_images(&raw, train.shape, train.classes, Path::new("images.bin")).map_err(|e| e.to_string())?;
    if parsed.labels != train.labels || encode_binary_images(&parsed) != raw {
        return Err("binary image round trip differs".into());
    }
    let table = MeasuredDriftTable::new(
        604_800.0,
        vec![
            DriftLevel { g_level: 10.0, mu: 0.5, sigma: 0.1 },
            DriftLevel { g_level: 20.0, mu: 1.0, sigma: 0.2 },
        ],
    )
    .map_err(|e| e.to_string())?;
    let back = MeasuredDriftTable::parse_csv(&table.to_csv(), Path::new("table.csv")).map_err(|e| e.to_string())?;
    ensure(back == table, "checkpoint, archive, images, drift table".into())
}

const CHECKS: [(&str, Check); 6] = [
    ("drift anchors", drift_anchors),
    ("drift statistics N=1e5", drift_statistics),
    ("scaling-vector gradients", gradient_check),
    ("hand-computed compensation", hand_example),
    ("energy arithmetic", energy),
    ("file round trips", round_trips),
];

/// Runs the built-in checks plus integrity checks of any artifacts present.
pub fn run_checks(cfg: &RunConfig) -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = CHECKS
        .iter()
        .map(|(name, f)| {
            let r = f(cfg.seed);
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
            }
        })
        .collect();
    let backbone = cfg.backbone_path();
    if cfg.paths.backbone.is_some() || backbone.exists() {
        let r = Backbone::read(&backbone);
        out.push(CheckResult {
            name: "backbone file",
            passed: r.is_ok(),
            detail: match r {
                Ok(b) => format!("{} loads ({} layers)", backbone.display(), b.layers.len()),
                Err(e) => e.to_string(),
            },
        });
    }
    let archive = cfg.archive_path();
    if cfg.paths.archive.is_some() || archive.exists() {
        let r = CompensationArchive::read(&archive);
        out.push(CheckResult {
            name: "archive file",
            passed: r.is_ok(),
            detail: match r {
                Ok(a) => format!("{} loads ({} sets)", archive.display(), a.sets.len()),
                Err(e) => e.to_string(),
            },
        });
    }
    out
}

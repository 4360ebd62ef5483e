//! Browser bindings for the GICC estimator.
//!
//! Each export takes plain numbers and returns a JSON string, which keeps the
//! JavaScript side to `JSON.parse`. The `*_json` functions hold the logic and
//! are callable (and tested) on the host.

use gicc::ingest;
use gicc::mcem::{self, FitConfig};
use gicc::sampler::{self, GibbsConfig, Side};
use gicc::simulate::{self, RawSimSettings, SimSettings};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct FitSummary {
    true_gicc: f64,
    gicc: f64,
    converged: bool,
    iterations: usize,
    mu: Vec<f64>,
    sigma_diag: Vec<f64>,
    true_sigma_diag: Vec<f64>,
    trajectory: Vec<f64>,
}

/// Simulates one dataset with AR(1) Σ_x and fits it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_and_fit_json(
    subjects: usize,
    visits: usize,
    nodes: usize,
    r: f64,
    rho: f64,
    samples: usize,
    max_iter: usize,
    seed: u64,
) -> Result<String, String> {
    let settings = SimSettings {
        n_subjects: subjects,
        n_visits: visits,
        n_nodes: nodes,
        r,
        rho,
        replicates: 1,
        seed,
        ..SimSettings::default()
    };
    let truth = settings.true_params().map_err(|e| e.to_string())?;
    let (data, _) = simulate::generate_dataset(&settings, 0).map_err(|e| e.to_string())?;
    let config = FitConfig {
        gibbs: GibbsConfig {
            burn_in: samples.div_ceil(2),
            n_samples: samples,
            seed,
            ..GibbsConfig::default()
        },
        max_iter,
        ..FitConfig::default()
    };
    let fit = mcem::fit(&data, &config).map_err(|e| e.to_string())?;
    let summary = FitSummary {
        true_gicc: truth.gicc(),
        gicc: fit.gicc,
        converged: fit.converged,
        iterations: fit.n_iterations,
        mu: fit.params.mu().iter().copied().collect(),
        sigma_diag: fit.params.sigma_x().diagonal().iter().copied().collect(),
        true_sigma_diag: truth.sigma_x().diagonal().iter().copied().collect(),
        trajectory: fit.trajectory.iter().map(|t| t.gicc).collect(),
    };
    serde_json::to_string(&summary).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    mean: f64,
    exact_mean: f64,
}

/// Histogram of truncated unit-variance normal draws on one side of zero.
pub fn truncated_normal_histogram_json(
    mean: f64,
    positive: bool,
    draws: usize,
    bins: usize,
    seed: u64,
) -> Result<String, String> {
    if draws == 0 || bins == 0 {
        return Err("draws and bins must be positive".into());
    }
    let side = if positive {
        Side::Positive
    } else {
        Side::NonPositive
    };
    let mut rng = sampler::substream(seed, 0, 0, 0);
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        values.push(
            sampler::sample_truncated_normal(mean, 1.0, side, &mut rng)
                .map_err(|e| e.to_string())?,
        );
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0u64; bins];
    for v in &values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let (exact_mean, _) = gicc::normal::truncated_unit_moments(mean, positive);
    let hist = Histogram {
        edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        counts,
        mean: values.iter().sum::<f64>() / draws as f64,
        exact_mean,
    };
    serde_json::to_string(&hist).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    thresholds: Vec<f64>,
    gicc: Vec<Option<f64>>,
    converged: Vec<bool>,
    best_threshold: Option<f64>,
}

/// Generates raw correlation graphs and sweeps the dichotomization threshold.
pub fn threshold_sweep_json(
    subjects: usize,
    contamination: f64,
    t_step: f64,
    samples: usize,
    seed: u64,
) -> Result<String, String> {
    let settings = RawSimSettings {
        n_subjects: subjects,
        contamination,
        seed,
        ..RawSimSettings::default()
    };
    let raw = simulate::generate_raw_dataset(&settings).map_err(|e| e.to_string())?;
    let config = FitConfig {
        gibbs: GibbsConfig {
            burn_in: samples.div_ceil(2),
            n_samples: samples,
            seed,
            ..GibbsConfig::default()
        },
        max_iter: 50,
        ..FitConfig::default()
    };
    let sweep =
        ingest::threshold_sweep(&raw, 0.1, 0.8, t_step, &config).map_err(|e| e.to_string())?;
    let curve = Curve {
        thresholds: sweep.thresholds,
        gicc: sweep.giccs,
        converged: sweep.converged,
        best_threshold: sweep.best_threshold,
    };
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_and_fit(
    subjects: usize,
    visits: usize,
    nodes: usize,
    r: f64,
    rho: f64,
    samples: usize,
    max_iter: usize,
    seed: u32,
) -> Result<String, JsValue> {
    simulate_and_fit_json(
        subjects,
        visits,
        nodes,
        r,
        rho,
        samples,
        max_iter,
        seed as u64,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn truncated_normal_histogram(
    mean: f64,
    positive: bool,
    draws: usize,
    bins: usize,
    seed: u32,
) -> Result<String, JsValue> {
    truncated_normal_histogram_json(mean, positive, draws, bins, seed as u64)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn threshold_sweep(
    subjects: usize,
    contamination: f64,
    t_step: f64,
    samples: usize,
    seed: u32,
) -> Result<String, JsValue> {
    threshold_sweep_json(subjects, contamination, t_step, samples, seed as u64)
        .map_err(|e| JsValue::from_str(&e))
}

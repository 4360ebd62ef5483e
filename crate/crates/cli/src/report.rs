//! JSON documents written by the subcommands. Every document carries
//! `"schema": 1`.

use gicc::ingest::SweepResult;
use gicc::mcem::{FitConfig, FitResult};
use gicc::oracle::{Mle1d, QuadratureSpec};
use gicc::simulate::StudySummary;
use gicc::{BinaryGraphDataset, RawGraphDataset};
use nalgebra::DMatrix;
use serde_json::{json, Value};

const SCHEMA: u32 = 1;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn config_json(config: &FitConfig) -> Value {
    json!({
        "seed": config.gibbs.seed,
        "burn_in": config.gibbs.burn_in,
        "samples": config.gibbs.n_samples,
        "streams": config.gibbs.streams,
        "max_iter": config.max_iter,
        "tol": config.tol,
        "ridge": config.ridge,
        "patience": config.patience,
    })
}

pub fn fit_document(
    data: &BinaryGraphDataset,
    config: &FitConfig,
    result: &FitResult,
    threshold: Option<f64>,
    full_info: bool,
) -> Value {
    let se = result.mu_info.standard_errors();
    if se.is_none() {
        log::warn!("observed information for mu is singular; standard errors omitted");
    }
    let mut doc = json!({
        "schema": SCHEMA,
        "n_subjects": data.n_subjects(),
        "n_nodes": data.shape().n_nodes(),
        "n_edges": data.n_edges(),
        "n_graphs": data.total_visits(),
        "threshold": threshold,
        "config": config_json(config),
        "gicc": result.gicc,
        "converged": result.converged,
        "iterations": result.n_iterations,
        "mu": result.params.mu().as_slice(),
        "mu_se": se,
        "mu_info_psd": result.mu_info.is_psd,
        "sigma_x": rows(result.params.sigma_x()),
        "degenerate_edges": result.degenerate_edges,
        "trajectory": result.trajectory,
    });
    if full_info {
        doc["mu_info"] = json!(rows(&result.mu_info.matrix));
    }
    doc
}

pub fn study_document(config: &FitConfig, summaries: &[StudySummary]) -> Value {
    let cells: Vec<Value> = summaries
        .iter()
        .map(|s| {
            json!({
                "label": s.settings.label(),
                "settings": s.settings,
                "true_gicc": s.true_gicc,
                "gicc_mean": s.gicc_mean,
                "gicc_sd": s.gicc_sd,
                "sigma_diag_mean": s.sigma_diag_mean,
                "sigma_diag_sd": s.sigma_diag_sd,
                "replicates_requested": s.n_requested,
                "replicates_used": s.n_used,
                "replicates_nonconverged": s.n_nonconverged,
            })
        })
        .collect();
    json!({
        "schema": SCHEMA,
        "config": config_json(config),
        "settings": cells,
    })
}

pub fn sweep_document(raw: &RawGraphDataset, config: &FitConfig, result: &SweepResult) -> Value {
    let (lo, hi) = raw.value_range();
    json!({
        "schema": SCHEMA,
        "n_subjects": raw.n_subjects(),
        "n_nodes": raw.shape().n_nodes(),
        "n_graphs": raw.records().len(),
        "value_range": [lo, hi],
        "config": config_json(config),
        "best_threshold": result.best_threshold,
        "best_gicc": result.best_gicc,
        "thresholds": result.thresholds,
        "gicc": result.giccs,
        "converged": result.converged,
    })
}

pub fn oracle_document(spec: &QuadratureSpec, mle: &Mle1d, at: Option<(f64, f64, f64)>) -> Value {
    let mut doc = json!({
        "schema": SCHEMA,
        "quadrature": spec,
        "mle": mle,
    });
    if let Some((mu, sigma2, loglik)) = at {
        doc["loglik"] = json!({ "mu": mu, "sigma2": sigma2, "value": loglik });
    }
    doc
}

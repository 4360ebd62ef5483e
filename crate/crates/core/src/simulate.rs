//! Synthetic data under the latent threshold model and the replicated
//! simulation study.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RawGraphDataset, RawRecord};
use crate::linalg;
use crate::mcem::{self, FitConfig};
use crate::model::{BinaryGraphDataset, GraphShape, LatentState, ModelParams, SubjectGraphs};
use crate::parallel;
use crate::sampler::{self, purpose};

/// One cell of the simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n_subjects: usize,
    pub n_visits: usize,
    pub n_nodes: usize,
    /// Common value of every μ(d).
    pub mu_value: f64,
    pub r: f64,
    pub rho: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            n_subjects: 100,
            n_visits: 2,
            n_nodes: 5,
            mu_value: 0.5,
            r: 2.0,
            rho: 0.8,
            replicates: 50,
            seed: 0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_visits == 0 || self.replicates == 0 {
            return Err(Error::validation(
                "subjects, visits and replicates must all be positive",
            ));
        }
        GraphShape::new(self.n_nodes)?;
        if !self.mu_value.is_finite() {
            return Err(Error::validation("mu must be finite"));
        }
        ar1_covariance(self.r, self.rho, 1)?;
        Ok(())
    }

    pub fn shape(&self) -> Result<GraphShape> {
        GraphShape::new(self.n_nodes)
    }

    pub fn true_params(&self) -> Result<ModelParams> {
        let d = self.shape()?.n_edges();
        ModelParams::new(
            DVector::from_element(d, self.mu_value),
            ar1_covariance(self.r, self.rho, d)?,
        )
    }

    pub fn label(&self) -> String {
        format!("I={} J={} r={}", self.n_subjects, self.n_visits, self.r)
    }
}

/// The six (I, J, r) cells of the reference simulation table, with D = 10,
/// μ ≡ 0.5 and ρ = 0.8.
pub fn reference_settings(replicates: usize, seed: u64) -> Vec<SimSettings> {
    [
        (100, 2, 2.0),
        (100, 2, 4.0),
        (100, 4, 2.0),
        (100, 4, 4.0),
        (200, 2, 2.0),
        (200, 2, 4.0),
    ]
    .into_iter()
    .map(|(n_subjects, n_visits, r)| SimSettings {
        n_subjects,
        n_visits,
        r,
        replicates,
        seed,
        ..SimSettings::default()
    })
    .collect()
}

/// `Σ[i, j] = r ρ^{|i − j|}`.
pub fn ar1_covariance(r: f64, rho: f64, d: usize) -> Result<DMatrix<f64>> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::domain(format!("r must be positive, got {r}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::domain(format!("|rho| must be below 1, got {rho}")));
    }
    if d == 0 {
        return Err(Error::domain("dimension must be positive"));
    }
    let m = DMatrix::from_fn(d, d, |i, j| r * rho.powi(i.abs_diff(j) as i32));
    linalg::spd_cholesky(&m, "AR(1) covariance")?;
    Ok(m)
}

/// Draws `x_i ~ N(0, Σ_x)`, `y_ij = μ + x_i + u_ij`, and thresholds at zero.
pub fn generate_from_params<R: Rng + ?Sized>(
    params: &ModelParams,
    visits: &[usize],
    rng: &mut R,
) -> Result<(BinaryGraphDataset, LatentState)> {
    let d = params.n_edges();
    let shape = GraphShape::from_edges(d)?;
    let chol = nalgebra::Cholesky::new(params.sigma_x().clone());
    // PSD but singular covariances (r → 0) fall back to the eigen square root.
    let root = match chol {
        Some(c) => c.unpack(),
        None => {
            let eig = nalgebra::SymmetricEigen::new(params.sigma_x().clone());
            let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
        }
    };
    let mut xs = Vec::with_capacity(visits.len());
    let mut ys = Vec::with_capacity(visits.len());
    let mut subjects = Vec::with_capacity(visits.len());
    for &j in visits {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &root * z;
        let mut yv = Vec::with_capacity(j);
        let mut ov = Vec::with_capacity(j);
        for _ in 0..j {
            let y = DVector::from_fn(d, |k, _| {
                params.mu()[k] + x[k] + rng.sample::<f64, _>(StandardNormal)
            });
            ov.push(y.iter().map(|&v| v > 0.0).collect());
            yv.push(y);
        }
        xs.push(x);
        ys.push(yv);
        subjects.push(SubjectGraphs { visits: ov });
    }
    Ok((
        BinaryGraphDataset::new(shape, subjects)?,
        LatentState { x: xs, y: ys },
    ))
}

/// Dataset for replicate `replicate` of `settings`; reproducible from the seed.
pub fn generate_dataset(
    settings: &SimSettings,
    replicate: usize,
) -> Result<(BinaryGraphDataset, LatentState)> {
    settings.validate()?;
    let params = settings.true_params()?;
    let mut rng = sampler::substream(settings.seed, purpose::SIMULATE, replicate as u64, 0);
    generate_from_params(
        &params,
        &vec![settings.n_visits; settings.n_subjects],
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Estimated diagonal of Σ_x; empty when the fit failed.
    pub sigma_diag: Vec<f64>,
    pub gicc: Option<f64>,
    pub converged: bool,
    pub n_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub settings: SimSettings,
    pub true_gicc: f64,
    pub sigma_diag_mean: Vec<f64>,
    pub sigma_diag_sd: Vec<Option<f64>>,
    pub gicc_mean: f64,
    pub gicc_sd: Option<f64>,
    pub n_requested: usize,
    /// Replicates that converged and enter the aggregates.
    pub n_used: usize,
    pub n_nonconverged: usize,
    pub replicates: Vec<ReplicateRecord>,
}

fn run_replicate(settings: &SimSettings, config: &FitConfig, replicate: usize) -> ReplicateRecord {
    let fit_seed =
        sampler::substream(settings.seed, purpose::REPLICATE, replicate as u64, 0).next_u64();
    let outcome = generate_dataset(settings, replicate)
        .and_then(|(data, _)| mcem::fit(&data, &config.with_seed(fit_seed)));
    match outcome {
        Ok(f) => ReplicateRecord {
            replicate,
            sigma_diag: f.params.sigma_x().diagonal().iter().copied().collect(),
            gicc: Some(f.gicc),
            converged: f.converged,
            n_iterations: f.n_iterations,
        },
        Err(e) => {
            log::warn!("{} replicate {replicate} failed: {e}", settings.label());
            ReplicateRecord {
                replicate,
                sigma_diag: Vec::new(),
                gicc: None,
                converged: false,
                n_iterations: 0,
            }
        }
    }
}

/// Aggregates replicate records; non-converged replicates are excluded.
pub fn summarize(settings: &SimSettings, replicates: Vec<ReplicateRecord>) -> Result<StudySummary> {
    let d = settings.shape()?.n_edges();
    let used: Vec<&ReplicateRecord> = replicates
        .iter()
        .filter(|r| r.converged && r.gicc.is_some())
        .collect();
    let mut sigma_diag_mean = Vec::with_capacity(d);
    let mut sigma_diag_sd = Vec::with_capacity(d);
    for k in 0..d {
        let vals: Vec<f64> = used.iter().map(|r| r.sigma_diag[k]).collect();
        let (m, sd) = linalg::mean_sd(&vals);
        sigma_diag_mean.push(m);
        sigma_diag_sd.push(sd);
    }
    let g: Vec<f64> = used.iter().filter_map(|r| r.gicc).collect();
    let (gicc_mean, gicc_sd) = linalg::mean_sd(&g);
    Ok(StudySummary {
        true_gicc: settings.true_params()?.gicc(),
        settings: *settings,
        sigma_diag_mean,
        sigma_diag_sd,
        gicc_mean,
        gicc_sd,
        n_requested: settings.replicates,
        n_used: used.len(),
        n_nonconverged: replicates.len() - used.len(),
        replicates,
    })
}

/// Runs every replicate of every setting and aggregates per setting.
pub fn run_study(settings: &[SimSettings], config: &FitConfig) -> Result<Vec<StudySummary>> {
    config.validate()?;
    settings.iter().try_for_each(SimSettings::validate)?;
    settings
        .iter()
        .map(|s| {
            let records = parallel::map_indexed(s.replicates, |rep| run_replicate(s, config, rep));
            summarize(s, records)
        })
        .collect()
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Table-shaped summary: for each setting a `mean` and an `sd` row with one
/// column per diagonal entry of Σ_x followed by the GICC.
pub fn write_summary_csv<W: Write>(summaries: &[StudySummary], writer: W) -> Result<()> {
    let d = summaries
        .iter()
        .map(|s| s.sigma_diag_mean.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "subjects",
        "visits",
        "nodes",
        "mu",
        "r",
        "rho",
        "replicates",
        "used",
        "nonconverged",
        "statistic",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=d).map(|k| format!("sigma_{k}_{k}")));
    header.push("gicc".into());
    w.write_record(&header)?;
    for s in summaries {
        let st = &s.settings;
        let prefix = [
            st.n_subjects.to_string(),
            st.n_visits.to_string(),
            st.n_nodes.to_string(),
            st.mu_value.to_string(),
            st.r.to_string(),
            st.rho.to_string(),
            s.n_requested.to_string(),
            s.n_used.to_string(),
            s.n_nonconverged.to_string(),
        ];
        let mut mean_row: Vec<String> = prefix.to_vec();
        mean_row.push("mean".into());
        mean_row.extend(s.sigma_diag_mean.iter().map(|v| v.to_string()));
        mean_row.push(s.gicc_mean.to_string());
        w.write_record(&mean_row)?;
        let mut sd_row: Vec<String> = prefix.to_vec();
        sd_row.push("sd".into());
        sd_row.extend(s.sigma_diag_sd.iter().map(|v| opt_to_string(*v)));
        sd_row.push(opt_to_string(s.gicc_sd));
        w.write_record(&sd_row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per replicate: settings, replicate index, diagonal of Σ̂_x, GICC.
pub fn write_replicates_csv<W: Write>(summaries: &[StudySummary], writer: W) -> Result<()> {
    let d = summaries
        .iter()
        .map(|s| s.sigma_diag_mean.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "subjects",
        "visits",
        "nodes",
        "r",
        "rho",
        "replicate",
        "converged",
        "iterations",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=d).map(|k| format!("sigma_{k}_{k}")));
    header.push("gicc".into());
    w.write_record(&header)?;
    for s in summaries {
        let st = &s.settings;
        for r in &s.replicates {
            let mut row = vec![
                st.n_subjects.to_string(),
                st.n_visits.to_string(),
                st.n_nodes.to_string(),
                st.r.to_string(),
                st.rho.to_string(),
                r.replicate.to_string(),
                r.converged.to_string(),
                r.n_iterations.to_string(),
            ];
            row.extend((0..d).map(|k| {
                r.sigma_diag
                    .get(k)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
            row.push(opt_to_string(r.gicc));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generator of raw correlation-like graphs with a subject effect.
///
/// With probability `1 − contamination` an edge value is
/// `tanh(c(d) + x_i(d) + e_ij(d))`, with per-edge centres `c(d)` spread evenly
/// (on the correlation scale) over `center_range`, `x_i(d) ~ N(0, subject_sd²)`
/// and `e_ij(d) ~ N(0, noise_sd²)`. Otherwise it is uniform on (−1, 1) and
/// carries no subject information. Thresholds inside the band of centres
/// mostly see the structured part; thresholds far outside it see mostly
/// the uninformative part, so the GICC falls off towards both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSimSettings {
    pub n_subjects: usize,
    pub n_visits: usize,
    pub n_nodes: usize,
    pub center_range: (f64, f64),
    pub subject_sd: f64,
    pub noise_sd: f64,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for RawSimSettings {
    fn default() -> Self {
        RawSimSettings {
            n_subjects: 40,
            n_visits: 2,
            n_nodes: 5,
            center_range: (0.3, 0.55),
            subject_sd: 0.2,
            noise_sd: 0.1,
            contamination: 0.2,
            seed: 0,
        }
    }
}

pub fn generate_raw_dataset(settings: &RawSimSettings) -> Result<RawGraphDataset> {
    let shape = GraphShape::new(settings.n_nodes)?;
    if settings.n_subjects == 0 || settings.n_visits == 0 {
        return Err(Error::validation("subjects and visits must be positive"));
    }
    let (lo, hi) = settings.center_range;
    if !(-1.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::validation("center range must lie inside (-1, 1)"));
    }
    if !(settings.subject_sd >= 0.0 && settings.noise_sd > 0.0) {
        return Err(Error::validation(
            "noise sd must be positive, subject sd non-negative",
        ));
    }
    if !(0.0..=1.0).contains(&settings.contamination) {
        return Err(Error::validation("contamination must lie in [0, 1]"));
    }
    let d = shape.n_edges();
    let centers: Vec<f64> = (0..d)
        .map(|k| {
            let frac = if d > 1 {
                k as f64 / (d - 1) as f64
            } else {
                0.5
            };
            (lo + frac * (hi - lo)).atanh()
        })
        .collect();
    let n = shape.n_nodes();
    let mut rng = sampler::substream(settings.seed, purpose::SIMULATE, u64::MAX, 0);
    let mut records = Vec::new();
    for i in 0..settings.n_subjects {
        let x: Vec<f64> = (0..d)
            .map(|_| settings.subject_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..settings.n_visits {
            let mut m = DMatrix::from_element(n, n, 1.0);
            for (k, (a, b)) in shape.pairs().enumerate() {
                let e = settings.noise_sd * rng.sample::<f64, _>(StandardNormal);
                let v = if rng.random::<f64>() < settings.contamination {
                    rng.random_range(-1.0..1.0)
                } else {
                    (centers[k] + x[k] + e).tanh()
                };
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
            records.push(RawRecord {
                subject: i as u64 + 1,
                visit: j as u64 + 1,
                matrix: m,
            });
        }
    }
    RawGraphDataset::new(shape, records)
}

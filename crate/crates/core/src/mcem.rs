//! Monte Carlo EM for the multivariate probit mixed model.
//!
//! The E-step runs one Gibbs chain per subject and turns the Monte Carlo
//! moments of the latent sums `y_i·` into `E[x_i | o]` and `E[x_i x_iᵀ | o]`
//! through the Gaussian posterior of `x_i` given `y_i·`. The M-step is the
//! closed-form complete-data MLE. At the end, the observed information for
//! `μ` is obtained from the same machinery (Louis' identity).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BinaryGraphDataset, ModelParams};
use crate::normal;
use crate::parallel;
use crate::sampler::{self, purpose, GibbsConfig, PosteriorFactor, StreamSchedule, SubjectMoments};

/// Bound on |μ⁰(d)| for the moment-matched starting point.
const INIT_MU_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub gibbs: GibbsConfig,
    pub max_iter: usize,
    /// Threshold on max(‖Δμ‖∞, ‖ΔΣ_x‖_F / ‖Σ_x‖_F).
    pub tol: f64,
    /// Multiple of the identity added to every Σ_x update.
    pub ridge: f64,
    /// Consecutive iterations that must satisfy `tol`.
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            gibbs: GibbsConfig::default(),
            max_iter: 100,
            tol: 1e-3,
            ridge: 1e-8,
            patience: 2,
        }
    }
}

impl FitConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gibbs.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.gibbs.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.gibbs.validate()?;
        if self.max_iter == 0 {
            return Err(Error::validation("max_iter must be positive"));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::validation(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::validation(format!(
                "ridge must be non-negative, got {}",
                self.ridge
            )));
        }
        if self.patience == 0 {
            return Err(Error::validation("patience must be at least 1"));
        }
        Ok(())
    }
}

/// E-step output consumed by [`m_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// E[x_i | o] per subject.
    pub ex: Vec<DVector<f64>>,
    /// E[x_i x_iᵀ | o] per subject.
    pub exx: Vec<DMatrix<f64>>,
    /// Σ_i Σ_j (E[y_ij | o] − E[x_i | o]).
    pub resid_sum: DVector<f64>,
    /// Σ_i J_i.
    pub total_visits: usize,
}

/// Applies the posterior-of-x algebra to one subject's latent moments.
pub fn subject_stats(
    moments: &SubjectMoments,
    factor: &PosteriorFactor,
    mu: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let a = factor.cov();
    let ex = factor.mean(&moments.e_ysum, mu);
    let exx = linalg::symmetrize(&(a * moments.centered_outer(mu) * a + a));
    (ex, exx)
}

fn factors_by_visits(
    data: &BinaryGraphDataset,
    sigma_x: &DMatrix<f64>,
) -> Result<BTreeMap<usize, PosteriorFactor>> {
    let mut out = BTreeMap::new();
    for (i, s) in data.subjects().iter().enumerate() {
        let j = s.n_visits();
        if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(j) {
            let f = PosteriorFactor::new(sigma_x, j)
                .map_err(|e| e.context(format!("subject {}", i + 1)))?;
            slot.insert(f);
        }
    }
    Ok(out)
}

fn check_dims(data: &BinaryGraphDataset, params: &ModelParams) -> Result<()> {
    if data.n_edges() != params.n_edges() {
        return Err(Error::validation(format!(
            "dataset has {} edges but parameters have {}",
            data.n_edges(),
            params.n_edges()
        )));
    }
    Ok(())
}

fn subject_moments_all(
    data: &BinaryGraphDataset,
    params: &ModelParams,
    gibbs: &GibbsConfig,
    factors: &BTreeMap<usize, PosteriorFactor>,
    tag: u64,
    iteration: u64,
) -> Vec<SubjectMoments> {
    parallel::map_indexed(data.n_subjects(), |i| {
        let obs = data.subject(i);
        let mut rng = sampler::substream(gibbs.seed, tag, iteration, i as u64);
        sampler::moments_with_factor(obs, params.mu(), &factors[&obs.n_visits()], gibbs, &mut rng)
    })
}

/// Monte Carlo E-step at `params`.
///
/// `iteration` only selects the random streams when the configuration asks
/// for a fresh stream per iteration.
pub fn e_step(
    data: &BinaryGraphDataset,
    params: &ModelParams,
    gibbs: &GibbsConfig,
    iteration: usize,
) -> Result<SufficientStats> {
    check_dims(data, params)?;
    gibbs.validate()?;
    let factors = factors_by_visits(data, params.sigma_x())?;
    let stream = match gibbs.streams {
        StreamSchedule::Common => 0,
        StreamSchedule::PerIteration => iteration as u64 + 1,
    };
    let moments = subject_moments_all(data, params, gibbs, &factors, purpose::E_STEP, stream);

    let d = data.n_edges();
    let mut ex = Vec::with_capacity(moments.len());
    let mut exx = Vec::with_capacity(moments.len());
    let mut resid_sum = DVector::zeros(d);
    for (m, obs) in moments.iter().zip(data.subjects()) {
        let (x, xx) = subject_stats(m, &factors[&obs.n_visits()], params.mu());
        resid_sum += &m.e_ysum - &x * obs.n_visits() as f64;
        ex.push(x);
        exx.push(xx);
    }
    Ok(SufficientStats {
        ex,
        exx,
        resid_sum,
        total_visits: data.total_visits(),
    })
}

/// Closed-form complete-data MLE with the conditional moments plugged in.
pub fn m_step(stats: &SufficientStats, ridge: f64) -> Result<ModelParams> {
    let n_subjects = stats.exx.len();
    if n_subjects == 0 || stats.total_visits == 0 {
        return Err(Error::validation("M-step needs at least one subject"));
    }
    let d = stats.resid_sum.len();
    let mu = &stats.resid_sum / stats.total_visits as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for m in &stats.exx {
        sigma += m;
    }
    sigma /= n_subjects as f64;
    let mut sigma = linalg::symmetrize(&sigma);
    for k in 0..d {
        sigma[(k, k)] += ridge;
    }
    ModelParams::new(mu, sigma)
}

/// Observed information for `μ` with an eigenvalue-based PSD flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LouisInfo {
    pub matrix: DMatrix<f64>,
    pub is_psd: bool,
}

impl LouisInfo {
    /// √diag(I⁻¹), or `None` when the matrix cannot be inverted.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let chol = nalgebra::Cholesky::new(self.matrix.clone())?;
        let inv = chol.inverse();
        Some(inv.diagonal().iter().map(|v| v.sqrt()).collect())
    }
}

/// Louis' observed information for `μ`, evaluated at `params`.
///
/// The complete-data score for `μ` is `S = Σ_i s_i`, `s_i = Σ_j (y_ij − μ − x_i)`,
/// and its negative Hessian is `(Σ_i J_i)·I`. Because subjects are
/// independent given `o`, `E[SSᵀ|o] − E[S|o]E[S|o]ᵀ = Σ_i Cov(s_i | o)`, and
/// each `Cov(s_i | o)` is evaluated with `x_i` integrated out analytically:
/// `(I − J A) Cov(y_i· | o) (I − J A) + J² A`.
pub fn louis_information(
    data: &BinaryGraphDataset,
    params: &ModelParams,
    gibbs: &GibbsConfig,
) -> Result<LouisInfo> {
    check_dims(data, params)?;
    gibbs.validate()?;
    let d = data.n_edges();
    let factors = factors_by_visits(data, params.sigma_x())?;
    let moments = subject_moments_all(data, params, gibbs, &factors, purpose::LOUIS, 0);
    let mut info = DMatrix::identity(d, d) * data.total_visits() as f64;
    let eye = DMatrix::<f64>::identity(d, d);
    for (m, obs) in moments.iter().zip(data.subjects()) {
        let f = &factors[&obs.n_visits()];
        let j = obs.n_visits() as f64;
        let shrink = &eye - f.cov() * j;
        let cov_s = &shrink * m.ysum_cov() * &shrink + f.cov() * (j * j);
        info -= cov_s;
    }
    let matrix = linalg::symmetrize(&info);
    let is_psd = linalg::is_psd(&matrix);
    Ok(LouisInfo { matrix, is_psd })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub mu_change: f64,
    pub sigma_change: f64,
    pub gicc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub gicc: f64,
    pub n_iterations: usize,
    pub trajectory: Vec<IterationRecord>,
    pub mu_info: LouisInfo,
    pub converged: bool,
    /// 1-based edges whose pooled observations are all 0 or all 1; their `μ`
    /// diverges and is held at the clamp bound.
    pub degenerate_edges: Vec<usize>,
}

/// Moment-matched start: `μ⁰(d) = Φ⁻¹(p̄(d))` clamped to ±3, `Σ_x⁰ = I`.
pub fn initial_params(data: &BinaryGraphDataset) -> ModelParams {
    let d = data.n_edges();
    let mu = DVector::from_iterator(
        d,
        data.edge_frequencies()
            .into_iter()
            .map(|p| normal::quantile(p).clamp(-INIT_MU_BOUND, INIT_MU_BOUND)),
    );
    ModelParams::new(mu, DMatrix::identity(d, d)).expect("identity covariance is valid")
}

/// Clamp applied to the mean of an all-0 or all-1 edge: |Φ⁻¹(1 / (2 Σ J_i))|.
pub fn degenerate_mu_bound(total_visits: usize) -> f64 {
    normal::quantile(1.0 / (2.0 * total_visits as f64)).abs()
}

/// Fits `μ` and `Σ_x` by Monte Carlo EM.
pub fn fit(data: &BinaryGraphDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if data.n_subjects() < 2 {
        return Err(Error::validation(format!(
            "need at least two subjects, got {}",
            data.n_subjects()
        )));
    }
    let n_total = data.total_visits();
    let counts = data.edge_counts();
    let degenerate: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0 || c == n_total)
        .map(|(d, _)| d)
        .collect();
    let bound = degenerate_mu_bound(n_total);
    if !degenerate.is_empty() {
        log::warn!(
            "{} edge(s) are all 0 or all 1; their means diverge and are clamped at ±{bound:.3}",
            degenerate.len()
        );
    }
    let clamp = |p: ModelParams| -> Result<ModelParams> {
        if degenerate.is_empty() {
            return Ok(p);
        }
        let mut mu = p.mu().clone();
        for &d in &degenerate {
            mu[d] = mu[d].clamp(-bound, bound);
        }
        ModelParams::new(mu, p.sigma_x().clone())
    };

    let mut params = clamp(initial_params(data))?;
    let mut trajectory = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    for iteration in 0..config.max_iter {
        let stats = e_step(data, &params, &config.gibbs, iteration)
            .map_err(|e| e.context(format!("E-step {}", iteration + 1)))?;
        let next = clamp(m_step(&stats, config.ridge)?)?;
        let mu_change = (next.mu() - params.mu()).amax();
        let sigma_change = (next.sigma_x() - params.sigma_x()).norm()
            / params.sigma_x().norm().max(f64::MIN_POSITIVE);
        let record = IterationRecord {
            mu_change,
            sigma_change,
            gicc: next.gicc(),
        };
        log::debug!(
            "iteration {}: dmu {:.3e} dsigma {:.3e} gicc {:.4}",
            iteration + 1,
            mu_change,
            sigma_change,
            record.gicc
        );
        trajectory.push(record);
        params = next;
        if mu_change.max(sigma_change) < config.tol {
            streak += 1;
            if streak >= config.patience {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }
    if !converged {
        log::warn!("MCEM did not converge in {} iterations", config.max_iter);
    }
    let mu_info = louis_information(data, &params, &config.gibbs)?;
    if !mu_info.is_psd {
        log::warn!("observed information for mu is not positive semidefinite");
    }
    Ok(FitResult {
        gicc: params.gicc(),
        n_iterations: trajectory.len(),
        trajectory,
        mu_info,
        converged,
        degenerate_edges: degenerate.iter().map(|d| d + 1).collect(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GraphShape, SubjectGraphs};
    use crate::sampler::{sample_truncated_normal, Side};

    fn one_edge(patterns: &[&[bool]]) -> BinaryGraphDataset {
        let subjects = patterns
            .iter()
            .map(|p| SubjectGraphs {
                visits: p.iter().map(|&b| vec![b]).collect(),
            })
            .collect();
        BinaryGraphDataset::new(GraphShape::new(2).unwrap(), subjects).unwrap()
    }

    fn params_1d(mu: f64, s2: f64) -> ModelParams {
        ModelParams::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, s2),
        )
        .unwrap()
    }

    #[test]
    fn m_step_single_subject() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let stats = SufficientStats {
            ex: vec![DVector::zeros(2)],
            exx: vec![m.clone()],
            resid_sum: DVector::from_row_slice(&[1.0, -3.0]),
            total_visits: 2,
        };
        let p = m_step(&stats, 1e-8).unwrap();
        assert!(linalg::max_abs_diff(p.sigma_x(), &(m + DMatrix::identity(2, 2) * 1e-8)) < 1e-15);
        assert_eq!(p.mu().as_slice(), &[0.5, -1.5]);
    }

    #[test]
    fn m_step_without_random_effect() {
        let ys = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let stats = SufficientStats {
            ex: vec![DVector::zeros(1); 3],
            exx: vec![DMatrix::zeros(1, 1); 3],
            resid_sum: DVector::from_element(1, ys.iter().sum()),
            total_visits: ys.len(),
        };
        let p = m_step(&stats, 1e-8).unwrap();
        assert!((p.mu()[0] - ys.iter().sum::<f64>() / 6.0).abs() < 1e-15);
        assert_eq!(p.sigma_x()[(0, 0)], 1e-8);
        let empty = SufficientStats {
            ex: vec![],
            exx: vec![],
            resid_sum: DVector::zeros(1),
            total_visits: 0,
        };
        assert!(m_step(&empty, 1e-8).is_err());
    }

    #[test]
    fn vanishing_prior_shrinks_effects() {
        let data = one_edge(&[&[true, true], &[false, true], &[false, false]]);
        let p = params_1d(0.2, 1e-10);
        let stats = e_step(&data, &p, &GibbsConfig::default(), 0).unwrap();
        for x in &stats.ex {
            assert!(x[0].abs() < 1e-8);
        }
    }

    #[test]
    fn single_positive_visit_effect() {
        let data = one_edge(&vec![&[true][..]; 100]);
        let stats = e_step(&data, &params_1d(0.0, 1.0), &GibbsConfig::default(), 0).unwrap();
        let mean = stats.ex.iter().map(|x| x[0]).sum::<f64>() / 100.0;
        assert!((mean - 0.5642).abs() < 0.01, "{mean}");
    }

    #[test]
    fn symmetric_dataset_has_centered_residuals() {
        let mut patterns: Vec<&[bool]> = Vec::new();
        for _ in 0..60 {
            patterns.push(&[true, false, true]);
            patterns.push(&[false, true, false]);
        }
        let data = one_edge(&patterns);
        let stats = e_step(&data, &params_1d(0.0, 1.5), &GibbsConfig::default(), 0).unwrap();
        let mu = stats.resid_sum[0] / stats.total_visits as f64;
        assert!(mu.abs() < 0.02, "{mu}");
    }

    #[test]
    fn louis_small_random_effect_is_probit_information() {
        let mut patterns: Vec<&[bool]> = Vec::new();
        for _ in 0..100 {
            patterns.push(&[true, false]);
            patterns.push(&[true, true]);
            patterns.push(&[false, false]);
        }
        let data = one_edge(&patterns);
        let info =
            louis_information(&data, &params_1d(0.0, 1e-8), &GibbsConfig::default()).unwrap();
        let target = data.total_visits() as f64 * 2.0 / std::f64::consts::PI;
        assert!(info.is_psd);
        assert!(
            (info.matrix[(0, 0)] / target - 1.0).abs() < 0.05,
            "{} vs {target}",
            info.matrix[(0, 0)]
        );
    }

    #[test]
    fn louis_is_additive_over_subjects() {
        let shape = GraphShape::new(3).unwrap();
        let params = ModelParams::new(
            DVector::from_row_slice(&[0.4, -0.2, 0.1]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.2, 0.2, 0.1, 0.2, 0.8]),
        )
        .unwrap();
        let mut rng = sampler::substream(9, 99, 0, 0);
        let (data, _) = crate::simulate::generate_from_params(&params, &[3; 60], &mut rng).unwrap();
        assert_eq!(data.shape(), shape);
        let gibbs = GibbsConfig::default();
        let one = louis_information(&data, &params, &gibbs).unwrap();
        let two = louis_information(&data.replicated(2), &params, &gibbs).unwrap();
        assert!(linalg::max_abs_diff(&one.matrix, &one.matrix.transpose()) == 0.0);
        for k in 0..3 {
            assert!(one.matrix[(k, k)] > 0.0);
            assert!((two.matrix[(k, k)] / (2.0 * one.matrix[(k, k)]) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn fit_is_reproducible_and_consistent() {
        let params = ModelParams::new(
            DVector::from_row_slice(&[0.5, 0.0, -0.3]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.5, 0.2, 0.5, 1.0]),
        )
        .unwrap();
        let mut rng = sampler::substream(4, 99, 0, 0);
        let (data, _) = crate::simulate::generate_from_params(&params, &[2; 40], &mut rng).unwrap();
        let config = FitConfig {
            gibbs: GibbsConfig {
                burn_in: 50,
                n_samples: 100,
                ..GibbsConfig::default()
            },
            max_iter: 15,
            ..FitConfig::default()
        };
        let a = fit(&data, &config.with_seed(11)).unwrap();
        let b = fit(&data, &config.with_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), a.n_iterations);
        assert_eq!(a.gicc, a.params.gicc());
        for r in &a.trajectory {
            assert!(r.gicc > 0.0 && r.gicc < 1.0);
        }
        let c = fit(&data, &config.with_seed(12)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn degenerate_edge_is_clamped() {
        let shape = GraphShape::new(3).unwrap();
        let mut rng = sampler::substream(5, 99, 0, 0);
        let subjects = (0..20)
            .map(|_| SubjectGraphs {
                visits: (0..2)
                    .map(|_| {
                        let y =
                            sample_truncated_normal(0.0, 1.0, Side::Positive, &mut rng).unwrap();
                        vec![true, y > 0.7, y < 0.5]
                    })
                    .collect(),
            })
            .collect();
        let data = BinaryGraphDataset::new(shape, subjects).unwrap();
        let config = FitConfig {
            gibbs: GibbsConfig {
                burn_in: 20,
                n_samples: 50,
                ..GibbsConfig::default()
            },
            max_iter: 5,
            ..FitConfig::default()
        };
        let f = fit(&data, &config).unwrap();
        assert_eq!(f.degenerate_edges, vec![1]);
        assert!(f.params.mu()[0] <= degenerate_mu_bound(40) + 1e-15);
        assert!((degenerate_mu_bound(40) - normal::quantile(1.0 / 80.0).abs()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let bad = [
            FitConfig {
                max_iter: 0,
                ..FitConfig::default()
            },
            FitConfig {
                tol: 0.0,
                ..FitConfig::default()
            },
            FitConfig {
                ridge: -1.0,
                ..FitConfig::default()
            },
            FitConfig {
                patience: 0,
                ..FitConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let data = one_edge(&[&[true, false]]);
        assert!(fit(&data, &FitConfig::default()).is_err());
    }
}

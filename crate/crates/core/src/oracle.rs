//! Deterministic reference computations for one- and two-edge models.
//!
//! Everything here is plain numerical integration: Gauss–Hermite or
//! trapezoid quadrature for the D = 1 marginal likelihood, and a dense grid
//! over the random effect (with the truncated latent Gaussians integrated in
//! closed form) for posterior moments when D ≤ 2. No random numbers are used.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BinaryGraphDataset, ModelParams, SubjectGraphs};
use crate::normal;
use crate::sampler::SubjectMoments;

const MU_BOUNDS: (f64, f64) = (-5.0, 5.0);
const LOG_SIGMA2_BOUNDS: (f64, f64) = (-10.0, 5.0);
const GOLDEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss–Hermite order.
    pub n_nodes_gh: usize,
    /// Half-width of the trapezoid grid in prior standard deviations.
    pub grid_halfwidth: f64,
    pub grid_points: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            n_nodes_gh: 64,
            grid_halfwidth: 8.0,
            grid_points: 2001,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes_gh < 16 {
            return Err(Error::validation("Gauss-Hermite order must be at least 16"));
        }
        if self.grid_points < 3 || !(self.grid_halfwidth > 0.0) {
            return Err(Error::validation(
                "trapezoid grid needs >= 3 points and positive width",
            ));
        }
        Ok(())
    }
}

/// Nodes and weights for ∫ e^{−t²} f(t) dt (physicists' Hermite).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Visit count and number of observed ones of one subject on a single edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub n_visits: usize,
    pub n_ones: usize,
}

/// Per-subject outcome counts of a D = 1 dataset.
pub fn outcomes_1d(data: &BinaryGraphDataset) -> Result<Vec<SubjectOutcome>> {
    if data.n_edges() != 1 {
        return Err(Error::validation(format!(
            "one-edge oracle needs D = 1, got D = {}",
            data.n_edges()
        )));
    }
    Ok(data
        .subjects()
        .iter()
        .map(|s| SubjectOutcome {
            n_visits: s.n_visits(),
            n_ones: s.visits.iter().filter(|v| v[0]).count(),
        })
        .collect())
}

fn grouped(outcomes: &[SubjectOutcome]) -> BTreeMap<SubjectOutcome, usize> {
    let mut m = BTreeMap::new();
    for &o in outcomes {
        *m.entry(o).or_insert(0) += 1;
    }
    m
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[inline]
fn pattern_loglik(o: SubjectOutcome, eta: f64) -> f64 {
    let k = o.n_ones as f64;
    let m = (o.n_visits - o.n_ones) as f64;
    let mut v = 0.0;
    if k > 0.0 {
        v += k * normal::ln_cdf(eta);
    }
    if m > 0.0 {
        v += m * normal::ln_cdf(-eta);
    }
    v
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::domain(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    Ok(())
}

/// Observed log-likelihood of a one-edge model by adaptive Gauss–Hermite
/// quadrature, evaluated in log space.
///
/// For every distinct (visits, ones) pattern the rule is recentred at the
/// mode of the (log-concave) integrand and scaled by its curvature.
pub fn observed_loglik_1d(
    mu: f64,
    sigma2: f64,
    outcomes: &[SubjectOutcome],
    spec: &QuadratureSpec,
) -> Result<f64> {
    check_sigma2(sigma2)?;
    spec.validate()?;
    let (t, w) = gauss_hermite(spec.n_nodes_gh);
    let sd = sigma2.sqrt();
    let mut total = 0.0;
    let mut terms = vec![0.0; t.len()];
    for (o, count) in grouped(outcomes) {
        let g = |x: f64| normal::ln_pdf(x / sd) - sd.ln() + pattern_loglik(o, mu + x);
        let (mode, g_mode) = golden_max(g, -12.0 * sd, 12.0 * sd, 1e-9 * sd);
        let h = 1e-3 * sd;
        let curv = -(g(mode + h) - 2.0 * g_mode + g(mode - h)) / (h * h);
        let scale = if curv > 0.0 {
            (2.0 / curv).sqrt()
        } else {
            (2.0 * sigma2).sqrt()
        };
        for (k, term) in terms.iter_mut().enumerate() {
            *term = w[k].ln() + t[k] * t[k] + scale.ln() + g(mode + scale * t[k]);
        }
        total += count as f64 * log_sum_exp(&terms);
    }
    Ok(total)
}

/// Same quantity by the trapezoid rule on `±grid_halfwidth` prior s.d.
pub fn observed_loglik_1d_trapezoid(
    mu: f64,
    sigma2: f64,
    outcomes: &[SubjectOutcome],
    spec: &QuadratureSpec,
) -> Result<f64> {
    check_sigma2(sigma2)?;
    spec.validate()?;
    let sd = sigma2.sqrt();
    let n = spec.grid_points;
    let h = 2.0 * spec.grid_halfwidth / (n - 1) as f64;
    let mut total = 0.0;
    let mut terms = vec![0.0; n];
    for (o, count) in grouped(outcomes) {
        for (k, term) in terms.iter_mut().enumerate() {
            let z = -spec.grid_halfwidth + k as f64 * h;
            let end = if k == 0 || k == n - 1 {
                0.5f64.ln()
            } else {
                0.0
            };
            *term = end + h.ln() + normal::ln_pdf(z) + pattern_loglik(o, mu + sd * z);
        }
        total += count as f64 * log_sum_exp(&terms);
    }
    Ok(total)
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    // Compare the interior optimum with both endpoints.
    let mid = 0.5 * (lo + hi);
    [(mid, f(mid)), (lo, f(lo)), (hi, f(hi))].into_iter().fold(
        (mid, f64::NEG_INFINITY),
        |best, cand| if cand.1 > best.1 { cand } else { best },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mle1d {
    pub mu: f64,
    pub sigma2: f64,
    pub icc: f64,
    pub loglik: f64,
    /// The optimum sits on the search box: the likelihood keeps increasing
    /// towards a boundary (e.g. all-concordant data).
    pub at_boundary: bool,
}

/// MLE of μ for fixed σ² by golden-section search on [−5, 5].
pub fn mle_mu_given_sigma2(
    sigma2: f64,
    outcomes: &[SubjectOutcome],
    spec: &QuadratureSpec,
) -> Result<(f64, f64)> {
    check_sigma2(sigma2)?;
    spec.validate()?;
    Ok(golden_max(
        |mu| observed_loglik_1d(mu, sigma2, outcomes, spec).unwrap_or(f64::NEG_INFINITY),
        MU_BOUNDS.0,
        MU_BOUNDS.1,
        GOLDEN_TOL,
    ))
}

/// Maximizes the one-edge observed likelihood over μ ∈ [−5, 5] and
/// log σ² ∈ [−10, 5] by nested golden-section search (σ² outer, μ profiled).
pub fn mle_1d(outcomes: &[SubjectOutcome], spec: &QuadratureSpec) -> Result<Mle1d> {
    spec.validate()?;
    if outcomes.is_empty() {
        return Err(Error::validation("no subjects"));
    }
    let profile = |s: f64| {
        mle_mu_given_sigma2(s.exp(), outcomes, spec)
            .map(|(_, ll)| ll)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let (s, _) = golden_max(profile, LOG_SIGMA2_BOUNDS.0, LOG_SIGMA2_BOUNDS.1, 1e-9);
    let sigma2 = s.exp();
    let (mu, loglik) = mle_mu_given_sigma2(sigma2, outcomes, spec)?;
    let edge = 1e-6;
    let at_boundary = (mu - MU_BOUNDS.0).abs() < edge
        || (mu - MU_BOUNDS.1).abs() < edge
        || (s - LOG_SIGMA2_BOUNDS.0).abs() < edge
        || (s - LOG_SIGMA2_BOUNDS.1).abs() < edge;
    Ok(Mle1d {
        mu,
        sigma2,
        icc: sigma2 / (sigma2 + 1.0),
        loglik,
        at_boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per dimension; must be odd so that the half-resolution grid is nested.
    pub n_points: usize,
    /// Half-width in whitened prior standard deviations.
    pub halfwidth: f64,
    /// Largest tolerated disagreement between the grid and its half-resolution version.
    pub tolerance: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_points: 161,
            halfwidth: 8.0,
            tolerance: 1e-4,
        }
    }
}

/// Exact posterior moments of one subject's latents given its graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMoments {
    pub e_y: Vec<DVector<f64>>,
    pub e_ysum: DVector<f64>,
    pub e_ysum_outer: DMatrix<f64>,
    pub e_x: DVector<f64>,
    pub e_xx: DMatrix<f64>,
}

impl BruteMoments {
    /// The latent-sum moments in the shape produced by the Gibbs sampler.
    pub fn as_subject_moments(&self) -> SubjectMoments {
        SubjectMoments {
            e_y: self.e_y.clone(),
            e_ysum: self.e_ysum.clone(),
            e_ysum_outer: self.e_ysum_outer.clone(),
            n_draws: 0,
        }
    }

    fn max_abs_diff(&self, other: &BruteMoments) -> f64 {
        let mut m = linalg::max_abs_diff(&self.e_ysum_outer, &other.e_ysum_outer)
            .max(linalg::max_abs_diff(&self.e_xx, &other.e_xx))
            .max((&self.e_x - &other.e_x).amax());
        for (a, b) in self.e_y.iter().zip(&other.e_y) {
            m = m.max((a - b).amax());
        }
        m
    }
}

fn grid_moments(
    obs: &SubjectGraphs,
    params: &ModelParams,
    n: usize,
    halfwidth: f64,
) -> Result<BruteMoments> {
    let d = params.n_edges();
    let nv = obs.n_visits();
    let chol = linalg::spd_cholesky(params.sigma_x(), "sigma_x")?;
    let l = chol.l();
    let mu = params.mu();
    let h = 2.0 * halfwidth / (n - 1) as f64;
    let coords: Vec<f64> = (0..n).map(|k| -halfwidth + k as f64 * h).collect();
    let trap = |k: usize| if k == 0 || k == n - 1 { 0.5f64 } else { 1.0 };

    // Enumerate grid points as multi-indices over d dimensions.
    let total = n.pow(d as u32);
    let mut log_w = Vec::with_capacity(total);
    let mut xs = Vec::with_capacity(total);
    for flat in 0..total {
        let mut idx = flat;
        let mut z = DVector::zeros(d);
        let mut lw = 0.0;
        for k in 0..d {
            let c = idx % n;
            idx /= n;
            z[k] = coords[c];
            lw += normal::ln_pdf(coords[c]) + trap(c).ln();
        }
        let x = &l * &z;
        for v in &obs.visits {
            for k in 0..d {
                let eta = mu[k] + x[k];
                lw += if v[k] {
                    normal::ln_cdf(eta)
                } else {
                    normal::ln_cdf(-eta)
                };
            }
        }
        log_w.push(lw);
        xs.push(x);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z_norm = 0.0;
    let mut e_x = DVector::zeros(d);
    let mut e_xx = DMatrix::zeros(d, d);
    let mut e_y = vec![DVector::zeros(d); nv];
    let mut e_ysum_outer = DMatrix::zeros(d, d);
    for (lw, x) in log_w.iter().zip(&xs) {
        let w = (lw - max).exp();
        z_norm += w;
        e_x += x * w;
        e_xx += x * x.transpose() * w;
        let mut msum = DVector::<f64>::zeros(d);
        let mut vsum = DVector::<f64>::zeros(d);
        for (j, v) in obs.visits.iter().enumerate() {
            for k in 0..d {
                let (m, var) = normal::truncated_unit_moments(mu[k] + x[k], v[k]);
                e_y[j][k] += w * m;
                msum[k] += m;
                vsum[k] += var;
            }
        }
        e_ysum_outer += (&msum * msum.transpose() + DMatrix::from_diagonal(&vsum)) * w;
    }
    e_x /= z_norm;
    e_xx /= z_norm;
    e_ysum_outer /= z_norm;
    for v in e_y.iter_mut() {
        *v /= z_norm;
    }
    let e_ysum = e_y.iter().fold(DVector::zeros(d), |acc, v| acc + v);
    Ok(BruteMoments {
        e_y,
        e_ysum,
        e_ysum_outer: linalg::symmetrize(&e_ysum_outer),
        e_x,
        e_xx: linalg::symmetrize(&e_xx),
    })
}

/// Posterior moments of `(x_i, y_i)` given one subject's graphs, for D ≤ 2.
///
/// The random effect is integrated on a dense trapezoid grid in whitened
/// coordinates; given `x`, each `y_ij(d)` is an independent truncated normal
/// whose first two moments are known in closed form. The grid result is
/// checked against the nested half-resolution grid.
pub fn brute_moments_2d(
    obs: &SubjectGraphs,
    params: &ModelParams,
    grid: &GridSpec,
) -> Result<BruteMoments> {
    let d = params.n_edges();
    if d > 2 {
        return Err(Error::domain(format!(
            "dense-grid moments need D <= 2, got D = {d}"
        )));
    }
    if grid.n_points < 5 || grid.n_points.is_multiple_of(2) {
        return Err(Error::validation(
            "grid needs an odd number (>= 5) of points",
        ));
    }
    if obs.visits.iter().any(|v| v.len() != d) {
        return Err(Error::validation("observation length differs from D"));
    }
    let fine = grid_moments(obs, params, grid.n_points, grid.halfwidth)?;
    let coarse = grid_moments(obs, params, grid.n_points.div_ceil(2), grid.halfwidth)?;
    let gap = fine.max_abs_diff(&coarse);
    if gap > grid.tolerance {
        return Err(Error::domain(format!(
            "integration grid too coarse: halving the resolution moves the moments by {gap:.3e}"
        )));
    }
    Ok(fine)
}

//! Data-augmented Gibbs sampling of the latent Gaussians given binary graphs.
//!
//! For one subject the chain alternates two exact conditional draws:
//!
//! * `x | y`: multivariate normal with covariance `A = (J·I + Σ_x⁻¹)⁻¹` and
//!   mean `A (y_· − J μ)`;
//! * `y | x, o`: independent unit-variance normals centred at `μ + x`,
//!   truncated to `(0, ∞)` where `o = 1` and to `(−∞, 0]` where `o = 0`.
//!
//! The retained `y` draws feed the Monte Carlo moments consumed by the E-step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelParams, SubjectGraphs};
use crate::normal;

/// Standardized truncation point beyond which the exponential-rejection
/// sampler replaces inverse-CDF sampling.
const TAIL_SWITCH: f64 = 4.0;

/// Which half-line a truncated draw is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `(0, ∞)`, the support of `y` when `o = 1`.
    Positive,
    /// `(−∞, 0]`, the support of `y` when `o = 0`.
    NonPositive,
}

impl Side {
    pub fn of(observed: bool) -> Self {
        if observed {
            Side::Positive
        } else {
            Side::NonPositive
        }
    }

    pub fn contains(self, y: f64) -> bool {
        match self {
            Side::Positive => y > 0.0,
            Side::NonPositive => y <= 0.0,
        }
    }
}

/// How random streams are assigned to Gibbs chains across EM iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamSchedule {
    /// Each subject reuses the same stream at every EM iteration (common
    /// random numbers), so the Monte Carlo EM map is a fixed function of the
    /// parameters and the iteration can settle.
    #[default]
    Common,
    /// A fresh stream for every (subject, iteration) pair.
    PerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Discarded sweeps `T`.
    pub burn_in: usize,
    /// Retained sweeps `B`.
    pub n_samples: usize,
    pub seed: u64,
    pub streams: StreamSchedule,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            burn_in: 200,
            n_samples: 500,
            seed: 0,
            streams: StreamSchedule::default(),
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::validation(
                "number of retained Gibbs samples must be positive",
            ));
        }
        Ok(())
    }
}

/// Purpose tags keeping the substreams of different consumers disjoint.
pub(crate) mod purpose {
    pub const E_STEP: u64 = 1;
    pub const LOUIS: u64 = 2;
    pub const SIMULATE: u64 = 3;
    pub const REPLICATE: u64 = 4;
}

/// Deterministic RNG keyed by `(seed, purpose, a, b)`.
///
/// Streams with different keys are independent for practical purposes, so
/// work can be split across threads without changing results.
pub fn substream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// One draw from `N(mean, sd²)` restricted to `side`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    side: Side,
    rng: &mut R,
) -> Result<f64> {
    if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(Error::domain(format!(
            "truncated normal needs finite mean and sd > 0 (mean {mean}, sd {sd})"
        )));
    }
    Ok(truncated_draw(mean, sd, side, rng))
}

#[inline]
fn truncated_draw<R: Rng + ?Sized>(mean: f64, sd: f64, side: Side, rng: &mut R) -> f64 {
    match side {
        Side::Positive => {
            let z = std_upper_tail(-mean / sd, rng);
            let y = mean + sd * z;
            // rounding can land on the boundary
            if y > 0.0 {
                y
            } else {
                f64::MIN_POSITIVE
            }
        }
        Side::NonPositive => {
            let z = std_upper_tail(mean / sd, rng);
            (mean - sd * z).min(0.0)
        }
    }
}

/// Standard normal conditioned on `z > a`.
#[inline]
fn std_upper_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= TAIL_SWITCH {
        // z = −Φ⁻¹(u·Φ(−a)), u ∈ (0, 1]
        let u = 1.0 - rng.random::<f64>();
        -normal::quantile(u * normal::sf(a))
    } else {
        // Robert (1995): translated exponential proposal with optimal rate.
        let rate = 0.5 * (a + (a * a + 4.0).sqrt());
        let exp = Exp::new(rate).expect("positive rate");
        loop {
            let z = a + exp.sample(rng);
            let accept = (-0.5 * (z - rate) * (z - rate)).exp();
            if rng.random::<f64>() <= accept {
                return z;
            }
        }
    }
}

/// Precision-side factor of the posterior of `x` given `J` summed visits:
/// `A = (J·I + Σ_x⁻¹)⁻¹ = (J·Σ_x + I)⁻¹ Σ_x` and its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct PosteriorFactor {
    n_visits: usize,
    cov: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl PosteriorFactor {
    pub fn new(sigma_x: &DMatrix<f64>, n_visits: usize) -> Result<Self> {
        let d = sigma_x.nrows();
        // Validates Σ_x; its factor is otherwise unused.
        linalg::spd_cholesky(sigma_x, "sigma_x")?;
        let mut m = sigma_x * n_visits as f64;
        for k in 0..d {
            m[(k, k)] += 1.0;
        }
        let chol_m = linalg::spd_cholesky(&m, "J*sigma_x + I")?;
        let cov = linalg::symmetrize(&chol_m.solve(sigma_x));
        let chol_lower = linalg::spd_cholesky(&cov, "posterior covariance of x")?.unpack();
        Ok(PosteriorFactor {
            n_visits,
            cov,
            chol_lower,
        })
    }

    pub fn n_visits(&self) -> usize {
        self.n_visits
    }

    /// The matrix `A`.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `A (y_sum − J μ)`.
    pub fn mean(&self, y_sum: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        &self.cov * (y_sum - mu * self.n_visits as f64)
    }
}

/// Posterior mean and covariance of `x_i` given its visits' latent sum.
pub fn posterior_x_moments(
    y_sum: &DVector<f64>,
    n_visits: usize,
    params: &ModelParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y_sum.len() != params.n_edges() {
        return Err(Error::validation("y_sum length differs from D"));
    }
    let f = PosteriorFactor::new(params.sigma_x(), n_visits)?;
    Ok((f.mean(y_sum, params.mu()), f.cov))
}

/// A single subject's Gibbs chain over `(x, y)`.
pub struct GibbsChain<'a> {
    obs: &'a SubjectGraphs,
    mu: &'a [f64],
    factor: &'a PosteriorFactor,
    x: Vec<f64>,
    y: Vec<Vec<f64>>,
    resid: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> GibbsChain<'a> {
    /// Starts at `x = 0` and `y(d) = ±max(|μ(d)|, 0.5)` on the observed side.
    pub fn new(obs: &'a SubjectGraphs, mu: &'a DVector<f64>, factor: &'a PosteriorFactor) -> Self {
        assert_eq!(
            obs.n_visits(),
            factor.n_visits(),
            "factor built for another J"
        );
        let mu = mu.as_slice();
        let d = mu.len();
        let y = obs
            .visits
            .iter()
            .map(|o| {
                o.iter()
                    .zip(mu)
                    .map(|(&o, &m)| {
                        let mag = m.abs().max(0.5);
                        if o {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect()
            })
            .collect();
        GibbsChain {
            obs,
            mu,
            factor,
            x: vec![0.0; d],
            y,
            resid: vec![0.0; d],
            noise: vec![0.0; d],
        }
    }

    /// One sweep: draw `x | y`, then every `y_j(d) | x, o`.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let d = self.mu.len();
        let j = self.y.len() as f64;
        for k in 0..d {
            let s: f64 = self.y.iter().map(|y| y[k]).sum();
            self.resid[k] = s - j * self.mu[k];
        }
        for z in self.noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        let a = &self.factor.cov;
        let l = &self.factor.chol_lower;
        for r in 0..d {
            let mut v = 0.0;
            for c in 0..d {
                v += a[(r, c)] * self.resid[c];
            }
            for c in 0..=r {
                v += l[(r, c)] * self.noise[c];
            }
            self.x[r] = v;
        }
        for (y, o) in self.y.iter_mut().zip(&self.obs.visits) {
            for k in 0..d {
                y[k] = truncated_draw(self.mu[k] + self.x[k], 1.0, Side::of(o[k]), rng);
            }
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[Vec<f64>] {
        &self.y
    }
}

/// Monte Carlo conditional moments of one subject's latent Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMoments {
    /// Ê[y_ij | o] per visit.
    pub e_y: Vec<DVector<f64>>,
    /// Ê[y_i· | o].
    pub e_ysum: DVector<f64>,
    /// Ê[y_i· y_i·ᵀ | o].
    pub e_ysum_outer: DMatrix<f64>,
    pub n_draws: usize,
}

impl SubjectMoments {
    /// Ê[(y_i· − J μ)(y_i· − J μ)ᵀ | o].
    pub fn centered_outer(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let shift = mu * self.e_y.len() as f64;
        &self.e_ysum_outer - &self.e_ysum * shift.transpose() - &shift * self.e_ysum.transpose()
            + &shift * shift.transpose()
    }

    /// Ĉov[y_i· | o].
    pub fn ysum_cov(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.e_ysum_outer - &self.e_ysum * self.e_ysum.transpose()))
    }
}

/// Runs a fresh chain for one subject, discarding `burn_in` sweeps and
/// averaging the next `n_samples`.
pub fn subject_conditional_moments<R: Rng + ?Sized>(
    obs: &SubjectGraphs,
    params: &ModelParams,
    config: &GibbsConfig,
    rng: &mut R,
) -> Result<SubjectMoments> {
    config.validate()?;
    let factor = PosteriorFactor::new(params.sigma_x(), obs.n_visits())?;
    Ok(moments_with_factor(obs, params.mu(), &factor, config, rng))
}

pub(crate) fn moments_with_factor<R: Rng + ?Sized>(
    obs: &SubjectGraphs,
    mu: &DVector<f64>,
    factor: &PosteriorFactor,
    config: &GibbsConfig,
    rng: &mut R,
) -> SubjectMoments {
    let d = mu.len();
    let nv = obs.n_visits();
    let mut chain = GibbsChain::new(obs, mu, factor);
    for _ in 0..config.burn_in {
        chain.sweep(rng);
    }
    let mut sum_y = vec![vec![0.0; d]; nv];
    let mut sum_outer = vec![0.0; d * d];
    let mut ysum = vec![0.0; d];
    for _ in 0..config.n_samples {
        chain.sweep(rng);
        ysum.iter_mut().for_each(|v| *v = 0.0);
        for (acc, y) in sum_y.iter_mut().zip(chain.y()) {
            for k in 0..d {
                acc[k] += y[k];
                ysum[k] += y[k];
            }
        }
        for r in 0..d {
            for c in 0..=r {
                sum_outer[r * d + c] += ysum[r] * ysum[c];
            }
        }
    }
    let b = config.n_samples as f64;
    let e_y: Vec<DVector<f64>> = sum_y
        .into_iter()
        .map(|v| DVector::from_vec(v) / b)
        .collect();
    let mut e_ysum = DVector::zeros(d);
    for v in &e_y {
        e_ysum += v;
    }
    let e_ysum_outer = DMatrix::from_fn(d, d, |r, c| {
        let (r, c) = if c > r { (c, r) } else { (r, c) };
        sum_outer[r * d + c] / b
    });
    SubjectMoments {
        e_y,
        e_ysum,
        e_ysum_outer,
        n_draws: config.n_samples,
    }
}

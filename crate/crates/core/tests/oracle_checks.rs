use gicc::mcem::{m_step, subject_stats, SufficientStats};
use gicc::normal;
use gicc::oracle::{self, GridSpec, QuadratureSpec};
use gicc::sampler::PosteriorFactor;
use gicc::simulate::{generate_dataset, SimSettings};
use gicc::{BinaryGraphDataset, ModelParams};
use nalgebra::{DMatrix, DVector};

fn one_edge(subjects: usize, visits: usize, sigma2: f64, seed: u64) -> BinaryGraphDataset {
    let settings = SimSettings {
        n_subjects: subjects,
        n_visits: visits,
        n_nodes: 2,
        mu_value: 0.5,
        r: sigma2,
        rho: 0.0,
        replicates: 1,
        seed,
    };
    generate_dataset(&settings, 0).unwrap().0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn quadrature_mle_is_consistent() {
    let spec = QuadratureSpec::default();
    let fits: Vec<_> = (0..3)
        .map(|seed| {
            let data = one_edge(2000, 4, 2.0, seed);
            oracle::mle_1d(&oracle::outcomes_1d(&data).unwrap(), &spec).unwrap()
        })
        .collect();
    assert!(fits.iter().all(|f| !f.at_boundary));
    let s2 = median(fits.iter().map(|f| f.sigma2).collect());
    let icc = median(fits.iter().map(|f| f.icc).collect());
    assert!((s2 - 2.0).abs() < 0.15, "sigma2 {s2}");
    assert!((icc - 2.0 / 3.0).abs() < 0.03, "icc {icc}");
}

#[test]
fn iid_data_recovers_probit_frequency() {
    let data = one_edge(500, 4, 1e-12, 9);
    let outcomes = oracle::outcomes_1d(&data).unwrap();
    let p = data.edge_frequencies()[0];
    let (mu, _) = oracle::mle_mu_given_sigma2(1e-8, &outcomes, &QuadratureSpec::default()).unwrap();
    assert!(
        (mu - normal::quantile(p)).abs() < 1e-3,
        "{mu} vs {}",
        normal::quantile(p)
    );
}

#[test]
fn small_random_effect_gives_probit_information() {
    let data = one_edge(80, 3, 1e-12, 4);
    let outcomes = oracle::outcomes_1d(&data).unwrap();
    let spec = QuadratureSpec::default();
    let h = 1e-3;
    let f = |m: f64| oracle::observed_loglik_1d(m, 1e-8, &outcomes, &spec).unwrap();
    let hess = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
    let target = data.total_visits() as f64 * 2.0 / std::f64::consts::PI;
    assert!((-hess / target - 1.0).abs() < 1e-4, "{} vs {target}", -hess);
}

/// One EM step with the E-step moments integrated exactly.
fn exact_em_step(data: &BinaryGraphDataset, params: &ModelParams) -> ModelParams {
    let grid = GridSpec::default();
    let mut ex = Vec::new();
    let mut exx = Vec::new();
    let mut resid_sum = DVector::zeros(1);
    for obs in data.subjects() {
        let m = oracle::brute_moments_2d(obs, params, &grid).unwrap();
        let factor = PosteriorFactor::new(params.sigma_x(), obs.n_visits()).unwrap();
        let (x, xx) = subject_stats(&m.as_subject_moments(), &factor, params.mu());
        resid_sum += &m.e_ysum - &x * obs.n_visits() as f64;
        ex.push(x);
        exx.push(xx);
    }
    let stats = SufficientStats {
        ex,
        exx,
        resid_sum,
        total_visits: data.total_visits(),
    };
    m_step(&stats, 0.0).unwrap()
}

#[test]
fn exact_em_never_decreases_likelihood() {
    let data = one_edge(60, 3, 1.5, 21);
    let outcomes = oracle::outcomes_1d(&data).unwrap();
    let spec = QuadratureSpec::default();
    let loglik = |p: &ModelParams| {
        oracle::observed_loglik_1d(p.mu()[0], p.sigma_x()[(0, 0)], &outcomes, &spec).unwrap()
    };
    let mut params = ModelParams::new(
        DVector::from_element(1, -0.5),
        DMatrix::from_element(1, 1, 0.2),
    )
    .unwrap();
    let mut prev = loglik(&params);
    for _ in 0..25 {
        params = exact_em_step(&data, &params);
        let next = loglik(&params);
        assert!(next >= prev - 1e-8, "loglik fell from {prev} to {next}");
        prev = next;
    }
    let mle = oracle::mle_1d(&outcomes, &spec).unwrap();
    assert!(prev <= mle.loglik + 1e-8);
}

use gicc_wasm_demo::{
    simulate_and_fit_json, threshold_sweep_json, truncated_normal_histogram_json,
};
use serde_json::Value;

#[test]
fn fit_reports_estimate_and_truth() {
    let out = simulate_and_fit_json(30, 2, 3, 2.0, 0.8, 40, 10, 3).unwrap();
    let v: Value = serde_json::from_str(&out).unwrap();
    let g = v["gicc"].as_f64().unwrap();
    assert!(g > 0.0 && g < 1.0);
    assert!((v["true_gicc"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["sigma_diag"].as_array().unwrap().len(), 3);
    assert_eq!(
        v["trajectory"].as_array().unwrap().len() as u64,
        v["iterations"].as_u64().unwrap()
    );
    assert_eq!(
        out,
        simulate_and_fit_json(30, 2, 3, 2.0, 0.8, 40, 10, 3).unwrap()
    );
}

#[test]
fn fit_rejects_bad_settings() {
    assert!(simulate_and_fit_json(30, 2, 3, 2.0, 1.0, 40, 10, 3).is_err());
    assert!(simulate_and_fit_json(30, 2, 3, 2.0, 0.5, 0, 10, 3).is_err());
}

#[test]
fn histogram_counts_every_draw() {
    let v: Value =
        serde_json::from_str(&truncated_normal_histogram_json(0.0, true, 5000, 20, 1).unwrap())
            .unwrap();
    let total: u64 = v["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 5000);
    assert_eq!(v["edges"].as_array().unwrap().len(), 21);
    assert!(v["edges"][0].as_f64().unwrap() > 0.0);
    let exact = v["exact_mean"].as_f64().unwrap();
    assert!((exact - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    assert!((v["mean"].as_f64().unwrap() - exact).abs() < 0.05);
    assert!(truncated_normal_histogram_json(0.0, true, 0, 20, 1).is_err());
}

#[test]
fn sweep_curve_shape() {
    let v: Value =
        serde_json::from_str(&threshold_sweep_json(10, 0.2, 0.35, 20, 2).unwrap()).unwrap();
    let t: Vec<f64> = v["thresholds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(t, vec![0.1, 0.45, 0.8]);
    assert_eq!(v["gicc"].as_array().unwrap().len(), 3);
}

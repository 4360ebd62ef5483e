use gicc::ingest::{self, RawFormat};
use gicc::mcem::FitConfig;
use gicc::sampler::GibbsConfig;
use gicc::simulate::{self, generate_raw_dataset, RawSimSettings, SimSettings};

fn quick_config(seed: u64) -> FitConfig {
    FitConfig {
        gibbs: GibbsConfig {
            burn_in: 10,
            n_samples: 20,
            seed,
            ..GibbsConfig::default()
        },
        max_iter: 4,
        ..FitConfig::default()
    }
}

#[test]
fn raw_files_round_trip_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let raw = generate_raw_dataset(&RawSimSettings {
        n_subjects: 20,
        n_nodes: 7,
        seed: 3,
        ..RawSimSettings::default()
    })
    .unwrap();
    for name in ["a.csv", "a.json"] {
        let first = dir.path().join(name);
        let second = dir.path().join(format!("b_{name}"));
        ingest::save_raw(&raw, &first, None).unwrap();
        let back = ingest::load_raw(&first, None).unwrap();
        assert_eq!(back, raw);
        assert_eq!(back.n_subjects(), 20);
        assert_eq!(back.shape().n_edges(), 21);
        ingest::save_raw(&back, &second, None).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }
    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 * 2 * 21);
    // explicit format overrides the extension
    let odd = dir.path().join("graphs.txt");
    ingest::save_raw(&raw, &odd, Some(RawFormat::MatrixJson)).unwrap();
    assert!(ingest::load_raw(&odd, None).is_err());
    assert_eq!(
        ingest::load_raw(&odd, Some(RawFormat::MatrixJson)).unwrap(),
        raw
    );
}

#[test]
fn binary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = simulate::generate_dataset(
        &SimSettings {
            n_subjects: 12,
            ..SimSettings::default()
        },
        0,
    )
    .unwrap();
    let path = dir.path().join("bin.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    ingest::write_binary_csv(&data, &mut f).unwrap();
    drop(f);
    assert_eq!(ingest::load_binary(&path).unwrap(), data);
}

#[test]
fn missing_file_is_an_io_error() {
    let e = ingest::load_raw(std::path::Path::new("/nonexistent/graphs.csv"), None).unwrap_err();
    assert!(matches!(e, gicc::Error::Io(_)));
}

#[test]
fn sweep_grid_and_determinism() {
    let raw = generate_raw_dataset(&RawSimSettings {
        n_subjects: 6,
        n_nodes: 3,
        seed: 1,
        ..RawSimSettings::default()
    })
    .unwrap();
    let a = ingest::threshold_sweep(&raw, 0.1, 0.8, 0.01, &quick_config(5)).unwrap();
    assert_eq!(a.thresholds.len(), 71);
    assert_eq!(a.giccs.len(), 71);
    assert!(a.thresholds.windows(2).all(|w| w[0] < w[1]));
    let b = ingest::threshold_sweep(&raw, 0.1, 0.8, 0.01, &quick_config(5)).unwrap();
    assert_eq!(a, b);
    assert!(ingest::threshold_sweep(&raw, 0.5, 0.4, 0.01, &quick_config(5)).is_err());
    assert!(ingest::threshold_sweep(&raw, 0.1, 0.4, 0.0, &quick_config(5)).is_err());
}

#[test]
fn structureless_graphs_have_small_gicc() {
    let raw = generate_raw_dataset(&RawSimSettings {
        n_subjects: 80,
        n_nodes: 3,
        contamination: 1.0,
        seed: 2,
        ..RawSimSettings::default()
    })
    .unwrap();
    let config = FitConfig {
        gibbs: GibbsConfig {
            burn_in: 100,
            n_samples: 200,
            seed: 1,
            ..GibbsConfig::default()
        },
        ..FitConfig::default()
    };
    let sweep = ingest::threshold_sweep(&raw, -0.4, 0.4, 0.4, &config).unwrap();
    // Σ_x = 0 is on the boundary, where EM creeps; the estimate stays slightly positive.
    for (t, g) in sweep.thresholds.iter().zip(&sweep.giccs) {
        let g = g.unwrap();
        assert!(g < 0.2, "threshold {t}: gicc {g}");
    }
}

#[test]
fn study_outputs_are_reproducible() {
    let settings = [SimSettings {
        n_subjects: 15,
        n_nodes: 3,
        replicates: 3,
        seed: 8,
        ..SimSettings::default()
    }];
    let run = || {
        let s = simulate::run_study(&settings, &quick_config(0)).unwrap();
        let mut summary = Vec::new();
        simulate::write_summary_csv(&s, &mut summary).unwrap();
        let mut reps = Vec::new();
        simulate::write_replicates_csv(&s, &mut reps).unwrap();
        (s, summary, reps)
    };
    let (s1, a1, b1) = run();
    let (_, a2, b2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(s1[0].replicates.len(), 3);
    let text = String::from_utf8(a1).unwrap();
    let header = text.lines().next().unwrap();
    assert!(
        header.ends_with("sigma_1_1,sigma_2_2,sigma_3_3,gicc"),
        "{header}"
    );
    assert_eq!(text.lines().count(), 3);
}

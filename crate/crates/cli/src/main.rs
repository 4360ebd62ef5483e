use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gicc::ingest::{self, RawFormat};
use gicc::mcem::{self, FitConfig};
use gicc::oracle::{self, QuadratureSpec};
use gicc::sampler::{GibbsConfig, StreamSchedule};
use gicc::simulate::{self, RawSimSettings, SimSettings};
use gicc::BinaryGraphDataset;

mod report;

/// Graphical ICC for repeated binary graphs, fitted by Monte Carlo EM.
#[derive(Debug, Parser)]
#[command(name = "gicc", version, propagate_version = true)]
struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true, env = "GICC_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only print errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit μ and Σ_x to one dataset and report the GICC.
    Fit(FitArgs),
    /// Run the replicated simulation study.
    Simulate(SimulateArgs),
    /// Dichotomize raw graphs over a grid of thresholds and fit each one.
    Sweep(SweepArgs),
    /// Exact one-edge likelihood and MLE by quadrature (D = 1 only).
    Oracle(OracleArgs),
    /// Write a synthetic dataset to disk.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Streams {
    /// Reuse the same random numbers in every E-step.
    Common,
    /// Fresh random numbers in every E-step.
    PerIteration,
}

#[derive(Debug, Clone, Args)]
struct FitOptions {
    /// Seed for all random streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gibbs burn-in sweeps per subject and E-step.
    #[arg(long, default_value_t = 200)]
    burn: usize,
    /// Retained Gibbs sweeps per subject and E-step.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Maximum number of EM iterations.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Convergence tolerance on max(|Δμ|∞, ‖ΔΣ‖F / ‖Σ‖F).
    #[arg(long, default_value = "1e-3")]
    tol: f64,
    /// Ridge added to the diagonal of every Σ_x update.
    #[arg(long, default_value = "1e-8")]
    ridge: f64,
    /// Consecutive iterations below the tolerance.
    #[arg(long, default_value_t = 2)]
    patience: usize,
    /// Random-number schedule across E-steps.
    #[arg(long, value_enum, default_value_t = Streams::Common)]
    streams: Streams,
}

impl FitOptions {
    fn config(&self) -> Result<FitConfig> {
        let config = FitConfig {
            gibbs: GibbsConfig {
                burn_in: self.burn,
                n_samples: self.samples,
                seed: self.seed,
                streams: match self.streams {
                    Streams::Common => StreamSchedule::Common,
                    Streams::PerIteration => StreamSchedule::PerIteration,
                },
            },
            max_iter: self.max_iter,
            tol: self.tol,
            ridge: self.ridge,
            patience: self.patience,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    LongCsv,
    MatrixJson,
}

impl From<InputFormat> for RawFormat {
    fn from(f: InputFormat) -> Self {
        match f {
            InputFormat::LongCsv => RawFormat::LongCsv,
            InputFormat::MatrixJson => RawFormat::MatrixJson,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Binary long CSV (subject,visit,node_a,node_b,value), or raw graphs with --threshold.
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as raw graphs and dichotomize at this value (strict >).
    #[arg(long)]
    threshold: Option<f64>,
    /// Raw input format (default: from the file extension).
    #[arg(long, value_enum, requires = "threshold")]
    format: Option<InputFormat>,
    /// Output JSON file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Include the full observed information matrix for μ.
    #[arg(long)]
    full_info: bool,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Subjects per dataset.
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    /// Visits per subject.
    #[arg(long, default_value_t = 2)]
    visits: usize,
    /// Nodes per graph (D = N(N−1)/2 edges).
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    /// Common value of every μ(d).
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    mu: f64,
    /// Scale of Σ_x[i,j] = r·ρ^|i−j|.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Correlation of Σ_x[i,j] = r·ρ^|i−j|.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    rho: f64,
    /// Replicate datasets per setting.
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    /// Run the six reference settings (I ∈ {100, 200}, J ∈ {2, 4}, r ∈ {2, 4}) instead of one.
    #[arg(long)]
    reference: bool,
    /// Directory for summary.csv, summary.json and replicates.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Raw graphs: long CSV (subject,visit,node_a,node_b,value) or matrix JSON.
    #[arg(long)]
    input: PathBuf,
    /// Input format (default: from the file extension).
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    /// Smallest threshold.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    t_min: f64,
    /// Largest threshold.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    t_max: f64,
    /// Threshold spacing.
    #[arg(long, default_value_t = 0.01)]
    t_step: f64,
    /// Directory for curve.csv and sweep.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Binary long CSV with a single edge (two nodes).
    #[arg(long)]
    input: PathBuf,
    /// Evaluate the log-likelihood at this μ (requires --sigma2).
    #[arg(long, requires = "sigma2", allow_negative_numbers = true)]
    mu: Option<f64>,
    /// Evaluate the log-likelihood at this σ² (requires --mu).
    #[arg(long, requires = "mu")]
    sigma2: Option<f64>,
    /// Gauss–Hermite order.
    #[arg(long, default_value_t = 64)]
    nodes_gh: usize,
    /// Output JSON file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GenerateKind {
    /// Binary graphs from the threshold model with AR(1) Σ_x.
    Binary,
    /// Raw correlation-like graphs with a subject effect.
    Raw,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    kind: GenerateKind,
    /// Output file (.json selects matrix JSON for raw data).
    #[arg(long)]
    output: PathBuf,
    /// Subjects [default: 100 binary, 40 raw].
    #[arg(long)]
    subjects: Option<usize>,
    /// Visits per subject [default: 2].
    #[arg(long)]
    visits: Option<usize>,
    /// Nodes per graph [default: 5].
    #[arg(long)]
    nodes: Option<usize>,
    /// Binary: common μ(d).
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    mu: f64,
    /// Binary: Σ_x scale.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Binary: Σ_x correlation.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    rho: f64,
    /// Raw: between-subject s.d. on the Fisher-z scale.
    #[arg(long, default_value_t = 0.2)]
    subject_sd: f64,
    /// Raw: within-subject s.d. on the Fisher-z scale.
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    /// Raw: probability that an edge value is replaced by uniform noise on (−1, 1).
    #[arg(long, default_value_t = 0.2)]
    contamination: f64,
    /// Seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped to exit codes.
enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(k) = cli.threads {
        if k == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Generate(a) => run_generate(a),
    }
}

fn load_dataset(args: &FitArgs) -> Result<BinaryGraphDataset> {
    let data = match args.threshold {
        Some(t) => {
            if !t.is_finite() {
                bail!("--threshold must be finite");
            }
            let raw = ingest::load_raw(&args.input, args.format.map(Into::into))?;
            ingest::dichotomize(&raw, t)
        }
        None => ingest::load_binary(&args.input)?,
    };
    Ok(data)
}

fn run_fit(args: FitArgs) -> Result<Outcome> {
    let config = args.fit.config()?;
    let data = load_dataset(&args).with_context(|| format!("reading {}", args.input.display()))?;
    log::info!(
        "{} subjects, {} edges, {} graphs",
        data.n_subjects(),
        data.n_edges(),
        data.total_visits()
    );
    let result = mcem::fit(&data, &config)?;
    let doc = report::fit_document(&data, &config, &result, args.threshold, args.full_info);
    write_json(args.output.as_deref(), &doc)?;
    if result.converged {
        Ok(Outcome::Done)
    } else {
        eprintln!(
            "warning: no convergence after {} iterations; estimates are the last iterate",
            result.n_iterations
        );
        Ok(Outcome::NotConverged)
    }
}

fn run_simulate(args: SimulateArgs) -> Result<Outcome> {
    let config = args.fit.config()?;
    let settings = if args.reference {
        let mut cells = simulate::reference_settings(args.replicates, args.fit.seed);
        for s in &mut cells {
            s.n_nodes = args.nodes;
            s.mu_value = args.mu;
            s.rho = args.rho;
        }
        cells
    } else {
        vec![SimSettings {
            n_subjects: args.subjects,
            n_visits: args.visits,
            n_nodes: args.nodes,
            mu_value: args.mu,
            r: args.r,
            rho: args.rho,
            replicates: args.replicates,
            seed: args.fit.seed,
        }]
    };
    for s in &settings {
        s.validate()
            .with_context(|| format!("setting {}", s.label()))?;
    }
    let summaries = simulate::run_study(&settings, &config)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_with(&args.out_dir.join("summary.csv"), |w| {
        simulate::write_summary_csv(&summaries, w)
    })?;
    write_with(&args.out_dir.join("replicates.csv"), |w| {
        simulate::write_replicates_csv(&summaries, w)
    })?;
    write_json(
        Some(&args.out_dir.join("summary.json")),
        &report::study_document(&config, &summaries),
    )?;
    for s in &summaries {
        if s.n_nonconverged > 0 {
            log::warn!(
                "{}: {} of {} replicates did not converge and are excluded",
                s.settings.label(),
                s.n_nonconverged,
                s.n_requested
            );
        }
    }
    Ok(Outcome::Done)
}

fn run_sweep(args: SweepArgs) -> Result<Outcome> {
    let config = args.fit.config()?;
    ingest::threshold_grid(args.t_min, args.t_max, args.t_step)?;
    let raw = ingest::load_raw(&args.input, args.format.map(Into::into))
        .with_context(|| format!("reading {}", args.input.display()))?;
    let result = ingest::threshold_sweep(&raw, args.t_min, args.t_max, args.t_step, &config)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_with(&args.out_dir.join("curve.csv"), |w| result.write_csv(w))?;
    write_json(
        Some(&args.out_dir.join("sweep.json")),
        &report::sweep_document(&raw, &config, &result),
    )?;
    if result.best_threshold.is_none() {
        log::warn!("no threshold produced a converged fit");
    }
    Ok(Outcome::Done)
}

fn run_oracle(args: OracleArgs) -> Result<Outcome> {
    let spec = QuadratureSpec {
        n_nodes_gh: args.nodes_gh,
        ..QuadratureSpec::default()
    };
    spec.validate()?;
    let data = ingest::load_binary(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let outcomes = oracle::outcomes_1d(&data)?;
    let at = match (args.mu, args.sigma2) {
        (Some(mu), Some(s2)) => Some((
            mu,
            s2,
            oracle::observed_loglik_1d(mu, s2, &outcomes, &spec)?,
        )),
        _ => None,
    };
    let mle = oracle::mle_1d(&outcomes, &spec)?;
    if mle.at_boundary {
        log::warn!("likelihood maximum lies on the search boundary");
    }
    write_json(
        args.output.as_deref(),
        &report::oracle_document(&spec, &mle, at),
    )?;
    Ok(Outcome::Done)
}

fn run_generate(args: GenerateArgs) -> Result<Outcome> {
    match args.kind {
        GenerateKind::Binary => {
            let base = SimSettings::default();
            let settings = SimSettings {
                n_subjects: args.subjects.unwrap_or(base.n_subjects),
                n_visits: args.visits.unwrap_or(base.n_visits),
                n_nodes: args.nodes.unwrap_or(base.n_nodes),
                mu_value: args.mu,
                r: args.r,
                rho: args.rho,
                replicates: 1,
                seed: args.seed,
            };
            let (data, _) = simulate::generate_dataset(&settings, 0)?;
            write_with(&args.output, |w| ingest::write_binary_csv(&data, w))?;
        }
        GenerateKind::Raw => {
            let base = RawSimSettings::default();
            let settings = RawSimSettings {
                n_subjects: args.subjects.unwrap_or(base.n_subjects),
                n_visits: args.visits.unwrap_or(base.n_visits),
                n_nodes: args.nodes.unwrap_or(base.n_nodes),
                subject_sd: args.subject_sd,
                noise_sd: args.noise_sd,
                contamination: args.contamination,
                seed: args.seed,
                ..base
            };
            let raw = simulate::generate_raw_dataset(&settings)?;
            ingest::save_raw(&raw, &args.output, None)
                .with_context(|| format!("writing {}", args.output.display()))?;
        }
    }
    Ok(Outcome::Done)
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> gicc::error::Result<()>,
) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

//! Command line front end: simulate datasets, fit the estimators, and turn
//! fits into predictions, evaluation reports, coverage maps, and
//! map-matching marginals. Exit code 1 flags bad input (arguments, config,
//! or data files); exit code 2 flags a failure while running.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use arctime::budge::{fit_budge, BudgeModel};
use arctime::config::{load_config, RunConfig};
use arctime::dataset::{load_dataset, save_dataset, split_folds, Trip};
use arctime::eval::{
    coverage_map, format_metrics_table, interval_on_path, map_match_marginals, point_on_path,
    route_for, run_experiment, save_coverage_map, save_experiment_report, save_marginals,
    EvalOptions, FittedMethod, MethodEval, TestCase,
};
use arctime::local::{fit_local, load_local_fit, save_local_fit, LocalMethod};
use arctime::mcmc::{derive_seed, PosteriorSamples, Sampler};
use arctime::model::ArcParams;
use arctime::network::{save_network, RoadNetwork};
use arctime::sim::{
    build_grid_scenario, load_truth, save_truth, simulate_usable_trips, GridClassPattern,
    Regime, SamplingMode, SimTruth,
};

#[derive(Parser)]
#[command(name = "arctime", version, about = "Road network travel time estimation")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a grid network and noisy GPS trips with saved ground truth.
    Simulate(SimulateArgs),
    /// Fit one estimator on a dataset and save its artifacts.
    Fit(FitArgs),
    /// Score fitted estimators on the held-out folds.
    Evaluate(EvaluateArgs),
    /// Predict the travel time between two nodes.
    Predict(PredictArgs),
    /// Probability of reaching every node within a time budget.
    CoverageMap(CoverageMapArgs),
    /// Posterior path marginals of one trip.
    MapMatch(MapMatchArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Good,
    Bad,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ByDistance,
    ByTime,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethodArg {
    Bayes,
    Harmonic,
    Mle,
    Budge,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Bayes,
    Harmonic,
    Mle,
    Budge,
    Oracle,
}

impl MethodArg {
    fn label(self) -> &'static str {
        match self {
            MethodArg::Bayes => "bayes",
            MethodArg::Harmonic => "harmonic",
            MethodArg::Mle => "mle",
            MethodArg::Budge => "budge",
            MethodArg::Oracle => "oracle",
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 8)]
    rows: u32,
    #[arg(long, default_value_t = 8)]
    cols: u32,
    /// Block edge length in meters.
    #[arg(long, default_value_t = 250.0)]
    block_m: f64,
    /// GPS quality regime: good (dense, accurate) or bad (sparse, noisy).
    #[arg(long, value_enum, default_value_t = RegimeArg::Good)]
    regime: RegimeArg,
    /// Number of trips with at least two readings.
    #[arg(long, default_value_t = 1000)]
    trips: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::ByDistance)]
    mode: ModeArg,
    /// Reading spacing for by-distance mode; defaults to the regime's value.
    #[arg(long)]
    spacing_m: Option<f64>,
    /// Reading interval for by-time mode.
    #[arg(long, default_value_t = 30.0)]
    interval_s: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory from `simulate` (or the same file layout).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: FitMethodArg,
    /// Train on the training half of the seeded split instead of everything.
    #[arg(long)]
    split: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory with the fitted artifacts.
    #[arg(long)]
    fit: PathBuf,
    /// Methods to score, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    methods: Vec<MethodArg>,
    /// Report raw predictions without the fold bias correction.
    #[arg(long)]
    no_bias_correct: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    from: u32,
    #[arg(long)]
    to: u32,
    /// Interval level; defaults to the configured value.
    #[arg(long)]
    level: Option<f64>,
    /// Monte Carlo draws; defaults to the configured value.
    #[arg(long)]
    sims: Option<usize>,
    /// Optional CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoverageMapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    origin: u32,
    #[arg(long)]
    threshold_s: f64,
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapMatchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    trip: u64,
    #[arg(long)]
    out: PathBuf,
}

struct CliError {
    code: i32,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

fn fail_input(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 1, err: e.into() }
}

fn fail_runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 2, err: e.into() }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e.err);
        std::process::exit(e.code);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        // A second build_global in one process is harmless; the first pool
        // wins and determinism does not depend on the pool anyway.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let cfg = load_config(cli.config.as_deref()).map_err(fail_input)?;
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a, &cfg, cli.seed),
        Cmd::Fit(a) => cmd_fit(a, &cfg, cli.seed),
        Cmd::Evaluate(a) => cmd_evaluate(a, &cfg, cli.seed),
        Cmd::Predict(a) => cmd_predict(a, &cfg, cli.seed),
        Cmd::CoverageMap(a) => cmd_coverage_map(a, &cfg, cli.seed),
        Cmd::MapMatch(a) => cmd_map_match(a, &cfg),
        Cmd::Config => {
            print_out(&format!("{}\n# config hash: {}\n", cfg.to_toml(), cfg.hash()));
            Ok(())
        }
    }
}

/// Prints a large block to stdout, treating a closed pipe as a normal end
/// of output instead of a panic.
fn print_out(text: &str) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| fail_input(anyhow!("cannot create {}: {e}", dir.display())))
}

fn write_manifest_named<T: Serialize>(dir: &Path, name: &str, manifest: &T) -> CliResult<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| fail_runtime(anyhow!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(name), text)
        .map_err(|e| fail_runtime(anyhow!("writing manifest: {e}")))
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> CliResult<()> {
    write_manifest_named(dir, "manifest.toml", manifest)
}

fn load_net(dir: &Path) -> CliResult<RoadNetwork> {
    RoadNetwork::load(&dir.join("nodes.csv"), &dir.join("arcs.csv")).map_err(fail_input)
}

fn load_trips(net: &RoadNetwork, dir: &Path, cfg: &RunConfig) -> CliResult<Vec<Trip>> {
    let report = load_dataset(
        net,
        &dir.join("trips.csv"),
        &dir.join("gps.csv"),
        &cfg.data.load_options(),
    )
    .map_err(fail_input)?;
    if !report.dropped.is_empty() {
        eprintln!("screened out {} trips while loading", report.dropped.len());
    }
    if report.trips.is_empty() {
        return Err(fail_input(anyhow!("no usable trips under {}", dir.display())));
    }
    Ok(report.trips)
}

/// Ground truth sidecars are optional: present for simulated data, absent
/// otherwise.
fn maybe_truth(dir: &Path) -> CliResult<Option<SimTruth>> {
    if !dir.join("trip_truth.csv").exists() {
        return Ok(None);
    }
    load_truth(dir).map(Some).map_err(fail_input)
}

/// The path a trip is scored on: its true path when the ground truth is
/// available, otherwise the shortest-distance route between its endpoints.
fn scoring_path(
    net: &RoadNetwork,
    lengths: &[f64],
    truth: Option<&SimTruth>,
    trip: &Trip,
) -> CliResult<arctime::network::Path> {
    if let Some(t) = truth {
        if let Some((path, _)) = t.trips.get(&trip.id) {
            return Ok(path.clone());
        }
    }
    match net.shortest_path(lengths, trip.start_node, trip.end_node).map_err(fail_input)? {
        Some((p, _)) => Ok(p),
        None => Err(fail_input(anyhow!(
            "trip {}: no route from node {} to node {}",
            trip.id,
            trip.start_node,
            trip.end_node
        ))),
    }
}

fn oracle_params(net: &RoadNetwork, truth: &SimTruth) -> CliResult<Vec<ArcParams>> {
    net.arcs()
        .iter()
        .map(|a| {
            truth.arc_params.get(&a.id).copied().ok_or_else(|| {
                fail_input(anyhow!("arc {} is missing from arc_truth.csv", a.id))
            })
        })
        .collect()
}

fn load_method(
    net: &RoadNetwork,
    data_dir: &Path,
    fit_dir: &Path,
    method: MethodArg,
) -> CliResult<(String, FittedMethod)> {
    let fitted = match method {
        MethodArg::Bayes => {
            FittedMethod::bayes(PosteriorSamples::load(net, fit_dir).map_err(fail_input)?)
        }
        MethodArg::Harmonic => FittedMethod::local(
            load_local_fit(net, fit_dir, LocalMethod::Harmonic).map_err(fail_input)?,
        ),
        MethodArg::Mle => FittedMethod::local(
            load_local_fit(net, fit_dir, LocalMethod::Mle).map_err(fail_input)?,
        ),
        MethodArg::Budge => FittedMethod::budge(
            BudgeModel::load(&fit_dir.join("budge_bins.csv")).map_err(fail_input)?,
        ),
        MethodArg::Oracle => {
            let truth = maybe_truth(data_dir)?.ok_or_else(|| {
                fail_input(anyhow!("the oracle needs ground truth sidecars in the data dir"))
            })?;
            FittedMethod::oracle(oracle_params(net, &truth)?)
        }
    };
    Ok((method.label().to_string(), fitted))
}

#[derive(Serialize)]
struct SimulateManifest {
    command: String,
    seed: u64,
    rows: u32,
    cols: u32,
    block_m: f64,
    regime: String,
    mode: String,
    spacing_m: Option<f64>,
    interval_s: Option<f64>,
    trips: usize,
    readings: usize,
    outputs: Vec<String>,
}

fn cmd_simulate(a: SimulateArgs, _cfg: &RunConfig, seed: u64) -> CliResult<()> {
    if a.trips == 0 {
        return Err(fail_input(anyhow!("--trips must be positive")));
    }
    ensure_dir(&a.out_dir)?;
    let regime = match a.regime {
        RegimeArg::Good => Regime::Good,
        RegimeArg::Bad => Regime::Bad,
    };
    let (mode, spacing_m, interval_s) = match a.mode {
        ModeArg::ByDistance => {
            let spacing = a.spacing_m.unwrap_or_else(|| regime.gps_spacing_m());
            if !(spacing > 0.0) {
                return Err(fail_input(anyhow!("--spacing-m must be positive")));
            }
            (SamplingMode::ByDistance { spacing }, Some(spacing), None)
        }
        ModeArg::ByTime => {
            if !(a.interval_s > 0.0) {
                return Err(fail_input(anyhow!("--interval-s must be positive")));
            }
            (SamplingMode::ByTime { interval: a.interval_s }, None, Some(a.interval_s))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let scenario =
        build_grid_scenario(a.rows, a.cols, a.block_m, GridClassPattern::default(), regime, &mut rng)
            .map_err(fail_input)?;
    let sims = simulate_usable_trips(&scenario, a.trips, mode, &mut rng).map_err(fail_runtime)?;
    let trips: Vec<Trip> = sims.iter().map(|s| s.trip.clone()).collect();
    let readings = trips.iter().map(|t| t.readings.len()).sum();

    save_network(&scenario.net, &a.out_dir).map_err(fail_runtime)?;
    save_dataset(&trips, &a.out_dir).map_err(fail_runtime)?;
    save_truth(&scenario, &sims, &a.out_dir).map_err(fail_runtime)?;
    let manifest = SimulateManifest {
        command: "simulate".into(),
        seed,
        rows: a.rows,
        cols: a.cols,
        block_m: a.block_m,
        regime: match regime {
            Regime::Good => "good".into(),
            Regime::Bad => "bad".into(),
        },
        mode: match a.mode {
            ModeArg::ByDistance => "by-distance".into(),
            ModeArg::ByTime => "by-time".into(),
        },
        spacing_m,
        interval_s,
        trips: trips.len(),
        readings,
        outputs: vec![
            "nodes.csv".into(),
            "arcs.csv".into(),
            "trips.csv".into(),
            "gps.csv".into(),
            "trip_truth.csv".into(),
            "arc_truth.csv".into(),
        ],
    };
    write_manifest(&a.out_dir, &manifest)?;
    println!(
        "simulated {} trips ({} readings) on a {}x{} grid into {}",
        trips.len(),
        readings,
        a.rows,
        a.cols,
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitManifest {
    command: String,
    method: String,
    seed: u64,
    config_hash: String,
    trips_used: usize,
    split_training_only: bool,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampler: Option<SamplerManifest>,
}

#[derive(Serialize)]
struct SamplerManifest {
    chains: usize,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    draws: usize,
    accept_rate_path: Vec<f64>,
    accept_rate_times: Vec<f64>,
    accept_rate_sigma2: Vec<f64>,
    accept_rate_zeta2: Vec<f64>,
    skip_rate_path: Vec<f64>,
    skip_rate_times: Vec<f64>,
    final_eta2: Vec<f64>,
    final_nu2: Vec<f64>,
    psrf_mu_max: f64,
    psrf_mu_frac_le_1_2: f64,
    psrf_zeta2: f64,
}

fn cmd_fit(a: FitArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let net = load_net(&a.data)?;
    let all_trips = load_trips(&net, &a.data, cfg)?;
    let trips: Vec<Trip> = if a.split {
        let plan = split_folds(&all_trips, cfg.eval.folds_seed).map_err(fail_input)?;
        let training: std::collections::HashSet<u64> = plan.training.into_iter().collect();
        all_trips.iter().filter(|t| training.contains(&t.id)).cloned().collect()
    } else {
        all_trips
    };
    ensure_dir(&a.out_dir)?;

    let mut outputs = Vec::new();
    let mut sampler_manifest = None;
    let method_label;
    match a.method {
        FitMethodArg::Bayes => {
            method_label = "bayes";
            let sampler = Sampler::new(
                &net,
                &trips,
                cfg.hyperparams.clone(),
                cfg.data.location_cov,
                cfg.sampler.clone(),
            )
            .map_err(fail_input)?;
            let fit = sampler.fit(seed).map_err(fail_runtime)?;
            fit.samples.save(&net, &a.out_dir).map_err(fail_runtime)?;
            outputs.extend(
                ["posterior_arcs.csv", "posterior_zeta2.csv", "posterior_paths.csv"]
                    .map(String::from),
            );
            let finite_psrf: Vec<f64> =
                fit.psrf_mu.iter().filter(|(_, d)| !d).map(|(r, _)| *r).collect();
            let frac_ok = if fit.psrf_mu.is_empty() {
                f64::NAN
            } else {
                fit.psrf_mu.iter().filter(|(r, _)| *r <= 1.2).count() as f64
                    / fit.psrf_mu.len() as f64
            };
            sampler_manifest = Some(SamplerManifest {
                chains: cfg.sampler.n_chains,
                iterations: cfg.sampler.iterations,
                burn_in: cfg.sampler.burn_in,
                thin: cfg.sampler.thin,
                draws: fit.samples.len(),
                accept_rate_path: fit.chain_diags.iter().map(|d| d.accept_rate_path).collect(),
                accept_rate_times: fit.chain_diags.iter().map(|d| d.accept_rate_times).collect(),
                accept_rate_sigma2: fit
                    .chain_diags
                    .iter()
                    .map(|d| d.accept_rate_sigma2)
                    .collect(),
                accept_rate_zeta2: fit.chain_diags.iter().map(|d| d.accept_rate_zeta2).collect(),
                skip_rate_path: fit.chain_diags.iter().map(|d| d.skip_rate_path).collect(),
                skip_rate_times: fit.chain_diags.iter().map(|d| d.skip_rate_times).collect(),
                final_eta2: fit.chain_diags.iter().map(|d| d.final_eta2).collect(),
                final_nu2: fit.chain_diags.iter().map(|d| d.final_nu2).collect(),
                psrf_mu_max: finite_psrf.iter().copied().fold(f64::NAN, f64::max),
                psrf_mu_frac_le_1_2: frac_ok,
                psrf_zeta2: fit.psrf_zeta2.0,
            });
        }
        FitMethodArg::Harmonic | FitMethodArg::Mle => {
            let method = match a.method {
                FitMethodArg::Harmonic => LocalMethod::Harmonic,
                _ => LocalMethod::Mle,
            };
            method_label = match method {
                LocalMethod::Harmonic => "harmonic",
                LocalMethod::Mle => "mle",
            };
            let fit =
                fit_local(&net, &trips, method, cfg.hyperparams.speed_floor).map_err(fail_runtime)?;
            save_local_fit(&net, &fit, &a.out_dir).map_err(fail_runtime)?;
            outputs.push(format!("{}_estimates.csv", method.prefix()));
            outputs.push(format!("{}_speeds.csv", method.prefix()));
        }
        FitMethodArg::Budge => {
            method_label = "budge";
            let truth = maybe_truth(&a.data)?;
            let lengths: Vec<f64> = net.arcs().iter().map(|arc| arc.length).collect();
            let samples: Vec<(f64, f64)> = trips
                .iter()
                .map(|t| {
                    let path = scoring_path(&net, &lengths, truth.as_ref(), t)?;
                    Ok((net.path_length(&path), t.duration()))
                })
                .collect::<CliResult<_>>()?;
            let model = fit_budge(&samples, cfg.budge).map_err(fail_runtime)?;
            model.save(&a.out_dir.join("budge_bins.csv")).map_err(fail_runtime)?;
            outputs.push("budge_bins.csv".into());
        }
    }
    let manifest = FitManifest {
        command: "fit".into(),
        method: method_label.into(),
        seed,
        config_hash: cfg.hash(),
        trips_used: trips.len(),
        split_training_only: a.split,
        outputs,
        sampler: sampler_manifest,
    };
    // One directory often holds several fitted methods, so each keeps its own
    // manifest instead of overwriting a shared one.
    write_manifest_named(&a.out_dir, &format!("manifest_{method_label}.toml"), &manifest)?;
    println!("fitted {method_label} on {} trips into {}", trips.len(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateManifest {
    command: String,
    seed: u64,
    config_hash: String,
    methods: Vec<String>,
    test_trips: usize,
    bias_correct: bool,
    used_true_paths: bool,
    outputs: Vec<String>,
    metrics: Vec<MethodEval>,
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let net = load_net(&a.data)?;
    let all_trips = load_trips(&net, &a.data, cfg)?;
    let truth = maybe_truth(&a.data)?;
    let plan = split_folds(&all_trips, cfg.eval.folds_seed).map_err(fail_input)?;
    let by_id: std::collections::HashMap<u64, &Trip> =
        all_trips.iter().map(|t| (t.id, t)).collect();
    let lengths: Vec<f64> = net.arcs().iter().map(|arc| arc.length).collect();
    let mut cases = Vec::new();
    for fold in &plan.folds {
        for id in fold {
            let trip = by_id[id];
            let path = scoring_path(&net, &lengths, truth.as_ref(), trip)?;
            cases.push(TestCase { trip_id: *id, path, true_time: trip.duration() });
        }
    }

    let mut methods = Vec::new();
    for &m in &a.methods {
        if a.methods.iter().filter(|&&x| x == m).count() > 1 {
            return Err(fail_input(anyhow!("method {} is listed twice", m.label())));
        }
        methods.push(load_method(&net, &a.data, &a.fit, m)?);
    }
    ensure_dir(&a.out_dir)?;
    let opts = EvalOptions {
        n_sims: cfg.eval.interval_sims,
        level: cfg.eval.level,
        bias_correct: cfg.eval.bias_correct && !a.no_bias_correct,
        seed,
    };
    let report =
        run_experiment(&net, &methods, &cases, &plan.folds, opts).map_err(fail_runtime)?;
    save_experiment_report(&report, &a.out_dir).map_err(fail_runtime)?;
    print_out(&format_metrics_table(&report.metrics));
    let manifest = EvaluateManifest {
        command: "evaluate".into(),
        seed,
        config_hash: cfg.hash(),
        methods: a.methods.iter().map(|m| m.label().to_string()).collect(),
        test_trips: cases.len(),
        bias_correct: opts.bias_correct,
        used_true_paths: truth.is_some(),
        outputs: vec!["metrics.csv".into(), "predictions.csv".into()],
        metrics: report.metrics.clone(),
    };
    write_manifest(&a.out_dir, &manifest)?;
    Ok(())
}

fn cmd_predict(a: PredictArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let net = load_net(&a.data)?;
    net.node_index(a.from).map_err(fail_input)?;
    net.node_index(a.to).map_err(fail_input)?;
    let level = a.level.unwrap_or(cfg.eval.level);
    if !(level > 0.0 && level < 1.0) {
        return Err(fail_input(anyhow!("--level must be inside (0, 1)")));
    }
    let sims = a.sims.unwrap_or(cfg.eval.interval_sims);
    let (label, method) = load_method(&net, &a.data, &a.fit, a.method)?;
    let Some((path, _)) = route_for(&net, &method, a.from, a.to).map_err(fail_runtime)? else {
        return Err(fail_runtime(anyhow!("no route from node {} to node {}", a.from, a.to)));
    };
    let point = point_on_path(&net, &method, &path);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, a.from as u64, a.to as u64]));
    let (lo, hi) = interval_on_path(&net, &method, &path, level, sims, &mut rng);
    let distance = net.path_length(&path);
    println!("method: {label}");
    println!(
        "route: {} arcs, {:.1} m, nodes {:?}",
        path.len(),
        distance,
        net.path_nodes(&path)
    );
    println!("point estimate: {point:.1} s");
    println!("{:.0}% interval: [{lo:.1}, {hi:.1}] s", level * 100.0);
    if let Some(out) = a.out {
        let mut w = csv::Writer::from_path(&out)
            .map_err(|e| fail_runtime(anyhow!("writing {}: {e}", out.display())))?;
        let wr = |e: csv::Error| fail_runtime(anyhow!("writing {}: {e}", out.display()));
        w.write_record(["method", "from", "to", "distance_m", "level", "point_s", "lo_s", "hi_s"])
            .map_err(wr)?;
        w.write_record(&[
            label,
            a.from.to_string(),
            a.to.to_string(),
            distance.to_string(),
            level.to_string(),
            point.to_string(),
            lo.to_string(),
            hi.to_string(),
        ])
        .map_err(wr)?;
        w.flush().map_err(|e| fail_runtime(anyhow!("writing {}: {e}", out.display())))?;
    }
    Ok(())
}

fn cmd_coverage_map(a: CoverageMapArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let net = load_net(&a.data)?;
    net.node_index(a.origin).map_err(fail_input)?;
    if !(a.threshold_s > 0.0) {
        return Err(fail_input(anyhow!("--threshold-s must be positive")));
    }
    let sims = a.sims.unwrap_or(cfg.eval.coverage_sims);
    let (label, method) = load_method(&net, &a.data, &a.fit, a.method)?;
    let rows = coverage_map(&net, &method, a.origin, a.threshold_s, sims, derive_seed(seed, &[4]))
        .map_err(fail_runtime)?;
    save_coverage_map(&rows, &a.out).map_err(fail_runtime)?;
    let reachable = rows.iter().filter(|r| r.reachable).count();
    let covered = rows.iter().filter(|r| r.prob >= 0.5).count();
    println!(
        "{label}: {}/{} nodes reachable from {}, {} with coverage >= 0.5 at {:.0} s; wrote {}",
        reachable,
        rows.len(),
        a.origin,
        covered,
        a.threshold_s,
        a.out.display()
    );
    Ok(())
}

fn cmd_map_match(a: MapMatchArgs, cfg: &RunConfig) -> CliResult<()> {
    let net = load_net(&a.data)?;
    let _ = cfg;
    let samples = PosteriorSamples::load(&net, &a.fit).map_err(fail_input)?;
    let rows = map_match_marginals(&samples, a.trip).map_err(fail_input)?;
    save_marginals(&rows, &a.out).map_err(fail_runtime)?;
    println!("trip {}: {} arcs with marginal >= 0.01; wrote {}", a.trip, rows.len(), a.out.display());
    for (arc, frac) in rows.iter().take(12) {
        println!("  arc {arc}: {frac:.3}");
    }
    Ok(())
}

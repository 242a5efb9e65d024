// End-to-end checks of the command line surface: every subcommand runs
// against a small simulated dataset, artifacts land where documented, and
// bad inputs exit with the input-error code instead of panicking.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn arctime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arctime"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = arctime(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn exit_code(args: &[&str]) -> i32 {
    arctime(args).status.code().expect("exit code")
}

fn csv_header(path: &Path) -> String {
    let text = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    text.lines().next().unwrap_or_default().to_string()
}

#[test]
fn config_prints_defaults_and_honors_overrides() {
    let defaults = run_ok(&["config"]);
    assert!(defaults.contains("prior_speed_primary = 15.6"));
    assert!(defaults.contains("iterations = 50000"));
    let hash_line = defaults.lines().rev().find(|l| !l.is_empty()).unwrap().to_string();
    assert!(hash_line.starts_with("# config hash: "));

    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = dir.path().join("override.toml");
    fs::write(&cfg, "[hyperparams]\ns2 = 0.5\n").expect("config written");
    let overridden = run_ok(&["config", "--config", cfg.to_str().unwrap()]);
    assert!(overridden.contains("s2 = 0.5"));
    assert!(
        !overridden.contains(&hash_line),
        "config hash did not change with an overridden key"
    );
}

#[test]
fn full_pipeline_through_every_subcommand() {
    let base = tempfile::tempdir().expect("temp dir");
    let cfg_path = base.path().join("fast.toml");
    fs::write(
        &cfg_path,
        "[sampler]\niterations = 300\nburn_in = 150\nthin = 2\nn_chains = 2\n\
         \n[eval]\ninterval_sims = 400\ncoverage_sims = 400\n\
         \n[budge]\nn_bins = 3\nmin_per_bin = 10\n",
    )
    .expect("config written");
    let cfg = cfg_path.to_str().unwrap();
    let data = base.path().join("data");
    let fit = base.path().join("fit");
    let eval = base.path().join("eval");
    let data_s = data.to_str().unwrap();
    let fit_s = fit.to_str().unwrap();

    run_ok(&[
        "simulate", "--rows", "4", "--cols", "4", "--trips", "60", "--seed", "3", "--out-dir",
        data_s,
    ]);
    for file in
        ["nodes.csv", "arcs.csv", "trips.csv", "gps.csv", "arc_truth.csv", "trip_truth.csv"]
    {
        assert!(data.join(file).is_file(), "simulate did not write {file}");
    }

    for method in ["bayes", "harmonic", "mle", "budge"] {
        run_ok(&[
            "fit", "--data", data_s, "--method", method, "--config", cfg, "--seed", "5",
            "--out-dir", fit_s,
        ]);
        assert!(
            fit.join(format!("manifest_{method}.toml")).is_file(),
            "fit did not write the {method} manifest"
        );
    }
    assert!(fit.join("posterior_arcs.csv").is_file());
    assert!(fit.join("harmonic_estimates.csv").is_file());
    assert!(fit.join("mle_estimates.csv").is_file());
    assert!(fit.join("budge_bins.csv").is_file());

    run_ok(&[
        "evaluate", "--data", data_s, "--fit", fit_s, "--methods", "harmonic,oracle",
        "--no-bias-correct", "--config", cfg, "--out-dir", eval.to_str().unwrap(),
    ]);
    assert_eq!(
        csv_header(&eval.join("metrics.csv")),
        "method,n_trips,rmse_s,rmse_log,bias_ma,coverage_pct,geo_mean_width_s"
    );

    let pred_csv = base.path().join("pred.csv");
    let pred_out = run_ok(&[
        "predict", "--data", data_s, "--fit", fit_s, "--method", "harmonic", "--from", "0",
        "--to", "15", "--config", cfg, "--out", pred_csv.to_str().unwrap(),
    ]);
    assert!(pred_out.contains("point estimate:"), "predict output: {pred_out}");
    assert!(pred_out.contains("95% interval: ["));
    assert_eq!(
        csv_header(&pred_csv),
        "method,from,to,distance_m,level,point_s,lo_s,hi_s"
    );
    let row = fs::read_to_string(&pred_csv).unwrap().lines().nth(1).unwrap().to_string();
    let fields: Vec<f64> =
        row.split(',').skip(3).map(|v| v.parse().expect("numeric field")).collect();
    let (point, lo, hi) = (fields[2], fields[3], fields[4]);
    assert!(point > 0.0 && lo > 0.0 && lo < hi, "implausible interval in {row}");

    let cov_csv = base.path().join("cov.csv");
    run_ok(&[
        "coverage-map", "--data", data_s, "--fit", fit_s, "--method", "bayes", "--origin", "0",
        "--threshold-s", "120", "--config", cfg, "--out", cov_csv.to_str().unwrap(),
    ]);
    let cov_text = fs::read_to_string(&cov_csv).unwrap();
    let mut rows = 0;
    for line in cov_text.lines().skip(1) {
        let prob: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&prob), "probability out of range: {line}");
        rows += 1;
    }
    assert_eq!(rows, 16, "one coverage row per node");

    let first_trip = fs::read_to_string(data.join("trips.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let mm_csv = base.path().join("mm.csv");
    run_ok(&[
        "map-match", "--data", data_s, "--fit", fit_s, "--trip", &first_trip, "--out",
        mm_csv.to_str().unwrap(),
    ]);
    assert_eq!(csv_header(&mm_csv), "arc_id,fraction");
    let mm_text = fs::read_to_string(&mm_csv).unwrap();
    assert!(mm_text.lines().count() > 1, "map-match wrote no marginals");
    for line in mm_text.lines().skip(1) {
        let frac: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(frac > 0.0 && frac <= 1.0, "marginal out of range: {line}");
    }
}

#[test]
fn bad_inputs_exit_with_input_error_code() {
    let base = tempfile::tempdir().expect("temp dir");
    let data = base.path().join("data");
    let data_s = data.to_str().unwrap();
    run_ok(&[
        "simulate", "--rows", "3", "--cols", "3", "--trips", "25", "--seed", "9", "--out-dir",
        data_s,
    ]);
    let fit = base.path().join("fit");
    run_ok(&["fit", "--data", data_s, "--method", "harmonic", "--out-dir", fit.to_str().unwrap()]);

    let missing = base.path().join("nowhere");
    let missing_s = missing.to_str().unwrap();
    assert_eq!(
        exit_code(&["fit", "--data", missing_s, "--method", "harmonic", "--out-dir", missing_s]),
        1,
        "missing dataset should be an input error"
    );
    assert_eq!(
        exit_code(&[
            "predict", "--data", data_s, "--fit", fit.to_str().unwrap(), "--method", "harmonic",
            "--from", "0", "--to", "999",
        ]),
        1,
        "unknown node id should be an input error"
    );
    assert_eq!(
        exit_code(&[
            "map-match", "--data", data_s, "--fit", fit.to_str().unwrap(), "--trip", "424242",
            "--out", base.path().join("mm.csv").to_str().unwrap(),
        ]),
        1,
        "map-match needs a posterior fit and a known trip"
    );
}

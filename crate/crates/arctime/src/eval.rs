//! Prediction and evaluation on held-out trips. Every fitted method exposes
//! a point prediction and an uncertainty interval for the travel time of a
//! path, and the harness scores them with a cross-validated multiplicative
//! bias correction: each test fold is corrected with the mean log residual
//! of the other folds, so no trip corrects itself.

use std::collections::{HashMap, HashSet};
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::budge::BudgeModel;
use crate::local::{LocalFit, LocalMethod};
use crate::mcmc::{derive_seed, PosteriorSamples};
use crate::model::ArcParams;
use crate::network::{NetworkError, Path, RoadNetwork};

/// Monte Carlo draws behind an interval or coverage probability.
pub const DEFAULT_INTERVAL_SIMS: usize = 5000;
/// Central interval mass.
pub const DEFAULT_LEVEL: f64 = 0.95;
/// Map-matching marginals need at least this many stored path draws.
pub const MIN_PATH_DRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test cases")]
    EmptyCases,
    #[error("fold plan does not partition the test cases: {0}")]
    FoldMismatch(String),
    #[error("trip {0} has no stored posterior paths")]
    UnknownTrip(u64),
    #[error("need {need} stored path draws, have {have}")]
    TooFewDraws { have: usize, need: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("failed writing {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

/// A trained travel-time predictor, ready to score paths.
pub enum FittedMethod {
    /// Posterior draws from the data-augmentation sampler; the cached theta
    /// is the posterior mean expected time per arc.
    Bayes { samples: PosteriorSamples, theta: Vec<f64> },
    /// A local GPS-speed estimator with its per-arc speed samples and, for
    /// the lognormal variant, cached log-speed moments.
    Local { fit: LocalFit, log_moments: Vec<(f64, f64)> },
    /// The distance-binned t model; it only ever sees path length.
    Budge(BudgeModel),
    /// True per-arc parameters, for simulation studies.
    Oracle(Vec<ArcParams>),
}

impl FittedMethod {
    pub fn bayes(samples: PosteriorSamples) -> FittedMethod {
        let theta = samples.theta_hat();
        FittedMethod::Bayes { samples, theta }
    }

    pub fn local(fit: LocalFit) -> FittedMethod {
        let log_moments = fit
            .speeds
            .iter()
            .map(|sample| {
                let n = sample.len() as f64;
                let m = sample.iter().map(|v| v.ln()).sum::<f64>() / n;
                let s2 = sample.iter().map(|v| (v.ln() - m).powi(2)).sum::<f64>() / n;
                (m, s2)
            })
            .collect();
        FittedMethod::Local { fit, log_moments }
    }

    pub fn budge(model: BudgeModel) -> FittedMethod {
        FittedMethod::Budge(model)
    }

    pub fn oracle(params: Vec<ArcParams>) -> FittedMethod {
        FittedMethod::Oracle(params)
    }

    pub fn default_label(&self) -> &'static str {
        match self {
            FittedMethod::Bayes { .. } => "bayes",
            FittedMethod::Local { fit, .. } => match fit.method {
                LocalMethod::Harmonic => "harmonic",
                LocalMethod::Mle => "mle",
            },
            FittedMethod::Budge(_) => "budge",
            FittedMethod::Oracle(_) => "oracle",
        }
    }
}

/// Point prediction for the travel time of a known path.
pub fn point_on_path(net: &RoadNetwork, method: &FittedMethod, path: &Path) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    match method {
        FittedMethod::Bayes { theta, .. } => sum_weights(net, theta, path),
        FittedMethod::Local { fit, .. } => sum_weights(net, &fit.theta, path),
        FittedMethod::Oracle(params) => path
            .arcs()
            .iter()
            .map(|&a| params[net.arc_index(a).unwrap()].theta())
            .sum(),
        FittedMethod::Budge(model) => model.point(net.path_length(path)),
    }
}

fn sum_weights(net: &RoadNetwork, weights: &[f64], path: &Path) -> f64 {
    path.arcs().iter().map(|&a| weights[net.arc_index(a).unwrap()]).sum()
}

/// Simulated total travel times of a path under the method's uncertainty
/// model. The distance-only method is analytic and never calls this.
fn sample_sums<R: Rng>(
    net: &RoadNetwork,
    method: &FittedMethod,
    path: &Path,
    n_sims: usize,
    rng: &mut R,
) -> Vec<f64> {
    let idx: Vec<usize> =
        path.arcs().iter().map(|&a| net.arc_index(a).unwrap()).collect();
    let mut out = Vec::with_capacity(n_sims);
    match method {
        FittedMethod::Bayes { samples, .. } => {
            let d = samples.arc_draws.len();
            for s in 0..n_sims {
                let params = &samples.arc_draws[s % d];
                out.push(
                    idx.iter()
                        .map(|&j| {
                            let z: f64 = StandardNormal.sample(rng);
                            (params[j].mu + params[j].sigma2.sqrt() * z).exp()
                        })
                        .sum(),
                );
            }
        }
        FittedMethod::Oracle(params) => {
            for _ in 0..n_sims {
                out.push(
                    idx.iter()
                        .map(|&j| {
                            let z: f64 = StandardNormal.sample(rng);
                            (params[j].mu + params[j].sigma2.sqrt() * z).exp()
                        })
                        .sum(),
                );
            }
        }
        FittedMethod::Local { fit, log_moments } => {
            let lengths: Vec<f64> =
                idx.iter().map(|&j| net.arcs()[j].length).collect();
            match fit.method {
                LocalMethod::Harmonic => {
                    // Bootstrap the observed speeds: each arc contributes
                    // length over a resampled speed.
                    for _ in 0..n_sims {
                        out.push(
                            idx.iter()
                                .zip(&lengths)
                                .map(|(&j, &len)| {
                                    let sample = &fit.speeds[j];
                                    len / sample[rng.gen_range(0..sample.len())]
                                })
                                .sum(),
                        );
                    }
                }
                LocalMethod::Mle => {
                    for _ in 0..n_sims {
                        out.push(
                            idx.iter()
                                .zip(&lengths)
                                .map(|(&j, &len)| {
                                    let (m, s2) = log_moments[j];
                                    let z: f64 = StandardNormal.sample(rng);
                                    (len.ln() - m - s2.sqrt() * z).exp()
                                })
                                .sum(),
                        );
                    }
                }
            }
        }
        FittedMethod::Budge(_) => unreachable!("distance model is analytic"),
    }
    out
}

/// Central uncertainty interval for the travel time of a path.
pub fn interval_on_path<R: Rng>(
    net: &RoadNetwork,
    method: &FittedMethod,
    path: &Path,
    level: f64,
    n_sims: usize,
    rng: &mut R,
) -> (f64, f64) {
    assert!(level > 0.0 && level < 1.0, "level must be inside (0, 1)");
    if path.is_empty() {
        return (0.0, 0.0);
    }
    let tail = (1.0 - level) / 2.0;
    if let FittedMethod::Budge(model) = method {
        let d = net.path_length(path);
        return (model.quantile(d, tail), model.quantile(d, 1.0 - tail));
    }
    let mut sums = sample_sums(net, method, path, n_sims, rng);
    sums.sort_by(f64::total_cmp);
    (percentile(&sums, tail), percentile(&sums, 1.0 - tail))
}

/// Probability that the path is covered within `threshold` seconds.
pub fn prob_within<R: Rng>(
    net: &RoadNetwork,
    method: &FittedMethod,
    path: &Path,
    threshold: f64,
    n_sims: usize,
    rng: &mut R,
) -> f64 {
    if path.is_empty() {
        return if threshold >= 0.0 { 1.0 } else { 0.0 };
    }
    if let FittedMethod::Budge(model) = method {
        return model.cdf(net.path_length(path), threshold);
    }
    let sums = sample_sums(net, method, path, n_sims, rng);
    sums.iter().filter(|&&t| t <= threshold).count() as f64 / n_sims as f64
}

/// Linear-interpolation percentile of a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// The route a method would quote for an origin-destination pair: fastest
/// under its expected times, or shortest distance for the distance-only
/// method. `None` when the destination cannot be reached.
pub fn route_for(
    net: &RoadNetwork,
    method: &FittedMethod,
    start: u32,
    end: u32,
) -> Result<Option<(Path, f64)>, EvalError> {
    let weights: Vec<f64> = match method {
        FittedMethod::Bayes { theta, .. } => theta.clone(),
        FittedMethod::Local { fit, .. } => fit.theta.clone(),
        FittedMethod::Oracle(params) => params.iter().map(|p| p.theta()).collect(),
        FittedMethod::Budge(_) => net.arcs().iter().map(|a| a.length).collect(),
    };
    let Some((path, _)) = net.shortest_path(&weights, start, end)? else {
        return Ok(None);
    };
    let point = point_on_path(net, method, &path);
    Ok(Some((path, point)))
}

/// One held-out trip: its identifier, the path it actually took, and the
/// observed total travel time.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub trip_id: u64,
    pub path: Path,
    pub true_time: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_sims: usize,
    pub level: f64,
    pub bias_correct: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_sims: DEFAULT_INTERVAL_SIMS,
            level: DEFAULT_LEVEL,
            bias_correct: true,
            seed: 0,
        }
    }
}

/// Scores of one method over every test trip, after bias correction.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MethodEval {
    pub label: String,
    pub n: usize,
    pub rmse_s: f64,
    pub rmse_log: f64,
    /// Mean absolute per-fold mean log residual.
    pub bias_ma: f64,
    pub coverage_pct: f64,
    pub geo_mean_width_s: f64,
}

/// One corrected prediction, ready for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub method: String,
    pub trip_id: u64,
    pub fold: usize,
    pub true_time: f64,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Log-scale correction subtracted from this trip's predictions.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub metrics: Vec<MethodEval>,
    pub rows: Vec<PredictionRow>,
}

/// Deals sorted trip ids round-robin into folds, for callers without a
/// dataset-level plan.
pub fn deal_folds(ids: &[u64], n_folds: usize) -> Vec<Vec<u64>> {
    assert!(n_folds > 0);
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut folds = vec![Vec::new(); n_folds];
    for (i, id) in sorted.into_iter().enumerate() {
        folds[i % n_folds].push(id);
    }
    folds
}

struct RawPred {
    point: f64,
    lo: f64,
    hi: f64,
    true_time: f64,
}

/// Runs every method over every test case and scores it. The fold structure
/// drives the rotation: fold `k` is corrected by the mean log residual of
/// all other folds and scored as test data.
pub fn run_experiment(
    net: &RoadNetwork,
    methods: &[(String, FittedMethod)],
    cases: &[TestCase],
    folds: &[Vec<u64>],
    opts: EvalOptions,
) -> Result<ExperimentReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyCases);
    }
    let case_ids: HashSet<u64> = cases.iter().map(|c| c.trip_id).collect();
    if case_ids.len() != cases.len() {
        return Err(EvalError::FoldMismatch("duplicate trip ids in the cases".into()));
    }
    let mut fold_ids = HashSet::new();
    for fold in folds {
        for &id in fold {
            if !case_ids.contains(&id) {
                return Err(EvalError::FoldMismatch(format!("fold trip {id} has no case")));
            }
            if !fold_ids.insert(id) {
                return Err(EvalError::FoldMismatch(format!("trip {id} is in two folds")));
            }
        }
    }
    if fold_ids.len() != case_ids.len() {
        return Err(EvalError::FoldMismatch("some cases are missing from the folds".into()));
    }
    for case in cases {
        if case.path.is_empty() {
            return Err(EvalError::FoldMismatch(format!(
                "trip {} has an empty path",
                case.trip_id
            )));
        }
        for &a in case.path.arcs() {
            net.arc_index(a)?;
        }
    }

    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    for (mi, (label, method)) in methods.iter().enumerate() {
        let preds: HashMap<u64, RawPred> = cases
            .par_iter()
            .map(|case| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    opts.seed,
                    &[mi as u64, case.trip_id],
                ));
                let point = point_on_path(net, method, &case.path);
                let (lo, hi) =
                    interval_on_path(net, method, &case.path, opts.level, opts.n_sims, &mut rng);
                (case.trip_id, RawPred { point, lo, hi, true_time: case.true_time })
            })
            .collect();
        let (m, r) = finalize(label, &preds, folds, opts.bias_correct);
        metrics.push(m);
        rows.extend(r);
    }
    rows.sort_by(|a, b| (&a.method, a.trip_id).cmp(&(&b.method, b.trip_id)));
    Ok(ExperimentReport { metrics, rows })
}

/// Applies the rotation bias correction and aggregates the scores.
fn finalize(
    label: &str,
    preds: &HashMap<u64, RawPred>,
    folds: &[Vec<u64>],
    bias_correct: bool,
) -> (MethodEval, Vec<PredictionRow>) {
    let mut rows = Vec::new();
    let mut fold_means = Vec::new();
    for (k, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            continue;
        }
        let bias = if bias_correct {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (other, ids) in folds.iter().enumerate() {
                if other == k {
                    continue;
                }
                for id in ids {
                    let p = &preds[id];
                    sum += (p.point / p.true_time).ln();
                    n += 1;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        } else {
            0.0
        };
        let scale = (-bias).exp();
        let mut fold_residual = 0.0;
        for id in fold {
            let p = &preds[id];
            let point = p.point * scale;
            fold_residual += (point / p.true_time).ln();
            rows.push(PredictionRow {
                method: label.to_string(),
                trip_id: *id,
                fold: k,
                true_time: p.true_time,
                point,
                lo: p.lo * scale,
                hi: p.hi * scale,
                bias,
            });
        }
        fold_means.push(fold_residual / fold.len() as f64);
    }
    let n = rows.len();
    let nf = n as f64;
    let rmse_s =
        (rows.iter().map(|r| (r.point - r.true_time).powi(2)).sum::<f64>() / nf).sqrt();
    let rmse_log =
        (rows.iter().map(|r| (r.point / r.true_time).ln().powi(2)).sum::<f64>() / nf).sqrt();
    let bias_ma =
        fold_means.iter().map(|m| m.abs()).sum::<f64>() / fold_means.len().max(1) as f64;
    let covered =
        rows.iter().filter(|r| r.true_time >= r.lo && r.true_time <= r.hi).count();
    let geo_mean_width_s =
        (rows.iter().map(|r| (r.hi - r.lo).ln()).sum::<f64>() / nf).exp();
    (
        MethodEval {
            label: label.to_string(),
            n,
            rmse_s,
            rmse_log,
            bias_ma,
            coverage_pct: 100.0 * covered as f64 / nf,
            geo_mean_width_s,
        },
        rows,
    )
}

/// Coverage probability of one node under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCoverage {
    pub node_id: u32,
    pub prob: f64,
    pub reachable: bool,
}

/// Probability of reaching every node from `origin` within `threshold`
/// seconds, on the route the method itself would quote.
pub fn coverage_map(
    net: &RoadNetwork,
    method: &FittedMethod,
    origin: u32,
    threshold: f64,
    n_sims: usize,
    seed: u64,
) -> Result<Vec<NodeCoverage>, EvalError> {
    net.node_index(origin)?;
    assert!(threshold > 0.0, "threshold must be positive");
    net.nodes()
        .par_iter()
        .map(|node| {
            if node.id == origin {
                return Ok(NodeCoverage { node_id: node.id, prob: 1.0, reachable: true });
            }
            let Some((path, _)) = route_for(net, method, origin, node.id)? else {
                return Ok(NodeCoverage { node_id: node.id, prob: 0.0, reachable: false });
            };
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[node.id as u64]));
            let prob = prob_within(net, method, &path, threshold, n_sims, &mut rng);
            Ok(NodeCoverage { node_id: node.id, prob, reachable: true })
        })
        .collect()
}

/// Fraction of stored posterior path draws that traverse each arc for one
/// trip, omitting arcs below one percent. Sorted by fraction, then arc id.
pub fn map_match_marginals(
    samples: &PosteriorSamples,
    trip_id: u64,
) -> Result<Vec<(u32, f64)>, EvalError> {
    let ti = samples
        .trip_ids
        .iter()
        .position(|&t| t == trip_id)
        .ok_or(EvalError::UnknownTrip(trip_id))?;
    let d = samples.path_draws.len();
    if d < MIN_PATH_DRAWS {
        return Err(EvalError::TooFewDraws { have: d, need: MIN_PATH_DRAWS });
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for draw in &samples.path_draws {
        for &a in draw[ti].arcs() {
            *counts.entry(a).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(u32, f64)> = counts
        .into_iter()
        .map(|(a, c)| (a, c as f64 / d as f64))
        .filter(|&(_, f)| f >= 0.01)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

pub fn save_experiment_report(report: &ExperimentReport, dir: &FsPath) -> Result<(), EvalError> {
    let file = dir.join("metrics.csv");
    let io_err = |e: csv::Error, file: &FsPath| EvalError::Io {
        file: file.display().to_string(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(&file).map_err(|e| io_err(e, &file))?;
    w.write_record([
        "method",
        "n_trips",
        "rmse_s",
        "rmse_log",
        "bias_ma",
        "coverage_pct",
        "geo_mean_width_s",
    ])
    .map_err(|e| io_err(e, &file))?;
    for m in &report.metrics {
        w.write_record(&[
            m.label.clone(),
            m.n.to_string(),
            m.rmse_s.to_string(),
            m.rmse_log.to_string(),
            m.bias_ma.to_string(),
            m.coverage_pct.to_string(),
            m.geo_mean_width_s.to_string(),
        ])
        .map_err(|e| io_err(e, &file))?;
    }
    w.flush().map_err(|e| EvalError::Io { file: file.display().to_string(), source: e })?;

    let file = dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&file).map_err(|e| io_err(e, &file))?;
    w.write_record([
        "method", "trip_id", "fold", "true_time_s", "point_s", "lo_s", "hi_s", "log_bias",
    ])
    .map_err(|e| io_err(e, &file))?;
    for r in &report.rows {
        w.write_record(&[
            r.method.clone(),
            r.trip_id.to_string(),
            r.fold.to_string(),
            r.true_time.to_string(),
            r.point.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
            r.bias.to_string(),
        ])
        .map_err(|e| io_err(e, &file))?;
    }
    w.flush().map_err(|e| EvalError::Io { file: file.display().to_string(), source: e })?;
    Ok(())
}

/// Aligned text table of the per-method metrics.
pub fn format_metrics_table(metrics: &[MethodEval]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>6} {:>10} {:>10} {:>9} {:>10} {:>12}\n",
        "method", "trips", "rmse_s", "rmse_log", "bias_ma", "coverage%", "width_s"
    ));
    for m in metrics {
        out.push_str(&format!(
            "{:<10} {:>6} {:>10.2} {:>10.4} {:>9.4} {:>10.1} {:>12.2}\n",
            m.label, m.n, m.rmse_s, m.rmse_log, m.bias_ma, m.coverage_pct, m.geo_mean_width_s
        ));
    }
    out
}

pub fn save_coverage_map(rows: &[NodeCoverage], file: &FsPath) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(file).map_err(|e| EvalError::Io {
        file: file.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let wrap = |e: csv::Error| EvalError::Io {
        file: file.display().to_string(),
        source: std::io::Error::other(e),
    };
    w.write_record(["node_id", "prob", "reachable"]).map_err(wrap)?;
    for r in rows {
        w.write_record(&[r.node_id.to_string(), r.prob.to_string(), r.reachable.to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| EvalError::Io { file: file.display().to_string(), source: e })?;
    Ok(())
}

pub fn save_marginals(rows: &[(u32, f64)], file: &FsPath) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(file).map_err(|e| EvalError::Io {
        file: file.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let wrap = |e: csv::Error| EvalError::Io {
        file: file.display().to_string(),
        source: std::io::Error::other(e),
    };
    w.write_record(["arc_id", "fraction"]).map_err(wrap)?;
    for (a, f) in rows {
        w.write_record(&[a.to_string(), f.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| EvalError::Io { file: file.display().to_string(), source: e })?;
    Ok(())
}

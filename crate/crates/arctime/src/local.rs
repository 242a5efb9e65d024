//! Local per-arc baselines that estimate arc travel times directly from the
//! GPS speed readings snapped to each arc, ignoring trip structure. Two
//! variants: a harmonic-mean estimator (average of per-reading implied
//! times) and a lognormal MLE on log speeds. Opposite directions of a street
//! are pooled, and arcs with no snapped readings borrow the speed sample of
//! the nearest same-class arc that has one.

use std::collections::HashMap;
use std::path::Path as FsPath;

use serde::Deserialize;
use thiserror::Error;

use crate::dataset::Trip;
use crate::network::RoadNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMethod {
    Harmonic,
    Mle,
}

impl LocalMethod {
    pub fn prefix(&self) -> &'static str {
        match self {
            LocalMethod::Harmonic => "harmonic",
            LocalMethod::Mle => "mle",
        }
    }
}

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("no {class} arc with speed data found to impute arc {arc_id}")]
    NoDonor { arc_id: u32, class: String },
    #[error("no GPS readings snapped to any arc")]
    NoData,
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error("estimates file does not cover arc {0}")]
    MissingArc(u32),
}

/// Fitted local estimates, indexed like `net.arcs()`. `speeds` holds the
/// clamped speed sample backing each arc's estimate (the donor's sample for
/// imputed arcs), which interval prediction resamples.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub method: LocalMethod,
    pub theta: Vec<f64>,
    pub speeds: Vec<Vec<f64>>,
    pub imputed: Vec<bool>,
}

/// Snaps every GPS reading to its nearest street (both directions pooled)
/// and returns the speed sample per arc index, clamped below at
/// `speed_floor`. Both directions of a street share one sample.
pub fn collect_arc_speeds(
    net: &RoadNetwork,
    trips: &[Trip],
    speed_floor: f64,
) -> Vec<Vec<f64>> {
    let mut by_canonical: HashMap<u32, Vec<f64>> = HashMap::new();
    for trip in trips {
        for r in &trip.readings {
            let canon = net.nearest_arc(r.x, r.y);
            by_canonical
                .entry(canon)
                .or_default()
                .push(r.speed.max(speed_floor));
        }
    }
    net.arcs()
        .iter()
        .map(|a| {
            let canon = net.canonical_arc_id(a.id);
            by_canonical.get(&canon).cloned().unwrap_or_default()
        })
        .collect()
}

/// Expected time for an arc of `length` from the harmonic rule: the mean of
/// the per-reading implied times `length / v`.
pub fn harmonic_theta(length: f64, speeds: &[f64]) -> f64 {
    let inv_sum: f64 = speeds.iter().map(|v| 1.0 / v).sum();
    length * inv_sum / speeds.len() as f64
}

/// Expected time from a lognormal fit to the speeds: with `m` the mean log
/// speed and `s2` the population variance of log speeds, time is lognormal
/// with mean `exp(ln length - m + s2 / 2)`.
pub fn mle_theta(length: f64, speeds: &[f64]) -> f64 {
    let n = speeds.len() as f64;
    let m = speeds.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s2 = speeds.iter().map(|v| (v.ln() - m).powi(2)).sum::<f64>() / n;
    (length.ln() - m + 0.5 * s2).exp()
}

/// Fits one of the local estimators. Arcs with no snapped readings receive
/// the speed sample of the nearest same-class arc that has one, where
/// distance is hops in the street adjacency graph (streets are adjacent when
/// they share an endpoint) and ties go to the smallest arc id.
pub fn fit_local(
    net: &RoadNetwork,
    trips: &[Trip],
    method: LocalMethod,
    speed_floor: f64,
) -> Result<LocalFit, LocalError> {
    fit_from_speeds(net, method, collect_arc_speeds(net, trips, speed_floor))
}

/// Writes `{method}_estimates.csv` (arc_id,theta_s,n_obs,imputed) covering
/// every directed arc, plus `{method}_speeds.csv` (arc_id,speed) with the
/// snapped sample of each street's canonical arc.
pub fn save_local_fit(
    net: &RoadNetwork,
    fit: &LocalFit,
    dir: &FsPath,
) -> Result<(), std::io::Error> {
    let prefix = fit.method.prefix();
    let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_estimates.csv")))?;
    w.write_record(["arc_id", "theta_s", "n_obs", "imputed"])?;
    for (i, a) in net.arcs().iter().enumerate() {
        w.write_record(&[
            a.id.to_string(),
            fit.theta[i].to_string(),
            fit.speeds[i].len().to_string(),
            fit.imputed[i].to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_speeds.csv")))?;
    w.write_record(["arc_id", "speed"])?;
    for (i, a) in net.arcs().iter().enumerate() {
        if net.canonical_arc_id(a.id) == a.id && !fit.imputed[i] {
            for v in &fit.speeds[i] {
                w.write_record(&[a.id.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_local_fit(
    net: &RoadNetwork,
    dir: &FsPath,
    method: LocalMethod,
) -> Result<LocalFit, LocalError> {
    #[derive(Deserialize)]
    struct EstRow {
        arc_id: u32,
        theta_s: f64,
        n_obs: usize,
        imputed: bool,
    }
    #[derive(Deserialize)]
    struct SpeedRow {
        arc_id: u32,
        speed: f64,
    }
    let prefix = method.prefix();
    let est_file = dir.join(format!("{prefix}_estimates.csv"));
    let fname = est_file.display().to_string();
    let mut rdr = csv::Reader::from_path(&est_file).map_err(|e| csv_err(&fname, e))?;
    let mut theta = vec![f64::NAN; net.num_arcs()];
    let mut imputed = vec![false; net.num_arcs()];
    let mut n_obs = vec![0usize; net.num_arcs()];
    for row in rdr.deserialize::<EstRow>() {
        let row = row.map_err(|e| csv_err(&fname, e))?;
        let idx = net.arc_index(row.arc_id).ok().ok_or_else(|| LocalError::Format {
            file: fname.clone(),
            msg: format!("unknown arc {}", row.arc_id),
        })?;
        theta[idx] = row.theta_s;
        imputed[idx] = row.imputed;
        n_obs[idx] = row.n_obs;
    }
    if let Some(i) = theta.iter().position(|t| t.is_nan()) {
        return Err(LocalError::MissingArc(net.arcs()[i].id));
    }

    let sp_file = dir.join(format!("{prefix}_speeds.csv"));
    let fname = sp_file.display().to_string();
    let mut rdr = csv::Reader::from_path(&sp_file).map_err(|e| csv_err(&fname, e))?;
    let mut by_canonical: HashMap<u32, Vec<f64>> = HashMap::new();
    for row in rdr.deserialize::<SpeedRow>() {
        let row = row.map_err(|e| csv_err(&fname, e))?;
        if net.arc_index(row.arc_id).is_err() {
            return Err(LocalError::Format {
                file: fname.clone(),
                msg: format!("unknown arc {}", row.arc_id),
            });
        }
        by_canonical.entry(row.arc_id).or_default().push(row.speed);
    }
    // Rebuild per-arc samples from the sidecar. Imputed arcs were saved
    // without speeds, so rerunning the fit over the recovered samples
    // reproduces the donor assignment exactly (it depends only on which
    // arcs have data).
    let speeds: Vec<Vec<f64>> = net
        .arcs()
        .iter()
        .map(|a| by_canonical.get(&net.canonical_arc_id(a.id)).cloned().unwrap_or_default())
        .collect();
    for i in 0..net.num_arcs() {
        if !imputed[i] && speeds[i].is_empty() && n_obs[i] > 0 {
            return Err(LocalError::Format {
                file: fname.clone(),
                msg: format!(
                    "arc {} expects {} speeds but none were found",
                    net.arcs()[i].id,
                    n_obs[i]
                ),
            });
        }
    }
    let mut fit = fit_from_speeds(net, method, speeds)?;
    fit.theta = theta;
    fit.imputed = imputed;
    Ok(fit)
}

fn fit_from_speeds(
    net: &RoadNetwork,
    method: LocalMethod,
    speeds: Vec<Vec<f64>>,
) -> Result<LocalFit, LocalError> {
    if speeds.iter().all(|s| s.is_empty()) {
        return Err(LocalError::NoData);
    }
    let canon_ids: Vec<u32> = {
        let mut ids: Vec<u32> = net.arcs().iter().map(|a| net.canonical_arc_id(a.id)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let canon_pos: HashMap<u32, usize> =
        canon_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut at_node: Vec<Vec<usize>> = vec![Vec::new(); net.num_nodes()];
    for &cid in &canon_ids {
        let a = net.arc(cid);
        let ci = canon_pos[&cid];
        at_node[net.node_index(a.from).unwrap()].push(ci);
        at_node[net.node_index(a.to).unwrap()].push(ci);
    }
    let has_data = |cid: u32| -> bool { !speeds[net.arc_index(cid).unwrap()].is_empty() };
    let donor_for = |cid: u32| -> Option<u32> {
        let class = net.arc(cid).class;
        let mut seen = vec![false; canon_ids.len()];
        seen[canon_pos[&cid]] = true;
        let mut frontier = vec![canon_pos[&cid]];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &ci in &frontier {
                let a = net.arc(canon_ids[ci]);
                for &node in &[a.from, a.to] {
                    for &nb in &at_node[net.node_index(node).unwrap()] {
                        if !seen[nb] {
                            seen[nb] = true;
                            next.push(nb);
                        }
                    }
                }
            }
            let mut level_hit: Option<u32> = None;
            for &ci in &next {
                let id = canon_ids[ci];
                if net.arc(id).class == class && has_data(id) {
                    level_hit = Some(match level_hit {
                        Some(best) => best.min(id),
                        None => id,
                    });
                }
            }
            if level_hit.is_some() {
                return level_hit;
            }
            frontier = next;
        }
        None
    };
    let estimator = match method {
        LocalMethod::Harmonic => harmonic_theta,
        LocalMethod::Mle => mle_theta,
    };
    let mut theta = vec![0.0; net.num_arcs()];
    let mut final_speeds = speeds.clone();
    let mut imputed = vec![false; net.num_arcs()];
    for (i, a) in net.arcs().iter().enumerate() {
        if speeds[i].is_empty() {
            let cid = net.canonical_arc_id(a.id);
            let donor = donor_for(cid).ok_or_else(|| LocalError::NoDonor {
                arc_id: a.id,
                class: a.class.as_str().to_string(),
            })?;
            let sample = speeds[net.arc_index(donor).unwrap()].clone();
            theta[i] = estimator(a.length, &sample);
            final_speeds[i] = sample;
            imputed[i] = true;
        } else {
            theta[i] = estimator(a.length, &speeds[i]);
        }
    }
    Ok(LocalFit { method, theta, speeds: final_speeds, imputed })
}

fn csv_err(file: &str, e: csv::Error) -> LocalError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => LocalError::Io { file: file.to_string(), source: io },
            _ => unreachable!(),
        }
    } else {
        LocalError::Format { file: file.to_string(), msg: e.to_string() }
    }
}

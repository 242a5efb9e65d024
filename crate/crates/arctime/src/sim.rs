//! Synthetic data generation on grid networks: ground-truth arc parameters,
//! trips that descend toward their destination, and noisy GPS readings
//! sampled along the way either every fixed distance or every fixed time.

use std::collections::HashMap;
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::dataset::{GpsReading, Trip};
use crate::model::{ArcParams, GpsNoise};
use crate::network::{Arc, Node, Path, RoadClass, RoadNetwork};

/// Meters per second in one mile per hour.
pub const MPH: f64 = 0.447_04;

/// Noise regime for simulated GPS data. `Good` reads every 250 m with tight
/// location and speed noise; `Bad` reads every 1000 m with location errors
/// averaging about 27 m and roughly 10% speed error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Good,
    Bad,
}

impl Regime {
    pub fn gps_spacing_m(&self) -> f64 {
        match self {
            Regime::Good => 250.0,
            Regime::Bad => 1000.0,
        }
    }

    /// Common variance of the two diagonal location error components, m^2.
    pub fn location_var(&self) -> f64 {
        match self {
            Regime::Good => 100.0,
            Regime::Bad => 465.0,
        }
    }

    pub fn zeta2(&self) -> f64 {
        match self {
            Regime::Good => 0.004,
            Regime::Bad => 0.015_75,
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s.to_ascii_lowercase().as_str() {
            "good" => Some(Regime::Good),
            "bad" => Some(Regime::Bad),
            _ => None,
        }
    }
}

/// How reading instants are chosen along a simulated trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    /// A reading every `spacing` meters of travelled distance (the way probe
    /// devices that report by odometer behave).
    ByDistance { spacing: f64 },
    /// A reading every `interval` seconds. Slow traversals collect more
    /// readings, which is exactly the regime where speed-averaging
    /// estimators go wrong.
    ByTime { interval: f64 },
}

/// Assigns road classes to grid lines: every `primary_every`-th row/column is
/// primary, otherwise every `secondary_every`-th is secondary, the rest
/// tertiary. A period of zero disables that class.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct GridClassPattern {
    pub primary_every: u32,
    pub secondary_every: u32,
}

impl Default for GridClassPattern {
    fn default() -> Self {
        GridClassPattern { primary_every: 4, secondary_every: 2 }
    }
}

impl GridClassPattern {
    fn line_class(&self, idx: u32) -> RoadClass {
        if self.primary_every > 0 && idx % self.primary_every == 0 {
            RoadClass::Primary
        } else if self.secondary_every > 0 && idx % self.secondary_every == 0 {
            RoadClass::Secondary
        } else {
            RoadClass::Tertiary
        }
    }
}

/// Ground truth for a synthetic experiment: the network, the true arc
/// parameters (indexed like `net.arcs()`), and the GPS error model.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: RoadNetwork,
    pub true_params: Vec<ArcParams>,
    pub noise: GpsNoise,
    pub regime: Regime,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("grid must be at least 2x2, got {rows}x{cols}")]
    GridTooSmall { rows: u32, cols: u32 },
    #[error("block length must be positive, got {0}")]
    BadBlock(f64),
    #[error("could not draw a usable trip after {0} attempts")]
    RetriesExhausted(usize),
    #[error("no route from node {from} to node {to}")]
    Unroutable { from: u32, to: u32 },
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Truth { file: String, msg: String },
}

/// One generated trip together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedTrip {
    pub trip: Trip,
    pub path: Path,
    pub times: Vec<f64>,
}

/// Lognormal parameters that give an arc expected time `length / speed` at
/// log standard deviation `sigma`.
pub fn arc_params_for_speed(length: f64, speed_mps: f64, sigma: f64) -> ArcParams {
    let sigma2 = sigma * sigma;
    ArcParams { mu: (length / speed_mps).ln() - 0.5 * sigma2, sigma2 }
}

fn speed_band(class: RoadClass) -> (f64, f64) {
    // True speeds span 20-40 mph overall; each class takes one third of the
    // band so that designated primary streets really are faster.
    let third = 20.0 / 3.0;
    match class {
        RoadClass::Tertiary => (20.0 * MPH, (20.0 + third) * MPH),
        RoadClass::Secondary => ((20.0 + third) * MPH, (20.0 + 2.0 * third) * MPH),
        RoadClass::Primary => ((20.0 + 2.0 * third) * MPH, 40.0 * MPH),
    }
}

/// Log standard deviation of true arc times is uniform on this interval, so
/// per-arc time spread varies from mild to substantial.
pub const SIGMA_RANGE: (f64, f64) = (0.549_306_144_334_054_9 / 2.0, 0.549_306_144_334_054_9);

/// Builds a rows x cols grid of two-way streets with `block_m` meter blocks,
/// road classes from `pattern`, and true per-arc parameters drawn from the
/// class speed bands. Node id is `row * cols + col`; arcs are numbered in
/// node-major order, eastbound/northbound first of each pair.
pub fn build_grid_scenario<R: Rng>(
    rows: u32,
    cols: u32,
    block_m: f64,
    pattern: GridClassPattern,
    regime: Regime,
    rng: &mut R,
) -> Result<Scenario, SimError> {
    if rows < 2 || cols < 2 {
        return Err(SimError::GridTooSmall { rows, cols });
    }
    if !(block_m > 0.0 && block_m.is_finite()) {
        return Err(SimError::BadBlock(block_m));
    }
    let mut nodes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Node {
                id: r * cols + c,
                x: c as f64 * block_m,
                y: r as f64 * block_m,
            });
        }
    }
    let mut arcs = Vec::new();
    let mut next_id = 0u32;
    let mut two_way = |a: u32, b: u32, class: RoadClass, arcs: &mut Vec<Arc>| {
        arcs.push(Arc {
            id: next_id,
            from: a,
            to: b,
            length: block_m,
            class,
            reverse: Some(next_id + 1),
        });
        arcs.push(Arc {
            id: next_id + 1,
            from: b,
            to: a,
            length: block_m,
            class,
            reverse: Some(next_id),
        });
        next_id += 2;
    };
    for r in 0..rows {
        for c in 0..cols {
            let n = r * cols + c;
            if c + 1 < cols {
                two_way(n, n + 1, pattern.line_class(r), &mut arcs);
            }
            if r + 1 < rows {
                two_way(n, n + cols, pattern.line_class(c), &mut arcs);
            }
        }
    }
    let net = RoadNetwork::from_parts(nodes, arcs).expect("grid construction is valid");
    let true_params = net
        .arcs()
        .iter()
        .map(|a| {
            let (lo, hi) = speed_band(a.class);
            let speed = rng.gen_range(lo..hi);
            let sigma = rng.gen_range(SIGMA_RANGE.0..SIGMA_RANGE.1);
            arc_params_for_speed(a.length, speed, sigma)
        })
        .collect();
    let var = regime.location_var();
    let noise = GpsNoise::diagonal(var, var, regime.zeta2()).expect("regime constants are valid");
    Ok(Scenario { net, true_params, noise, regime })
}

/// Draws one realized travel time per arc of `path` from the true lognormal
/// distributions.
pub fn draw_trip_times<R: Rng>(sc: &Scenario, path: &Path, rng: &mut R) -> Vec<f64> {
    path.arcs()
        .iter()
        .map(|&aid| {
            let p = &sc.true_params[sc.net.arc_index(aid).expect("arc in network")];
            let z: f64 = StandardNormal.sample(rng);
            (p.mu + p.sigma2.sqrt() * z).exp()
        })
        .collect()
}

/// Simulates one trip between uniformly chosen distinct endpoints. The path
/// is built arc by arc: at each node, one of the outgoing arcs that strictly
/// lowers the expected time to the destination is chosen uniformly. Expected
/// time to the destination therefore strictly decreases along the path, so
/// the walk always terminates and never revisits a node.
pub fn simulate_trip<R: Rng>(sc: &Scenario, id: u64, rng: &mut R) -> Result<SimulatedTrip, SimError> {
    let n = sc.net.num_nodes();
    let s_idx = rng.gen_range(0..n);
    let mut t_idx = rng.gen_range(0..n - 1);
    if t_idx >= s_idx {
        t_idx += 1;
    }
    let start = sc.net.nodes()[s_idx].id;
    let end = sc.net.nodes()[t_idx].id;
    let path = simulate_path(sc, start, end, rng)?;
    let times = draw_trip_times(sc, &path, rng);
    let total: f64 = times.iter().sum();
    Ok(SimulatedTrip {
        trip: Trip {
            id,
            start_node: start,
            end_node: end,
            t_start: 0.0,
            t_end: total,
            readings: Vec::new(),
        },
        path,
        times,
    })
}

/// The descent rule on its own: a path from `start` to `end` using arcs that
/// lower the true expected time to `end`.
pub fn simulate_path<R: Rng>(
    sc: &Scenario,
    start: u32,
    end: u32,
    rng: &mut R,
) -> Result<Path, SimError> {
    let theta: Vec<f64> = sc.true_params.iter().map(|p| p.theta()).collect();
    let ttt = sc.net.time_to_target_map(&theta, end).expect("end node exists");
    let start_idx = sc.net.node_index(start).expect("start node exists");
    if ttt[start_idx].is_infinite() {
        return Err(SimError::Unroutable { from: start, to: end });
    }
    let mut arcs = Vec::new();
    let mut at = start;
    let mut candidates: Vec<u32> = Vec::new();
    while at != end {
        let here = ttt[sc.net.node_index(at).unwrap()];
        candidates.clear();
        for a in sc.net.out_arcs(at) {
            if ttt[sc.net.node_index(a.to).unwrap()] < here {
                candidates.push(a.id);
            }
        }
        debug_assert!(
            !candidates.is_empty(),
            "a reachable node always has a descending arc when thetas are positive"
        );
        let chosen = candidates[rng.gen_range(0..candidates.len())];
        arcs.push(chosen);
        at = sc.net.arc(chosen).to;
    }
    Ok(Path::new(arcs))
}

/// Samples noisy GPS readings along a simulated trip. Boundary instants and
/// distances belong to the later arc; a reading landing exactly at the trip
/// end maps to the last arc. Trips shorter than one spacing or interval
/// yield an empty list.
pub fn sample_gps_readings<R: Rng>(
    sc: &Scenario,
    st: &SimulatedTrip,
    mode: SamplingMode,
    rng: &mut R,
) -> Vec<GpsReading> {
    let lengths: Vec<f64> =
        st.path.arcs().iter().map(|&a| sc.net.arc(a).length).collect();
    let total_len: f64 = lengths.iter().sum();
    let total_time: f64 = st.times.iter().sum();

    // (t_rel, x, y, speed) of each true sample point.
    let mut points: Vec<(f64, f64, f64, f64)> = Vec::new();
    match mode {
        SamplingMode::ByDistance { spacing } => {
            assert!(spacing > 0.0);
            let mut d = spacing;
            // Graceful float slack so a trip of exactly k spacings gets its
            // final reading at the endpoint.
            while d <= total_len * (1.0 + 1e-12) {
                points.push(point_at_distance(sc, st, &lengths, d.min(total_len)));
                d += spacing;
            }
        }
        SamplingMode::ByTime { interval } => {
            assert!(interval > 0.0);
            let traj = crate::model::Trajectory::build(&sc.net, &st.path, &st.times)
                .expect("simulated trips have valid paths");
            let mut t = interval;
            while t <= total_time * (1.0 + 1e-12) {
                let p = traj.at(t.min(total_time));
                points.push((t.min(total_time), p.x, p.y, p.speed));
                t += interval;
            }
        }
    }

    let (sxx, sxy, syy) = sc.noise.covariance();
    let l11 = sxx.sqrt();
    let l21 = sxy / l11;
    let l22 = (syy - l21 * l21).sqrt();
    let zeta = sc.noise.zeta2.sqrt();
    points
        .into_iter()
        .enumerate()
        .map(|(i, (t_rel, x, y, speed))| {
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            let zv: f64 = StandardNormal.sample(rng);
            GpsReading {
                trip_id: st.trip.id,
                seq: (i + 1) as u32,
                t: st.trip.t_start + t_rel,
                x: x + l11 * z1,
                y: y + l21 * z1 + l22 * z2,
                speed: speed * (-0.5 * zeta * zeta + zeta * zv).exp(),
            }
        })
        .collect()
}

/// True trajectory state after `d` meters of travel.
fn point_at_distance(
    sc: &Scenario,
    st: &SimulatedTrip,
    lengths: &[f64],
    d: f64,
) -> (f64, f64, f64, f64) {
    let mut cum_len = 0.0;
    let mut cum_t = 0.0;
    let last = lengths.len() - 1;
    for (k, (&len, &time)) in lengths.iter().zip(&st.times).enumerate() {
        // Boundary distances belong to the later arc, except at the very end.
        if d < cum_len + len || k == last {
            let into = (d - cum_len).clamp(0.0, len);
            let frac = into / len;
            let arc = sc.net.arc(st.path.arcs()[k]);
            let from = sc.net.node(arc.from);
            let to = sc.net.node(arc.to);
            return (
                cum_t + frac * time,
                from.x + frac * (to.x - from.x),
                from.y + frac * (to.y - from.y),
                len / time,
            );
        }
        cum_len += len;
        cum_t += time;
    }
    unreachable!("loop always returns on the last arc");
}

/// Simulates trips until `n` of them carry at least two GPS readings, so the
/// emitted dataset survives loading intact. Trips too short to collect two
/// readings are redrawn (bounded retries).
pub fn simulate_usable_trips<R: Rng>(
    sc: &Scenario,
    n: usize,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<Vec<SimulatedTrip>, SimError> {
    let mut out = Vec::with_capacity(n);
    let max_attempts = 1000 * n.max(10);
    let mut attempts = 0;
    let mut id = 1u64;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SimError::RetriesExhausted(attempts));
        }
        let mut st = simulate_trip(sc, id, rng)?;
        let readings = sample_gps_readings(sc, &st, mode, rng);
        if readings.len() < 2 {
            continue;
        }
        st.trip.readings = readings;
        out.push(st);
        id += 1;
    }
    Ok(out)
}

/// Ground truth loaded back from the sidecar files written next to a
/// simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// True path and per-arc times by trip id.
    pub trips: HashMap<u64, (Path, Vec<f64>)>,
    /// True parameters by arc id.
    pub arc_params: HashMap<u32, ArcParams>,
}

impl SimTruth {
    pub fn from_scenario(sc: &Scenario, trips: &[SimulatedTrip]) -> SimTruth {
        SimTruth {
            trips: trips
                .iter()
                .map(|st| (st.trip.id, (st.path.clone(), st.times.clone())))
                .collect(),
            arc_params: sc
                .net
                .arcs()
                .iter()
                .enumerate()
                .map(|(i, a)| (a.id, sc.true_params[i]))
                .collect(),
        }
    }
}

/// Writes `trip_truth.csv` (trip_id,arc_seq,arc_id,true_time_s) and
/// `arc_truth.csv` (arc_id,true_mu,true_sigma2).
pub fn save_truth(sc: &Scenario, trips: &[SimulatedTrip], dir: &FsPath) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(dir.join("trip_truth.csv"))?;
    w.write_record(["trip_id", "arc_seq", "arc_id", "true_time_s"])?;
    for st in trips {
        for (k, (&aid, &t)) in st.path.arcs().iter().zip(&st.times).enumerate() {
            w.write_record(&[
                st.trip.id.to_string(),
                k.to_string(),
                aid.to_string(),
                t.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("arc_truth.csv"))?;
    w.write_record(["arc_id", "true_mu", "true_sigma2"])?;
    for (i, a) in sc.net.arcs().iter().enumerate() {
        let p = &sc.true_params[i];
        w.write_record(&[a.id.to_string(), p.mu.to_string(), p.sigma2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_truth(dir: &FsPath) -> Result<SimTruth, SimError> {
    #[derive(Deserialize)]
    struct TripTruthRow {
        trip_id: u64,
        arc_seq: u32,
        arc_id: u32,
        true_time_s: f64,
    }
    #[derive(Deserialize)]
    struct ArcTruthRow {
        arc_id: u32,
        true_mu: f64,
        true_sigma2: f64,
    }
    let trip_file = dir.join("trip_truth.csv");
    let fname = trip_file.display().to_string();
    let mut rdr = csv::Reader::from_path(&trip_file).map_err(|e| sim_csv_err(&fname, e))?;
    let mut rows: Vec<TripTruthRow> = Vec::new();
    for r in rdr.deserialize::<TripTruthRow>() {
        rows.push(r.map_err(|e| sim_csv_err(&fname, e))?);
    }
    rows.sort_by_key(|r| (r.trip_id, r.arc_seq));
    let mut trips: HashMap<u64, (Path, Vec<f64>)> = HashMap::new();
    let mut cur: Option<(u64, Vec<u32>, Vec<f64>)> = None;
    for r in rows {
        match &mut cur {
            Some((id, arcs, times)) if *id == r.trip_id => {
                if r.arc_seq as usize != arcs.len() {
                    return Err(SimError::Truth {
                        file: fname.clone(),
                        msg: format!("trip {} has a gap in arc_seq", r.trip_id),
                    });
                }
                arcs.push(r.arc_id);
                times.push(r.true_time_s);
            }
            _ => {
                if let Some((id, arcs, times)) = cur.take() {
                    trips.insert(id, (Path::new(arcs), times));
                }
                if r.arc_seq != 0 {
                    return Err(SimError::Truth {
                        file: fname.clone(),
                        msg: format!("trip {} does not start at arc_seq 0", r.trip_id),
                    });
                }
                cur = Some((r.trip_id, vec![r.arc_id], vec![r.true_time_s]));
            }
        }
    }
    if let Some((id, arcs, times)) = cur.take() {
        trips.insert(id, (Path::new(arcs), times));
    }

    let arc_file = dir.join("arc_truth.csv");
    let fname = arc_file.display().to_string();
    let mut rdr = csv::Reader::from_path(&arc_file).map_err(|e| sim_csv_err(&fname, e))?;
    let mut arc_params = HashMap::new();
    for r in rdr.deserialize::<ArcTruthRow>() {
        let r = r.map_err(|e| sim_csv_err(&fname, e))?;
        arc_params.insert(r.arc_id, ArcParams { mu: r.true_mu, sigma2: r.true_sigma2 });
    }
    Ok(SimTruth { trips, arc_params })
}

fn sim_csv_err(file: &str, e: csv::Error) -> SimError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SimError::Io { file: file.to_string(), source: io },
            _ => unreachable!(),
        }
    } else {
        SimError::Truth { file: file.to_string(), msg: e.to_string() }
    }
}

/// Draws a path from the model's own path prior by enumerating every simple
/// path between the endpoints (feasible on small networks only) and sampling
/// proportionally to `exp(-c * theta_sum)`.
pub fn sample_path_from_prior<R: Rng>(
    net: &RoadNetwork,
    params: &[ArcParams],
    c: f64,
    start: u32,
    end: u32,
    rng: &mut R,
) -> Option<Path> {
    let routes = net
        .enumerate_local_routes(start, end, net.num_nodes(), &Default::default())
        .ok()?;
    if routes.is_empty() {
        return None;
    }
    let logw: Vec<f64> = routes
        .iter()
        .map(|p| {
            let theta_sum: f64 = p
                .arcs()
                .iter()
                .map(|&a| params[net.arc_index(a).unwrap()].theta())
                .sum();
            -c * theta_sum
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (p, w) in routes.iter().zip(&weights) {
        u -= w;
        if u <= 0.0 {
            return Some(p.clone());
        }
    }
    routes.last().cloned()
}

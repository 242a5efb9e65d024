//! Trip and GPS reading ingestion: CSV schemas, endpoint snapping, the
//! data-quality drop rules, and the seeded training/validation/test split.

use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::network::RoadNetwork;

/// One GPS probe reading. Coordinates are planar meters, `t` is seconds on
/// the same clock as the trip endpoints, `speed` is the instantaneous speed
/// reported by the device in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsReading {
    pub trip_id: u64,
    pub seq: u32,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

/// A trip with known endpoints and total duration; the route taken between
/// the endpoints is not observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub id: u64,
    pub start_node: u32,
    pub end_node: u32,
    pub t_start: f64,
    pub t_end: f64,
    /// Readings sorted by sequence number, strictly increasing in time.
    pub readings: Vec<GpsReading>,
}

impl Trip {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Why a trip was excluded during loading.
#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    TooFewReadings(usize),
    ZeroDuration,
    IdenticalEndpoints(u32),
    /// A gap longer than the threshold with implied speed below the floor,
    /// i.e. the vehicle stopped mid-trip.
    StopGap { gap_s: f64, implied_speed: f64 },
    NonMonotonicTimes,
    ReadingOutsideWindow { t: f64 },
    NegativeSpeed { seq: u32 },
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::TooFewReadings(n) => write!(f, "only {n} GPS readings"),
            DropReason::ZeroDuration => write!(f, "end time not after start time"),
            DropReason::IdenticalEndpoints(n) => write!(f, "start and end both snap to node {n}"),
            DropReason::StopGap { gap_s, implied_speed } => {
                write!(f, "stop gap of {gap_s:.0} s at implied speed {implied_speed:.2} m/s")
            }
            DropReason::NonMonotonicTimes => write!(f, "reading times not strictly increasing"),
            DropReason::ReadingOutsideWindow { t } => {
                write!(f, "reading at t={t} outside the trip window")
            }
            DropReason::NegativeSpeed { seq } => write!(f, "negative speed at reading {seq}"),
        }
    }
}

/// Result of [`load_dataset`]: the retained trips plus a record of every
/// exclusion so callers can log or audit them.
#[derive(Debug)]
pub struct LoadReport {
    pub trips: Vec<Trip>,
    pub dropped: Vec<(u64, DropReason)>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("trip {trip}: unknown {which} node {node}")]
    UnknownNode { trip: u64, which: &'static str, node: u32 },
    #[error("duplicate trip id {0}")]
    DuplicateTrip(u64),
    #[error("trip {trip}: duplicate reading sequence number {seq}")]
    DuplicateSeq { trip: u64, seq: u32 },
    #[error("gps reading references unknown trip {0}")]
    OrphanReading(u64),
    #[error("trip {trip}: start node {node} is out of range")]
    BadNodeId { trip: u64, node: i64 },
    #[error("need at least {need} trips to split folds, have {have}")]
    TooFewTrips { need: usize, have: usize },
}

/// Thresholds for the stop-gap drop rule.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// A gap between consecutive readings longer than this many seconds is
    /// suspect.
    pub max_gap_s: f64,
    /// A suspect gap is fatal when the straight-line speed across it falls
    /// below this many m/s.
    pub min_gap_speed: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { max_gap_s: 300.0, min_gap_speed: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
struct TripRecord {
    trip_id: u64,
    start_node: i64,
    end_node: i64,
    t_start_s: f64,
    t_end_s: f64,
}

#[derive(Debug, Deserialize)]
struct GpsRecord {
    trip_id: u64,
    seq: u32,
    t_s: f64,
    x_m: f64,
    y_m: f64,
    speed_mps: f64,
}

/// Loads trips and their GPS readings, snapping missing endpoints (-1 in the
/// CSV) to the nearest network node of the first or last reading, and applies
/// the drop rules: fewer than two readings, non-positive duration, identical
/// snapped endpoints, and mid-trip stop gaps.
pub fn load_dataset(
    net: &RoadNetwork,
    trips_path: &FsPath,
    gps_path: &FsPath,
    opts: &LoadOptions,
) -> Result<LoadReport, DataError> {
    let trip_file = trips_path.display().to_string();
    let gps_file = gps_path.display().to_string();

    let mut rdr = csv::Reader::from_path(trips_path).map_err(|e| csv_err(&trip_file, e))?;
    let mut raw_trips: Vec<TripRecord> = Vec::new();
    for rec in rdr.deserialize::<TripRecord>() {
        raw_trips.push(rec.map_err(|e| csv_err(&trip_file, e))?);
    }
    raw_trips.sort_by_key(|t| t.trip_id);
    for w in raw_trips.windows(2) {
        if w[0].trip_id == w[1].trip_id {
            return Err(DataError::DuplicateTrip(w[0].trip_id));
        }
    }

    let mut rdr = csv::Reader::from_path(gps_path).map_err(|e| csv_err(&gps_file, e))?;
    let mut readings: Vec<GpsReading> = Vec::new();
    for rec in rdr.deserialize::<GpsRecord>() {
        let r = rec.map_err(|e| csv_err(&gps_file, e))?;
        readings.push(GpsReading {
            trip_id: r.trip_id,
            seq: r.seq,
            t: r.t_s,
            x: r.x_m,
            y: r.y_m,
            speed: r.speed_mps,
        });
    }
    readings.sort_by(|a, b| a.trip_id.cmp(&b.trip_id).then(a.seq.cmp(&b.seq)));
    for r in &readings {
        if raw_trips.binary_search_by_key(&r.trip_id, |t| t.trip_id).is_err() {
            return Err(DataError::OrphanReading(r.trip_id));
        }
    }
    for w in readings.windows(2) {
        if w[0].trip_id == w[1].trip_id && w[0].seq == w[1].seq {
            return Err(DataError::DuplicateSeq { trip: w[0].trip_id, seq: w[0].seq });
        }
    }

    let mut trips = Vec::with_capacity(raw_trips.len());
    let mut dropped = Vec::new();
    let mut cursor = 0usize;
    for raw in &raw_trips {
        let begin = cursor;
        while cursor < readings.len() && readings[cursor].trip_id == raw.trip_id {
            cursor += 1;
        }
        let trip_readings = &readings[begin..cursor];

        if trip_readings.len() < 2 {
            dropped.push((raw.trip_id, DropReason::TooFewReadings(trip_readings.len())));
            continue;
        }
        let snap = |which: &'static str, given: i64, reading: &GpsReading| -> Result<u32, DataError> {
            if given == -1 {
                Ok(net.nearest_node(reading.x, reading.y))
            } else if given >= 0 && given <= u32::MAX as i64 {
                let id = given as u32;
                if net.has_node(id) {
                    Ok(id)
                } else {
                    Err(DataError::UnknownNode { trip: raw.trip_id, which, node: id })
                }
            } else {
                Err(DataError::BadNodeId { trip: raw.trip_id, node: given })
            }
        };
        let start_node = snap("start", raw.start_node, &trip_readings[0])?;
        let end_node = snap("end", raw.end_node, trip_readings.last().unwrap())?;

        if raw.t_end_s <= raw.t_start_s {
            dropped.push((raw.trip_id, DropReason::ZeroDuration));
            continue;
        }
        if start_node == end_node {
            dropped.push((raw.trip_id, DropReason::IdenticalEndpoints(start_node)));
            continue;
        }
        let mut reason = None;
        for w in trip_readings.windows(2) {
            if w[1].t <= w[0].t {
                reason = Some(DropReason::NonMonotonicTimes);
                break;
            }
            let gap = w[1].t - w[0].t;
            if gap > opts.max_gap_s {
                let dist = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
                let implied = dist / gap;
                if implied < opts.min_gap_speed {
                    reason = Some(DropReason::StopGap { gap_s: gap, implied_speed: implied });
                    break;
                }
            }
        }
        if reason.is_none() {
            for r in trip_readings {
                if r.t < raw.t_start_s || r.t > raw.t_end_s {
                    reason = Some(DropReason::ReadingOutsideWindow { t: r.t });
                    break;
                }
                if r.speed < 0.0 {
                    reason = Some(DropReason::NegativeSpeed { seq: r.seq });
                    break;
                }
            }
        }
        if let Some(r) = reason {
            dropped.push((raw.trip_id, r));
            continue;
        }

        trips.push(Trip {
            id: raw.trip_id,
            start_node,
            end_node,
            t_start: raw.t_start_s,
            t_end: raw.t_end_s,
            readings: trip_readings.to_vec(),
        });
    }
    Ok(LoadReport { trips, dropped })
}

/// Writes `trips.csv` and `gps.csv` into `dir` in the loader's schema, with
/// endpoints written explicitly so a round trip through [`load_dataset`]
/// reproduces the same trips.
pub fn save_dataset(trips: &[Trip], dir: &FsPath) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(dir.join("trips.csv"))?;
    w.write_record(["trip_id", "start_node", "end_node", "t_start_s", "t_end_s"])?;
    for t in trips {
        w.write_record(&[
            t.id.to_string(),
            t.start_node.to_string(),
            t.end_node.to_string(),
            t.t_start.to_string(),
            t.t_end.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("gps.csv"))?;
    w.write_record(["trip_id", "seq", "t_s", "x_m", "y_m", "speed_mps"])?;
    for t in trips {
        for r in &t.readings {
            w.write_record(&[
                r.trip_id.to_string(),
                r.seq.to_string(),
                r.t.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.speed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const NUM_FOLDS: usize = 10;

/// Seeded split: half the trips (rounded down) for training, the rest dealt
/// into ten near-equal folds for validation/test rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub training: Vec<u64>,
    pub folds: Vec<Vec<u64>>,
}

impl FoldPlan {
    /// Validation ids for rotation `k`: every fold except fold `k`.
    pub fn validation_ids(&self, k: usize) -> Vec<u64> {
        let mut ids = Vec::new();
        for (i, fold) in self.folds.iter().enumerate() {
            if i != k {
                ids.extend_from_slice(fold);
            }
        }
        ids
    }

    pub fn test_ids(&self, k: usize) -> &[u64] {
        &self.folds[k]
    }
}

/// Shuffles trip ids with a seeded generator and splits them 50/50 into
/// training and held-out, the held-out half dealt into [`NUM_FOLDS`] folds
/// whose sizes differ by at most one. Needs at least 20 trips so every fold
/// is nonempty. The same seed always yields the same plan.
pub fn split_folds(trips: &[Trip], seed: u64) -> Result<FoldPlan, DataError> {
    if trips.len() < 2 * NUM_FOLDS {
        return Err(DataError::TooFewTrips { need: 2 * NUM_FOLDS, have: trips.len() });
    }
    let mut ids: Vec<u64> = trips.iter().map(|t| t.id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = trips.len() / 2;
    let training = ids[..n_train].to_vec();
    let held = &ids[n_train..];
    let base = held.len() / NUM_FOLDS;
    let extra = held.len() % NUM_FOLDS;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut at = 0;
    for k in 0..NUM_FOLDS {
        let size = base + usize::from(k < extra);
        folds.push(held[at..at + size].to_vec());
        at += size;
    }
    Ok(FoldPlan { training, folds })
}

fn csv_err(file: &str, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io { file: file.to_string(), source: io },
            _ => unreachable!(),
        }
    } else {
        DataError::Parse { file: file.to_string(), line, msg: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Arc, Node, RoadClass, RoadNetwork};
    use std::collections::HashSet;

    fn line_net() -> RoadNetwork {
        let nodes = vec![
            Node { id: 0, x: 0.0, y: 0.0 },
            Node { id: 1, x: 100.0, y: 0.0 },
            Node { id: 2, x: 200.0, y: 0.0 },
        ];
        let arcs = vec![
            Arc { id: 0, from: 0, to: 1, length: 100.0, class: RoadClass::Tertiary, reverse: Some(1) },
            Arc { id: 1, from: 1, to: 0, length: 100.0, class: RoadClass::Tertiary, reverse: Some(0) },
            Arc { id: 2, from: 1, to: 2, length: 100.0, class: RoadClass::Tertiary, reverse: Some(3) },
            Arc { id: 3, from: 2, to: 1, length: 100.0, class: RoadClass::Tertiary, reverse: Some(2) },
        ];
        RoadNetwork::from_parts(nodes, arcs).unwrap()
    }

    fn write_files(dir: &FsPath, trips: &str, gps: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let t = dir.join("trips.csv");
        let g = dir.join("gps.csv");
        std::fs::write(&t, trips).unwrap();
        std::fs::write(&g, gps).unwrap();
        (t, g)
    }

    #[test]
    fn snaps_missing_endpoints_and_keeps_explicit_ones() {
        let net = line_net();
        let dir = tempfile::tempdir().unwrap();
        let (t, g) = write_files(
            dir.path(),
            "trip_id,start_node,end_node,t_start_s,t_end_s\n1,-1,-1,0.0,30.0\n2,0,2,0.0,25.0\n",
            "trip_id,seq,t_s,x_m,y_m,speed_mps\n\
             1,1,0.0,8.0,2.0,10.0\n1,2,29.0,195.0,1.0,9.0\n\
             2,1,1.0,50.0,0.0,10.0\n2,2,24.0,150.0,0.0,10.0\n",
        );
        let report = load_dataset(&net, &t, &g, &LoadOptions::default()).unwrap();
        assert!(report.dropped.is_empty());
        assert_eq!(report.trips.len(), 2);
        assert_eq!(report.trips[0].start_node, 0);
        assert_eq!(report.trips[0].end_node, 2);
        assert_eq!(report.trips[1].start_node, 0);
        assert_eq!(report.trips[1].end_node, 2);
    }

    #[test]
    fn drop_rules_fire_with_reasons() {
        let net = line_net();
        let dir = tempfile::tempdir().unwrap();
        // Trip 1: a single reading. Trip 2: both endpoints snap to node 0.
        // Trip 3: long stop gap at near-zero speed. Trip 4 is fine.
        let (t, g) = write_files(
            dir.path(),
            "trip_id,start_node,end_node,t_start_s,t_end_s\n\
             1,-1,-1,0.0,30.0\n2,-1,-1,0.0,30.0\n3,0,2,0.0,400.0\n4,0,2,0.0,25.0\n",
            "trip_id,seq,t_s,x_m,y_m,speed_mps\n\
             1,1,0.0,10.0,0.0,10.0\n\
             2,1,0.0,1.0,0.0,10.0\n2,2,29.0,2.0,0.0,9.0\n\
             3,1,0.0,20.0,0.0,10.0\n3,2,390.0,30.0,0.0,2.0\n\
             4,1,1.0,50.0,0.0,10.0\n4,2,24.0,150.0,0.0,10.0\n",
        );
        let report = load_dataset(&net, &t, &g, &LoadOptions::default()).unwrap();
        assert_eq!(report.trips.len(), 1);
        assert_eq!(report.trips[0].id, 4);
        let reasons: Vec<(u64, &DropReason)> =
            report.dropped.iter().map(|(id, r)| (*id, r)).collect();
        assert!(matches!(reasons[0], (1, DropReason::TooFewReadings(1))));
        assert!(matches!(reasons[1], (2, DropReason::IdenticalEndpoints(0))));
        assert!(matches!(reasons[2], (3, DropReason::StopGap { .. })));
    }

    #[test]
    fn zero_duration_and_bad_times_dropped() {
        let net = line_net();
        let dir = tempfile::tempdir().unwrap();
        let (t, g) = write_files(
            dir.path(),
            "trip_id,start_node,end_node,t_start_s,t_end_s\n1,0,2,10.0,10.0\n2,0,2,0.0,25.0\n",
            "trip_id,seq,t_s,x_m,y_m,speed_mps\n\
             1,1,10.0,10.0,0.0,5.0\n1,2,10.0,20.0,0.0,5.0\n\
             2,1,5.0,10.0,0.0,5.0\n2,2,3.0,20.0,0.0,5.0\n",
        );
        let report = load_dataset(&net, &t, &g, &LoadOptions::default()).unwrap();
        assert!(report.trips.is_empty());
        assert!(matches!(report.dropped[0].1, DropReason::ZeroDuration));
        assert!(matches!(report.dropped[1].1, DropReason::NonMonotonicTimes));
    }

    #[test]
    fn unknown_node_is_an_error_not_a_drop() {
        let net = line_net();
        let dir = tempfile::tempdir().unwrap();
        let (t, g) = write_files(
            dir.path(),
            "trip_id,start_node,end_node,t_start_s,t_end_s\n1,0,9,0.0,30.0\n",
            "trip_id,seq,t_s,x_m,y_m,speed_mps\n1,1,0.0,10.0,0.0,5.0\n1,2,29.0,20.0,0.0,5.0\n",
        );
        match load_dataset(&net, &t, &g, &LoadOptions::default()) {
            Err(DataError::UnknownNode { trip: 1, node: 9, .. }) => {}
            other => panic!("expected unknown node error, got {other:?}"),
        }
    }

    fn synth_trips(n: usize) -> Vec<Trip> {
        (0..n as u64)
            .map(|id| Trip {
                id,
                start_node: 0,
                end_node: 2,
                t_start: 0.0,
                t_end: 10.0,
                readings: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn folds_partition_and_sizes() {
        for n in [20usize, 41, 100, 137] {
            let trips = synth_trips(n);
            let plan = split_folds(&trips, 9).unwrap();
            assert_eq!(plan.training.len(), n / 2);
            let held = n - n / 2;
            let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), held);
            let max = sizes.iter().max().unwrap();
            let min = sizes.iter().min().unwrap();
            assert!(max - min <= 1, "fold sizes {sizes:?}");
            let mut all: Vec<u64> = plan.training.clone();
            for f in &plan.folds {
                all.extend_from_slice(f);
            }
            let unique: HashSet<u64> = all.iter().copied().collect();
            assert_eq!(unique.len(), n, "every trip appears exactly once");
        }
    }

    #[test]
    fn folds_deterministic_and_seed_sensitive() {
        let trips = synth_trips(40);
        let a = split_folds(&trips, 7).unwrap();
        let b = split_folds(&trips, 7).unwrap();
        let c = split_folds(&trips, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_trips_is_an_error() {
        let trips = synth_trips(19);
        assert!(matches!(split_folds(&trips, 1), Err(DataError::TooFewTrips { .. })));
    }

    #[test]
    fn validation_ids_exclude_test_fold() {
        let trips = synth_trips(30);
        let plan = split_folds(&trips, 3).unwrap();
        for k in 0..NUM_FOLDS {
            let val: HashSet<u64> = plan.validation_ids(k).into_iter().collect();
            for id in plan.test_ids(k) {
                assert!(!val.contains(id));
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let net = line_net();
        let dir = tempfile::tempdir().unwrap();
        let trips = vec![
            Trip {
                id: 3,
                start_node: 0,
                end_node: 2,
                t_start: 0.25,
                t_end: 31.5,
                readings: vec![
                    GpsReading { trip_id: 3, seq: 1, t: 1.125, x: 10.5, y: 0.25, speed: 9.875 },
                    GpsReading { trip_id: 3, seq: 2, t: 30.0, x: 190.0, y: -0.5, speed: 10.0625 },
                ],
            },
            Trip {
                id: 5,
                start_node: 2,
                end_node: 0,
                t_start: 100.0,
                t_end: 131.0,
                readings: vec![
                    GpsReading { trip_id: 5, seq: 1, t: 101.0, x: 180.0, y: 0.0, speed: 8.0 },
                    GpsReading { trip_id: 5, seq: 2, t: 130.0, x: 15.0, y: 0.0, speed: 7.5 },
                ],
            },
        ];
        save_dataset(&trips, dir.path()).unwrap();
        let report = load_dataset(
            &net,
            &dir.path().join("trips.csv"),
            &dir.path().join("gps.csv"),
            &LoadOptions::default(),
        )
        .unwrap();
        assert!(report.dropped.is_empty());
        assert_eq!(report.trips, trips);
    }
}

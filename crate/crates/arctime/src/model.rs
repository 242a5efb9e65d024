//! The generative model tying latent paths and per-arc travel times to the
//! observed GPS readings.
//!
//! Each arc `j` carries a lognormal travel time with log-mean `mu` and
//! log-variance `sigma2`; its expected travel time is
//! `theta = exp(mu + sigma2/2)`. A trip's path has unnormalized log prior
//! `-c * sum(theta)` over its arcs, favoring paths that are fast in
//! expectation. Given a path and per-arc times, the vehicle moves at constant
//! speed along each arc; GPS locations are bivariate normal around the
//! trajectory and log speeds are normal around the trajectory speed with a
//! mean offset of `-zeta2/2` so measured speeds are unbiased.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GpsReading, Trip};
use crate::network::{Arc, Path, RoadClass, RoadNetwork};

/// Absolute slack allowed between a trip's per-arc times and its known total.
pub const TIME_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("covariance matrix is not symmetric positive definite")]
    BadCovariance,
    #[error("zeta2 must be positive, got {0}")]
    BadZeta2(f64),
    #[error("hyperparameter {name} is invalid: {msg}")]
    BadHyperparam { name: &'static str, msg: String },
    #[error("trip times must be positive and finite, got {0}")]
    BadTripTime(f64),
    #[error("trip times are empty")]
    EmptyTripTimes,
    #[error("path and times have different lengths ({path} vs {times})")]
    LengthMismatch { path: usize, times: usize },
}

/// Lognormal travel time parameters for one arc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl ArcParams {
    /// Expected travel time `exp(mu + sigma2/2)` in seconds.
    pub fn theta(&self) -> f64 {
        (self.mu + 0.5 * self.sigma2).exp()
    }
}

/// GPS error model: fixed 2x2 location covariance and the (sampled) log-speed
/// variance `zeta2`.
#[derive(Debug, Clone)]
pub struct GpsNoise {
    sxx: f64,
    sxy: f64,
    syy: f64,
    inv: [f64; 3],
    log_det: f64,
    pub zeta2: f64,
}

impl GpsNoise {
    pub fn new(sxx: f64, sxy: f64, syy: f64, zeta2: f64) -> Result<GpsNoise, ModelError> {
        let det = sxx * syy - sxy * sxy;
        if !(sxx > 0.0 && det > 0.0 && sxx.is_finite() && syy.is_finite() && sxy.is_finite()) {
            return Err(ModelError::BadCovariance);
        }
        if !(zeta2 > 0.0 && zeta2.is_finite()) {
            return Err(ModelError::BadZeta2(zeta2));
        }
        Ok(GpsNoise {
            sxx,
            sxy,
            syy,
            inv: [syy / det, -sxy / det, sxx / det],
            log_det: det.ln(),
            zeta2,
        })
    }

    pub fn diagonal(sxx: f64, syy: f64, zeta2: f64) -> Result<GpsNoise, ModelError> {
        GpsNoise::new(sxx, 0.0, syy, zeta2)
    }

    pub fn covariance(&self) -> (f64, f64, f64) {
        (self.sxx, self.sxy, self.syy)
    }

    /// Log density of a location error `(dx, dy)` under N(0, Sigma).
    pub fn loc_loglik(&self, dx: f64, dy: f64) -> f64 {
        let q = self.inv[0] * dx * dx + 2.0 * self.inv[1] * dx * dy + self.inv[2] * dy * dy;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * self.log_det - 0.5 * q
    }

    /// Log density of the log of a measured speed `v` given trajectory speed
    /// `sp`, under N(ln sp - zeta2/2, zeta2). Uses the supplied `zeta2` so
    /// samplers can evaluate proposals without mutating the model.
    pub fn speed_loglik_with(v: f64, sp: f64, zeta2: f64) -> f64 {
        ln_normal_pdf(v.ln(), sp.ln() - 0.5 * zeta2, zeta2)
    }

    pub fn speed_loglik(&self, v: f64, sp: f64) -> f64 {
        Self::speed_loglik_with(v, sp, self.zeta2)
    }
}

/// Fixed model constants: class-level prior speeds that set the per-arc
/// prior means, prior spreads and support bounds, the path prior decay, the
/// Dirichlet concentrations of the two proposal families, and the GPS speed
/// floor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Prior expected speeds by road class, m/s.
    pub prior_speed_primary: f64,
    pub prior_speed_secondary: f64,
    pub prior_speed_tertiary: f64,
    /// Prior variance of each mu_j.
    pub s2: f64,
    /// Support of the uniform prior on sigma_j (the standard deviation).
    pub sigma_bounds: (f64, f64),
    /// Support of the uniform prior on zeta.
    pub zeta_bounds: (f64, f64),
    /// Path prior decay per second of expected travel time.
    pub c: f64,
    /// Dirichlet concentration scale for path-move section times.
    pub alpha: f64,
    /// Dirichlet concentration scale for pairwise time moves.
    pub alpha_prime: f64,
    /// Measured GPS speeds are raised to this floor (m/s) before use.
    pub speed_floor: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            prior_speed_primary: 15.6,
            prior_speed_secondary: 11.2,
            prior_speed_tertiary: 6.7,
            s2: 1.0,
            sigma_bounds: (0.05, 1.5),
            zeta_bounds: (0.01, 0.5),
            c: 0.01,
            alpha: 1.0,
            alpha_prime: 0.5,
            speed_floor: 2.2352,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("prior_speed_primary", self.prior_speed_primary),
            ("prior_speed_secondary", self.prior_speed_secondary),
            ("prior_speed_tertiary", self.prior_speed_tertiary),
            ("s2", self.s2),
            ("alpha", self.alpha),
            ("alpha_prime", self.alpha_prime),
            ("speed_floor", self.speed_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::BadHyperparam {
                    name,
                    msg: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(ModelError::BadHyperparam {
                name: "c",
                msg: format!("must be nonnegative, got {}", self.c),
            });
        }
        for (name, (lo, hi)) in
            [("sigma_bounds", self.sigma_bounds), ("zeta_bounds", self.zeta_bounds)]
        {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(ModelError::BadHyperparam {
                    name,
                    msg: format!("need 0 < lo < hi, got ({lo}, {hi})"),
                });
            }
        }
        Ok(())
    }

    pub fn prior_speed(&self, class: RoadClass) -> f64 {
        match class {
            RoadClass::Primary => self.prior_speed_primary,
            RoadClass::Secondary => self.prior_speed_secondary,
            RoadClass::Tertiary => self.prior_speed_tertiary,
        }
    }

    /// Prior mean of `mu` for an arc: log of the time the arc takes at its
    /// class's prior speed.
    pub fn prior_mean_mu(&self, arc: &Arc) -> f64 {
        (arc.length / self.prior_speed(arc.class)).ln()
    }
}

/// Per-arc travel times for one trip, aligned with its path.
#[derive(Debug, Clone, PartialEq)]
pub struct TripTimes {
    values: Vec<f64>,
}

impl TripTimes {
    pub fn new(values: Vec<f64>) -> Result<TripTimes, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyTripTimes);
        }
        for &v in &values {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::BadTripTime(v));
            }
        }
        Ok(TripTimes { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn matches_total(&self, total: f64) -> bool {
        (self.sum() - total).abs() <= TIME_SUM_TOL
    }

    /// Direct mutable access for the sampler, which maintains the positivity
    /// and sum invariants itself and asserts them in debug builds.
    pub(crate) fn values_mut(&mut self) -> &mut Vec<f64> {
        &mut self.values
    }
}

/// Unnormalized log prior of a path whose arcs' expected times sum to
/// `theta_sum`. The normalizer over all simple paths between the endpoints
/// cancels in every ratio the sampler forms, so it is never computed.
pub fn path_log_prior_unnorm(c: f64, theta_sum: f64) -> f64 {
    -c * theta_sum
}

/// Sum of expected arc travel times along a path, with `params` indexed like
/// [`RoadNetwork::arcs`].
pub fn path_theta_sum(net: &RoadNetwork, params: &[ArcParams], path: &Path) -> f64 {
    path.arcs().iter().map(|&a| params[net.arc_index(a).expect("arc in network")].theta()).sum()
}

struct Segment {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    speed: f64,
    t_start: f64,
    time: f64,
}

/// Deterministic piecewise-linear trajectory implied by a path and per-arc
/// times: constant speed along each arc, no dwell at intersections.
pub struct Trajectory {
    segments: Vec<Segment>,
    total: f64,
}

impl Trajectory {
    pub fn build(net: &RoadNetwork, path: &Path, times: &[f64]) -> Result<Trajectory, ModelError> {
        if path.len() != times.len() {
            return Err(ModelError::LengthMismatch { path: path.len(), times: times.len() });
        }
        if path.is_empty() {
            return Err(ModelError::EmptyTripTimes);
        }
        let mut segments = Vec::with_capacity(path.len());
        let mut t_cum = 0.0;
        for (&aid, &time) in path.arcs().iter().zip(times) {
            if !(time > 0.0 && time.is_finite()) {
                return Err(ModelError::BadTripTime(time));
            }
            let arc = net.arc(aid);
            let from = net.node(arc.from);
            let to = net.node(arc.to);
            segments.push(Segment {
                x0: from.x,
                y0: from.y,
                dx: to.x - from.x,
                dy: to.y - from.y,
                speed: arc.length / time,
                t_start: t_cum,
                time,
            });
            t_cum += time;
        }
        Ok(Trajectory { segments, total: t_cum })
    }

    pub fn total_time(&self) -> f64 {
        self.total
    }

    /// Location and speed at `t` seconds after the trip start. Instants on an
    /// arc boundary belong to the later arc; `t = total` belongs to the last
    /// arc. Queries are clamped into `[0, total]`.
    pub fn at(&self, t: f64) -> TrajectoryPoint {
        debug_assert!((-TIME_SUM_TOL..=self.total + TIME_SUM_TOL).contains(&t));
        let t = t.clamp(0.0, self.total);
        // Boundary instants belong to the later arc, so the chosen segment is
        // the last one starting at or before t (the final segment for t at
        // the very end).
        let k = self
            .segments
            .partition_point(|s| s.t_start <= t)
            .saturating_sub(1);
        let s = &self.segments[k];
        let frac = ((t - s.t_start) / s.time).clamp(0.0, 1.0);
        TrajectoryPoint { x: s.x0 + frac * s.dx, y: s.y0 + frac * s.dy, speed: s.speed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

/// Log likelihood contribution of a single GPS reading given the trajectory
/// point at the reading's time: bivariate normal location error plus normal
/// error on log speed. The caller is responsible for flooring the measured
/// speed; it must be positive here.
pub fn gps_loglik(reading: &GpsReading, at: &TrajectoryPoint, noise: &GpsNoise) -> f64 {
    debug_assert!(reading.speed > 0.0);
    noise.loc_loglik(reading.x - at.x, reading.y - at.y)
        + noise.speed_loglik(reading.speed, at.speed)
}

/// Full log likelihood contribution of one trip under a candidate path and
/// per-arc times: unnormalized path prior, lognormal time densities, and all
/// GPS reading terms. Measured speeds are floored at `hyper.speed_floor`.
pub fn trip_loglik(
    net: &RoadNetwork,
    trip: &Trip,
    path: &Path,
    times: &[f64],
    params: &[ArcParams],
    noise: &GpsNoise,
    hyper: &Hyperparams,
) -> f64 {
    debug_assert_eq!(path.len(), times.len());
    let mut ll = 0.0;
    let mut theta_sum = 0.0;
    for (&aid, &t) in path.arcs().iter().zip(times) {
        let p = &params[net.arc_index(aid).expect("arc in network")];
        theta_sum += p.theta();
        ll += ln_lognormal_pdf(t, p.mu, p.sigma2);
    }
    ll += path_log_prior_unnorm(hyper.c, theta_sum);
    if !trip.readings.is_empty() {
        let traj = Trajectory::build(net, path, times).expect("valid path and times");
        for r in &trip.readings {
            let at = traj.at(r.t - trip.t_start);
            let v = r.speed.max(hyper.speed_floor);
            ll += noise.loc_loglik(r.x - at.x, r.y - at.y) + noise.speed_loglik(v, at.speed);
        }
    }
    ll
}

/// Joint log prior density of all arc parameters and `zeta2`, over the
/// (mu, sigma2, zeta2) parameterization: normal terms for each mu, and the
/// uniform-on-standard-deviation priors expressed with their change of
/// variable to the variance scale. Returns `-inf` outside the support.
pub fn log_prior_params(
    net: &RoadNetwork,
    params: &[ArcParams],
    zeta2: f64,
    hyper: &Hyperparams,
) -> f64 {
    assert_eq!(params.len(), net.num_arcs());
    let mut lp = 0.0;
    for (arc, p) in net.arcs().iter().zip(params) {
        lp += ln_normal_pdf(p.mu, hyper.prior_mean_mu(arc), hyper.s2);
        lp += ln_uniform_sd_prior_on_variance(p.sigma2, hyper.sigma_bounds);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
    }
    lp + ln_uniform_sd_prior_on_variance(zeta2, hyper.zeta_bounds)
}

/// Log density over a variance `v` when the prior is uniform on the standard
/// deviation `sqrt(v)` over `[lo, hi]`: includes the 1/(2 sqrt(v)) Jacobian.
pub fn ln_uniform_sd_prior_on_variance(v: f64, (lo, hi): (f64, f64)) -> f64 {
    let sd = v.sqrt();
    if sd >= lo && sd <= hi {
        -(hi - lo).ln() - (2.0 * sd).ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

pub fn ln_lognormal_pdf(t: f64, mu: f64, sigma2: f64) -> f64 {
    debug_assert!(t > 0.0);
    let lt = t.ln();
    -lt - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - (lt - mu).powi(2) / (2.0 * sigma2)
}

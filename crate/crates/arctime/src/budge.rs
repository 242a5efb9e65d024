//! Trip-level baseline that ignores the network: trips are binned by a
//! route-distance surrogate with equal counts per bin, log travel times in
//! each bin get a location-scale Student-t fit, and quantiles are read off
//! the fitted t after linear interpolation between bin centers.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BudgeError {
    #[error("need at least {need} trips to fit, got {have}")]
    NotEnoughData { have: usize, need: usize },
    #[error("trip {index} has a non-positive distance or time")]
    BadSample { index: usize },
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgeBin {
    /// Median route distance of the trips in the bin, meters.
    pub center_m: f64,
    /// Location of the t fit to log travel times.
    pub location: f64,
    /// Scale of the t fit, strictly positive.
    pub scale: f64,
    /// Degrees of freedom, profiled over a grid and refined.
    pub dof: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgeModel {
    /// Bins in increasing order of center distance.
    pub bins: Vec<BudgeBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgeConfig {
    pub n_bins: usize,
    pub min_per_bin: usize,
}

impl Default for BudgeConfig {
    fn default() -> Self {
        BudgeConfig { n_bins: 10, min_per_bin: 30 }
    }
}

/// Degrees-of-freedom profile grid. The final value is refined by a golden
/// section search between the grid neighbors of the best grid point.
pub const DOF_GRID: [f64; 13] =
    [2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0, 20.0, 30.0, 50.0, 75.0, 100.0];

pub const DOF_BOUNDS: (f64, f64) = (2.5, 100.0);

const SCALE_FLOOR: f64 = 1e-9;

/// Fits the binned model to (route distance m, travel time s) pairs. Bins
/// hold equal counts (earlier bins take the remainder), and the requested
/// bin count shrinks so every bin keeps at least `min_per_bin` trips.
pub fn fit_budge(samples: &[(f64, f64)], cfg: BudgeConfig) -> Result<BudgeModel, BudgeError> {
    for (i, &(d, t)) in samples.iter().enumerate() {
        if !(d > 0.0 && d.is_finite() && t > 0.0 && t.is_finite()) {
            return Err(BudgeError::BadSample { index: i });
        }
    }
    if samples.len() < cfg.min_per_bin.max(2) {
        return Err(BudgeError::NotEnoughData {
            have: samples.len(),
            need: cfg.min_per_bin.max(2),
        });
    }
    let n_bins = cfg.n_bins.min(samples.len() / cfg.min_per_bin).max(1);
    let mut sorted: Vec<(f64, f64)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let base = sorted.len() / n_bins;
    let rem = sorted.len() % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut at = 0usize;
    for b in 0..n_bins {
        let size = base + usize::from(b < rem);
        let chunk = &sorted[at..at + size];
        at += size;
        let center_m = median(chunk.iter().map(|&(d, _)| d));
        let logs: Vec<f64> = chunk.iter().map(|&(_, t)| t.ln()).collect();
        let (location, scale, dof) = fit_t_location_scale(&logs);
        bins.push(BudgeBin { center_m, location, scale, dof, count: size });
    }
    Ok(BudgeModel { bins })
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Location-scale Student-t maximum likelihood with the degrees of freedom
/// profiled: EM at each grid value, then a golden section refinement around
/// the best grid point.
pub fn fit_t_location_scale(x: &[f64]) -> (f64, f64, f64) {
    debug_assert!(!x.is_empty());
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    if var < 1e-18 {
        // All observations identical: the likelihood is unbounded at any
        // dof, so report the common point with a token spread.
        return (mean, SCALE_FLOOR, DOF_BOUNDS.1);
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut fits = Vec::with_capacity(DOF_GRID.len());
    for (i, &nu) in DOF_GRID.iter().enumerate() {
        let (loc, scale, ll) = t_em_fixed_dof(x, nu);
        fits.push((loc, scale));
        if ll > best.0 {
            best = (ll, i);
        }
    }
    let i = best.1;
    let lo = if i == 0 { DOF_BOUNDS.0 } else { DOF_GRID[i - 1] };
    let hi = if i + 1 == DOF_GRID.len() { DOF_BOUNDS.1 } else { DOF_GRID[i + 1] };
    let nu = golden_max(lo, hi, 1e-4, |nu| t_em_fixed_dof(x, nu).2);
    let (loc, scale, ll) = t_em_fixed_dof(x, nu);
    if ll >= best.0 {
        (loc, scale, nu)
    } else {
        let (loc, scale) = fits[i];
        (loc, scale, DOF_GRID[i])
    }
}

/// EM for a location-scale t with fixed dof. Returns (location, scale,
/// maximized log-likelihood).
pub fn t_em_fixed_dof(x: &[f64], nu: f64) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mut loc = median(x.iter().copied());
    let mean = x.iter().sum::<f64>() / n;
    let mut scale =
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(SCALE_FLOOR);
    for _ in 0..500 {
        let mut wsum = 0.0;
        let mut wxsum = 0.0;
        for &xi in x {
            let z = (xi - loc) / scale;
            let w = (nu + 1.0) / (nu + z * z);
            wsum += w;
            wxsum += w * xi;
        }
        let new_loc = wxsum / wsum;
        let mut s2 = 0.0;
        for &xi in x {
            let z = (xi - loc) / scale;
            let w = (nu + 1.0) / (nu + z * z);
            s2 += w * (xi - new_loc).powi(2);
        }
        let new_scale = (s2 / n).sqrt().max(SCALE_FLOOR);
        let done = (new_loc - loc).abs() < 1e-12 * (1.0 + loc.abs())
            && (new_scale - scale).abs() < 1e-12 * (1.0 + scale);
        loc = new_loc;
        scale = new_scale;
        if done {
            break;
        }
    }
    (loc, scale, t_loglik(x, loc, scale, nu))
}

fn t_loglik(x: &[f64], loc: f64, scale: f64, nu: f64) -> f64 {
    let norm = ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - scale.ln();
    x.iter()
        .map(|&xi| {
            let z = (xi - loc) / scale;
            norm - 0.5 * (nu + 1.0) * (1.0 + z * z / nu).ln()
        })
        .sum()
}

fn golden_max(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

impl BudgeModel {
    fn bin_quantile(bin: &BudgeBin, q: f64) -> f64 {
        let t = StudentsT::new(0.0, 1.0, bin.dof).expect("dof is positive");
        (bin.location + bin.scale * t.inverse_cdf(q)).exp()
    }

    /// Travel time quantile at a route distance: per-bin t quantiles in time
    /// space, linearly interpolated between adjacent bin centers and clamped
    /// to the end bins outside the covered range.
    pub fn quantile(&self, distance_m: f64, q: f64) -> f64 {
        assert!(q > 0.0 && q < 1.0, "quantile level must be inside (0, 1)");
        let bins = &self.bins;
        if distance_m <= bins[0].center_m {
            return Self::bin_quantile(&bins[0], q);
        }
        if distance_m >= bins[bins.len() - 1].center_m {
            return Self::bin_quantile(&bins[bins.len() - 1], q);
        }
        let hi = bins.partition_point(|b| b.center_m < distance_m);
        let (a, b) = (&bins[hi - 1], &bins[hi]);
        let w = (distance_m - a.center_m) / (b.center_m - a.center_m);
        (1.0 - w) * Self::bin_quantile(a, q) + w * Self::bin_quantile(b, q)
    }

    /// Median travel time at a route distance.
    pub fn point(&self, distance_m: f64) -> f64 {
        self.quantile(distance_m, 0.5)
    }

    /// P(T <= t) at a route distance, inverted from the quantile function by
    /// bisection (the interpolated quantile is strictly increasing in q).
    pub fn cdf(&self, distance_m: f64, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
        if t <= self.quantile(distance_m, lo) {
            return 0.0;
        }
        if t >= self.quantile(distance_m, hi) {
            return 1.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.quantile(distance_m, mid) < t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Writes the model as CSV: bin,center_m,location,scale,dof,count.
    pub fn save(&self, path: &FsPath) -> Result<(), std::io::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin", "center_m", "location", "scale", "dof", "count"])?;
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record(&[
                i.to_string(),
                b.center_m.to_string(),
                b.location.to_string(),
                b.scale.to_string(),
                b.dof.to_string(),
                b.count.to_string(),
            ])?;
        }
        w.flush()
    }

    pub fn load(path: &FsPath) -> Result<BudgeModel, BudgeError> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            bin: usize,
            center_m: f64,
            location: f64,
            scale: f64,
            dof: f64,
            count: usize,
        }
        let fname = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(&fname, e))?;
        let mut bins = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let r = row.map_err(|e| csv_err(&fname, e))?;
            bins.push(BudgeBin {
                center_m: r.center_m,
                location: r.location,
                scale: r.scale,
                dof: r.dof,
                count: r.count,
            });
        }
        if bins.is_empty() {
            return Err(BudgeError::Format { file: fname, msg: "no bins".to_string() });
        }
        if bins.windows(2).any(|w| w[0].center_m > w[1].center_m) {
            return Err(BudgeError::Format {
                file: fname,
                msg: "bin centers are not sorted".to_string(),
            });
        }
        Ok(BudgeModel { bins })
    }
}

fn csv_err(file: &str, e: csv::Error) -> BudgeError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => BudgeError::Io { file: file.to_string(), source: io },
            _ => unreachable!(),
        }
    } else {
        BudgeError::Format { file: file.to_string(), msg: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t_sample<R: Rng>(nu: f64, rng: &mut R) -> f64 {
        // t = z / sqrt(chi2 / nu) built from normals so the generator stays
        // independent of the fitted density.
        let z: f64 = StandardNormal.sample(rng);
        let chi2: f64 = (0..nu.round() as usize)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g * g
            })
            .sum();
        z / (chi2 / nu.round()).sqrt()
    }

    #[test]
    fn equal_count_binning() {
        let samples: Vec<(f64, f64)> =
            (0..100).map(|i| (100.0 + i as f64, 60.0 + (i % 7) as f64)).collect();
        let model =
            fit_budge(&samples, BudgeConfig { n_bins: 3, min_per_bin: 10 }).unwrap();
        assert_eq!(model.bins.len(), 3);
        assert_eq!(
            model.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            vec![34, 33, 33]
        );
        // First bin holds the 34 shortest distances 100..133; its center is
        // the median (116.5).
        assert_relative_eq!(model.bins[0].center_m, 116.5);
        assert!(model.bins.windows(2).all(|w| w[0].center_m < w[1].center_m));
    }

    #[test]
    fn bin_count_shrinks_to_respect_minimum() {
        let samples: Vec<(f64, f64)> =
            (0..70).map(|i| (100.0 + i as f64, 60.0)).collect();
        let model =
            fit_budge(&samples, BudgeConfig { n_bins: 10, min_per_bin: 30 }).unwrap();
        assert_eq!(model.bins.len(), 2);
        let err = fit_budge(&samples[..20], BudgeConfig::default()).unwrap_err();
        matches!(err, BudgeError::NotEnoughData { .. });
    }

    #[test]
    fn degenerate_bin_all_times_equal() {
        let samples: Vec<(f64, f64)> = (0..40).map(|i| (100.0 + i as f64, 60.0)).collect();
        let model = fit_budge(&samples, BudgeConfig { n_bins: 1, min_per_bin: 30 }).unwrap();
        let b = &model.bins[0];
        assert_relative_eq!(b.location, 60.0f64.ln(), max_relative = 1e-12);
        assert!(b.scale <= 1e-9);
        // Quantiles collapse onto the common value.
        assert_relative_eq!(model.quantile(120.0, 0.025), 60.0, max_relative = 1e-6);
        assert_relative_eq!(model.quantile(120.0, 0.975), 60.0, max_relative = 1e-6);
    }

    #[test]
    fn t_fit_recovers_simulated_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (loc, scale, nu) = (2.0, 0.3, 5.0);
        let x: Vec<f64> = (0..6000).map(|_| loc + scale * t_sample(nu, &mut rng)).collect();
        let (l, s, d) = fit_t_location_scale(&x);
        assert!((l - loc).abs() < 0.02, "location {l}");
        assert!((s / scale - 1.0).abs() < 0.08, "scale {s}");
        assert!((3.0..=8.0).contains(&d), "dof {d}");
    }

    #[test]
    fn normal_data_pushes_dof_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..2000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + 0.5 * z
            })
            .collect();
        let (l, s, d) = fit_t_location_scale(&x);
        assert!((l - 1.0).abs() < 0.05);
        assert!((s - 0.5).abs() < 0.05);
        assert!(d >= 20.0, "normal data should profile to a heavy dof, got {d}");
    }

    #[test]
    fn quantiles_increase_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<(f64, f64)> = (0..300)
            .map(|_| {
                let d = rng.gen_range(200.0..3000.0);
                let z: f64 = StandardNormal.sample(&mut rng);
                (d, (d / 12.0) * (0.25 * z).exp())
            })
            .collect();
        let model = fit_budge(&samples, BudgeConfig { n_bins: 5, min_per_bin: 30 }).unwrap();
        for d in [150.0, 700.0, 1900.0, 3500.0] {
            let mut prev = 0.0;
            for q in [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
                let v = model.quantile(d, q);
                assert!(v > prev, "quantile must increase in q");
                prev = v;
            }
        }
        assert_relative_eq!(model.point(700.0), model.quantile(700.0, 0.5));
    }

    #[test]
    fn interpolation_between_bin_centers() {
        let bins = vec![
            BudgeBin { center_m: 1000.0, location: 4.0, scale: 0.2, dof: 10.0, count: 50 },
            BudgeBin { center_m: 2000.0, location: 4.6, scale: 0.25, dof: 12.0, count: 50 },
        ];
        let model = BudgeModel { bins };
        let q = 0.8;
        let qa = BudgeModel::bin_quantile(&model.bins[0], q);
        let qb = BudgeModel::bin_quantile(&model.bins[1], q);
        // Exactly at a center: that bin's quantile. Midway: the average.
        assert_relative_eq!(model.quantile(1000.0, q), qa);
        assert_relative_eq!(model.quantile(2000.0, q), qb);
        assert_relative_eq!(model.quantile(1500.0, q), 0.5 * (qa + qb), max_relative = 1e-12);
        assert_relative_eq!(model.quantile(1250.0, q), 0.75 * qa + 0.25 * qb, max_relative = 1e-12);
        // Clamped outside the covered range.
        assert_relative_eq!(model.quantile(10.0, q), qa);
        assert_relative_eq!(model.quantile(99999.0, q), qb);
    }

    #[test]
    fn cdf_inverts_quantile() {
        let bins = vec![
            BudgeBin { center_m: 1000.0, location: 4.0, scale: 0.2, dof: 10.0, count: 50 },
            BudgeBin { center_m: 2000.0, location: 4.6, scale: 0.25, dof: 12.0, count: 50 },
        ];
        let model = BudgeModel { bins };
        for d in [800.0, 1400.0, 2300.0] {
            // The t inverse CDF itself carries roughly 1e-8 numeric noise,
            // so the round trip cannot be sharper than that.
            for q in [0.025, 0.2, 0.5, 0.8, 0.975] {
                let t = model.quantile(d, q);
                assert_relative_eq!(model.cdf(d, t), q, epsilon = 1e-6);
            }
            assert_eq!(model.cdf(d, 0.0), 0.0);
            assert_eq!(model.cdf(d, 1e9), 1.0);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<(f64, f64)> = (0..200)
            .map(|_| {
                let d = rng.gen_range(200.0..3000.0);
                let z: f64 = StandardNormal.sample(&mut rng);
                (d, (d / 12.0) * (0.25 * z).exp())
            })
            .collect();
        let model = fit_budge(&samples, BudgeConfig { n_bins: 4, min_per_bin: 30 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("budge_model.csv");
        model.save(&path).unwrap();
        let loaded = BudgeModel::load(&path).unwrap();
        assert_eq!(loaded, model);
    }
}

//! Zone-wise wind forecast uncertainty.
//!
//! A normalized forecast `p~ = forecast / p_max` falls into one of three
//! zones. Each zone carries a bias `mu_z` and spread `sigma_z` of the
//! normalized error `(realization - forecast) / p_max`, and the realization
//! is modelled as `Beta(alpha, beta)` on `[0, 1]` with mean `p~ + mu_z` and
//! variance `sigma_z^2`.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;
use thiserror::Error;

/// Clamp applied to the shifted mean before moment matching.
pub const MU_EFF_MIN: f64 = 0.005;
pub const MU_EFF_MAX: f64 = 0.995;

#[derive(Debug, Error, PartialEq)]
pub enum WindError {
    #[error("normalized forecast {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid zone thresholds tau1 = {0}, tau2 = {1}")]
    InvalidThresholds(f64, f64),
    #[error("p_max must be positive, got {0}")]
    NonpositivePmax(f64),
    #[error("zone {zone} has {n} samples, at least 2 are required")]
    EmptyZone { zone: Zone, n: usize },
    #[error("zone {0} has zero error variance")]
    DegenerateZone(Zone),
    #[error("infeasible moments: mean {mean}, variance {var} give K = {k}")]
    InfeasibleMoments { mean: f64, var: f64, k: f64 },
    #[error("archive error: {0}")]
    Archive(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Zone {
    Low,
    Mid,
    High,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::Low, Zone::Mid, Zone::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Low => "Low",
            Zone::Mid => "Mid",
            Zone::High => "High",
        }
    }

    pub fn parse(s: &str) -> Option<Zone> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Zone::Low),
            "mid" => Some(Zone::Mid),
            "high" => Some(Zone::High),
            _ => None,
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneConfig {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        ZoneConfig { tau1: 0.3, tau2: 0.7 }
    }
}

impl ZoneConfig {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self, WindError> {
        if 0.0 < tau1 && tau1 < tau2 && tau2 < 1.0 {
            Ok(ZoneConfig { tau1, tau2 })
        } else {
            Err(WindError::InvalidThresholds(tau1, tau2))
        }
    }

    /// Half-open interval `[lo, hi)` of normalized forecasts in `zone`.
    pub fn bounds(&self, zone: Zone) -> (f64, f64) {
        match zone {
            Zone::Low => (0.0, self.tau1),
            Zone::Mid => (self.tau1, self.tau2),
            Zone::High => (self.tau2, 1.0),
        }
    }
}

pub fn classify_zone(p_tilde: f64, cfg: &ZoneConfig) -> Result<Zone, WindError> {
    if !(0.0..=1.0).contains(&p_tilde) {
        return Err(WindError::OutOfRange(p_tilde));
    }
    Ok(if p_tilde < cfg.tau1 {
        Zone::Low
    } else if p_tilde < cfg.tau2 {
        Zone::Mid
    } else {
        Zone::High
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneStats {
    pub zone: Zone,
    pub mu_z: f64,
    pub sigma_z: f64,
    /// Archive size behind the estimate; 0 for the built-in reference values.
    pub n_samples: usize,
}

impl ZoneStats {
    pub fn is_degenerate(&self) -> bool {
        !(self.sigma_z > 0.0)
    }
}

/// Reference statistics of the normalized forecast error, Low/Mid/High.
pub fn reference_zone_stats() -> [ZoneStats; 3] {
    [
        ZoneStats { zone: Zone::Low, mu_z: 0.011, sigma_z: 0.035, n_samples: 0 },
        ZoneStats { zone: Zone::Mid, mu_z: 0.031, sigma_z: 0.081, n_samples: 0 },
        ZoneStats { zone: Zone::High, mu_z: 0.013, sigma_z: 0.100, n_samples: 0 },
    ]
}

/// Per-zone sample mean and standard deviation of the normalized error.
///
/// A zone whose errors are all equal comes back with `sigma_z = 0`; check
/// [`ZoneStats::is_degenerate`] before building a Beta law from it.
pub fn fit_zone_stats(pairs: &[(f64, f64)], p_max: f64, cfg: &ZoneConfig) -> Result<[ZoneStats; 3], WindError> {
    if !(p_max > 0.0) {
        return Err(WindError::NonpositivePmax(p_max));
    }
    let mut errs: [Vec<f64>; 3] = Default::default();
    for &(forecast, realized) in pairs {
        let zone = classify_zone(forecast / p_max, cfg)?;
        errs[zone.index()].push((realized - forecast) / p_max);
    }
    let mut out = reference_zone_stats();
    for zone in Zone::ALL {
        let e = &errs[zone.index()];
        let n = e.len();
        if n < 2 {
            return Err(WindError::EmptyZone { zone, n });
        }
        let mean = e.iter().sum::<f64>() / n as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mut sigma = var.sqrt();
        // rounding noise around a constant error
        if sigma <= 1e-12 * mean.abs() {
            sigma = 0.0;
        }
        if sigma == 0.0 {
            log::warn!("zone {zone} has zero error variance");
        }
        out[zone.index()] = ZoneStats { zone, mu_z: mean, sigma_z: sigma, n_samples: n };
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSpec {
    pub alpha: f64,
    pub beta: f64,
    pub mu_eff: f64,
    /// True when the shifted mean had to be clamped into `[0.005, 0.995]`.
    pub clamped: bool,
}

impl BetaSpec {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    /// Raw moment `E[X^n]`.
    pub fn raw_moment(&self, n: u32) -> f64 {
        (0..n).map(|r| (self.alpha + r as f64) / (self.alpha + self.beta + r as f64)).product()
    }

    pub fn quantile(&self, u: f64) -> f64 {
        inv_beta_reg(self.alpha, self.beta, u.clamp(0.0, 1.0))
    }
}

/// Moment matching: the Beta law on `[0, 1]` with the given mean and variance.
pub fn beta_from_moments(mean: f64, var: f64) -> Result<BetaSpec, WindError> {
    let k = mean * (1.0 - mean) / var - 1.0;
    if !(mean > 0.0 && mean < 1.0) || !(var > 0.0) || !(k > 0.0) {
        return Err(WindError::InfeasibleMoments { mean, var, k });
    }
    Ok(BetaSpec { alpha: mean * k, beta: (1.0 - mean) * k, mu_eff: mean, clamped: false })
}

/// Beta law of the realization for normalized forecast `p_tilde`.
pub fn beta_spec(p_tilde: f64, stats: &ZoneStats) -> Result<BetaSpec, WindError> {
    if !(0.0..=1.0).contains(&p_tilde) {
        return Err(WindError::OutOfRange(p_tilde));
    }
    if stats.is_degenerate() {
        return Err(WindError::DegenerateZone(stats.zone));
    }
    let raw = p_tilde + stats.mu_z;
    let mu = raw.clamp(MU_EFF_MIN, MU_EFF_MAX);
    let clamped = mu != raw;
    if clamped {
        log::info!("shifted mean {raw:.4} clamped to {mu}");
    }
    let mut spec = beta_from_moments(mu, stats.sigma_z * stats.sigma_z)?;
    spec.clamped = clamped;
    Ok(spec)
}

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_with<R: Rng + ?Sized>(spec: &BetaSpec, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| spec.quantile(rng.gen::<f64>())).collect()
}

/// `n` draws of `Beta(alpha, beta)` by inverse CDF.
pub fn sample(spec: &BetaSpec, n: usize, seed: u64) -> Vec<f64> {
    sample_with(spec, n, &mut stream_rng(seed, 0))
}

// ---------------------------------------------------------------------------
// archives

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveRow {
    timestamp: String,
    forecast_mw: f64,
    realized_mw: f64,
}

/// Reads `(forecast_mw, realized_mw)` pairs from a `timestamp,forecast_mw,realized_mw` CSV.
pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>, WindError> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| WindError::Archive(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<ArchiveRow>() {
        let row = row.map_err(|e| WindError::Archive(format!("{}: {e}", path.display())))?;
        out.push((row.forecast_mw, row.realized_mw));
    }
    Ok(out)
}

/// Synthetic archive whose per-zone errors follow `stats`.
///
/// Forecasts are uniform within each zone; realizations come from the
/// zone's Beta law, so the recovered error moments match `stats` up to the
/// mean clamp near the support edges.
pub fn synth_archive(
    stats: &[ZoneStats; 3],
    cfg: &ZoneConfig,
    p_max: f64,
    n_per_zone: usize,
    seed: u64,
) -> Result<Vec<(String, f64, f64)>, WindError> {
    let mut rows = Vec::with_capacity(3 * n_per_zone);
    for zone in Zone::ALL {
        let st = &stats[zone.index()];
        let (lo, hi) = cfg.bounds(zone);
        let mut rng = stream_rng(seed, zone.index() as u64);
        let mut made = 0;
        while made < n_per_zone {
            let p = lo + (hi - lo) * rng.gen::<f64>();
            let spec = match beta_spec(p, st) {
                Ok(s) if !s.clamped => s,
                Ok(_) | Err(WindError::InfeasibleMoments { .. }) => continue,
                Err(e) => return Err(e),
            };
            let x = spec.quantile(rng.gen::<f64>());
            // the archive forecast is the unbiased point, the realization carries the error
            rows.push((format!("{}-{:06}", zone.as_str(), made), p * p_max, x * p_max));
            made += 1;
        }
    }
    Ok(rows)
}

pub fn write_archive(path: impl AsRef<Path>, rows: &[(String, f64, f64)]) -> Result<(), WindError> {
    let path = path.as_ref();
    let err = |e: csv::Error| WindError::Archive(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for (ts, f, r) in rows {
        w.serialize(ArchiveRow { timestamp: ts.clone(), forecast_mw: *f, realized_mw: *r }).map_err(err)?;
    }
    w.flush().map_err(|e| WindError::Archive(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ZoneStatsRow {
    zone: String,
    mu_z: f64,
    sigma_z: f64,
    n_samples: usize,
}

pub fn write_zone_stats(path: impl AsRef<Path>, stats: &[ZoneStats; 3]) -> Result<(), WindError> {
    let path = path.as_ref();
    let err = |e: csv::Error| WindError::Archive(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for s in stats {
        w.serialize(ZoneStatsRow { zone: s.zone.to_string(), mu_z: s.mu_z, sigma_z: s.sigma_z, n_samples: s.n_samples })
            .map_err(err)?;
    }
    w.flush().map_err(|e| WindError::Archive(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_zone_stats(path: impl AsRef<Path>) -> Result<[ZoneStats; 3], WindError> {
    let path = path.as_ref();
    let err = |e: csv::Error| WindError::Archive(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let mut out: [Option<ZoneStats>; 3] = [None; 3];
    for row in rdr.deserialize::<ZoneStatsRow>() {
        let row = row.map_err(err)?;
        let zone = Zone::parse(&row.zone).ok_or_else(|| WindError::Archive(format!("unknown zone {:?}", row.zone)))?;
        out[zone.index()] = Some(ZoneStats { zone, mu_z: row.mu_z, sigma_z: row.sigma_z, n_samples: row.n_samples });
    }
    let mut res = reference_zone_stats();
    for zone in Zone::ALL {
        res[zone.index()] = out[zone.index()].ok_or(WindError::EmptyZone { zone, n: 0 })?;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zone_boundaries() {
        let cfg = ZoneConfig::default();
        assert_eq!(classify_zone(0.29, &cfg), Ok(Zone::Low));
        assert_eq!(classify_zone(0.30, &cfg), Ok(Zone::Mid));
        assert_eq!(classify_zone(0.70, &cfg), Ok(Zone::High));
        assert_eq!(classify_zone(1.0, &cfg), Ok(Zone::High));
        assert!(classify_zone(1.01, &cfg).is_err());
        assert!(classify_zone(-0.01, &cfg).is_err());
    }

    #[test]
    fn thresholds_checked() {
        assert!(ZoneConfig::new(0.7, 0.3).is_err());
        assert!(ZoneConfig::new(0.0, 0.3).is_err());
        assert!(ZoneConfig::new(0.3, 0.7).is_ok());
    }

    #[test]
    fn mid_example() {
        let mid = reference_zone_stats()[1];
        let s = beta_spec(0.5, &mid).unwrap();
        assert_relative_eq!(s.mu_eff, 0.531, epsilon = 1e-15);
        let k = s.alpha + s.beta;
        assert!((k - 36.958).abs() < 1e-3, "K = {k}");
        assert!((s.alpha - 19.625).abs() < 1e-3, "alpha = {}", s.alpha);
        assert!((s.beta - 17.333).abs() < 1e-3, "beta = {}", s.beta);
    }

    #[test]
    fn arcsine_and_variance_bound() {
        let s = beta_from_moments(0.5, 0.125).unwrap();
        assert_relative_eq!(s.alpha, 0.5, epsilon = 1e-15);
        assert_relative_eq!(s.beta, 0.5, epsilon = 1e-15);
        assert!(matches!(beta_from_moments(0.5, 0.25), Err(WindError::InfeasibleMoments { .. })));
    }

    #[test]
    fn clamp_near_rated() {
        let low = reference_zone_stats()[0];
        let s = beta_spec(0.0, &low).unwrap();
        assert!(!s.clamped);
        let hi = ZoneStats { zone: Zone::High, mu_z: 0.013, sigma_z: 0.01, n_samples: 0 };
        let s = beta_spec(0.999, &hi).unwrap();
        assert!(s.clamped);
        assert_eq!(s.mu_eff, MU_EFF_MAX);
    }

    #[test]
    fn constant_error_is_degenerate() {
        let cfg = ZoneConfig::default();
        let pairs: Vec<(f64, f64)> =
            [10.0, 20.0, 50.0, 60.0, 80.0, 90.0].iter().map(|&f| (f, f + 2.0)).collect();
        let st = fit_zone_stats(&pairs, 100.0, &cfg).unwrap();
        for s in st {
            assert_relative_eq!(s.mu_z, 0.02, epsilon = 1e-12);
            assert!(s.is_degenerate());
        }
        assert!(matches!(beta_spec(0.5, &st[1]), Err(WindError::DegenerateZone(Zone::Mid))));
    }

    #[test]
    fn missing_zone() {
        let cfg = ZoneConfig::default();
        let pairs = vec![(10.0, 11.0), (20.0, 19.0), (80.0, 81.0), (90.0, 88.0)];
        assert_eq!(fit_zone_stats(&pairs, 100.0, &cfg), Err(WindError::EmptyZone { zone: Zone::Mid, n: 0 }));
    }

    #[test]
    fn uniform_sample_mean() {
        let s = beta_from_moments(0.5, 1.0 / 12.0).unwrap();
        assert_relative_eq!(s.alpha, 1.0, epsilon = 1e-12);
        let x = sample(&s, 100_000, 3);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        assert!((m - 0.5).abs() < 0.005);
    }

    #[test]
    fn mid_sample_mean_and_determinism() {
        let s = beta_spec(0.5, &reference_zone_stats()[1]).unwrap();
        let n = 100_000;
        let x = sample(&s, n, 11);
        let m = x.iter().sum::<f64>() / n as f64;
        assert!((m - 0.531).abs() < 3.0 * 0.081 / (n as f64).sqrt());
        assert_eq!(x, sample(&s, n, 11));
        assert_ne!(x[..10], sample(&s, 10, 12)[..]);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let s = beta_spec(0.1, &reference_zone_stats()[0]).unwrap();
        for u in [1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            let x = s.quantile(u);
            let back = statrs::function::beta::beta_reg(s.alpha, s.beta, x);
            assert!((back - u).abs() < 1e-9, "u = {u}, back = {back}");
        }
    }
}

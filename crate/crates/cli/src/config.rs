//! Run configuration: `key = value` file, then environment, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sopf_droop::harness::Strategy;
use sopf_droop::sopf::MarginRule;
use sopf_droop::wind::ZoneConfig;

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "SOPF_DROOP_OUT";

/// Keys accepted in the config file. Every key is optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub network: Option<PathBuf>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub epsilon: Option<f64>,
    pub degree: Option<usize>,
    pub margin_rule: Option<String>,
    pub k_base: Option<f64>,
    pub n_per_zone: Option<usize>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub zone_stats: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub calibration_subset: Option<usize>,
    pub forecast: Option<Vec<f64>>,
    pub strategies: Option<Vec<String>>,
    pub open_loop: Option<bool>,
    pub ipm_tol: Option<f64>,
    pub ipm_max_iter: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `other` win.
    pub fn overlay(self, other: FileConfig) -> FileConfig {
        macro_rules! pick {
            ($($f:ident),*) => { FileConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            network, tau1, tau2, epsilon, degree, margin_rule, k_base, n_per_zone, seed, mc_samples, out, jobs,
            zone_stats, calibration, calibration_subset, forecast, strategies, open_loop, ipm_tol, ipm_max_iter
        )
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `None` selects the built-in four-terminal test system.
    pub network: Option<PathBuf>,
    pub zones: ZoneConfig,
    pub epsilon: f64,
    pub degree: usize,
    pub margin_rule: MarginRule,
    pub k_base: f64,
    pub n_per_zone: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub out: PathBuf,
    pub jobs: usize,
    pub zone_stats: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub calibration_subset: Option<usize>,
    /// Normalized forecasts for `solve`, one per wind farm.
    pub forecast: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub open_loop: bool,
    pub ipm_tol: f64,
    pub ipm_max_iter: usize,
}

impl RunConfig {
    /// Resolves `file` over the defaults, then the output-directory
    /// environment variable, then `flags`.
    pub fn resolve(file: FileConfig, flags: FileConfig) -> Result<RunConfig> {
        let env = FileConfig { out: std::env::var_os(OUT_ENV).map(PathBuf::from), ..FileConfig::default() };
        let c = file.overlay(env).overlay(flags);
        let tau1 = c.tau1.unwrap_or(0.3);
        let tau2 = c.tau2.unwrap_or(0.7);
        let zones = ZoneConfig::new(tau1, tau2)
            .map_err(|_| anyhow::anyhow!("zone thresholds must satisfy 0 < tau1 < tau2 < 1, got ({tau1}, {tau2})"))?;
        let epsilon = c.epsilon.unwrap_or(0.05);
        if !(epsilon > 0.0 && epsilon < 0.5) {
            bail!("epsilon must lie in (0, 0.5), got {epsilon}");
        }
        let margin_rule = match c.margin_rule.as_deref() {
            None => MarginRule::ChebyshevOneSided,
            Some(s) => MarginRule::parse(s).with_context(|| format!("unknown margin_rule {s:?} (chebyshev or gaussian)"))?,
        };
        let k_base = c.k_base.unwrap_or(20.0);
        if !(k_base > 0.0) {
            bail!("k_base must be positive, got {k_base}");
        }
        let n_per_zone = c.n_per_zone.unwrap_or(30);
        if n_per_zone == 0 {
            bail!("n_per_zone must be at least 1");
        }
        let jobs = c.jobs.unwrap_or(1);
        if jobs == 0 {
            bail!("jobs must be at least 1");
        }
        let forecast = c.forecast.unwrap_or_else(|| vec![0.5, 0.5]);
        if let Some(p) = forecast.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            bail!("forecasts are normalized to [0, 1], got {p}");
        }
        let strategies = match c.strategies {
            None => Strategy::DEFAULT.to_vec(),
            Some(v) => v
                .iter()
                .map(|s| Strategy::parse(s).with_context(|| format!("unknown strategy {s:?} (adaptive, nodroop or k=<gain>)")))
                .collect::<Result<_>>()?,
        };
        if strategies.is_empty() {
            bail!("at least one strategy is required");
        }
        let ipm_tol = c.ipm_tol.unwrap_or(1e-6);
        if !(ipm_tol > 0.0) {
            bail!("ipm_tol must be positive, got {ipm_tol}");
        }
        Ok(RunConfig {
            network: c.network,
            zones,
            epsilon,
            degree: c.degree.unwrap_or(2),
            margin_rule,
            k_base,
            n_per_zone,
            seed: c.seed.unwrap_or(42),
            mc_samples: c.mc_samples.unwrap_or(10_000),
            out: c.out.unwrap_or_else(|| PathBuf::from("out")),
            jobs,
            zone_stats: c.zone_stats,
            calibration: c.calibration,
            calibration_subset: c.calibration_subset,
            forecast,
            strategies,
            open_loop: c.open_loop.unwrap_or(false),
            ipm_tol,
            ipm_max_iter: c.ipm_max_iter.unwrap_or(200),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(FileConfig::default(), FileConfig::default()).unwrap();
        assert_eq!((c.zones.tau1, c.zones.tau2), (0.3, 0.7));
        assert_eq!(c.epsilon, 0.05);
        assert_eq!(c.degree, 2);
        assert_eq!(c.k_base, 20.0);
        assert_eq!(c.n_per_zone, 30);
        assert_eq!(c.jobs, 1);
        assert_eq!(c.margin_rule, MarginRule::ChebyshevOneSided);
    }

    #[test]
    fn flags_win_and_bad_values_fail() {
        let file: FileConfig = toml::from_str("epsilon = 0.1\nseed = 3\n").unwrap();
        let flags = FileConfig { seed: Some(9), ..FileConfig::default() };
        let c = RunConfig::resolve(file, flags).unwrap();
        assert_eq!((c.epsilon, c.seed), (0.1, 9));
        let bad = FileConfig { epsilon: Some(0.6), ..FileConfig::default() };
        assert!(RunConfig::resolve(bad, FileConfig::default()).is_err());
        assert!(toml::from_str::<FileConfig>("unknown_key = 1").is_err());
    }
}

//! Benchmark of droop strategies against perfect-information re-dispatch.
//!
//! Each case draws forecasts for both farms from one zone and a realization
//! from the zone's Beta law. The stochastic dispatch on the forecast yields
//! the droop references and the adaptive gain; the realization is then
//! replayed through the power flow with the droop converter under each
//! strategy and compared against an OPF re-dispatch at the realization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::droop::{self, Calibration, DroopError};
use crate::grid::{ConverterMode, NetworkModel};
use crate::pce::PceBasis;
use crate::powerflow::{PfOptions, PfSystem, Setpoints};
use crate::sopf::{self, MarginRule, OpfOptions, SopfOptions, SopfProblem};
use crate::wind::{self, stream_rng, BetaSpec, WindError, Zone, ZoneConfig, ZoneStats};

/// Error differences below this many MW count as ties.
pub const TIE_MW: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("n_per_zone must be at least 1")]
    NoCases,
    #[error("trend fit needs at least two distinct abscissae")]
    DegenerateAbscissa,
    #[error("model has no voltage_droop converter")]
    NoDroopConverter,
    #[error("model must carry exactly two wind farms, found {0}")]
    WindFarms(usize),
    #[error("every case failed in zone {0}")]
    ZoneFailed(Zone),
    #[error(transparent)]
    Wind(#[from] WindError),
    #[error(transparent)]
    Droop(#[from] DroopError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Adaptive,
    Fixed(f64),
}

impl Strategy {
    pub const DEFAULT: [Strategy; 4] = [Strategy::Adaptive, Strategy::Fixed(20.0), Strategy::Fixed(15.0), Strategy::Fixed(0.0)];

    pub fn parse(s: &str) -> Option<Strategy> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "adaptive" => Some(Strategy::Adaptive),
            "nodroop" | "no_droop" | "none" => Some(Strategy::Fixed(0.0)),
            _ => s.strip_prefix("k=").and_then(|k| k.parse().ok()).filter(|k: &f64| *k >= 0.0).map(Strategy::Fixed),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::Adaptive => "adaptive".into(),
            Strategy::Fixed(k) if *k == 0.0 => "nodroop".into(),
            Strategy::Fixed(k) => format!("k={k}"),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub n_per_zone: usize,
    pub seed: u64,
    pub zones: ZoneConfig,
    pub stats: [ZoneStats; 3],
    pub epsilon: f64,
    pub margin_rule: MarginRule,
    pub degree: usize,
    pub k_base: f64,
    pub strategies: Vec<Strategy>,
    /// Evaluates `P_ref - k (V - V_ref)` at the no-droop voltage instead of
    /// solving the flow with the converter in droop mode.
    pub open_loop: bool,
    /// Calibrates on the first `n` cases of each zone instead of all.
    pub calibration_subset: Option<usize>,
    pub jobs: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_per_zone: 30,
            seed: 42,
            zones: ZoneConfig::default(),
            stats: wind::reference_zone_stats(),
            epsilon: 0.05,
            margin_rule: MarginRule::ChebyshevOneSided,
            degree: 2,
            k_base: 20.0,
            strategies: Strategy::DEFAULT.to_vec(),
            open_loop: false,
            calibration_subset: None,
            jobs: 1,
        }
    }
}

/// Forecast and realization of one case, MW.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub id: usize,
    pub zone: Zone,
    pub forecast_mw: Vec<f64>,
    pub realized_mw: Vec<f64>,
}

/// Draws `n_per_zone` cases per zone. Each case has its own random stream
/// keyed by its id, so generation order does not matter. Forecasts whose
/// zone statistics admit no Beta law are redrawn.
pub fn generate_cases(
    n_per_zone: usize,
    stats: &[ZoneStats; 3],
    zones: &ZoneConfig,
    p_max: &[f64],
    seed: u64,
) -> Result<Vec<CaseSpec>, HarnessError> {
    if n_per_zone == 0 {
        return Err(HarnessError::NoCases);
    }
    let mut out = Vec::with_capacity(3 * n_per_zone);
    for zone in Zone::ALL {
        let (lo, hi) = zones.bounds(zone);
        let st = &stats[zone.index()];
        for j in 0..n_per_zone {
            let id = zone.index() * n_per_zone + j;
            let mut rng = stream_rng(seed, id as u64 + 1);
            let mut forecast = Vec::with_capacity(p_max.len());
            let mut realized = Vec::with_capacity(p_max.len());
            for &pm in p_max {
                let mut tries = 0;
                let (p, spec) = loop {
                    let p = lo + (hi - lo) * rng.gen::<f64>();
                    match wind::beta_spec(p, st) {
                        Ok(s) if !s.clamped => break (p, s),
                        Ok(_) | Err(WindError::InfeasibleMoments { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                    tries += 1;
                    if tries > 10_000 {
                        return Err(WindError::DegenerateZone(zone).into());
                    }
                };
                forecast.push(p * pm);
                realized.push(spec.quantile(rng.gen::<f64>()) * pm);
            }
            out.push(CaseSpec { id, zone, forecast_mw: forecast, realized_mw: realized });
        }
    }
    Ok(out)
}

/// Euclidean norm of `real - pred`.
pub fn disturbance_magnitude(pred: &[f64], real: &[f64]) -> Result<f64, HarnessError> {
    if pred.len() != real.len() {
        return Err(HarnessError::LengthMismatch(pred.len(), real.len()));
    }
    Ok(pred.iter().zip(real).map(|(p, r)| (r - p) * (r - p)).sum::<f64>().sqrt())
}

/// Droop law `P_ref - k (V - V_ref)` in p.u.; multiply by the base for MW.
pub fn droop_power(p_ref: f64, k: f64, v_real: f64, v_ref: f64) -> f64 {
    p_ref - k * (v_real - v_ref)
}

pub fn tracking_error(p_droop: f64, p_truth: f64) -> f64 {
    (p_droop - p_truth).abs()
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn trend_fit(points: &[(f64, f64)]) -> Result<(f64, f64), HarnessError> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(HarnessError::DegenerateAbscissa);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx <= 1e-300 {
        return Err(HarnessError::DegenerateAbscissa);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Droop response of one strategy in one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyOutcome {
    pub strategy: String,
    pub k: f64,
    pub p_droop_mw: f64,
    pub v_real: f64,
    pub error_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub spec: CaseSpec,
    pub delta_mw: f64,
    /// `None` when the case failed; `failure` says why.
    pub result: Option<CaseResult>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub k_tilde: f64,
    pub k_opt: f64,
    pub p_ref_mw: f64,
    pub v_ref: f64,
    pub p_truth_mw: f64,
    pub outcomes: Vec<StrategyOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub band: String,
    pub strategy: String,
    pub n_cases: usize,
    pub winner_rate_pct: f64,
    pub mean_error_mw: f64,
    pub trend_slope: f64,
    pub trend_intercept: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<TableRow>,
    /// Cases whose winner was shared, per band.
    pub ties: BTreeMap<Zone, usize>,
    pub failures: BTreeMap<Zone, usize>,
}

impl BenchmarkTable {
    pub fn row(&self, zone: Zone, strategy: Strategy) -> Option<&TableRow> {
        let (b, s) = (zone.as_str(), strategy.label());
        self.rows.iter().find(|r| r.band == b && r.strategy == s)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub records: Vec<CaseRecord>,
    pub calibration: Calibration,
    pub table: BenchmarkTable,
}

/// Stage-one product of a case: references and gain from the stochastic dispatch.
#[derive(Debug, Clone)]
struct Dispatched {
    k_tilde: f64,
    p_ref: f64,
    v_ref: f64,
    v_slack: f64,
    gen_p: Vec<f64>,
    conv_p: Vec<f64>,
    x0: Vec<f64>,
}

struct Bench<'a> {
    model: &'a NetworkModel,
    pf: PfSystem,
    droop_conv: usize,
    cfg: &'a BenchmarkConfig,
}

impl Bench<'_> {
    fn dispatch(&self, case: &CaseSpec) -> Result<Dispatched, String> {
        let specs: Vec<BetaSpec> = case
            .forecast_mw
            .iter()
            .zip(&self.model.wind_farms)
            .map(|(f, w)| {
                let p = self.model.mw_to_pu(*f) / w.p_max;
                wind::beta_spec(p.clamp(0.0, 1.0), &self.cfg.stats[case.zone.index()])
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let basis = PceBasis::new(&specs, self.cfg.degree);
        let opts = SopfOptions { epsilon: self.cfg.epsilon, margin_rule: self.cfg.margin_rule, ..SopfOptions::default() };
        let problem = SopfProblem::new(self.model, &basis, opts).map_err(|e| e.to_string())?;
        let sol = sopf::solve_sopf(&problem).map_err(|e| e.to_string())?;
        let ext = droop::extract_ktilde(self.model, &basis, &sol, self.droop_conv).map_err(|e| e.to_string())?;
        let c = self.droop_conv;
        Ok(Dispatched {
            k_tilde: ext.k_tilde,
            p_ref: sol.dispatch.conv_p[c][0],
            v_ref: sol.dispatch.v_ref[c],
            v_slack: sol.dispatch.v_dc_slack,
            gen_p: sol.dispatch.gen_p.iter().map(|p| p[0]).collect(),
            conv_p: sol.dispatch.conv_p.iter().map(|p| p[0]).collect(),
            x0: sol.states.mean_state().to_vec(),
        })
    }

    /// Realization flow with the mean dispatch and the droop converter at gain `k`.
    fn droop_flow(&self, d: &Dispatched, wind: &[f64], k: f64) -> Result<(f64, f64), String> {
        let mut sp = Setpoints::from_model(self.model);
        for (g, gen) in self.model.generators.iter().enumerate() {
            if !gen.slack {
                sp.gen_p[g] = d.gen_p[g];
            }
        }
        for (c, conv) in self.model.converters.iter().enumerate() {
            match conv.mode {
                ConverterMode::DcSlack => sp.conv_v_dc[c] = d.v_slack,
                ConverterMode::ConstPq => sp.conv_p[c] = d.conv_p[c],
                ConverterMode::VoltageDroop if c != self.droop_conv => {
                    sp.modes[c] = ConverterMode::ConstPq;
                    sp.conv_p[c] = d.conv_p[c];
                }
                _ => {}
            }
        }
        let c = self.droop_conv;
        sp.modes[c] = ConverterMode::VoltageDroop;
        sp.conv_p[c] = d.p_ref;
        sp.conv_v_dc[c] = d.v_ref;
        sp.conv_k[c] = k;
        let sol = self
            .pf
            .solve(wind, &sp, Some(&d.x0), &PfOptions::default())
            .or_else(|_| self.pf.solve(wind, &sp, None, &PfOptions::default()))
            .map_err(|e| e.to_string())?;
        let dc = self.pf.converter_buses(c).1;
        Ok((self.pf.converter_pq(&sol.state.x, c).0, sol.state.v_dc(dc)))
    }

    fn replay(&self, case: &CaseSpec, d: &Dispatched, cal: &Calibration) -> Result<CaseResult, String> {
        let wind: Vec<f64> = case.realized_mw.iter().map(|w| self.model.mw_to_pu(*w)).collect();
        let truth = sopf::solve_opf(self.model, &wind, &OpfOptions { fix_v_slack: Some(d.v_slack), ..OpfOptions::default() })
            .map_err(|e| format!("truth re-dispatch: {e}"))?;
        let p_truth = truth.conv_p[self.droop_conv];
        let alpha = cal.alpha(case.zone).ok_or("zone not calibrated")?;
        let k_opt = droop::k_opt(d.k_tilde, alpha);
        let open = if self.cfg.open_loop { Some(self.droop_flow(d, &wind, 0.0)?) } else { None };
        let mut outcomes = Vec::with_capacity(self.cfg.strategies.len());
        for s in &self.cfg.strategies {
            let k = match s {
                Strategy::Adaptive => k_opt,
                Strategy::Fixed(k) => *k,
            };
            let (p, v) = match open {
                Some((_, v)) => (droop_power(d.p_ref, k, v, d.v_ref), v),
                None => self.droop_flow(d, &wind, k)?,
            };
            let p_mw = self.model.pu_to_mw(p);
            let t_mw = self.model.pu_to_mw(p_truth);
            outcomes.push(StrategyOutcome {
                strategy: s.label(),
                k,
                p_droop_mw: p_mw,
                v_real: v,
                error_mw: tracking_error(p_mw, t_mw),
            });
        }
        Ok(CaseResult {
            k_tilde: d.k_tilde,
            k_opt,
            p_ref_mw: self.model.pu_to_mw(d.p_ref),
            v_ref: d.v_ref,
            p_truth_mw: self.model.pu_to_mw(p_truth),
            outcomes,
        })
    }
}

/// Runs the full protocol. With `calibration = None` the adaptive scale is
/// calibrated on the benchmark's own cases.
pub fn run_benchmark(
    model: &NetworkModel,
    cfg: &BenchmarkConfig,
    calibration: Option<&Calibration>,
) -> Result<BenchmarkOutput, HarnessError> {
    let cases = generate_benchmark_cases(model, cfg)?;
    run_cases(model, cfg, &cases, calibration)
}

pub fn generate_benchmark_cases(model: &NetworkModel, cfg: &BenchmarkConfig) -> Result<Vec<CaseSpec>, HarnessError> {
    if model.wind_farms.len() != 2 {
        return Err(HarnessError::WindFarms(model.wind_farms.len()));
    }
    let p_max: Vec<f64> = model.wind_farms.iter().map(|w| model.pu_to_mw(w.p_max)).collect();
    generate_cases(cfg.n_per_zone, &cfg.stats, &cfg.zones, &p_max, cfg.seed)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Stochastic dispatch and gain extraction for every case, in case order.
pub fn extract_gains(model: &NetworkModel, cfg: &BenchmarkConfig, cases: &[CaseSpec]) -> Result<Vec<Result<f64, String>>, HarnessError> {
    let bench = bench(model, cfg)?;
    let out = pool(cfg.jobs)?.install(|| cases.par_iter().map(|c| bench.dispatch(c).map(|d| d.k_tilde)).collect());
    Ok(out)
}

/// Calibrates the adaptive scale from per-case gains; failed cases are skipped.
pub fn calibrate_from(
    cases: &[CaseSpec],
    gains: &[Result<f64, String>],
    k_base: f64,
    subset: Option<usize>,
) -> Result<Calibration, HarnessError> {
    let mut by_zone: BTreeMap<Zone, Vec<f64>> = BTreeMap::new();
    for zone in Zone::ALL {
        let ks: Vec<f64> = cases
            .iter()
            .zip(gains)
            .filter(|(c, _)| c.zone == zone)
            .take(subset.unwrap_or(usize::MAX))
            .filter_map(|(_, g)| g.as_ref().ok().copied())
            .collect();
        by_zone.insert(zone, ks);
    }
    Ok(droop::calibrate_alpha(&by_zone, k_base)?)
}

fn bench<'a>(model: &'a NetworkModel, cfg: &'a BenchmarkConfig) -> Result<Bench<'a>, HarnessError> {
    let droop_conv = model
        .converters
        .iter()
        .position(|c| c.mode == ConverterMode::VoltageDroop)
        .ok_or(HarnessError::NoDroopConverter)?;
    Ok(Bench { model, pf: PfSystem::new(model), droop_conv, cfg })
}

pub fn run_cases(
    model: &NetworkModel,
    cfg: &BenchmarkConfig,
    cases: &[CaseSpec],
    calibration: Option<&Calibration>,
) -> Result<BenchmarkOutput, HarnessError> {
    let bench = bench(model, cfg)?;
    let pool = pool(cfg.jobs)?;
    let dispatched: Vec<Result<Dispatched, String>> = pool.install(|| cases.par_iter().map(|c| bench.dispatch(c)).collect());
    for (c, d) in cases.iter().zip(&dispatched) {
        if let Err(e) = d {
            log::warn!("case {} ({}): stochastic dispatch failed: {e}", c.id, c.zone);
        }
    }
    let calibration = match calibration {
        Some(c) => c.clone(),
        None => {
            let gains: Vec<Result<f64, String>> = dispatched.iter().map(|d| d.as_ref().map(|d| d.k_tilde).map_err(Clone::clone)).collect();
            calibrate_from(cases, &gains, cfg.k_base, cfg.calibration_subset)?
        }
    };
    let records: Vec<CaseRecord> = pool.install(|| {
        cases
            .par_iter()
            .zip(dispatched.par_iter())
            .map(|(case, d)| {
                let delta_mw = disturbance_magnitude(&case.forecast_mw, &case.realized_mw).expect("equal lengths");
                let res = d.as_ref().map_err(|e| format!("stochastic dispatch: {e}")).and_then(|d| bench.replay(case, d, &calibration));
                match res {
                    Ok(r) => CaseRecord { spec: case.clone(), delta_mw, result: Some(r), failure: None },
                    Err(e) => {
                        log::warn!("case {} ({}): {e}", case.id, case.zone);
                        CaseRecord { spec: case.clone(), delta_mw, result: None, failure: Some(e) }
                    }
                }
            })
            .collect()
    });
    let table = tabulate(&records, &cfg.strategies);
    Ok(BenchmarkOutput { records, calibration, table })
}

/// Winner rates with ties split equally, band means and trend lines.
pub fn tabulate(records: &[CaseRecord], strategies: &[Strategy]) -> BenchmarkTable {
    let mut rows = Vec::new();
    let mut ties = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for zone in Zone::ALL {
        let band: Vec<&CaseRecord> = records.iter().filter(|r| r.spec.zone == zone).collect();
        let ok: Vec<(&CaseRecord, &CaseResult)> = band.iter().filter_map(|r| r.result.as_ref().map(|x| (*r, x))).collect();
        failures.insert(zone, band.len() - ok.len());
        let ns = strategies.len();
        let mut wins = vec![0.0; ns];
        let mut n_ties = 0;
        for (_, res) in &ok {
            let errs: Vec<f64> = res.outcomes.iter().map(|o| o.error_mw).collect();
            let best = errs.iter().cloned().fold(f64::INFINITY, f64::min);
            let winners: Vec<usize> = (0..ns).filter(|&s| errs[s] - best < TIE_MW).collect();
            if winners.len() > 1 {
                n_ties += 1;
            }
            for &w in &winners {
                wins[w] += 1.0 / winners.len() as f64;
            }
        }
        ties.insert(zone, n_ties);
        for (s, strat) in strategies.iter().enumerate() {
            let errs: Vec<(f64, f64)> = ok.iter().map(|(r, res)| (r.delta_mw, res.outcomes[s].error_mw)).collect();
            let n = errs.len();
            let mean = if n > 0 { errs.iter().map(|e| e.1).sum::<f64>() / n as f64 } else { f64::NAN };
            let (slope, intercept) = trend_fit(&errs).unwrap_or((f64::NAN, f64::NAN));
            rows.push(TableRow {
                band: zone.as_str().into(),
                strategy: strat.label(),
                n_cases: n,
                winner_rate_pct: if n > 0 { 100.0 * wins[s] / n as f64 } else { f64::NAN },
                mean_error_mw: mean,
                trend_slope: slope,
                trend_intercept: intercept,
            });
        }
    }
    BenchmarkTable { rows, ties, failures }
}

/// Per-zone statistics of the adaptive gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KoptStats {
    pub zone: String,
    pub n_cases: usize,
    pub mean: f64,
    pub std: f64,
    pub cv_pct: f64,
    pub median: f64,
}

pub fn kopt_by_zone(records: &[CaseRecord]) -> Vec<KoptStats> {
    Zone::ALL
        .iter()
        .map(|&zone| {
            let ks: Vec<f64> = records
                .iter()
                .filter(|r| r.spec.zone == zone)
                .filter_map(|r| r.result.as_ref().map(|x| x.k_opt))
                .collect();
            let n = ks.len();
            let mean = ks.iter().sum::<f64>() / n as f64;
            let std = if n > 1 { (ks.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            KoptStats {
                zone: zone.as_str().into(),
                n_cases: n,
                mean,
                std,
                cv_pct: 100.0 * std / mean,
                median: droop::lower_median(&ks).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Writes cases.csv, table.csv, kopt_by_zone.csv, trend.csv and summary.txt.
pub fn emit_report(out: &BenchmarkOutput, strategies: &[Strategy], dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let n_farms = out.records.first().map_or(2, |r| r.spec.forecast_mw.len());

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("cases.csv"))?);
    let mut head = vec!["case_id".to_string(), "zone".into()];
    for i in 1..=n_farms {
        head.push(format!("forecast_{i}_mw"));
    }
    for i in 1..=n_farms {
        head.push(format!("realized_{i}_mw"));
    }
    head.extend(["delta_mw", "status", "k_tilde", "k_opt", "p_ref_mw", "v_ref", "p_truth_mw"].map(String::from));
    for s in strategies {
        let l = s.label();
        head.extend([format!("{l}_k"), format!("{l}_p_droop_mw"), format!("{l}_v_real"), format!("{l}_error_mw")]);
    }
    writeln!(f, "{}", head.join(","))?;
    for r in &out.records {
        let mut row = vec![r.spec.id.to_string(), r.spec.zone.as_str().into()];
        row.extend(r.spec.forecast_mw.iter().map(|v| v.to_string()));
        row.extend(r.spec.realized_mw.iter().map(|v| v.to_string()));
        row.push(r.delta_mw.to_string());
        match &r.result {
            Some(x) => {
                row.push("ok".into());
                row.extend([x.k_tilde, x.k_opt, x.p_ref_mw, x.v_ref, x.p_truth_mw].map(|v| v.to_string()));
                for o in &x.outcomes {
                    row.extend([o.k, o.p_droop_mw, o.v_real, o.error_mw].map(|v| v.to_string()));
                }
            }
            None => {
                let why = r.failure.as_deref().unwrap_or("").replace([',', '\n', '"'], " ");
                row.push(format!("failed: {why}"));
                row.extend(std::iter::repeat_n(String::new(), 5 + 4 * strategies.len()));
            }
        }
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;

    // no records, no rows: every band would be NaN
    let rows: &[TableRow] = if out.records.is_empty() { &[] } else { &out.table.rows };
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("table.csv"))?);
    writeln!(f, "band,strategy,n_cases,winner_rate_pct,mean_error_mw")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.band, r.strategy, r.n_cases, r.winner_rate_pct, r.mean_error_mw)?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("trend.csv"))?);
    writeln!(f, "band,strategy,slope,intercept")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.band, r.strategy, r.trend_slope, r.trend_intercept)?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("kopt_by_zone.csv"))?);
    writeln!(f, "zone,n_cases,mean,std,cv_pct,median")?;
    if out.records.iter().any(|r| r.result.is_some()) {
        for k in kopt_by_zone(&out.records) {
            writeln!(f, "{},{},{},{},{},{}", k.zone, k.n_cases, k.mean, k.std, k.cv_pct, k.median)?;
        }
    }
    f.flush()?;

    std::fs::write(dir.join("summary.txt"), summary(out))?;
    Ok(())
}

pub fn summary(out: &BenchmarkOutput) -> String {
    let mut s = String::new();
    let n_ok = out.records.iter().filter(|r| r.result.is_some()).count();
    s += &format!("cases: {} run, {} failed\n", out.records.len(), out.records.len() - n_ok);
    s += "calibration:\n";
    for z in out.calibration.zones.values() {
        s += &format!("  {:<5} alpha_z {:.6} median k_tilde {:.6} ({} cases)\n", z.zone.as_str(), z.alpha_z, z.median_k_tilde, z.n_cases);
    }
    s += "\nband  strategy   win %    mean |dP| MW   slope\n";
    for r in &out.table.rows {
        s += &format!(
            "{:<5} {:<10} {:>6.1} {:>14.3} {:>8.4}\n",
            r.band, r.strategy, r.winner_rate_pct, r.mean_error_mw, r.trend_slope
        );
    }
    s += "\n";
    for zone in Zone::ALL {
        s += &format!(
            "{}: {} tied cases (differences below {TIE_MW} MW split equally), {} failures\n",
            zone.as_str(),
            out.table.ties.get(&zone).copied().unwrap_or(0),
            out.table.failures.get(&zone).copied().unwrap_or(0)
        );
    }
    if out.records.iter().any(|r| r.result.is_some()) {
        s += "\nk_opt by zone:\n";
        for k in kopt_by_zone(&out.records) {
            s += &format!("  {:<5} mean {:.3} std {:.3} cv {:.2}% median {:.3}\n", k.zone, k.mean, k.std, k.cv_pct, k.median);
        }
    }
    s
}

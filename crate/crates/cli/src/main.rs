use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sopf_droop::droop;
use sopf_droop::grid::{self, GridError, NetworkModel};
use sopf_droop::harness::{self, BenchmarkConfig};
use sopf_droop::ipm::IpmOptions;
use sopf_droop::pce::{galerkin::write_pce_csv, GalerkinSystem, PceBasis};
use sopf_droop::sopf::{self, SopfOptions, SopfProblem};
use sopf_droop::wind::{self, ZoneStats};

mod config;

use config::{FileConfig, RunConfig};

/// Stochastic OPF and adaptive droop tuning for hybrid AC/MTDC grids.
#[derive(Parser)]
#[command(name = "sopf-droop", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fits per-zone forecast-error statistics from an archive CSV.
    FitZones {
        /// CSV with columns timestamp, forecast_mw, realized_mw.
        archive: PathBuf,
        /// Rated farm power the archive is normalized by, MW.
        #[arg(long)]
        p_max: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Writes a synthetic archive drawn from the zone statistics.
    SynthArchive {
        #[arg(long)]
        p_max: f64,
        /// Records per zone.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Solves the stochastic OPF for one forecast.
    Solve {
        /// Normalized forecast per wind farm, comma separated.
        #[arg(long, value_delimiter = ',')]
        forecast: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Calibrates the per-zone droop scale on generated cases.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Runs the droop benchmark and writes the report files.
    Benchmark {
        /// Evaluates the droop law at the no-droop voltage instead of in closed loop.
        #[arg(long)]
        open_loop: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Checks a network file and lists every violation.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network file; the built-in test system when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the SOPF_DROOP_OUT environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for case-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    degree: Option<usize>,
    /// chebyshev or gaussian.
    #[arg(long)]
    margin_rule: Option<String>,
    #[arg(long)]
    k_base: Option<f64>,
    #[arg(long)]
    n_per_zone: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// Monte Carlo audit samples for `solve`; 0 skips the audit.
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Zone statistics CSV; the reference values when omitted.
    #[arg(long)]
    zone_stats: Option<PathBuf>,
    /// Calibration CSV; `benchmark` calibrates on its own cases when omitted.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, extra: FileConfig) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let flags = FileConfig {
            network: self.network.clone(),
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
            epsilon: self.epsilon,
            degree: self.degree,
            margin_rule: self.margin_rule.clone(),
            k_base: self.k_base,
            n_per_zone: self.n_per_zone,
            tau1: self.tau1,
            tau2: self.tau2,
            mc_samples: self.mc_samples,
            zone_stats: self.zone_stats.clone(),
            calibration: self.calibration.clone(),
            ..FileConfig::default()
        }
        .overlay(extra);
        RunConfig::resolve(file, flags)
    }
}

fn load_model(cfg: &RunConfig) -> Result<NetworkModel> {
    match &cfg.network {
        None => Ok(grid::builtin_testcase()),
        Some(p) => grid::load_network(p).map_err(|e| describe_grid_error(e, p)),
    }
}

fn describe_grid_error(e: GridError, path: &Path) -> anyhow::Error {
    match e {
        GridError::Validation(v) => {
            let lines: Vec<String> = v.iter().map(|v| format!("  {v}")).collect();
            anyhow::anyhow!("{}: {} violation(s)\n{}", path.display(), v.len(), lines.join("\n"))
        }
        e => anyhow::anyhow!("{}: {e}", path.display()),
    }
}

fn zone_stats(cfg: &RunConfig) -> Result<[ZoneStats; 3]> {
    match &cfg.zone_stats {
        None => Ok(wind::reference_zone_stats()),
        Some(p) => wind::read_zone_stats(p).with_context(|| format!("zone statistics {}", p.display())),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn ipm(cfg: &RunConfig) -> IpmOptions {
    IpmOptions { tol: cfg.ipm_tol, max_iter: cfg.ipm_max_iter, ..IpmOptions::default() }
}

fn bench_config(cfg: &RunConfig) -> Result<BenchmarkConfig> {
    Ok(BenchmarkConfig {
        n_per_zone: cfg.n_per_zone,
        seed: cfg.seed,
        zones: cfg.zones,
        stats: zone_stats(cfg)?,
        epsilon: cfg.epsilon,
        margin_rule: cfg.margin_rule,
        degree: cfg.degree,
        k_base: cfg.k_base,
        strategies: cfg.strategies.clone(),
        open_loop: cfg.open_loop,
        calibration_subset: cfg.calibration_subset,
        jobs: cfg.jobs,
    })
}

fn cmd_fit_zones(archive: &Path, p_max: f64, cfg: &RunConfig) -> Result<()> {
    let pairs = wind::read_archive(archive).with_context(|| format!("reading archive {}", archive.display()))?;
    let stats = wind::fit_zone_stats(&pairs, p_max, &cfg.zones)?;
    let path = out_dir(cfg)?.join("zone_stats.csv");
    wind::write_zone_stats(&path, &stats)?;
    for s in &stats {
        println!("{:<5} mu_z {:+.6} sigma_z {:.6} n {}", s.zone.as_str(), s.mu_z, s.sigma_z, s.n_samples);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth_archive(p_max: f64, n: usize, cfg: &RunConfig) -> Result<()> {
    let rows = wind::synth_archive(&zone_stats(cfg)?, &cfg.zones, p_max, n, cfg.seed)?;
    let path = out_dir(cfg)?.join("archive.csv");
    wind::write_archive(&path, &rows)?;
    println!("wrote {} records to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_solve(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    if cfg.forecast.len() != model.wind_farms.len() {
        bail!("{} forecast(s) given for {} wind farm(s)", cfg.forecast.len(), model.wind_farms.len());
    }
    let stats = zone_stats(cfg)?;
    let specs = cfg
        .forecast
        .iter()
        .map(|&p| {
            let zone = wind::classify_zone(p, &cfg.zones)?;
            wind::beta_spec(p, &stats[zone.index()])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let basis = PceBasis::new(&specs, cfg.degree);
    let opts = SopfOptions { epsilon: cfg.epsilon, margin_rule: cfg.margin_rule, ipm: ipm(cfg), ..SopfOptions::default() };
    let problem = SopfProblem::new(&model, &basis, opts)?;
    let sol = sopf::solve_sopf(&problem)?;
    let dir = out_dir(cfg)?;
    sopf::write_solution_csv(&model, &sol, dir.join("sopf_solution.csv"))?;
    let sys = GalerkinSystem::new(&model, &basis)?;
    write_pce_csv(&model, &sys, &sol.states, dir.join("pce_coefficients.csv"))?;
    println!("expected cost {:.4} $/h, {} iterations, KKT {:.2e}", sol.objective, sol.iterations, sol.kkt_residual);
    let extractions: Vec<_> = model
        .droop_converters()
        .into_iter()
        .map(|c| droop::extract_ktilde(&model, &basis, &sol, c))
        .collect::<Result<_, _>>()?;
    for e in &extractions {
        println!("{}: k_tilde {:.6}", e.converter, e.k_tilde);
    }
    if cfg.degree >= 1 {
        droop::write_extraction_csv(&extractions, dir.join("droop.csv"))?;
    }
    if cfg.mc_samples > 0 {
        let audit = sopf::monte_carlo_audit(&model, &basis, &sol, cfg.mc_samples, cfg.seed)?;
        sopf::write_mc_audit_csv(&audit, dir.join("mc_audit.csv"))?;
        let worst = audit.constraints.iter().map(|c| c.violation_rate).fold(0.0, f64::max);
        println!("Monte Carlo audit: {} samples, worst violation rate {:.4}", audit.n_samples, worst);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let bc = bench_config(cfg)?;
    let cases = harness::generate_benchmark_cases(&model, &bc)?;
    let gains = harness::extract_gains(&model, &bc, &cases)?;
    let failed = gains.iter().filter(|g| g.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} case(s) failed and are left out of the calibration");
    }
    let cal = harness::calibrate_from(&cases, &gains, cfg.k_base, cfg.calibration_subset)?;
    let path = out_dir(cfg)?.join("calibration.csv");
    droop::write_calibration(&cal, &path)?;
    for z in cal.zones.values() {
        println!("{:<5} alpha_z {:.6} median k_tilde {:.6} ({} cases)", z.zone.as_str(), z.alpha_z, z.median_k_tilde, z.n_cases);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let bc = bench_config(cfg)?;
    let cal = match &cfg.calibration {
        Some(p) => Some(droop::read_calibration(p).with_context(|| format!("calibration {}", p.display()))?),
        None => None,
    };
    let out = harness::run_benchmark(&model, &bc, cal.as_ref())?;
    let dir = out_dir(cfg)?;
    harness::emit_report(&out, &bc.strategies, dir)?;
    if cal.is_none() {
        droop::write_calibration(&out.calibration, dir.join("calibration.csv"))?;
    }
    print!("{}", harness::summary(&out));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_validate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let v = grid::validate(&model);
    if !v.is_empty() {
        bail!("{} violation(s)", v.len());
    }
    println!(
        "ok: {} AC buses, {} DC buses, {} converters, {} generators, {} wind farms",
        model.ac_buses.len(),
        model.dc_buses.len(),
        model.converters.len(),
        model.generators.len(),
        model.wind_farms.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::FitZones { archive, p_max, common } => cmd_fit_zones(&archive, p_max, &common.resolve(FileConfig::default())?),
        Cmd::SynthArchive { p_max, n, common } => cmd_synth_archive(p_max, n, &common.resolve(FileConfig::default())?),
        Cmd::Solve { forecast, common } => cmd_solve(&common.resolve(FileConfig { forecast, ..FileConfig::default() })?),
        Cmd::Calibrate { common } => cmd_calibrate(&common.resolve(FileConfig::default())?),
        Cmd::Benchmark { open_loop, common } => {
            let extra = FileConfig { open_loop: open_loop.then_some(true), ..FileConfig::default() };
            cmd_benchmark(&common.resolve(extra)?)
        }
        Cmd::Validate { common } => cmd_validate(&common.resolve(FileConfig::default())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not listed in `KNOWN_FAILURES`.
//! `ACCEPTANCE_ONLY=2,6` runs a subset.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sopf_droop::droop::{k_tilde, k_tilde_weighted};
use sopf_droop::grid::{builtin_testcase, NetworkModel};
use sopf_droop::harness::{emit_report, kopt_by_zone, run_benchmark, BenchmarkConfig, BenchmarkOutput, Strategy};
use sopf_droop::ipm::IpmOptions;
use sopf_droop::pce::galerkin::{GalerkinSystem, Quantity};
use sopf_droop::pce::{galerkin_solve, sensitivity, PceBasis};
use sopf_droop::powerflow::{solve_powerflow, Layout, PfSystem};
use sopf_droop::sopf::{solve_opf, solve_sopf, OpfOptions, SopfOptions, SopfProblem};
use sopf_droop::wind::{beta_spec, reference_zone_stats, BetaSpec, WindError, Zone, ZoneConfig};

/// Criteria that fail on the shipped fixture; see the README.
const KNOWN_FAILURES: &[u32] = &[8, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mid_specs(model: &NetworkModel, p_tilde: &[f64]) -> Vec<BetaSpec> {
    let mid = reference_zone_stats()[Zone::Mid.index()];
    assert_eq!(p_tilde.len(), model.wind_farms.len());
    p_tilde.iter().map(|p| beta_spec(*p, &mid).unwrap()).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_beta_moments() -> Outcome {
    let t = Instant::now();
    let stats = reference_zone_stats();
    let zones = ZoneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut infeasible, mut worst) = (0, 0, 0.0f64);
    for _ in 0..1000 {
        let zone = Zone::ALL[rng.gen_range(0..3)];
        let (lo, hi) = zones.bounds(zone);
        let p = lo + (hi - lo) * rng.gen::<f64>();
        let st = &stats[zone.index()];
        match beta_spec(p, st) {
            Ok(s) => {
                let n = s.alpha + s.beta;
                let mean = s.alpha / n;
                let var = s.alpha * s.beta / (n * n * (n + 1.0));
                worst = worst.max((mean - s.mu_eff).abs()).max((var - st.sigma_z * st.sigma_z).abs());
                if !s.clamped {
                    worst = worst.max((s.mu_eff - (p + st.mu_z)).abs());
                }
                checked += 1;
            }
            Err(WindError::InfeasibleMoments { .. }) => infeasible += 1,
            Err(e) => panic!("{e}"),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 1.0,
        format!("{checked} pairs matched, worst error {worst:.1e} ({infeasible} pairs without a Beta law), {secs:.2} s"),
    )
}

fn c2_pce_vs_monte_carlo() -> Outcome {
    let t = Instant::now();
    let model = builtin_testcase();
    let specs = mid_specs(&model, &[0.5, 0.5]);
    let basis = PceBasis::new(&specs, 2);
    let sys = GalerkinSystem::new(&model, &basis).unwrap();
    let sol = galerkin_solve(&model, &basis).unwrap();
    let mc = common::monte_carlo_flow(&model, &specs, 10_000, 2);
    let layout = Layout::of(&model);
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut check = |(m, var): (f64, f64), (mm, ms): (f64, f64)| {
        let s = var.sqrt();
        worst_mean = worst_mean.max((m - mm).abs());
        if ms > 1e-9 {
            worst_std = worst_std.max(rel(s, ms));
        }
    };
    for d in 0..model.dc_buses.len() {
        check(sys.quantity_moments(&sol, Quantity::State(layout.vdc(d))), mc.v_dc[d]);
    }
    for c in 0..model.converters.len() {
        check(sys.quantity_moments(&sol, Quantity::ConverterP(c)), mc.conv_p[c]);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_mean <= 1e-3 && worst_std <= 0.05 && secs < 120.0,
        format!("worst mean gap {worst_mean:.2e} p.u., worst std gap {:.2}%, {secs:.1} s", 100.0 * worst_std),
    )
}

fn c3_sensitivity() -> Outcome {
    let t = Instant::now();
    let model = builtin_testcase();
    let pf = PfSystem::new(&model);
    let c4 = model.droop_converters()[0];
    let (_, dc4) = pf.converter_buses(c4);
    let layout = Layout::of(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p: Vec<f64> = (0..2).map(|_| rng.gen_range(0.3..0.7)).collect();
        let specs = mid_specs(&model, &p);
        let basis = PceBasis::new(&specs, 2);
        let sys = GalerkinSystem::new(&model, &basis).unwrap();
        let sol = galerkin_solve(&model, &basis).unwrap();
        let v_pce = sol.var(layout.vdc(dc4));
        let p_pce = sys.quantity(&sol, Quantity::ConverterP(c4));
        let mean: Vec<f64> = model.wind_farms.iter().zip(&specs).map(|(w, s)| w.p_max * s.mean()).collect();
        for i in 0..2 {
            let flow = |dw: f64| {
                let mut w = mean.clone();
                w[i] += dw;
                let s = solve_powerflow(&model, &w).unwrap();
                (s.state.v_dc(dc4), pf.converter_pq(&s.state.x, c4).0)
            };
            let (vp, pp) = flow(h);
            let (vm, pm) = flow(-h);
            // germ-to-power map: w = p_max * xi
            let scale = model.wind_farms[i].p_max / (2.0 * h);
            worst = worst.max(rel(sensitivity(&basis, &v_pce, i).unwrap(), (vp - vm) * scale));
            worst = worst.max(rel(sensitivity(&basis, &p_pce, i).unwrap(), (pp - pm) * scale));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst <= 0.02 && secs < 60.0, format!("worst relative gap {:.3}% over 10 points, {secs:.1} s", 100.0 * worst))
}

fn c4_droop_algebra() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let closed = p.iter().map(|x: &f64| x.abs()).sum::<f64>() / v.iter().map(|x: &f64| x.abs()).sum::<f64>();
        worst = worst.max(rel(k_tilde_weighted(&p, &v).unwrap(), closed));
        worst = worst.max(rel(k_tilde(&p, &v).unwrap(), closed));
    }
    let single = (0..1000).all(|_| {
        let (p, v): (f64, f64) = (rng.gen_range(0.01..2.0), rng.gen_range(0.001..0.05));
        k_tilde(&[p], &[v]).unwrap() == p / v && k_tilde_weighted(&[p], &[v]).unwrap() == p / v
    });
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && single && secs < 1.0,
        format!("worst relative gap {worst:.1e}, single source exact: {single}, {secs:.3} s"),
    )
}

fn c5_chance_soundness() -> Outcome {
    let t = Instant::now();
    let model = builtin_testcase();
    let specs = mid_specs(&model, &[0.5, 0.5]);
    let basis = PceBasis::new(&specs, 2);
    let problem = SopfProblem::new(&model, &basis, SopfOptions::default()).unwrap();
    let sol = match solve_sopf(&problem) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("stochastic OPF failed: {e}")),
    };
    let rates = common::audit_dc_voltage(&model, &basis, &sol, 10_000, 5);
    let worst = rates.iter().cloned().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 0.05 && secs < 300.0,
        format!("DC-voltage violation rates {rates:?} over 10^4 samples, {secs:.1} s"),
    )
}

fn c6_deterministic_reduction() -> Outcome {
    let model = builtin_testcase();
    let specs = mid_specs(&model, &[0.5, 0.5]);
    let basis = PceBasis::new(&specs, 0);
    let mean: Vec<f64> = model.wind_farms.iter().zip(&specs).map(|(w, s)| w.p_max * s.mean()).collect();

    let pce = galerkin_solve(&model, &basis).unwrap();
    let det = solve_powerflow(&model, &mean).unwrap();
    let flow_gap = pce.coeffs.iter().zip(&det.state.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // both optimizers to well below the comparison tolerance
    let ipm = IpmOptions { tol: 1e-9, ..IpmOptions::default() };
    let sopf = match solve_sopf(&SopfProblem::new(&model, &basis, SopfOptions { ipm, ..SopfOptions::default() }).unwrap()) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("zero-variance stochastic OPF failed: {e}")),
    };
    let opf = solve_opf(&model, &mean, &OpfOptions { ipm, ..OpfOptions::default() }).unwrap();
    let mut gap = (sopf.dispatch.v_dc_slack - opf.v_dc[model.dc_bus_index(model.converters[model.dc_slack_converter().unwrap()].dc_bus).unwrap()]).abs();
    for g in 0..model.generators.len() {
        gap = gap.max((sopf.dispatch.gen_p[g][0] - opf.gen_p[g]).abs());
    }
    for c in 0..model.converters.len() {
        gap = gap.max((sopf.dispatch.conv_p[c][0] - opf.conv_p[c]).abs());
    }
    outcome(
        gap <= 1e-5 && flow_gap <= 1e-8,
        format!("dispatch gap {gap:.1e} p.u., Galerkin vs power flow {flow_gap:.1e} p.u."),
    )
}

fn c7_calibration(out: &BenchmarkOutput) -> Outcome {
    let stats = kopt_by_zone(&out.records);
    let medians_ok = stats.iter().all(|s| (s.median - 20.0).abs() <= 1e-12);
    let low = &stats[Zone::Low.index()];
    let low_largest = stats.iter().filter(|s| s.zone != low.zone).all(|s| low.cv_pct > s.cv_pct);
    let desc: Vec<String> = stats.iter().map(|s| format!("{} median {} cv {:.2}%", s.zone, s.median, s.cv_pct)).collect();
    outcome(medians_ok && low_largest, desc.join(", "))
}

fn c8_ordering(out: &BenchmarkOutput, secs: f64) -> Outcome {
    let t = &out.table;
    let mut pass = secs < 1200.0;
    let mut desc = Vec::new();
    for zone in Zone::ALL {
        let a = t.row(zone, Strategy::Adaptive).unwrap();
        let n = t.row(zone, Strategy::Fixed(0.0)).unwrap();
        let best_rate = Strategy::DEFAULT.iter().map(|s| t.row(zone, *s).unwrap().winner_rate_pct).fold(0.0, f64::max);
        let gain = 1.0 - a.mean_error_mw / n.mean_error_mw;
        pass &= a.mean_error_mw <= n.mean_error_mw && a.winner_rate_pct >= best_rate;
        if zone == Zone::High {
            pass &= gain >= 0.05;
        }
        desc.push(format!(
            "{}: {:.2} vs {:.2} MW ({:.1}% better), win {:.1}% (best {:.1}%)",
            zone.as_str(),
            a.mean_error_mw,
            n.mean_error_mw,
            100.0 * gain,
            a.winner_rate_pct,
            best_rate
        ));
    }
    outcome(pass, format!("{}; {secs:.0} s", desc.join("; ")))
}

fn c9_trend(out: &BenchmarkOutput) -> Outcome {
    let t = &out.table;
    let mut pass = true;
    let mut desc = Vec::new();
    for zone in Zone::ALL {
        let s = |st| t.row(zone, st).unwrap().trend_slope;
        let (a, k20, n) = (s(Strategy::Adaptive), s(Strategy::Fixed(20.0)), s(Strategy::Fixed(0.0)));
        pass &= a <= k20 && k20 <= n;
        desc.push(format!("{}: {a:.4} / {k20:.4} / {n:.4}", zone.as_str()));
    }
    outcome(pass, format!("slopes adaptive / k=20 / nodroop: {}", desc.join("; ")))
}

fn c10_determinism(first: &BenchmarkOutput, cfg: &BenchmarkConfig) -> Outcome {
    let model = builtin_testcase();
    let second = run_benchmark(&model, cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    emit_report(first, &cfg.strategies, &a).unwrap();
    emit_report(&second, &cfg.strategies, &b).unwrap();
    let (x, y) = (std::fs::read(a.join("cases.csv")).unwrap(), std::fs::read(b.join("cases.csv")).unwrap());
    outcome(x == y && !x.is_empty(), format!("cases.csv {} bytes, identical: {}", x.len(), x == y))
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        let tag = match (o.pass, KNOWN_FAILURES.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {n:>2}: {tag}: {}", o.detail);
        results.push((n, o));
    };
    let single: [(u32, fn() -> Outcome); 6] = [
        (1, c1_beta_moments),
        (2, c2_pce_vs_monte_carlo),
        (3, c3_sensitivity),
        (4, c4_droop_algebra),
        (5, c5_chance_soundness),
        (6, c6_deterministic_reduction),
    ];
    for (n, f) in single {
        if want(n) {
            report(n, f());
        }
    }

    if (7..=10).any(want) {
        let model = builtin_testcase();
        let cfg = BenchmarkConfig::default();
        let t = Instant::now();
        let out = run_benchmark(&model, &cfg, None).unwrap();
        let secs = t.elapsed().as_secs_f64();
        if want(7) {
            report(7, c7_calibration(&out));
        }
        if want(8) {
            report(8, c8_ordering(&out, secs));
        }
        if want(9) {
            report(9, c9_trend(&out));
        }
        if want(10) {
            report(10, c10_determinism(&out, &cfg));
        }
    }

    let unexpected: Vec<u32> = results.iter().filter(|(n, o)| !o.pass && !KNOWN_FAILURES.contains(n)).map(|(n, _)| *n).collect();
    let recovered: Vec<u32> = results.iter().filter(|(n, o)| o.pass && KNOWN_FAILURES.contains(n)).map(|(n, _)| *n).collect();
    if !recovered.is_empty() {
        println!("now passing, remove from KNOWN_FAILURES: {recovered:?}");
    }
    if !unexpected.is_empty() {
        println!("failed: {unexpected:?}");
        std::process::exit(1);
    }
}

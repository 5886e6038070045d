use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sopf_droop::droop::Calibration;
use sopf_droop::grid::builtin_testcase;
use sopf_droop::harness::{
    emit_report, generate_benchmark_cases, run_benchmark, tabulate, trend_fit, BenchmarkConfig, BenchmarkOutput, CaseRecord,
    CaseResult, CaseSpec, Strategy, StrategyOutcome,
};
use sopf_droop::wind::Zone;
use statrs::distribution::ContinuousCDF;

const REPORT: [&str; 5] = ["cases.csv", "table.csv", "kopt_by_zone.csv", "trend.csv", "summary.txt"];

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let head = lines.next().unwrap().split(',').map(String::from).collect();
    (head, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn ninety_cases_from_thirty_per_zone() {
    let model = builtin_testcase();
    let cfg = BenchmarkConfig::default();
    let cases = generate_benchmark_cases(&model, &cfg).unwrap();
    assert_eq!(cases.len(), 90);
    for zone in Zone::ALL {
        assert_eq!(cases.iter().filter(|c| c.zone == zone).count(), 30);
    }
    assert_eq!(cases, generate_benchmark_cases(&model, &cfg).unwrap());
}

#[test]
fn empty_records_give_header_only_files() {
    let strategies = Strategy::DEFAULT.to_vec();
    let out = BenchmarkOutput {
        records: vec![],
        calibration: Calibration { k_base: 20.0, zones: BTreeMap::new() },
        table: tabulate(&[], &strategies),
    };
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out, &strategies, dir.path()).unwrap();
    for name in REPORT.iter().filter(|n| n.ends_with(".csv")) {
        let (head, rows) = read_csv(&dir.path().join(name));
        assert!(!head.is_empty() && rows.is_empty(), "{name}");
    }
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn small_run_report_layout() {
    let model = builtin_testcase();
    let cfg = BenchmarkConfig { n_per_zone: 1, ..BenchmarkConfig::default() };
    let out = run_benchmark(&model, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out, &cfg.strategies, dir.path()).unwrap();
    for name in REPORT {
        assert!(dir.path().join(name).exists(), "{name}");
    }

    let (head, rows) = read_csv(&dir.path().join("table.csv"));
    assert_eq!(head, ["band", "strategy", "n_cases", "winner_rate_pct", "mean_error_mw"]);
    assert_eq!(rows.len(), 3 * 4);
    for zone in Zone::ALL {
        let total: f64 = rows.iter().filter(|r| r[0] == zone.as_str()).map(|r| r[3].parse::<f64>().unwrap()).sum();
        assert!((total - 100.0).abs() < 1e-9, "{zone:?} winner rates sum to {total}");
    }

    let (head, cases) = read_csv(&dir.path().join("cases.csv"));
    assert_eq!(cases.len(), 3);
    let k_col = head.iter().position(|h| h == "k_opt").unwrap();
    let (head, kz) = read_csv(&dir.path().join("kopt_by_zone.csv"));
    assert_eq!(head, ["zone", "n_cases", "mean", "std", "cv_pct", "median"]);
    for (row, case) in kz.iter().zip(&cases) {
        // one case per zone: the mean is that case's gain and the spread is zero
        let k: f64 = case[k_col].parse().unwrap();
        assert_eq!(row[2].parse::<f64>().unwrap(), k);
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    }
    let (_, trend) = read_csv(&dir.path().join("trend.csv"));
    assert_eq!(trend.len(), 12);
}

fn record(id: usize, zone: Zone, errs: &[f64]) -> CaseRecord {
    CaseRecord {
        spec: CaseSpec { id, zone, forecast_mw: vec![500.0, 500.0], realized_mw: vec![500.0, 500.0] },
        delta_mw: 0.0,
        result: Some(CaseResult {
            k_tilde: 1.0,
            k_opt: 20.0,
            p_ref_mw: -800.0,
            v_ref: 1.0,
            p_truth_mw: -800.0,
            outcomes: errs
                .iter()
                .zip(Strategy::DEFAULT)
                .map(|(&e, s)| StrategyOutcome { strategy: s.label(), k: 0.0, p_droop_mw: -800.0 + e, v_real: 1.0, error_mw: e })
                .collect(),
        }),
        failure: None,
    }
}

#[test]
fn equal_errors_are_a_four_way_tie() {
    let recs: Vec<CaseRecord> = Zone::ALL.iter().enumerate().map(|(i, &z)| record(i, z, &[1e-4, 0.0, 2e-4, 5e-3])).collect();
    let t = tabulate(&recs, &Strategy::DEFAULT);
    for zone in Zone::ALL {
        assert_eq!(t.ties[&zone], 1);
        for s in Strategy::DEFAULT {
            assert_eq!(t.row(zone, s).unwrap().winner_rate_pct, 25.0);
        }
    }
}

#[test]
fn noisy_line_slope_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = statrs::distribution::Normal::new(0.0, 0.01).unwrap();
    let pts: Vec<(f64, f64)> = (0..100)
        .map(|i| {
            let x = i as f64 / 10.0;
            (x, 3.0 * x + normal.inverse_cdf(rng.gen::<f64>()))
        })
        .collect();
    let (slope, _) = trend_fit(&pts).unwrap();
    assert!((slope - 3.0).abs() < 0.05, "{slope}");
}

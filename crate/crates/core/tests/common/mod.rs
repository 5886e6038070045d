//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};
use sopf_droop::grid::{ConverterMode, NetworkModel};
use sopf_droop::pce::PceBasis;
use sopf_droop::powerflow::{solve_powerflow, PfSystem};
use sopf_droop::sopf::SopfSolution;
use sopf_droop::wind::BetaSpec;

/// Latin-hypercube draws of the germs, one row per sample: each germ takes
/// exactly one value in each of `n` equiprobable strata.
pub fn draw_germs(specs: &[BetaSpec], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| {
            let law = Beta::new(s.alpha, s.beta).unwrap();
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            strata.iter().map(|&j| law.inverse_cdf((j as f64 + rng.gen::<f64>()) / n as f64)).collect()
        })
        .collect();
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Sample moments of every DC voltage and every converter's AC-side power
/// under fixed setpoints, one deterministic power flow per draw.
pub struct FlowMoments {
    pub v_dc: Vec<(f64, f64)>,
    pub conv_p: Vec<(f64, f64)>,
}

pub fn monte_carlo_flow(model: &NetworkModel, specs: &[BetaSpec], n: usize, seed: u64) -> FlowMoments {
    let pf = PfSystem::new(model);
    let nd = model.dc_buses.len();
    let nc = model.converters.len();
    let mut v = vec![Vec::with_capacity(n); nd];
    let mut p = vec![Vec::with_capacity(n); nc];
    for xi in draw_germs(specs, n, seed) {
        let wind: Vec<f64> = model.wind_farms.iter().zip(&xi).map(|(w, x)| w.p_max * x).collect();
        let sol = solve_powerflow(model, &wind).expect("sample flow");
        for (d, col) in v.iter_mut().enumerate() {
            col.push(sol.state.v_dc(d));
        }
        for (c, col) in p.iter_mut().enumerate() {
            col.push(pf.converter_pq(&sol.state.x, c).0);
        }
    }
    FlowMoments { v_dc: v.iter().map(|c| mean_std(c)).collect(), conv_p: p.iter().map(|c| mean_std(c)).collect() }
}

fn eval_expansion(coeffs: &[f64], phi: &[f64]) -> f64 {
    coeffs.iter().zip(phi).map(|(c, p)| c * p).sum()
}

/// Replays the polynomial dispatch on sampled wind and counts DC-voltage
/// limit violations per DC bus. A failed flow counts as a violation
/// everywhere.
pub fn audit_dc_voltage(model: &NetworkModel, basis: &PceBasis, sol: &SopfSolution, n: usize, seed: u64) -> Vec<f64> {
    let mut m = model.clone();
    for conv in &mut m.converters {
        if conv.mode == ConverterMode::VoltageDroop {
            conv.mode = ConverterMode::ConstPq;
            conv.droop = None;
        }
        if conv.mode == ConverterMode::DcSlack {
            conv.v_dc_set = sol.dispatch.v_dc_slack;
        }
    }
    let limits: Vec<(f64, f64)> = model
        .dc_buses
        .iter()
        .map(|b| {
            let c = model.converters.iter().find(|c| c.dc_bus == b.id).expect("converter on every DC bus");
            (c.v_dc_min, c.v_dc_max)
        })
        .collect();
    let mut bad = vec![0usize; limits.len()];
    for xi in draw_germs(&basis.specs, n, seed) {
        let phi = basis.eval(&xi);
        for (g, gen) in m.generators.iter_mut().enumerate() {
            if !gen.slack {
                gen.p_set = eval_expansion(&sol.dispatch.gen_p[g], &phi);
            }
        }
        for (c, conv) in m.converters.iter_mut().enumerate() {
            if conv.mode == ConverterMode::ConstPq {
                conv.p_set = eval_expansion(&sol.dispatch.conv_p[c], &phi);
            }
        }
        let wind: Vec<f64> = m.wind_farms.iter().zip(&xi).map(|(w, x)| w.p_max * x).collect();
        match solve_powerflow(&m, &wind) {
            Ok(s) => {
                for (d, &(lo, hi)) in limits.iter().enumerate() {
                    let v = s.state.v_dc(d);
                    bad[d] += usize::from(v < lo || v > hi);
                }
            }
            Err(_) => bad.iter_mut().for_each(|b| *b += 1),
        }
    }
    bad.iter().map(|&b| b as f64 / n as f64).collect()
}

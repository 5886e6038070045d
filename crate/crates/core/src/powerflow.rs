//! Deterministic AC/DC power flow in rectangular coordinates.
//!
//! Unknowns, in order: `(e_i, f_i)` per AC bus, `(P_g, Q_g)` per generator,
//! `(I_re, I_im, m, I_dc)` per converter and `V_dc` per DC bus. `I_re + j I_im`
//! is the AC current drawn from the bus into the converter, `m` its
//! (regularized) magnitude and `I_dc` the current the converter injects into
//! its DC bus. Every residual is a polynomial of degree at most two in the
//! unknowns, setpoints and wind injections.
//!
//! Rows follow the same block order: AC active/reactive balance per bus, two
//! generator equations, four converter equations (DC coupling, current
//! magnitude, two mode equations) and DC current balance per DC bus.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{ConverterMode, NetworkModel};

/// Regularization of the converter current magnitude, `m^2 = |I|^2 + ETA^2`.
pub const ETA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("state has {got} entries, the model needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("wind injection {value} p.u. at farm {farm} is outside [0, {p_max}]")]
    InjectionOutOfRange { farm: u32, value: f64, p_max: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("no convergence after {} iterations, residual {:.3e}", .best.iterations, .best.residual_norm)]
    NotConverged { best: Box<PowerFlowSolution> },
}

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-8, max_iter: 50, max_halvings: 6 }
    }
}

/// Controller setpoints of one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Setpoints {
    pub gen_p: Vec<f64>,
    pub gen_v: Vec<f64>,
    pub modes: Vec<ConverterMode>,
    /// `P_set` (ConstPq) or `P_ref` (VoltageDroop).
    pub conv_p: Vec<f64>,
    pub conv_q: Vec<f64>,
    /// `V_dc` setpoint (DcSlack) or `V_ref` (VoltageDroop).
    pub conv_v_dc: Vec<f64>,
    pub conv_v_ac: Vec<f64>,
    pub conv_k: Vec<f64>,
}

impl Setpoints {
    pub fn from_model(model: &NetworkModel) -> Setpoints {
        let mut sp = Setpoints {
            gen_p: model.generators.iter().map(|g| g.p_set).collect(),
            gen_v: model.generators.iter().map(|g| g.v_set).collect(),
            modes: model.converters.iter().map(|c| c.mode).collect(),
            conv_p: model.converters.iter().map(|c| c.p_set).collect(),
            conv_q: model.converters.iter().map(|c| c.q_set).collect(),
            conv_v_dc: model.converters.iter().map(|c| c.v_dc_set).collect(),
            conv_v_ac: model.converters.iter().map(|c| c.v_ac_set).collect(),
            conv_k: vec![0.0; model.converters.len()],
        };
        for (i, c) in model.converters.iter().enumerate() {
            if let Some(d) = c.droop {
                sp.conv_p[i] = d.p_ref;
                sp.conv_v_dc[i] = d.v_ref;
                sp.conv_k[i] = d.k;
            }
        }
        sp
    }
}

/// Index arithmetic of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_ac: usize,
    pub n_gen: usize,
    pub n_conv: usize,
    pub n_dc: usize,
}

impl Layout {
    pub fn of(model: &NetworkModel) -> Layout {
        Layout {
            n_ac: model.ac_buses.len(),
            n_gen: model.generators.len(),
            n_conv: model.converters.len(),
            n_dc: model.dc_buses.len(),
        }
    }
    pub fn len(&self) -> usize {
        2 * self.n_ac + 2 * self.n_gen + 4 * self.n_conv + self.n_dc
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn e(&self, i: usize) -> usize {
        2 * i
    }
    pub fn f(&self, i: usize) -> usize {
        2 * i + 1
    }
    pub fn pg(&self, g: usize) -> usize {
        2 * self.n_ac + 2 * g
    }
    pub fn qg(&self, g: usize) -> usize {
        2 * self.n_ac + 2 * g + 1
    }
    fn conv(&self, c: usize) -> usize {
        2 * self.n_ac + 2 * self.n_gen + 4 * c
    }
    pub fn ire(&self, c: usize) -> usize {
        self.conv(c)
    }
    pub fn iim(&self, c: usize) -> usize {
        self.conv(c) + 1
    }
    pub fn mag(&self, c: usize) -> usize {
        self.conv(c) + 2
    }
    pub fn idc(&self, c: usize) -> usize {
        self.conv(c) + 3
    }
    pub fn vdc(&self, n: usize) -> usize {
        2 * self.n_ac + 2 * self.n_gen + 4 * self.n_conv + n
    }
    /// Row of the active-power balance of AC bus `i` (reactive is `+1`).
    pub fn row_p(&self, i: usize) -> usize {
        2 * i
    }
    /// First of the two generator rows.
    pub fn row_gen(&self, g: usize) -> usize {
        self.pg(g)
    }
    /// First of the four converter rows: coupling, magnitude, mode, mode.
    pub fn row_conv(&self, c: usize) -> usize {
        self.conv(c)
    }
    pub fn row_dc(&self, n: usize) -> usize {
        self.vdc(n)
    }
}

#[derive(Debug, Clone)]
struct ConvData {
    ac: usize,
    dc: usize,
    a: f64,
    b: f64,
    c: f64,
}

#[derive(Debug, Clone)]
struct GenData {
    bus: usize,
    slack: bool,
}

/// Series data of an AC branch in index form.
#[derive(Debug, Clone, Copy)]
pub struct BranchData {
    pub from: usize,
    pub to: usize,
    /// Series admittance `g + jb = 1 / (r + jx)`.
    pub g: f64,
    pub b: f64,
    pub r: f64,
    pub rating: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DcBranchData {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub rating: f64,
}

/// Precomputed network structure shared by every evaluation.
#[derive(Debug, Clone)]
pub struct PfSystem {
    pub layout: Layout,
    /// Per bus: `(j, G_ij, B_ij)`, diagonal included.
    ybus: Vec<Vec<(usize, f64, f64)>>,
    /// Per DC bus: `(j, G_ij)`, diagonal included.
    gdc: Vec<Vec<(usize, f64)>>,
    gens: Vec<GenData>,
    convs: Vec<ConvData>,
    wind_bus: Vec<usize>,
    wind_pmax: Vec<f64>,
    wind_id: Vec<u32>,
    p_load: Vec<f64>,
    q_load: Vec<f64>,
    gs: Vec<f64>,
    pub branches: Vec<BranchData>,
    pub dc_branches: Vec<DcBranchData>,
}

impl PfSystem {
    pub fn new(model: &NetworkModel) -> PfSystem {
        let layout = Layout::of(model);
        let ac = |id| model.ac_bus_index(id).expect("validated model");
        let dc = |id| model.dc_bus_index(id).expect("validated model");
        let n = layout.n_ac;
        let mut dense_g = vec![vec![0.0; n]; n];
        let mut dense_b = vec![vec![0.0; n]; n];
        let mut branches = Vec::new();
        for br in &model.ac_branches {
            let (i, j) = (ac(br.from), ac(br.to));
            let z2 = br.r * br.r + br.x * br.x;
            let (g, b) = (br.r / z2, -br.x / z2);
            dense_g[i][i] += g;
            dense_g[j][j] += g;
            dense_g[i][j] -= g;
            dense_g[j][i] -= g;
            dense_b[i][i] += b + br.b / 2.0;
            dense_b[j][j] += b + br.b / 2.0;
            dense_b[i][j] -= b;
            dense_b[j][i] -= b;
            branches.push(BranchData { from: i, to: j, g, b, r: br.r, rating: br.rating });
        }
        for (i, bus) in model.ac_buses.iter().enumerate() {
            dense_g[i][i] += bus.gs;
            dense_b[i][i] += bus.bs;
        }
        let ybus = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| i == j || dense_g[i][j] != 0.0 || dense_b[i][j] != 0.0)
                    .map(|j| (j, dense_g[i][j], dense_b[i][j]))
                    .collect()
            })
            .collect();
        let nd = layout.n_dc;
        let mut gd = vec![vec![0.0; nd]; nd];
        let mut dc_branches = Vec::new();
        for br in &model.dc_branches {
            let (i, j) = (dc(br.from), dc(br.to));
            let g = 1.0 / br.r;
            gd[i][i] += g;
            gd[j][j] += g;
            gd[i][j] -= g;
            gd[j][i] -= g;
            dc_branches.push(DcBranchData { from: i, to: j, r: br.r, rating: br.rating });
        }
        let gdc = (0..nd)
            .map(|i| (0..nd).filter(|&j| i == j || gd[i][j] != 0.0).map(|j| (j, gd[i][j])).collect())
            .collect();
        PfSystem {
            layout,
            ybus,
            gdc,
            gens: model.generators.iter().map(|g| GenData { bus: ac(g.bus), slack: g.slack }).collect(),
            convs: model
                .converters
                .iter()
                .map(|c| ConvData { ac: ac(c.ac_bus), dc: dc(c.dc_bus), a: c.loss.a, b: c.loss.b, c: c.loss.c })
                .collect(),
            wind_bus: model.wind_farms.iter().map(|w| ac(w.bus)).collect(),
            wind_pmax: model.wind_farms.iter().map(|w| w.p_max).collect(),
            wind_id: model.wind_farms.iter().map(|w| w.id).collect(),
            p_load: model.ac_buses.iter().map(|b| b.p_load).collect(),
            q_load: model.ac_buses.iter().map(|b| b.q_load).collect(),
            gs: model.ac_buses.iter().map(|b| b.gs).collect(),
            branches,
            dc_branches,
        }
    }

    pub fn n_wind(&self) -> usize {
        self.wind_bus.len()
    }

    pub fn wind_pmax(&self) -> &[f64] {
        &self.wind_pmax
    }

    pub fn wind_bus(&self, w: usize) -> usize {
        self.wind_bus[w]
    }

    pub fn converter_buses(&self, c: usize) -> (usize, usize) {
        (self.convs[c].ac, self.convs[c].dc)
    }

    pub fn check_wind(&self, wind: &[f64]) -> Result<(), PfError> {
        if wind.len() != self.n_wind() {
            return Err(PfError::DimensionMismatch { expected: self.n_wind(), got: wind.len() });
        }
        for (w, &v) in wind.iter().enumerate() {
            let p_max = self.wind_pmax[w];
            if !(v >= -1e-12 && v <= p_max * (1.0 + 1e-12)) {
                return Err(PfError::InjectionOutOfRange { farm: self.wind_id[w], value: v, p_max });
            }
        }
        Ok(())
    }

    /// Flat start: `1 + j0` on AC buses, 1 p.u. on DC buses, setpoint generation.
    pub fn flat_start(&self, sp: &Setpoints) -> Vec<f64> {
        let l = self.layout;
        let mut x = vec![0.0; l.len()];
        for i in 0..l.n_ac {
            x[l.e(i)] = 1.0;
        }
        for g in 0..l.n_gen {
            x[l.pg(g)] = sp.gen_p[g];
        }
        for c in 0..l.n_conv {
            x[l.mag(c)] = ETA;
        }
        for n in 0..l.n_dc {
            x[l.vdc(n)] = 1.0;
        }
        x
    }

    /// Network current injection `(I_re, I_im)` of bus `i`, `Y V`.
    fn bus_current(&self, x: &[f64], i: usize) -> (f64, f64) {
        let l = &self.layout;
        let (mut ir, mut ii) = (0.0, 0.0);
        for &(j, g, b) in &self.ybus[i] {
            let (e, f) = (x[l.e(j)], x[l.f(j)]);
            ir += g * e - b * f;
            ii += g * f + b * e;
        }
        (ir, ii)
    }

    pub fn converter_pq(&self, x: &[f64], c: usize) -> (f64, f64) {
        let l = &self.layout;
        let k = self.convs[c].ac;
        let (e, f) = (x[l.e(k)], x[l.f(k)]);
        let (ir, ii) = (x[l.ire(c)], x[l.iim(c)]);
        (e * ir + f * ii, f * ir - e * ii)
    }

    pub fn converter_loss(&self, x: &[f64], c: usize) -> f64 {
        let l = &self.layout;
        let d = &self.convs[c];
        let (ir, ii) = (x[l.ire(c)], x[l.iim(c)]);
        d.a + d.b * x[l.mag(c)] + d.c * (ir * ir + ii * ii)
    }

    /// Series current of AC branch `k` from its `from` end.
    pub fn branch_current(&self, x: &[f64], k: usize) -> (f64, f64) {
        let l = &self.layout;
        let br = &self.branches[k];
        let de = x[l.e(br.from)] - x[l.e(br.to)];
        let df = x[l.f(br.from)] - x[l.f(br.to)];
        (br.g * de - br.b * df, br.g * df + br.b * de)
    }

    pub fn dc_branch_current(&self, x: &[f64], k: usize) -> f64 {
        let l = &self.layout;
        let br = &self.dc_branches[k];
        (x[l.vdc(br.from)] - x[l.vdc(br.to)]) / br.r
    }

    pub fn residual(&self, x: &[f64], wind: &[f64], sp: &Setpoints, out: &mut [f64]) {
        let l = &self.layout;
        for i in 0..l.n_ac {
            let (ir, ii) = self.bus_current(x, i);
            let (e, f) = (x[l.e(i)], x[l.f(i)]);
            out[l.row_p(i)] = e * ir + f * ii + self.p_load[i];
            out[l.row_p(i) + 1] = f * ir - e * ii + self.q_load[i];
        }
        for (g, gd) in self.gens.iter().enumerate() {
            out[l.row_p(gd.bus)] -= x[l.pg(g)];
            out[l.row_p(gd.bus) + 1] -= x[l.qg(g)];
        }
        for (w, &bus) in self.wind_bus.iter().enumerate() {
            out[l.row_p(bus)] -= wind[w];
        }
        for (c, cd) in self.convs.iter().enumerate() {
            let (p, q) = self.converter_pq(x, c);
            out[l.row_p(cd.ac)] += p;
            out[l.row_p(cd.ac) + 1] += q;
        }

        for (g, gd) in self.gens.iter().enumerate() {
            let (e, f) = (x[l.e(gd.bus)], x[l.f(gd.bus)]);
            let r = l.row_gen(g);
            if gd.slack {
                out[r] = e - sp.gen_v[g];
                out[r + 1] = f;
            } else {
                out[r] = x[l.pg(g)] - sp.gen_p[g];
                out[r + 1] = e * e + f * f - sp.gen_v[g] * sp.gen_v[g];
            }
        }

        for n in 0..l.n_dc {
            let mut s = 0.0;
            for &(j, g) in &self.gdc[n] {
                s += g * x[l.vdc(j)];
            }
            out[l.row_dc(n)] = s;
        }
        for (c, cd) in self.convs.iter().enumerate() {
            let r = l.row_conv(c);
            let (p, q) = self.converter_pq(x, c);
            let (ir, ii, m) = (x[l.ire(c)], x[l.iim(c)], x[l.mag(c)]);
            let v = x[l.vdc(cd.dc)];
            out[l.row_dc(cd.dc)] -= x[l.idc(c)];
            out[r] = v * x[l.idc(c)] - p + self.converter_loss(x, c);
            out[r + 1] = m * m - ir * ir - ii * ii - ETA * ETA;
            match sp.modes[c] {
                ConverterMode::DcSlack => {
                    out[r + 2] = v - sp.conv_v_dc[c];
                    out[r + 3] = q - sp.conv_q[c];
                }
                ConverterMode::ConstPq => {
                    out[r + 2] = p - sp.conv_p[c];
                    out[r + 3] = q - sp.conv_q[c];
                }
                ConverterMode::AcVf => {
                    out[r + 2] = x[l.e(cd.ac)] - sp.conv_v_ac[c];
                    out[r + 3] = x[l.f(cd.ac)];
                }
                ConverterMode::VoltageDroop => {
                    out[r + 2] = p - sp.conv_p[c] + sp.conv_k[c] * (v - sp.conv_v_dc[c]);
                    out[r + 3] = q - sp.conv_q[c];
                }
            }
        }
    }

    /// Dense Jacobian `dg/dx`, written into `jac` (resized if needed).
    pub fn jacobian(&self, x: &[f64], sp: &Setpoints, jac: &mut DMatrix<f64>) {
        let l = &self.layout;
        let n = l.len();
        if jac.nrows() != n || jac.ncols() != n {
            *jac = DMatrix::zeros(n, n);
        } else {
            jac.fill(0.0);
        }
        for i in 0..l.n_ac {
            let (ir, ii) = self.bus_current(x, i);
            let (e, f) = (x[l.e(i)], x[l.f(i)]);
            let (rp, rq) = (l.row_p(i), l.row_p(i) + 1);
            for &(j, g, b) in &self.ybus[i] {
                jac[(rp, l.e(j))] += e * g + f * b;
                jac[(rp, l.f(j))] += -e * b + f * g;
                jac[(rq, l.e(j))] += f * g - e * b;
                jac[(rq, l.f(j))] += -f * b - e * g;
            }
            jac[(rp, l.e(i))] += ir;
            jac[(rp, l.f(i))] += ii;
            jac[(rq, l.e(i))] -= ii;
            jac[(rq, l.f(i))] += ir;
        }
        for (g, gd) in self.gens.iter().enumerate() {
            jac[(l.row_p(gd.bus), l.pg(g))] -= 1.0;
            jac[(l.row_p(gd.bus) + 1, l.qg(g))] -= 1.0;
            let r = l.row_gen(g);
            if gd.slack {
                jac[(r, l.e(gd.bus))] = 1.0;
                jac[(r + 1, l.f(gd.bus))] = 1.0;
            } else {
                jac[(r, l.pg(g))] = 1.0;
                jac[(r + 1, l.e(gd.bus))] = 2.0 * x[l.e(gd.bus)];
                jac[(r + 1, l.f(gd.bus))] = 2.0 * x[l.f(gd.bus)];
            }
        }
        for nb in 0..l.n_dc {
            for &(j, g) in &self.gdc[nb] {
                jac[(l.row_dc(nb), l.vdc(j))] += g;
            }
        }
        for (c, cd) in self.convs.iter().enumerate() {
            let k = cd.ac;
            let (e, f) = (x[l.e(k)], x[l.f(k)]);
            let (ir, ii, m) = (x[l.ire(c)], x[l.iim(c)], x[l.mag(c)]);
            let vi = l.vdc(cd.dc);
            let v = x[vi];
            // dP = (ir, ii, e, f) . d(e, f, ir, ii);  dQ = (-ii, ir, f, -e)
            let dp = [(l.e(k), ir), (l.f(k), ii), (l.ire(c), e), (l.iim(c), f)];
            let dq = [(l.e(k), -ii), (l.f(k), ir), (l.ire(c), f), (l.iim(c), -e)];
            for &(col, d) in &dp {
                jac[(l.row_p(k), col)] += d;
            }
            for &(col, d) in &dq {
                jac[(l.row_p(k) + 1, col)] += d;
            }
            jac[(l.row_dc(cd.dc), l.idc(c))] -= 1.0;

            let r = l.row_conv(c);
            jac[(r, vi)] += x[l.idc(c)];
            jac[(r, l.idc(c))] += v;
            for &(col, d) in &dp {
                jac[(r, col)] -= d;
            }
            jac[(r, l.mag(c))] += cd.b;
            jac[(r, l.ire(c))] += 2.0 * cd.c * ir;
            jac[(r, l.iim(c))] += 2.0 * cd.c * ii;

            jac[(r + 1, l.mag(c))] = 2.0 * m;
            jac[(r + 1, l.ire(c))] = -2.0 * ir;
            jac[(r + 1, l.iim(c))] = -2.0 * ii;

            match sp.modes[c] {
                ConverterMode::DcSlack => {
                    jac[(r + 2, vi)] = 1.0;
                    for &(col, d) in &dq {
                        jac[(r + 3, col)] += d;
                    }
                }
                ConverterMode::ConstPq => {
                    for &(col, d) in &dp {
                        jac[(r + 2, col)] += d;
                    }
                    for &(col, d) in &dq {
                        jac[(r + 3, col)] += d;
                    }
                }
                ConverterMode::AcVf => {
                    jac[(r + 2, l.e(k))] = 1.0;
                    jac[(r + 3, l.f(k))] = 1.0;
                }
                ConverterMode::VoltageDroop => {
                    for &(col, d) in &dp {
                        jac[(r + 2, col)] += d;
                    }
                    jac[(r + 2, vi)] += sp.conv_k[c];
                    for &(col, d) in &dq {
                        jac[(r + 3, col)] += d;
                    }
                }
            }
        }
    }

    /// Newton iteration from `x0` (flat start when `None`).
    pub fn solve(
        &self,
        wind: &[f64],
        sp: &Setpoints,
        x0: Option<&[f64]>,
        opts: &PfOptions,
    ) -> Result<PowerFlowSolution, PfError> {
        self.check_wind(wind)?;
        let n = self.layout.len();
        let mut x = match x0 {
            Some(x0) if x0.len() != n => return Err(PfError::DimensionMismatch { expected: n, got: x0.len() }),
            Some(x0) => x0.to_vec(),
            None => self.flat_start(sp),
        };
        let mut g = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut gt = vec![0.0; n];
        let mut jac = DMatrix::zeros(n, n);
        self.residual(&x, wind, sp, &mut g);
        let mut norm = inf_norm(&g);
        let mut iterations = 0;
        while norm > opts.tol && iterations < opts.max_iter {
            self.jacobian(&x, sp, &mut jac);
            let dx = lu_solve(jac.clone(), &g).ok_or(PfError::SingularJacobian { iteration: iterations })?;
            iterations += 1;
            let mut step = 1.0;
            for h in 0..=opts.max_halvings {
                for i in 0..n {
                    trial[i] = x[i] - step * dx[i];
                }
                // the magnitude equation is even in |I|; stay on the physical root
                for c in 0..self.layout.n_conv {
                    trial[self.layout.mag(c)] = trial[self.layout.mag(c)].abs();
                }
                self.residual(&trial, wind, sp, &mut gt);
                // after the last halving the short step is taken regardless
                if inf_norm(&gt) < norm || h == opts.max_halvings {
                    break;
                }
                step *= 0.5;
            }
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut g, &mut gt);
            norm = inf_norm(&g);
            if !norm.is_finite() {
                break;
            }
        }
        let sol = PowerFlowSolution {
            state: SystemState { layout: self.layout, x },
            iterations,
            residual_norm: norm,
            converged: norm <= opts.tol,
        };
        if sol.converged {
            Ok(sol)
        } else {
            Err(PfError::NotConverged { best: Box::new(sol) })
        }
    }

    /// Itemized power balance of a state; see [`LossBreakdown`].
    pub fn balance(&self, x: &[f64], wind: &[f64]) -> LossBreakdown {
        let l = &self.layout;
        let generation = (0..l.n_gen).map(|g| x[l.pg(g)]).sum();
        let load = self.p_load.iter().sum();
        let shunt = (0..l.n_ac).map(|i| self.gs[i] * (x[l.e(i)].powi(2) + x[l.f(i)].powi(2))).sum();
        let ac_series = (0..self.branches.len())
            .map(|k| {
                let (ir, ii) = self.branch_current(x, k);
                self.branches[k].r * (ir * ir + ii * ii)
            })
            .sum();
        let converter = (0..l.n_conv).map(|c| self.converter_loss(x, c)).sum();
        let dc = (0..self.dc_branches.len())
            .map(|k| {
                let i = self.dc_branch_current(x, k);
                self.dc_branches[k].r * i * i
            })
            .sum();
        LossBreakdown { generation, wind: wind.iter().sum(), load, shunt, ac_series, converter, dc }
    }
}

/// Active-power bookkeeping in p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub generation: f64,
    pub wind: f64,
    pub load: f64,
    pub shunt: f64,
    pub ac_series: f64,
    pub converter: f64,
    pub dc: f64,
}

impl LossBreakdown {
    /// Generation + wind - load - all losses; zero at a power-flow solution.
    pub fn mismatch(&self) -> f64 {
        self.generation + self.wind - self.load - self.shunt - self.ac_series - self.converter - self.dc
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// LU solve with a relative pivot check; `None` when numerically singular.
pub fn lu_solve(a: DMatrix<f64>, b: &[f64]) -> Option<DVector<f64>> {
    let lu = a.lu();
    if !lu_is_regular(&lu) {
        return None;
    }
    lu.solve(&DVector::from_column_slice(b))
}

pub fn lu_is_regular(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let d = u.diagonal();
    let max = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = d.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    max.is_finite() && max > 0.0 && min > 1e-13 * max
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub layout: Layout,
    pub x: Vec<f64>,
}

impl SystemState {
    pub fn ac_voltage(&self, i: usize) -> (f64, f64) {
        (self.x[self.layout.e(i)], self.x[self.layout.f(i)])
    }
    pub fn v_dc(&self, n: usize) -> f64 {
        self.x[self.layout.vdc(n)]
    }
    pub fn gen_pq(&self, g: usize) -> (f64, f64) {
        (self.x[self.layout.pg(g)], self.x[self.layout.qg(g)])
    }
    pub fn converter_current(&self, c: usize) -> (f64, f64) {
        (self.x[self.layout.ire(c)], self.x[self.layout.iim(c)])
    }
    pub fn i_dc(&self, c: usize) -> f64 {
        self.x[self.layout.idc(c)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub state: SystemState,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Residual vector of `state` under the model's own setpoints.
pub fn residuals(model: &NetworkModel, state: &[f64], wind: &[f64]) -> Result<Vec<f64>, PfError> {
    let sys = PfSystem::new(model);
    let n = sys.layout.len();
    if state.len() != n {
        return Err(PfError::DimensionMismatch { expected: n, got: state.len() });
    }
    if wind.len() != sys.n_wind() {
        return Err(PfError::DimensionMismatch { expected: sys.n_wind(), got: wind.len() });
    }
    let mut out = vec![0.0; n];
    sys.residual(state, wind, &Setpoints::from_model(model), &mut out);
    Ok(out)
}

/// Power flow of the model's own setpoints with the given wind injections (p.u.).
pub fn solve_powerflow(model: &NetworkModel, wind: &[f64]) -> Result<PowerFlowSolution, PfError> {
    let sys = PfSystem::new(model);
    sys.solve(wind, &Setpoints::from_model(model), None, &PfOptions::default())
}

/// Debug dump: one row per AC bus, DC bus and converter.
pub fn write_solution_csv(
    model: &NetworkModel,
    sys: &PfSystem,
    sol: &PowerFlowSolution,
    path: impl AsRef<Path>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "kind,id,v_re,v_im,v_dc,p,q")?;
    let x = &sol.state.x;
    for (i, b) in model.ac_buses.iter().enumerate() {
        let (e, fi) = sol.state.ac_voltage(i);
        writeln!(f, "ac_bus,{},{e},{fi},,,", b.id)?;
    }
    for (n, b) in model.dc_buses.iter().enumerate() {
        writeln!(f, "dc_bus,{},,,{},,", b.id, sol.state.v_dc(n))?;
    }
    for (c, cv) in model.converters.iter().enumerate() {
        let (p, q) = sys.converter_pq(x, c);
        writeln!(f, "converter,{},,,,{p},{q}", cv.id)?;
    }
    for (g, gen) in model.generators.iter().enumerate() {
        let (p, q) = sol.state.gen_pq(g);
        writeln!(f, "generator,{},,,,{p},{q}", gen.id)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::builtin_testcase;

    fn fd_check(sys: &PfSystem, x: &[f64], wind: &[f64], sp: &Setpoints) {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        sys.jacobian(x, sp, &mut jac);
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        let h = 1e-6;
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            sys.residual(&xp, wind, sp, &mut gp);
            sys.residual(&xm, wind, sp, &mut gm);
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - jac[(i, j)]).abs() < 1e-6, "J[{i},{j}] = {} vs fd {fd}", jac[(i, j)]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = builtin_testcase();
        let sys = PfSystem::new(&model);
        let sp = Setpoints::from_model(&model);
        let wind = vec![0.7, 1.1];
        let x: Vec<f64> = sys.flat_start(&sp).iter().enumerate().map(|(i, v)| v + 0.01 * ((i * 7 % 11) as f64 - 5.0)).collect();
        fd_check(&sys, &x, &wind, &sp);
        let mut sp2 = sp.clone();
        sp2.modes[3] = ConverterMode::ConstPq;
        fd_check(&sys, &x, &wind, &sp2);
    }

    #[test]
    fn converges_and_balances() {
        let model = builtin_testcase();
        let sys = PfSystem::new(&model);
        let wind: Vec<f64> = model.wind_farms.iter().map(|w| 0.5 * w.p_max).collect();
        let sol = solve_powerflow(&model, &wind).unwrap();
        assert!(sol.residual_norm <= 1e-8);
        assert!(sol.iterations < 15, "{} iterations", sol.iterations);
        let bal = sys.balance(&sol.state.x, &wind);
        assert!(bal.mismatch().abs() < 1e-6, "{bal:?}");
        // droop law at the solution
        let c = 3;
        let d = model.converters[c].droop.unwrap();
        let (p, _) = sys.converter_pq(&sol.state.x, c);
        let v = sol.state.v_dc(model.dc_bus_index(model.converters[c].dc_bus).unwrap());
        assert!((p + d.k * (v - d.v_ref) - d.p_ref).abs() < 1e-8);
    }

    #[test]
    fn lossless_flat_identity() {
        let mut model = builtin_testcase().lossless();
        for b in &mut model.ac_buses {
            b.p_load = 0.0;
            b.q_load = 0.0;
        }
        for b in &mut model.ac_branches {
            b.b = 0.0;
        }
        for g in &mut model.generators {
            g.p_set = 0.0;
            g.v_set = 1.0;
        }
        for c in &mut model.converters {
            c.p_set = 0.0;
            c.q_set = 0.0;
            c.v_dc_set = 1.0;
            if let Some(d) = c.droop.as_mut() {
                d.p_ref = 0.0;
            }
        }
        let sys = PfSystem::new(&model);
        let sp = Setpoints::from_model(&model);
        let x = sys.flat_start(&sp);
        let r = residuals(&model, &x, &[0.0, 0.0]).unwrap();
        assert!(inf_norm(&r) < 1e-12, "{r:?}");
        let sol = solve_powerflow(&model, &[0.0, 0.0]).unwrap();
        for i in 0..sys.layout.n_ac {
            let (e, f) = sol.state.ac_voltage(i);
            assert!((e - 1.0).abs() < 1e-9 && f.abs() < 1e-9);
        }
    }

    #[test]
    fn bad_inputs() {
        let model = builtin_testcase();
        let too_much = model.wind_farms[0].p_max * 1.01;
        assert!(matches!(solve_powerflow(&model, &[too_much, 0.0]), Err(PfError::InjectionOutOfRange { .. })));
        assert!(matches!(residuals(&model, &[1.0; 3], &[0.0, 0.0]), Err(PfError::DimensionMismatch { .. })));
    }

    #[test]
    fn droop_with_zero_gain_is_constant_power() {
        let mut model = builtin_testcase();
        model.converters[3].droop.as_mut().unwrap().k = 0.0;
        let sol = solve_powerflow(&model, &[1.0, 1.0]).unwrap();
        let sys = PfSystem::new(&model);
        let (p, _) = sys.converter_pq(&sol.state.x, 3);
        assert!((p - model.converters[3].droop.unwrap().p_ref).abs() < 1e-8);
    }
}

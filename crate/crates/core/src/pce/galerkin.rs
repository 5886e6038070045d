//! Intrusive Galerkin stochastic power flow.
//!
//! Every state variable is expanded as `x(xi) = sum_k x_k Phi_k(xi)` and the
//! residual `g(x(xi), xi)` of [`crate::powerflow`] is projected onto each
//! `Phi_k`. The residuals are quadratic, so the tensor Gauss grid of the
//! basis evaluates the projections exactly. Coefficients are stored
//! mode-major: entry `k * n + v` is coefficient `k` of state variable `v`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Dyn, LU};

use super::basis::PceBasis;
use super::PceError;
use crate::grid::NetworkModel;
use crate::powerflow::{inf_norm, lu_is_regular, PfOptions, PfSystem, Setpoints};

/// Setpoints whose active-power references may depend on the germs.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSetpoints {
    pub base: Setpoints,
    /// Expansion of each generator's active-power setpoint.
    pub gen_p: Vec<Vec<f64>>,
    /// Expansion of each converter's active-power reference.
    pub conv_p: Vec<Vec<f64>>,
}

impl StochasticSetpoints {
    /// Deterministic setpoints lifted into a basis with `n_modes` functions.
    pub fn deterministic(sp: &Setpoints, n_modes: usize) -> StochasticSetpoints {
        let lift = |v: f64| {
            let mut c = vec![0.0; n_modes];
            c[0] = v;
            c
        };
        StochasticSetpoints {
            base: sp.clone(),
            gen_p: sp.gen_p.iter().map(|&p| lift(p)).collect(),
            conv_p: sp.conv_p.iter().map(|&p| lift(p)).collect(),
        }
    }

    /// Fluctuating parts scaled by `t`, means kept.
    pub fn with_spread(&self, t: f64) -> StochasticSetpoints {
        let scale = |cs: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            cs.iter().map(|c| c.iter().enumerate().map(|(k, v)| if k == 0 { *v } else { t * v }).collect()).collect()
        };
        StochasticSetpoints { base: self.base.clone(), gen_p: scale(&self.gen_p), conv_p: scale(&self.conv_p) }
    }

    /// Deterministic setpoints at a germ realization with basis values `phi`.
    pub fn at_node(&self, phi: &[f64], out: &mut Setpoints) {
        let dot = |c: &[f64]| c.iter().zip(phi).map(|(c, p)| c * p).sum::<f64>();
        for (o, c) in out.gen_p.iter_mut().zip(&self.gen_p) {
            *o = dot(c);
        }
        for (o, c) in out.conv_p.iter_mut().zip(&self.conv_p) {
            *o = dot(c);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub pf: PfSystem,
    pub basis: PceBasis,
    /// Wind injection per farm at each grid node, p.u.
    node_wind: Vec<Vec<f64>>,
}

/// Coefficients of a Galerkin solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PceSolution {
    /// Mode-major coefficients, `n_modes * n_state`.
    pub coeffs: Vec<f64>,
    pub n_state: usize,
    pub n_modes: usize,
    pub gamma: Vec<f64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl PceSolution {
    /// Coefficient vector of state variable `v`.
    pub fn var(&self, v: usize) -> Vec<f64> {
        (0..self.n_modes).map(|k| self.coeffs[k * self.n_state + v]).collect()
    }

    /// Order-0 block, the expansion mean of every state variable.
    pub fn mean_state(&self) -> &[f64] {
        &self.coeffs[..self.n_state]
    }

    pub fn moments_of(&self, v: usize) -> (f64, f64) {
        super::basis::moments_with_gamma(&self.gamma, &self.var(v))
    }
}

/// Derived quantities with exact expansions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    State(usize),
    /// Active power drawn by converter `c` from its AC bus.
    ConverterP(usize),
    ConverterQ(usize),
    /// Squared series-current magnitude of AC branch `k`.
    BranchCurrentSq(usize),
    /// Current of DC branch `k`, from `from` to `to`.
    DcBranchCurrent(usize),
}

impl GalerkinSystem {
    pub fn new(model: &NetworkModel, basis: &PceBasis) -> Result<GalerkinSystem, PceError> {
        let pf = PfSystem::new(model);
        if basis.n_dims != pf.n_wind() {
            return Err(PceError::DimensionMismatch { expected: pf.n_wind(), got: basis.n_dims });
        }
        let node_wind = basis
            .grid()
            .points
            .iter()
            .map(|p| p.iter().zip(pf.wind_pmax()).map(|(xi, pm)| xi * pm).collect())
            .collect();
        Ok(GalerkinSystem { pf, basis: basis.clone(), node_wind })
    }

    pub fn n_state(&self) -> usize {
        self.pf.layout.len()
    }

    pub fn n_modes(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.n_state() * self.n_modes()
    }

    /// Expansion of the wind injection of farm `w`: `p_max * xi_w`.
    pub fn wind_coeffs(&self, w: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.n_modes()];
        let pm = self.pf.wind_pmax()[w];
        c[0] = pm * self.basis.specs[w].mean();
        if let Some(k) = self.basis.first_order_index(w) {
            c[k] = pm;
        }
        c
    }

    fn node_state(&self, xhat: &[f64], q: usize, out: &mut [f64]) {
        let n = self.n_state();
        let phi = &self.basis.grid().phi[q];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, p) in phi.iter().enumerate() {
            let block = &xhat[k * n..(k + 1) * n];
            for (o, x) in out.iter_mut().zip(block) {
                *o += p * x;
            }
        }
    }

    pub fn residual(&self, xhat: &[f64], ssp: &StochasticSetpoints, out: &mut [f64]) {
        let n = self.n_state();
        let grid = self.basis.grid();
        let mut xq = vec![0.0; n];
        let mut gq = vec![0.0; n];
        let mut sp = ssp.base.clone();
        out.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..grid.weights.len() {
            self.node_state(xhat, q, &mut xq);
            ssp.at_node(&grid.phi[q], &mut sp);
            self.pf.residual(&xq, &self.node_wind[q], &sp, &mut gq);
            for (k, p) in grid.phi[q].iter().enumerate() {
                let s = grid.weights[q] * p / self.basis.gamma[k];
                for (o, g) in out[k * n..(k + 1) * n].iter_mut().zip(&gq) {
                    *o += s * g;
                }
            }
        }
    }

    pub fn jacobian(&self, xhat: &[f64], ssp: &StochasticSetpoints) -> DMatrix<f64> {
        let n = self.n_state();
        let nm = self.n_modes();
        let grid = self.basis.grid();
        let mut jac = DMatrix::zeros(n * nm, n * nm);
        let mut jq = DMatrix::zeros(n, n);
        let mut xq = vec![0.0; n];
        let mut sp = ssp.base.clone();
        let mut nz: Vec<(usize, usize, f64)> = Vec::new();
        for q in 0..grid.weights.len() {
            self.node_state(xhat, q, &mut xq);
            ssp.at_node(&grid.phi[q], &mut sp);
            self.pf.jacobian(&xq, &sp, &mut jq);
            nz.clear();
            for c in 0..n {
                for r in 0..n {
                    let v = jq[(r, c)];
                    if v != 0.0 {
                        nz.push((r, c, v));
                    }
                }
            }
            let phi = &grid.phi[q];
            for k in 0..nm {
                for l in 0..nm {
                    let s = grid.weights[q] * phi[k] * phi[l] / self.basis.gamma[k];
                    if s == 0.0 {
                        continue;
                    }
                    for &(r, c, v) in &nz {
                        jac[(k * n + r, l * n + c)] += s * v;
                    }
                }
            }
        }
        jac
    }

    /// Deterministic power flow at the mean injections, lifted to order 0.
    pub fn initial_guess(&self, ssp: &StochasticSetpoints) -> Result<Vec<f64>, PceError> {
        let mut sp = ssp.base.clone();
        for (o, c) in sp.gen_p.iter_mut().zip(&ssp.gen_p) {
            *o = c[0];
        }
        for (o, c) in sp.conv_p.iter_mut().zip(&ssp.conv_p) {
            *o = c[0];
        }
        let wind: Vec<f64> = (0..self.pf.n_wind()).map(|w| self.wind_coeffs(w)[0]).collect();
        let sol = self.pf.solve(&wind, &sp, None, &PfOptions::default())?;
        let mut x = vec![0.0; self.dim()];
        x[..self.n_state()].copy_from_slice(&sol.state.x);
        Ok(x)
    }

    /// Newton iteration on the projected system. If it fails, the wind
    /// spread is grown from a quarter of its size in steps, each solve
    /// starting from the previous one.
    pub fn solve(
        &self,
        ssp: &StochasticSetpoints,
        x0: Option<&[f64]>,
        opts: &PfOptions,
    ) -> Result<(PceSolution, LU<f64, Dyn, Dyn>), PceError> {
        let x = match x0 {
            Some(x0) if x0.len() != self.dim() => {
                return Err(PceError::DimensionMismatch { expected: self.dim(), got: x0.len() })
            }
            Some(x0) => x0.to_vec(),
            None => self.initial_guess(ssp)?,
        };
        let err = match self.newton(ssp, x, opts) {
            Ok(r) => return Ok(r),
            Err(e @ (PceError::NotConverged { .. } | PceError::Singular(_))) => e,
            Err(e) => return Err(e),
        };
        let mut x = self.initial_guess(ssp)?;
        for t in [0.25, 0.5, 0.75] {
            let sys = self.with_spread(t);
            match sys.newton(&ssp.with_spread(t), x.clone(), opts) {
                Ok((s, _)) => x = s.coeffs,
                Err(_) => return Err(err),
            }
        }
        self.newton(ssp, x, opts).map_err(|_| err)
    }

    /// Copy with every wind injection pulled toward its mean: `mean + t (w - mean)`.
    pub fn with_spread(&self, t: f64) -> GalerkinSystem {
        let mean: Vec<f64> = (0..self.pf.n_wind()).map(|w| self.wind_coeffs(w)[0]).collect();
        let node_wind = self
            .node_wind
            .iter()
            .map(|ws| ws.iter().zip(&mean).map(|(w, m)| m + t * (w - m)).collect())
            .collect();
        GalerkinSystem { pf: self.pf.clone(), basis: self.basis.clone(), node_wind }
    }

    fn newton(
        &self,
        ssp: &StochasticSetpoints,
        mut x: Vec<f64>,
        opts: &PfOptions,
    ) -> Result<(PceSolution, LU<f64, Dyn, Dyn>), PceError> {
        let dim = self.dim();
        let mut g = vec![0.0; dim];
        self.residual(&x, ssp, &mut g);
        let mut norm = inf_norm(&g);
        let mut it = 0;
        loop {
            let lu = self.jacobian(&x, ssp).lu();
            if !lu_is_regular(&lu) {
                return Err(PceError::Singular(it));
            }
            if norm <= opts.tol {
                return Ok((self.wrap(x, norm, it), lu));
            }
            if it >= opts.max_iter || !norm.is_finite() {
                return Err(PceError::NotConverged { iterations: it, residual: norm });
            }
            let dx = lu.solve(&DVector::from_column_slice(&g)).ok_or(PceError::Singular(it))?;
            it += 1;
            let (xn, gn, nn) = self.damped_step(&x, &dx, ssp, norm, opts);
            x = xn;
            g = gn;
            norm = nn;
        }
    }

    /// Newton with a frozen Jacobian factorization (chord method).
    ///
    /// Falls back to full Newton when the chord iteration stalls.
    pub fn solve_chord(
        &self,
        ssp: &StochasticSetpoints,
        x0: &[f64],
        lu: &LU<f64, Dyn, Dyn>,
        opts: &PfOptions,
    ) -> Result<PceSolution, PceError> {
        let mut x = x0.to_vec();
        let mut g = vec![0.0; self.dim()];
        self.residual(&x, ssp, &mut g);
        let mut norm = inf_norm(&g);
        let mut it = 0;
        while norm > opts.tol {
            if it >= 25 || !norm.is_finite() {
                return self.solve(ssp, Some(x0), opts).map(|(s, _)| s);
            }
            let dx = lu.solve(&DVector::from_column_slice(&g)).ok_or(PceError::Singular(it))?;
            it += 1;
            let before = norm;
            for (xi, d) in x.iter_mut().zip(dx.iter()) {
                *xi -= d;
            }
            self.residual(&x, ssp, &mut g);
            norm = inf_norm(&g);
            if !(norm < 0.9 * before) && norm > opts.tol {
                return self.solve(ssp, Some(x0), opts).map(|(s, _)| s);
            }
        }
        Ok(self.wrap(x, norm, it))
    }

    fn damped_step(
        &self,
        x: &[f64],
        dx: &DVector<f64>,
        ssp: &StochasticSetpoints,
        norm: f64,
        opts: &PfOptions,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let mut step = 1.0;
        let mut trial = vec![0.0; x.len()];
        let mut gt = vec![0.0; x.len()];
        for h in 0..=opts.max_halvings {
            for i in 0..x.len() {
                trial[i] = x[i] - step * dx[i];
            }
            self.residual(&trial, ssp, &mut gt);
            let nt = inf_norm(&gt);
            if nt < norm || h == opts.max_halvings {
                return (trial, gt, nt);
            }
            step *= 0.5;
        }
        unreachable!()
    }

    fn wrap(&self, coeffs: Vec<f64>, norm: f64, iterations: usize) -> PceSolution {
        PceSolution {
            coeffs,
            n_state: self.n_state(),
            n_modes: self.n_modes(),
            gamma: self.basis.gamma.clone(),
            converged: true,
            residual_norm: norm,
            iterations,
        }
    }

    /// Exact expansion of a derived quantity.
    pub fn quantity(&self, sol: &PceSolution, q: Quantity) -> Vec<f64> {
        let l = &self.pf.layout;
        let b = &self.basis;
        match q {
            Quantity::State(v) => sol.var(v),
            Quantity::ConverterP(c) | Quantity::ConverterQ(c) => {
                let (ac, _) = self.pf.converter_buses(c);
                let (e, f) = (sol.var(l.e(ac)), sol.var(l.f(ac)));
                let (ir, ii) = (sol.var(l.ire(c)), sol.var(l.iim(c)));
                if matches!(q, Quantity::ConverterP(_)) {
                    add(&b.product(&e, &ir), &b.product(&f, &ii), 1.0)
                } else {
                    add(&b.product(&f, &ir), &b.product(&e, &ii), -1.0)
                }
            }
            Quantity::BranchCurrentSq(k) => {
                let (ir, ii) = self.branch_current_coeffs(sol, k);
                add(&b.product(&ir, &ir), &b.product(&ii, &ii), 1.0)
            }
            Quantity::DcBranchCurrent(k) => {
                let br = self.pf.dc_branches[k];
                let (vf, vt) = (sol.var(l.vdc(br.from)), sol.var(l.vdc(br.to)));
                vf.iter().zip(&vt).map(|(a, c)| (a - c) / br.r).collect()
            }
        }
    }

    /// Linear map from the solution to the series current of AC branch `k`.
    fn branch_current_coeffs(&self, sol: &PceSolution, k: usize) -> (Vec<f64>, Vec<f64>) {
        let l = &self.pf.layout;
        let br = self.pf.branches[k];
        let de: Vec<f64> = sol.var(l.e(br.from)).iter().zip(sol.var(l.e(br.to))).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = sol.var(l.f(br.from)).iter().zip(sol.var(l.f(br.to))).map(|(a, b)| a - b).collect();
        let ir = de.iter().zip(&df).map(|(e, f)| br.g * e - br.b * f).collect();
        let ii = de.iter().zip(&df).map(|(e, f)| br.g * f + br.b * e).collect();
        (ir, ii)
    }

    /// Gradient of `sum_k w_k q_k` with respect to the solution coefficients,
    /// as `(mode-major index, derivative)` pairs.
    pub fn quantity_grad(&self, sol: &PceSolution, q: Quantity, w: &[f64]) -> Vec<(usize, f64)> {
        let l = &self.pf.layout;
        let n = self.n_state();
        let nm = self.n_modes();
        let b = &self.basis;
        // M_ij = sum_k w_k T_ijk / gamma_k, the bilinear form of the weighted product
        let bilinear = || {
            let mut m = vec![0.0; nm * nm];
            for &(i, j, k, t) in &b.triple_products {
                let mut put = |a: usize, c: usize, kk: usize| {
                    m[a * nm + c] += w[kk] * t / b.gamma[kk];
                };
                // every distinct permutation of (i, j, k) once
                let mut perms = vec![(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)];
                perms.sort();
                perms.dedup();
                for (a, c, kk) in perms {
                    put(a, c, kk);
                }
            }
            m
        };
        let mat_vec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            (0..nm).map(|i| (0..nm).map(|j| m[i * nm + j] * v[j]).sum()).collect()
        };
        let mut out = Vec::new();
        let mut emit = |var: usize, d: &[f64], s: f64| {
            for (k, dk) in d.iter().enumerate() {
                if *dk != 0.0 {
                    out.push((k * n + var, s * dk));
                }
            }
        };
        match q {
            Quantity::State(v) => emit(v, w, 1.0),
            Quantity::ConverterP(c) | Quantity::ConverterQ(c) => {
                let m = bilinear();
                let (ac, _) = self.pf.converter_buses(c);
                let (e, f) = (sol.var(l.e(ac)), sol.var(l.f(ac)));
                let (ir, ii) = (sol.var(l.ire(c)), sol.var(l.iim(c)));
                if matches!(q, Quantity::ConverterP(_)) {
                    // e ir + f ii
                    emit(l.e(ac), &mat_vec(&m, &ir), 1.0);
                    emit(l.ire(c), &mat_vec(&m, &e), 1.0);
                    emit(l.f(ac), &mat_vec(&m, &ii), 1.0);
                    emit(l.iim(c), &mat_vec(&m, &f), 1.0);
                } else {
                    // f ir - e ii
                    emit(l.f(ac), &mat_vec(&m, &ir), 1.0);
                    emit(l.ire(c), &mat_vec(&m, &f), 1.0);
                    emit(l.e(ac), &mat_vec(&m, &ii), -1.0);
                    emit(l.iim(c), &mat_vec(&m, &e), -1.0);
                }
            }
            Quantity::BranchCurrentSq(k) => {
                let m = bilinear();
                let br = self.pf.branches[k];
                let (ir, ii) = self.branch_current_coeffs(sol, k);
                let dir: Vec<f64> = mat_vec(&m, &ir).iter().map(|v| 2.0 * v).collect();
                let dii: Vec<f64> = mat_vec(&m, &ii).iter().map(|v| 2.0 * v).collect();
                let dde: Vec<f64> = dir.iter().zip(&dii).map(|(a, c)| br.g * a + br.b * c).collect();
                let ddf: Vec<f64> = dir.iter().zip(&dii).map(|(a, c)| -br.b * a + br.g * c).collect();
                emit(l.e(br.from), &dde, 1.0);
                emit(l.e(br.to), &dde, -1.0);
                emit(l.f(br.from), &ddf, 1.0);
                emit(l.f(br.to), &ddf, -1.0);
            }
            Quantity::DcBranchCurrent(k) => {
                let br = self.pf.dc_branches[k];
                emit(l.vdc(br.from), w, 1.0 / br.r);
                emit(l.vdc(br.to), w, -1.0 / br.r);
            }
        }
        out
    }

    /// Mean and variance of a derived quantity.
    pub fn quantity_moments(&self, sol: &PceSolution, q: Quantity) -> (f64, f64) {
        super::basis::moments_with_gamma(&self.basis.gamma, &self.quantity(sol, q))
    }
}

fn add(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Galerkin power flow of the model's own setpoints under the wind germs of `basis`.
pub fn galerkin_solve(model: &NetworkModel, basis: &PceBasis) -> Result<PceSolution, PceError> {
    let sys = GalerkinSystem::new(model, basis)?;
    let ssp = StochasticSetpoints::deterministic(&Setpoints::from_model(model), basis.len());
    sys.solve(&ssp, None, &PfOptions::default()).map(|(s, _)| s)
}

/// Audit dump: `variable,k,multi_index,coefficient`.
pub fn write_pce_csv(
    model: &NetworkModel,
    sys: &GalerkinSystem,
    sol: &PceSolution,
    path: impl AsRef<Path>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "variable,k,multi_index,coefficient")?;
    let l = &sys.pf.layout;
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, b) in model.ac_buses.iter().enumerate() {
        rows.push((format!("e_{}", b.id), sol.var(l.e(i))));
        rows.push((format!("f_{}", b.id), sol.var(l.f(i))));
    }
    for (n, b) in model.dc_buses.iter().enumerate() {
        rows.push((format!("vdc_{}", b.id), sol.var(l.vdc(n))));
    }
    for (g, gen) in model.generators.iter().enumerate() {
        rows.push((format!("pg_{}", gen.id), sol.var(l.pg(g))));
        rows.push((format!("qg_{}", gen.id), sol.var(l.qg(g))));
    }
    for (c, cv) in model.converters.iter().enumerate() {
        rows.push((format!("pconv_{}", cv.id), sys.quantity(sol, Quantity::ConverterP(c))));
        rows.push((format!("qconv_{}", cv.id), sys.quantity(sol, Quantity::ConverterQ(c))));
        rows.push((format!("idc_{}", cv.id), sol.var(l.idc(c))));
    }
    for (name, coeffs) in rows {
        for (k, c) in coeffs.iter().enumerate() {
            let mi: Vec<String> = sys.basis.multi_indices[k].iter().map(|p| p.to_string()).collect();
            writeln!(f, "{name},{k},{},{c}", mi.join(";"))?;
        }
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::builtin_testcase;
    use crate::powerflow::solve_powerflow;
    use crate::wind::{beta_spec, reference_zone_stats};

    fn mid_basis(model: &NetworkModel, degree: usize) -> PceBasis {
        let st = reference_zone_stats()[1];
        let specs: Vec<_> = [0.45, 0.55].iter().map(|&p| beta_spec(p, &st).unwrap()).collect();
        let _ = model;
        PceBasis::new(&specs, degree)
    }

    #[test]
    fn degree_zero_is_deterministic_flow() {
        let model = builtin_testcase();
        let basis = mid_basis(&model, 0);
        let sol = galerkin_solve(&model, &basis).unwrap();
        let wind: Vec<f64> =
            model.wind_farms.iter().zip(&basis.specs).map(|(w, s)| w.p_max * s.mean()).collect();
        let det = solve_powerflow(&model, &wind).unwrap();
        assert_eq!(sol.n_modes, 1);
        for (a, b) in sol.coeffs.iter().zip(&det.state.x) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = builtin_testcase();
        let basis = mid_basis(&model, 2);
        let sys = GalerkinSystem::new(&model, &basis).unwrap();
        let ssp = StochasticSetpoints::deterministic(&Setpoints::from_model(&model), basis.len());
        let (sol, _) = sys.solve(&ssp, None, &PfOptions::default()).unwrap();
        assert!(sol.residual_norm <= 1e-8);
        let x: Vec<f64> = sol.coeffs.iter().enumerate().map(|(i, v)| v + 1e-3 * ((i % 5) as f64 - 2.0)).collect();
        let jac = sys.jacobian(&x, &ssp);
        let dim = sys.dim();
        let mut gp = vec![0.0; dim];
        let mut gm = vec![0.0; dim];
        let h = 1e-5;
        for j in (0..dim).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            sys.residual(&xp, &ssp, &mut gp);
            sys.residual(&xm, &ssp, &mut gm);
            for i in 0..dim {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - jac[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()), "J[{i},{j}]: {fd} vs {}", jac[(i, j)]);
            }
        }
    }

    #[test]
    fn quantity_gradients_match_finite_differences() {
        let model = builtin_testcase();
        let basis = mid_basis(&model, 2);
        let sys = GalerkinSystem::new(&model, &basis).unwrap();
        let ssp = StochasticSetpoints::deterministic(&Setpoints::from_model(&model), basis.len());
        let (mut sol, _) = sys.solve(&ssp, None, &PfOptions::default()).unwrap();
        // perturb so every coefficient is nonzero
        for (i, c) in sol.coeffs.iter_mut().enumerate() {
            *c += 1e-2 * (((i * 13) % 7) as f64 - 3.0);
        }
        let w = [0.7, -0.3, 1.1, 0.4, -0.9, 0.2];
        let h = 1e-6;
        for q in [Quantity::ConverterP(3), Quantity::ConverterQ(0), Quantity::BranchCurrentSq(4), Quantity::DcBranchCurrent(1)] {
            let grad = sys.quantity_grad(&sol, q, &w);
            let mut dense = vec![0.0; sys.dim()];
            for (i, d) in grad {
                dense[i] += d;
            }
            let f = |s: &PceSolution| sys.quantity(s, q).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            for j in (0..sys.dim()).step_by(3) {
                let mut sp = sol.clone();
                let mut sm = sol.clone();
                sp.coeffs[j] += h;
                sm.coeffs[j] -= h;
                let fd = (f(&sp) - f(&sm)) / (2.0 * h);
                assert!((fd - dense[j]).abs() < 1e-6, "{q:?} coefficient {j}: {} vs {fd}", dense[j]);
            }
        }
    }

    #[test]
    fn basis_dimension_checked() {
        let model = builtin_testcase();
        let st = reference_zone_stats()[1];
        let specs: Vec<_> = (0..3).map(|_| beta_spec(0.5, &st).unwrap()).collect();
        let basis = PceBasis::new(&specs, 2);
        assert!(matches!(GalerkinSystem::new(&model, &basis), Err(PceError::DimensionMismatch { .. })));
    }
}

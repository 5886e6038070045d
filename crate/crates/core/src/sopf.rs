//! Chance-constrained stochastic OPF in PCE coefficient space.
//!
//! Decisions are the expansion coefficients of every non-slack generator's
//! active power and of every dispatchable converter's active power (these
//! are affine-in-germ policies for `d = 1` and polynomial policies above),
//! plus the DC-slack voltage setpoint. The state follows from the Galerkin
//! power flow. Each probabilistic limit `P(y <= y_max) >= 1 - eps` becomes
//! `E[y] + lambda(eps) std[y] <= y_max`, with moments read off the
//! expansion.
//!
//! [`solve_opf`] is the deterministic counterpart on the plain power flow.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Dyn, LU};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::grid::{ConverterMode, GenCost, NetworkModel};
use crate::ipm::{self, Curvature, Eval, IpmOptions, IpmStatus, Nlp, Phase1};
use crate::pce::galerkin::{GalerkinSystem, PceSolution, Quantity, StochasticSetpoints};
use crate::pce::{PceBasis, PceError};
use crate::powerflow::{lu_is_regular, PfError, PfOptions, PfSystem, Setpoints};

/// Offset keeping `std = sqrt(var + SD_EPS^2) - SD_EPS` differentiable at zero variance.
const SD_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SopfError {
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("infeasible: most violated constraint {constraint} by {violation:.3e}")]
    Infeasible { constraint: String, violation: f64 },
    #[error("interior-point solver stalled after {} iterations (KKT {:.2e})", .best.iterations, .best.kkt_residual)]
    Stalled { best: Box<SopfSolution> },
    #[error("model evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Pce(#[from] PceError),
    #[error(transparent)]
    PowerFlow(#[from] PfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginRule {
    ChebyshevOneSided,
    GaussianApprox,
}

impl MarginRule {
    pub fn parse(s: &str) -> Option<MarginRule> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chebyshev" | "chebyshev_one_sided" | "cantelli" => Some(MarginRule::ChebyshevOneSided),
            "gaussian" | "gaussian_approx" | "normal" => Some(MarginRule::GaussianApprox),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MarginRule::ChebyshevOneSided => "chebyshev",
            MarginRule::GaussianApprox => "gaussian",
        }
    }
}

/// Tightening factor `lambda(eps)`: `sqrt((1 - eps) / eps)` for the one-sided
/// Chebyshev bound, the standard normal `(1 - eps)`-quantile otherwise.
pub fn chance_margin(epsilon: f64, rule: MarginRule) -> Result<f64, SopfError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(SopfError::InvalidEpsilon(epsilon));
    }
    Ok(match rule {
        MarginRule::ChebyshevOneSided => ((1.0 - epsilon) / epsilon).sqrt(),
        MarginRule::GaussianApprox => Normal::standard().inverse_cdf(1.0 - epsilon),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    DcVoltage,
    GeneratorP,
    ConverterP,
    AcBranchCurrent,
    DcBranchCurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChanceConstraint {
    pub kind: ConstraintKind,
    pub side: Side,
    pub quantity: Quantity,
    pub limit: f64,
    /// Divisor applied to the constraint value inside the solver.
    pub scale: f64,
    pub label: String,
}

/// Moments and margin of one chance constraint at the solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChanceAudit {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    /// `lambda * std`.
    pub margin: f64,
    pub limit: f64,
    /// Distance to the limit after tightening, in the quantity's units;
    /// negative when violated.
    pub slack: f64,
}

/// Optimized controller references.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    /// Expansion of every generator's active power (slack units from the state).
    pub gen_p: Vec<Vec<f64>>,
    /// Expansion of every converter's AC-side active power.
    pub conv_p: Vec<Vec<f64>>,
    /// DC voltage setpoint of the DC-slack converter.
    pub v_dc_slack: f64,
    /// Mean DC voltage at each converter, the droop `V_ref`.
    pub v_ref: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SopfSolution {
    pub dispatch: Dispatch,
    pub states: PceSolution,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: IpmStatus,
    pub chance_audit: Vec<ChanceAudit>,
    pub lambda: f64,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SopfOptions {
    pub epsilon: f64,
    pub margin_rule: MarginRule,
    pub ipm: IpmOptions,
    pub pf: PfOptions,
}

impl Default for SopfOptions {
    fn default() -> Self {
        SopfOptions {
            epsilon: 0.05,
            margin_rule: MarginRule::ChebyshevOneSided,
            ipm: IpmOptions::default(),
            pf: INNER_GALERKIN,
        }
    }
}

/// Inner flows are solved well below the optimizer tolerance so the merit
/// function is smooth to the line search. The Galerkin residual carries a
/// roundoff floor near `1e-11` from the division by small basis norms.
const INNER_PF: PfOptions = PfOptions { tol: 1e-11, max_iter: 50, max_halvings: 6 };
const INNER_GALERKIN: PfOptions = PfOptions { tol: 1e-10, max_iter: 50, max_halvings: 6 };

#[derive(Debug, Clone)]
pub struct SopfProblem {
    pub model: NetworkModel,
    pub basis: PceBasis,
    pub options: SopfOptions,
}

/// `E[C]` of quadratic costs from the expansions of generator power.
pub fn expected_cost(costs: &[GenCost], gen_p: &[Vec<f64>], gamma: &[f64]) -> f64 {
    costs
        .iter()
        .zip(gen_p)
        .map(|(c, p)| {
            let (mean, var) = crate::pce::basis::moments_with_gamma(gamma, p);
            c.c2 * (mean * mean + var) + c.c1 * mean + c.c0
        })
        .sum()
}

/// Which references the optimizer moves.
#[derive(Debug, Clone)]
pub struct Controls {
    pub gens: Vec<usize>,
    pub convs: Vec<usize>,
    pub slack_conv: usize,
    /// Whether the DC-slack voltage is a decision.
    pub free_v: bool,
    pub n_modes: usize,
    /// Decisions are normalized coefficients, `x_k sqrt(gamma_k)`; this
    /// holds `1 / sqrt(gamma_k)`.
    pub mode_scale: Vec<f64>,
}

impl Controls {
    /// `gamma` holds the basis norms; `[1.0]` gives the deterministic problem.
    pub fn new(model: &NetworkModel, gamma: &[f64], free_v: bool) -> Controls {
        Controls {
            gens: model.generators.iter().enumerate().filter(|(_, g)| !g.slack).map(|(i, _)| i).collect(),
            convs: model
                .converters
                .iter()
                .enumerate()
                .filter(|(_, c)| matches!(c.mode, ConverterMode::ConstPq | ConverterMode::VoltageDroop))
                .map(|(i, _)| i)
                .collect(),
            slack_conv: model.dc_slack_converter().expect("validated model"),
            free_v,
            n_modes: gamma.len(),
            mode_scale: gamma.iter().map(|g| 1.0 / g.sqrt()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        (self.gens.len() + self.convs.len()) * self.n_modes + usize::from(self.free_v)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Setpoints in which every dispatchable converter holds constant power.
    pub fn base_setpoints(&self, model: &NetworkModel) -> Setpoints {
        let mut sp = Setpoints::from_model(model);
        for &c in &self.convs {
            sp.modes[c] = ConverterMode::ConstPq;
            sp.conv_k[c] = 0.0;
        }
        sp
    }

    pub fn apply(&self, base: &Setpoints, u: &[f64]) -> StochasticSetpoints {
        let nm = self.n_modes;
        let mut ssp = StochasticSetpoints::deterministic(base, nm);
        for (i, &g) in self.gens.iter().enumerate() {
            ssp.gen_p[g] = self.coeffs(&u[i * nm..(i + 1) * nm]);
        }
        let off = self.gens.len() * nm;
        for (i, &c) in self.convs.iter().enumerate() {
            ssp.conv_p[c] = self.coeffs(&u[off + i * nm..off + (i + 1) * nm]);
        }
        if self.free_v {
            ssp.base.conv_v_dc[self.slack_conv] = u[self.len() - 1];
        }
        ssp
    }

    fn coeffs(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.mode_scale).map(|(u, s)| u * s).collect()
    }

    /// Inverse of the coefficient scaling for one block.
    pub fn decisions(&self, coeffs: &[f64]) -> Vec<f64> {
        coeffs.iter().zip(&self.mode_scale).map(|(c, s)| c / s).collect()
    }

    /// `(mode, row, column, factor)` of the setpoint selection: residual row
    /// `row` of mode `mode` depends on decision `column` with slope `-factor`.
    pub fn selection(&self, layout: &crate::powerflow::Layout) -> Vec<(usize, usize, usize, f64)> {
        let nm = self.n_modes;
        let mut out = Vec::new();
        for (i, &g) in self.gens.iter().enumerate() {
            for k in 0..nm {
                out.push((k, layout.row_gen(g), i * nm + k, self.mode_scale[k]));
            }
        }
        let off = self.gens.len() * nm;
        for (i, &c) in self.convs.iter().enumerate() {
            for k in 0..nm {
                out.push((k, layout.row_conv(c) + 2, off + i * nm + k, self.mode_scale[k]));
            }
        }
        if self.free_v {
            out.push((0, layout.row_conv(self.slack_conv) + 2, self.len() - 1, 1.0));
        }
        out
    }
}

/// Chance constraints of the model; `AcVf` collectors carry uncontrollable
/// wind and get no power limit.
pub fn build_constraints(model: &NetworkModel) -> Vec<ChanceConstraint> {
    let mut out = Vec::new();
    let mut two = |kind, q, lo: f64, hi: f64, scale: f64, label: String| {
        out.push(ChanceConstraint { kind, side: Side::Upper, quantity: q, limit: hi, scale, label: format!("{label}:max") });
        out.push(ChanceConstraint { kind, side: Side::Lower, quantity: q, limit: lo, scale, label: format!("{label}:min") });
    };
    let layout = crate::powerflow::Layout::of(model);
    let global = model
        .converters
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), c| (lo.max(c.v_dc_min), hi.min(c.v_dc_max)));
    for (n, bus) in model.dc_buses.iter().enumerate() {
        let band = model
            .converters
            .iter()
            .filter(|c| c.dc_bus == bus.id)
            .fold(None, |acc: Option<(f64, f64)>, c| {
                let (lo, hi) = acc.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                Some((lo.max(c.v_dc_min), hi.min(c.v_dc_max)))
            })
            .unwrap_or(global);
        two(
            ConstraintKind::DcVoltage,
            Quantity::State(layout.vdc(n)),
            band.0,
            band.1,
            0.1,
            format!("dc_voltage:{}", bus.id),
        );
    }
    for (g, gen) in model.generators.iter().enumerate() {
        two(ConstraintKind::GeneratorP, Quantity::State(layout.pg(g)), gen.p_min, gen.p_max, 1.0, format!("generator_p:{}", gen.id));
    }
    for (c, conv) in model.converters.iter().enumerate() {
        if conv.mode == ConverterMode::AcVf {
            continue;
        }
        two(
            ConstraintKind::ConverterP,
            Quantity::ConverterP(c),
            -conv.p_rating,
            conv.p_rating,
            1.0,
            format!("converter_p:{}", conv.id),
        );
    }
    for (k, br) in model.ac_branches.iter().enumerate() {
        out.push(ChanceConstraint {
            kind: ConstraintKind::AcBranchCurrent,
            side: Side::Upper,
            quantity: Quantity::BranchCurrentSq(k),
            limit: br.rating * br.rating,
            scale: br.rating * br.rating,
            label: format!("ac_branch_current:{}:max", br.id),
        });
    }
    for (k, br) in model.dc_branches.iter().enumerate() {
        out.push(ChanceConstraint {
            kind: ConstraintKind::DcBranchCurrent,
            side: Side::Upper,
            quantity: Quantity::DcBranchCurrent(k),
            limit: br.rating,
            scale: 1.0,
            label: format!("dc_branch_current:{}:max", br.id),
        });
        out.push(ChanceConstraint {
            kind: ConstraintKind::DcBranchCurrent,
            side: Side::Lower,
            quantity: Quantity::DcBranchCurrent(k),
            limit: -br.rating,
            scale: 1.0,
            label: format!("dc_branch_current:{}:min", br.id),
        });
    }
    out
}

fn std_of(var: f64) -> f64 {
    (var + SD_EPS * SD_EPS).sqrt() - SD_EPS
}

/// Tightened constraint value (scaled) and the mode weights of its gradient.
fn constraint_value(cc: &ChanceConstraint, coeffs: &[f64], gamma: &[f64], lambda: f64) -> (f64, Vec<f64>, ChanceAudit) {
    let (mean, var) = crate::pce::basis::moments_with_gamma(gamma, coeffs);
    let sd = std_of(var);
    let root = (var + SD_EPS * SD_EPS).sqrt();
    let mut w: Vec<f64> = coeffs.iter().zip(gamma).map(|(c, g)| lambda * g * c / root).collect();
    let (value, slack) = match cc.side {
        Side::Upper => {
            w[0] = 1.0;
            (mean + lambda * sd - cc.limit, cc.limit - mean - lambda * sd)
        }
        Side::Lower => {
            w[0] = -1.0;
            (cc.limit - mean + lambda * sd, mean - lambda * sd - cc.limit)
        }
    };
    for x in w.iter_mut() {
        *x /= cc.scale;
    }
    let audit = ChanceAudit { label: cc.label.clone(), mean, std: sd, margin: lambda * sd, limit: cc.limit, slack };
    (value / cc.scale, w, audit)
}

/// Hessian of `a * std(q)` in the coefficients `q`; the mean does not enter.
fn std_curvature(q: &[f64], gamma: &[f64], a: f64) -> DMatrix<f64> {
    let nm = q.len();
    let var: f64 = (1..nm).map(|k| gamma[k] * q[k] * q[k]).sum();
    let root = (var + SD_EPS * SD_EPS).sqrt();
    let gq: Vec<f64> = (0..nm).map(|k| if k == 0 { 0.0 } else { gamma[k] * q[k] }).collect();
    DMatrix::from_fn(nm, nm, |i, j| {
        let diag = if i == j && i > 0 { gamma[i] / root } else { 0.0 };
        a * (diag - gq[i] * gq[j] / (root * root * root))
    })
}

/// Solution, factorization and sensitivity at the last evaluated point.
struct Linearization {
    u: Vec<f64>,
    x: Vec<f64>,
    lu: LU<f64, Dyn, Dyn>,
    dx: DMatrix<f64>,
}

/// Galerkin-backed NLP in coefficient space.
struct StochasticNlp<'a> {
    sys: &'a GalerkinSystem,
    controls: &'a Controls,
    base: Setpoints,
    constraints: &'a [ChanceConstraint],
    costs: Vec<GenCost>,
    lambda: f64,
    cost_scale: f64,
    pf: PfOptions,
    cache: Option<Linearization>,
    last: Option<PceSolution>,
}

impl StochasticNlp<'_> {
    fn state_at(&mut self, u: &[f64]) -> Result<(PceSolution, LU<f64, Dyn, Dyn>), PceError> {
        let ssp = self.controls.apply(&self.base, u);
        let sol = match &self.cache {
            Some(lin) => {
                // first-order prediction from the last linearization
                let mut x = lin.x.clone();
                for (j, (a, b)) in u.iter().zip(&lin.u).enumerate() {
                    let d = a - b;
                    if d != 0.0 {
                        for (i, xi) in x.iter_mut().enumerate() {
                            *xi += lin.dx[(i, j)] * d;
                        }
                    }
                }
                match self.sys.solve_chord(&ssp, &x, &lin.lu, &self.pf) {
                    Ok(s) => s,
                    Err(_) => self.sys.solve(&ssp, Some(&lin.x), &self.pf)?.0,
                }
            }
            None => self.sys.solve(&ssp, None, &self.pf)?.0,
        };
        let lu = self.sys.jacobian(&sol.coeffs, &ssp).lu();
        if !lu_is_regular(&lu) {
            return Err(PceError::Singular(0));
        }
        Ok((sol, lu))
    }

    fn gen_coeffs(&self, sol: &PceSolution) -> Vec<Vec<f64>> {
        let l = &self.sys.pf.layout;
        (0..l.n_gen).map(|g| sol.var(l.pg(g))).collect()
    }
}

impl Nlp for StochasticNlp<'_> {
    fn n(&self) -> usize {
        self.controls.len()
    }

    fn m(&self) -> usize {
        self.constraints.len()
    }

    fn eval(&mut self, u: &[f64]) -> Result<Eval, String> {
        let (sol, lu) = self.state_at(u).map_err(|e| e.to_string())?;
        let n_state = self.sys.n_state();
        let dim = self.sys.dim();
        let nu = self.n();
        let gamma = &self.sys.basis.gamma;
        let l = self.sys.pf.layout;

        // dx/du = J^-1 S, S the +1 selection of the setpoint rows
        let mut rhs = DMatrix::zeros(dim, nu);
        for (k, row, col, a) in self.controls.selection(&l) {
            rhs[(k * n_state + row, col)] = a;
        }
        if !lu.solve_mut(&mut rhs) {
            return Err("singular Galerkin Jacobian".into());
        }
        let dx = rhs;

        let gen_p = self.gen_coeffs(&sol);
        let f = expected_cost(&self.costs, &gen_p, gamma);
        let mut dfdx = vec![0.0; dim];
        for (g, c) in self.costs.iter().enumerate() {
            for (k, p) in gen_p[g].iter().enumerate() {
                let d = if k == 0 { 2.0 * c.c2 * p + c.c1 } else { 2.0 * c.c2 * gamma[k] * p };
                dfdx[k * n_state + l.pg(g)] = d;
            }
        }
        let grad: Vec<f64> = (0..nu)
            .map(|j| dfdx.iter().enumerate().map(|(i, d)| d * dx[(i, j)]).sum::<f64>() / self.cost_scale)
            .collect();

        // Gauss-Newton curvature: exact in the coefficients, flow curvature dropped
        let mut hf = DMatrix::zeros(nu, nu);
        for (g, c) in self.costs.iter().enumerate() {
            for (k, gk) in gamma.iter().enumerate() {
                let r = dx.row(k * n_state + l.pg(g));
                hf.ger(2.0 * c.c2 * gk / self.cost_scale, &r.transpose(), &r.transpose(), 1.0);
            }
        }

        let m = self.m();
        let nm = gamma.len();
        let mut c = vec![0.0; m];
        let mut jac = DMatrix::zeros(m, nu);
        let mut hc = Vec::with_capacity(m);
        let mut unit = vec![0.0; nm];
        for (i, cc) in self.constraints.iter().enumerate() {
            let coeffs = self.sys.quantity(&sol, cc.quantity);
            let (v, w, _) = constraint_value(cc, &coeffs, gamma, self.lambda);
            c[i] = v;
            // dq_k/du, one row per mode
            let mut gq = DMatrix::zeros(nm, nu);
            for k in 0..nm {
                unit[k] = 1.0;
                for (idx, d) in self.sys.quantity_grad(&sol, cc.quantity, &unit) {
                    let r = dx.row(idx);
                    let mut row = gq.row_mut(k);
                    row += r * d;
                }
                unit[k] = 0.0;
            }
            for k in 0..nm {
                let r = gq.row(k) * w[k];
                let mut row = jac.row_mut(i);
                row += r;
            }
            let hq = std_curvature(&coeffs, gamma, self.lambda / cc.scale);
            hc.push((i, gq.transpose() * hq * gq));
        }
        self.cache = Some(Linearization { u: u.to_vec(), x: sol.coeffs.clone(), lu, dx: dx.clone() });
        self.last = Some(sol);
        Ok(Eval { f: f / self.cost_scale, grad, c, jac, curvature: Some(Curvature { f: hf, c: hc }) })
    }
}

impl SopfProblem {
    pub fn new(model: &NetworkModel, basis: &PceBasis, options: SopfOptions) -> Result<SopfProblem, SopfError> {
        chance_margin(options.epsilon, options.margin_rule)?;
        if basis.n_dims != model.wind_farms.len() {
            return Err(PceError::DimensionMismatch { expected: model.wind_farms.len(), got: basis.n_dims }.into());
        }
        Ok(SopfProblem { model: model.clone(), basis: basis.clone(), options })
    }

    /// Mean wind injections, p.u.
    pub fn mean_wind(&self) -> Vec<f64> {
        self.model.wind_farms.iter().zip(&self.basis.specs).map(|(w, s)| w.p_max * s.mean()).collect()
    }
}

/// Solves the chance-constrained problem.
///
/// A deterministic OPF at the mean injections runs first; its infeasibility
/// is reported as such, and its dispatch seeds the stochastic solve.
pub fn solve_sopf(problem: &SopfProblem) -> Result<SopfSolution, SopfError> {
    let model = &problem.model;
    let opts = &problem.options;
    let lambda = chance_margin(opts.epsilon, opts.margin_rule)?;
    let det = solve_opf(model, &problem.mean_wind(), &OpfOptions { fix_v_slack: None, ipm: opts.ipm, pf: INNER_PF })?;

    let sys = GalerkinSystem::new(model, &problem.basis)?;
    let nm = sys.n_modes();
    let controls = Controls::new(model, &problem.basis.gamma, true);
    let constraints = build_constraints(model);

    let det_controls = Controls::new(model, &[1.0], true);
    let mut u0 = vec![0.0; controls.len()];
    for i in 0..controls.gens.len() + controls.convs.len() {
        u0[i * nm] = det.u[i];
    }
    u0[controls.len() - 1] = det.u[det_controls.len() - 1];

    let mut nlp = StochasticNlp {
        sys: &sys,
        controls: &controls,
        base: controls.base_setpoints(model),
        constraints: &constraints,
        costs: model.generators.iter().map(|g| g.cost).collect(),
        lambda,
        cost_scale: 1.0,
        pf: opts.pf,
        cache: None,
        last: None,
    };
    let f0 = match nlp.eval(&u0) {
        Ok(ev) => ev.f,
        Err(e) => {
            // no expansion exists with all fluctuation on the slack; reach
            // the full spread through solves with a narrower one
            u0 = narrowed_start(&mut nlp, u0, &opts.ipm).ok_or(SopfError::Evaluation(e))?;
            nlp.cache = None;
            nlp.eval(&u0).map_err(SopfError::Evaluation)?.f
        }
    };
    nlp.cost_scale = f0.abs().max(1e-8);
    let res = ipm::solve(&mut nlp, &u0, &opts.ipm).map_err(SopfError::Evaluation)?;
    finish(&mut nlp, res, lambda, &opts.ipm)
}

fn narrowed_start(nlp: &mut StochasticNlp<'_>, mut u: Vec<f64>, ipm_opts: &IpmOptions) -> Option<Vec<f64>> {
    for t in [0.5, 0.75, 0.9] {
        let sys = nlp.sys.with_spread(t);
        let mut inner = StochasticNlp { sys: &sys, cache: None, last: None, constraints: nlp.constraints, base: nlp.base.clone(), costs: nlp.costs.clone(), ..*nlp };
        let f0 = inner.eval(&u).ok()?.f;
        inner.cost_scale = f0.abs().max(1e-8);
        u = ipm::solve(&mut inner, &u, ipm_opts).ok()?.u;
    }
    Some(u)
}

fn finish(nlp: &mut StochasticNlp<'_>, res: ipm::IpmResult, lambda: f64, ipm_opts: &IpmOptions) -> Result<SopfSolution, SopfError> {
    let violation = res.max_violation();
    if res.status != IpmStatus::Optimal && violation > 1e-6 {
        return Err(diagnose(nlp, &res.u, ipm_opts));
    }
    nlp.eval(&res.u).map_err(SopfError::Evaluation)?;
    let sol = nlp.last.clone().expect("evaluated");
    let sys = nlp.sys;
    let l = sys.pf.layout;
    let gamma = &sys.basis.gamma;
    let chance_audit = nlp
        .constraints
        .iter()
        .map(|cc| constraint_value(cc, &sys.quantity(&sol, cc.quantity), gamma, lambda).2)
        .collect();
    let gen_p = nlp.gen_coeffs(&sol);
    let objective = expected_cost(&nlp.costs, &gen_p, gamma);
    let dispatch = Dispatch {
        gen_p,
        conv_p: (0..l.n_conv).map(|c| sys.quantity(&sol, Quantity::ConverterP(c))).collect(),
        v_dc_slack: *res.u.last().unwrap(),
        v_ref: (0..l.n_conv).map(|c| sol.var(l.vdc(sys.pf.converter_buses(c).1))[0]).collect(),
    };
    let out = SopfSolution {
        dispatch,
        states: sol,
        objective,
        kkt_residual: res.kkt,
        iterations: res.iterations,
        status: res.status,
        chance_audit,
        lambda,
        u: res.u,
    };
    if out.status == IpmStatus::Optimal {
        Ok(out)
    } else {
        Err(SopfError::Stalled { best: Box::new(out) })
    }
}

/// Minimizes the largest constraint violation and names its argmax.
fn diagnose(nlp: &mut dyn NamedNlp, u: &[f64], ipm_opts: &IpmOptions) -> SopfError {
    let labels = nlp.labels();
    let (max_c, arg) = match nlp.eval(u) {
        Ok(ev) => worst(&ev.c),
        Err(e) => return SopfError::Evaluation(e),
    };
    let mut v0 = u.to_vec();
    v0.push(max_c.max(0.0) + 1e-3);
    let mut p1 = Phase1 { inner: nlp.as_nlp() };
    let (violation, arg) = match ipm::solve(&mut p1, &v0, ipm_opts) {
        Ok(r) => {
            // phase-1 rows are c - t
            let t = r.u[r.u.len() - 1];
            let (m, a) = worst(&r.c[..r.c.len() - 1]);
            (m + t, a)
        }
        Err(_) => (max_c, arg),
    };
    let (label, scale) = &labels[arg];
    if violation <= 1e-6 {
        // phase 1 found a feasible point; the original solve just stalled
        return SopfError::Infeasible { constraint: format!("{label} (solver stalled near a feasible point)"), violation: violation * scale };
    }
    SopfError::Infeasible { constraint: label.clone(), violation: violation * scale }
}

fn worst(c: &[f64]) -> (f64, usize) {
    c.iter().enumerate().fold((f64::NEG_INFINITY, 0), |(m, a), (i, &v)| if v > m { (v, i) } else { (m, a) })
}

trait NamedNlp: Nlp {
    /// Label and scale of every constraint row.
    fn labels(&self) -> Vec<(String, f64)>;
    fn as_nlp(&mut self) -> &mut dyn Nlp;
}

impl NamedNlp for StochasticNlp<'_> {
    fn labels(&self) -> Vec<(String, f64)> {
        self.constraints.iter().map(|c| (c.label.clone(), c.scale)).collect()
    }
    fn as_nlp(&mut self) -> &mut dyn Nlp {
        self
    }
}

// ---------------------------------------------------------------------------
// deterministic OPF

#[derive(Debug, Clone)]
pub struct OpfOptions {
    /// Holds the DC-slack voltage at this value instead of optimizing it.
    pub fix_v_slack: Option<f64>,
    pub ipm: IpmOptions,
    pub pf: PfOptions,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions { fix_v_slack: None, ipm: IpmOptions::default(), pf: INNER_PF }
    }
}

#[derive(Debug, Clone)]
pub struct OpfSolution {
    /// Decision vector: non-slack generator powers, dispatchable converter
    /// powers, then the DC-slack voltage when it is free.
    pub u: Vec<f64>,
    pub state: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub conv_p: Vec<f64>,
    pub v_dc: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: IpmStatus,
}

struct DetNlp<'a> {
    pf: &'a PfSystem,
    controls: &'a Controls,
    base: Setpoints,
    wind: Vec<f64>,
    constraints: &'a [ChanceConstraint],
    costs: Vec<GenCost>,
    cost_scale: f64,
    opts: PfOptions,
    x: Option<Vec<f64>>,
}

impl DetNlp<'_> {
    fn setpoints(&self, u: &[f64]) -> Setpoints {
        let mut sp = self.base.clone();
        for (i, &g) in self.controls.gens.iter().enumerate() {
            sp.gen_p[g] = u[i];
        }
        let off = self.controls.gens.len();
        for (i, &c) in self.controls.convs.iter().enumerate() {
            sp.conv_p[c] = u[off + i];
        }
        if self.controls.free_v {
            sp.conv_v_dc[self.controls.slack_conv] = u[self.controls.len() - 1];
        }
        sp
    }
}

/// Value of `q` at a deterministic state and its gradient as `(index, derivative)` pairs.
pub fn quantity_value(pf: &PfSystem, x: &[f64], q: Quantity) -> (f64, Vec<(usize, f64)>) {
    let l = &pf.layout;
    match q {
        Quantity::State(v) => (x[v], vec![(v, 1.0)]),
        Quantity::ConverterP(c) => {
            let (ac, _) = pf.converter_buses(c);
            let (p, _) = pf.converter_pq(x, c);
            let d = vec![(l.e(ac), x[l.ire(c)]), (l.f(ac), x[l.iim(c)]), (l.ire(c), x[l.e(ac)]), (l.iim(c), x[l.f(ac)])];
            (p, d)
        }
        Quantity::ConverterQ(c) => {
            let (ac, _) = pf.converter_buses(c);
            let (_, qv) = pf.converter_pq(x, c);
            let d = vec![(l.e(ac), -x[l.iim(c)]), (l.f(ac), x[l.ire(c)]), (l.ire(c), x[l.f(ac)]), (l.iim(c), -x[l.e(ac)])];
            (qv, d)
        }
        Quantity::BranchCurrentSq(k) => {
            let br = pf.branches[k];
            let (ir, ii) = pf.branch_current(x, k);
            let dde = 2.0 * (ir * br.g + ii * br.b);
            let ddf = 2.0 * (-ir * br.b + ii * br.g);
            (ir * ir + ii * ii, vec![(l.e(br.from), dde), (l.e(br.to), -dde), (l.f(br.from), ddf), (l.f(br.to), -ddf)])
        }
        Quantity::DcBranchCurrent(k) => {
            let br = pf.dc_branches[k];
            (pf.dc_branch_current(x, k), vec![(l.vdc(br.from), 1.0 / br.r), (l.vdc(br.to), -1.0 / br.r)])
        }
    }
}

impl Nlp for DetNlp<'_> {
    fn n(&self) -> usize {
        self.controls.len()
    }
    fn m(&self) -> usize {
        self.constraints.len()
    }
    fn eval(&mut self, u: &[f64]) -> Result<Eval, String> {
        let sp = self.setpoints(u);
        let sol = self
            .pf
            .solve(&self.wind, &sp, self.x.as_deref(), &self.opts)
            .or_else(|_| self.pf.solve(&self.wind, &sp, None, &self.opts))
            .map_err(|e| e.to_string())?;
        let x = sol.state.x;
        let l = self.pf.layout;
        let n = l.len();
        let mut jac = DMatrix::zeros(n, n);
        self.pf.jacobian(&x, &sp, &mut jac);
        let lu = jac.lu();
        if !lu_is_regular(&lu) {
            return Err("singular power-flow Jacobian".into());
        }
        let nu = self.n();
        let mut dx = DMatrix::zeros(n, nu);
        for (_, row, col, a) in self.controls.selection(&l) {
            dx[(row, col)] = a;
        }
        if !lu.solve_mut(&mut dx) {
            return Err("singular power-flow Jacobian".into());
        }
        let mut f = 0.0;
        let mut grad = vec![0.0; nu];
        for (g, c) in self.costs.iter().enumerate() {
            let p = x[l.pg(g)];
            f += c.eval(p);
            let d = 2.0 * c.c2 * p + c.c1;
            for (j, gj) in grad.iter_mut().enumerate() {
                *gj += d * dx[(l.pg(g), j)];
            }
        }
        grad.iter_mut().for_each(|g| *g /= self.cost_scale);
        let mut hf = DMatrix::zeros(nu, nu);
        for (g, c) in self.costs.iter().enumerate() {
            let r = dx.row(l.pg(g)).transpose();
            hf.ger(2.0 * c.c2 / self.cost_scale, &r, &r, 1.0);
        }
        let m = self.m();
        let mut c = vec![0.0; m];
        let mut cj = DMatrix::zeros(m, nu);
        for (i, cc) in self.constraints.iter().enumerate() {
            let (v, d) = quantity_value(self.pf, &x, cc.quantity);
            let sign = match cc.side {
                Side::Upper => 1.0,
                Side::Lower => -1.0,
            };
            c[i] = sign * (v - cc.limit) / cc.scale;
            for (idx, dv) in d {
                for j in 0..nu {
                    cj[(i, j)] += sign * dv * dx[(idx, j)] / cc.scale;
                }
            }
        }
        self.x = Some(x);
        Ok(Eval { f: f / self.cost_scale, grad, c, jac: cj, curvature: Some(Curvature { f: hf, c: Vec::new() }) })
    }
}

impl NamedNlp for DetNlp<'_> {
    fn labels(&self) -> Vec<(String, f64)> {
        self.constraints.iter().map(|c| (c.label.clone(), c.scale)).collect()
    }
    fn as_nlp(&mut self) -> &mut dyn Nlp {
        self
    }
}

/// Deterministic OPF at the given wind injections (p.u.).
pub fn solve_opf(model: &NetworkModel, wind: &[f64], opts: &OpfOptions) -> Result<OpfSolution, SopfError> {
    let pf = PfSystem::new(model);
    pf.check_wind(wind)?;
    let controls = Controls::new(model, &[1.0], opts.fix_v_slack.is_none());
    let constraints = build_constraints(model);
    let mut base = controls.base_setpoints(model);
    if let Some(v) = opts.fix_v_slack {
        base.conv_v_dc[controls.slack_conv] = v;
    }
    let mut u0: Vec<f64> = controls.gens.iter().map(|&g| model.generators[g].p_set).collect();
    // start converters at their present operating point
    let start = pf.solve(wind, &Setpoints::from_model(model), None, &opts.pf)?;
    for &c in &controls.convs {
        u0.push(pf.converter_pq(&start.state.x, c).0);
    }
    if controls.free_v {
        u0.push(base.conv_v_dc[controls.slack_conv]);
    }
    let mut nlp = DetNlp {
        pf: &pf,
        controls: &controls,
        base,
        wind: wind.to_vec(),
        constraints: &constraints,
        costs: model.generators.iter().map(|g| g.cost).collect(),
        cost_scale: 1.0,
        opts: opts.pf,
        x: Some(start.state.x),
    };
    let f0 = nlp.eval(&u0).map_err(SopfError::Evaluation)?.f;
    nlp.cost_scale = f0.abs().max(1e-8);
    let res = ipm::solve(&mut nlp, &u0, &opts.ipm).map_err(SopfError::Evaluation)?;
    if res.status != IpmStatus::Optimal && res.max_violation() > 1e-6 {
        return Err(diagnose(&mut nlp, &res.u, &opts.ipm));
    }
    nlp.eval(&res.u).map_err(SopfError::Evaluation)?;
    let x = nlp.x.clone().expect("evaluated");
    let l = pf.layout;
    let out = OpfSolution {
        gen_p: (0..l.n_gen).map(|g| x[l.pg(g)]).collect(),
        conv_p: (0..l.n_conv).map(|c| pf.converter_pq(&x, c).0).collect(),
        v_dc: (0..l.n_dc).map(|n| x[l.vdc(n)]).collect(),
        objective: model.generators.iter().enumerate().map(|(g, gen)| gen.cost.eval(x[l.pg(g)])).sum(),
        state: x,
        kkt_residual: res.kkt,
        iterations: res.iterations,
        status: res.status,
        u: res.u,
    };
    if out.status != IpmStatus::Optimal {
        log::warn!("deterministic OPF ended with {:?}, KKT {:.2e}", out.status, out.kkt_residual);
    }
    Ok(out)
}

/// Empirical violation rate of one constraint under the polynomial policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McViolation {
    pub label: String,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McAudit {
    pub n_samples: usize,
    /// Samples whose power flow failed; they count as violating every constraint.
    pub pf_failures: usize,
    pub constraints: Vec<McViolation>,
}

/// Samples the wind, applies the polynomial dispatch at each draw, solves the
/// deterministic power flow and counts limit violations.
pub fn monte_carlo_audit(
    model: &NetworkModel,
    basis: &PceBasis,
    sol: &SopfSolution,
    n_samples: usize,
    seed: u64,
) -> Result<McAudit, SopfError> {
    let pf = PfSystem::new(model);
    let controls = Controls::new(model, &basis.gamma, true);
    let ssp = controls.apply(&controls.base_setpoints(model), &sol.u);
    let constraints = build_constraints(model);
    let draws: Vec<Vec<f64>> = basis
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| crate::wind::sample_with(s, n_samples, &mut crate::wind::stream_rng(seed, i as u64)))
        .collect();
    let x0 = sol.states.mean_state().to_vec();
    let mut sp = ssp.base.clone();
    let mut counts = vec![0usize; constraints.len()];
    let mut failures = 0;
    for s in 0..n_samples {
        let xi: Vec<f64> = draws.iter().map(|d| d[s]).collect();
        ssp.at_node(&basis.eval(&xi), &mut sp);
        let wind: Vec<f64> = model.wind_farms.iter().zip(&xi).map(|(w, x)| w.p_max * x).collect();
        let res = pf.solve(&wind, &sp, Some(&x0), &PfOptions::default()).or_else(|_| pf.solve(&wind, &sp, None, &PfOptions::default()));
        let Ok(res) = res else {
            failures += 1;
            counts.iter_mut().for_each(|c| *c += 1);
            continue;
        };
        for (i, cc) in constraints.iter().enumerate() {
            let v = quantity_value(&pf, &res.state.x, cc.quantity).0;
            let bad = match cc.side {
                Side::Upper => v > cc.limit,
                Side::Lower => v < cc.limit,
            };
            counts[i] += usize::from(bad);
        }
    }
    Ok(McAudit {
        n_samples,
        pf_failures: failures,
        constraints: constraints
            .iter()
            .zip(&counts)
            .map(|(cc, &n)| McViolation { label: cc.label.clone(), violation_rate: n as f64 / n_samples.max(1) as f64 })
            .collect(),
    })
}

pub fn write_mc_audit_csv(audit: &McAudit, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "constraint,violation_rate,n_samples,pf_failures")?;
    for c in &audit.constraints {
        writeln!(f, "{},{},{},{}", c.label, c.violation_rate, audit.n_samples, audit.pf_failures)?;
    }
    f.flush()
}

/// Dispatch and chance audit as CSV.
pub fn write_solution_csv(model: &NetworkModel, sol: &SopfSolution, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "section,name,k,value")?;
    for (g, gen) in model.generators.iter().enumerate() {
        for (k, c) in sol.dispatch.gen_p[g].iter().enumerate() {
            writeln!(f, "generator_p,{},{k},{c}", gen.id)?;
        }
    }
    for (c, conv) in model.converters.iter().enumerate() {
        for (k, v) in sol.dispatch.conv_p[c].iter().enumerate() {
            writeln!(f, "converter_p,{},{k},{v}", conv.id)?;
        }
        writeln!(f, "converter_v_ref,{},0,{}", conv.id, sol.dispatch.v_ref[c])?;
    }
    writeln!(f, "dc_slack_voltage,,0,{}", sol.dispatch.v_dc_slack)?;
    writeln!(f, "objective,expected_cost,0,{}", sol.objective)?;
    writeln!(f)?;
    writeln!(f, "constraint,mean,std,margin,limit,slack")?;
    for a in &sol.chance_audit {
        writeln!(f, "{},{},{},{},{},{}", a.label, a.mean, a.std, a.margin, a.limit, a.slack)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margins() {
        let c = chance_margin(0.05, MarginRule::ChebyshevOneSided).unwrap();
        assert!((c - 19f64.sqrt()).abs() < 1e-12);
        assert!((c - 4.3589).abs() < 1e-4);
        let g = chance_margin(0.05, MarginRule::GaussianApprox).unwrap();
        assert!((g - 1.6449).abs() < 1e-4);
        let g = chance_margin(0.4999999, MarginRule::GaussianApprox).unwrap();
        assert!(g.abs() < 1e-5);
        assert!(chance_margin(0.6, MarginRule::ChebyshevOneSided).is_err());
        assert!(chance_margin(0.0, MarginRule::GaussianApprox).is_err());
    }

    #[test]
    fn expected_cost_examples() {
        let sq = GenCost { c2: 1.0, c1: 0.0, c0: 0.0 };
        assert_eq!(expected_cost(&[sq], &[vec![1.0]], &[1.0]), 1.0);
        let e = expected_cost(&[sq], &[vec![1.0, 0.1, 0.05]], &[1.0, 1.0, 1.0]);
        assert!((e - 1.0125).abs() < 1e-15);
        let zero = GenCost::default();
        assert_eq!(expected_cost(&[zero, zero], &[vec![3.0], vec![2.0]], &[1.0]), 0.0);
    }
}

#[cfg(test)]
mod fd_tests {
    use super::*;
    use crate::grid::builtin_testcase;

    #[test]
    fn deterministic_gradients_match_finite_differences() {
        let model = builtin_testcase();
        let pf = PfSystem::new(&model);
        let wind: Vec<f64> = model.wind_farms.iter().map(|w| 0.5 * w.p_max).collect();
        let controls = Controls::new(&model, &[1.0], true);
        let constraints = build_constraints(&model);
        let mut nlp = DetNlp {
            pf: &pf,
            controls: &controls,
            base: controls.base_setpoints(&model),
            wind,
            constraints: &constraints,
            costs: model.generators.iter().map(|g| g.cost).collect(),
            cost_scale: 1.0,
            opts: PfOptions { tol: 1e-12, ..PfOptions::default() },
            x: None,
        };
        let mut u: Vec<f64> = controls.gens.iter().map(|&g| model.generators[g].p_set).collect();
        u.extend([-0.5, 1.0]);
        let ev = nlp.eval(&u).unwrap();
        let h = 1e-6;
        for j in 0..u.len() {
            let mut up = u.clone();
            up[j] += h;
            let mut dn = u.clone();
            dn[j] -= h;
            let (a, b) = (nlp.eval(&up).unwrap(), nlp.eval(&dn).unwrap());
            let fd = (a.f - b.f) / (2.0 * h);
            assert!((fd - ev.grad[j]).abs() < 1e-4 * (1.0 + fd.abs()), "grad {j}: {fd} vs {}", ev.grad[j]);
            for i in 0..ev.c.len() {
                let fd = (a.c[i] - b.c[i]) / (2.0 * h);
                assert!(
                    (fd - ev.jac[(i, j)]).abs() < 1e-4 * (1.0 + fd.abs()),
                    "{} / {j}: {fd} vs {}",
                    constraints[i].label,
                    ev.jac[(i, j)]
                );
            }
        }
    }
}

#[cfg(test)]
mod fd_stochastic {
    use super::*;
    use crate::grid::builtin_testcase;
    use crate::wind::{self, Zone};

    #[test]
    fn stochastic_gradients_match_finite_differences() {
        let model = builtin_testcase();
        let stats = wind::reference_zone_stats()[Zone::Mid.index()];
        let specs = vec![wind::beta_spec(0.5, &stats).unwrap(); 2];
        let basis = PceBasis::new(&specs, 2);
        let sys = GalerkinSystem::new(&model, &basis).unwrap();
        let controls = Controls::new(&model, &basis.gamma, true);
        let constraints = build_constraints(&model);
        let mut nlp = StochasticNlp {
            sys: &sys,
            controls: &controls,
            base: controls.base_setpoints(&model),
            constraints: &constraints,
            costs: model.generators.iter().map(|g| g.cost).collect(),
            lambda: 4.0,
            cost_scale: 1.0,
            pf: PfOptions { tol: 1e-11, ..INNER_GALERKIN },
            cache: None,
            last: None,
        };
        let nm = sys.n_modes();
        let mut u = vec![0.0; controls.len()];
        for (i, &g) in controls.gens.iter().enumerate() {
            u[i * nm] = model.generators[g].p_set;
            u[i * nm + 1] = -0.01;
            u[i * nm + 2] = -0.012;
        }
        let off = controls.gens.len() * nm;
        for i in 0..controls.convs.len() {
            u[off + i * nm] = -0.5;
            u[off + i * nm + 1] = 0.01;
        }
        *u.last_mut().unwrap() = 1.0;
        let ev = nlp.eval(&u).unwrap();
        let h = 1e-6;
        for j in 0..u.len() {
            let mut up = u.clone();
            up[j] += h;
            let mut dn = u.clone();
            dn[j] -= h;
            nlp.cache = None;
            let a = nlp.eval(&up).unwrap();
            nlp.cache = None;
            let b = nlp.eval(&dn).unwrap();
            let fd = (a.f - b.f) / (2.0 * h);
            assert!((fd - ev.grad[j]).abs() < 1e-4 * (1.0 + fd.abs()), "grad {j}: {fd} vs {}", ev.grad[j]);
            for i in 0..ev.c.len() {
                let fd = (a.c[i] - b.c[i]) / (2.0 * h);
                assert!(
                    (fd - ev.jac[(i, j)]).abs() < 1e-4 * (1.0 + fd.abs()),
                    "{} / {j}: {fd} vs {}",
                    constraints[i].label,
                    ev.jac[(i, j)]
                );
            }
        }
    }
}

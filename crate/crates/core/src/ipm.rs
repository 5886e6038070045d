//! Primal-dual interior-point method for `min f(u) s.t. c(u) <= 0`.
//!
//! Inequalities get slacks, `c(u) + s = 0` with `s > 0`. The Lagrangian
//! Hessian is the problem's own curvature model when it supplies one, plus a
//! damped BFGS approximation of whatever that model leaves out. The Newton
//! system is reduced to the primal block
//! `(H + A' S^-1 Z A) du = -grad f - A' (mu / s + S^-1 Z (c + s))`.
//! Steps are globalized by backtracking on the exact-penalty barrier merit
//! `f - mu sum ln s + nu |c + s|_1`.

use nalgebra::{DMatrix, DVector};

/// One evaluation of the problem functions and their first derivatives.
#[derive(Debug, Clone)]
pub struct Eval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    /// Constraint Jacobian, `m x n`.
    pub jac: DMatrix<f64>,
    pub curvature: Option<Curvature>,
}

/// Partial second-order model: `f + sum z_i c_i` over the listed constraints
/// approximates the Lagrangian Hessian.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub f: DMatrix<f64>,
    pub c: Vec<(usize, DMatrix<f64>)>,
}

impl Curvature {
    fn lagrangian(&self, z: &[f64]) -> DMatrix<f64> {
        let mut h = self.f.clone();
        for (i, hc) in &self.c {
            h += hc * z[*i];
        }
        h
    }
}

pub trait Nlp {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    /// `Err` marks a point where the model cannot be evaluated; the line
    /// search backs off from it.
    fn eval(&mut self, u: &[f64]) -> Result<Eval, String>;
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mu0: f64,
    pub tau: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions { tol: 1e-6, max_iter: 200, mu0: 0.1, tau: 0.995 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Optimal,
    MaxIterations,
    /// The line search could not make progress.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub status: IpmStatus,
    pub u: Vec<f64>,
    /// Inequality multipliers.
    pub z: Vec<f64>,
    pub f: f64,
    pub c: Vec<f64>,
    /// Scaled KKT error at the returned point.
    pub kkt: f64,
    pub iterations: usize,
}

impl IpmResult {
    pub fn max_violation(&self) -> f64 {
        self.c.iter().fold(0.0f64, |m, &c| m.max(c))
    }
}

struct Kkt {
    stat: f64,
    feas: f64,
    comp: f64,
}

fn kkt_error(ev: &Eval, s: &[f64], z: &[f64], mu: f64) -> Kkt {
    let n = ev.grad.len();
    let m = s.len();
    let mut stat = 0.0f64;
    for j in 0..n {
        let mut r = ev.grad[j];
        for i in 0..m {
            r += ev.jac[(i, j)] * z[i];
        }
        stat = stat.max(r.abs());
    }
    // scale as in common IPM codes so large multipliers do not dominate
    let zsum: f64 = z.iter().map(|v| v.abs()).sum();
    let sd = ((zsum / m.max(1) as f64) / 100.0).max(1.0);
    let feas = (0..m).fold(0.0f64, |a, i| a.max((ev.c[i] + s[i]).abs()));
    let comp = (0..m).fold(0.0f64, |a, i| a.max((s[i] * z[i] - mu).abs())) / sd;
    Kkt { stat: stat / sd, feas, comp }
}

fn lagrangian_grad(ev: &Eval, z: &[f64]) -> DVector<f64> {
    let mut g = DVector::from_column_slice(&ev.grad);
    g += ev.jac.tr_mul(&DVector::from_column_slice(z));
    g
}

/// Solves the problem from `u0`.
pub fn solve(nlp: &mut dyn Nlp, u0: &[f64], opts: &IpmOptions) -> Result<IpmResult, String> {
    let n = nlp.n();
    let m = nlp.m();
    let mut u = u0.to_vec();
    let mut ev = nlp.eval(&u)?;
    let mut mu = opts.mu0;
    let mut s: Vec<f64> = ev.c.iter().map(|&c| (-c).max(1e-2)).collect();
    let mut z: Vec<f64> = s.iter().map(|&s| (mu / s).min(1e3)).collect();
    // with a curvature model, BFGS only learns the remainder
    let structured = ev.curvature.is_some();
    let h0 = || DMatrix::<f64>::identity(n, n) * if structured { 1e-8 } else { 1.0 };
    let mut h = h0();
    let mut first_update = !structured;
    let mut nu = 1.0f64;

    let mut iterations = 0;
    let mut status = IpmStatus::MaxIterations;
    let mut stalls = 0;
    while iterations < opts.max_iter {
        let e0 = kkt_error(&ev, &s, &z, 0.0);
        if e0.stat.max(e0.feas).max(e0.comp) <= opts.tol {
            status = IpmStatus::Optimal;
            break;
        }
        let emu = kkt_error(&ev, &s, &z, mu);
        if emu.stat.max(emu.feas).max(emu.comp) <= 10.0 * mu {
            mu = (opts.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
            continue;
        }
        iterations += 1;

        // reduced Newton system
        let a = &ev.jac;
        let sigma: Vec<f64> = (0..m).map(|i| z[i] / s[i]).collect();
        let mut k = match &ev.curvature {
            Some(cv) => &h + cv.lagrangian(&z),
            None => h.clone(),
        };
        for i in 0..m {
            let row = a.row(i);
            for p in 0..n {
                let ap = row[p] * sigma[i];
                if ap == 0.0 {
                    continue;
                }
                for q in 0..n {
                    k[(p, q)] += ap * row[q];
                }
            }
        }
        let w: DVector<f64> = DVector::from_iterator(m, (0..m).map(|i| mu / s[i] + sigma[i] * (ev.c[i] + s[i])));
        let rhs = -(DVector::from_column_slice(&ev.grad) + a.tr_mul(&w));
        let du = match solve_spd(&k, &rhs) {
            Some(d) => d,
            None => {
                h = h0();
                first_update = !structured;
                continue;
            }
        };
        let adu = a * &du;
        let ds: Vec<f64> = (0..m).map(|i| -(ev.c[i] + s[i]) - adu[i]).collect();
        let dz: Vec<f64> = (0..m).map(|i| mu / s[i] - z[i] - sigma[i] * ds[i]).collect();

        let mut alpha_p = 1.0f64;
        let mut alpha_d = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-opts.tau * s[i] / ds[i]);
            }
            if dz[i] < 0.0 {
                alpha_d = alpha_d.min(-opts.tau * z[i] / dz[i]);
            }
        }

        // penalty parameter large enough for a descent direction
        let zmax = z.iter().zip(&dz).fold(0.0f64, |a, (z, d)| a.max(z.abs()).max((z + d).abs()));
        if nu < 1.1 * zmax {
            nu = 2.0 * zmax;
        }
        let merit = |f: f64, c: &[f64], s: &[f64]| -> f64 {
            let mut v = f;
            for i in 0..m {
                v -= mu * s[i].ln();
                v += nu * (c[i] + s[i]).abs();
            }
            v
        };
        let phi0 = merit(ev.f, &ev.c, &s);
        let infeas: f64 = (0..m).map(|i| (ev.c[i] + s[i]).abs()).sum();
        let dphi = ev.grad.iter().zip(du.iter()).map(|(g, d)| g * d).sum::<f64>()
            - (0..m).map(|i| mu * ds[i] / s[i]).sum::<f64>()
            - nu * infeas;

        let mut accepted = None;
        let mut alpha = alpha_p;
        for _ in 0..30 {
            let ut: Vec<f64> = u.iter().zip(du.iter()).map(|(u, d)| u + alpha * d).collect();
            let st: Vec<f64> = s.iter().zip(&ds).map(|(s, d)| s + alpha * d).collect();
            if let Ok(et) = nlp.eval(&ut) {
                let st = reset_slacks(&et.c, st);
                let phi = merit(et.f, &et.c, &st);
                if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * dphi.min(0.0) {
                    accepted = Some((ut, st, et));
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                break;
            }
        }
        let Some((ut, st, et)) = accepted else {
            stalls += 1;
            if stalls > 3 {
                status = IpmStatus::Stalled;
                break;
            }
            h = h0();
            first_update = !structured;
            continue;
        };
        stalls = 0;
        let zt: Vec<f64> = z.iter().zip(&dz).map(|(z, d)| z + alpha_d * d).collect();


        // damped BFGS on the Lagrangian
        let sv = DVector::from_iterator(n, ut.iter().zip(&u).map(|(a, b)| a - b));
        let mut yv = lagrangian_grad(&et, &zt) - lagrangian_grad(&ev, &zt);
        if let Some(cv) = &et.curvature {
            yv -= cv.lagrangian(&zt) * &sv;
        }
        let ss = sv.dot(&sv);
        if ss > 1e-20 {
            let mut y = yv.clone();
            let sy = sv.dot(&y);
            if first_update && sy > 0.0 {
                let scale = y.dot(&y) / sy;
                h = DMatrix::identity(n, n) * scale.clamp(1e-6, 1e6);
                first_update = false;
            }
            let hs = &h * &sv;
            let shs = sv.dot(&hs);
            if shs > 0.0 {
                if sy < 0.2 * shs {
                    let theta = 0.8 * shs / (shs - sy);
                    y = y * theta + &hs * (1.0 - theta);
                }
                let sy = sv.dot(&y);
                if sy > 0.0 {
                    h += &y * y.transpose() / sy - &hs * hs.transpose() / shs;
                }
            }
        }

        // keep multipliers within a band around mu / s
        let kappa = 1e10;
        z = zt
            .iter()
            .zip(&st)
            .map(|(&z, &s)| z.clamp(mu / (kappa * s), kappa * mu / s))
            .collect();
        u = ut;
        s = st;
        ev = et;
    }

    let e = kkt_error(&ev, &s, &z, 0.0);
    Ok(IpmResult {
        status,
        kkt: e.stat.max(e.feas).max(e.comp),
        f: ev.f,
        c: ev.c,
        u,
        z,
        iterations,
    })
}

/// Strictly feasible rows take the exact slack `-c`, the others keep the stepped one.
fn reset_slacks(c: &[f64], mut s: Vec<f64>) -> Vec<f64> {
    for (s, &c) in s.iter_mut().zip(c) {
        *s = if c < 0.0 { -c } else { s.max(1e-14) };
    }
    s
}

/// Cholesky solve with a growing diagonal shift if the matrix is not positive definite.
fn solve_spd(k: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = k.nrows();
    let scale = (0..n).fold(0.0f64, |a, i| a.max(k[(i, i)].abs())).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..20 {
        let mut kk = k.clone();
        for i in 0..n {
            kk[(i, i)] += shift;
        }
        if let Some(ch) = kk.cholesky() {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
    }
    None
}

/// Phase-1 problem `min t s.t. c(u) <= t`, used to diagnose infeasibility.
pub struct Phase1<'a> {
    pub inner: &'a mut dyn Nlp,
}

impl Nlp for Phase1<'_> {
    fn n(&self) -> usize {
        self.inner.n() + 1
    }
    fn m(&self) -> usize {
        self.inner.m() + 1
    }
    fn eval(&mut self, v: &[f64]) -> Result<Eval, String> {
        let n = self.inner.n();
        let m = self.inner.m();
        let t = v[n];
        let ev = self.inner.eval(&v[..n])?;
        let mut grad = vec![0.0; n + 1];
        grad[n] = 1.0;
        let mut c: Vec<f64> = ev.c.iter().map(|c| c - t).collect();
        // bounded below so the problem stays well posed
        c.push(-t - 1.0);
        let mut jac = DMatrix::zeros(m + 1, n + 1);
        jac.view_mut((0, 0), (m, n)).copy_from(&ev.jac);
        for i in 0..m {
            jac[(i, n)] = -1.0;
        }
        jac[(m, n)] = -1.0;
        Ok(Eval { f: t, grad, c, jac, curvature: None })
    }
}

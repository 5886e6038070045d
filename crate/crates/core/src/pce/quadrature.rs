//! Gauss quadrature for Beta laws on `[0, 1]`.
//!
//! `Beta(alpha, beta)` is the Jacobi weight `(1-t)^(beta-1) (1+t)^(alpha-1)`
//! under `x = (1+t)/2`. The monic three-term recurrence of the Jacobi family
//! is mapped onto `[0, 1]` and the rule follows from Golub-Welsch.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::wind::BetaSpec;

/// Monic recurrence `q_{n+1}(x) = (x - a_n) q_n(x) - b_n q_{n-1}(x)` of the
/// polynomials orthogonal under `Beta(alpha, beta)`, for `n = 0..len`.
///
/// `b[0]` is the total mass (1 for a probability measure).
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrence {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Recurrence {
    pub fn beta(alpha: f64, beta: f64, len: usize) -> Recurrence {
        // Jacobi parameters on [-1, 1]
        let ja = beta - 1.0;
        let jb = alpha - 1.0;
        let s = ja + jb;
        let mut a = Vec::with_capacity(len);
        let mut b = Vec::with_capacity(len);
        for n in 0..len {
            let nf = n as f64;
            let an = if n == 0 {
                (jb - ja) / (s + 2.0)
            } else {
                (jb * jb - ja * ja) / ((2.0 * nf + s) * (2.0 * nf + s + 2.0))
            };
            let bn = match n {
                0 => 4.0, // mass 1 after the /4 scaling below
                1 => 4.0 * (1.0 + ja) * (1.0 + jb) / ((2.0 + s).powi(2) * (3.0 + s)),
                _ => {
                    let t = 2.0 * nf + s;
                    4.0 * nf * (nf + ja) * (nf + jb) * (nf + s) / (t * t * (t + 1.0) * (t - 1.0))
                }
            };
            a.push((1.0 + an) / 2.0);
            b.push(bn / 4.0);
        }
        Recurrence { a, b }
    }

    pub fn for_spec(spec: &BetaSpec, len: usize) -> Recurrence {
        Recurrence::beta(spec.alpha, spec.beta, len)
    }

    /// Values `q_0(x) ..= q_deg(x)`.
    pub fn eval(&self, deg: usize, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(deg + 1);
        out.push(1.0);
        if deg >= 1 {
            out.push(x - self.a[0]);
        }
        for n in 1..deg {
            let next = (x - self.a[n]) * out[n] - self.b[n] * out[n - 1];
            out.push(next);
        }
        out
    }

    /// `E[q_n^2]` from the recurrence, `b_1 b_2 ... b_n`.
    pub fn norm_sq(&self, n: usize) -> f64 {
        self.b[1..=n].iter().product()
    }
}

/// `n`-point Gauss rule for `Beta(alpha, beta)`: nodes ascending, weights summing to 1.
///
/// Exact for polynomials of degree up to `2n - 1`.
pub fn gauss_beta(alpha: f64, beta: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "a Gauss rule needs at least one node");
    let rec = Recurrence::beta(alpha, beta, n);
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jm[(i, i)] = rec.a[i];
        if i + 1 < n {
            let off = rec.b[i + 1].sqrt();
            jm[(i, i + 1)] = off;
            jm[(i + 1, i)] = off;
        }
    }
    let eig = SymmetricEigen::new(jm);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

pub fn gauss_jacobi(spec: &BetaSpec, n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_beta(spec.alpha, spec.beta, n)
}

use serde::Serialize;

use super::quadrature::{gauss_jacobi, Recurrence};
use super::PceError;
use crate::wind::BetaSpec;

/// Entries of the triple-product tensor below this are dropped.
pub const TRIPLE_DROP_TOL: f64 = 1e-14;

/// Total-degree multivariate basis of monic per-dimension orthogonal
/// polynomials under independent Beta germs on `[0, 1]`.
#[derive(Debug, Clone, Serialize)]
pub struct PceBasis {
    pub n_dims: usize,
    pub degree: usize,
    /// Exponent tuples, graded by total degree; within one degree the first
    /// dimension's exponent decreases: (0,0), (1,0), (0,1), (2,0), (1,1), (0,2).
    pub multi_indices: Vec<Vec<usize>>,
    /// `E[Phi_k^2]`, with `gamma[0] = 1`.
    pub gamma: Vec<f64>,
    pub specs: Vec<BetaSpec>,
    #[serde(skip)]
    pub recurrences: Vec<Recurrence>,
    /// Per-dimension Gauss rule.
    pub quadrature: Vec<(Vec<f64>, Vec<f64>)>,
    /// Sparse `(i, j, k, E[Phi_i Phi_j Phi_k])` with `i <= j <= k`.
    pub triple_products: Vec<(usize, usize, usize, f64)>,
    #[serde(skip)]
    triple_dense: Vec<f64>,
    #[serde(skip)]
    grid: TensorGrid,
}

/// Tensor-product quadrature grid with basis values cached at each node.
#[derive(Debug, Clone, Default)]
pub struct TensorGrid {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// `phi[q][k] = Phi_k(points[q])`.
    pub phi: Vec<Vec<f64>>,
}

/// Nodes per dimension: exact for every Galerkin integral of quadratic
/// residuals in degree-`d` expansions, i.e. integrands of degree `3d`.
pub fn nodes_per_dim(degree: usize) -> usize {
    (degree + 2).max((3 * degree + 2) / 2)
}

pub fn multi_indices(n_dims: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(dims: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dims == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            rec(dims - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n_dims == 0 {
        out.push(Vec::new());
        return out;
    }
    for t in 0..=degree {
        rec(n_dims, t, &mut Vec::new(), &mut out);
    }
    out
}

/// `(N + d)! / (N! d!)`.
pub fn basis_size(n_dims: usize, degree: usize) -> usize {
    let mut r: usize = 1;
    for i in 1..=n_dims {
        r = r * (degree + i) / i;
    }
    r
}

impl PceBasis {
    pub fn new(specs: &[BetaSpec], degree: usize) -> PceBasis {
        let n_dims = specs.len();
        let mi = multi_indices(n_dims, degree);
        let nq = nodes_per_dim(degree);
        let recurrences: Vec<Recurrence> = specs.iter().map(|s| Recurrence::for_spec(s, nq.max(degree + 1))).collect();
        let quadrature: Vec<(Vec<f64>, Vec<f64>)> = specs.iter().map(|s| gauss_jacobi(s, nq)).collect();

        // per-dimension table E[q_a q_b q_c] and E[q_a q_b]
        let nk = mi.len();
        let mut one_d: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_dims); // [dim][node][power]
        for d in 0..n_dims {
            let (x, _) = &quadrature[d];
            one_d.push(x.iter().map(|&xi| recurrences[d].eval(degree, xi)).collect());
        }
        let expect = |d: usize, f: &dyn Fn(&[f64]) -> f64| -> f64 {
            let (_, w) = &quadrature[d];
            one_d[d].iter().zip(w).map(|(q, w)| w * f(q)).sum()
        };
        let gamma: Vec<f64> = mi
            .iter()
            .map(|a| (0..n_dims).map(|d| expect(d, &|q| q[a[d]] * q[a[d]])).product())
            .collect();

        let mut triple_dense = vec![0.0; nk * nk * nk];
        let mut triple_products = Vec::new();
        for i in 0..nk {
            for j in i..nk {
                for k in j..nk {
                    let v: f64 = (0..n_dims)
                        .map(|d| expect(d, &|q| q[mi[i][d]] * q[mi[j][d]] * q[mi[k][d]]))
                        .product();
                    if v.abs() < TRIPLE_DROP_TOL {
                        continue;
                    }
                    triple_products.push((i, j, k, v));
                    for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                        triple_dense[(a * nk + b) * nk + c] = v;
                    }
                }
            }
        }

        let mut basis = PceBasis {
            n_dims,
            degree,
            multi_indices: mi,
            gamma,
            specs: specs.to_vec(),
            recurrences,
            quadrature,
            triple_products,
            triple_dense,
            grid: TensorGrid::default(),
        };
        basis.grid = basis.build_grid();
        basis
    }

    fn build_grid(&self) -> TensorGrid {
        let mut grid = TensorGrid::default();
        if self.n_dims == 0 {
            grid.points.push(Vec::new());
            grid.weights.push(1.0);
            grid.phi.push(vec![1.0]);
            return grid;
        }
        let sizes: Vec<usize> = self.quadrature.iter().map(|q| q.0.len()).collect();
        let total: usize = sizes.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut pt = Vec::with_capacity(self.n_dims);
            let mut w = 1.0;
            for d in 0..self.n_dims {
                let i = rem % sizes[d];
                rem /= sizes[d];
                pt.push(self.quadrature[d].0[i]);
                w *= self.quadrature[d].1[i];
            }
            grid.phi.push(self.eval(&pt));
            grid.points.push(pt);
            grid.weights.push(w);
        }
        grid
    }

    /// Number of basis functions, `K + 1`.
    pub fn len(&self) -> usize {
        self.multi_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi_indices.is_empty()
    }

    pub fn grid(&self) -> &TensorGrid {
        &self.grid
    }

    /// Germ means, the nominal point of the expansion.
    pub fn nominal(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.mean()).collect()
    }

    /// `Phi_k(xi)` for every `k`.
    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let per_dim: Vec<Vec<f64>> =
            (0..self.n_dims).map(|d| self.recurrences[d].eval(self.degree, xi[d])).collect();
        self.multi_indices
            .iter()
            .map(|a| a.iter().enumerate().map(|(d, &p)| per_dim[d][p]).product())
            .collect()
    }

    /// Value of the expansion with coefficients `c` at `xi`.
    pub fn reconstruct(&self, c: &[f64], xi: &[f64]) -> f64 {
        self.eval(xi).iter().zip(c).map(|(p, c)| p * c).sum()
    }

    /// Index of the first-order basis function of dimension `dim`.
    pub fn first_order_index(&self, dim: usize) -> Option<usize> {
        self.multi_indices
            .iter()
            .position(|a| a.iter().enumerate().all(|(d, &p)| p == usize::from(d == dim)))
    }

    pub fn triple(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.len();
        self.triple_dense[(i * n + j) * n + k]
    }

    /// Galerkin projection of the product of two expansions.
    pub fn product(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n];
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                if a[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    s += a[i] * b[j] * self.triple_dense[(i * n + j) * n + k];
                }
            }
            *o = s / self.gamma[k];
        }
        out
    }

    /// Projection coefficients of `f` sampled on the tensor grid.
    pub fn project_samples(&self, values: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; self.len()];
        for (q, v) in values.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += g.weights[q] * v * g.phi[q][k];
            }
        }
        for (o, gk) in out.iter_mut().zip(&self.gamma) {
            *o /= gk;
        }
        out
    }
}

/// Mean and variance of an expansion: `c_0` and `sum_{k>=1} gamma_k c_k^2`.
pub fn moments(basis: &PceBasis, coeffs: &[f64]) -> Result<(f64, f64), PceError> {
    if coeffs.len() != basis.len() {
        return Err(PceError::DimensionMismatch { expected: basis.len(), got: coeffs.len() });
    }
    Ok(moments_with_gamma(&basis.gamma, coeffs))
}

pub fn moments_with_gamma(gamma: &[f64], coeffs: &[f64]) -> (f64, f64) {
    let var = coeffs.iter().zip(gamma).skip(1).map(|(c, g)| g * c * c).sum();
    (coeffs[0], var)
}

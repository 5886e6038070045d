//! Polynomial chaos: quadrature, basis and the Galerkin stochastic power flow.

pub mod basis;
pub mod galerkin;
pub mod quadrature;

pub use basis::{moments, PceBasis};
pub use galerkin::{galerkin_solve, GalerkinSystem, PceSolution};
pub use quadrature::gauss_jacobi;

use thiserror::Error;

use crate::powerflow::PfError;

#[derive(Debug, Error)]
pub enum PceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("sensitivities need a basis of degree >= 1")]
    DegreeZero,
    #[error("Galerkin system did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("singular Galerkin Jacobian at iteration {0}")]
    Singular(usize),
    #[error(transparent)]
    PowerFlow(#[from] PfError),
}

/// First-order sensitivity `x_{1,i} * Phi'_{1,i}(xi_0)` of an expansion to germ `dim`.
///
/// The per-dimension basis is monic, so `Phi'_{1,i} = 1` and the sensitivity
/// is the first-order coefficient itself.
pub fn sensitivity(basis: &PceBasis, coeffs: &[f64], dim: usize) -> Result<f64, PceError> {
    if basis.degree == 0 {
        return Err(PceError::DegreeZero);
    }
    if coeffs.len() != basis.len() {
        return Err(PceError::DimensionMismatch { expected: basis.len(), got: coeffs.len() });
    }
    let k = basis
        .first_order_index(dim)
        .ok_or(PceError::DimensionMismatch { expected: basis.n_dims, got: dim + 1 })?;
    Ok(coeffs[k])
}

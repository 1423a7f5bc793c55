//! Local positive observables and the scalar constants of the circuit model.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::ChainGeometry;

const HERMITIAN_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// A positive semidefinite operator on one qudit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    matrix: DMatrix<Complex64>,
    eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorNorms {
    pub trace_norm: f64,
    pub frobenius_norm: f64,
    /// `(||O||_1 / ||O||_2)^2`, lies in `[1, d]` for nonzero positive operators.
    pub x_squared: f64,
}

impl LocalOperator {
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        let d = matrix.nrows();
        if d != matrix.ncols() {
            return Err(Error::Operator(format!("matrix must be square, got {}x{}", d, matrix.ncols())));
        }
        if d < 2 {
            return Err(Error::Operator(format!("local dimension must be at least 2, got {d}")));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Operator("matrix has non-finite entries".into()));
        }
        for i in 0..d {
            for j in 0..d {
                let gap = (matrix[(i, j)] - matrix[(j, i)].conj()).norm();
                if gap > HERMITIAN_TOL {
                    return Err(Error::Operator(format!(
                        "not Hermitian: entries ({i},{j}) and ({j},{i}) differ by {gap:.3e}"
                    )));
                }
            }
        }
        // symmetrize away sub-tolerance asymmetry before the eigensolve
        let herm = (&matrix + matrix.adjoint()).scale(0.5);
        let mut eigenvalues: Vec<f64> = herm.clone().symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        if eigenvalues[0] < -PSD_TOL {
            return Err(Error::Operator(format!(
                "not positive semidefinite: smallest eigenvalue {:.6e}",
                eigenvalues[0]
            )));
        }
        Ok(LocalOperator { matrix: herm, eigenvalues })
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        let d = entries.len();
        Self::new(DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                Complex64::new(entries[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::diagonal(&vec![1.0; d])
    }

    /// Builds a `d x d` operator from row-major `(re, im)` pairs.
    pub fn from_row_major(d: usize, entries: &[(f64, f64)]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::Operator(format!(
                "expected {} row-major entries for a {d}x{d} matrix, got {}",
                d * d,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| {
            let (re, im) = entries[i * d + j];
            Complex64::new(re, im)
        }))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// Ascending spectrum.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// `Tr(O^2)`.
    pub fn trace_of_square(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l * l).sum()
    }

    pub fn norms(&self) -> Result<OperatorNorms> {
        let trace_norm: f64 = self.eigenvalues.iter().map(|l| l.abs()).sum();
        let frobenius_norm = self.trace_of_square().sqrt();
        if frobenius_norm == 0.0 {
            return Err(Error::Operator("zero operator has no norm ratio".into()));
        }
        let ratio = trace_norm / frobenius_norm;
        Ok(OperatorNorms { trace_norm, frobenius_norm, x_squared: ratio * ratio })
    }

    /// `U O U^†`.
    pub fn conjugated(&self, unitary: &DMatrix<Complex64>) -> Result<Self> {
        Self::new(unitary * &self.matrix * unitary.adjoint())
    }
}

/// Scalar constants of the second-moment map for a given `O_p` and ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConstants {
    pub sites: usize,
    pub local_dim: usize,
    /// Probability that a step leaves `O_p ⊗ O_p` untouched, `(L-2)/L`.
    pub r: f64,
    /// Off-diagonal weight of the moment matrix, `N_d / L`.
    pub u: f64,
    /// Half-straddling swap twirl coefficient `d/(d^2+1)`.
    pub twirl_coeff: f64,
    /// Identity weight of the one-edge twirl of `O_p ⊗ O_p`.
    pub a: f64,
    /// Swap weight of the one-edge twirl of `O_p ⊗ O_p`.
    pub b: f64,
    pub x_squared: f64,
    /// `Tr(O_p^2)`.
    pub tr_square: f64,
}

pub fn model_constants(op_p: &LocalOperator, geom: &ChainGeometry) -> Result<ModelConstants> {
    let d = geom.local_dim();
    if op_p.dim() != d {
        return Err(Error::Operator(format!("operator dimension {} does not match local dimension {d}", op_p.dim())));
    }
    let l = geom.sites() as f64;
    let df = d as f64;
    let x2 = op_p.norms()?.x_squared;
    let p2 = op_p.trace_of_square();
    // x^2 <= d analytically; rounding can push it just past d
    let gap = (df - x2).max(0.0);
    let d4m1 = df.powi(4) - 1.0;
    let twirl_coeff = df / (df * df + 1.0);
    Ok(ModelConstants {
        sites: geom.sites(),
        local_dim: d,
        r: (l - 2.0) / l,
        u: twirl_coeff / l,
        twirl_coeff,
        a: p2 * (x2 * df.powi(3) - 1.0) / (df * d4m1),
        b: p2 * gap / d4m1,
        x_squared: x2,
        tr_square: p2,
    })
}

/// Stationary value of the scaled bound,
/// `sqrt(2 (d - x^2)(d - y^2)) / d^2 * ||O_p||_2 ||O_q||_2`.
pub fn asymptotic_max(op_p: &LocalOperator, op_q: &LocalOperator) -> Result<f64> {
    if op_p.dim() != op_q.dim() {
        return Err(Error::Operator("O_p and O_q must share the local dimension".into()));
    }
    let d = op_p.dim() as f64;
    let np = op_p.norms()?;
    let nq = op_q.norms()?;
    // x^2 <= d holds analytically; clamp rounding just above d
    let gap_p = (d - np.x_squared).max(0.0);
    let gap_q = (d - nq.x_squared).max(0.0);
    Ok((2.0 * gap_p * gap_q).sqrt() / (d * d) * np.frobenius_norm * nq.frobenius_norm)
}

//! Log-determinant (LD) information measures built purely from second-order
//! statistics: LD-entropy, conditional LD-entropy, and LD mutual information
//! in its one-sided and symmetrized forms.
//!
//! The `+ eps I` perturbation sits inside the inverse and outside each
//! residual covariance; [`mmse_residual_covariance`] itself is unperturbed.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::linalg::{self, add_scaled_identity, symmetrize, Cholesky, Matrix, Vector};

/// Auto- and cross-covariances (plus means) of a pair of random vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderPair {
    r_x: Matrix,
    r_y: Matrix,
    r_xy: Matrix,
    mu_x: Vector,
    mu_y: Vector,
}

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

impl SecondOrderPair {
    /// Validates shapes, symmetry of the auto-covariances and positive
    /// semidefiniteness of the joint covariance.
    pub fn new(r_x: Matrix, r_y: Matrix, r_xy: Matrix, mu_x: Vector, mu_y: Vector) -> Result<Self> {
        let pair = Self::new_unchecked(r_x, r_y, r_xy, mu_x, mu_y)?;
        for (name, r) in [("r_x", &pair.r_x), ("r_y", &pair.r_y)] {
            let scale = r.max_abs().max(1.0);
            if r.asymmetry() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "{name} is not symmetric (asymmetry {:e})",
                    r.asymmetry()
                )));
            }
        }
        let joint = symmetrize(&joint_covariance(&pair))?;
        let eig = linalg::sym_eigenvalues(&joint)?;
        let min = eig.last().copied().unwrap_or(0.0);
        if min < -PSD_TOL * joint.max_abs().max(1.0) {
            return Err(Error::invalid(format!(
                "joint covariance is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(pair)
    }

    /// Zero-mean pair from covariances alone.
    pub fn from_covariances(r_x: Matrix, r_y: Matrix, r_xy: Matrix) -> Result<Self> {
        let (px, py) = (r_x.rows(), r_y.rows());
        Self::new(r_x, r_y, r_xy, Vector::zeros(px), Vector::zeros(py))
    }

    /// Shape checks only. Used for covariances that are PSD by construction
    /// (e.g. the tracked training statistics).
    pub(crate) fn new_unchecked(
        r_x: Matrix,
        r_y: Matrix,
        r_xy: Matrix,
        mu_x: Vector,
        mu_y: Vector,
    ) -> Result<Self> {
        let (px, py) = (r_x.rows(), r_y.rows());
        if !r_x.is_square() || !r_y.is_square() {
            return Err(Error::shape("auto-covariances must be square"));
        }
        if r_xy.shape() != (px, py) {
            return Err(Error::shape(format!(
                "cross-covariance is {:?}, expected ({px}, {py})",
                r_xy.shape()
            )));
        }
        if mu_x.len() != px || mu_y.len() != py {
            return Err(Error::shape(
                "mean lengths do not match covariance dimensions",
            ));
        }
        Ok(Self {
            r_x,
            r_y,
            r_xy,
            mu_x,
            mu_y,
        })
    }

    pub fn r_x(&self) -> &Matrix {
        &self.r_x
    }

    pub fn r_y(&self) -> &Matrix {
        &self.r_y
    }

    pub fn r_xy(&self) -> &Matrix {
        &self.r_xy
    }

    pub fn mu_x(&self) -> &Vector {
        &self.mu_x
    }

    pub fn mu_y(&self) -> &Vector {
        &self.mu_y
    }

    pub fn dim_x(&self) -> usize {
        self.r_x.rows()
    }

    pub fn dim_y(&self) -> usize {
        self.r_y.rows()
    }

    /// The same statistics with the roles of x and y exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            r_x: self.r_y.clone(),
            r_y: self.r_x.clone(),
            r_xy: self.r_xy.transpose(),
            mu_x: self.mu_y.clone(),
            mu_y: self.mu_x.clone(),
        }
    }
}

fn gaussian_constant(dim: usize) -> f64 {
    0.5 * dim as f64 * (2.0 * PI * E).ln()
}

/// `1/2 logdet(r + eps I) + (dim/2) log(2 pi e)`.
pub fn ld_entropy(r: &Matrix, eps: f64) -> Result<f64> {
    let chol = Cholesky::factor(&add_scaled_identity(r, eps)?)?;
    Ok(0.5 * chol.logdet() + gaussian_constant(r.rows()))
}

/// `[[r_x, r_xy], [r_xy^T, r_y]]`.
pub fn joint_covariance(p: &SecondOrderPair) -> Matrix {
    let (px, py) = (p.dim_x(), p.dim_y());
    let n = px + py;
    let mut out = Matrix::zeros(n, n);
    for i in 0..px {
        for j in 0..px {
            out[(i, j)] = p.r_x[(i, j)];
        }
        for j in 0..py {
            out[(i, px + j)] = p.r_xy[(i, j)];
            out[(px + j, i)] = p.r_xy[(i, j)];
        }
    }
    for i in 0..py {
        for j in 0..py {
            out[(px + i, px + j)] = p.r_y[(i, j)];
        }
    }
    out
}

/// Error covariance of the best affine estimate of x from y:
/// `r_x - r_xy (r_y + eps I)^-1 r_xy^T`.
pub fn mmse_residual_covariance(p: &SecondOrderPair, eps: f64) -> Result<Matrix> {
    let chol = Cholesky::factor(&add_scaled_identity(&p.r_y, eps)?)?;
    // (r_y + eps I)^-1 r_xy^T
    let gain_t = chol.solve(&p.r_xy.transpose())?;
    let explained = p.r_xy.matmul(&gain_t)?;
    symmetrize(&p.r_x.sub(&explained)?)
}

/// Affine MMSE estimator `x_hat = a y + b`.
pub fn affine_mmse(p: &SecondOrderPair, eps: f64) -> Result<(Matrix, Vector)> {
    let chol = Cholesky::factor(&add_scaled_identity(&p.r_y, eps)?)?;
    let a = chol.solve(&p.r_xy.transpose())?.transpose();
    let a_mu = a.matvec(&p.mu_y)?;
    let b = p.mu_x.iter().zip(&a_mu).map(|(m, am)| m - am).collect();
    Ok((a, Vector::from_vec_unchecked(b)))
}

pub fn conditional_ld_entropy(p: &SecondOrderPair, eps: f64) -> Result<f64> {
    let resid = mmse_residual_covariance(p, eps)?;
    ld_entropy(&resid, eps)
}

/// One-sided LD mutual information `h(x) - h(x | y)`.
pub fn ldmi(p: &SecondOrderPair, eps: f64) -> Result<f64> {
    Ok(ld_entropy(&p.r_x, eps)? - conditional_ld_entropy(p, eps)?)
}

/// Symmetrized LD mutual information, the average of `ldmi(x; y)` and
/// `ldmi(y; x)`.
pub fn ldmi_symmetric(p: &SecondOrderPair, eps: f64) -> Result<f64> {
    let logdet = |m: &Matrix| -> Result<f64> {
        Ok(Cholesky::factor(&add_scaled_identity(m, eps)?)?.logdet())
    };
    let resid_x = mmse_residual_covariance(p, eps)?;
    let resid_y = mmse_residual_covariance(&p.swapped(), eps)?;
    Ok(0.25 * (logdet(&p.r_x)? + logdet(&p.r_y)? - logdet(&resid_x)? - logdet(&resid_y)?))
}

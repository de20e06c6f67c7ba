//! The CorInfoMax training objective and its gradient with respect to the
//! projector outputs.
//!
//! The minimized loss is
//!
//! ```text
//! total = -(logdet(R1 + eps I) + logdet(R2 + eps I)) / D  +  alpha * ||Z1 - Z2||_F^2 / (N P)
//!         \__________________ big bang _______________/            \____ attraction ____/
//! ```
//!
//! where `R1`, `R2` are the tracked covariances *after* folding in the
//! current batch and `D` is `P` when dimension normalization is on, else 1.
//!
//! Gradients treat the updated means and the previous covariances as
//! constants. Under that convention
//! `d logdet(R + eps I) / d z_n = 2 (1 - lambda) / N * (R + eps I)^-1 (z_n - mu)`.
//! [`GradConstant::AsPrinted`] drops the factor 2 and exists only so the
//! discrepancy can be measured against the finite-difference oracle.

use crate::covtrack::{Batch, CovarianceState};
use crate::error::{Error, Result};
use crate::info;
use crate::linalg::{self, add_scaled_identity, Cholesky, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradConstant {
    /// `2 (1 - lambda) / N`, the exact derivative of the covariance update.
    Derived,
    /// `(1 - lambda) / N`, without the factor 2 of the quadratic form.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// Diagonal perturbation inside every log-determinant.
    pub eps: f64,
    /// Weight of the attraction term.
    pub alpha: f64,
    /// Divide the big-bang term by the projector dimension.
    pub dim_normalize: bool,
    /// Include the big-bang (log-determinant) term at all. Off only for the
    /// collapse ablation.
    pub big_bang: bool,
    pub grad_constant: GradConstant,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            alpha: 250.0,
            dim_normalize: true,
            big_bang: true,
            grad_constant: GradConstant::Derived,
        }
    }
}

impl LossParams {
    pub fn new(eps: f64, alpha: f64) -> Result<Self> {
        let p = Self {
            eps,
            alpha,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-step loss decomposition. `total = big_bang + alpha * attraction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub big_bang: f64,
    pub attraction: f64,
    /// Symmetric LD mutual information of the tracked statistics.
    pub ldmi_tracked: f64,
}

/// Gradient of the loss w.r.t. both branches' projector outputs, split into
/// the two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ZGradients {
    pub big_bang: (Matrix, Matrix),
    pub attraction: (Matrix, Matrix),
}

impl ZGradients {
    pub fn total(&self) -> (Matrix, Matrix) {
        (
            self.big_bang.0.add(&self.attraction.0).expect("same shape"),
            self.big_bang.1.add(&self.attraction.1).expect("same shape"),
        )
    }
}

/// Everything one training step needs from the loss.
#[derive(Debug, Clone)]
pub struct LossStep {
    pub breakdown: LossBreakdown,
    pub state: CovarianceState,
    pub grads: ZGradients,
    /// Perturbation actually used after any jitter escalation.
    pub eps_used: f64,
}

/// Updates the tracker with `batch` and evaluates the loss.
pub fn objective(
    state: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
) -> Result<(LossBreakdown, CovarianceState)> {
    let step = evaluate(state, batch, params, true)?;
    Ok((step.breakdown, step.state))
}

/// Analytic gradient of [`objective`]'s total w.r.t. `Z1` and `Z2`.
pub fn grad_z(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
) -> Result<ZGradients> {
    Ok(evaluate(state_prev, batch, params, false)?.grads)
}

/// Loss, updated state and gradients in one pass (one factorization per
/// branch).
pub fn loss_step(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
) -> Result<LossStep> {
    evaluate(state_prev, batch, params, true)
}

/// As [`loss_step`], but the tracked LDMI is only computed when
/// `track_ldmi` is set and is `NaN` otherwise.
pub fn loss_step_with(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
    track_ldmi: bool,
) -> Result<LossStep> {
    evaluate(state_prev, batch, params, track_ldmi)
}

fn evaluate(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
    with_ldmi: bool,
) -> Result<LossStep> {
    params.validate()?;
    let (state, z1t, z2t) = state_prev.batch_update(batch)?;
    let p = batch.dim() as f64;
    let n = batch.n() as f64;
    let norm = if params.dim_normalize { p } else { 1.0 };

    let (big_bang, bb_grads, eps_used) = if params.big_bang {
        let ((c1, c2), eps_used) = linalg::with_jitter_escalation(params.eps, |eps| {
            Ok((
                Cholesky::factor(&add_scaled_identity(state.r1(), eps)?)?,
                Cholesky::factor(&add_scaled_identity(state.r2(), eps)?)?,
            ))
        })?;
        let big_bang = -(c1.logdet() + c2.logdet()) / norm;
        let c = match params.grad_constant {
            GradConstant::Derived => 2.0,
            GradConstant::AsPrinted => 1.0,
        } * (1.0 - state.lambda())
            / n;
        let scale = -c / norm;
        let g1 = c1.solve(&z1t)?.scale(scale);
        let g2 = c2.solve(&z2t)?.scale(scale);
        (big_bang, (g1, g2), eps_used)
    } else {
        let zero = Matrix::zeros(batch.dim(), batch.n());
        (0.0, (zero.clone(), zero), params.eps)
    };

    let diff = batch.z1().sub(batch.z2())?;
    let attraction = diff.data().iter().map(|v| v * v).sum::<f64>() / (n * p);
    let g_att = diff.scale(2.0 * params.alpha / (n * p));
    let g_att_neg = g_att.scale(-1.0);

    let ldmi_tracked = if with_ldmi {
        tracked_ldmi(&state, params.eps)?
    } else {
        f64::NAN
    };

    Ok(LossStep {
        breakdown: LossBreakdown {
            total: big_bang + params.alpha * attraction,
            big_bang,
            attraction,
            ldmi_tracked,
        },
        state,
        grads: ZGradients {
            big_bang: bb_grads,
            attraction: (g_att, g_att_neg),
        },
        eps_used,
    })
}

/// Symmetric LDMI of the tracked `(R1, R2, R12)`, escalating the
/// perturbation if a residual covariance is numerically indefinite.
pub fn tracked_ldmi(state: &CovarianceState, eps: f64) -> Result<f64> {
    let pair = state.second_order_pair();
    Ok(linalg::with_jitter_escalation(eps, |e| info::ldmi_symmetric(&pair, e))?.0)
}

/// Loss total with the centering means pinned to `means`.
fn total_with_means(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
    means: Option<(&Vector, &Vector)>,
) -> Result<f64> {
    let (state, _, _) = match means {
        Some((m1, m2)) => state_prev.batch_update_with_means(batch, m1, m2)?,
        None => state_prev.batch_update(batch)?,
    };
    let p = batch.dim() as f64;
    let n = batch.n() as f64;
    let norm = if params.dim_normalize { p } else { 1.0 };
    let big_bang = if params.big_bang {
        let ld1 = Cholesky::factor(&add_scaled_identity(state.r1(), params.eps)?)?.logdet();
        let ld2 = Cholesky::factor(&add_scaled_identity(state.r2(), params.eps)?)?.logdet();
        -(ld1 + ld2) / norm
    } else {
        0.0
    };
    let diff = batch.z1().sub(batch.z2())?;
    let attraction = diff.data().iter().map(|v| v * v).sum::<f64>() / (n * p);
    Ok(big_bang + params.alpha * attraction)
}

/// How the finite-difference oracle treats the running means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanCoupling {
    /// Means fixed at their value for the unperturbed batch (matches the
    /// analytic gradient's convention).
    Frozen,
    /// Means recomputed for every perturbed batch.
    Full,
}

/// Central finite differences of the loss total over every entry of `Z1`
/// and `Z2`, re-running the tracker update from `state_prev` each time.
pub fn grad_z_fd(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
    h: f64,
) -> Result<(Matrix, Matrix)> {
    grad_z_fd_with(state_prev, batch, params, h, MeanCoupling::Frozen)
}

pub fn grad_z_fd_with(
    state_prev: &CovarianceState,
    batch: &Batch,
    params: &LossParams,
    h: f64,
    coupling: MeanCoupling,
) -> Result<(Matrix, Matrix)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    params.validate()?;
    let frozen = state_prev.update_means(batch)?;
    let means = match coupling {
        MeanCoupling::Frozen => Some((frozen.mu1(), frozen.mu2())),
        MeanCoupling::Full => None,
    };
    let (rows, cols) = (batch.dim(), batch.n());
    let mut g = [Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)];
    for (branch, out) in g.iter_mut().enumerate() {
        for i in 0..rows {
            for j in 0..cols {
                let eval = |delta: f64| -> Result<f64> {
                    let (mut z1, mut z2) = (batch.z1().clone(), batch.z2().clone());
                    let z = if branch == 0 { &mut z1 } else { &mut z2 };
                    z[(i, j)] += delta;
                    total_with_means(state_prev, &Batch::new(z1, z2)?, params, means)
                };
                out[(i, j)] = (eval(h)? - eval(-h)?) / (2.0 * h);
            }
        }
    }
    let [g1, g2] = g;
    Ok((g1, g2))
}

/// `max |a - b| / max |b|` over both branches.
pub fn max_relative_error(analytic: (&Matrix, &Matrix), reference: (&Matrix, &Matrix)) -> f64 {
    let diff = analytic
        .0
        .sub(reference.0)
        .expect("same shape")
        .max_abs()
        .max(analytic.1.sub(reference.1).expect("same shape").max_abs());
    let scale = reference.0.max_abs().max(reference.1.max_abs());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

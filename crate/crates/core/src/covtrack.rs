//! Exponentially forgetting estimates of the projector-output means,
//! auto-covariances and cross-covariance, updated once per batch.
//!
//! Update order per batch: means first, then centering with the *new*
//! means, then the covariance recursions. Normalization is `1/N`.

use crate::error::{Error, Result};
use crate::info::SecondOrderPair;
use crate::linalg::{symmetrize, Matrix, Vector};

/// Projector outputs of the two branches for one batch, `P x N` each with
/// one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    z1: Matrix,
    z2: Matrix,
}

impl Batch {
    pub fn new(z1: Matrix, z2: Matrix) -> Result<Self> {
        if z1.shape() != z2.shape() {
            return Err(Error::shape(format!(
                "branch outputs differ in shape: {:?} vs {:?}",
                z1.shape(),
                z2.shape()
            )));
        }
        if z1.cols() == 0 {
            return Err(Error::shape("empty batch"));
        }
        if !z1.all_finite() || !z2.all_finite() {
            return Err(Error::NonFinite("batch contains non-finite outputs".into()));
        }
        Ok(Self { z1, z2 })
    }

    pub fn z1(&self) -> &Matrix {
        &self.z1
    }

    pub fn z2(&self) -> &Matrix {
        &self.z2
    }

    pub fn dim(&self) -> usize {
        self.z1.rows()
    }

    pub fn n(&self) -> usize {
        self.z1.cols()
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.z1, self.z2)
    }
}

/// Tracked first- and second-order statistics of both projector branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    dim: usize,
    mu1: Vector,
    mu2: Vector,
    r1: Matrix,
    r2: Matrix,
    r12: Matrix,
    lambda: f64,
    step: u64,
}

impl CovarianceState {
    /// Identity auto-covariances, zero cross-covariance and zero means.
    pub fn init(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("covariance dimension must be >= 1"));
        }
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::invalid(format!(
                "forgetting factor must lie in [0, 1), got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            mu1: Vector::zeros(dim),
            mu2: Vector::zeros(dim),
            r1: Matrix::identity(dim),
            r2: Matrix::identity(dim),
            r12: Matrix::zeros(dim, dim),
            lambda,
            step: 0,
        })
    }

    /// Rebuilds a state from raw parts, validating shapes, symmetry and
    /// the forgetting factor.
    pub fn from_parts(
        mu1: Vector,
        mu2: Vector,
        r1: Matrix,
        r2: Matrix,
        r12: Matrix,
        lambda: f64,
        step: u64,
    ) -> Result<Self> {
        let dim = mu1.len();
        let mut s = Self::init(dim, lambda)?;
        if mu2.len() != dim || [&r1, &r2, &r12].iter().any(|m| m.shape() != (dim, dim)) {
            return Err(Error::shape("inconsistent covariance state dimensions"));
        }
        for r in [&r1, &r2] {
            if r.asymmetry() > 1e-9 * r.max_abs().max(1.0) {
                return Err(Error::invalid("auto-covariance is not symmetric"));
            }
        }
        s.mu1 = mu1;
        s.mu2 = mu2;
        s.r1 = symmetrize(&r1)?;
        s.r2 = symmetrize(&r2)?;
        s.r12 = r12;
        s.step = step;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn mu1(&self) -> &Vector {
        &self.mu1
    }

    pub fn mu2(&self) -> &Vector {
        &self.mu2
    }

    pub fn r1(&self) -> &Matrix {
        &self.r1
    }

    pub fn r2(&self) -> &Matrix {
        &self.r2
    }

    pub fn r12(&self) -> &Matrix {
        &self.r12
    }

    fn check_batch(&self, z1: &Matrix, z2: &Matrix) -> Result<()> {
        if z1.rows() != self.dim || z1.shape() != z2.shape() {
            return Err(Error::shape(format!(
                "batch {:?}/{:?} does not match tracked dimension {}",
                z1.shape(),
                z2.shape(),
                self.dim
            )));
        }
        if z1.cols() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// `mu <- lambda mu + (1 - lambda) mean(Z)` for both branches.
    pub fn update_means(&self, batch: &Batch) -> Result<Self> {
        self.check_batch(&batch.z1, &batch.z2)?;
        let l = self.lambda;
        let blend = |mu: &Vector, z: &Matrix| {
            let m = z.column_mean();
            Vector::from_vec_unchecked(
                mu.iter()
                    .zip(m.iter())
                    .map(|(a, b)| l * a + (1.0 - l) * b)
                    .collect(),
            )
        };
        Ok(Self {
            mu1: blend(&self.mu1, &batch.z1),
            mu2: blend(&self.mu2, &batch.z2),
            ..self.clone()
        })
    }

    /// `R_q <- lambda R_q + (1 - lambda) Zt_q Zt_q^T / N`, symmetrized.
    pub fn update_autocov(&self, z1_tilde: &Matrix, z2_tilde: &Matrix) -> Result<Self> {
        self.check_batch(z1_tilde, z2_tilde)?;
        let n = z1_tilde.cols() as f64;
        let l = self.lambda;
        let r1_batch = z1_tilde.matmul_transb(z1_tilde)?;
        let r2_batch = z2_tilde.matmul_transb(z2_tilde)?;
        Ok(Self {
            r1: symmetrize(&self.r1.lincomb(l, &r1_batch, (1.0 - l) / n))?,
            r2: symmetrize(&self.r2.lincomb(l, &r2_batch, (1.0 - l) / n))?,
            ..self.clone()
        })
    }

    /// `R_12 <- lambda R_12 + (1 - lambda) Zt_1 Zt_2^T / N`.
    pub fn update_crosscov(&self, z1_tilde: &Matrix, z2_tilde: &Matrix) -> Result<Self> {
        self.check_batch(z1_tilde, z2_tilde)?;
        let n = z1_tilde.cols() as f64;
        let l = self.lambda;
        let cross = z1_tilde.matmul_transb(z2_tilde)?;
        Ok(Self {
            r12: self.r12.lincomb(l, &cross, (1.0 - l) / n),
            ..self.clone()
        })
    }

    /// Full per-batch update. Returns the new state and both centered
    /// batches.
    pub fn batch_update(&self, batch: &Batch) -> Result<(Self, Matrix, Matrix)> {
        let with_means = self.update_means(batch)?;
        self.finish_update(with_means, batch)
    }

    /// Batch update with the centering means supplied by the caller instead
    /// of recomputed from the batch. Used to differentiate with the means
    /// held constant.
    pub(crate) fn batch_update_with_means(
        &self,
        batch: &Batch,
        mu1: &Vector,
        mu2: &Vector,
    ) -> Result<(Self, Matrix, Matrix)> {
        self.check_batch(&batch.z1, &batch.z2)?;
        if mu1.len() != self.dim || mu2.len() != self.dim {
            return Err(Error::shape("mean length does not match tracked dimension"));
        }
        let with_means = Self {
            mu1: mu1.clone(),
            mu2: mu2.clone(),
            ..self.clone()
        };
        self.finish_update(with_means, batch)
    }

    fn finish_update(&self, with_means: Self, batch: &Batch) -> Result<(Self, Matrix, Matrix)> {
        let z1t = center(&batch.z1, &with_means.mu1)?;
        let z2t = center(&batch.z2, &with_means.mu2)?;
        let mut next = with_means
            .update_autocov(&z1t, &z2t)?
            .update_crosscov(&z1t, &z2t)?;
        next.step = self.step + 1;
        Ok((next, z1t, z2t))
    }

    /// The tracked statistics as a pair `(z1, z2)` for information measures.
    pub fn second_order_pair(&self) -> SecondOrderPair {
        SecondOrderPair::new_unchecked(
            self.r1.clone(),
            self.r2.clone(),
            self.r12.clone(),
            self.mu1.clone(),
            self.mu2.clone(),
        )
        .expect("tracked state has consistent shapes")
    }
}

/// `Z - mu 1^T`.
pub fn center(z: &Matrix, mu: &Vector) -> Result<Matrix> {
    if z.rows() != mu.len() {
        return Err(Error::shape(format!(
            "cannot center {:?} with a mean of length {}",
            z.shape(),
            mu.len()
        )));
    }
    let mut out = z.clone();
    let n = z.cols();
    for (i, row) in out
        .data_mut()
        .chunks_mut(n.max(1))
        .enumerate()
        .take(z.rows())
    {
        for v in row {
            *v -= mu[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        )
        .unwrap()
    }

    fn batch_cov(z: &Matrix) -> Matrix {
        let zt = center(z, &z.column_mean()).unwrap();
        zt.matmul_transb(&zt).unwrap().scale(1.0 / z.cols() as f64)
    }

    #[test]
    fn init_cases() {
        let s = CovarianceState::init(4, 0.01).unwrap();
        assert_eq!(s.r1(), &Matrix::identity(4));
        assert_eq!(s.r2(), &Matrix::identity(4));
        assert_eq!(s.r12(), &Matrix::zeros(4, 4));
        assert!(s.mu1().iter().all(|&v| v == 0.0));
        assert_eq!(s.step(), 0);
        assert!(CovarianceState::init(4, 1.0).is_err());
        assert!(CovarianceState::init(4, -0.1).is_err());
        assert!(CovarianceState::init(0, 0.5).is_err());
    }

    #[test]
    fn means_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z1 = gaussian(3, 10, &mut rng);
        let z2 = gaussian(3, 10, &mut rng);
        let b = Batch::new(z1.clone(), z2.clone()).unwrap();
        let s = CovarianceState::init(3, 0.0)
            .unwrap()
            .update_means(&b)
            .unwrap();
        assert_eq!(s.mu1(), &z1.column_mean());
        assert_eq!(s.mu2(), &z2.column_mean());

        let mut s = CovarianceState::init(3, 0.99).unwrap();
        s.mu1 = Vector::new(vec![1.0, -2.0, 4.0]).unwrap();
        let zero = Batch::new(Matrix::zeros(3, 5), Matrix::zeros(3, 5)).unwrap();
        let t = s.update_means(&zero).unwrap();
        for (a, b) in t.mu1().iter().zip(s.mu1().iter()) {
            assert!((a - 0.99 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn means_converge_geometrically() {
        let lambda = 0.7;
        let c = [2.0, -1.0];
        let col = Matrix::from_columns(&[&c, &c, &c]).unwrap();
        let b = Batch::new(col.clone(), col).unwrap();
        let mut s = CovarianceState::init(2, lambda).unwrap();
        for k in 1..=30 {
            s = s.update_means(&b).unwrap();
            // mu_k = c (1 - lambda^k)
            for (m, cv) in s.mu1().iter().zip(c) {
                assert!((m - cv * (1.0 - lambda.powi(k))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian(4, 7, &mut rng);
        assert_eq!(center(&z, &Vector::zeros(4)).unwrap(), z);

        let mu = [0.5, 1.5];
        let rep = Matrix::from_columns(&[&mu, &mu, &mu]).unwrap();
        assert_eq!(
            center(&rep, &Vector::new(mu.to_vec()).unwrap()).unwrap(),
            Matrix::zeros(2, 3)
        );

        let c = center(&z, &z.column_mean()).unwrap();
        assert!(c.column_mean().iter().all(|v| v.abs() < 1e-12));
        assert!(center(&z, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn autocov_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = gaussian(3, 9, &mut rng);
        let z2 = gaussian(3, 9, &mut rng);
        let b = Batch::new(z1.clone(), z2.clone()).unwrap();
        let (s, _, _) = CovarianceState::init(3, 0.0)
            .unwrap()
            .batch_update(&b)
            .unwrap();
        assert!(s.r1().sub(&batch_cov(&z1)).unwrap().max_abs() <= 1e-12);
        assert!(s.r2().sub(&batch_cov(&z2)).unwrap().max_abs() <= 1e-12);

        let s0 = CovarianceState::init(3, 0.5).unwrap();
        let zero = Matrix::zeros(3, 4);
        let s1 = s0.update_autocov(&zero, &zero).unwrap();
        assert_eq!(s1.r1(), &Matrix::identity(3).scale(0.5));
    }

    /// With lambda = 0.01 the estimate is essentially one batch's sample
    /// covariance, whose expected squared Frobenius error is (P^2 + P) / N,
    /// so the 15% bound is a statement about small P.
    #[test]
    fn autocov_converges_on_stationary_stream() {
        let rel_err = |s: &CovarianceState| {
            let eye = Matrix::identity(s.dim());
            s.r1().sub(&eye).unwrap().frobenius_norm() / eye.frobenius_norm()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 2;
        let mut s = CovarianceState::init(p, 0.01).unwrap();
        for _ in 0..500 {
            let b = Batch::new(gaussian(p, 256, &mut rng), gaussian(p, 256, &mut rng)).unwrap();
            s = s.batch_update(&b).unwrap().0;
        }
        assert!(rel_err(&s) <= 0.15, "relative error {}", rel_err(&s));

        // P = 3 averaged over the tail of the stream
        let p = 3;
        let mut s = CovarianceState::init(p, 0.01).unwrap();
        let mut tail = 0.0;
        for step in 0..500 {
            let b = Batch::new(gaussian(p, 256, &mut rng), gaussian(p, 256, &mut rng)).unwrap();
            s = s.batch_update(&b).unwrap().0;
            if step >= 400 {
                tail += rel_err(&s) / 100.0;
            }
        }
        assert!(tail <= 0.15, "mean tail error {tail}");
    }

    /// Slow forgetting averages ~19 batches, so the cross-covariance of
    /// independent streams has expected squared norm P^2 / (19 N).
    #[test]
    fn crosscov_of_independent_streams_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = 4;
        let mut s = CovarianceState::init(p, 0.9).unwrap();
        for _ in 0..500 {
            let b = Batch::new(gaussian(p, 256, &mut rng), gaussian(p, 256, &mut rng)).unwrap();
            s = s.batch_update(&b).unwrap().0;
        }
        assert!(
            s.r12().frobenius_norm() <= 0.1,
            "cross-cov norm {}",
            s.r12().frobenius_norm()
        );
    }

    #[test]
    fn crosscov_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian(3, 6, &mut rng);
        let s0 = CovarianceState::init(3, 0.3).unwrap();
        let zt = center(&z, &z.column_mean()).unwrap();
        let auto = s0.update_autocov(&zt, &zt).unwrap();
        let cross = s0.update_crosscov(&zt, &zt).unwrap();
        // identical increments: R1' - lambda R1 == R12' - lambda R12
        let inc_auto = auto.r1().sub(&s0.r1().scale(0.3)).unwrap();
        let inc_cross = cross.r12().sub(&s0.r12().scale(0.3)).unwrap();
        assert!(inc_auto.sub(&inc_cross).unwrap().max_abs() < 1e-15);

        let z2 = gaussian(3, 6, &mut rng);
        let b = Batch::new(z.clone(), z2.clone()).unwrap();
        let (s, _, _) = CovarianceState::init(3, 0.0)
            .unwrap()
            .batch_update(&b)
            .unwrap();
        let zt1 = center(&z, &z.column_mean()).unwrap();
        let zt2 = center(&z2, &z2.column_mean()).unwrap();
        let want = zt1.matmul_transb(&zt2).unwrap().scale(1.0 / 6.0);
        assert!(s.r12().sub(&want).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn batch_update_is_the_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = CovarianceState::init(4, 0.2).unwrap();
        let mut manual = s.clone();
        for _ in 0..2 {
            let b = Batch::new(gaussian(4, 5, &mut rng), gaussian(4, 5, &mut rng)).unwrap();
            let (next, z1t, z2t) = s.batch_update(&b).unwrap();
            let m = manual.update_means(&b).unwrap();
            let c1 = center(b.z1(), m.mu1()).unwrap();
            let c2 = center(b.z2(), m.mu2()).unwrap();
            assert_eq!(c1, z1t);
            assert_eq!(c2, z2t);
            let mut m = m
                .update_autocov(&c1, &c2)
                .unwrap()
                .update_crosscov(&c1, &c2)
                .unwrap();
            m.step += 1;
            assert_eq!(next, m);
            s = next;
            manual = m;
        }
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let s = CovarianceState::init(3, 0.1).unwrap();
        let b = Batch::new(Matrix::zeros(2, 4), Matrix::zeros(2, 4)).unwrap();
        assert!(s.batch_update(&b).is_err());
        assert!(Batch::new(Matrix::zeros(3, 4), Matrix::zeros(3, 5)).is_err());
        assert!(Batch::new(Matrix::zeros(3, 0), Matrix::zeros(3, 0)).is_err());
    }

    #[test]
    fn state_stays_psd_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = CovarianceState::init(5, 0.1).unwrap();
        for k in 0..100 {
            // rank-deficient batches push toward the PSD boundary
            let n = 1 + k % 4;
            let b = Batch::new(gaussian(5, n, &mut rng), gaussian(5, n, &mut rng)).unwrap();
            s = s.batch_update(&b).unwrap().0;
            assert_eq!(s.r1(), &s.r1().transpose());
            assert_eq!(s.r2(), &s.r2().transpose());
            for r in [s.r1(), s.r2()] {
                let min = *sym_eigenvalues(r).unwrap().last().unwrap();
                assert!(min >= -1e-9, "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut s = CovarianceState::init(3, 0.05).unwrap();
            for _ in 0..10 {
                let b = Batch::new(gaussian(3, 8, &mut rng), gaussian(3, 8, &mut rng)).unwrap();
                s = s.batch_update(&b).unwrap().0;
            }
            s
        };
        assert_eq!(run(), run());
    }
}

//! Pretraining loop: augment, forward both branches, update the tracked
//! statistics, backprop the loss and take an SGD step.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::covtrack::{Batch, CovarianceState};
use crate::data::{augment_pair_asym, batch_indices, stream_rng, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Matrix};
use crate::loss::{loss_step_with, LossBreakdown, LossParams};
use crate::net::{backward, forward, init_params, sgd_step, MlpParams, NetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_start: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossParams,
    /// Forgetting factor of the covariance recursion.
    pub forgetting: f64,
    pub seed: u64,
    pub augment1: AugmentConfig,
    pub augment2: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_max: 0.5,
            lr_start: 0.003,
            lr_min: 1e-6,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossParams::default(),
            forgetting: 0.01,
            seed: 0,
            augment1: AugmentConfig::default(),
            augment2: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_max", self.lr_max),
            ("lr_start", self.lr_start),
            ("lr_min", self.lr_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warmup_epochs exceeds epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.forgetting) {
            return Err(Error::invalid(format!(
                "forgetting factor must be in [0, 1), got {}",
                self.forgetting
            )));
        }
        self.loss.validate()?;
        self.augment1.validate()?;
        self.augment2.validate()
    }
}

/// Statistics recorded at the last batch of each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total_loss: f64,
    pub big_bang: f64,
    pub attraction: f64,
    pub ldmi_tracked: f64,
    pub min_eig: f64,
    pub max_eig: f64,
    pub effective_rank: f64,
    pub learning_rate: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,total_loss,big_bang,attraction,ldmi_tracked,min_eig,max_eig,effective_rank,learning_rate";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.total_loss,
            self.big_bang,
            self.attraction,
            self.ldmi_tracked,
            self.min_eig,
            self.max_eig,
            self.effective_rank,
            self.learning_rate
        )
    }
}

/// Appends rows to a metrics file, writing the header first if the file is
/// new or empty.
pub fn append_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for m in metrics {
        writeln!(f, "{}", m.csv_row())?;
    }
    Ok(())
}

/// Linear warmup from `lr_start` to `lr_max`, then cosine decay reaching
/// `lr_min` at the final step.
pub fn schedule_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_start: f64,
    lr_max: f64,
    lr_min: f64,
) -> f64 {
    if step < warmup_steps {
        return lr_start + (lr_max - lr_start) * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps + 1).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `exp` of the entropy of the normalized spectrum. Negative eigenvalues
/// (roundoff) are treated as zero; an all-zero spectrum has rank 1.
pub fn effective_rank(eigenvalues: &[f64]) -> f64 {
    let sum: f64 = eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    if !(sum > 0.0) {
        return 1.0;
    }
    let h: f64 = eigenvalues
        .iter()
        .map(|&v| v.max(0.0) / sum)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Eigen statistics of `r1` plus the loss breakdown. `epoch` is left at 0.
pub fn collect_metrics(
    state: &CovarianceState,
    breakdown: &LossBreakdown,
    lr: f64,
) -> Result<EpochMetrics> {
    let eig = sym_eigenvalues(state.r1())?;
    let max_eig = eig.first().copied().unwrap_or(0.0);
    let min_eig = eig.last().copied().unwrap_or(0.0);
    Ok(EpochMetrics {
        epoch: 0,
        total_loss: breakdown.total,
        big_bang: breakdown.big_bang,
        attraction: breakdown.attraction,
        ldmi_tracked: breakdown.ldmi_tracked,
        min_eig,
        max_eig,
        effective_rank: effective_rank(&eig),
        learning_rate: lr,
    })
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub state: CovarianceState,
    pub metrics: Vec<EpochMetrics>,
}

pub fn pretrain(
    dataset: &Dataset,
    net_config: &NetConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    pretrain_observed(dataset, net_config, config, |_, _, _| Ok(()))
}

/// Augmented views of the given samples. Each sample draws from its own
/// RNG stream keyed by `(seed, epoch, index)`.
pub(crate) fn augmented_batch(
    dataset: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Matrix, Matrix)> {
    let d = dataset.dim();
    let n = indices.len();
    let mut x1 = Matrix::zeros(d, n);
    let mut x2 = Matrix::zeros(d, n);
    for (col, &j) in indices.iter().enumerate() {
        let stream = ((epoch as u64) << 32) | j as u64;
        let mut rng = stream_rng(config.seed, stream);
        let (a, b) = augment_pair_asym(
            &dataset.sample(j),
            &config.augment1,
            &config.augment2,
            &mut rng,
        );
        for i in 0..d {
            x1[(i, col)] = a[i];
            x2[(i, col)] = b[i];
        }
    }
    Ok((x1, x2))
}

/// As [`pretrain`], calling `observer(metrics, params, state)` after every
/// epoch. An observer error aborts training.
pub fn pretrain_observed<F>(
    dataset: &Dataset,
    net_config: &NetConfig,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &MlpParams, &CovarianceState) -> Result<()>,
{
    config.validate()?;
    if net_config.input_dim != dataset.dim() {
        return Err(Error::shape(format!(
            "network expects {} inputs, dataset has {}",
            net_config.input_dim,
            dataset.dim()
        )));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut params = init_params(net_config)?;
    let mut velocity = params.zeros_like();
    let mut state = CovarianceState::init(net_config.output_dim(), config.forgetting)?;
    let mut metrics = Vec::with_capacity(config.epochs);

    let per_epoch = dataset.len() / config.batch_size;
    let total_steps = per_epoch * config.epochs;
    let warmup_steps = per_epoch * config.warmup_epochs;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let order_seed = config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let plan = batch_indices(dataset.len(), config.batch_size, order_seed, true)?;
        let mut last: Option<(LossBreakdown, f64)> = None;
        for (b, indices) in plan.iter().enumerate() {
            let is_last = b + 1 == plan.len();
            let lr = schedule_lr(
                step,
                total_steps,
                warmup_steps,
                config.lr_start,
                config.lr_max,
                config.lr_min,
            );
            let (x1, x2) = augmented_batch(dataset, indices, config, epoch)?;
            let (_, z1, cache1) = forward(&params, &x1)?;
            let (_, z2, cache2) = forward(&params, &x2)?;
            let out = loss_step_with(&state, &Batch::new(z1, z2)?, &config.loss, is_last)?;
            let (g1, g2) = out.grads.total();
            let (mut grads, _) = backward(&params, &cache1, &g1)?;
            grads.accumulate(&backward(&params, &cache2, &g2)?.0)?;
            let (p, v) = sgd_step(
                &params,
                &grads,
                &velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            if !p.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged at epoch {epoch}, step {step}"
                )));
            }
            params = p;
            velocity = v;
            state = out.state;
            step += 1;
            if is_last {
                last = Some((out.breakdown, lr));
            }
        }
        let (breakdown, lr) = last.expect("at least one batch per epoch");
        let mut m = collect_metrics(&state, &breakdown, lr)?;
        m.epoch = epoch;
        log::debug!(
            "epoch {epoch}: loss {:.5} ldmi {:.4} min_eig {:.3e} erank {:.2}",
            m.total_loss,
            m.ldmi_tracked,
            m.min_eig,
            m.effective_rank
        );
        observer(&m, &params, &state)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        params,
        state,
        metrics,
    })
}

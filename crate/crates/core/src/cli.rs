//! Flat `key = value` run configuration and the command implementations
//! behind the `corinfomax` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covtrack::{center, Batch, CovarianceState};
use crate::data::{batch_indices, gen_blobs, load_table, write_table, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    append_probe_result, embed, probe_accuracy, probe_train, spectrum_report, SpectrumReport,
};
use crate::linalg::{add_scaled_identity, Cholesky, Matrix};
use crate::loss::{
    grad_z, grad_z_fd, grad_z_fd_with, loss_step_with, max_relative_error, tracked_ldmi,
};
use crate::loss::{GradConstant, LossParams, MeanCoupling};
use crate::net::{backward, forward, init_params, load_checkpoint, save_checkpoint, sgd_step};
use crate::net::{Activation, MlpParams, NetConfig};
use crate::train::{append_metrics, augmented_batch, pretrain_observed, EpochMetrics, TrainConfig};

/// Where the dataset comes from and how it is split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Read this table instead of generating blobs.
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub separation: f64,
    pub within_std: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            num_classes: 4,
            per_class: 500,
            d_in: 16,
            separation: 8.0,
            within_std: 1.0,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Probe during pretraining every this many epochs; 0 disables.
    pub every: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.2,
            momentum: 0.9,
            every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub batch: usize,
    pub hidden: usize,
    pub steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 128, 256],
            batch: 256,
            hidden: 512,
            steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            seed: 0,
            step: 1e-5,
        }
    }
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub run_id: String,
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    /// Defaults with the given output directory.
    pub fn with_out_dir(out_dir: impl Into<PathBuf>) -> Self {
        let data = DataConfig::default();
        Self {
            out_dir: out_dir.into(),
            run_id: "run".into(),
            net: NetConfig {
                input_dim: data.d_in,
                encoder_dims: vec![64, 64],
                projector_dims: vec![64, 16],
                hidden_activation: Activation::Relu,
                seed: 0,
            },
            data,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.net.input_dim != self.data.d_in {
            return Err(Error::invalid("network input width differs from d_in"));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v:?} is not a finite number"))
    }
}

fn in_range(x: f64, ok: bool, what: &str) -> std::result::Result<f64, String> {
    if ok {
        Ok(x)
    } else {
        Err(format!("{x} out of range, must be {what}"))
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num::<usize>(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn set_augment(a: &mut AugmentConfig, field: &str, v: &str) -> std::result::Result<bool, String> {
    match field {
        "noise_std" => {
            a.noise_std = {
                let x = parse_real(v)?;
                in_range(x, x >= 0.0, ">= 0")?
            }
        }
        "mask_prob" => {
            a.mask_prob = {
                let x = parse_real(v)?;
                in_range(x, (0.0..1.0).contains(&x), "in [0, 1)")?
            }
        }
        "scale_low" => {
            a.scale_range.0 = {
                let x = parse_real(v)?;
                in_range(x, x > 0.0, "> 0")?
            }
        }
        "scale_high" => {
            a.scale_range.1 = {
                let x = parse_real(v)?;
                in_range(x, x > 0.0, "> 0")?
            }
        }
        "rotate_pairs" => a.rotate_pairs = parse_num(v)?,
        "max_angle" => a.max_angle = parse_real(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Applies one assignment.
fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let pos_real = |v: &str| -> std::result::Result<f64, String> {
        let x = parse_real(v)?;
        in_range(x, x > 0.0, "> 0")
    };
    match key {
        "out_dir" => {
            if v.is_empty() {
                return Err("empty path".into());
            }
            cfg.out_dir = PathBuf::from(v)
        }
        "run_id" => {
            if v.is_empty() || v.contains(',') {
                return Err("run_id must be non-empty and comma-free".into());
            }
            cfg.run_id = v.to_string()
        }
        "seed" => {
            let s = parse_num(v)?;
            cfg.train.seed = s;
            cfg.net.seed = s;
        }
        "data_path" => {
            cfg.data.path = if v.is_empty() {
                None
            } else {
                Some(PathBuf::from(v))
            }
        }
        "num_classes" => cfg.data.num_classes = parse_num(v)?,
        "per_class" => cfg.data.per_class = parse_num(v)?,
        "d_in" => {
            cfg.data.d_in = parse_num(v)?;
            cfg.net.input_dim = cfg.data.d_in;
        }
        "separation" => cfg.data.separation = pos_real(v)?,
        "within_std" => {
            cfg.data.within_std = {
                let x = parse_real(v)?;
                in_range(x, x >= 0.0, ">= 0")?
            }
        }
        "data_seed" => cfg.data.seed = parse_num(v)?,
        "test_fraction" => {
            cfg.data.test_fraction = {
                let x = parse_real(v)?;
                in_range(x, x > 0.0 && x < 1.0, "in (0, 1)")?
            }
        }
        "encoder_dims" => cfg.net.encoder_dims = parse_list(v)?,
        "projector_dims" => {
            let dims = parse_list(v)?;
            if dims.is_empty() {
                return Err("projector needs at least one layer".into());
            }
            cfg.net.projector_dims = dims
        }
        "hidden_activation" => {
            if v != "relu" {
                return Err(format!("unsupported activation {v:?}"));
            }
            cfg.net.hidden_activation = Activation::Relu
        }
        "epochs" => cfg.train.epochs = parse_num(v)?,
        "batch_size" => cfg.train.batch_size = parse_num(v)?,
        "lr_max" => cfg.train.lr_max = pos_real(v)?,
        "lr_start" => cfg.train.lr_start = pos_real(v)?,
        "lr_min" => cfg.train.lr_min = pos_real(v)?,
        "warmup_epochs" => cfg.train.warmup_epochs = parse_num(v)?,
        "momentum" => {
            cfg.train.momentum = {
                let x = parse_real(v)?;
                in_range(x, (0.0..1.0).contains(&x), "in [0, 1)")?
            }
        }
        "weight_decay" => {
            cfg.train.weight_decay = {
                let x = parse_real(v)?;
                in_range(x, x >= 0.0, ">= 0")?
            }
        }
        "lambda" => {
            cfg.train.forgetting = {
                let x = parse_real(v)?;
                in_range(x, (0.0..1.0).contains(&x), "in [0, 1)")?
            }
        }
        "eps" => cfg.train.loss.eps = pos_real(v)?,
        "alpha" => {
            cfg.train.loss.alpha = {
                let x = parse_real(v)?;
                in_range(x, x >= 0.0, ">= 0")?
            }
        }
        "dim_normalize" => cfg.train.loss.dim_normalize = parse_bool(v)?,
        "big_bang" => cfg.train.loss.big_bang = parse_bool(v)?,
        "grad_constant" => {
            cfg.train.loss.grad_constant = match v {
                "derived" => GradConstant::Derived,
                "as_printed" => GradConstant::AsPrinted,
                _ => return Err(format!("expected derived or as_printed, got {v:?}")),
            }
        }
        "probe_epochs" => cfg.probe.epochs = parse_num(v)?,
        "probe_lr" => cfg.probe.lr = pos_real(v)?,
        "probe_momentum" => {
            cfg.probe.momentum = {
                let x = parse_real(v)?;
                in_range(x, (0.0..1.0).contains(&x), "in [0, 1)")?
            }
        }
        "probe_every" => cfg.probe.every = parse_num(v)?,
        "bench_dims" => cfg.bench.dims = parse_list(v)?,
        "bench_batch" => cfg.bench.batch = parse_num(v)?,
        "bench_hidden" => cfg.bench.hidden = parse_num(v)?,
        "bench_steps" => cfg.bench.steps = parse_num(v)?,
        "gradcheck_cases" => cfg.gradcheck.cases = parse_num(v)?,
        "gradcheck_seed" => cfg.gradcheck.seed = parse_num(v)?,
        "gradcheck_step" => cfg.gradcheck.step = pos_real(v)?,
        _ => {
            if let Some(field) = key.strip_prefix("aug2_") {
                if set_augment(&mut cfg.train.augment2, field, v)? {
                    return Ok(());
                }
            } else if let Some(field) = key.strip_prefix("aug_") {
                if set_augment(&mut cfg.train.augment1, field, v)? {
                    return Ok(());
                }
            }
            return Err(format!("unknown key {key:?}"));
        }
    }
    Ok(())
}

/// One `key = value` assignment with its source line (0 for command-line
/// overrides).
#[derive(Debug, Clone)]
struct Assignment {
    line: usize,
    key: String,
    value: String,
}

fn split_assignment(text: &str, line: usize) -> Result<Assignment> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config {
        line,
        msg: format!("expected key = value, got {text:?}"),
    })?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config {
            line,
            msg: "empty key".into(),
        });
    }
    Ok(Assignment {
        line,
        key: key.to_string(),
        value: v.trim().to_string(),
    })
}

/// Parses config text, then applies `overrides` (each `key=value`).
/// `out_dir` is required from one of the two sources.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut assignments = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            assignments.push(split_assignment(body, i + 1)?);
        }
    }
    for o in overrides {
        assignments.push(split_assignment(o, 0)?);
    }

    let mut cfg = RunConfig::with_out_dir("");
    let mut aug2: Vec<&Assignment> = Vec::new();
    let mut out_dir_seen = false;
    for a in &assignments {
        if a.key.starts_with("aug2_") {
            aug2.push(a);
            continue;
        }
        out_dir_seen |= a.key == "out_dir";
        apply(&mut cfg, &a.key, &a.value).map_err(|msg| Error::Config {
            line: a.line,
            msg: format!("{}: {msg}", a.key),
        })?;
    }
    // the second branch starts from the first branch's settings
    cfg.train.augment2 = cfg.train.augment1.clone();
    for a in aug2 {
        apply(&mut cfg, &a.key, &a.value).map_err(|msg| Error::Config {
            line: a.line,
            msg: format!("{}: {msg}", a.key),
        })?;
    }
    if !out_dir_seen {
        return Err(Error::Config {
            line: 0,
            msg: "missing required key out_dir".into(),
        });
    }
    cfg.validate().map_err(|e| Error::Config {
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(cfg)
}

/// Reads an optional config file and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

fn join(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Renders every setting; parsing the result yields an equal config.
pub fn dump_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("out_dir", cfg.out_dir.display().to_string());
    kv("run_id", cfg.run_id.clone());
    kv("seed", cfg.train.seed.to_string());
    if let Some(p) = &cfg.data.path {
        kv("data_path", p.display().to_string());
    }
    kv("num_classes", cfg.data.num_classes.to_string());
    kv("per_class", cfg.data.per_class.to_string());
    kv("d_in", cfg.data.d_in.to_string());
    kv("separation", cfg.data.separation.to_string());
    kv("within_std", cfg.data.within_std.to_string());
    kv("data_seed", cfg.data.seed.to_string());
    kv("test_fraction", cfg.data.test_fraction.to_string());
    kv("encoder_dims", join(&cfg.net.encoder_dims));
    kv("projector_dims", join(&cfg.net.projector_dims));
    kv("hidden_activation", "relu".into());
    let t = &cfg.train;
    kv("epochs", t.epochs.to_string());
    kv("batch_size", t.batch_size.to_string());
    kv("lr_max", t.lr_max.to_string());
    kv("lr_start", t.lr_start.to_string());
    kv("lr_min", t.lr_min.to_string());
    kv("warmup_epochs", t.warmup_epochs.to_string());
    kv("momentum", t.momentum.to_string());
    kv("weight_decay", t.weight_decay.to_string());
    kv("lambda", t.forgetting.to_string());
    kv("eps", t.loss.eps.to_string());
    kv("alpha", t.loss.alpha.to_string());
    kv("dim_normalize", t.loss.dim_normalize.to_string());
    kv("big_bang", t.loss.big_bang.to_string());
    kv(
        "grad_constant",
        match t.loss.grad_constant {
            GradConstant::Derived => "derived",
            GradConstant::AsPrinted => "as_printed",
        }
        .into(),
    );
    for (prefix, a) in [("aug_", &t.augment1), ("aug2_", &t.augment2)] {
        kv(&format!("{prefix}noise_std"), a.noise_std.to_string());
        kv(&format!("{prefix}mask_prob"), a.mask_prob.to_string());
        kv(&format!("{prefix}scale_low"), a.scale_range.0.to_string());
        kv(&format!("{prefix}scale_high"), a.scale_range.1.to_string());
        kv(&format!("{prefix}rotate_pairs"), a.rotate_pairs.to_string());
        kv(&format!("{prefix}max_angle"), a.max_angle.to_string());
    }
    kv("probe_epochs", cfg.probe.epochs.to_string());
    kv("probe_lr", cfg.probe.lr.to_string());
    kv("probe_momentum", cfg.probe.momentum.to_string());
    kv("probe_every", cfg.probe.every.to_string());
    kv("bench_dims", join(&cfg.bench.dims));
    kv("bench_batch", cfg.bench.batch.to_string());
    kv("bench_hidden", cfg.bench.hidden.to_string());
    kv("bench_steps", cfg.bench.steps.to_string());
    kv("gradcheck_cases", cfg.gradcheck.cases.to_string());
    kv("gradcheck_seed", cfg.gradcheck.seed.to_string());
    kv("gradcheck_step", cfg.gradcheck.step.to_string());
    s
}

/// Process exit code for an error: 1 usage/config, 2 numerical, 3 IO.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotPositiveDefinite { .. } | Error::NonFinite(_) => 2,
        Error::Io(_) | Error::Checkpoint(_) | Error::Parse(_) => 3,
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Config { .. } => 1,
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.cimx";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_TRACE_FILE: &str = "probe_trace.csv";
pub const DATA_FILE: &str = "data.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const BENCH_FILE: &str = "bench_logdet.csv";

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

/// The configured dataset: the table at `data_path`, or generated blobs.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = match &cfg.data.path {
        Some(p) => load_table(p)?,
        None => gen_blobs(
            cfg.data.num_classes,
            cfg.data.per_class,
            cfg.data.d_in,
            cfg.data.separation,
            cfg.data.within_std,
            cfg.data.seed,
        )?,
    };
    if d.dim() != cfg.data.d_in {
        return Err(Error::invalid(format!(
            "dataset has {} features, d_in is {}",
            d.dim(),
            cfg.data.d_in
        )));
    }
    Ok(d)
}

/// `(train, test)` split of the configured dataset.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    load_dataset(cfg)?.split(cfg.data.test_fraction, cfg.data.seed)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let d = gen_blobs(
        cfg.data.num_classes,
        cfg.data.per_class,
        cfg.data.d_in,
        cfg.data.separation,
        cfg.data.within_std,
        cfg.data.seed,
    )?;
    let path = out_path(cfg, DATA_FILE)?;
    write_table(&d, &path)?;
    Ok(path)
}

/// One intermediate probe taken during pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub epoch: usize,
    pub ldmi_tracked: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub params: MlpParams,
    pub state: CovarianceState,
    pub metrics: Vec<EpochMetrics>,
    pub probes: Vec<ProbePoint>,
    pub checkpoint: PathBuf,
}

impl PretrainReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(m) = self.metrics.last() {
            let _ = writeln!(
                s,
                "epochs={} loss={:.6} ldmi_tracked={:.4} min_eig={:.4e} effective_rank={:.3}",
                self.metrics.len(),
                m.total_loss,
                m.ldmi_tracked,
                m.min_eig,
                m.effective_rank
            );
        }
        for p in &self.probes {
            let _ = writeln!(
                s,
                "probe epoch={} ldmi_tracked={:.4} accuracy={:.4}",
                p.epoch, p.ldmi_tracked, p.accuracy
            );
        }
        let _ = writeln!(s, "checkpoint={}", self.checkpoint.display());
        s
    }
}

/// Trains a linear probe on the train split's features and scores it on the
/// test split.
pub fn probe_params(
    cfg: &RunConfig,
    params: &MlpParams,
    train: &Dataset,
    test: &Dataset,
) -> Result<f64> {
    let etr = embed(params, train)?;
    let ete = embed(params, test)?;
    let probe = probe_train(
        &etr,
        train.labels(),
        cfg.probe.epochs,
        cfg.probe.lr,
        cfg.probe.momentum,
        cfg.train.seed,
    )?;
    probe_accuracy(&probe, &ete, test.labels())
}

/// Pretrains on the train split, probing every `probe_every` epochs, and
/// writes the checkpoint, metrics, probe trace and effective config.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let (train, test) = load_split(cfg)?;
    let config_path = out_path(cfg, CONFIG_FILE)?;
    fs::write(&config_path, dump_config(cfg))?;
    let mut probes = Vec::new();
    let every = cfg.probe.every;
    let outcome = pretrain_observed(&train, &cfg.net, &cfg.train, |m, params, _| {
        if every > 0 && (m.epoch + 1) % every == 0 {
            let accuracy = probe_params(cfg, params, &train, &test)?;
            log::info!("epoch {}: probe accuracy {accuracy:.4}", m.epoch + 1);
            probes.push(ProbePoint {
                epoch: m.epoch + 1,
                ldmi_tracked: m.ldmi_tracked,
                accuracy,
            });
        }
        Ok(())
    })?;
    let checkpoint = out_path(cfg, CHECKPOINT_FILE)?;
    save_checkpoint(&outcome.params, &checkpoint)?;
    append_metrics(out_path(cfg, METRICS_FILE)?, &outcome.metrics)?;
    if !probes.is_empty() {
        let mut text = String::from("run_id,epoch,ldmi_tracked,probe_accuracy\n");
        for p in &probes {
            let _ = writeln!(
                text,
                "{},{},{:e},{}",
                cfg.run_id, p.epoch, p.ldmi_tracked, p.accuracy
            );
        }
        fs::write(out_path(cfg, PROBE_TRACE_FILE)?, text)?;
    }
    Ok(PretrainReport {
        params: outcome.params,
        state: outcome.state,
        metrics: outcome.metrics,
        probes,
        checkpoint,
    })
}

pub fn load_trained(cfg: &RunConfig) -> Result<MlpParams> {
    let params = load_checkpoint(cfg.out_dir.join(CHECKPOINT_FILE), cfg.net.encoder_layers())?;
    let expected = cfg.net.layer_shapes();
    let found: Vec<(usize, usize)> = params.layers().iter().map(|l| l.shape()).collect();
    if expected != found {
        return Err(Error::Checkpoint(format!(
            "layer shapes {found:?} do not match the config {expected:?}"
        )));
    }
    Ok(params)
}

/// Tracks the projector statistics of frozen `params` over one augmented
/// pass of `dataset`, starting from the initial state.
pub fn track_statistics(
    cfg: &RunConfig,
    params: &MlpParams,
    dataset: &Dataset,
) -> Result<CovarianceState> {
    let n = cfg.train.batch_size.min(dataset.len());
    let mut state = CovarianceState::init(params.output_dim(), cfg.train.forgetting)?;
    for indices in batch_indices(dataset.len(), n, cfg.train.seed, true)? {
        let (x1, x2) = augmented_batch(dataset, &indices, &cfg.train, 0)?;
        let (_, z1, _) = forward(params, &x1)?;
        let (_, z2, _) = forward(params, &x2)?;
        state = state.batch_update(&Batch::new(z1, z2)?)?.0;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub min_eig: f64,
    pub effective_rank: f64,
}

/// Probes the saved checkpoint and appends a line to the probe results.
pub fn cmd_probe(cfg: &RunConfig) -> Result<ProbeReport> {
    let params = load_trained(cfg)?;
    let (train, test) = load_split(cfg)?;
    let accuracy = probe_params(cfg, &params, &train, &test)?;
    let spec = spectrum_report(track_statistics(cfg, &params, &train)?.r1())?;
    append_probe_result(
        out_path(cfg, PROBE_FILE)?,
        &cfg.run_id,
        accuracy,
        spec.min,
        spec.effective_rank,
    )?;
    Ok(ProbeReport {
        accuracy,
        min_eig: spec.min,
        effective_rank: spec.effective_rank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSummary {
    pub r1: SpectrumReport,
    pub r2: SpectrumReport,
    pub ldmi_tracked: f64,
}

impl SpectrumSummary {
    pub fn render(&self) -> String {
        let mut s = String::from("index,eig_r1,eig_r2\n");
        for (i, (a, b)) in self
            .r1
            .eigenvalues
            .iter()
            .zip(&self.r2.eigenvalues)
            .enumerate()
        {
            let _ = writeln!(s, "{i},{a:e},{b:e}");
        }
        s
    }
}

/// Sorted eigenvalues of the tracked auto-covariances of the saved network.
pub fn cmd_spectrum(cfg: &RunConfig) -> Result<SpectrumSummary> {
    let params = load_trained(cfg)?;
    let (train, _) = load_split(cfg)?;
    let state = track_statistics(cfg, &params, &train)?;
    let summary = SpectrumSummary {
        r1: spectrum_report(state.r1())?,
        r2: spectrum_report(state.r2())?,
        ldmi_tracked: tracked_ldmi(&state, cfg.train.loss.eps)?,
    };
    fs::write(out_path(cfg, SPECTRUM_FILE)?, summary.render())?;
    Ok(summary)
}

/// Relative-error threshold for the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckCase {
    pub dim: usize,
    pub n: usize,
    pub lambda: f64,
    /// Analytic vs frozen-mean finite differences.
    pub rel_err: f64,
    /// Analytic vs finite differences that also move the means.
    pub full_coupling_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut s = String::from("case,P,N,lambda,rel_err,full_coupling_gap\n");
        for (i, c) in self.cases.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{:.4},{:.3e},{:.3e}",
                c.dim, c.n, c.lambda, c.rel_err, c.full_coupling_gap
            );
        }
        let _ = writeln!(s, "max_rel_err={:.3e}", self.max_rel_err);
        let _ = writeln!(s, "{}", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

fn unit_columns(p: usize, n: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::new(
        p,
        n,
        (0..p * n)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect(),
    )
    .expect("finite gaussian samples");
    for j in 0..n {
        let norm = m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..p {
            m[(i, j)] /= norm;
        }
    }
    m
}

/// Compares [`grad_z`] with central differences on random cases. Cases
/// cycle through `P in {4, 8, 16}` and `N in {8, 32}` with a warm tracker
/// state and `lambda ~ U(0.1, 0.9)`; the batches are unit-norm columns
/// like real projector outputs.
pub fn gradcheck(cases: usize, seed: u64, step: f64, loss: &LossParams) -> Result<GradcheckReport> {
    const DIMS: [usize; 3] = [4, 8, 16];
    const WIDTHS: [usize; 2] = [8, 32];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for k in 0..cases {
        let p = DIMS[k % 3];
        let n = WIDTHS[(k / 3) % 2];
        let lambda = rng.random_range(0.1..0.9);
        let mut state = CovarianceState::init(p, lambda)?;
        for _ in 0..3 {
            let b = Batch::new(
                unit_columns(p, 4 * p, &mut rng),
                unit_columns(p, 4 * p, &mut rng),
            )?;
            state = state.batch_update(&b)?.0;
        }
        let z1 = unit_columns(p, n, &mut rng);
        let z2 = z1.lincomb(1.0, &unit_columns(p, n, &mut rng), 0.3);
        let batch = Batch::new(z1, z2)?;
        let analytic = grad_z(&state, &batch, loss)?.total();
        let fd = grad_z_fd(&state, &batch, loss, step)?;
        let full = grad_z_fd_with(&state, &batch, loss, step, MeanCoupling::Full)?;
        out.push(GradcheckCase {
            dim: p,
            n,
            lambda,
            rel_err: max_relative_error((&analytic.0, &analytic.1), (&fd.0, &fd.1)),
            full_coupling_gap: max_relative_error((&analytic.0, &analytic.1), (&full.0, &full.1)),
        });
    }
    let max_rel_err = out.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_err <= GRADCHECK_TOLERANCE,
        cases: out,
        max_rel_err,
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let report = gradcheck(
        cfg.gradcheck.cases,
        cfg.gradcheck.seed,
        cfg.gradcheck.step,
        &cfg.train.loss,
    )?;
    fs::write(out_path(cfg, GRADCHECK_FILE)?, report.render())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub batch: usize,
    /// Mean over the timed steps.
    pub step_secs: f64,
    pub logdet_secs: f64,
}

impl BenchRow {
    /// Fraction of a training step spent in factorization, log-determinant
    /// and solves.
    pub fn ratio(&self) -> f64 {
        self.logdet_secs / self.step_secs
    }
}

pub fn render_bench(rows: &[BenchRow]) -> String {
    let mut s = String::from("P,batch,step_ms,logdet_ms,ratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.4}",
            r.dim,
            r.batch,
            r.step_secs * 1e3,
            r.logdet_secs * 1e3,
            r.ratio()
        );
    }
    s
}

/// Times full training steps of a wide MLP against the factorization work
/// inside them, for each projector width in `bench_dims`.
pub fn cmd_bench_logdet(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    if b.steps == 0 || b.batch == 0 {
        return Err(Error::invalid("bench_steps and bench_batch must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut rows = Vec::new();
    for &p in &b.dims {
        let net = NetConfig {
            input_dim: cfg.data.d_in,
            encoder_dims: vec![b.hidden, b.hidden],
            projector_dims: vec![b.hidden, p],
            hidden_activation: Activation::Relu,
            seed: cfg.net.seed,
        };
        let mut params = init_params(&net)?;
        let mut velocity = params.zeros_like();
        let mut state = CovarianceState::init(p, cfg.train.forgetting)?;
        let eps = cfg.train.loss.eps;
        let (mut step_secs, mut logdet_secs) = (0.0, 0.0);
        for _ in 0..b.steps {
            let gauss = |rng: &mut ChaCha8Rng| -> Matrix {
                let d = cfg.data.d_in;
                Matrix::from_vec_unchecked(
                    d,
                    b.batch,
                    (0..d * b.batch)
                        .map(|_| StandardNormal.sample(&mut *rng))
                        .collect(),
                )
            };
            let (x1, x2) = (gauss(&mut rng), gauss(&mut rng));

            let t = Instant::now();
            let (_, z1, c1) = forward(&params, &x1)?;
            let (_, z2, c2) = forward(&params, &x2)?;
            let out = loss_step_with(
                &state,
                &Batch::new(z1.clone(), z2.clone())?,
                &cfg.train.loss,
                false,
            )?;
            let (g1, g2) = out.grads.total();
            let (mut grads, _) = backward(&params, &c1, &g1)?;
            grads.accumulate(&backward(&params, &c2, &g2)?.0)?;
            let (np, nv) = sgd_step(
                &params,
                &grads,
                &velocity,
                1e-3,
                cfg.train.momentum,
                cfg.train.weight_decay,
            )?;
            step_secs += t.elapsed().as_secs_f64();

            // the same factorization work in isolation
            let z1t = center(&z1, out.state.mu1())?;
            let z2t = center(&z2, out.state.mu2())?;
            let t = Instant::now();
            for (r, zt) in [(out.state.r1(), &z1t), (out.state.r2(), &z2t)] {
                let c = Cholesky::factor(&add_scaled_identity(r, eps)?)?;
                std::hint::black_box(c.logdet());
                std::hint::black_box(c.solve(zt)?);
            }
            logdet_secs += t.elapsed().as_secs_f64();

            params = np;
            velocity = nv;
            state = out.state;
        }
        rows.push(BenchRow {
            dim: p,
            batch: b.batch,
            step_secs: step_secs / b.steps as f64,
            logdet_secs: logdet_secs / b.steps as f64,
        });
    }
    fs::write(out_path(cfg, BENCH_FILE)?, render_bench(&rows))?;
    Ok(rows)
}

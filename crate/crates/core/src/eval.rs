//! Linear evaluation on frozen encoder features and spectrum diagnostics.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Matrix, Vector};
use crate::net::{encode, MlpParams};
use crate::train::effective_rank;

/// Mini-batch size used by [`probe_train`].
pub const PROBE_BATCH: usize = 256;

/// Encoder features `F x M` of every sample, without augmentation.
pub fn embed(params: &MlpParams, dataset: &Dataset) -> Result<Matrix> {
    encode(params, dataset.features())
}

/// Multinomial logistic regression on `F`-dimensional features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub weight: Matrix,
    pub bias: Vector,
}

impl ProbeParams {
    pub fn zeros(num_classes: usize, features: usize) -> Self {
        Self {
            weight: Matrix::zeros(num_classes, features),
            bias: Vector::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    /// Logits `K x M`.
    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        let mut out = self.weight.matmul(embeddings)?;
        let m = out.cols();
        for (row, b) in out.data_mut().chunks_mut(m.max(1)).zip(self.bias.iter()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Predicted class per column, ties going to the lowest index.
    pub fn predict(&self, embeddings: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(embeddings)?;
        Ok((0..logits.cols())
            .map(|j| {
                let mut best = 0;
                for k in 1..logits.rows() {
                    if logits[(k, j)] > logits[(best, j)] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

fn check_labels(embeddings: &Matrix, labels: &[usize]) -> Result<usize> {
    if labels.len() != embeddings.cols() {
        return Err(Error::shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.cols()
        )));
    }
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("probe needs at least two distinct classes"));
    }
    Ok(k)
}

/// Column-wise softmax in place.
fn softmax_columns(logits: &mut Matrix) {
    let (k, m) = logits.shape();
    for j in 0..m {
        let max = (0..k)
            .map(|i| logits[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..k {
            let e = (logits[(i, j)] - max).exp();
            logits[(i, j)] = e;
            sum += e;
        }
        for i in 0..k {
            logits[(i, j)] /= sum;
        }
    }
}

/// Mean softmax cross-entropy of the probe.
pub fn probe_loss(probe: &ProbeParams, embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut p = probe.logits(embeddings)?;
    softmax_columns(&mut p);
    let m = labels.len();
    if m != p.cols() {
        return Err(Error::shape("label count does not match embeddings"));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            if l < p.rows() {
                -p[(l, j)].max(f64::MIN_POSITIVE).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum();
    Ok(total / m as f64)
}

/// Trains a zero-initialized softmax classifier with mini-batch SGD
/// (momentum, no weight decay) and a cosine schedule from `lr` down to
/// `lr / 100`.
pub fn probe_train(
    embeddings: &Matrix,
    labels: &[usize],
    epochs: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<ProbeParams> {
    Ok(probe_train_traced(embeddings, labels, epochs, lr, momentum, seed)?.0)
}

/// As [`probe_train`], also returning the full-data loss after each epoch.
pub fn probe_train_traced(
    embeddings: &Matrix,
    labels: &[usize],
    epochs: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<(ProbeParams, Vec<f64>)> {
    let k = check_labels(embeddings, labels)?;
    if !(lr > 0.0) {
        return Err(Error::invalid(format!(
            "probe learning rate must be > 0, got {lr}"
        )));
    }
    let (f, m) = embeddings.shape();
    let mut probe = ProbeParams::zeros(k, f);
    let mut vw = Matrix::zeros(k, f);
    let mut vb = vec![0.0; k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let batch = PROBE_BATCH.min(m);
    let per_epoch = m.div_ceil(batch);
    let total = (per_epoch * epochs).max(1);
    let lr_min = lr * 0.01;
    let mut step = 0;
    let mut history = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let progress = step as f64 / (total - 1).max(1) as f64;
            let rate =
                lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
            let x = embeddings.select_columns(chunk);
            let mut g = probe.logits(&x)?;
            softmax_columns(&mut g);
            for (j, &idx) in chunk.iter().enumerate() {
                g[(labels[idx], j)] -= 1.0;
            }
            let inv = 1.0 / chunk.len() as f64;
            let gw = g.matmul_transb(&x)?.scale(inv);
            let gb: Vec<f64> = (0..k).map(|i| g.row(i).iter().sum::<f64>() * inv).collect();
            vw = vw.lincomb(momentum, &gw, 1.0);
            probe.weight = probe.weight.lincomb(1.0, &vw, -rate);
            for i in 0..k {
                vb[i] = momentum * vb[i] + gb[i];
                probe.bias.as_mut_slice()[i] -= rate * vb[i];
            }
            step += 1;
        }
        history.push(probe_loss(&probe, embeddings, labels)?);
    }
    Ok((probe, history))
}

/// Fraction of columns whose argmax logit equals the label.
pub fn probe_accuracy(probe: &ProbeParams, embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let pred = probe.predict(embeddings)?;
    if pred.len() != labels.len() {
        return Err(Error::shape("label count does not match embeddings"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub effective_rank: f64,
}

pub fn spectrum_report(r: &Matrix) -> Result<SpectrumReport> {
    let eig = sym_eigenvalues(r)?.into_vec();
    if eig.is_empty() {
        return Err(Error::shape("empty matrix"));
    }
    Ok(SpectrumReport {
        min: *eig.last().expect("non-empty"),
        max: eig[0],
        effective_rank: effective_rank(&eig),
        eigenvalues: eig,
    })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "spearman needs two equal-length series of length >= 2",
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(cov / (va * vb).sqrt())
}

pub const PROBE_HEADER: &str = "run_id,probe_accuracy,min_eig,effective_rank";

/// Appends one probe result line, writing the header for a new file.
pub fn append_probe_result(
    path: impl AsRef<Path>,
    run_id: &str,
    accuracy: f64,
    min_eig: f64,
    effective_rank: f64,
) -> Result<()> {
    if run_id.contains(',') || run_id.contains('\n') {
        return Err(Error::invalid("run_id may not contain commas or newlines"));
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{PROBE_HEADER}")?;
    }
    writeln!(f, "{run_id},{accuracy},{min_eig:e},{effective_rank:e}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::net::{init_params, Activation, Layer, NetConfig};
    use rand::Rng;

    fn net() -> NetConfig {
        NetConfig {
            input_dim: 4,
            encoder_dims: vec![8, 6],
            projector_dims: vec![3],
            hidden_activation: Activation::Relu,
            seed: 1,
        }
    }

    #[test]
    fn embedding_is_deterministic_with_encoder_width() {
        let p = init_params(&net()).unwrap();
        let d = gen_blobs(2, 5, 4, 3.0, 1.0, 0).unwrap();
        let a = embed(&p, &d).unwrap();
        assert_eq!(a.shape(), (6, 10));
        assert_eq!(a, embed(&p, &d).unwrap());
    }

    #[test]
    fn zero_input_propagates_biases() {
        let mut p = init_params(&net()).unwrap();
        for (k, l) in p.layers_mut().iter_mut().enumerate() {
            l.bias = Vector::new(vec![0.1 * (k + 1) as f64; l.bias.len()]).unwrap();
        }
        let d = Dataset::new(Matrix::zeros(4, 3), vec![0, 1, 0], 2).unwrap();
        let e = embed(&p, &d).unwrap();
        for j in 1..3 {
            assert_eq!(e.column(j), e.column(0));
        }
        // reference: relu(W2 relu(b1) + b2)
        let l: &[Layer] = p.layers();
        let h1: Vec<f64> = l[0].bias.iter().map(|v| v.max(0.0)).collect();
        let h2: Vec<f64> = (0..6)
            .map(|i| {
                ((0..8).map(|c| l[1].weight[(i, c)] * h1[c]).sum::<f64>() + l[1].bias[i]).max(0.0)
            })
            .collect();
        for (a, b) in e.column(0).iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_toy_is_learned_exactly() {
        let x = Matrix::from_columns(&[
            &[1.0, 2.0],
            &[2.0, 1.5],
            &[1.5, 3.0],
            &[-1.0, -2.0],
            &[-2.0, -0.5],
            &[-0.5, -1.5],
        ])
        .unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let probe = probe_train(&x, &y, 100, 0.2, 0.9, 0).unwrap();
        assert_eq!(probe_accuracy(&probe, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_gives_chance_on_balanced_data() {
        let d = gen_blobs(4, 10, 3, 3.0, 1.0, 0).unwrap();
        let probe = probe_train(d.features(), d.labels(), 0, 0.2, 0.9, 0).unwrap();
        assert_eq!(probe, ProbeParams::zeros(4, 3));
        assert_eq!(
            probe_accuracy(&probe, d.features(), d.labels()).unwrap(),
            0.25
        );
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::zeros(2, 3);
        assert!(probe_train(&x, &[1, 1, 1], 5, 0.1, 0.9, 0).is_err());
        assert!(probe_train(&x, &[0, 1], 5, 0.1, 0.9, 0).is_err());
    }

    #[test]
    fn probe_loss_decreases_on_blob_embeddings() {
        let d = gen_blobs(4, 100, 8, 4.0, 1.0, 3).unwrap();
        let p = init_params(&NetConfig {
            input_dim: 8,
            encoder_dims: vec![32],
            projector_dims: vec![4],
            ..net()
        })
        .unwrap();
        let e = embed(&p, &d).unwrap();
        let (probe, history) = probe_train_traced(&e, d.labels(), 10, 0.05, 0.9, 1).unwrap();
        let start = probe_loss(&ProbeParams::zeros(4, 32), &e, d.labels()).unwrap();
        assert!((start - 4f64.ln()).abs() < 1e-12);
        assert!(history[0] < start);
        assert!(history[9] < history[0]);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{history:?}");
        }
        assert!(probe_accuracy(&probe, &e, d.labels()).unwrap() > 0.9);
        assert_eq!(
            probe,
            probe_train(&e, d.labels(), 10, 0.05, 0.9, 1).unwrap()
        );
    }

    #[test]
    fn accuracy_cases() {
        let x = Matrix::identity(3);
        let perfect = ProbeParams {
            weight: Matrix::identity(3),
            bias: Vector::zeros(3),
        };
        assert_eq!(probe_accuracy(&perfect, &x, &[0, 1, 2]).unwrap(), 1.0);
        // constant logits tie everywhere and resolve to class 0
        let constant = ProbeParams::zeros(3, 3);
        let y: Vec<usize> = (0..30).map(|j| j % 3).collect();
        assert!(
            (probe_accuracy(&constant, &Matrix::zeros(3, 30), &y).unwrap() - 1.0 / 3.0).abs()
                < 1e-15
        );
        // scaling logits keeps the argmax
        let scaled = ProbeParams {
            weight: perfect.weight.scale(7.5),
            bias: Vector::zeros(3),
        };
        assert_eq!(scaled.predict(&x).unwrap(), perfect.predict(&x).unwrap());
    }

    #[test]
    fn random_probe_is_near_chance() {
        let d = gen_blobs(4, 500, 6, 5.0, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 50;
        let mut mean = 0.0;
        for _ in 0..trials {
            let w: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe = ProbeParams {
                weight: Matrix::new(4, 6, w).unwrap(),
                bias: Vector::zeros(4),
            };
            // random label permutation breaks any alignment between probe and classes
            let mut perm = vec![0, 1, 2, 3];
            perm.shuffle(&mut rng);
            let labels: Vec<usize> = d.labels().iter().map(|&l| perm[l]).collect();
            mean += probe_accuracy(&probe, d.features(), &labels).unwrap() / trials as f64;
        }
        // per-trial accuracy lies in [0, 1]; 50 trials give sd <= 0.5 / sqrt(50) ~ 0.07
        assert!((mean - 0.25).abs() < 0.15, "{mean}");
    }

    #[test]
    fn spectrum_cases() {
        let r = spectrum_report(&Matrix::identity(5)).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0; 5]);
        assert!((r.effective_rank - 5.0).abs() < 1e-12);
        let r = spectrum_report(&Matrix::from_diag(&[1.0, 0.0, 0.0])).unwrap();
        assert!((r.effective_rank - 1.0).abs() < 1e-12);
        assert!(spectrum_report(&Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap()).is_err());

        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 1.0]]).unwrap();
        let rep = spectrum_report(&a).unwrap();
        let sum: f64 = rep.eigenvalues.iter().sum();
        assert!((sum - a.trace()).abs() <= 1e-9 * a.trace());
        assert_eq!((rep.max, rep.min), (rep.eigenvalues[0], rep.eigenvalues[2]));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ties: ranks [1.5, 1.5, 3] vs [1, 2, 3]
        let s = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((s - 0.75f64.sqrt() * 1.0).abs() < 1e-12, "{s}");
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap().is_nan());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn probe_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        append_probe_result(&path, "run-a", 0.97, 0.01, 9.5).unwrap();
        append_probe_result(&path, "run-b", 0.5, 0.02, 3.0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), PROBE_HEADER);
        assert_eq!(text.lines().count(), 3);
        assert!(append_probe_result(&path, "a,b", 0.5, 0.0, 1.0).is_err());
    }
}

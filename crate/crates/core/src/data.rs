//! Synthetic augmentable datasets and a flat CSV-like table format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Labelled feature vectors stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(Error::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.cols()
            )));
        }
        if num_classes == 0 || labels.len() < num_classes {
            return Err(Error::invalid("need at least one sample per class slot"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn sample(&self, j: usize) -> Vector {
        Vector::from_vec_unchecked(self.features.column(j))
    }

    /// Subset of columns in the given order. Keeps `num_classes`.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range")));
        }
        Dataset::new(
            self.features.select_columns(indices),
            indices.iter().map(|&j| self.labels[j]).collect(),
            self.num_classes,
        )
    }

    /// Stratified split: each class contributes `round(test_fraction * count)`
    /// samples to the test part. Returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "test fraction must be in (0,1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&j| self.labels[j] == c).collect();
            idx.shuffle(&mut rng);
            let k = (test_fraction * idx.len() as f64).round() as usize;
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Independent RNG for a `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const MAX_ANCHOR_TRIES: usize = 10_000;

/// Gaussian blobs around class anchors at distance `separation` from the
/// origin, with pairwise anchor angles of at least 60 degrees. Samples are
/// grouped by class.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    within_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(separation > 0.0)
        || !(within_std >= 0.0)
        || !within_std.is_finite()
        || !separation.is_finite()
    {
        return Err(Error::invalid("separation must be > 0 and within_std >= 0"));
    }
    if num_classes == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::invalid(
            "num_classes, per_class and d_in must be >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut tries = 0;
    while anchors.len() < num_classes {
        if tries == MAX_ANCHOR_TRIES {
            return Err(Error::invalid(format!(
                "could not place {num_classes} anchors at >= 60 degrees in {d_in} dimensions"
            )));
        }
        tries += 1;
        let u = random_unit(d_in, &mut rng);
        let ok = anchors
            .iter()
            .all(|a| a.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>() <= 0.5);
        if ok {
            anchors.push(u);
        }
    }
    let m = num_classes * per_class;
    let mut features = Matrix::zeros(d_in, m);
    let mut labels = Vec::with_capacity(m);
    for (c, a) in anchors.iter().enumerate() {
        for s in 0..per_class {
            let j = c * per_class + s;
            for (i, &ai) in a.iter().enumerate() {
                features[(i, j)] = separation * ai + within_std * gaussian(&mut rng);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Reads comma-separated rows of reals whose last field is an integer label.
pub fn load_table(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_table(&fs::read_to_string(path)?)
}

pub fn parse_table(text: &str) -> Result<Dataset> {
    let mut columns: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let d = fields.len() - 1;
        if d == 0 {
            return Err(Error::Parse(format!(
                "line {}: need at least one feature and a label",
                lineno + 1
            )));
        }
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Parse(format!(
                    "line {}: expected {} features, found {d}",
                    lineno + 1,
                    expected
                )))
            }
            _ => {}
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: not a number: {f:?}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "line {}: non-finite value",
                    lineno + 1
                )));
            }
            columns.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label {:?}", lineno + 1, fields[d])))?;
        labels.push(label);
    }
    let d = dim.ok_or_else(|| Error::Parse("empty table".into()))?;
    let m = labels.len();
    // rows were read sample-major; transpose into D x M
    let features = Matrix::from_vec_unchecked(m, d, columns).transpose();
    let num_classes = labels.iter().max().map_or(0, |&l| l + 1);
    Dataset::new(features, labels, num_classes)
}

/// Writes one sample per line with 17 significant digits.
pub fn write_table(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(render_table(dataset).as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn render_table(dataset: &Dataset) -> String {
    let mut s = String::new();
    for j in 0..dataset.len() {
        for i in 0..dataset.dim() {
            s.push_str(&format!("{:.16e},", dataset.features[(i, j)]));
        }
        s.push_str(&dataset.labels[j].to_string());
        s.push('\n');
    }
    s
}

/// Feature-space augmentation for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
    pub rotate_pairs: usize,
    pub max_angle: f64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
            rotate_pairs: 0,
            max_angle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::invalid("mask_prob must be in [0, 1)"));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("scale_range must satisfy 0 < low <= high"));
        }
        if !self.max_angle.is_finite() {
            return Err(Error::invalid("max_angle must be finite"));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.25,
            mask_prob: 0.0,
            scale_range: (0.8, 1.2),
            rotate_pairs: 4,
            max_angle: 0.5,
        }
    }
}

/// Applies one random draw of `config` to `x`.
pub fn augment(x: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = x.to_vec();
    let d = v.len();
    if d >= 2 {
        for _ in 0..config.rotate_pairs {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let theta = if config.max_angle > 0.0 {
                rng.random_range(-config.max_angle..config.max_angle)
            } else {
                0.0
            };
            let (s, c) = theta.sin_cos();
            let (a, b) = (v[i], v[j]);
            v[i] = c * a - s * b;
            v[j] = s * a + c * b;
        }
    }
    let (lo, hi) = config.scale_range;
    if lo != hi {
        let scale = rng.random_range(lo..hi);
        v.iter_mut().for_each(|e| *e *= scale);
    } else if lo != 1.0 {
        v.iter_mut().for_each(|e| *e *= lo);
    }
    if config.mask_prob > 0.0 {
        for e in v.iter_mut() {
            if rng.random_bool(config.mask_prob) {
                *e = 0.0;
            }
        }
    }
    if config.noise_std > 0.0 {
        for e in v.iter_mut() {
            *e += config.noise_std * gaussian(rng);
        }
    }
    v
}

/// Two independent views of `x` under the same configuration.
pub fn augment_pair(x: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    augment_pair_asym(x, config, config, rng)
}

/// Two independent views with a separate configuration per branch.
pub fn augment_pair_asym(
    x: &[f64],
    config1: &AugmentConfig,
    config2: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let a = augment(x, config1, rng);
    let b = augment(x, config2, rng);
    (a, b)
}

/// Random permutation of `0..len` cut into consecutive batches of `n`.
pub fn batches(dataset: &Dataset, n: usize, seed: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    batch_indices(dataset.len(), n, seed, drop_last)
}

pub fn batch_indices(len: usize, n: usize, seed: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if n > len {
        return Err(Error::invalid(format!(
            "batch size {n} exceeds dataset size {len}"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(perm
        .chunks(n)
        .filter(|c| !drop_last || c.len() == n)
        .map(<[usize]>::to_vec)
        .collect())
}

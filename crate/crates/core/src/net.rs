//! Weight-shared MLP encoder + projector with hand-written backprop.
//!
//! Every layer is affine; all layers except the last apply ReLU. The last
//! projector layer is linear and its output is L2-normalized per column.
//! Both augmentation branches run through the same [`MlpParams`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Output widths of the encoder layers; the last is the feature dim F.
    pub encoder_dims: Vec<usize>,
    /// Output widths of the projector layers; the last is P.
    pub projector_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self
                .encoder_dims
                .iter()
                .chain(&self.projector_dims)
                .any(|&d| d == 0)
        {
            return Err(Error::invalid("all layer widths must be >= 1"));
        }
        if self.projector_dims.is_empty() {
            return Err(Error::invalid("projector needs at least one layer"));
        }
        Ok(())
    }

    /// `(out, in)` for every layer, encoder first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &d in self.encoder_dims.iter().chain(&self.projector_dims) {
            shapes.push((d, fan_in));
            fan_in = d;
        }
        shapes
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_dims.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        *self
            .projector_dims
            .last()
            .expect("validated config has a projector")
    }
}

/// One affine layer, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: Vector::zeros(out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }
}

/// Parameters of the whole stack. Also used to hold gradients and momentum
/// buffers, which have the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    encoder_layers: usize,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, encoder_layers: usize) -> Result<Self> {
        if encoder_layers >= layers.len() {
            return Err(Error::invalid(format!(
                "{encoder_layers} encoder layers leaves no projector in a {}-layer stack",
                layers.len()
            )));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].weight.cols() != pair[0].weight.rows() {
                return Err(Error::shape(format!(
                    "layer {} input does not match layer {k} output",
                    k + 1
                )));
            }
        }
        if layers.iter().any(|l| l.bias.len() != l.weight.rows()) {
            return Err(Error::shape("bias length does not match layer width"));
        }
        Ok(Self {
            layers,
            encoder_layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            encoder_layers: self.encoder_layers,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        if self.encoder_layers == 0 {
            self.input_dim()
        } else {
            self.layers[self.encoder_layers - 1].weight.rows()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    fn same_layout(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += other`, used to accumulate the two branches' gradients.
    pub fn accumulate(&mut self, other: &MlpParams) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("parameter layouts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.as_mut_slice().iter_mut().zip(b.bias.iter()) {
                *x += y;
            }
        }
        Ok(())
    }

    /// All values, weights then bias per layer.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub(crate) fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            let Layer { weight, bias } = l;
            weight
                .data_mut()
                .iter_mut()
                .chain(bias.as_mut_slice().iter_mut())
        })
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

/// He-style uniform init: weights in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`,
/// zero biases.
pub fn init_params(config: &NetConfig) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| {
            let bound = (6.0 / inp as f64).sqrt();
            let w = (0..out * inp)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                weight: Matrix::from_vec_unchecked(out, inp, w),
                bias: Vector::zeros(out),
            }
        })
        .collect();
    MlpParams::new(layers, config.encoder_layers())
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardCache {
    /// Projector output before normalization.
    pub fn z_pre(&self) -> &Matrix {
        self.pre.last().expect("non-empty")
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }
}

fn affine(layer: &Layer, x: &Matrix) -> Result<Matrix> {
    let mut out = layer.weight.matmul(x)?;
    let n = out.cols();
    for (i, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
        let b = layer.bias[i];
        for v in row {
            *v += b;
        }
    }
    Ok(out)
}

fn relu(m: &Matrix) -> Matrix {
    Matrix::from_vec_unchecked(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Runs the encoder only, returning features `F x N`.
pub fn encode(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let mut a = x.clone();
    for layer in &params.layers[..params.encoder_layers] {
        a = relu(&affine(layer, &a)?);
    }
    Ok(a)
}

fn check_input(params: &MlpParams, x: &Matrix) -> Result<()> {
    if x.rows() != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} rows, network expects {}",
            x.rows(),
            params.input_dim()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::shape("empty input batch"));
    }
    Ok(())
}

/// Forward pass on a batch `D_in x N`. Returns encoder features `y`,
/// normalized projector outputs `z` and the cache for [`backward`].
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, Matrix, ForwardCache)> {
    check_input(params, x)?;
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for (k, layer) in params.layers.iter().enumerate() {
        let input = if k == 0 { x } else { &post[k - 1] };
        let p = affine(layer, input)?;
        let a = if k == last { p.clone() } else { relu(&p) };
        pre.push(p);
        post.push(a);
    }
    let y = if params.encoder_layers == 0 {
        x.clone()
    } else {
        post[params.encoder_layers - 1].clone()
    };
    let z = l2_normalize(pre.last().expect("non-empty"))?;
    Ok((
        y,
        z,
        ForwardCache {
            input: x.clone(),
            pre,
            post,
        },
    ))
}

/// Scales every column to unit Euclidean norm.
pub fn l2_normalize(z: &Matrix) -> Result<Matrix> {
    let norms = column_norms(z);
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::NonFinite(format!(
            "projector output column {j} has zero norm"
        )));
    }
    let mut out = z.clone();
    let n = z.cols();
    for row in out.data_mut().chunks_mut(n) {
        for (v, norm) in row.iter_mut().zip(&norms) {
            *v /= norm;
        }
    }
    Ok(out)
}

fn column_norms(z: &Matrix) -> Vec<f64> {
    let n = z.cols();
    let mut sq = vec![0.0; n];
    for row in z.data().chunks(n.max(1)) {
        for (s, v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Backward of column normalization: `(I - zh zh^T) g / ||z||` per column.
pub fn l2_normalize_backward(z_pre: &Matrix, g_out: &Matrix) -> Result<Matrix> {
    if z_pre.shape() != g_out.shape() {
        return Err(Error::shape(
            "gradient shape does not match normalized input",
        ));
    }
    let norms = column_norms(z_pre);
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::NonFinite(format!(
            "projector output column {j} has zero norm"
        )));
    }
    let (p, n) = z_pre.shape();
    let mut g_in = Matrix::zeros(p, n);
    for j in 0..n {
        let inv = 1.0 / norms[j];
        let radial: f64 = (0..p).map(|i| z_pre[(i, j)] * inv * g_out[(i, j)]).sum();
        for i in 0..p {
            g_in[(i, j)] = (g_out[(i, j)] - z_pre[(i, j)] * inv * radial) * inv;
        }
    }
    Ok(g_in)
}

/// Gradients of a scalar loss with `dL/dz = g_z` w.r.t. every parameter
/// and the network input.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    g_z: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let nl = params.layers.len();
    if cache.pre.len() != nl || g_z.shape() != cache.z_pre().shape() {
        return Err(Error::shape("cache or gradient does not match the network"));
    }
    let mut grads = params.zeros_like();
    let mut g = l2_normalize_backward(cache.z_pre(), g_z)?;
    for k in (0..nl).rev() {
        if k != nl - 1 {
            // g currently holds dL/d(post_k); turn it into dL/d(pre_k)
            for (gv, &pv) in g.data_mut().iter_mut().zip(cache.pre[k].data()) {
                if pv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = if k == 0 {
            &cache.input
        } else {
            &cache.post[k - 1]
        };
        let gl = &mut grads.layers[k];
        gl.weight = g.matmul_transb(input)?;
        let n = g.cols();
        for (b, row) in gl.bias.as_mut_slice().iter_mut().zip(g.data().chunks(n)) {
            *b = row.iter().sum();
        }
        g = params.layers[k].weight.matmul_transa(&g)?;
    }
    Ok((grads, g))
}

/// SGD with momentum and coupled weight decay:
/// `v <- momentum v + (g + wd w)`, `w <- w - lr v`.
pub fn sgd_step(
    params: &MlpParams,
    grads: &MlpParams,
    momentum_state: &MlpParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(MlpParams, MlpParams)> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if !params.same_layout(grads) || !params.same_layout(momentum_state) {
        return Err(Error::shape(
            "parameter, gradient and momentum layouts differ",
        ));
    }
    let mut new_params = params.clone();
    let mut new_v = momentum_state.clone();
    let g = grads.flat();
    for ((w, v), gi) in new_params.flat_mut().zip(new_v.flat_mut()).zip(g) {
        *v = momentum * *v + (gi + weight_decay * *w);
        *w -= lr * *v;
    }
    Ok((new_params, new_v))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CIMX";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters in the `CIMX` binary format: magic, version (u32 LE),
/// layer count (u32 LE), `(out, in)` per layer (u32 LE pairs), then per
/// layer the row-major weights followed by the bias as f64 LE, and finally
/// a u64 LE checksum equal to the wrapping sum of every preceding byte.
pub fn write_checkpoint<W: Write>(params: &MlpParams, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * params.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        let (out, inp) = l.shape();
        buf.extend_from_slice(&(out as u32).to_le_bytes());
        buf.extend_from_slice(&(inp as u32).to_le_bytes());
    }
    for v in params.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let sum = byte_sum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

/// Reads a `CIMX` checkpoint. The format does not record where the encoder
/// ends, so the caller supplies `encoder_layers`.
pub fn read_checkpoint<R: Read>(mut r: R, encoder_layers: usize) -> Result<MlpParams> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if buf.len() < 20 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing CIMX magic"));
    }
    let (payload, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != byte_sum(payload) {
        return Err(bad("checksum mismatch"));
    }
    let mut pos = 4;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let bytes = payload
            .get(*pos..*pos + 4)
            .ok_or_else(|| bad("truncated header"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    };
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32_at(&mut pos)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let out = u32_at(&mut pos)? as usize;
        let inp = u32_at(&mut pos)? as usize;
        shapes.push((out, inp));
    }
    let expected: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
    if payload.len() - pos != 8 * expected {
        return Err(bad("payload length does not match layer shapes"));
    }
    let mut values = payload[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut layers = Vec::with_capacity(count);
    for (out, inp) in shapes {
        let w: Vec<f64> = values.by_ref().take(out * inp).collect();
        let b: Vec<f64> = values.by_ref().take(out).collect();
        layers.push(Layer {
            weight: Matrix::new(out, inp, w)?,
            bias: Vector::new(b)?,
        });
    }
    MlpParams::new(layers, encoder_layers)
}

pub fn save_checkpoint(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>, encoder_layers: usize) -> Result<MlpParams> {
    read_checkpoint(BufReader::new(File::open(path)?), encoder_layers)
}

//! Feedforward feature encoder, its backward pass, SGD with momentum and
//! the exponentially averaged shadow copy that feeds the feature queue.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{matmul, matmul_nt, matmul_tn, Matrix, NumError, Rng};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder shape error: {0}")]
    Shape(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NumError> for EncoderError {
    fn from(e: NumError) -> Self {
        EncoderError::Shape(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected relu or tanh)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// MLP encoder. Weights are stored `fan_in × fan_out` so a batch goes
/// through a layer as `X · W + b`. The activation is applied to hidden
/// layers only; the output layer is linear and unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-layer activations recorded by [`EncoderNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

/// Gradient of a scalar loss with respect to every encoder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &EncoderNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w.data_mut());
            v.push(b.as_mut_slice());
        }
        v
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(w.data());
            v.push(b.as_slice());
        }
        v
    }
}

impl EncoderNet {
    /// He-style initialisation: weights ~ N(0, 2/fan_in), biases zero.
    pub fn new(layer_dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self, EncoderError> {
        let mut net = Self::zeros(layer_dims, activation)?;
        for w in &mut net.weights {
            let scale = (2.0 / w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.normal() * scale;
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self, EncoderError> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(EncoderError::Shape(format!("invalid layer dims {layer_dims:?}")));
        }
        let weights = layer_dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, activation })
    }

    /// Assemble from explicit parameters (`weights[l]` is `dims[l] × dims[l+1]`).
    pub fn from_parts(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self, EncoderError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(EncoderError::Shape("weights and biases must pair up".into()));
        }
        let mut dims = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *dims.last().unwrap() || b.len() != w.cols() {
                return Err(EncoderError::Shape(format!("layer {l} is not compatible with its neighbours")));
            }
            dims.push(w.cols());
        }
        if weights.iter().any(|w| !w.is_finite()) || biases.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EncoderError::Shape("non-finite parameter".into()));
        }
        Ok(Self { layer_dims: dims, weights, biases, activation })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.data().len() + b.len()).sum()
    }

    /// Parameters in checkpoint order: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), EncoderError> {
        if flat.len() != self.num_params() {
            return Err(EncoderError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w.data_mut());
            v.push(b.as_mut_slice());
        }
        v
    }

    fn same_shape(&self, other: &EncoderNet) -> bool {
        self.layer_dims == other.layer_dims
    }

    /// Runs the batch through every layer, keeping what backward needs.
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache), EncoderError> {
        if batch.cols() != self.input_dim() {
            return Err(EncoderError::Shape(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut pre_activations = Vec::with_capacity(self.weights.len());
        let mut a = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&a, w)?;
            for r in 0..z.rows() {
                for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            let next = if l < last {
                let mut h = z.clone();
                h.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                h
            } else {
                z.clone()
            };
            layer_inputs.push(a);
            pre_activations.push(z);
            a = next;
        }
        if !a.is_finite() {
            return Err(EncoderError::Shape("non-finite features".into()));
        }
        Ok((a, ForwardCache { layer_inputs, pre_activations }))
    }

    /// Features only.
    pub fn encode(&self, batch: &Matrix) -> Result<Matrix, EncoderError> {
        self.forward(batch).map(|(f, _)| f)
    }

    /// Chain rule from `∂L/∂features` back to every weight and bias.
    pub fn backward(&self, cache: &ForwardCache, grad_features: &Matrix) -> Result<ParamGrads, EncoderError> {
        let n = cache.layer_inputs.first().map_or(0, Matrix::rows);
        if grad_features.shape() != (n, self.output_dim()) {
            return Err(EncoderError::Shape(format!(
                "feature gradient is {:?}, forward output was {:?}",
                grad_features.shape(),
                (n, self.output_dim())
            )));
        }
        let last = self.weights.len() - 1;
        let mut grads = ParamGrads::zeros_like(self);
        let mut g = grad_features.clone();
        for l in (0..=last).rev() {
            if l < last {
                let z = &cache.pre_activations[l];
                for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                    *gv *= self.activation.derivative(*zv);
                }
            }
            grads.weights[l] = matmul_tn(&cache.layer_inputs[l], &g)?;
            let db = &mut grads.biases[l];
            for r in 0..g.rows() {
                for (d, v) in db.iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            if l > 0 {
                g = matmul_nt(&g, &self.weights[l])?;
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl SgdConfig {
    /// `lr = 0` is accepted so that frozen runs can be expressed.
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(EncoderError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EncoderError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(EncoderError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Velocity buffers, one per encoder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: ParamGrads,
}

impl SgdState {
    pub fn new(net: &EncoderNet) -> Self {
        Self { velocity: ParamGrads::zeros_like(net) }
    }
}

/// `v ← momentum·v + g + weight_decay·θ; θ ← θ − lr·v`.
pub fn sgd_step(
    net: &mut EncoderNet,
    grads: &ParamGrads,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<(), EncoderError> {
    if grads.weights.len() != net.weights.len()
        || grads.weights.iter().zip(&net.weights).any(|(g, w)| g.shape() != w.shape())
    {
        return Err(EncoderError::Shape("gradient does not match encoder".into()));
    }
    for ((p, g), v) in net.slices_mut().into_iter().zip(grads.slices()).zip(state.velocity.slices_mut()) {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
    Ok(())
}

/// Same update rule for a standalone scalar (biases b and b_θ).
pub fn sgd_scalar(param: &mut f64, grad: f64, velocity: &mut f64, cfg: &SgdConfig, decay: bool) {
    let wd = if decay { cfg.weight_decay * *param } else { 0.0 };
    *velocity = cfg.momentum * *velocity + grad + wd;
    *param -= cfg.lr * *velocity;
}

/// Moving-average shadow encoder θ_q, never touched by backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaEncoder {
    params: EncoderNet,
    eta: f64,
}

impl EmaEncoder {
    /// Starts as an exact copy of `net`.
    pub fn new(net: &EncoderNet, eta: f64) -> Result<Self, EncoderError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(EncoderError::Config(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(Self { params: net.clone(), eta })
    }

    pub fn from_params(params: EncoderNet, eta: f64) -> Result<Self, EncoderError> {
        let mut e = Self::new(&params, eta)?;
        e.params = params;
        Ok(e)
    }

    pub fn params(&self) -> &EncoderNet {
        &self.params
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `θ_q ← η θ_q + (1 − η) θ`.
    pub fn update(&mut self, net: &EncoderNet) -> Result<(), EncoderError> {
        if !self.params.same_shape(net) {
            return Err(EncoderError::Shape(format!(
                "ema tracks {:?}, got {:?}",
                self.params.layer_dims,
                net.layer_dims
            )));
        }
        let eta = self.eta;
        let src: Vec<f64> = net.flat_params();
        let mut it = src.iter();
        for s in self.params.slices_mut() {
            for q in s.iter_mut() {
                let p = *it.next().unwrap();
                // same average, written so that θ_q = θ stays a fixed point
                *q = if eta == 0.0 { p } else { *q + (1.0 - eta) * (p - *q) };
            }
        }
        Ok(())
    }
}

/// Free-function form of [`EmaEncoder::update`].
pub fn ema_update(ema: &mut EmaEncoder, net: &EncoderNet) -> Result<(), EncoderError> {
    ema.update(net)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSLCKPT1";

/// Binary checkpoint: an encoder plus named scalar parameters.
///
/// Layout (little endian): magic `PSLCKPT1`, activation tag `u8`, layer
/// count+1 as `u32`, each dim as `u64`, then for every layer the weights
/// row-major followed by the bias as `f64`, then a `u32` scalar count and
/// for each scalar a `u32` name length, the UTF-8 name and an `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: EncoderNet,
    pub scalars: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn new(net: EncoderNet) -> Self {
        Self { net, scalars: Vec::new() }
    }

    pub fn with_scalar(mut self, name: &str, value: f64) -> Self {
        self.scalars.push((name.to_string(), value));
        self
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(self.net.activation.tag());
        out.extend_from_slice(&(self.net.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.net.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.net.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(EncoderError::Format("bad magic".into()));
        }
        let activation = Activation::from_tag(r.take(1)?[0])
            .ok_or_else(|| EncoderError::Format("unknown activation tag".into()))?;
        let n_dims = r.u32()? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(EncoderError::Format(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(usize::try_from(r.u64()?).map_err(|_| EncoderError::Format("dim overflow".into()))?);
        }
        let mut net = EncoderNet::zeros(&dims, activation).map_err(|e| EncoderError::Format(e.to_string()))?;
        let n = net.num_params();
        if r.remaining() < n * 8 {
            return Err(EncoderError::Format("truncated parameter block".into()));
        }
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            flat.push(r.f64()?);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Format("non-finite parameter".into()));
        }
        net.set_flat_params(&flat)?;
        let n_scalars = r.u32()? as usize;
        let mut scalars = Vec::with_capacity(n_scalars.min(1024));
        for _ in 0..n_scalars {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| EncoderError::Format("scalar name is not UTF-8".into()))?;
            scalars.push((name, r.f64()?));
        }
        if r.remaining() != 0 {
            return Err(EncoderError::Format("trailing bytes".into()));
        }
        Ok(Self { net, scalars })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        if self.pos + n > self.buf.len() {
            return Err(EncoderError::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EncoderError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::dot;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_features() {
        let net = EncoderNet::zeros(&[3, 5, 2], Activation::Relu).unwrap();
        let mut rng = Rng::new(1);
        let f = net.encode(&random_batch(&mut rng, 4, 3)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let net = EncoderNet::from_parts(vec![Matrix::identity(3)], vec![vec![0.0; 3]], Activation::Relu).unwrap();
        let mut rng = Rng::new(2);
        let x = random_batch(&mut rng, 5, 3);
        assert_eq!(net.encode(&x).unwrap(), x);
    }

    #[test]
    fn two_layer_relu_matches_scalar_evaluation() {
        let mut rng = Rng::new(0);
        let net = EncoderNet::new(&[2, 3, 2], Activation::Relu, &mut rng).unwrap();
        let x = [1.0, 1.0];
        // scalar-by-scalar oracle
        let w0 = &net.weights()[0];
        let w1 = &net.weights()[1];
        let mut hidden = [0.0; 3];
        for j in 0..3 {
            let mut z = net.biases()[0][j];
            for i in 0..2 {
                z += x[i] * w0.get(i, j);
            }
            hidden[j] = if z > 0.0 { z } else { 0.0 };
        }
        let mut expect = [0.0; 2];
        for k in 0..2 {
            let mut z = net.biases()[1][k];
            for j in 0..3 {
                z += hidden[j] * w1.get(j, k);
            }
            expect[k] = z;
        }
        let got = net.encode(&Matrix::from_vec(1, 2, x.to_vec()).unwrap()).unwrap();
        for k in 0..2 {
            assert!((got.get(0, k) - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = EncoderNet::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(net.forward(&Matrix::zeros(1, 4)).is_err());
        assert!(EncoderNet::zeros(&[3], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let net = EncoderNet::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let (f, cache) = net.forward(&random_batch(&mut rng, 3, 3)).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(f.rows(), f.cols())).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(net.backward(&cache, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn scalar_linear_closed_form() {
        // L = x̃², x̃ = W·2 => dL/dW = 2·x̃·2 = 2·W·2·2
        let w = 0.7;
        let net = EncoderNet::from_parts(
            vec![Matrix::from_vec(1, 1, vec![w]).unwrap()],
            vec![vec![0.0]],
            Activation::Relu,
        )
        .unwrap();
        let (f, cache) = net.forward(&Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        let g = Matrix::from_vec(1, 1, vec![2.0 * f.get(0, 0)]).unwrap();
        let grads = net.backward(&cache, &g).unwrap();
        assert!((grads.weights[0].get(0, 0) - 2.0 * w * 2.0 * 2.0).abs() < 1e-15);
    }

    /// L = Σ c ⊙ f(x), with c a fixed random matrix.
    fn probe_loss(net: &EncoderNet, x: &Matrix, c: &Matrix) -> f64 {
        dot(net.encode(x).unwrap().data(), c.data())
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..12u64 {
            let mut rng = Rng::new(seed);
            let depth = 1 + (seed as usize % 3);
            let mut dims = vec![1 + rng.below(4)];
            for _ in 0..depth {
                dims.push(1 + rng.below(8));
            }
            let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let mut net = EncoderNet::new(&dims, act, &mut rng).unwrap();
            // non-zero biases so relu kinks are not hit at exactly zero
            let mut flat = net.flat_params();
            for v in flat.iter_mut() {
                *v += 0.1 * rng.normal();
            }
            net.set_flat_params(&flat).unwrap();
            let x = random_batch(&mut rng, 3, dims[0]);
            let (f, cache) = net.forward(&x).unwrap();
            if act == Activation::Relu
                && cache.pre_activations[..cache.pre_activations.len() - 1]
                    .iter()
                    .flat_map(|z| z.data())
                    .any(|z| z.abs() < 1e-4)
            {
                continue;
            }
            let c = random_batch(&mut rng, f.rows(), f.cols());
            let analytic = net.backward(&cache, &c).unwrap().flat();
            let h = 1e-6;
            for (i, a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                let mut p = flat.clone();
                p[i] += h;
                plus.set_flat_params(&p).unwrap();
                let mut minus = net.clone();
                p[i] -= 2.0 * h;
                minus.set_flat_params(&p).unwrap();
                let fd = (probe_loss(&plus, &x, &c) - probe_loss(&minus, &x, &c)) / (2.0 * h);
                let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-5);
                assert!(rel < 1e-5, "seed {seed} param {i}: fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = Rng::new(9);
        let net = EncoderNet::new(&[4, 8, 3], Activation::Relu, &mut rng).unwrap();
        let x = random_batch(&mut rng, 6, 4);
        let a = net.encode(&x).unwrap();
        let b = net.encode(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    fn constant_grads(net: &EncoderNet, g: f64) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(net);
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|v| *v = g);
        }
        grads
    }

    #[test]
    fn sgd_zero_lr_is_a_no_op() {
        let mut rng = Rng::new(3);
        let mut net = EncoderNet::new(&[2, 3], Activation::Relu, &mut rng).unwrap();
        let before = net.clone();
        let cfg = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 0.1 };
        let mut st = SgdState::new(&net);
        let g = constant_grads(&net, 1.5);
        sgd_step(&mut net, &g, &cfg, &mut st).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_plain_gradient_descent() {
        let mut rng = Rng::new(3);
        let mut net = EncoderNet::new(&[2, 3], Activation::Relu, &mut rng).unwrap();
        let before = net.flat_params();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut st = SgdState::new(&net);
        let g = constant_grads(&net, 2.0);
        sgd_step(&mut net, &g, &cfg, &mut st).unwrap();
        for (a, b) in net.flat_params().iter().zip(&before) {
            assert!((a - (b - 0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut net = EncoderNet::zeros(&[1, 1], Activation::Relu).unwrap();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut st = SgdState::new(&net);
        let g = constant_grads(&net, 0.5);
        sgd_step(&mut net, &g, &cfg, &mut st).unwrap();
        sgd_step(&mut net, &g, &cfg, &mut st).unwrap();
        let expected = -0.1 * 0.5 * (1.0 + 1.9);
        for v in net.flat_params() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_bad_config() {
        assert!(SgdConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: -1e-3, ..Default::default() }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let mut rng = Rng::new(4);
        let net = EncoderNet::new(&[2, 2], Activation::Relu, &mut rng).unwrap();
        let other = EncoderNet::new(&[2, 2], Activation::Relu, &mut rng).unwrap();

        let mut frozen = EmaEncoder::new(&net, 1.0).unwrap();
        frozen.update(&other).unwrap();
        assert_eq!(frozen.params(), &net);

        let mut copy = EmaEncoder::new(&net, 0.0).unwrap();
        copy.update(&other).unwrap();
        assert_eq!(copy.params(), &other);

        let mut ones = EncoderNet::zeros(&[1, 1], Activation::Relu).unwrap();
        ones.set_flat_params(&[1.0, 1.0]).unwrap();
        let mut threes = ones.clone();
        threes.set_flat_params(&[3.0, 3.0]).unwrap();
        let mut mid = EmaEncoder::new(&ones, 0.5).unwrap();
        ema_update(&mut mid, &threes).unwrap();
        assert_eq!(mid.params().flat_params(), vec![2.0, 2.0]);
    }

    #[test]
    fn ema_shape_mismatch_and_range() {
        let a = EncoderNet::zeros(&[2, 2], Activation::Relu).unwrap();
        let b = EncoderNet::zeros(&[2, 3], Activation::Relu).unwrap();
        let mut e = EmaEncoder::new(&a, 0.9).unwrap();
        assert!(e.update(&b).is_err());
        assert!(EmaEncoder::new(&a, 1.5).is_err());
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut rng = Rng::new(8);
        let target = EncoderNet::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let start = EncoderNet::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let eta = 0.8;
        let gap0 = start
            .flat_params()
            .iter()
            .zip(target.flat_params())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mut ema = EmaEncoder::new(&start, eta).unwrap();
        for k in 1..=10 {
            ema.update(&target).unwrap();
            let gap = ema
                .params()
                .flat_params()
                .iter()
                .zip(target.flat_params())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!((gap - gap0 * eta.powi(k)).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = Rng::new(11);
        let net = EncoderNet::new(&[5, 7, 3], Activation::Tanh, &mut rng).unwrap();
        let ck = Checkpoint::new(net).with_scalar("b", -0.123456789).with_scalar("b_theta", 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.scalar("b"), Some(-0.123456789));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let net = EncoderNet::zeros(&[2, 2], Activation::Relu).unwrap();
        let mut bytes = Checkpoint::new(net).to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}

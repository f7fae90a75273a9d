//! Small feedforward feature networks with hand-written reverse mode and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector, LinalgError};
use crate::synthgen::sine_basis;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `t + sin²(t)`
    Snake,
    /// `t·Φ(t)` with the exact normal CDF.
    Gelu,
    Linear,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t * INV_SQRT_2))
}

impl Activation {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Snake => t + t.sin().powi(2),
            Activation::Gelu => t * normal_cdf(t),
            Activation::Linear => t,
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Snake => 1.0 + (2.0 * t).sin(),
            Activation::Gelu => normal_cdf(t) + t * INV_SQRT_2PI * (-0.5 * t * t).exp(),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Layer widths and activations, excluding the input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl Architecture {
    /// 1 → 50 (snake) → 50 (gelu) → `d` (linear).
    pub fn synthetic_default(input_dim: usize, d: usize) -> Self {
        Self {
            input_dim,
            layers: vec![
                (50, Activation::Snake),
                (50, Activation::Gelu),
                (d, Activation::Linear),
            ],
        }
    }

    pub fn linear(input_dim: usize, d: usize) -> Self {
        Self {
            input_dim,
            layers: vec![(d, Activation::Linear)],
        }
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.layers.is_empty() || arch.layers.iter().any(|l| l.0 == 0) {
            return Err(FeatureError::InvalidArch(format!("{arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = arch.input_dim;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for &(out, activation) in &arch.layers {
            let bound = glorot_bound(fan_in, out);
            let weight = DenseMatrix::from_fn(out, fan_in, |_, _| rng.random_range(-bound..=bound));
            layers.push(Layer {
                weight,
                bias: vec![0.0; out],
                activation,
            });
            fan_in = out;
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let p = Self { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(FeatureError::InvalidArch("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(FeatureError::InvalidArch(format!("layer {i}: bias length")));
            }
            if i > 0 && self.layers[i - 1].out_dim() != l.in_dim() {
                return Err(FeatureError::InvalidArch(format!(
                    "layer {i}: input {} does not match previous output {}",
                    l.in_dim(),
                    self.layers[i - 1].out_dim()
                )));
            }
            if !l.weight.data().iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(FeatureError::NonFinite { layer: i });
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Weights then bias, layer by layer.
    pub fn flatten(&self) -> DenseVector {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(FeatureError::Shape(format!(
                "flat length {} vs {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.data_mut();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Gradients laid out like [`MlpParams::flatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseVector>,
}

impl MlpGrads {
    pub fn flatten(&self) -> DenseVector {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Pre-activations and outputs of every layer from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pre: Vec<DenseMatrix>,
    post: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        self.post.last().expect("at least one layer")
    }
}

fn check_input(params: &MlpParams, inputs: &DenseMatrix) -> Result<()> {
    if inputs.cols() != params.in_dim() {
        return Err(FeatureError::Shape(format!(
            "input width {} but first layer expects {}",
            inputs.cols(),
            params.in_dim()
        )));
    }
    Ok(())
}

pub fn forward_cached(params: &MlpParams, inputs: &DenseMatrix) -> Result<ForwardCache> {
    check_input(params, inputs)?;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<DenseMatrix> = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let x = post.last().unwrap_or(inputs);
        let mut z = x.matmul_t(&layer.weight)?;
        let cols = z.cols();
        for row in z.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut a = z.clone();
        for v in a.data_mut() {
            *v = layer.activation.apply(*v);
        }
        if !a.data().iter().all(|v| v.is_finite()) {
            return Err(FeatureError::NonFinite { layer: i });
        }
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardCache { pre, post })
}

pub fn forward(params: &MlpParams, inputs: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_cached(params, inputs)?.post.pop().expect("nonempty"))
}

/// Reverse-mode gradient of `Σ cotangent ⊙ output` with respect to every parameter.
pub fn backward_cached(
    params: &MlpParams,
    inputs: &DenseMatrix,
    cache: &ForwardCache,
    cotangent: &DenseMatrix,
) -> Result<MlpGrads> {
    if cotangent.shape() != cache.output().shape() {
        return Err(FeatureError::Shape(format!(
            "cotangent {:?} vs output {:?}",
            cotangent.shape(),
            cache.output().shape()
        )));
    }
    let n = params.layers.len();
    let mut weights = vec![DenseMatrix::zeros(0, 0); n];
    let mut biases = vec![Vec::new(); n];
    let mut upstream = cotangent.clone();
    for i in (0..n).rev() {
        let layer = &params.layers[i];
        let mut dz = upstream;
        if layer.activation != Activation::Linear {
            for (g, &z) in dz.data_mut().iter_mut().zip(cache.pre[i].data()) {
                *g *= layer.activation.derivative(z);
            }
        }
        let x = if i == 0 { inputs } else { &cache.post[i - 1] };
        weights[i] = dz.t_matmul(x)?;
        let mut db = vec![0.0; layer.out_dim()];
        for row in dz.data().chunks(layer.out_dim()) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        biases[i] = db;
        upstream = if i > 0 {
            dz.matmul(&layer.weight)?
        } else {
            DenseMatrix::zeros(0, 0)
        };
    }
    Ok(MlpGrads { weights, biases })
}

pub fn backward(
    params: &MlpParams,
    inputs: &DenseMatrix,
    cotangent: &DenseMatrix,
) -> Result<MlpGrads> {
    let cache = forward_cached(params, inputs)?;
    backward_cached(params, inputs, &cache, cotangent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: DenseVector,
    pub v: DenseVector,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            config,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(FeatureError::Shape(format!(
                "adam buffers {} vs params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam update applied to an MLP.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
    let mut flat = params.flatten();
    state.step(&mut flat, &grads.flatten())?;
    params.unflatten(&flat)
}

/// How scalar (or index-valued) inputs are turned into the first-layer input row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputEncoding {
    /// The value itself, one column.
    Raw,
    /// `(1, √2 sin t, …, √2 sin(k·t))`.
    SineBasis { n_freq: usize },
    /// `(sin t, cos t, …, sin(k·t), cos(k·t))`.
    Fourier { n_freq: usize },
    /// Indicator of `round(t)` among `0..k`.
    OneHot { k: usize },
}

impl InputEncoding {
    pub fn width(&self) -> usize {
        match *self {
            InputEncoding::Raw => 1,
            InputEncoding::SineBasis { n_freq } => n_freq + 1,
            InputEncoding::Fourier { n_freq } => 2 * n_freq,
            InputEncoding::OneHot { k } => k,
        }
    }

    pub fn encode(&self, points: &[f64]) -> Result<DenseMatrix> {
        let w = self.width();
        let mut data = Vec::with_capacity(points.len() * w);
        for &t in points {
            match *self {
                InputEncoding::Raw => data.push(t),
                InputEncoding::SineBasis { n_freq } => {
                    data.push(1.0);
                    data.extend(sine_basis(t, n_freq));
                }
                InputEncoding::Fourier { n_freq } => {
                    for l in 1..=n_freq {
                        let (s, c) = (l as f64 * t).sin_cos();
                        data.push(s);
                        data.push(c);
                    }
                }
                InputEncoding::OneHot { k } => {
                    let idx = t.round();
                    if !(idx >= 0.0 && (idx as usize) < k) {
                        return Err(FeatureError::Shape(format!("index {t} outside 0..{k}")));
                    }
                    let mut row = vec![0.0; k];
                    row[idx as usize] = 1.0;
                    data.extend(row);
                }
            }
        }
        Ok(DenseMatrix::new(points.len(), w, data)?)
    }
}

/// An input encoding followed by an MLP: the map `t ↦ φ(t) ∈ ℝ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub encoding: InputEncoding,
    pub params: MlpParams,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    net: FeatureNet,
}

impl FeatureNet {
    pub fn new(encoding: InputEncoding, hidden: &[(usize, Activation)], d: usize, seed: u64) -> Result<Self> {
        let mut layers = hidden.to_vec();
        layers.push((d, Activation::Linear));
        let arch = Architecture {
            input_dim: encoding.width(),
            layers,
        };
        Ok(Self {
            encoding,
            params: MlpParams::init(&arch, seed)?,
        })
    }

    /// Raw scalar input through 50 (snake) → 50 (gelu) → `d`.
    pub fn synthetic_default(d: usize, seed: u64) -> Result<Self> {
        Self::new(
            InputEncoding::Raw,
            &[(50, Activation::Snake), (50, Activation::Gelu)],
            d,
            seed,
        )
    }

    /// A single trainable linear layer on top of a fixed encoding.
    pub fn linear(encoding: InputEncoding, d: usize, seed: u64) -> Result<Self> {
        Self::new(encoding, &[], d, seed)
    }

    /// Fixed linear features `W·enc(t)` (no bias).
    pub fn from_linear_weights(encoding: InputEncoding, weight: DenseMatrix) -> Result<Self> {
        if weight.cols() != encoding.width() {
            return Err(FeatureError::Shape(format!(
                "weight has {} columns, encoding width {}",
                weight.cols(),
                encoding.width()
            )));
        }
        let bias = vec![0.0; weight.rows()];
        Ok(Self {
            encoding,
            params: MlpParams::from_layers(vec![Layer {
                weight,
                bias,
                activation: Activation::Linear,
            }])?,
        })
    }

    pub fn d(&self) -> usize {
        self.params.out_dim()
    }

    pub fn features(&self, points: &[f64]) -> Result<DenseMatrix> {
        forward(&self.params, &self.encoding.encode(points)?)
    }

    /// For a single linear layer, the effective coefficient matrix on the
    /// encoding with the bias folded into a leading constant column when the
    /// encoding has one.
    pub fn effective_linear_weights(&self) -> Option<DenseMatrix> {
        let [layer] = &self.params.layers[..] else {
            return None;
        };
        if layer.activation != Activation::Linear {
            return None;
        }
        let mut w = layer.weight.clone();
        match self.encoding {
            InputEncoding::SineBasis { .. } => {
                for (i, b) in layer.bias.iter().enumerate() {
                    w.set(i, 0, w.get(i, 0) + b);
                }
                Some(w)
            }
            _ if layer.bias.iter().all(|&b| b == 0.0) => Some(w),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            net: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(FeatureError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        c.net.params.validate()?;
        Ok(c.net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_net(arch: &Architecture, seed: u64) -> MlpParams {
        let mut p = MlpParams::init(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.sample::<f64, _>(StandardNormal) * 0.3;
            }
        }
        p
    }

    #[test]
    fn activation_closed_forms() {
        assert_eq!(Activation::Snake.apply(0.0), 0.0);
        let h = std::f64::consts::FRAC_PI_2;
        assert!((Activation::Snake.apply(h) - (h + 1.0)).abs() < 1e-15);
        assert!((Activation::Gelu.apply(0.0)).abs() < 1e-300);
        assert!((Activation::Gelu.derivative(0.0) - 0.5).abs() < 1e-15);
        for act in [Activation::Snake, Activation::Gelu] {
            for t in [-2.0, -0.3, 0.7, 3.1] {
                let fd = (act.apply(t + 1e-6) - act.apply(t - 1e-6)) / 2e-6;
                assert!((fd - act.derivative(t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let arch = Architecture::synthetic_default(1, 4);
        let mut p = MlpParams::init(&arch, 0).unwrap();
        let zeros = vec![0.0; p.num_params()];
        p.unflatten(&zeros).unwrap();
        let out = forward(&p, &DenseMatrix::column(&[0.3, -1.0, 2.0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let p = MlpParams::from_layers(vec![Layer {
            weight: DenseMatrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Linear,
        }])
        .unwrap();
        let x = DenseMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        assert_eq!(forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn input_width_checked() {
        let p = MlpParams::init(&Architecture::linear(2, 2), 0).unwrap();
        assert!(matches!(
            forward(&p, &DenseMatrix::zeros(3, 3)),
            Err(FeatureError::Shape(_))
        ));
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut p = MlpParams::init(&Architecture::synthetic_default(1, 2), 0).unwrap();
        p.layers[1].bias[0] = f64::MAX;
        p.layers[1].weight.data_mut().iter_mut().for_each(|w| *w = 1e308);
        let err = forward(&p, &DenseMatrix::column(&[1.0])).unwrap_err();
        assert!(matches!(err, FeatureError::NonFinite { layer: 1 | 2 }));
    }

    fn fd_check(arch: &Architecture, seed: u64) {
        let p = random_net(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::from_fn(6, arch.input_dim, |_, _| rng.random_range(-3.0..3.0));
        let out_dim = p.out_dim();
        let cot = DenseMatrix::from_fn(6, out_dim, |_, _| rng.sample(StandardNormal));
        let objective = |q: &MlpParams| -> f64 {
            let o = forward(q, &x).unwrap();
            o.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let analytic = backward(&p, &x, &cot).unwrap().flatten();
        let flat = p.flatten();
        let mut q = p.clone();
        let h = 1e-5;
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            q.unflatten(&f).unwrap();
            let up = objective(&q);
            f[i] -= 2.0 * h;
            q.unflatten(&f).unwrap();
            let down = objective(&q);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / scale;
            assert!(err <= 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(
            &Architecture {
                input_dim: 1,
                layers: vec![(5, Activation::Snake), (3, Activation::Linear)],
            },
            1,
        );
        fd_check(&Architecture::synthetic_default(1, 4), 2);
        fd_check(
            &Architecture {
                input_dim: 3,
                layers: vec![(4, Activation::Gelu), (2, Activation::Linear)],
            },
            3,
        );
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let p = random_net(&Architecture::synthetic_default(1, 3), 0);
        let x = DenseMatrix::column(&[0.1, 0.2]);
        let g = backward(&p, &x, &DenseMatrix::zeros(2, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient() {
        // L = ½‖XWᵀ + b − Y‖², gradient wrt W is Rᵀ X with R the residual.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_net(&Architecture::linear(3, 2), 5);
        let x = DenseMatrix::from_fn(7, 3, |_, _| rng.sample(StandardNormal));
        let y = DenseMatrix::from_fn(7, 2, |_, _| rng.sample(StandardNormal));
        let resid = forward(&p, &x).unwrap().sub(&y).unwrap();
        let g = backward(&p, &x, &resid).unwrap();
        let expected = resid.t_matmul(&x).unwrap();
        assert!(g.weights[0].sub(&expected).unwrap().max_abs() < 1e-12);
        for j in 0..2 {
            let s: f64 = (0..7).map(|i| resid.get(i, j)).sum();
            assert!((g.biases[0][j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..200 {
            st.step(&mut p, &[3.0]).unwrap();
            let delta = p[0] - prev;
            prev = p[0];
            assert!((delta + 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut st = AdamState::new(2, AdamConfig { lr: 1e-2, ..Default::default() });
        let mut p = vec![1.5, -0.7];
        for _ in 0..5000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            st.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|v| v.abs() <= 1e-3), "{p:?}");
    }

    #[test]
    fn init_is_deterministic_and_glorot() {
        let arch = Architecture::synthetic_default(1, 10);
        let a = MlpParams::init(&arch, 7).unwrap();
        let b = MlpParams::init(&arch, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!((glorot_bound(50, 50) - (0.06f64).sqrt()).abs() < 1e-15);
        let bound = glorot_bound(50, 50);
        assert!(a.layers[1].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

        let big = MlpParams::init(
            &Architecture {
                input_dim: 100,
                layers: vec![(100, Activation::Linear)],
            },
            3,
        )
        .unwrap();
        let w = big.layers[0].weight.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let target = glorot_bound(100, 100).powi(2) / 3.0;
        assert!((var / target - 1.0).abs() < 0.1);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut net = FeatureNet::synthetic_default(10, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = (0..net.params.num_params()).map(|_| rng.sample(StandardNormal)).collect();
        net.params.unflatten(&f).unwrap();
        let back = FeatureNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back.params.flatten(), net.params.flatten());
        assert_eq!(back, net);
        let bad = net.to_json().unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(FeatureNet::from_json(&bad).is_err());
    }

    #[test]
    fn rows_independent_of_batch() {
        let net = FeatureNet::synthetic_default(4, 2).unwrap();
        let pts = [0.3, -1.2, 2.5, 0.0];
        let all = net.features(&pts).unwrap();
        for (i, &p) in pts.iter().enumerate() {
            let one = net.features(&[p]).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
    }

    #[test]
    fn encodings() {
        let e = InputEncoding::SineBasis { n_freq: 2 }.encode(&[0.5]).unwrap();
        assert_eq!(e.row(0)[0], 1.0);
        assert!((e.row(0)[2] - 2f64.sqrt() * 1f64.sin()).abs() < 1e-15);
        let o = InputEncoding::OneHot { k: 3 }.encode(&[2.0, 0.0]).unwrap();
        assert_eq!(o.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(o.row(1), &[1.0, 0.0, 0.0]);
        assert!(InputEncoding::OneHot { k: 3 }.encode(&[3.0]).is_err());
    }
}

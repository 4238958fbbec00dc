//! A small fully-connected network with hand-written reverse mode and AdamW.
//!
//! Hidden layers are `affine → activation`, the output layer is affine only.
//! Weights are stored row-major as `out × in`. All batched products go
//! through `matrixmultiply`, which is single-threaded and therefore
//! deterministic for a given input.
//!
//! The network is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Scalar type usable by the network.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `C ← α·A·B + β·C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn of(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1)) * rs.unsigned_abs() + (cols.saturating_sub(1)) * cs.unsigned_abs() + 1
                };
                assert!(k == 0 || a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(k == 0 || b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the asserts above bound every strided access for the
                // non-negative strides used in this module.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = f(x)`.
    fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// Input width, hidden widths…, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub timestep_embed_dim: usize,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, timestep_embed_dim: usize) -> Result<Self, NetError> {
        let spec = Self { layer_widths, activation, timestep_embed_dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_widths.len() < 2 {
            return Err(NetError::InvalidSpec("need at least input and output widths".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidSpec("layer widths must be positive".into()));
        }
        if self.timestep_embed_dim == 0 || self.timestep_embed_dim % 2 != 0 {
            return Err(NetError::InvalidSpec("timestep embedding dim must be positive and even".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub spec: NetSpec,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = spec.layer_widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self { spec: spec.clone(), layers }
    }

    /// Uniform in `±sqrt(1/fan_in)` for weights and biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(spec);
        for layer in &mut p.layers {
            let bound = (1.0 / layer.inputs as f64).sqrt();
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameter slices in canonical order (layer by layer, weight then
    /// bias).
    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(all_finite)
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weight: l.weight.iter().map(|v| U::of(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Branch-free finiteness test: `v·0` is NaN exactly when `v` is not finite.
fn all_finite<T: Real>(s: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = s.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + c[k] * T::zero();
        }
    }
    acc.iter().chain(rest).all(|v| (*v * T::zero()).is_finite())
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    pub batch: usize,
    /// Input to each layer (`inputs[0]` is the network input).
    pub inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<Vec<T>>,
    /// Network-input columns that are nonzero in some row, when the first
    /// layer took the sparse path.
    pub active_inputs: Option<Vec<usize>>,
}

/// Gradients with the same layout as [`Params`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Layer<T>>,
    pub input: Option<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self { layers: Params::<T>::zeros(spec).layers, input: None }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = *v * s);
        }
        if let Some(g) = &mut self.input {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(all_finite)
    }
}

/// Single-sample forward pass.
pub fn forward<T: Real>(params: &Params<T>, input: &[T]) -> Result<(Vec<T>, Cache<T>), NetError> {
    forward_batch(params, input, 1)
}

/// Forward pass over a row-major `batch × input_dim` matrix.
pub fn forward_batch<T: Real>(params: &Params<T>, inputs: &[T], batch: usize) -> Result<(Vec<T>, Cache<T>), NetError> {
    let in_dim = params.spec.input_dim();
    if inputs.len() != batch * in_dim {
        return Err(NetError::ShapeMismatch(format!(
            "expected {batch}x{in_dim} = {} inputs, got {}",
            batch * in_dim,
            inputs.len()
        )));
    }
    let n_layers = params.layers.len();
    let mut cache = Cache {
        batch,
        inputs: Vec::with_capacity(n_layers),
        pre_activations: Vec::with_capacity(n_layers),
        active_inputs: None,
    };
    let mut x = inputs.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = if i == 0 {
            let active = active_columns(&x, batch, layer.inputs);
            if 2 * active.len() < layer.inputs {
                let z = sparse_affine(layer, &x, batch, &active);
                cache.active_inputs = Some(active);
                z
            } else {
                affine(layer, &x, batch)
            }
        } else {
            affine(layer, &x, batch)
        };
        let last = i + 1 == n_layers;
        let y = if last { z.clone() } else { z.iter().map(|&v| params.spec.activation.apply(v)).collect() };
        cache.inputs.push(x);
        cache.pre_activations.push(z);
        x = y;
    }
    Ok((x, cache))
}

fn affine<T: Real>(layer: &Layer<T>, x: &[T], batch: usize) -> Vec<T> {
    let (n_in, n_out) = (layer.inputs, layer.outputs);
    let mut z = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        z.extend_from_slice(&layer.bias);
    }
    // Z (B×out) += X (B×in) · Wᵀ (in×out)
    T::gemm(batch, n_in, n_out, T::one(), x, n_in as isize, 1, &layer.weight, 1, n_in as isize, T::one(), &mut z, n_out as isize, 1);
    z
}

/// Columns of a row-major `batch × width` matrix holding a nonzero entry.
fn active_columns<T: Real>(x: &[T], batch: usize, width: usize) -> Vec<usize> {
    let mut seen = vec![false; width];
    for row in x.chunks_exact(width).take(batch) {
        for (j, v) in row.iter().enumerate() {
            if *v != T::zero() {
                seen[j] = true;
            }
        }
    }
    seen.iter().enumerate().filter_map(|(j, &s)| s.then_some(j)).collect()
}

/// Gathers the listed columns of a row-major matrix with `width` columns.
fn gather_columns<T: Real>(m: &[T], width: usize, cols: &[usize]) -> Vec<T> {
    m.chunks_exact(width).flat_map(|row| cols.iter().map(move |&j| row[j])).collect()
}

/// [`affine`] restricted to the input columns in `active`; the others are
/// zero in every row.
fn sparse_affine<T: Real>(layer: &Layer<T>, x: &[T], batch: usize, active: &[usize]) -> Vec<T> {
    let n_out = layer.outputs;
    let k = active.len();
    let mut z = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        z.extend_from_slice(&layer.bias);
    }
    if k == 0 {
        return z;
    }
    let xs = gather_columns(x, layer.inputs, active);
    let ws = gather_columns(&layer.weight, layer.inputs, active);
    T::gemm(batch, k, n_out, T::one(), &xs, k as isize, 1, &ws, 1, k as isize, T::one(), &mut z, n_out as isize, 1);
    z
}

/// Reverse pass for a single sample; gradients of `output · grad_output`.
pub fn backward<T: Real>(params: &Params<T>, cache: &Cache<T>, grad_output: &[T]) -> Result<Grads<T>, NetError> {
    backward_batch(params, cache, grad_output, true)
}

/// Reverse pass over a batch. Parameter gradients are summed over the batch
/// rows in ascending order; `input` holds the per-row input gradients when
/// requested.
pub fn backward_batch<T: Real>(
    params: &Params<T>,
    cache: &Cache<T>,
    grad_output: &[T],
    want_input_grad: bool,
) -> Result<Grads<T>, NetError> {
    let batch = cache.batch;
    let out_dim = params.spec.output_dim();
    if grad_output.len() != batch * out_dim {
        return Err(NetError::ShapeMismatch(format!(
            "grad_output has {} entries, expected {}",
            grad_output.len(),
            batch * out_dim
        )));
    }
    if cache.inputs.len() != params.layers.len() {
        return Err(NetError::ShapeMismatch("cache does not match network depth".into()));
    }
    let mut grads = Grads::zeros(&params.spec);
    let mut dz = grad_output.to_vec();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        let x = &cache.inputs[i];
        let g = &mut grads.layers[i];
        match (i, &cache.active_inputs) {
            (0, Some(active)) => {
                let k = active.len();
                if k > 0 {
                    let xs = gather_columns(x, n_in, active);
                    let mut dws = vec![T::zero(); n_out * k];
                    T::gemm(n_out, batch, k, T::one(), &dz, 1, n_out as isize, &xs, k as isize, 1, T::zero(), &mut dws, k as isize, 1);
                    for (row, src) in g.weight.chunks_exact_mut(n_in).zip(dws.chunks_exact(k)) {
                        for (&j, &v) in active.iter().zip(src) {
                            row[j] = v;
                        }
                    }
                }
            }
            // dW (out×in) = dZᵀ (out×B) · X (B×in)
            _ => T::gemm(n_out, batch, n_in, T::one(), &dz, 1, n_out as isize, x, n_in as isize, 1, T::zero(), &mut g.weight, n_in as isize, 1),
        }
        for row in dz.chunks_exact(n_out) {
            for (b, &d) in g.bias.iter_mut().zip(row) {
                *b = *b + d;
            }
        }
        if i == 0 && !want_input_grad {
            break;
        }
        // dX (B×in) = dZ (B×out) · W (out×in)
        let mut dx = vec![T::zero(); batch * n_in];
        T::gemm(batch, n_out, n_in, T::one(), &dz, n_out as isize, 1, &layer.weight, n_in as isize, 1, T::zero(), &mut dx, n_in as isize, 1);
        if i == 0 {
            grads.input = Some(dx);
            break;
        }
        // x is the activation output of layer i-1
        let act = params.spec.activation;
        for (d, &y) in dx.iter_mut().zip(x) {
            *d = *d * act.grad_from_output(y);
        }
        dz = dx;
    }
    Ok(grads)
}

/// First-layer pre-activation contributed by a fixed leading slice of the
/// input: `W[:, ..p]·prefix + b`. Pair with [`forward_with_prefix`] to reuse
/// it across many evaluations that differ only in the remaining inputs.
pub fn first_layer_prefix<T: Real>(params: &Params<T>, prefix: &[T]) -> Result<Vec<T>, NetError> {
    let layer = &params.layers[0];
    if prefix.len() > layer.inputs {
        return Err(NetError::ShapeMismatch(format!("prefix of {} exceeds input width {}", prefix.len(), layer.inputs)));
    }
    let mut z = layer.bias.clone();
    T::gemm(1, prefix.len(), layer.outputs, T::one(), prefix, prefix.len() as isize, 1, &layer.weight, 1, layer.inputs as isize, T::one(), &mut z, layer.outputs as isize, 1);
    Ok(z)
}

/// Inference-only forward pass over `batch` rows that share the first-layer
/// contribution `partial` from [`first_layer_prefix`]; `tail` holds the
/// remaining inputs of each row.
pub fn forward_with_prefix<T: Real>(params: &Params<T>, partial: &[T], tail: &[T], batch: usize) -> Result<Vec<T>, NetError> {
    let layer = &params.layers[0];
    let (n_in, n_out) = (layer.inputs, layer.outputs);
    if partial.len() != n_out || batch == 0 || tail.len() % batch != 0 || tail.len() / batch > n_in {
        return Err(NetError::ShapeMismatch(format!("partial {} / tail {} for batch {batch}", partial.len(), tail.len())));
    }
    let tail_dim = tail.len() / batch;
    let offset = n_in - tail_dim;
    let mut z = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        z.extend_from_slice(partial);
    }
    T::gemm(batch, tail_dim, n_out, T::one(), tail, tail_dim as isize, 1, &layer.weight[offset..], 1, n_in as isize, T::one(), &mut z, n_out as isize, 1);
    let act = params.spec.activation;
    let n_layers = params.layers.len();
    if n_layers == 1 {
        return Ok(z);
    }
    let mut x: Vec<T> = z.into_iter().map(|v| act.apply(v)).collect();
    for (i, layer) in params.layers.iter().enumerate().skip(1) {
        let z = affine(layer, &x, batch);
        x = if i + 1 == n_layers { z } else { z.into_iter().map(|v| act.apply(v)).collect() };
    }
    Ok(x)
}

/// Sinusoidal features of a position in `[0, 1]`, interleaved as
/// `[sin ω₀s, cos ω₀s, sin ω₁s, …]` with `s = 100·x` and geometrically spaced
/// frequencies from 1 down to 1/1000.
pub fn embed_fraction(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = 100.0 * x;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half > 1 { (-(1000f64.ln()) * i as f64 / (half - 1) as f64).exp() } else { 1.0 };
        let (sn, cs) = (s * freq).sin_cos();
        out.push(sn);
        out.push(cs);
    }
    out
}

/// Embedding of diffusion step `k` out of `total`.
pub fn embed_timestep(k: usize, total: usize, dim: usize) -> Vec<f64> {
    embed_fraction(k as f64 / total.max(1) as f64, dim)
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.95, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6, batch_size: 32, epochs: 150 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(NetError::InvalidSpec(format!("bad optimizer config {self:?}")));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidSpec("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.slices().map(|s| vec![T::zero(); s.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update: decoupled decay, then the bias-corrected Adam step.
/// Refuses to touch the parameters if any gradient is non-finite.
pub fn adamw_step<T: Real>(
    params: &mut Params<T>,
    grads: &Grads<T>,
    cfg: &OptConfig,
    state: &mut OptState<T>,
) -> Result<(), NetError> {
    if grads.layers.len() != params.layers.len()
        || grads.slices().zip(params.slices()).any(|(g, p)| g.len() != p.len())
        || state.m.len() != 2 * params.layers.len()
    {
        return Err(NetError::ShapeMismatch("gradients/optimizer state do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(NetError::NonFinite("gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, g), m), v) in params.slices_mut().zip(grads.slices()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if !params.is_finite() {
        return Err(NetError::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// Network weights, optional optimizer state and free-form metadata, as
/// stored in an `MA2W` checkpoint file.
///
/// Layout (all little-endian):
/// `"MA2W"`, version `u8`, metadata length `u32` + UTF-8 `key=value` lines,
/// layer count `u32`, widths `u32…`, activation name length `u8` + bytes,
/// embed dim `u32`, parameters `f32…`, has-optimizer `u8`, then
/// `m f32…`, `v f32…`, step `u64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetCheckpoint {
    pub params: Params<f32>,
    pub opt: Option<OptState<f32>>,
    pub metadata: Vec<(String, String)>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MA2W";
pub const CHECKPOINT_VERSION: u8 = 1;

impl NetCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let spec = &self.params.spec;
        out.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
        for &w in &spec.layer_widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        let act = spec.activation.name();
        out.push(act.len() as u8);
        out.extend_from_slice(act.as_bytes());
        out.extend_from_slice(&(spec.timestep_embed_dim as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, s: &[f32]| s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for s in self.params.slices() {
            put(&mut out, s);
        }
        match &self.opt {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                st.m.iter().for_each(|s| put(&mut out, s));
                st.v.iter().for_each(|s| put(&mut out, s));
                out.extend_from_slice(&st.step.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| NetError::Format(e.to_string()))?;
        let metadata = meta
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| NetError::Format(format!("bad metadata line {l:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(NetError::Format(format!("implausible layer count {n}")));
        }
        let widths = (0..n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
        let act_len = r.u8()? as usize;
        let act_name = std::str::from_utf8(r.take(act_len)?).map_err(|e| NetError::Format(e.to_string()))?;
        let activation =
            Activation::from_name(act_name).ok_or_else(|| NetError::Format(format!("unknown activation {act_name}")))?;
        let embed = r.u32()? as usize;
        let spec = NetSpec::new(widths, activation, embed).map_err(|e| NetError::Format(e.to_string()))?;
        let mut params = Params::<f32>::zeros(&spec);
        for s in params.slices_mut() {
            r.f32s(s)?;
        }
        let opt = match r.u8()? {
            0 => None,
            1 => {
                let mut st = OptState::new(&params);
                for s in st.m.iter_mut() {
                    r.f32s(s)?;
                }
                for s in st.v.iter_mut() {
                    r.f32s(s)?;
                }
                st.step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                Some(st)
            }
            other => return Err(NetError::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(NetError::Format("trailing bytes".into()));
        }
        Ok(Self { params, opt, metadata })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| NetError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, dst: &mut [f32]) -> Result<(), NetError> {
        let src = self.take(4 * dst.len())?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

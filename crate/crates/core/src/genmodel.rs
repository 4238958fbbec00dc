//! Noise schedules, the denoising and flow-matching objectives, and the three
//! samplers (ancestral DDPM, deterministic DDIM, Euler flow matching).
//!
//! Samplers talk to the model through [`Denoiser`], which predicts either the
//! injected noise (diffusion) or the velocity (flow matching) for a batch of
//! rows at a shared time `t ∈ [0, 1]`. Diffusion step `k` is presented to the
//! model as `t = k / K`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tinynet::{
    adamw_step, backward_batch, embed_fraction, first_layer_prefix, forward_batch, forward_with_prefix, Grads, NetError, NetSpec, OptConfig,
    OptState, Params, Real,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid sampler setting: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
}

/// Cumulative signal levels `alpha_bar[0..=K]` and per-step `beta[1..=K]`
/// (`beta[0]` is unused and zero).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub k: usize,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Cosine schedule. Betas come from the ratio of consecutive cosine levels
/// clipped at [`MAX_BETA`], and `alpha_bar` is then rebuilt as their running
/// product so the two stay consistent.
pub fn cosine_schedule(k: usize) -> Result<NoiseSchedule, GenError> {
    if k < 2 {
        return Err(GenError::InvalidConfig(format!("need at least 2 diffusion steps, got {k}")));
    }
    let s = COSINE_OFFSET;
    let f = |i: usize| (((i as f64 / k as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0);
    let raw: Vec<f64> = (0..=k).map(|i| f(i) / f0).collect();
    let mut beta = vec![0.0; k + 1];
    let mut alpha_bar = vec![1.0; k + 1];
    for i in 1..=k {
        beta[i] = (1.0 - raw[i] / raw[i - 1]).min(MAX_BETA);
        alpha_bar[i] = alpha_bar[i - 1] * (1.0 - beta[i]);
    }
    Ok(NoiseSchedule { k, alpha_bar, beta })
}

impl NoiseSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k]
    }

    /// Variance of the posterior `q(a_{k-1} | a_k, a_0)`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k]) * self.beta[k]
    }
}

/// `√ᾱ_k·a + √(1−ᾱ_k)·ε`.
pub fn add_noise(a: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    add_noise_at(a, sched.alpha_bar[k], eps)
}

/// [`add_noise`] for an explicit signal level.
pub fn add_noise_at(a: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    a.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e).collect()
}

/// Point on the straight path from noise (`t = 0`) to data (`t = 1`).
pub fn interpolate(a: &[f64], t: f64, eps: &[f64]) -> Vec<f64> {
    a.iter().zip(eps).map(|(&x, &e)| (1.0 - t) * e + t * x).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    FlowMatching,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::FlowMatching];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::FlowMatching => "fm",
        }
    }

    /// What the network regresses: noise for both diffusion samplers,
    /// velocity for flow matching.
    pub fn objective(self) -> Objective {
        match self {
            SamplerKind::Ddpm | SamplerKind::Ddim => Objective::Noise,
            SamplerKind::FlowMatching => Objective::Velocity,
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = GenError;
    fn from_str(s: &str) -> Result<Self, GenError> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| GenError::InvalidConfig(format!("unknown sampler {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Noise,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Diffusion steps `K` of the training schedule.
    pub train_steps: usize,
    /// Reverse steps at inference.
    pub sample_steps: usize,
    /// Clip the predicted clean sample to `[-1, 1]` inside the diffusion
    /// updates.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        let sample_steps = match kind {
            SamplerKind::Ddpm => 100,
            SamplerKind::Ddim | SamplerKind::FlowMatching => 10,
        };
        Self { kind, train_steps: 100, sample_steps, clip_denoised: true }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.train_steps < 2 || self.sample_steps == 0 {
            return Err(GenError::InvalidConfig("train_steps must be ≥ 2 and sample_steps ≥ 1".into()));
        }
        match self.kind {
            SamplerKind::Ddpm if self.sample_steps != self.train_steps => {
                Err(GenError::InvalidConfig("ancestral sampling runs every diffusion step".into()))
            }
            SamplerKind::Ddim if self.sample_steps > self.train_steps => {
                Err(GenError::InvalidConfig("ddim cannot take more steps than the schedule has".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A model queried by the samplers. `x` holds `batch` rows of `dim()`
/// values; the result has the same shape.
pub trait Denoiser {
    fn dim(&self) -> usize;
    fn predict(&mut self, x: &[f64], batch: usize, t: f64) -> Vec<f64>;
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn clip(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
}

/// Draws starting noise and runs the configured sampler.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &mut D,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    batch: usize,
    rng: &mut R,
) -> Vec<f64> {
    match cfg.kind {
        SamplerKind::Ddpm => ddpm_sample(den, sched, batch, cfg.clip_denoised, false, rng),
        SamplerKind::Ddim => {
            let x = normal_vec(rng, batch * den.dim());
            ddim_sample(den, sched, cfg.sample_steps, x, batch, cfg.clip_denoised)
        }
        SamplerKind::FlowMatching => {
            let x = normal_vec(rng, batch * den.dim());
            fm_sample(den, cfg.sample_steps, x, batch)
        }
    }
}

/// Ancestral sampling over all `K` steps.
///
/// Each step forms the clean estimate `â₀ = (a_k − √(1−ᾱ_k)·ε̂)/√ᾱ_k`,
/// optionally clips it, and moves to the posterior mean
/// `√ᾱ_{k−1}β_k/(1−ᾱ_k)·â₀ + √α_k(1−ᾱ_{k−1})/(1−ᾱ_k)·a_k`. Without clipping
/// this is the same update as `(a_k − β_k/√(1−ᾱ_k)·ε̂)/√α_k`. Fresh noise of
/// variance `β̃_k` is added for `k > 1` unless `zero_noise` is set.
pub fn ddpm_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &mut D,
    sched: &NoiseSchedule,
    batch: usize,
    clip_denoised: bool,
    zero_noise: bool,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = normal_vec(rng, batch * den.dim());
    for k in (1..=sched.k).rev() {
        let eps = den.predict(&x, batch, k as f64 / sched.k as f64);
        let ab = sched.alpha_bar[k];
        let ab_prev = sched.alpha_bar[k - 1];
        let beta = sched.beta[k];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = if k > 1 && !zero_noise { sched.posterior_variance(k).sqrt() } else { 0.0 };
        for (xi, &e) in x.iter_mut().zip(&eps) {
            let mut x0 = (*xi - sn * e) / sa;
            if clip_denoised {
                x0 = x0.clamp(-1.0, 1.0);
            }
            *xi = c0 * x0 + ct * *xi;
        }
        if sigma > 0.0 {
            for xi in x.iter_mut() {
                *xi += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    clip(&mut x);
    x
}

/// Evenly spaced diffusion steps from `K` down to 0 (`steps + 1` entries).
pub fn ddim_timesteps(k: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..=steps).rev().map(|i| (i * k + steps / 2) / steps).collect();
    ts.dedup();
    ts
}

/// Deterministic DDIM (`η = 0`) from the given starting noise.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    den: &mut D,
    sched: &NoiseSchedule,
    steps: usize,
    mut x: Vec<f64>,
    batch: usize,
    clip_denoised: bool,
) -> Vec<f64> {
    let ts = ddim_timesteps(sched.k, steps.clamp(1, sched.k));
    for pair in ts.windows(2) {
        let (k, next) = (pair[0], pair[1]);
        let eps = den.predict(&x, batch, k as f64 / sched.k as f64);
        let ab = sched.alpha_bar[k];
        let ab_next = sched.alpha_bar[next];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (xi, &e) in x.iter_mut().zip(&eps) {
            let mut x0 = (*xi - sn * e) / sa;
            if clip_denoised {
                x0 = x0.clamp(-1.0, 1.0);
            }
            *xi = ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * e;
        }
    }
    clip(&mut x);
    x
}

/// Euler integration of the learned velocity from `t = 0` to `t = 1`.
pub fn fm_sample<D: Denoiser + ?Sized>(den: &mut D, steps: usize, mut x: Vec<f64>, batch: usize) -> Vec<f64> {
    let h = 1.0 / steps as f64;
    for i in 0..steps {
        let v = den.predict(&x, batch, i as f64 * h);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += h * vi;
        }
    }
    clip(&mut x);
    x
}

/// Network input row: `[cond, time embedding, x]`.
pub fn assemble_input<T: Real>(out: &mut Vec<T>, cond: &[T], t: f64, embed_dim: usize, x: &[T]) {
    out.extend_from_slice(cond);
    out.extend(embed_fraction(t, embed_dim).into_iter().map(T::of));
    out.extend_from_slice(x);
}

/// Mean over rows of `‖net(row) − target‖²` and its parameter gradients.
pub fn regression_loss<T: Real>(
    params: &Params<T>,
    inputs: &[T],
    targets: &[T],
    batch: usize,
) -> Result<(f64, Grads<T>), GenError> {
    let (out, cache) = forward_batch(params, inputs, batch)?;
    if out.len() != targets.len() {
        return Err(NetError::ShapeMismatch(format!("{} outputs vs {} targets", out.len(), targets.len())).into());
    }
    let scale = T::of(2.0 / batch as f64);
    let mut loss = 0.0;
    let grad: Vec<T> = out
        .iter()
        .zip(targets)
        .map(|(&o, &y)| {
            let d = o - y;
            loss += d.as_f64() * d.as_f64();
            d * scale
        })
        .collect();
    let loss = loss / batch as f64;
    if !loss.is_finite() {
        return Err(GenError::NonFiniteLoss(loss));
    }
    Ok((loss, backward_batch(params, &cache, &grad, false)?))
}

/// Noise-prediction loss for a batch: row `b` is noised to level `ks[b]`
/// with `eps[b]` and the network must recover `eps[b]`.
pub fn ddpm_loss_batch<T: Real>(
    params: &Params<T>,
    conds: &[T],
    actions: &[T],
    ks: &[usize],
    eps: &[T],
    sched: &NoiseSchedule,
) -> Result<(f64, Grads<T>), GenError> {
    let batch = ks.len();
    let d = actions.len() / batch.max(1);
    let c = conds.len() / batch.max(1);
    let embed = params.spec.timestep_embed_dim;
    let mut inputs = Vec::with_capacity(batch * params.spec.input_dim());
    let mut noisy = vec![T::zero(); d];
    for b in 0..batch {
        let ab = sched.alpha_bar[ks[b]];
        let (sa, sn) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        for i in 0..d {
            noisy[i] = sa * actions[b * d + i] + sn * eps[b * d + i];
        }
        assemble_input(&mut inputs, &conds[b * c..(b + 1) * c], ks[b] as f64 / sched.k as f64, embed, &noisy);
    }
    regression_loss(params, &inputs, eps, batch)
}

/// Single-sample noise-prediction loss `‖ε − net(a_k, k, cond)‖²`.
pub fn ddpm_loss<T: Real>(
    params: &Params<T>,
    cond: &[T],
    a: &[T],
    k: usize,
    eps: &[T],
    sched: &NoiseSchedule,
) -> Result<(f64, Grads<T>), GenError> {
    ddpm_loss_batch(params, cond, a, &[k], eps, sched)
}

/// Velocity loss for a batch: `x_t = (1−t)·ε + t·a`, target `a − ε`.
pub fn fm_loss_batch<T: Real>(
    params: &Params<T>,
    conds: &[T],
    actions: &[T],
    ts: &[f64],
    eps: &[T],
) -> Result<(f64, Grads<T>), GenError> {
    let batch = ts.len();
    let d = actions.len() / batch.max(1);
    let c = conds.len() / batch.max(1);
    let embed = params.spec.timestep_embed_dim;
    let mut inputs = Vec::with_capacity(batch * params.spec.input_dim());
    let mut targets = Vec::with_capacity(batch * d);
    let mut xt = vec![T::zero(); d];
    for b in 0..batch {
        let t = T::of(ts[b]);
        for i in 0..d {
            let (a, e) = (actions[b * d + i], eps[b * d + i]);
            xt[i] = (T::one() - t) * e + t * a;
            targets.push(a - e);
        }
        assemble_input(&mut inputs, &conds[b * c..(b + 1) * c], ts[b], embed, &xt);
    }
    regression_loss(params, &inputs, &targets, batch)
}

/// Single-sample velocity loss.
pub fn fm_loss<T: Real>(params: &Params<T>, cond: &[T], a: &[T], t: f64, eps: &[T]) -> Result<(f64, Grads<T>), GenError> {
    fm_loss_batch(params, cond, a, &[t], eps)
}

/// A trained network bound to one conditioning vector. The first-layer
/// contribution of the conditioning is computed once and reused for every
/// denoising step.
#[derive(Debug, Clone)]
pub struct NetDenoiser<'a> {
    params: &'a Params<f32>,
    partial: Vec<f32>,
    action_dim: usize,
    tail: Vec<f32>,
}

impl<'a> NetDenoiser<'a> {
    pub fn new(params: &'a Params<f32>, cond: &[f32]) -> Result<Self, GenError> {
        let embed = params.spec.timestep_embed_dim;
        let in_dim = params.spec.input_dim();
        if cond.len() + embed >= in_dim {
            return Err(NetError::ShapeMismatch(format!("conditioning of {} leaves no room for the action", cond.len())).into());
        }
        let action_dim = in_dim - cond.len() - embed;
        if action_dim != params.spec.output_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "conditioning of {} implies action dim {action_dim}, network outputs {}",
                cond.len(),
                params.spec.output_dim()
            ))
            .into());
        }
        Ok(Self { params, partial: first_layer_prefix(params, cond)?, action_dim, tail: Vec::new() })
    }
}

impl Denoiser for NetDenoiser<'_> {
    fn dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&mut self, x: &[f64], batch: usize, t: f64) -> Vec<f64> {
        let emb: Vec<f32> = embed_fraction(t, self.params.spec.timestep_embed_dim).into_iter().map(|v| v as f32).collect();
        self.tail.clear();
        for row in x.chunks_exact(self.action_dim) {
            self.tail.extend_from_slice(&emb);
            self.tail.extend(row.iter().map(|&v| v as f32));
        }
        forward_with_prefix(self.params, &self.partial, &self.tail, batch)
            .expect("shapes fixed at construction")
            .into_iter()
            .map(f64::from)
            .collect()
    }
}

/// Exact noise predictor for a dataset holding the single point `a0`.
#[derive(Debug, Clone)]
pub struct SinglePointNoise<'a> {
    pub a0: Vec<f64>,
    pub sched: &'a NoiseSchedule,
}

impl Denoiser for SinglePointNoise<'_> {
    fn dim(&self) -> usize {
        self.a0.len()
    }

    fn predict(&mut self, x: &[f64], _batch: usize, t: f64) -> Vec<f64> {
        let k = (t * self.sched.k as f64).round() as usize;
        let ab = self.sched.alpha_bar[k];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.chunks_exact(self.a0.len()).flat_map(|row| row.iter().zip(&self.a0).map(move |(&xi, &a)| (xi - sa * a) / sn)).collect()
    }
}

/// Exact velocity for a dataset holding the single point `a0`.
#[derive(Debug, Clone)]
pub struct SinglePointVelocity {
    pub a0: Vec<f64>,
}

impl Denoiser for SinglePointVelocity {
    fn dim(&self) -> usize {
        self.a0.len()
    }

    fn predict(&mut self, x: &[f64], _batch: usize, t: f64) -> Vec<f64> {
        x.chunks_exact(self.a0.len())
            .flat_map(|row| row.iter().zip(&self.a0).map(move |(&xi, &a)| (a - xi) / (1.0 - t)))
            .collect()
    }
}

/// Fits an unconditional network to `data` (rows of `dim` values) with the
/// objective of `cfg.kind`, using AdamW minibatches with the learning rate
/// annealed to zero along a half cosine. Meant for small
/// synthetic distributions; the result plugs into [`NetDenoiser`] with an
/// empty conditioning vector.
pub fn fit_unconditional<R: Rng + ?Sized>(
    data: &[f64],
    dim: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    spec: &NetSpec,
    opt: &OptConfig,
    rng: &mut R,
) -> Result<Params<f32>, GenError> {
    cfg.validate()?;
    opt.validate()?;
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(GenError::InvalidConfig(format!("{} values do not form rows of {dim}", data.len())));
    }
    if spec.input_dim() != spec.timestep_embed_dim + dim || spec.output_dim() != dim {
        return Err(NetError::ShapeMismatch(format!("network does not map {dim} values plus time to {dim}")).into());
    }
    let mut params = Params::<f32>::init(spec, rng.next_u64());
    let mut state = OptState::new(&params);
    let n = data.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    let total = (opt.epochs * n.div_ceil(opt.batch_size)) as f64;
    let mut step_opt = *opt;
    let mut step = 0.0;
    for _ in 0..opt.epochs {
        order.shuffle(rng);
        for idx in order.chunks(opt.batch_size) {
            step_opt.lr = opt.lr * 0.5 * (1.0 + (std::f64::consts::PI * step / total).cos());
            step += 1.0;
            let rows: Vec<f32> = idx.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().map(|&v| v as f32)).collect();
            let eps: Vec<f32> = (0..rows.len()).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            let (loss, grads) = match cfg.kind.objective() {
                Objective::Noise => {
                    let ks: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.k)).collect();
                    ddpm_loss_batch(&params, &[], &rows, &ks, &eps, sched)?
                }
                Objective::Velocity => {
                    let ts: Vec<f64> = idx.iter().map(|_| rng.random::<f64>()).collect();
                    fm_loss_batch(&params, &[], &rows, &ts, &eps)?
                }
            };
            if !loss.is_finite() {
                return Err(GenError::NonFiniteLoss(loss));
            }
            adamw_step(&mut params, &grads, &step_opt, &mut state)?;
        }
    }
    Ok(params)
}

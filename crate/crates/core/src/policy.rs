//! Policy variants, conditioned-observation assembly, supervised training on
//! demonstrations and closed-loop rollouts.
//!
//! Four variants share one network design and differ only in what they see:
//!
//! | variant      | image channels                                   |
//! |--------------|--------------------------------------------------|
//! | `dp`         | global, aux (current step)                        |
//! | `dp_histact` | global, aux for each of the last 8 steps          |
//! | `tf_trace`   | global, aux, trace raster                         |
//! | `tf_full`    | field-modulated global, aux, trace raster         |
//!
//! The conditioning vector is the flattened channels followed by the
//! normalized end-effector positions of the observation window.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::genmodel::{self, cosine_schedule, GenError, NetDenoiser, NoiseSchedule, Objective, SamplerConfig, SamplerKind};
use crate::geometry::{project_trace, CameraModel, MotionTrace, Pixel, Point3};
use crate::simenv::{check_success, CameraId, Dataset, Env, EnvState, Observation, SimError, TaskName};
use crate::tff::{apply_field, extend_field_in_place, extend_trace_raster, rasterize_trace, render_field, FieldConfig, FocusField, GrayImage};
use crate::tinynet::{adamw_step, Activation, NetCheckpoint, NetError, NetSpec, OptConfig, OptState, Params};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint was trained on scene {checkpoint}, environment is {env}")]
    SceneMismatch { checkpoint: String, env: String },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("{0}")]
    Invalid(String),
    #[error("successor waypoints coincide")]
    DegenerateModes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    Dp,
    DpHistAct,
    TfTrace,
    TfFull,
}

impl VariantKind {
    /// Table order.
    pub const ALL: [VariantKind; 4] = [VariantKind::Dp, VariantKind::DpHistAct, VariantKind::TfTrace, VariantKind::TfFull];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Dp => "dp",
            VariantKind::DpHistAct => "dp_histact",
            VariantKind::TfTrace => "tf_trace",
            VariantKind::TfFull => "tf_full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Dp => "DP",
            VariantKind::DpHistAct => "DP-HistAct",
            VariantKind::TfTrace => "TF-DP (trace)",
            VariantKind::TfFull => "TF-DP",
        }
    }

    pub fn uses_trace(self) -> bool {
        matches!(self, VariantKind::TfTrace | VariantKind::TfFull)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, PolicyError> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| PolicyError::Invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub obs_history: usize,
    pub pred_horizon: usize,
    pub exec_horizon: usize,
    /// Also condition on the actions issued over the observation window.
    pub history_actions: bool,
}

impl VariantSpec {
    pub fn new(kind: VariantKind) -> Self {
        let obs_history = if kind == VariantKind::DpHistAct { 8 } else { 1 };
        Self { kind, obs_history, pred_horizon: 4, exec_horizon: 4, history_actions: false }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.obs_history == 0 || self.pred_horizon == 0 || self.exec_horizon == 0 || self.exec_horizon > self.pred_horizon {
            return Err(PolicyError::Invalid(format!("bad horizons {self:?}")));
        }
        Ok(())
    }

    /// Image channels per conditioned observation.
    pub fn channel_count(&self) -> usize {
        match self.kind {
            VariantKind::Dp => 2,
            VariantKind::DpHistAct => 2 * self.obs_history,
            VariantKind::TfTrace | VariantKind::TfFull => 3,
        }
    }

    /// Length of the stacked image channels, the conditioned-input length
    /// used as the memory proxy.
    pub fn observation_len(&self, pixels: usize) -> usize {
        self.channel_count() * pixels
    }

    /// Length of the flattened conditioning vector.
    pub fn cond_dim(&self, pixels: usize) -> usize {
        let actions = if self.history_actions { 3 * self.obs_history } else { 0 };
        self.channel_count() * pixels + POSITION_FEATURES * self.obs_history + actions
    }

    pub fn action_dim(&self) -> usize {
        3 * self.pred_horizon
    }
}

/// Octaves of the sinusoidal position encoding.
pub const POSITION_OCTAVES: usize = 6;
/// Conditioning entries per end-effector position.
pub const POSITION_FEATURES: usize = 3 * (1 + 2 * POSITION_OCTAVES);

/// Appends a normalized position followed by `sin`/`cos` of it at
/// doubling frequencies.
pub fn encode_position(norm: &Normalizer, p: Point3, out: &mut Vec<f32>) {
    let v = norm.normalize(p);
    out.extend(v.map(|x| x as f32));
    for j in 0..POSITION_OCTAVES {
        let f = std::f64::consts::PI * (1u32 << j) as f64;
        for x in v {
            let (sn, cs) = (f * x).sin_cos();
            out.push(sn as f32);
            out.push(cs as f32);
        }
    }
}

/// Maps positions to `[-1, 1]` per axis using dataset bounds widened by 5%.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

const NORM_MARGIN: f64 = 0.05;
const NORM_MIN_RANGE: f64 = 1e-3;

impl Normalizer {
    pub fn fit(points: impl IntoIterator<Item = Point3>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (i, v) in p.to_array().into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        for i in 0..3 {
            if !lo[i].is_finite() {
                (lo[i], hi[i]) = (-1.0, 1.0);
            }
            let mid = 0.5 * (lo[i] + hi[i]);
            let half = 0.5 * (hi[i] - lo[i]).max(NORM_MIN_RANGE) * (1.0 + 2.0 * NORM_MARGIN);
            (lo[i], hi[i]) = (mid - half, mid + half);
        }
        Self { lo, hi }
    }

    pub fn normalize(&self, p: Point3) -> [f64; 3] {
        let a = p.to_array();
        std::array::from_fn(|i| 2.0 * (a[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0)
    }

    pub fn denormalize(&self, v: [f64; 3]) -> Point3 {
        Point3::from_array(std::array::from_fn(|i| self.lo[i] + (v[i] + 1.0) * 0.5 * (self.hi[i] - self.lo[i])))
    }
}

/// Static inputs of the conditioning step: the global camera, the field
/// settings and the empty-scene backdrops that raw camera channels are
/// encoded against.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub cam: CameraModel,
    pub field: FieldConfig,
    global_bg: Vec<f32>,
    aux_bg: Vec<f32>,
}

impl Conditioner {
    pub fn from_env(env: &Env) -> Self {
        Self {
            cam: *env.camera(CameraId::Global),
            field: env.field,
            global_bg: env.backdrop(CameraId::Global).data().to_vec(),
            aux_bg: env.backdrop(CameraId::Aux).data().to_vec(),
        }
    }

    pub fn pixels(&self) -> usize {
        self.cam.width * self.cam.height
    }

    fn encode(&self, image: &GrayImage, source: Option<CameraId>, out: &mut Vec<f32>) {
        match source {
            None => out.extend_from_slice(image.data()),
            Some(id) => {
                let bg = if id == CameraId::Global { &self.global_bg } else { &self.aux_bg };
                out.extend(image.data().iter().zip(bg).map(|(v, b)| v - b));
            }
        }
    }

    /// The per-step channel block of a variant (without history stacking).
    fn step_block(&self, canvas: &TraceCanvas, kind: VariantKind, obs: &Observation, out: &mut Vec<f32>) {
        match kind {
            VariantKind::Dp | VariantKind::DpHistAct | VariantKind::TfTrace => {
                self.encode(&obs.global, Some(CameraId::Global), out);
                self.encode(&obs.aux, Some(CameraId::Aux), out);
            }
            VariantKind::TfFull => {
                self.encode(&apply_field(&obs.global, &canvas.field).expect("same camera"), None, out);
                self.encode(&obs.aux, Some(CameraId::Aux), out);
            }
        }
        if kind.uses_trace() {
            out.extend_from_slice(canvas.raster.data());
        }
    }
}

/// Conditioned observation before flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedObservation {
    pub channels: Vec<GrayImage>,
    /// Camera a channel was copied from unchanged, if any. Such channels are
    /// encoded relative to that camera's backdrop.
    pub sources: Vec<Option<CameraId>>,
    pub ee_history: Vec<Point3>,
    /// The window was shorter than the variant's history and was padded by
    /// repeating its earliest observation.
    pub padded: bool,
}

impl ConditionedObservation {
    pub fn flatten(&self, conditioner: &Conditioner, norm: &Normalizer, past_actions: Option<&[Point3]>) -> Vec<f32> {
        let mut out = Vec::new();
        for (c, &src) in self.channels.iter().zip(&self.sources) {
            conditioner.encode(c, src, &mut out);
        }
        for &p in &self.ee_history {
            encode_position(norm, p, &mut out);
        }
        if let Some(acts) = past_actions {
            out.extend(acts.iter().flat_map(|&p| norm.normalize(p)).map(|v| v as f32));
        }
        out
    }
}

/// Builds the conditioned observation for the newest entry of `obs_window`,
/// rendering the field and trace raster from scratch.
pub fn build_conditioned(
    variant: &VariantSpec,
    obs_window: &[Observation],
    trace: &MotionTrace,
    conditioner: &Conditioner,
) -> Result<ConditionedObservation, PolicyError> {
    let (cam, field_cfg) = (&conditioner.cam, &conditioner.field);
    let first = obs_window.first().ok_or_else(|| PolicyError::Invalid("empty observation window".into()))?;
    let padded = obs_window.len() < variant.obs_history;
    let start = obs_window.len().saturating_sub(variant.obs_history);
    let mut window: Vec<&Observation> = vec![first; variant.obs_history.saturating_sub(obs_window.len())];
    window.extend(&obs_window[start..]);
    let current = *window.last().unwrap();
    let (g, a) = (Some(CameraId::Global), Some(CameraId::Aux));
    let (channels, sources) = match variant.kind {
        VariantKind::Dp => (vec![current.global.clone(), current.aux.clone()], vec![g, a]),
        VariantKind::DpHistAct => (
            window.iter().flat_map(|o| [o.global.clone(), o.aux.clone()]).collect(),
            window.iter().flat_map(|_| [g, a]).collect(),
        ),
        VariantKind::TfTrace | VariantKind::TfFull => {
            let px = project_trace(cam, trace).pixels;
            let raster = rasterize_trace(&px, cam.width, cam.height);
            if variant.kind == VariantKind::TfFull {
                let field = render_field(&px, field_cfg, cam.width, cam.height);
                let global = apply_field(&current.global, &field).map_err(|e| PolicyError::Invalid(e.to_string()))?;
                (vec![global, current.aux.clone(), raster], vec![None, a, None])
            } else {
                (vec![current.global.clone(), current.aux.clone(), raster], vec![g, a, None])
            }
        }
    };
    Ok(ConditionedObservation { channels, sources, ee_history: window.iter().map(|o| o.ee).collect(), padded })
}

/// Field and trace raster maintained one end-effector position at a time.
#[derive(Debug, Clone)]
pub struct TraceCanvas {
    cam: CameraModel,
    cfg: FieldConfig,
    pub field: FocusField,
    pub raster: GrayImage,
    last: Option<Pixel>,
    pub dropped: usize,
}

impl TraceCanvas {
    pub fn new(cam: &CameraModel, cfg: &FieldConfig) -> Self {
        Self {
            cam: *cam,
            cfg: *cfg,
            field: FocusField::empty(cfg, cam.width, cam.height),
            raster: GrayImage::zeros(cam.width, cam.height),
            last: None,
            dropped: 0,
        }
    }

    pub fn push(&mut self, p: Point3) {
        match self.cam.project_world(p) {
            Ok(px) => {
                extend_field_in_place(&mut self.field, px, &self.cfg);
                extend_trace_raster(&mut self.raster, self.last, px);
                self.last = Some(px);
            }
            Err(_) => self.dropped += 1,
        }
    }

}

/// Everything a rollout needs besides the environment.
#[derive(Debug, Clone)]
pub struct PolicyCheckpoint {
    pub params: Params<f32>,
    pub opt: Option<OptState<f32>>,
    pub variant: VariantSpec,
    pub sampler: SamplerConfig,
    /// Positions (end-effector history).
    pub normalizer: Normalizer,
    /// Chunk targets relative to the end-effector position at decision time.
    pub offsets: Normalizer,
    pub field: FieldConfig,
    pub scene_hash: String,
    pub task: TaskName,
    pub epoch_losses: Vec<f64>,
}

impl PolicyCheckpoint {
    pub fn to_net_checkpoint(&self) -> NetCheckpoint {
        let v = &self.variant;
        let n = &self.normalizer;
        let fmt3 = |a: [f64; 3]| format!("{:?} {:?} {:?}", a[0], a[1], a[2]);
        let mut metadata = vec![
            ("task".to_string(), self.task.to_string()),
            ("scene_hash".into(), self.scene_hash.clone()),
            ("variant".into(), v.kind.to_string()),
            ("obs_history".into(), v.obs_history.to_string()),
            ("pred_horizon".into(), v.pred_horizon.to_string()),
            ("exec_horizon".into(), v.exec_horizon.to_string()),
            ("history_actions".into(), v.history_actions.to_string()),
            ("sampler".into(), self.sampler.kind.to_string()),
            ("train_steps".into(), self.sampler.train_steps.to_string()),
            ("sample_steps".into(), self.sampler.sample_steps.to_string()),
            ("clip_denoised".into(), self.sampler.clip_denoised.to_string()),
            ("norm_lo".into(), fmt3(n.lo)),
            ("norm_hi".into(), fmt3(n.hi)),
            ("offset_lo".into(), fmt3(self.offsets.lo)),
            ("offset_hi".into(), fmt3(self.offsets.hi)),
            ("field_sigma".into(), format!("{:?}", self.field.sigma)),
            ("field_floor".into(), format!("{:?}", self.field.floor)),
            ("field_stride".into(), self.field.stride.to_string()),
        ];
        if !self.epoch_losses.is_empty() {
            let losses: Vec<String> = self.epoch_losses.iter().map(|l| format!("{l:?}")).collect();
            metadata.push(("epoch_losses".into(), losses.join(" ")));
        }
        NetCheckpoint { params: self.params.clone(), opt: self.opt.clone(), metadata }
    }

    pub fn from_net_checkpoint(ck: NetCheckpoint) -> Result<Self, PolicyError> {
        let get = |k: &str| ck.meta(k).ok_or_else(|| PolicyError::Metadata(format!("missing {k}")));
        fn parse<T: FromStr>(k: &str, v: &str) -> Result<T, PolicyError> {
            v.parse().map_err(|_| PolicyError::Metadata(format!("bad {k}: {v:?}")))
        }
        let triple = |k: &str| -> Result<[f64; 3], PolicyError> {
            let v: Vec<f64> = get(k)?.split_whitespace().map(|s| parse(k, s)).collect::<Result<_, _>>()?;
            v.try_into().map_err(|_| PolicyError::Metadata(format!("{k} needs 3 numbers")))
        };
        let variant = VariantSpec {
            kind: get("variant")?.parse()?,
            obs_history: parse("obs_history", get("obs_history")?)?,
            pred_horizon: parse("pred_horizon", get("pred_horizon")?)?,
            exec_horizon: parse("exec_horizon", get("exec_horizon")?)?,
            history_actions: parse("history_actions", get("history_actions")?)?,
        };
        variant.validate()?;
        let sampler = SamplerConfig {
            kind: get("sampler")?.parse()?,
            train_steps: parse("train_steps", get("train_steps")?)?,
            sample_steps: parse("sample_steps", get("sample_steps")?)?,
            clip_denoised: parse("clip_denoised", get("clip_denoised")?)?,
        };
        sampler.validate()?;
        let field = FieldConfig::new(
            parse("field_sigma", get("field_sigma")?)?,
            parse("field_floor", get("field_floor")?)?,
            parse("field_stride", get("field_stride")?)?,
        )
        .map_err(|e| PolicyError::Metadata(e.to_string()))?;
        let epoch_losses = match ck.meta("epoch_losses") {
            Some(s) => s.split_whitespace().map(|v| parse("epoch_losses", v)).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let out = Self {
            variant,
            sampler,
            normalizer: Normalizer { lo: triple("norm_lo")?, hi: triple("norm_hi")? },
            offsets: Normalizer { lo: triple("offset_lo")?, hi: triple("offset_hi")? },
            field,
            scene_hash: get("scene_hash")?.to_string(),
            task: TaskName::parse(get("task")?)?,
            epoch_losses,
            params: ck.params,
            opt: ck.opt,
        };
        if out.params.spec.output_dim() != variant.action_dim() {
            return Err(PolicyError::Metadata("network output does not match the action chunk".into()));
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_net_checkpoint().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        Self::from_net_checkpoint(NetCheckpoint::decode(bytes)?)
    }

    /// A checkpoint with freshly initialized weights for `env`, usable
    /// before (or instead of) training.
    pub fn untrained(
        env: &Env,
        scene_hash: &str,
        variant: VariantSpec,
        sampler: SamplerConfig,
        hidden: &[usize],
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let cam = env.camera(CameraId::Global);
        let spec = net_spec(&variant, cam.width * cam.height, hidden, embed_dim)?;
        let (lo, hi) = env.bounds;
        let reach = env.max_step * variant.pred_horizon as f64;
        Ok(Self {
            params: Params::init(&spec, seed),
            opt: None,
            variant,
            sampler,
            normalizer: Normalizer::fit([lo, hi]),
            offsets: Normalizer::fit([Point3::new(-reach, -reach, -reach), Point3::new(reach, reach, reach)]),
            field: env.field,
            scene_hash: scene_hash.to_string(),
            task: env.task.name,
            epoch_losses: Vec::new(),
        })
    }

    pub fn check_scene(&self, scene_hash: &str) -> Result<(), PolicyError> {
        if self.scene_hash != scene_hash {
            return Err(PolicyError::SceneMismatch { checkpoint: self.scene_hash.clone(), env: scene_hash.to_string() });
        }
        Ok(())
    }
}

/// Network shape for a variant: `[cond, embedding, chunk] → hidden… → chunk`.
pub fn net_spec(variant: &VariantSpec, pixels: usize, hidden: &[usize], embed_dim: usize) -> Result<NetSpec, PolicyError> {
    let a = variant.action_dim();
    let mut widths = vec![variant.cond_dim(pixels) + embed_dim + a];
    widths.extend_from_slice(hidden);
    widths.push(a);
    Ok(NetSpec::new(widths, Activation::Tanh, embed_dim)?)
}

/// Training settings beyond the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub sampler: SamplerConfig,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub opt: OptConfig,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Keep an exponential moving average of the weights and return it.
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

/// Learning rate of the default recipe.
pub const DEFAULT_LR: f64 = 3e-3;
/// Epochs of the default recipe.
pub const DEFAULT_EPOCHS: usize = 400;
/// EMA decay of the default recipe.
pub const DEFAULT_EMA: f64 = 0.995;

impl TrainConfig {
    /// The default recipe: AdamW at `DEFAULT_LR` with cosine decay over
    /// `DEFAULT_EPOCHS`, returning EMA weights.
    pub fn new(kind: VariantKind, sampler: SamplerKind) -> Self {
        let opt = OptConfig { lr: DEFAULT_LR, epochs: DEFAULT_EPOCHS, ..OptConfig::default() };
        Self {
            variant: VariantSpec::new(kind),
            sampler: SamplerConfig::new(sampler),
            hidden: vec![256, 256],
            embed_dim: 32,
            opt,
            cosine_decay: true,
            ema_decay: Some(DEFAULT_EMA),
            seed: 0,
        }
    }

    /// Constant learning rate from `OptConfig::default()`, no EMA.
    pub fn plain(kind: VariantKind, sampler: SamplerKind) -> Self {
        Self { opt: OptConfig::default(), cosine_decay: false, ema_decay: None, ..Self::new(kind, sampler) }
    }
}

/// Flattened training samples: one conditioning vector and one normalized
/// action chunk per (demo, step).
struct TrainingSet {
    conds: Vec<f32>,
    actions: Vec<f32>,
    cond_dim: usize,
    action_dim: usize,
}

impl TrainingSet {
    fn len(&self) -> usize {
        self.actions.len() / self.action_dim
    }
}

/// Renders each demonstration's trace open-loop from its recorded positions
/// and flattens every step.
fn build_training_set(
    dataset: &Dataset,
    variant: &VariantSpec,
    conditioner: &Conditioner,
    norm: &Normalizer,
    offsets: &Normalizer,
) -> TrainingSet {
    let pixels = conditioner.pixels();
    let cond_dim = variant.cond_dim(pixels);
    let action_dim = variant.action_dim();
    let total = dataset.total_steps();
    let mut conds = Vec::with_capacity(total * cond_dim);
    let mut actions = Vec::with_capacity(total * action_dim);
    let block = variant.kind.uses_trace().then_some(3).unwrap_or(2) * pixels;
    for demo in &dataset.demos {
        let mut canvas = TraceCanvas::new(&conditioner.cam, &conditioner.field);
        let mut blocks: Vec<Vec<f32>> = Vec::with_capacity(demo.len());
        for (t, obs) in demo.observations.iter().enumerate() {
            canvas.push(obs.ee);
            let mut b = Vec::with_capacity(block);
            conditioner.step_block(&canvas, variant.kind, obs, &mut b);
            blocks.push(b);
            let window: Vec<usize> = (0..variant.obs_history).map(|j| (t + j + 1).saturating_sub(variant.obs_history)).collect();
            if variant.kind == VariantKind::DpHistAct {
                for &s in &window {
                    conds.extend_from_slice(&blocks[s]);
                }
            } else {
                conds.extend_from_slice(&blocks[t]);
            }
            for &s in &window {
                encode_position(norm, demo.observations[s].ee, &mut conds);
            }
            if variant.history_actions {
                for &s in &window {
                    let a = if s == 0 { demo.observations[0].ee } else { demo.actions[s - 1] };
                    conds.extend(norm.normalize(a).map(|v| v as f32));
                }
            }
            for h in 0..variant.pred_horizon {
                let a = demo.actions[(t + h).min(demo.len() - 1)] - obs.ee;
                actions.extend(offsets.normalize(a).map(|v| v as f32));
            }
        }
    }
    TrainingSet { conds, actions, cond_dim, action_dim }
}

/// Every chunk target of every step, relative to that step's position.
fn chunk_offsets(dataset: &Dataset, horizon: usize) -> impl Iterator<Item = Point3> + '_ {
    dataset.demos.iter().flat_map(move |d| {
        (0..d.len()).flat_map(move |t| (0..horizon).map(move |h| d.actions[(t + h).min(d.len() - 1)] - d.observations[t].ee))
    })
}

/// Fits a policy to demonstrations. Every epoch visits all (demo, step)
/// samples once in a seeded random order; each minibatch draws a fresh
/// noise level and noise per sample.
pub fn train_policy(
    dataset: &Dataset,
    conditioner: &Conditioner,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PolicyCheckpoint, PolicyError> {
    cfg.variant.validate()?;
    cfg.sampler.validate()?;
    cfg.opt.validate()?;
    if dataset.demos.is_empty() || dataset.total_steps() == 0 {
        return Err(PolicyError::Invalid("empty dataset".into()));
    }
    let norm = Normalizer::fit(dataset.demos.iter().flat_map(|d| d.actions.iter().chain(d.observations.iter().map(|o| &o.ee)).copied()));
    let offsets = Normalizer::fit(chunk_offsets(dataset, cfg.variant.pred_horizon));
    let set = build_training_set(dataset, &cfg.variant, conditioner, &norm, &offsets);
    let spec = net_spec(&cfg.variant, conditioner.pixels(), &cfg.hidden, cfg.embed_dim)?;
    let mut params = Params::<f32>::init(&spec, cfg.seed);
    let mut opt = OptState::new(&params);
    let sched = cosine_schedule(cfg.sampler.train_steps)?;
    let objective = cfg.sampler.kind.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.opt.epochs);
    let (c, d) = (set.cond_dim, set.action_dim);
    let mut conds = Vec::new();
    let mut acts = Vec::new();
    let mut eps = Vec::new();
    let total_steps = cfg.opt.epochs * n.div_ceil(cfg.opt.batch_size);
    let mut step_opt = cfg.opt;
    let mut ema = cfg.ema_decay.map(|_| params.clone());
    for epoch in 0..cfg.opt.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.opt.batch_size).enumerate() {
            conds.clear();
            acts.clear();
            eps.clear();
            for &i in idx {
                conds.extend_from_slice(&set.conds[i * c..(i + 1) * c]);
                acts.extend_from_slice(&set.actions[i * d..(i + 1) * d]);
            }
            eps.extend((0..idx.len() * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32));
            let result = match objective {
                Objective::Noise => {
                    let ks: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=sched.k)).collect();
                    genmodel::ddpm_loss_batch(&params, &conds, &acts, &ks, &eps, &sched)
                }
                Objective::Velocity => {
                    let ts: Vec<f64> = (0..idx.len()).map(|_| rng.random::<f64>()).collect();
                    genmodel::fm_loss_batch(&params, &conds, &acts, &ts, &eps)
                }
            };
            let (loss, grads) = result.map_err(|e| PolicyError::NonFiniteLoss {
                epoch,
                batch: bi,
                detail: format!("{e} (samples {:?})", &idx[..idx.len().min(8)]),
            })?;
            if cfg.cosine_decay {
                let progress = opt.step as f64 / total_steps as f64;
                step_opt.lr = cfg.opt.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            adamw_step(&mut params, &grads, &step_opt, &mut opt)
                .map_err(|e| PolicyError::NonFiniteLoss { epoch, batch: bi, detail: e.to_string() })?;
            if let (Some(avg), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
                let d = d as f32;
                for (a, p) in avg.slices_mut().zip(params.slices()) {
                    a.iter_mut().zip(p).for_each(|(a, &p)| *a = d * *a + (1.0 - d) * p);
                }
            }
            total += loss * idx.len() as f64;
        }
        let mean = total / n as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(PolicyCheckpoint {
        params: ema.unwrap_or(params),
        opt: Some(opt),
        variant: cfg.variant,
        sampler: cfg.sampler,
        normalizer: norm,
        offsets,
        field: conditioner.field,
        scene_hash: dataset.scene_hash.clone(),
        task: dataset.task,
        epoch_losses,
    })
}

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct Policy {
    pub ck: PolicyCheckpoint,
    pub sampler: SamplerConfig,
    sched: NoiseSchedule,
}

impl Policy {
    pub fn new(ck: PolicyCheckpoint) -> Result<Self, PolicyError> {
        let sampler = ck.sampler;
        Self::with_sampler(ck, sampler)
    }

    /// Uses a different sampler than the one recorded at training time
    /// (DDIM on a network trained for DDPM, for example).
    pub fn with_sampler(ck: PolicyCheckpoint, sampler: SamplerConfig) -> Result<Self, PolicyError> {
        sampler.validate()?;
        if sampler.kind.objective() != ck.sampler.kind.objective() {
            return Err(PolicyError::Invalid(format!("a {} network cannot drive the {} sampler", ck.sampler.kind, sampler.kind)));
        }
        let sched = cosine_schedule(sampler.train_steps)?;
        Ok(Self { ck, sampler, sched })
    }

    pub fn variant(&self) -> &VariantSpec {
        &self.ck.variant
    }

    /// Draws `n` action chunks for one conditioning vector, as absolute
    /// targets around the current position `ee`.
    pub fn sample_chunks<R: Rng + ?Sized>(
        &self,
        cond: &[f32],
        ee: Point3,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Point3>>, PolicyError> {
        let mut den = NetDenoiser::new(&self.ck.params, cond)?;
        let flat = genmodel::sample(&mut den, &self.sampler, &self.sched, n, rng);
        let h = self.ck.variant.pred_horizon;
        Ok(flat
            .chunks_exact(3 * h)
            .map(|row| row.chunks_exact(3).map(|a| ee + self.ck.offsets.denormalize([a[0], a[1], a[2]])).collect())
            .collect())
    }
}

/// Sliding window of recent observations plus the incrementally rendered
/// trace, producing conditioning vectors identical to the training ones.
#[derive(Debug, Clone)]
pub struct ObservationWindow {
    variant: VariantSpec,
    conditioner: Conditioner,
    canvas: TraceCanvas,
    window: VecDeque<(Vec<f32>, Point3, Point3)>,
    first: Option<(Vec<f32>, Point3, Point3)>,
    pub trace: MotionTrace,
    pub field_ms: f64,
}

impl ObservationWindow {
    pub fn new(variant: &VariantSpec, conditioner: &Conditioner) -> Self {
        Self {
            variant: *variant,
            conditioner: conditioner.clone(),
            canvas: TraceCanvas::new(&conditioner.cam, &conditioner.field),
            window: VecDeque::new(),
            first: None,
            trace: MotionTrace::new(),
            field_ms: 0.0,
        }
    }

    /// Records the observation of a new step. `prev_action` is the action
    /// that led here (the current position at reset).
    pub fn push(&mut self, obs: &Observation, prev_action: Point3) {
        self.trace.push_next(obs.ee).expect("positions are finite");
        let start = Instant::now();
        if self.variant.kind.uses_trace() {
            self.canvas.push(obs.ee);
        }
        let mut block = Vec::new();
        self.conditioner.step_block(&self.canvas, self.variant.kind, obs, &mut block);
        self.field_ms += start.elapsed().as_secs_f64() * 1e3;
        let entry = (block, obs.ee, prev_action);
        if self.first.is_none() {
            self.first = Some(entry.clone());
        }
        self.window.push_back(entry);
        while self.window.len() > self.variant.obs_history {
            self.window.pop_front();
        }
    }

    pub fn canvas(&self) -> &TraceCanvas {
        &self.canvas
    }

    pub fn cond(&self, norm: &Normalizer) -> Vec<f32> {
        let first = self.first.as_ref().expect("at least one observation");
        let pad = self.variant.obs_history - self.window.len();
        let rows: Vec<&(Vec<f32>, Point3, Point3)> = std::iter::repeat_n(first, pad).chain(self.window.iter()).collect();
        let mut out = Vec::new();
        if self.variant.kind == VariantKind::DpHistAct {
            rows.iter().for_each(|r| out.extend_from_slice(&r.0));
        } else {
            out.extend_from_slice(&rows.last().unwrap().0);
        }
        for r in &rows {
            encode_position(norm, r.1, &mut out);
        }
        if self.variant.history_actions {
            out.extend(rows.iter().flat_map(|r| norm.normalize(r.2)).map(|v| v as f32));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    pub max_steps: Option<usize>,
    pub distractors: usize,
    /// Stop as soon as a waypoint is entered out of order.
    pub stop_on_failure: bool,
    /// Steps at which to keep a copy of the incremental field.
    pub field_snapshots: Vec<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { max_steps: None, distractors: 0, stop_on_failure: true, field_snapshots: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub trajectory: Vec<EnvState>,
    pub success: bool,
    pub stages_completed: usize,
    pub trace: MotionTrace,
    /// Wall-clock per decision, milliseconds.
    pub per_step_ms: Vec<f64>,
    /// Field and raster upkeep charged to each decision, milliseconds.
    pub field_ms: Vec<f64>,
    pub decisions: usize,
    pub field_snapshots: Vec<(usize, FocusField)>,
}

/// Closed-loop execution with receding horizon. `choose` receives the
/// conditioning vector and returns a chunk of absolute targets; the first
/// `exec_horizon` of them are executed before asking again.
pub fn run_closed_loop(
    env: &Env,
    variant: &VariantSpec,
    norm: &Normalizer,
    seed: u64,
    opts: &RolloutOptions,
    mut choose: impl FnMut(&[f32], &EnvState) -> Result<Vec<Point3>, PolicyError>,
) -> Result<RolloutResult, PolicyError> {
    let max_steps = opts.max_steps.unwrap_or(env.task.horizon_cap);
    let mut state = env.reset(seed, opts.distractors)?;
    let mut win = ObservationWindow::new(variant, &Conditioner::from_env(env));
    win.push(&env.observe(&state), state.ee);
    let mut trajectory = vec![state.clone()];
    let mut per_step_ms = Vec::new();
    let mut field_ms = Vec::new();
    let mut snapshots = Vec::new();
    let stopped = |s: &EnvState| env.is_complete(s) || (opts.stop_on_failure && s.failed) || s.step_count >= max_steps;
    if opts.field_snapshots.contains(&0) {
        snapshots.push((0, win.canvas().field.clone()));
    }
    while !stopped(&state) {
        let start = Instant::now();
        let cond = win.cond(norm);
        let chunk = choose(&cond, &state)?;
        per_step_ms.push(start.elapsed().as_secs_f64() * 1e3 + win.field_ms);
        field_ms.push(win.field_ms);
        win.field_ms = 0.0;
        for &action in chunk.iter().take(variant.exec_horizon) {
            state = env.step(&state, action)?;
            win.push(&env.observe(&state), action);
            trajectory.push(state.clone());
            if opts.field_snapshots.contains(&state.step_count) {
                snapshots.push((state.step_count, win.canvas().field.clone()));
            }
            if stopped(&state) {
                break;
            }
        }
    }
    let (success, stages_completed) = check_success(&trajectory, &env.task);
    let decisions = per_step_ms.len();
    Ok(RolloutResult {
        trajectory,
        success,
        stages_completed,
        trace: win.trace,
        per_step_ms,
        field_ms,
        decisions,
        field_snapshots: snapshots,
    })
}

/// Runs the policy in closed loop. Sampling noise comes from stream 2 of a
/// generator seeded with `seed`; distractors from the reset stream.
pub fn rollout(policy: &Policy, env: &Env, scene_hash: &str, seed: u64, opts: &RolloutOptions) -> Result<RolloutResult, PolicyError> {
    policy.ck.check_scene(scene_hash)?;
    if policy.ck.task != env.task.name {
        return Err(PolicyError::Invalid(format!("checkpoint is for {}, environment runs {}", policy.ck.task, env.task.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    run_closed_loop(env, &policy.ck.variant, &policy.ck.normalizer, seed, opts, |cond, state| {
        Ok(policy.sample_chunks(cond, state.ee, 1, &mut rng)?.remove(0))
    })
}

/// Closed loop with the scripted expert choosing every action.
pub fn expert_in_the_loop(env: &Env, variant: &VariantSpec, seed: u64, opts: &RolloutOptions) -> Result<RolloutResult, PolicyError> {
    let (lo, hi) = env.bounds;
    let norm = Normalizer::fit([lo, hi]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_step = env.max_step;
    let task = env.task.clone();
    let exec = variant.exec_horizon;
    run_closed_loop(env, variant, &norm, seed, opts, |_, state| {
        let mut s = state.clone();
        let mut chunk = Vec::new();
        for _ in 0..exec {
            if env.is_complete(&s) {
                break;
            }
            let a = crate::simenv::expert_policy(&s, &task, max_step, 0.0, &mut rng)?;
            s = env.step(&s, a)?;
            chunk.push(a);
        }
        Ok(chunk)
    })
}

/// Outcome of a mode-purity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Purity {
    /// Fraction of committed chunks heading to the correct successor; NaN
    /// when no chunk committed before the redraw cap.
    pub purity_a: f64,
    pub purity_b: f64,
    /// Chunks that left the hold tolerance and were scored.
    pub committed_a: usize,
    pub committed_b: usize,
    /// Chunks that stayed within tolerance of the start and were redrawn.
    pub holds_a: usize,
    pub holds_b: usize,
}

/// One side of a purity probe: the observation history and trace leading
/// to the ambiguity state, and the waypoint the expert heads to next.
#[derive(Debug, Clone)]
pub struct ProbeHistory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Point3>,
    pub successor: Point3,
}

/// Samples chunks at an ambiguity state under two histories and reports, for
/// each, the fraction whose final target is nearer that history's correct
/// successor. Chunks that end within `hold_tolerance` of the current
/// position commit to neither successor and are redrawn (up to 20× `n`).
pub fn mode_purity(
    policy: &Policy,
    env: &Env,
    a: &ProbeHistory,
    b: &ProbeHistory,
    n: usize,
    hold_tolerance: f64,
    seed: u64,
) -> Result<Purity, PolicyError> {
    if a.successor.distance(b.successor) < 1e-12 {
        return Err(PolicyError::DegenerateModes);
    }
    let ea = a.observations.last().ok_or_else(|| PolicyError::Invalid("empty history".into()))?;
    let eb = b.observations.last().ok_or_else(|| PolicyError::Invalid("empty history".into()))?;
    if ea != eb {
        return Err(PolicyError::Invalid("the two histories end in different observations".into()));
    }
    let conditioner = Conditioner::from_env(env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = |h: &ProbeHistory, own: Point3, other: Point3| -> Result<(f64, usize, usize), PolicyError> {
        let mut win = ObservationWindow::new(&policy.ck.variant, &conditioner);
        for (obs, act) in h.observations.iter().zip(&h.actions) {
            win.push(obs, *act);
        }
        let cond = win.cond(&policy.ck.normalizer);
        let here = h.observations.last().unwrap().ee;
        let (mut hits, mut got, mut holds) = (0usize, 0usize, 0usize);
        while got < n && holds < 20 * n.max(1) {
            let want = (n - got).max(8);
            for chunk in policy.sample_chunks(&cond, here, want, &mut rng)? {
                let end = *chunk.last().unwrap();
                if end.distance(here) <= hold_tolerance {
                    holds += 1;
                    continue;
                }
                if got < n {
                    got += 1;
                    if end.distance(own) < end.distance(other) {
                        hits += 1;
                    }
                }
            }
        }
        Ok((if got == 0 { f64::NAN } else { hits as f64 / got as f64 }, got, holds))
    };
    let (purity_a, committed_a, holds_a) = probe(a, a.successor, b.successor)?;
    let (purity_b, committed_b, holds_b) = probe(b, b.successor, a.successor)?;
    Ok(Purity { purity_a, purity_b, committed_a, committed_b, holds_a, holds_b })
}

/// Observation histories of a noiseless expert run, cut at every departure
/// from the given waypoint: the last step of the hold, where the expert's
/// next action leaves for the successor. Departures are returned in visit
/// order.
pub fn expert_histories_at(env: &Env, waypoint: usize) -> Result<Vec<ProbeHistory>, PolicyError> {
    let task = &env.task;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = env.reset(0, 0)?;
    let mut observations = vec![env.observe(&state)];
    let mut actions = vec![state.ee];
    let mut out = Vec::new();
    let mut recorded = None;
    while !env.is_complete(&state) && !env.is_done(&state) {
        let departing = state.last_reached == waypoint && state.hold_remaining == 0;
        if departing && recorded != Some(state.stage_index) {
            recorded = Some(state.stage_index);
            let successor = task.waypoints[task.visit_order[state.stage_index]];
            out.push(ProbeHistory { observations: observations.clone(), actions: actions.clone(), successor });
        }
        let a = crate::simenv::expert_policy(&state, task, env.max_step, 0.0, &mut rng)?;
        state = env.step(&state, a)?;
        observations.push(env.observe(&state));
        actions.push(a);
    }
    Ok(out)
}

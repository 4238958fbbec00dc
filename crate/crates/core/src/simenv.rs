//! A kinematic point robot over a tabletop, three multi-stage tasks whose
//! revisited states look exactly alike, a scripted expert and the `MA2D`
//! dataset format.
//!
//! The renderer only sees the end-effector position, the distractors and the
//! static props of the task. Stage bookkeeping lives in [`EnvState`] but never
//! reaches an image, so two states that differ only in progress render to the
//! same bits.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::geometry::{unproject, CameraModel, GeometryError, MotionTrace, Pixel, Point3, RigidTransform};
use crate::tff::{FieldConfig, GrayImage};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("task {task}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("action is not finite")]
    NonFiniteAction,
    #[error("task already complete")]
    TaskComplete,
    #[error("gave up after {attempts} attempts with {succeeded} successful demonstrations")]
    GenerationStalled { attempts: usize, succeeded: usize },
    #[error("could not place distractor {0} outside the expert corridor")]
    NoBackgroundRoom(usize),
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scene and task description used when no file is given.
pub const DEFAULT_SCENE: &str = "\
# top-down global camera, 0.6 m above the table
global.fx = 24
global.fy = 24
global.cx = 15.5
global.cy = 15.5
global.width = 32
global.height = 32
global.pose = 1 0 0 -0.25   0 -1 0 0.125   0 0 -1 0.6

# oblique auxiliary camera looking across the workspace from the far side
aux.fx = 30
aux.fy = 30
aux.cx = 15.5
aux.cy = 15.5
aux.width = 32
aux.height = 32
aux.look_at = 0.25 0.55 0.40   0.25 0.10 0.08   0 0 1

workspace.min = 0 0 0.05
workspace.max = 0.5 0.25 0.15
motion.max_step = 0.02
motion.demo_noise = 0.001

render.table = 0.15
render.ee_intensity = 1.0
render.ee_radius = 0.012
render.distractor_intensity = 0.6
render.distractor_radius = 0.02 0.035

field.sigma = 3
field.floor = 0
field.stride = 1

tasks = alternating_place key_press two_drawer

task.alternating_place.wp.home = 0.25 0.025 0.10
task.alternating_place.wp.center = 0.25 0.125 0.10
task.alternating_place.wp.right = 0.41 0.125 0.10
task.alternating_place.wp.left = 0.09 0.125 0.10
task.alternating_place.order = center right center left
task.alternating_place.tolerance = 0.01
task.alternating_place.hold = 12
task.alternating_place.prop.pad_center = rect 0.25 0.125 0.05 0.05 0.35
task.alternating_place.prop.pad_right = rect 0.41 0.125 0.05 0.05 0.35
task.alternating_place.prop.pad_left = rect 0.09 0.125 0.05 0.05 0.35

task.key_press.wp.home = 0.08 0.05 0.12
task.key_press.wp.space = 0.25 0.08 0.08
task.key_press.wp.delete = 0.40 0.20 0.08
task.key_press.order = space delete space home
task.key_press.tolerance = 0.01
task.key_press.hold = 12
task.key_press.prop.a_board = rect 0.27 0.14 0.30 0.16 0.25
task.key_press.prop.key_space = rect 0.25 0.08 0.12 0.03 0.45
task.key_press.prop.key_delete = rect 0.40 0.20 0.04 0.03 0.45
task.key_press.prop.key_row = rect 0.25 0.14 0.24 0.03 0.35

task.two_drawer.wp.home = 0.25 0.03 0.12
task.two_drawer.wp.drawer1 = 0.10 0.20 0.08
task.two_drawer.wp.drawer2 = 0.40 0.20 0.08
task.two_drawer.wp.bin = 0.25 0.22 0.12
task.two_drawer.order = drawer1 bin drawer1 home drawer2 bin drawer2 home
task.two_drawer.tolerance = 0.01
task.two_drawer.hold = 12
task.two_drawer.prop.a_cabinet = rect 0.25 0.22 0.44 0.06 0.25
task.two_drawer.prop.drawer1 = rect 0.10 0.20 0.08 0.03 0.45
task.two_drawer.prop.drawer2 = rect 0.40 0.20 0.08 0.03 0.45
task.two_drawer.prop.bin = disk 0.25 0.22 0.03 0.4
";

/// The three task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskName {
    AlternatingPlace,
    KeyPress,
    TwoDrawer,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::AlternatingPlace, TaskName::KeyPress, TaskName::TwoDrawer];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::AlternatingPlace => "alternating_place",
            TaskName::KeyPress => "key_press",
            TaskName::TwoDrawer => "two_drawer",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| SimError::UnknownTask(s.to_string()))
    }

    /// Number of demonstrations collected by default.
    pub fn default_demos(self) -> usize {
        match self {
            TaskName::TwoDrawer => 50,
            _ => 30,
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flat shapes drawn on the table plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prop {
    Rect { cx: f64, cy: f64, w: f64, h: f64, intensity: f64 },
    Disk { cx: f64, cy: f64, r: f64, intensity: f64 },
}

impl Prop {
    fn parse(text: &str) -> Option<Prop> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let nums: Option<Vec<f64>> = parts.iter().skip(1).map(|s| s.parse().ok()).collect();
        match (parts.first().copied(), nums?.as_slice()) {
            (Some("rect"), &[cx, cy, w, h, intensity]) => Some(Prop::Rect { cx, cy, w, h, intensity }),
            (Some("disk"), &[cx, cy, r, intensity]) => Some(Prop::Disk { cx, cy, r, intensity }),
            _ => None,
        }
    }

    fn intensity_at(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            Prop::Rect { cx, cy, w, h, intensity } => {
                ((x - cx).abs() <= w / 2.0 && (y - cy).abs() <= h / 2.0).then_some(intensity)
            }
            Prop::Disk { cx, cy, r, intensity } => ((x - cx).hypot(y - cy) <= r).then_some(intensity),
        }
    }
}

/// A task: named waypoints, the order they must be reached in, and the
/// props that decorate the table.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: TaskName,
    pub waypoint_names: Vec<String>,
    pub waypoints: Vec<Point3>,
    /// Indices into `waypoints`.
    pub visit_order: Vec<usize>,
    pub home: usize,
    pub success_tolerance: f64,
    pub horizon_cap: usize,
    /// Steps the expert stays put after reaching each intermediate waypoint.
    pub hold_steps: usize,
    pub props: Vec<Prop>,
}

impl TaskSpec {
    /// Builds a task and checks that its visit order is ambiguous: some
    /// waypoint must be left towards two different successors.
    pub fn new(
        name: TaskName,
        named_waypoints: Vec<(String, Point3)>,
        order: &[&str],
        success_tolerance: f64,
        hold_steps: usize,
        props: Vec<Prop>,
        max_step: f64,
    ) -> Result<Self, SimError> {
        let invalid = |reason: String| SimError::InvalidTask { task: name.to_string(), reason };
        let (waypoint_names, waypoints): (Vec<String>, Vec<Point3>) = named_waypoints.into_iter().unzip();
        let index = |n: &str| waypoint_names.iter().position(|w| w == n);
        let home = index("home").ok_or_else(|| invalid("no `home` waypoint".into()))?;
        let visit_order = order
            .iter()
            .map(|n| index(n).ok_or_else(|| invalid(format!("visit order names unknown waypoint {n:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if visit_order.is_empty() {
            return Err(invalid("empty visit order".into()));
        }
        if !(success_tolerance > 0.0) {
            return Err(invalid("success tolerance must be positive".into()));
        }
        if waypoints.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite waypoint".into()));
        }
        let mut spec = Self {
            name,
            waypoint_names,
            waypoints,
            visit_order,
            home,
            success_tolerance,
            horizon_cap: 0,
            hold_steps,
            props,
        };
        if spec.ambiguous_waypoints().is_empty() {
            return Err(invalid("visit order never leaves a waypoint towards two different successors".into()));
        }
        spec.horizon_cap = 4 * spec.expert_min_steps(max_step);
        Ok(spec)
    }

    pub fn waypoint(&self, name: &str) -> Option<Point3> {
        self.waypoint_names.iter().position(|w| w == name).map(|i| self.waypoints[i])
    }

    /// The path the expert follows: home followed by the visit order.
    pub fn path(&self) -> Vec<usize> {
        std::iter::once(self.home).chain(self.visit_order.iter().copied()).collect()
    }

    /// Waypoints left towards at least two distinct successors, with those
    /// successors in order of first appearance.
    pub fn ambiguous_waypoints(&self) -> Vec<(usize, Vec<usize>)> {
        let path = self.path();
        let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
        for w in path.windows(2) {
            match out.iter_mut().find(|(from, _)| *from == w[0]) {
                Some((_, succ)) if !succ.contains(&w[1]) => succ.push(w[1]),
                Some(_) => {}
                None => out.push((w[0], vec![w[1]])),
            }
        }
        out.retain(|(_, succ)| succ.len() > 1);
        out
    }

    /// Stage indices at which the robot sits on waypoint `wp` having just
    /// reached it (stage 0 is the reset state at home).
    pub fn stages_at(&self, wp: usize) -> Vec<usize> {
        self.path().iter().enumerate().filter(|(_, &p)| p == wp).map(|(i, _)| i).collect()
    }

    /// Steps a noiseless expert needs: straight legs at `max_step` per tick
    /// plus the hold after every intermediate waypoint.
    pub fn expert_min_steps(&self, max_step: f64) -> usize {
        let path = self.path();
        let travel: usize = path
            .windows(2)
            .map(|w| (self.waypoints[w[0]].distance(self.waypoints[w[1]]) / max_step - 1e-9).ceil() as usize)
            .sum();
        travel + self.hold_steps * (self.visit_order.len() - 1)
    }
}

/// A flat disk of clutter lying on the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distractor {
    pub center: Point3,
    pub radius: f64,
}

/// Full simulator state. Everything except `ee` and `distractors` is
/// invisible to the renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ee: Point3,
    pub stage_index: usize,
    pub step_count: usize,
    pub distractors: Vec<Distractor>,
    /// Waypoint most recently reached (home after reset).
    pub last_reached: usize,
    /// Remaining expert hold steps at the last reached waypoint.
    pub hold_remaining: usize,
    /// Set when the end-effector enters a waypoint out of order.
    pub failed: bool,
    /// Set when an action pushed the end-effector outside the workspace.
    pub out_of_bounds: bool,
}

/// Stage bookkeeping shared by [`Env::step`] and [`check_success`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageMachine {
    stage: usize,
    last_reached: usize,
    failed: bool,
}

impl StageMachine {
    fn start(task: &TaskSpec) -> Self {
        Self { stage: 0, last_reached: task.home, failed: false }
    }

    /// Returns true when the current target was reached.
    fn observe(&mut self, task: &TaskSpec, ee: Point3) -> bool {
        if self.failed || self.stage >= task.visit_order.len() {
            return false;
        }
        let target = task.visit_order[self.stage];
        if ee.distance(task.waypoints[target]) <= task.success_tolerance {
            self.stage += 1;
            self.last_reached = target;
            return true;
        }
        let wrong = task.waypoints.iter().enumerate().any(|(i, &w)| {
            i != target && i != self.last_reached && ee.distance(w) <= task.success_tolerance
        });
        if wrong {
            self.failed = true;
        }
        false
    }
}

/// Which of the two scene cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraId {
    Global,
    Aux,
}

/// Appearance constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    pub table: f64,
    pub ee_intensity: f64,
    pub ee_radius: f64,
    pub distractor_intensity: f64,
    pub distractor_radius: (f64, f64),
}

/// Cameras, workspace, motion limits, field settings and all tasks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: KvConfig,
    pub global: CameraModel,
    pub aux: CameraModel,
    pub bounds: (Point3, Point3),
    pub max_step: f64,
    pub demo_noise: f64,
    pub style: RenderStyle,
    pub field: FieldConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Scene {
    pub fn default_scene() -> Self {
        Self::parse(DEFAULT_SCENE).expect("built-in scene is valid")
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        Self::from_config(KvConfig::parse(text)?)
    }

    pub fn from_config(config: KvConfig) -> Result<Self, SimError> {
        let global = camera(&config, "global")?;
        let aux = camera(&config, "aux")?;
        let bounds = (Point3::from_array(config.array("workspace.min")?), Point3::from_array(config.array("workspace.max")?));
        let max_step: f64 = config.parsed("motion.max_step")?;
        let demo_noise: f64 = config.parsed("motion.demo_noise")?;
        if !(max_step > 0.0) || !(demo_noise >= 0.0) {
            return Err(ConfigError::Invalid("motion.max_step must be positive and demo_noise non-negative".into()).into());
        }
        let dr: [f64; 2] = config.array("render.distractor_radius")?;
        let style = RenderStyle {
            table: config.parsed("render.table")?,
            ee_intensity: config.parsed("render.ee_intensity")?,
            ee_radius: config.parsed("render.ee_radius")?,
            distractor_intensity: config.parsed("render.distractor_intensity")?,
            distractor_radius: (dr[0], dr[1]),
        };
        let field = FieldConfig::new(
            config.parsed("field.sigma")?,
            config.parsed_or("field.floor", 0.0)?,
            config.parsed_or("field.stride", 1)?,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut tasks = Vec::new();
        for name in config.list::<String>("tasks")? {
            let task = TaskName::parse(&name)?;
            tasks.push(parse_task(&config, task, max_step)?);
        }
        for t in &tasks {
            for (n, p) in t.waypoint_names.iter().zip(&t.waypoints) {
                if !inside(*p, bounds) {
                    return Err(SimError::InvalidTask { task: t.name.to_string(), reason: format!("waypoint {n} outside workspace") });
                }
            }
        }
        Ok(Self { config, global, aux, bounds, max_step, demo_noise, style, field, tasks })
    }

    pub fn task(&self, name: TaskName) -> Result<&TaskSpec, SimError> {
        self.tasks.iter().find(|t| t.name == name).ok_or_else(|| SimError::UnknownTask(name.to_string()))
    }

    pub fn camera(&self, id: CameraId) -> &CameraModel {
        match id {
            CameraId::Global => &self.global,
            CameraId::Aux => &self.aux,
        }
    }

    /// Hash of the canonical configuration, embedded in every artifact.
    pub fn hash(&self) -> String {
        self.config.hash()
    }
}

fn inside(p: Point3, (lo, hi): (Point3, Point3)) -> bool {
    (lo.x..=hi.x).contains(&p.x) && (lo.y..=hi.y).contains(&p.y) && (lo.z..=hi.z).contains(&p.z)
}

fn camera(cfg: &KvConfig, prefix: &str) -> Result<CameraModel, SimError> {
    let key = |k: &str| format!("{prefix}.{k}");
    let pose = if cfg.contains(&key("pose")) {
        RigidTransform::from_row_major(&cfg.array::<12>(&key("pose"))?)?
    } else {
        let v: [f64; 9] = cfg.array(&key("look_at"))?;
        RigidTransform::look_at(
            Point3::new(v[0], v[1], v[2]),
            Point3::new(v[3], v[4], v[5]),
            Point3::new(v[6], v[7], v[8]),
        )?
    };
    Ok(CameraModel::new(
        cfg.parsed(&key("fx"))?,
        cfg.parsed(&key("fy"))?,
        cfg.parsed(&key("cx"))?,
        cfg.parsed(&key("cy"))?,
        pose,
        cfg.parsed(&key("width"))?,
        cfg.parsed(&key("height"))?,
    )?)
}

fn parse_task(cfg: &KvConfig, name: TaskName, max_step: f64) -> Result<TaskSpec, SimError> {
    let prefix = format!("task.{name}.");
    let wp_prefix = format!("{prefix}wp.");
    let mut waypoints = Vec::new();
    for (n, _) in cfg.keys_with_prefix(&wp_prefix) {
        let full = format!("{wp_prefix}{n}");
        waypoints.push((n.to_string(), Point3::from_array(cfg.array(&full)?)));
    }
    let order: Vec<String> = cfg.list(&format!("{prefix}order"))?;
    let order: Vec<&str> = order.iter().map(String::as_str).collect();
    let prop_prefix = format!("{prefix}prop.");
    let mut props = Vec::new();
    for (n, text) in cfg.keys_with_prefix(&prop_prefix) {
        props.push(Prop::parse(text).ok_or_else(|| ConfigError::Parse {
            key: format!("{prop_prefix}{n}"),
            value: text.to_string(),
            reason: "expected `rect cx cy w h intensity` or `disk cx cy r intensity`".into(),
        })?);
    }
    let mut spec = TaskSpec::new(
        name,
        waypoints,
        &order,
        cfg.parsed(&format!("{prefix}tolerance"))?,
        cfg.parsed_or(&format!("{prefix}hold"), 0)?,
        props,
        max_step,
    )?;
    if let Some(cap) = cfg.get(&format!("{prefix}horizon_cap")) {
        spec.horizon_cap = cap.parse().map_err(|_| ConfigError::Parse {
            key: format!("{prefix}horizon_cap"),
            value: cap.to_string(),
            reason: "expected a positive integer".into(),
        })?;
    }
    Ok(spec)
}

/// Per-camera static background (table plus props), rendered once.
#[derive(Debug, Clone)]
struct Backdrop {
    cam: CameraModel,
    base: Vec<f64>,
}

impl Backdrop {
    fn new(cam: CameraModel, task: &TaskSpec, style: &RenderStyle) -> Self {
        let eye = cam.center();
        let rot_t = cam.world_to_camera.inverse();
        let mut base = vec![0.0; cam.width * cam.height];
        for v in 0..cam.height {
            for u in 0..cam.width {
                let p_cam = unproject(&cam, Pixel::new(u as f64, v as f64), 1.0);
                let dir = rot_t.apply(p_cam) - eye;
                if dir.z >= -1e-12 {
                    continue;
                }
                let s = -eye.z / dir.z;
                let hit = eye + dir * s;
                let mut value = style.table;
                for prop in &task.props {
                    if let Some(i) = prop.intensity_at(hit.x, hit.y) {
                        value = i;
                    }
                }
                base[v * cam.width + u] = value;
            }
        }
        Self { cam, base }
    }

    fn image(&self) -> GrayImage {
        let data = self.base.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        GrayImage::from_vec(self.cam.width, self.cam.height, data).expect("dimensions match camera")
    }

    fn render(&self, state: &EnvState, style: &RenderStyle) -> GrayImage {
        let mut img = self.base.clone();
        for d in &state.distractors {
            self.splat(&mut img, d.center, d.radius, style.distractor_intensity);
        }
        self.splat(&mut img, state.ee, style.ee_radius, style.ee_intensity);
        let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        GrayImage::from_vec(self.cam.width, self.cam.height, data).expect("dimensions match camera")
    }

    fn splat(&self, img: &mut [f64], center: Point3, radius: f64, intensity: f64) {
        let p_cam = self.cam.world_to_camera.apply(center);
        let Ok(px) = crate::geometry::project(&self.cam, p_cam) else { return };
        let sigma = radius * self.cam.fx.min(self.cam.fy) / p_cam.z;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for v in 0..self.cam.height {
            let dv = v as f64 - px.v;
            for u in 0..self.cam.width {
                let du = u as f64 - px.u;
                let g = intensity * (-(du * du + dv * dv) * inv).exp();
                let cell = &mut img[v * self.cam.width + u];
                if g > *cell {
                    *cell = g;
                }
            }
        }
    }
}

/// One timestep as seen by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub global: GrayImage,
    pub aux: GrayImage,
    pub ee: Point3,
}

/// The environment for one task.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: TaskSpec,
    pub bounds: (Point3, Point3),
    pub max_step: f64,
    pub style: RenderStyle,
    pub field: FieldConfig,
    global: Backdrop,
    aux: Backdrop,
}

impl Env {
    pub fn new(scene: &Scene, task: TaskName) -> Result<Self, SimError> {
        let task = scene.task(task)?.clone();
        Ok(Self {
            global: Backdrop::new(scene.global, &task, &scene.style),
            aux: Backdrop::new(scene.aux, &task, &scene.style),
            task,
            bounds: scene.bounds,
            max_step: scene.max_step,
            style: scene.style,
            field: scene.field,
        })
    }

    pub fn camera(&self, id: CameraId) -> &CameraModel {
        match id {
            CameraId::Global => &self.global.cam,
            CameraId::Aux => &self.aux.cam,
        }
    }

    /// Places the robot at home and scatters `distractor_count` disks over
    /// the visible table, keeping them at least three field widths (in
    /// global-camera pixels) away from every leg of the expert path.
    pub fn reset(&self, seed: u64, distractor_count: usize) -> Result<EnvState, SimError> {
        let mut distractors = Vec::with_capacity(distractor_count);
        if distractor_count > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let corridor = 3.0 * self.field.sigma;
            let segments = self.path_pixels();
            let cam = &self.global.cam;
            let eye = cam.center();
            let rot_t = cam.world_to_camera.inverse();
            for i in 0..distractor_count {
                let mut placed = false;
                for _ in 0..10_000 {
                    let px = Pixel::new(
                        rng.random_range(-0.5..cam.width as f64 - 0.5),
                        rng.random_range(-0.5..cam.height as f64 - 0.5),
                    );
                    let radius = rng.random_range(self.style.distractor_radius.0..=self.style.distractor_radius.1);
                    if segments.windows(2).any(|s| point_segment_distance(px, s[0], s[1]) <= corridor) {
                        continue;
                    }
                    let dir = rot_t.apply(unproject(cam, px, 1.0)) - eye;
                    if dir.z >= -1e-12 {
                        continue;
                    }
                    let hit = eye + dir * (-eye.z / dir.z);
                    distractors.push(Distractor { center: Point3::new(hit.x, hit.y, 0.0), radius });
                    placed = true;
                    break;
                }
                if !placed {
                    return Err(SimError::NoBackgroundRoom(i));
                }
            }
        }
        Ok(EnvState {
            ee: self.task.waypoints[self.task.home],
            stage_index: 0,
            step_count: 0,
            distractors,
            last_reached: self.task.home,
            hold_remaining: 0,
            failed: false,
            out_of_bounds: false,
        })
    }

    /// Expert path projected into the global camera.
    pub fn path_pixels(&self) -> Vec<Pixel> {
        self.task
            .path()
            .iter()
            .filter_map(|&w| self.global.cam.project_world(self.task.waypoints[w]).ok())
            .collect()
    }

    /// Moves towards `action` by at most `max_step`. An action within reach
    /// is taken exactly.
    pub fn step(&self, state: &EnvState, action: Point3) -> Result<EnvState, SimError> {
        if !action.is_finite() {
            return Err(SimError::NonFiniteAction);
        }
        let mut next = state.clone();
        let delta = action - state.ee;
        let dist = delta.norm();
        let mut ee = if dist <= self.max_step { action } else { state.ee + delta * (self.max_step / dist) };
        let (lo, hi) = self.bounds;
        let clamped = Point3::new(ee.x.clamp(lo.x, hi.x), ee.y.clamp(lo.y, hi.y), ee.z.clamp(lo.z, hi.z));
        if clamped != ee {
            next.out_of_bounds = true;
            ee = clamped;
        }
        next.ee = ee;
        next.step_count += 1;
        next.hold_remaining = next.hold_remaining.saturating_sub(1);
        let mut machine = StageMachine { stage: state.stage_index, last_reached: state.last_reached, failed: state.failed };
        if machine.observe(&self.task, ee) {
            next.hold_remaining = if machine.stage < self.task.visit_order.len() { self.task.hold_steps } else { 0 };
        }
        next.stage_index = machine.stage;
        next.last_reached = machine.last_reached;
        next.failed = machine.failed;
        Ok(next)
    }

    pub fn is_complete(&self, state: &EnvState) -> bool {
        state.stage_index >= self.task.visit_order.len()
    }

    /// Success, failure or horizon exhaustion.
    pub fn is_done(&self, state: &EnvState) -> bool {
        self.is_complete(state) || state.failed || state.step_count >= self.task.horizon_cap
    }

    pub fn render(&self, state: &EnvState, cam: CameraId) -> GrayImage {
        match cam {
            CameraId::Global => self.global.render(state, &self.style),
            CameraId::Aux => self.aux.render(state, &self.style),
        }
    }

    /// The static scene (table and props) as seen by a camera.
    pub fn backdrop(&self, cam: CameraId) -> GrayImage {
        match cam {
            CameraId::Global => self.global.image(),
            CameraId::Aux => self.aux.image(),
        }
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        Observation { global: self.render(state, CameraId::Global), aux: self.render(state, CameraId::Aux), ee: state.ee }
    }
}

/// Distance from `p` to the segment `ab` in pixel space.
pub fn point_segment_distance(p: Pixel, a: Pixel, b: Pixel) -> f64 {
    let (dx, dy) = (b.u - a.u, b.v - a.v);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.u - a.u) * dx + (p.v - a.v) * dy) / len2).clamp(0.0, 1.0) };
    (p.u - a.u - t * dx).hypot(p.v - a.v - t * dy)
}

/// Scripted demonstrator: holds position after reaching a waypoint, then
/// heads straight for the next one at full speed, with Gaussian jitter.
pub fn expert_policy<R: Rng + ?Sized>(
    state: &EnvState,
    task: &TaskSpec,
    max_step: f64,
    demo_noise: f64,
    rng: &mut R,
) -> Result<Point3, SimError> {
    if state.stage_index >= task.visit_order.len() {
        return Err(SimError::TaskComplete);
    }
    let base = if state.hold_remaining > 0 {
        task.waypoints[state.last_reached]
    } else {
        let target = task.waypoints[task.visit_order[state.stage_index]];
        let delta = target - state.ee;
        let dist = delta.norm();
        if dist <= max_step {
            target
        } else {
            state.ee + delta * (max_step / dist)
        }
    };
    if demo_noise == 0.0 {
        return Ok(base);
    }
    let normal = Normal::new(0.0, demo_noise).expect("noise std is finite and non-negative");
    Ok(base + Point3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
}

/// Replays the stage machine over the end-effector positions of a
/// trajectory whose first entry is the reset state. Returns whether all
/// stages were completed within the horizon cap, and how many were.
pub fn check_success(trajectory: &[EnvState], task: &TaskSpec) -> (bool, usize) {
    let mut machine = StageMachine::start(task);
    let n = task.visit_order.len();
    for (t, state) in trajectory.iter().enumerate().skip(1) {
        if t > task.horizon_cap {
            break;
        }
        machine.observe(task, state.ee);
        if machine.failed || machine.stage == n {
            break;
        }
    }
    (!trajectory.is_empty() && machine.stage == n && !machine.failed, machine.stage)
}

/// One expert episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub observations: Vec<Observation>,
    /// Absolute end-effector target issued at each observation.
    pub actions: Vec<Point3>,
    /// End-effector positions of the observations, in order.
    pub trace: MotionTrace,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn quantize(p: Point3) -> Point3 {
    Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

/// A set of demonstrations for one task, tied to the scene they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskName,
    pub scene_hash: String,
    pub demos: Vec<Demonstration>,
    /// Regenerated rollouts that exceeded the horizon cap.
    pub rejected: usize,
}

/// Collects `n_demos` successful expert rollouts. Demo `i` draws its jitter
/// from stream `i` of a generator seeded with `seed`; a failed attempt moves
/// on to a fresh stream.
pub fn generate_dataset(env: &Env, scene_hash: &str, n_demos: usize, seed: u64, demo_noise: f64) -> Result<Dataset, SimError> {
    if n_demos == 0 {
        return Err(SimError::GenerationStalled { attempts: 0, succeeded: 0 });
    }
    let mut demos = Vec::with_capacity(n_demos);
    let mut attempts = 0;
    while demos.len() < n_demos {
        if attempts >= 10 * n_demos {
            return Err(SimError::GenerationStalled { attempts, succeeded: demos.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempts as u64);
        attempts += 1;
        if let Some(demo) = expert_rollout(env, &mut rng, demo_noise)? {
            demos.push(demo);
        }
    }
    Ok(Dataset { task: env.task.name, scene_hash: scene_hash.to_string(), demos, rejected: attempts - n_demos })
}

/// Runs the expert from reset. `None` if it missed the horizon cap.
pub fn expert_rollout<R: Rng + ?Sized>(env: &Env, rng: &mut R, demo_noise: f64) -> Result<Option<Demonstration>, SimError> {
    let mut state = env.reset(0, 0)?;
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while !env.is_done(&state) {
        let action = quantize(expert_policy(&state, &env.task, env.max_step, demo_noise, rng)?);
        let mut obs = env.observe(&state);
        obs.ee = quantize(obs.ee);
        observations.push(obs);
        actions.push(action);
        state = env.step(&state, action)?;
    }
    if !env.is_complete(&state) {
        return Ok(None);
    }
    let trace = MotionTrace::from_positions(observations.iter().map(|o| o.ee));
    Ok(Some(Demonstration { observations, actions, trace }))
}

pub const DATASET_MAGIC: &[u8; 4] = b"MA2D";
pub const DATASET_VERSION: u8 = 1;

impl Dataset {
    /// Layout (little-endian): `"MA2D"`, version `u8`, task name length `u8`
    /// and bytes, scene hash length `u8` and bytes, demo count `u32`, global
    /// width/height `u32`, aux width/height `u32`; then per demo a step count
    /// `u32` and per step the global image, aux image, end-effector (3) and
    /// action (3), all `f32`.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&[DATASET_VERSION])?;
        for s in [self.task.as_str(), self.scene_hash.as_str()] {
            out.write_all(&[s.len() as u8])?;
            out.write_all(s.as_bytes())?;
        }
        out.write_all(&(self.demos.len() as u32).to_le_bytes())?;
        let (g, a) = self
            .demos
            .first()
            .and_then(|d| d.observations.first())
            .map(|o| ((o.global.width(), o.global.height()), (o.aux.width(), o.aux.height())))
            .unwrap_or(((0, 0), (0, 0)));
        for v in [g.0, g.1, a.0, a.1] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for demo in &self.demos {
            out.write_all(&(demo.len() as u32).to_le_bytes())?;
            for (obs, act) in demo.observations.iter().zip(&demo.actions) {
                buf.clear();
                for &v in obs.global.data().iter().chain(obs.aux.data()) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in obs.ee.to_array().into_iter().chain(act.to_array()) {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, SimError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != DATASET_VERSION {
            return Err(SimError::Format(format!("unsupported version {version}")));
        }
        let task = TaskName::parse(&r.string()?)?;
        let scene_hash = r.string()?;
        let n = r.u32()? as usize;
        let (gw, gh, aw, ah) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut demos = Vec::with_capacity(n);
        for _ in 0..n {
            let steps = r.u32()? as usize;
            let mut observations = Vec::with_capacity(steps);
            let mut actions = Vec::with_capacity(steps);
            for _ in 0..steps {
                let global = GrayImage::from_vec(gw, gh, r.f32s(gw * gh)?).map_err(|e| SimError::Format(e.to_string()))?;
                let aux = GrayImage::from_vec(aw, ah, r.f32s(aw * ah)?).map_err(|e| SimError::Format(e.to_string()))?;
                let v = r.f32s(6)?;
                let ee = Point3::new(v[0] as f64, v[1] as f64, v[2] as f64);
                actions.push(Point3::new(v[3] as f64, v[4] as f64, v[5] as f64));
                observations.push(Observation { global, aux, ee });
            }
            let trace = MotionTrace::from_positions(observations.iter().map(|o| o.ee));
            demos.push(Demonstration { observations, actions, trace });
        }
        if r.pos != bytes.len() {
            return Err(SimError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { task, scene_hash, demos, rejected: 0 })
    }

    pub fn total_steps(&self) -> usize {
        self.demos.iter().map(Demonstration::len).sum()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SimError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SimError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SimError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, SimError> {
        let n = self.take(1)?[0] as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SimError::Format("non-UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, SimError> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(task: TaskName) -> Env {
        Env::new(&Scene::default_scene(), task).unwrap()
    }

    fn noiseless(env: &Env) -> Vec<EnvState> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = env.reset(0, 0).unwrap();
        let mut traj = vec![s.clone()];
        while !env.is_done(&s) {
            let a = expert_policy(&s, &env.task, env.max_step, 0.0, &mut rng).unwrap();
            s = env.step(&s, a).unwrap();
            traj.push(s.clone());
        }
        traj
    }

    #[test]
    fn default_scene_parses() {
        let scene = Scene::default_scene();
        assert_eq!(scene.tasks.len(), 3);
        assert_eq!(scene.hash().len(), 16);
        for t in &scene.tasks {
            assert!(!t.ambiguous_waypoints().is_empty());
            assert_eq!(t.horizon_cap, 4 * t.expert_min_steps(scene.max_step));
        }
    }

    #[test]
    fn reset_puts_ee_at_home() {
        let e = env(TaskName::AlternatingPlace);
        let s = e.reset(3, 0).unwrap();
        assert_eq!(s.ee, e.task.waypoint("home").unwrap());
        assert_eq!(s.stage_index, 0);
        assert_eq!(e.reset(3, 4).unwrap(), e.reset(3, 4).unwrap());
    }

    #[test]
    fn distractors_avoid_the_corridor() {
        for task in TaskName::ALL {
            let e = env(task);
            let path = e.path_pixels();
            for seed in 0..20 {
                let s = e.reset(seed, 5).unwrap();
                assert_eq!(s.distractors.len(), 5);
                for d in &s.distractors {
                    let px = e.camera(CameraId::Global).project_world(d.center).unwrap();
                    for seg in path.windows(2) {
                        assert!(point_segment_distance(px, seg[0], seg[1]) > 3.0 * e.field.sigma);
                    }
                }
            }
        }
    }

    #[test]
    fn step_toward_self_is_a_fixed_point() {
        let e = env(TaskName::KeyPress);
        let s = e.reset(0, 0).unwrap();
        let n = e.step(&s, s.ee).unwrap();
        assert_eq!(n.ee, s.ee);
        assert_eq!(n.stage_index, s.stage_index);
        assert_eq!(n.step_count, 1);
    }

    #[test]
    fn reaching_within_tolerance_advances() {
        let e = env(TaskName::AlternatingPlace);
        let center = e.task.waypoint("center").unwrap();
        let mut s = e.reset(0, 0).unwrap();
        s.ee = center - Point3::new(0.0, 0.005, 0.0);
        let n = e.step(&s, center).unwrap();
        assert_eq!(n.stage_index, 1);
        assert_eq!(n.hold_remaining, e.task.hold_steps);
    }

    #[test]
    fn step_is_capped_and_clamped() {
        let e = env(TaskName::AlternatingPlace);
        let s = e.reset(0, 0).unwrap();
        let n = e.step(&s, s.ee + Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((n.ee.z - s.ee.z - e.max_step).abs() < 1e-15);
        assert!(!n.out_of_bounds);
        let mut far = s.clone();
        far.ee.z = 0.14;
        let n = e.step(&far, far.ee + Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(n.ee.z, 0.15);
        assert!(n.out_of_bounds);
        assert!(e.step(&s, Point3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn expert_takes_a_unit_step() {
        let e = env(TaskName::AlternatingPlace);
        let mut s = e.reset(0, 0).unwrap();
        s.ee = Point3::new(0.0, 0.0, 0.1);
        let mut task = e.task.clone();
        let center = task.waypoint_names.iter().position(|n| n == "center").unwrap();
        task.waypoints[center] = Point3::new(0.2, 0.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = expert_policy(&s, &task, 0.02, 0.0, &mut rng).unwrap();
        assert!(a.distance(Point3::new(0.02, 0.0, 0.1)) < 1e-15);
        s.stage_index = task.visit_order.len();
        assert!(matches!(expert_policy(&s, &task, 0.02, 0.0, &mut rng), Err(SimError::TaskComplete)));
    }

    #[test]
    fn noiseless_expert_follows_the_visit_order() {
        for task in TaskName::ALL {
            let e = env(task);
            let traj = noiseless(&e);
            let last = traj.last().unwrap();
            assert!(e.is_complete(last) && !last.failed);
            let min = e.task.expert_min_steps(e.max_step);
            assert!(last.step_count.abs_diff(min) <= 1, "{task}: {} vs {min}", last.step_count);
            let reached: Vec<usize> =
                traj.windows(2).filter(|w| w[1].stage_index > w[0].stage_index).map(|w| w[1].last_reached).collect();
            assert_eq!(reached, e.task.visit_order);
            assert_eq!(check_success(&traj, &e.task), (true, e.task.visit_order.len()));
        }
        let e = env(TaskName::AlternatingPlace);
        let names: Vec<&str> = e.task.visit_order.iter().map(|&i| e.task.waypoint_names[i].as_str()).collect();
        assert_eq!(names, ["center", "right", "center", "left"]);
    }

    #[test]
    fn skipping_the_center_revisit_fails() {
        let e = env(TaskName::AlternatingPlace);
        let wp = |n| e.task.waypoint(n).unwrap();
        let mut s = e.reset(0, 0).unwrap();
        let mut traj = vec![s.clone()];
        let detour = Point3::new(0.25, 0.2, 0.1);
        for target in [wp("center"), wp("right"), detour, wp("left")] {
            for _ in 0..40 {
                s = e.step(&s, target).unwrap();
                traj.push(s.clone());
            }
        }
        let (ok, stages) = check_success(&traj, &e.task);
        assert!(!ok);
        assert_eq!(stages, 2);
        assert!(traj.last().unwrap().failed);
        assert_eq!(check_success(&[], &e.task), (false, 0));
    }

    #[test]
    fn rendering_ignores_stage_and_is_deterministic() {
        let e = env(TaskName::TwoDrawer);
        let s = e.reset(5, 3).unwrap();
        let mut t = s.clone();
        t.stage_index = 4;
        t.last_reached = 2;
        t.hold_remaining = 7;
        assert_eq!(e.observe(&s), e.observe(&t));
        let first = e.render(&s, CameraId::Global);
        for _ in 0..100 {
            assert_eq!(e.render(&s, CameraId::Global), first);
        }
        assert!(first.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ee_on_the_optical_axis_is_the_brightest_pixel() {
        let mut scene = Scene::default_scene();
        scene.tasks.iter_mut().for_each(|t| t.props.clear());
        let e = Env::new(&scene, TaskName::AlternatingPlace).unwrap();
        let mut s = e.reset(0, 0).unwrap();
        s.ee = Point3::new(0.25, 0.125, 0.1);
        let img = e.render(&s, CameraId::Global);
        let best = (0..img.data().len()).max_by(|&a, &b| img.data()[a].total_cmp(&img.data()[b])).unwrap();
        let (u, v) = (best % 32, best / 32);
        assert!((u == 15 || u == 16) && (v == 15 || v == 16), "{u},{v}");
    }

    #[test]
    fn dataset_round_trips() {
        let e = env(TaskName::KeyPress);
        let ds = generate_dataset(&e, "abc", 2, 7, 0.001).unwrap();
        assert_eq!(ds.demos.len(), 2);
        for d in &ds.demos {
            assert_eq!(d.observations.len(), d.actions.len());
            assert_eq!(d.trace.positions().collect::<Vec<_>>(), d.observations.iter().map(|o| o.ee).collect::<Vec<_>>());
        }
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, Dataset { rejected: 0, ..ds.clone() });
        assert_eq!(generate_dataset(&e, "abc", 2, 7, 0.001).unwrap(), ds);
        assert!(Dataset::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn tasks_without_ambiguity_are_rejected() {
        let wps = vec![("home".to_string(), Point3::new(0.0, 0.0, 0.1)), ("a".to_string(), Point3::new(0.1, 0.0, 0.1))];
        let err = TaskSpec::new(TaskName::KeyPress, wps, &["a", "home"], 0.01, 0, vec![], 0.02).unwrap_err();
        assert!(matches!(err, SimError::InvalidTask { .. }));
    }
}

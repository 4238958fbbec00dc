//! Image dumps of the field, trace raster and modulated view, and
//! trajectory overlays with their polylines.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfdp_core::geometry::{project_trace, MotionTrace, Pixel, Point3};
use tfdp_core::policy::{rollout, Policy, RolloutOptions};
use tfdp_core::simenv::{expert_policy, CameraId, Env, EnvState};
use tfdp_core::tff::{apply_field, rasterize_trace, render_field, FocusField, GrayImage};

use crate::error::{HarnessError, Result};

/// Everything `render-field` writes for one moment of an expert run.
#[derive(Debug, Clone)]
pub struct FieldDump {
    pub global: GrayImage,
    pub aux: GrayImage,
    pub field: FocusField,
    pub raster: GrayImage,
    pub modulated: GrayImage,
    pub trace: MotionTrace,
}

/// Runs the noiseless expert from reset seed `seed` and renders the state
/// after `points - 1` steps with the trace of the first `points` positions.
/// `points = 0` gives an empty trace over the reset scene; `None` runs the
/// whole episode.
pub fn field_dump(env: &Env, seed: u64, distractors: usize, points: Option<usize>) -> Result<FieldDump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(seed, distractors)?;
    let mut trace = MotionTrace::new();
    let limit = points.unwrap_or(usize::MAX);
    let mut shown = state.clone();
    while trace.len() < limit {
        trace.push_next(state.ee).map_err(|e| HarnessError::Data(e.to_string()))?;
        shown = state.clone();
        if env.is_done(&state) {
            break;
        }
        let a = expert_policy(&state, &env.task, env.max_step, 0.0, &mut rng)?;
        state = env.step(&state, a)?;
    }
    let cam = env.camera(CameraId::Global);
    let px = project_trace(cam, &trace).pixels;
    let field = render_field(&px, &env.field, cam.width, cam.height);
    let global = env.render(&shown, CameraId::Global);
    let modulated = apply_field(&global, &field).map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok(FieldDump {
        aux: env.render(&shown, CameraId::Aux),
        raster: rasterize_trace(&px, cam.width, cam.height),
        global,
        modulated,
        field,
        trace,
    })
}

fn write_file(dir: &Path, name: &str, bytes: Vec<u8>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(HarnessError::file(path))
}

fn pgm(img: &GrayImage) -> Vec<u8> {
    let mut b = Vec::new();
    img.write_pgm(&mut b, true).expect("writing to memory");
    b
}

impl FieldDump {
    /// `global.pgm`, `aux.pgm`, `field.pgm`, `field.f32`, `trace.pgm` and
    /// `modulated.pgm`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(HarnessError::file(dir))?;
        write_file(dir, "global.pgm", pgm(&self.global))?;
        write_file(dir, "aux.pgm", pgm(&self.aux))?;
        write_file(dir, "trace.pgm", pgm(&self.raster))?;
        write_file(dir, "modulated.pgm", pgm(&self.modulated))?;
        let mut f = Vec::new();
        self.field.write_pgm(&mut f, true).expect("writing to memory");
        write_file(dir, "field.pgm", f)?;
        let mut r = Vec::new();
        self.field.write_f32_raster(&mut r).expect("writing to memory");
        write_file(dir, "field.f32", r)
    }
}

/// One plotted episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlottedEpisode {
    pub trial: usize,
    pub success: bool,
    pub stages: usize,
    pub states: Vec<EnvState>,
}

/// Rolls out `trials` episodes of `policy`, or of the noiseless expert
/// when `policy` is `None`.
pub fn collect_episodes(policy: Option<&Policy>, env: &Env, scene_hash: &str, eval_seed: u64, trials: usize) -> Result<Vec<PlottedEpisode>> {
    let mut out = Vec::new();
    for trial in 0..trials {
        let seed = eval_seed + trial as u64;
        let states = match policy {
            Some(p) => rollout(p, env, scene_hash, seed, &RolloutOptions::default())?.trajectory,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut s = env.reset(seed, 0)?;
                let mut states = vec![s.clone()];
                while !env.is_done(&s) {
                    s = env.step(&s, expert_policy(&s, &env.task, env.max_step, 0.0, &mut rng)?)?;
                    states.push(s.clone());
                }
                states
            }
        };
        let (success, stages) = tfdp_core::simenv::check_success(&states, &env.task);
        out.push(PlottedEpisode { trial, success, stages, states });
    }
    Ok(out)
}

/// `trial,step,x,y,z,u,v,stage,success` with shortest round-trip floats, so
/// replaying the positions reproduces the stage bookkeeping exactly.
pub fn polylines_csv(env: &Env, episodes: &[PlottedEpisode]) -> String {
    let cam = env.camera(CameraId::Global);
    let mut s = String::from("trial,step,x,y,z,u,v,stage,success\n");
    for ep in episodes {
        for st in &ep.states {
            let px = cam.project_world(st.ee).unwrap_or(Pixel::new(f64::NAN, f64::NAN));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                ep.trial, st.step_count, st.ee.x, st.ee.y, st.ee.z, px.u, px.v, st.stage_index, ep.success as u8
            );
        }
    }
    s
}

/// Parses [`polylines_csv`] back into per-trial positions and logged
/// success flags.
pub fn parse_polylines(text: &str) -> Result<Vec<(usize, bool, Vec<Point3>)>> {
    let mut out: Vec<(usize, bool, Vec<Point3>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || HarnessError::Data(format!("polyline line {}: malformed", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
        let trial: usize = f[0].parse().map_err(|_| bad())?;
        let success = f[8] == "1";
        let p = Point3::new(num(2)?, num(3)?, num(4)?);
        match out.last_mut() {
            Some(last) if last.0 == trial => last.2.push(p),
            _ => out.push((trial, success, vec![p])),
        }
    }
    Ok(out)
}

/// Global-camera backdrop at half brightness with every episode drawn on
/// top; brighter segments belong to later stages.
pub fn overlay(env: &Env, episodes: &[PlottedEpisode]) -> GrayImage {
    let cam = env.camera(CameraId::Global);
    let back = env.backdrop(CameraId::Global);
    let dim: Vec<f32> = back.data().iter().map(|v| 0.5 * v).collect();
    let mut img = GrayImage::from_vec(cam.width, cam.height, dim).expect("dimensions match camera");
    let stages = env.task.visit_order.len().max(1) as f32;
    for ep in episodes {
        for pair in ep.states.windows(2) {
            let (Ok(a), Ok(b)) = (cam.project_world(pair[0].ee), cam.project_world(pair[1].ee)) else {
                continue;
            };
            let value = 0.55 + 0.45 * pair[1].stage_index as f32 / stages;
            stamp_segment(&mut img, a, b, value);
        }
    }
    img
}

fn stamp_segment(img: &mut GrayImage, a: Pixel, b: Pixel, value: f32) {
    let n = (b.u - a.u).abs().max((b.v - a.v).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let p = Pixel::new(a.u + t * (b.u - a.u), a.v + t * (b.v - a.v));
        let (u, v) = (p.u.round(), p.v.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < img.width() && (v as usize) < img.height() {
            img.max_at(u as usize, v as usize, value);
        }
    }
}

/// Writes `overlay.pgm` and `polylines.csv`.
pub fn write_plot(env: &Env, episodes: &[PlottedEpisode], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(HarnessError::file(dir))?;
    write_file(dir, "overlay.pgm", pgm(&overlay(env, episodes)))?;
    write_file(dir, "polylines.csv", polylines_csv(env, episodes).into_bytes())
}

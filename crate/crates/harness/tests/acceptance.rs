//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trained checkpoints are cached under the cargo target directory, so only
//! the first run pays for training. Set `ACCEPTANCE_ONLY=5,9` to run a
//! subset.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tfdp_core::geometry::{project, project_trace, CameraModel, Pixel, Point3, RigidTransform};
use tfdp_core::genmodel::{
    cosine_schedule, ddim_sample, ddpm_sample, fit_unconditional, fm_sample, sample, NetDenoiser, SamplerConfig, SamplerKind,
    SinglePointNoise, SinglePointVelocity,
};
use tfdp_core::policy::{
    expert_histories_at, mode_purity, rollout, Conditioner, Normalizer, ObservationWindow, Policy, PolicyCheckpoint, RolloutOptions,
    VariantKind, VariantSpec,
};
use tfdp_core::simenv::{Env, TaskName};
use tfdp_core::tff::{apply_field, gaussian_map, render_field, FieldConfig, FocusField, GrayImage};
use tfdp_core::tinynet::{backward, forward, Activation, NetSpec, OptConfig, Params};
use tfdp_harness::bench::bench_efficiency;
use tfdp_harness::experiment::{evaluate, policy_with, run_matrix, table_for, CheckpointStore, EvalSummary, ExperimentConfig};

type Check = Result<(bool, String), String>;

struct Ctx {
    cfg: ExperimentConfig,
    store: CheckpointStore,
    evals: HashMap<(TaskName, VariantKind, SamplerKind, usize), EvalSummary>,
    train_seconds: HashMap<(TaskName, VariantKind, SamplerKind), f64>,
}

impl Ctx {
    fn new() -> Self {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let cfg = ExperimentConfig { out_dir: root.clone(), cache_dir: Some(root.join("checkpoints")), ..ExperimentConfig::default() };
        Self { store: CheckpointStore::new(root.join("checkpoints")), cfg, evals: HashMap::new(), train_seconds: HashMap::new() }
    }

    fn policy(&mut self, task: TaskName, variant: VariantKind, sampler: SamplerKind) -> Result<Policy, String> {
        let mut log = |l: &str| eprintln!("    {l}");
        let t = self.store.get_or_train(&self.cfg, task, variant, sampler, 0, &mut log).map_err(|e| e.to_string())?;
        let train_sampler = t.checkpoint.sampler.kind;
        self.train_seconds.insert((task, variant, train_sampler), t.train_seconds);
        policy_with(t.checkpoint, sampler).map_err(|e| e.to_string())
    }

    fn eval(&mut self, task: TaskName, variant: VariantKind, sampler: SamplerKind, distractors: usize) -> Result<EvalSummary, String> {
        let key = (task, variant, sampler, distractors);
        if let Some(s) = self.evals.get(&key) {
            return Ok(s.clone());
        }
        let policy = self.policy(task, variant, sampler)?;
        let env = Env::new(&self.cfg.scene, task).map_err(|e| e.to_string())?;
        let s = evaluate(&policy, &env, &self.cfg.scene.hash(), self.cfg.eval_seed, self.cfg.trials, distractors)
            .map_err(|e| e.to_string())?;
        eprintln!("    {task} {variant} {sampler} d{distractors}: {}/{}", s.successes, s.trials);
        self.evals.insert(key, s.clone());
        Ok(s)
    }

    fn rate(&mut self, task: TaskName, variant: VariantKind, sampler: SamplerKind, distractors: usize) -> Result<f64, String> {
        Ok(self.eval(task, variant, sampler, distractors)?.success_rate())
    }
}

fn pct(r: f64) -> String {
    format!("{:.0}%", 100.0 * r)
}

/// 1. Analytic network gradients against central differences.
fn gradient_oracle(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let embed = 2 * rng.random_range(1..4);
        let mut widths = vec![rng.random_range(1..6) + embed];
        for _ in 0..rng.random_range(1..3) {
            widths.push(rng.random_range(2..9));
        }
        widths.push(rng.random_range(1..5));
        let act = if draw % 5 == 4 { Activation::Identity } else { Activation::Tanh };
        let spec = NetSpec::new(widths.clone(), act, embed).map_err(|e| e.to_string())?;
        let params = Params::<f64>::init(&spec, draw);
        let input: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
        let upstream: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &Params<f64>| -> f64 {
            let (out, _) = forward(p, &input).expect("shapes match");
            out.iter().zip(&upstream).map(|(o, g)| o * g).sum()
        };
        let (_, cache) = forward(&params, &input).map_err(|e| e.to_string())?;
        let analytic = backward(&params, &cache, &upstream).map_err(|e| e.to_string())?.flatten();
        let flat = params.flatten();
        let h = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                for s in p.slices_mut() {
                    if i < k + s.len() {
                        s[i - k] = flat[i] + delta;
                        break;
                    }
                    k += s.len();
                }
                loss(&p)
            };
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-4 && secs < 10.0, format!("max relative error {worst:.2e} in {secs:.2} s")))
}

/// 2. Projection and field identities.
fn geometry_field_suite(_: &mut Ctx) -> Check {
    let mut failures = Vec::new();
    let pose = RigidTransform::from_rotation_z(0.3, [0.1, -0.2, 0.5]).map_err(|e| e.to_string())?;
    let cam = CameraModel::new(40.0, 38.0, 15.5, 14.0, pose, 32, 32).map_err(|e| e.to_string())?;
    let axis = project(&cam, Point3::new(0.0, 0.0, 0.7)).map_err(|e| e.to_string())?;
    if axis != Pixel::new(cam.cx, cam.cy) {
        failures.push(format!("optical axis projects to {axis:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..3.0));
        let s = rng.random_range(0.1..10.0);
        let (a, b) = (project(&cam, p).unwrap(), project(&cam, Point3::new(s * p.x, s * p.y, s * p.z)).unwrap());
        if (a.u - b.u).abs() > 1e-12 || (a.v - b.v).abs() > 1e-12 {
            failures.push(format!("scale {s} moves {p:?} from {a:?} to {b:?}"));
            break;
        }
    }
    let fc = FieldConfig::new(2.5, 0.0, 1).map_err(|e| e.to_string())?;
    let g = gaussian_map(Pixel::new(10.0, 12.0), &fc, 32, 32);
    let at = |u: usize, v: usize| g[v * 32 + u];
    if at(10, 12) != 1.0 {
        failures.push(format!("gaussian peak {}", at(10, 12)));
    }
    if at(13, 12) != at(7, 12) || at(10, 15) != at(10, 9) || at(12, 14) != at(8, 10) {
        failures.push("gaussian not symmetric".into());
    }
    let unit = gaussian_map(Pixel::new(10.0, 12.0), &FieldConfig::new(1.0, 0.0, 1).map_err(|e| e.to_string())?, 32, 32);
    if (unit[12 * 32 + 11] - (-0.5f64).exp()).abs() > 1e-9 {
        failures.push(format!("gaussian one sigma away is {}", unit[12 * 32 + 11]));
    }
    let stacked = render_field(&[Pixel::new(5.0, 5.0); 4], &fc, 32, 32);
    if stacked.value(5, 5) != 1.0 || stacked.accumulator()[5 * 32 + 5] != 4.0 {
        failures.push("overlapping points do not clamp at 1".into());
    }
    let floored = render_field(&[], &FieldConfig::new(2.5, 0.25, 1).unwrap(), 32, 32);
    if floored.values().iter().any(|&v| v != 0.25) {
        failures.push("floor of an empty field".into());
    }
    let img = GrayImage::from_vec(32, 32, (0..1024).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
    let empty = FocusField::empty(&fc, 32, 32);
    let dark = apply_field(&img, &empty).map_err(|e| e.to_string())?;
    if dark.data().iter().any(|&v| v != 0.0) {
        failures.push("empty field does not annihilate".into());
    }
    let full = render_field(&[Pixel::new(16.0, 16.0); 1], &FieldConfig::new(1e6, 0.0, 1).unwrap(), 32, 32);
    let same = apply_field(&img, &full).map_err(|e| e.to_string())?;
    let max_dev = same.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    if max_dev > 1e-6 {
        failures.push(format!("unit field changes the image by {max_dev}"));
    }
    let ok = failures.is_empty();
    Ok((ok, if ok { "projection, gaussian, clamp, floor and modulation identities hold".into() } else { failures.join("; ") }))
}

/// 3. Incremental field during a long rollout equals the batch render.
fn closed_loop_consistency(ctx: &mut Ctx) -> Check {
    let env = Env::new(&ctx.cfg.scene, TaskName::TwoDrawer).map_err(|e| e.to_string())?;
    let hash = ctx.cfg.scene.hash();
    let ck = PolicyCheckpoint::untrained(
        &env,
        &hash,
        VariantSpec::new(VariantKind::TfFull),
        SamplerConfig::new(SamplerKind::Ddim),
        &[64, 64],
        16,
        5,
    )
    .map_err(|e| e.to_string())?;
    let policy = Policy::new(ck).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checkpoints: Vec<usize> = Vec::new();
    while checkpoints.len() < 10 {
        let s = rng.random_range(1..=500);
        if !checkpoints.contains(&s) {
            checkpoints.push(s);
        }
    }
    let opts = RolloutOptions { max_steps: Some(500), stop_on_failure: false, field_snapshots: checkpoints.clone(), ..RolloutOptions::default() };
    let r = rollout(&policy, &env, &hash, 4, &opts).map_err(|e| e.to_string())?;
    let steps = r.trajectory.len() - 1;
    let cam = env.camera(tfdp_core::simenv::CameraId::Global);
    let mut worst: f64 = 0.0;
    for (step, field) in &r.field_snapshots {
        let px = project_trace(cam, &r.trace.prefix(step + 1)).pixels;
        let batch = render_field(&px, &env.field, cam.width, cam.height);
        for (a, b) in field.values().iter().zip(batch.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = steps == 500 && r.field_snapshots.len() == 10 && worst < 1e-6;
    Ok((ok, format!("{steps} steps, {} checkpoints, max |difference| {worst:.1e}", r.field_snapshots.len())))
}

/// 4. Ambiguity states look the same and give DP the same input.
fn ambiguity_construction(ctx: &mut Ctx) -> Check {
    let mut states = 0;
    let mut failures = Vec::new();
    for task in TaskName::ALL {
        let env = Env::new(&ctx.cfg.scene, task).map_err(|e| e.to_string())?;
        let conditioner = Conditioner::from_env(&env);
        let norm = Normalizer::fit([env.bounds.0, env.bounds.1]);
        let ambiguous = env.task.ambiguous_waypoints();
        if ambiguous.is_empty() {
            failures.push(format!("{task}: no ambiguous waypoint"));
        }
        for (wp, _) in ambiguous {
            let hist = expert_histories_at(&env, wp).map_err(|e| e.to_string())?;
            let dp_input = |h: &tfdp_core::policy::ProbeHistory| {
                let mut w = ObservationWindow::new(&VariantSpec::new(VariantKind::Dp), &conditioner);
                for (o, a) in h.observations.iter().zip(&h.actions) {
                    w.push(o, *a);
                }
                w.cond(&norm).iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
            };
            let first = hist.first().ok_or("no departures")?;
            let reference = dp_input(first);
            for h in &hist[1..] {
                states += 1;
                let (a, b) = (first.observations.last().unwrap(), h.observations.last().unwrap());
                let same_pixels = a.global.data().iter().zip(b.global.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.aux.data().iter().zip(b.aux.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                if !same_pixels {
                    failures.push(format!("{task} waypoint {}: renders differ", env.task.waypoint_names[wp]));
                }
                if dp_input(h) != reference {
                    failures.push(format!("{task} waypoint {}: DP inputs differ", env.task.waypoint_names[wp]));
                }
            }
        }
    }
    let ok = failures.is_empty() && states > 0;
    Ok((ok, if ok { format!("{states} repeated ambiguity states bit-identical across stages") } else { failures.join("; ") }))
}

/// 5. Success of the four variants on the alternating task; ordering on
/// every task.
fn q1(ctx: &mut Ctx) -> Check {
    use VariantKind::*;
    let t1 = TaskName::AlternatingPlace;
    let ddpm = SamplerKind::Ddpm;
    let dp = ctx.rate(t1, Dp, ddpm, 0)?;
    let hist = ctx.rate(t1, DpHistAct, ddpm, 0)?;
    let trace = ctx.rate(t1, TfTrace, ddpm, 0)?;
    let full = ctx.rate(t1, TfFull, ddpm, 0)?;
    let mut ok = dp <= 0.5 && hist <= 0.5 && trace >= 0.7 && full >= 0.85 && full - dp >= 0.35;
    let mut detail = format!("{t1}: DP {} HistAct {} trace {} TF {}", pct(dp), pct(hist), pct(trace), pct(full));
    for task in [TaskName::KeyPress, TaskName::TwoDrawer] {
        let (d, tr, f) = (ctx.rate(task, Dp, ddpm, 0)?, ctx.rate(task, TfTrace, ddpm, 0)?, ctx.rate(task, TfFull, ddpm, 0)?);
        ok &= f >= tr && tr > d;
        detail += &format!("; {task}: DP {} trace {} TF {}", pct(d), pct(tr), pct(f));
    }
    ok &= full >= trace && trace > dp;
    let slowest = ctx.train_seconds.values().copied().fold(0.0, f64::max);
    ok &= slowest <= 900.0;
    detail += &format!("; slowest training {slowest:.0} s");
    Ok((ok, detail))
}

/// 6. Background distractors.
fn q2(ctx: &mut Ctx) -> Check {
    let t1 = TaskName::AlternatingPlace;
    let ddpm = SamplerKind::Ddpm;
    let clean = ctx.rate(t1, VariantKind::TfFull, ddpm, 0)?;
    let dp = ctx.rate(t1, VariantKind::Dp, ddpm, 5)?;
    let tf = ctx.rate(t1, VariantKind::TfFull, ddpm, 5)?;
    let ok = dp <= 0.2 && tf >= 0.7 && clean - tf <= 0.15;
    Ok((ok, format!("5 distractors: DP {} TF {} (clean TF {})", pct(dp), pct(tf), pct(clean))))
}

/// 7. Purity at the two departures from the shared center pad.
fn purity(ctx: &mut Ctx) -> Check {
    let t1 = TaskName::AlternatingPlace;
    let env = Env::new(&ctx.cfg.scene, t1).map_err(|e| e.to_string())?;
    let center = env.task.waypoint_names.iter().position(|n| n == "center").ok_or("no center waypoint")?;
    let h = expert_histories_at(&env, center).map_err(|e| e.to_string())?;
    if h.len() != 2 {
        return Err(format!("expected two departures from center, got {}", h.len()));
    }
    let mut detail = Vec::new();
    let mut ok = true;
    for (variant, lo, hi) in [(VariantKind::Dp, 0.35, 0.65), (VariantKind::TfFull, 0.9, 1.0)] {
        let policy = ctx.policy(t1, variant, SamplerKind::Ddpm)?;
        let p = mode_purity(&policy, &env, &h[0], &h[1], 100, env.max_step, 7).map_err(|e| e.to_string())?;
        let inside = |v: f64| v >= lo && v <= hi && p.committed_a == 100 && p.committed_b == 100;
        ok &= inside(p.purity_a) && inside(p.purity_b);
        detail.push(format!(
            "{} {:.2}/{:.2} ({}+{} committed)",
            variant.label(),
            p.purity_a,
            p.purity_b,
            p.committed_a,
            p.committed_b
        ));
    }
    Ok((ok, detail.join(", ")))
}

/// 8. Decision latency and input lengths.
fn q3(ctx: &mut Ctx) -> Check {
    let t1 = TaskName::AlternatingPlace;
    let env = Env::new(&ctx.cfg.scene, t1).map_err(|e| e.to_string())?;
    let policies = [VariantKind::Dp, VariantKind::DpHistAct, VariantKind::TfFull]
        .into_iter()
        .map(|v| ctx.policy(t1, v, SamplerKind::Ddpm))
        .collect::<Result<Vec<_>, _>>()?;
    let report = bench_efficiency(&policies, &env, &ctx.cfg.scene.hash(), 200, 20).map_err(|e| e.to_string())?;
    let tf = report.latency_overhead(VariantKind::TfFull).unwrap();
    let hist = report.latency_overhead(VariantKind::DpHistAct).unwrap();
    let (rt, rh) = (report.input_ratio(VariantKind::TfFull).unwrap(), report.input_ratio(VariantKind::DpHistAct).unwrap());
    let ok = tf <= 0.15 && hist >= 2.0 * tf && rt == 1.5 && rh == 8.0;
    let dp_ms = report.get(VariantKind::Dp).unwrap().latency_ms;
    let field_ms = report.get(VariantKind::TfFull).unwrap().field_ms;
    Ok((
        ok,
        format!(
            "DP {dp_ms:.2} ms, TF {:+.1}% (field {field_ms:.3} ms), HistAct {:+.1}%; input ratios {rt}x / {rh}x",
            100.0 * tf,
            100.0 * hist
        ),
    ))
}

/// 9. DDIM and flow matching with and without trace conditioning.
fn q4(ctx: &mut Ctx) -> Check {
    let t3 = TaskName::TwoDrawer;
    let mut ok = true;
    let mut detail = Vec::new();
    for sampler in [SamplerKind::Ddim, SamplerKind::FlowMatching] {
        let without = ctx.rate(t3, VariantKind::Dp, sampler, 0)?;
        let with = ctx.rate(t3, VariantKind::TfFull, sampler, 0)?;
        ok &= without <= 0.2 && with >= 0.5;
        detail.push(format!("{sampler}: {} -> {}", pct(without), pct(with)));
    }
    let slowest = ctx.train_seconds.values().copied().fold(0.0, f64::max);
    ok &= slowest <= 900.0;
    Ok((ok, format!("{t3} {}", detail.join(", "))))
}

/// 10. Two-mode 1-D data and the single-point oracle.
fn generative_sanity(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { 0.6 } else { -0.6 } + 0.03 * rng.sample::<f64, _>(StandardNormal)).collect();
    let sched = cosine_schedule(100).map_err(|e| e.to_string())?;
    let spec = NetSpec::new(vec![17, 64, 64, 1], Activation::Tanh, 16).map_err(|e| e.to_string())?;
    let opt = OptConfig { lr: 3e-3, epochs: 200, batch_size: 64, ..OptConfig::default() };
    let mut ok = true;
    let mut detail = Vec::new();
    for (train, runs) in [
        (SamplerKind::Ddpm, vec![SamplerKind::Ddpm, SamplerKind::Ddim]),
        (SamplerKind::FlowMatching, vec![SamplerKind::FlowMatching]),
    ] {
        let params = fit_unconditional(&data, 1, &SamplerConfig::new(train), &sched, &spec, &opt, &mut rng).map_err(|e| e.to_string())?;
        for run in runs {
            let mut den = NetDenoiser::new(&params, &[]).map_err(|e| e.to_string())?;
            let xs = sample(&mut den, &SamplerConfig::new(run), &sched, 1000, &mut rng);
            let upper = xs.iter().filter(|&&x| x > 0.0).count() as f64 / xs.len() as f64;
            ok &= (upper - 0.5).abs() <= 0.1;
            detail.push(format!("{run} {}", pct(upper)));
        }
    }
    let a0 = vec![0.4, -0.3, 0.9];
    let mut noise = SinglePointNoise { a0: a0.clone(), sched: &sched };
    let normal = |rng: &mut ChaCha8Rng| (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    let ddpm = ddpm_sample(&mut noise, &sched, 4, true, false, &mut rng);
    let x = normal(&mut rng);
    let ddim = ddim_sample(&mut noise, &sched, 10, x, 4, true);
    let x = normal(&mut rng);
    let fm = fm_sample(&mut SinglePointVelocity { a0: a0.clone() }, 10, x, 4);
    let mut worst: f64 = 0.0;
    for out in [&ddpm, &ddim, &fm] {
        for (i, v) in out.iter().enumerate() {
            worst = worst.max((v - a0[i % 3]).abs());
        }
    }
    ok &= worst <= 0.05;
    Ok((ok, format!("upper-mode share {}; single-point L-inf error {worst:.1e}", detail.join(", "))))
}

/// 11. Re-running an experiment gives byte-identical CSVs.
fn reproducibility(ctx: &mut Ctx) -> Check {
    let root = ctx.cfg.out_dir.join("repro");
    let mut csvs = Vec::new();
    for run in 0..2 {
        let dir = root.join(format!("run{run}"));
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = ExperimentConfig {
            tasks: vec![TaskName::KeyPress],
            variants: vec![VariantKind::Dp, VariantKind::TfFull],
            samplers: vec![SamplerKind::Ddim],
            trials: 4,
            demos: Some(4),
            out_dir: dir.clone(),
            cache_dir: None,
            ..ExperimentConfig::default()
        };
        cfg.recipe.epochs = 2;
        cfg.recipe.hidden = vec![32, 32];
        let results = run_matrix(&cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let table = table_for(&results, 0).map_err(|e| e.to_string())?;
        table.emit(&dir, "repro", "repro").map_err(|e| e.to_string())?;
        csvs.push(std::fs::read(dir.join("repro.csv")).map_err(|e| e.to_string())?);
    }
    let same = csvs[0] == csvs[1];
    Ok((same, format!("two fresh runs ({} bytes each) {}", csvs[0].len(), if same { "identical" } else { "differ" })))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn(&mut Ctx) -> Check); 11] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "geometry and field suite", geometry_field_suite),
        (3, "closed-loop field consistency", closed_loop_consistency),
        (4, "ambiguity construction", ambiguity_construction),
        (10, "generative sanity", generative_sanity),
        (11, "reproducible reports", reproducibility),
        (5, "variant success and ordering", q1),
        (6, "distractor robustness", q2),
        (7, "mode purity", purity),
        (8, "latency and input size", q3),
        (9, "samplers with and without trace", q4),
    ];
    let mut ctx = Ctx::new();
    let mut lines = Vec::new();
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check(&mut ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!("{} [{id:>2}] {name}: {detail} ({:.0} s)", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        println!("{line}");
        lines.push((id, pass, line));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary");
    for (_, _, l) in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| !l.1).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

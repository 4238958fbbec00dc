//! Command-line interface of the `tfdp` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tfdp_core::genmodel::{SamplerConfig, SamplerKind};
use tfdp_core::policy::{train_policy, Conditioner, Policy, PolicyCheckpoint, VariantKind, VariantSpec};
use tfdp_core::simenv::{generate_dataset, Dataset, Env, TaskName};

use crate::bench::bench_efficiency;
use crate::error::{HarnessError, Result};
use crate::experiment::{evaluate, load_scene, policy_with, run_matrix, table_for, CheckpointStore, ExperimentConfig, Recipe, OUT_ENV};
use crate::render::{collect_episodes, field_dump, write_plot};
use crate::report::{ResultRow, ResultsTable};

#[derive(Debug, Parser)]
#[command(name = "tfdp", version, about = "Trace-focused diffusion policies on a toy multi-stage workspace")]
pub struct Cli {
    /// Scene file; the built-in scene when omitted.
    #[arg(long, global = true)]
    pub scene: Option<PathBuf>,
    /// Output directory. Falls back to $MA2_OUT, then to the experiment
    /// file's `out`, then to `results`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record expert demonstrations.
    GenData {
        #[arg(long)]
        task: String,
        /// Number of demonstrations; the task default when omitted.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset file; `<out>/<task>.ma2d` when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one policy.
    Train(TrainArgs),
    /// Roll out a checkpoint and write `eval.csv` and `eval.txt`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampler to run; must share the checkpoint's training objective.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 1000)]
        eval_seed: u64,
    },
    /// Every variant on every task.
    Ablate(ExperimentArgs),
    /// Success with background distractors.
    Disturb(ExperimentArgs),
    /// Per-decision latency, parameters and input lengths.
    Bench {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Timed decisions per policy.
        #[arg(long, default_value_t = 200)]
        decisions: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Checkpoints to benchmark instead of the experiment's policies.
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Denoising samplers with and without trace conditioning.
    Mech(ExperimentArgs),
    /// Write the field, trace raster and modulated image of an expert run.
    RenderField {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace length; the whole episode when omitted.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
    },
    /// Trajectory overlay and polylines of a checkpoint, or of the expert.
    Plot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task of the expert run when no checkpoint is given.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        eval_seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub variant: String,
    #[arg(long, default_value = "ddpm")]
    pub sampler: String,
    /// Dataset file; recorded on the fly when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 writes the randomly initialized network.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Keep the learning rate constant.
    #[arg(long)]
    pub no_cosine: bool,
    /// EMA decay, or `none`.
    #[arg(long)]
    pub ema: Option<String>,
    /// Checkpoint file; `<out>/<task>_<variant>_<sampler>.ck` when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ExperimentArgs {
    /// Experiment file (`key = value`); replaces the command's defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, num_args = 1..)]
    pub tasks: Vec<String>,
    #[arg(long, num_args = 1..)]
    pub distractors: Vec<usize>,
}

fn usage(msg: impl Into<String>) -> HarnessError {
    HarnessError::Usage(msg.into())
}

fn task(name: &str) -> Result<TaskName> {
    TaskName::parse(name).map_err(|e| usage(e.to_string()))
}

fn sampler(name: &str) -> Result<SamplerKind> {
    name.parse().map_err(|e: tfdp_core::genmodel::GenError| usage(e.to_string()))
}

fn variant(name: &str) -> Result<VariantKind> {
    name.parse().map_err(|e: tfdp_core::policy::PolicyError| usage(e.to_string()))
}

fn out_dir(cli_out: &Option<PathBuf>, configured: Option<&Path>) -> PathBuf {
    if let Some(o) = cli_out {
        return o.clone();
    }
    if let Some(o) = std::env::var_os(OUT_ENV) {
        return PathBuf::from(o);
    }
    configured.map_or_else(|| PathBuf::from("results"), Path::to_path_buf)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(HarnessError::file(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::file(dir))?;
    }
    std::fs::write(path, bytes).map_err(HarnessError::file(path))
}

fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    Ok(PolicyCheckpoint::decode(&read(path)?)?)
}

/// The experiment a command runs: the file when given, otherwise the
/// command's own defaults, then flag overrides.
fn experiment(cli: &Cli, args: &ExperimentArgs, defaults: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig { scene: load_scene(cli.scene.as_deref())?, ..ExperimentConfig::default() };
            defaults(&mut c);
            c
        }
    };
    if args.config.is_some() && cli.scene.is_some() {
        cfg.scene = load_scene(cli.scene.as_deref())?;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(e) = args.epochs {
        cfg.recipe.epochs = e;
    }
    if !args.tasks.is_empty() {
        cfg.tasks = args.tasks.iter().map(|t| task(t)).collect::<Result<_>>()?;
    }
    if !args.distractors.is_empty() {
        cfg.distractors = args.distractors.clone();
    }
    cfg.out_dir = out_dir(&cli.out, args.config.as_ref().map(|_| cfg.out_dir.as_path()));
    cfg.validate()?;
    Ok(cfg)
}

fn log(line: &str) {
    eprintln!("{line}");
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { task: t, n, seed, output } => {
            let scene = load_scene(cli.scene.as_deref())?;
            let t = task(t)?;
            let env = Env::new(&scene, t)?;
            let n = n.unwrap_or_else(|| t.default_demos());
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let ds = generate_dataset(&env, &scene.hash(), n, *seed, scene.demo_noise)?;
            let path = output.clone().unwrap_or_else(|| out_dir(&cli.out, None).join(format!("{t}.ma2d")));
            let mut bytes = Vec::new();
            ds.write_to(&mut bytes)?;
            write(&path, &bytes)?;
            println!("wrote {} demonstrations ({} steps) to {}", ds.demos.len(), ds.total_steps(), path.display());
        }
        Command::Train(a) => train(&cli, a)?,
        Command::Eval { checkpoint, sampler: s, trials, distractors, eval_seed } => {
            if *trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            let scene = load_scene(cli.scene.as_deref())?;
            let ck = load_checkpoint(checkpoint)?;
            ck.check_scene(&scene.hash())?;
            let env = Env::new(&scene, ck.task)?;
            let kind = match s {
                Some(s) => sampler(s)?,
                None => ck.sampler.kind,
            };
            let (t, v, params) = (ck.task, ck.variant.kind, ck.params.param_count());
            let policy = policy_with(ck, kind)?;
            let summary = evaluate(&policy, &env, &scene.hash(), *eval_seed, *trials, *distractors)?;
            let mut table = ResultsTable::new();
            table.push(ResultRow {
                task: t,
                variant: v,
                sampler: kind,
                trials: summary.trials,
                successes: summary.successes,
                mean_stages: summary.mean_stages(),
                latency_ms: None,
                params,
            })?;
            let dir = out_dir(&cli.out, None);
            table.emit(&dir, "eval", "Success rate (%)")?;
            print!("{}", table.to_text("Success rate (%)"));
        }
        Command::Ablate(a) => {
            let cfg = experiment(&cli, a, |_| {})?;
            let results = run_matrix(&cfg, &mut log)?;
            let table = table_for(&results, cfg.distractors[0])?;
            table.emit(&cfg.out_dir, "ablate", "Success rate (%) per task")?;
            print!("{}", table.to_text("Success rate (%) per task"));
        }
        Command::Disturb(a) => {
            let cfg = experiment(&cli, a, |c| {
                c.tasks = vec![TaskName::AlternatingPlace];
                c.variants = vec![VariantKind::Dp, VariantKind::TfFull];
                c.distractors = vec![0, 5];
            })?;
            let results = run_matrix(&cfg, &mut log)?;
            for &d in &cfg.distractors {
                let table = table_for(&results, d)?;
                let title = format!("Success rate (%) with {d} distractors");
                table.emit(&cfg.out_dir, &format!("disturb_d{d}"), &title)?;
                print!("{}", table.to_text(&title));
            }
        }
        Command::Mech(a) => {
            let cfg = experiment(&cli, a, |c| {
                c.tasks = vec![TaskName::TwoDrawer];
                c.variants = vec![VariantKind::Dp, VariantKind::TfFull];
                c.samplers = SamplerKind::ALL.to_vec();
            })?;
            let results = run_matrix(&cfg, &mut log)?;
            let table = table_for(&results, cfg.distractors[0])?;
            table.emit(&cfg.out_dir, "mech", "Success rate (%) per sampler")?;
            print!("{}", table.to_text("Success rate (%) per sampler"));
        }
        Command::Bench { exp, decisions, warmup, checkpoints } => {
            let cfg = experiment(&cli, exp, |c| {
                c.tasks = vec![TaskName::AlternatingPlace];
                c.variants = vec![VariantKind::Dp, VariantKind::DpHistAct, VariantKind::TfFull];
            })?;
            let t = cfg.tasks[0];
            let env = cfg.env(t)?;
            let policies: Vec<Policy> = if checkpoints.is_empty() {
                let store = CheckpointStore::new(cfg.cache_dir());
                cfg.variants
                    .iter()
                    .map(|&v| {
                        let trained = store.get_or_train(&cfg, t, v, cfg.samplers[0], cfg.seeds[0], &mut log)?;
                        policy_with(trained.checkpoint, cfg.samplers[0])
                    })
                    .collect::<Result<_>>()?
            } else {
                checkpoints.iter().map(|p| Ok(Policy::new(load_checkpoint(p)?)?)).collect::<Result<_>>()?
            };
            let report = bench_efficiency(&policies, &env, &cfg.scene.hash(), *decisions, *warmup)?;
            write(&cfg.out_dir.join("bench.csv"), report.to_csv().as_bytes())?;
            print!("{}", report.to_csv());
        }
        Command::RenderField { task: t, seed, points, distractors } => {
            let scene = load_scene(cli.scene.as_deref())?;
            let env = Env::new(&scene, task(t)?)?;
            let dump = field_dump(&env, *seed, *distractors, *points)?;
            let dir = out_dir(&cli.out, None).join("field");
            dump.write(&dir)?;
            println!("wrote field images for a {}-point trace to {}", dump.trace.len(), dir.display());
        }
        Command::Plot { checkpoint, task: t, trials, eval_seed } => {
            let scene = load_scene(cli.scene.as_deref())?;
            let (policy, name) = match (checkpoint, t) {
                (Some(p), _) => {
                    let ck = load_checkpoint(p)?;
                    let name = ck.task;
                    (Some(Policy::new(ck)?), name)
                }
                (None, Some(t)) => (None, task(t)?),
                (None, None) => return Err(usage("plot needs --checkpoint or --task")),
            };
            let env = Env::new(&scene, name)?;
            let episodes = collect_episodes(policy.as_ref(), &env, &scene.hash(), *eval_seed, *trials)?;
            let dir = out_dir(&cli.out, None).join("plot");
            write_plot(&env, &episodes, &dir)?;
            let ok = episodes.iter().filter(|e| e.success).count();
            println!("plotted {} episodes ({ok} successful) to {}", episodes.len(), dir.display());
        }
    }
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let scene = load_scene(cli.scene.as_deref())?;
    let t = task(&a.task)?;
    let v = variant(&a.variant)?;
    let s = sampler(&a.sampler)?;
    let env = Env::new(&scene, t)?;
    let mut recipe = Recipe::default();
    if let Some(e) = a.epochs {
        recipe.epochs = e;
    }
    if let Some(lr) = a.lr {
        recipe.lr = lr;
    }
    if let Some(b) = a.batch_size {
        recipe.batch_size = b;
    }
    recipe.cosine_decay &= !a.no_cosine;
    match a.ema.as_deref() {
        Some("none") => recipe.ema_decay = None,
        Some(x) => recipe.ema_decay = Some(x.parse().map_err(|_| usage(format!("--ema: cannot parse {x:?}")))?),
        None => {}
    }
    let path = a.output.clone().unwrap_or_else(|| out_dir(&cli.out, None).join(format!("{t}_{v}_{s}.ck")));
    let ck = if recipe.epochs == 0 {
        PolicyCheckpoint::untrained(&env, &scene.hash(), VariantSpec::new(v), SamplerConfig::new(s), &recipe.hidden, recipe.embed_dim, a.seed)?
    } else {
        let ds = match &a.data {
            Some(p) => {
                let ds = Dataset::read_from(read(p)?.as_slice())?;
                if ds.scene_hash != scene.hash() {
                    return Err(HarnessError::Data(format!("dataset was recorded on scene {}, not {}", ds.scene_hash, scene.hash())));
                }
                if ds.task != t {
                    return Err(HarnessError::Data(format!("dataset holds {}, not {t}", ds.task)));
                }
                ds
            }
            None => generate_dataset(&env, &scene.hash(), t.default_demos(), a.data_seed, scene.demo_noise)?,
        };
        let tc = recipe.train_config(v, s, a.seed);
        let epochs = tc.opt.epochs;
        train_policy(&ds, &Conditioner::from_env(&env), &tc, |e, l| {
            if e % 50 == 0 || e + 1 == epochs {
                eprintln!("epoch {e} loss {l:.5}");
            }
        })?
    };
    write(&path, &ck.encode())?;
    println!("wrote {t} {v} {s} checkpoint to {}", path.display());
    Ok(())
}

//! Experiment configuration, cached training and rollout evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use tfdp_core::config::KvConfig;
use tfdp_core::genmodel::{SamplerConfig, SamplerKind};
use tfdp_core::policy::{
    rollout, train_policy, Conditioner, Policy, PolicyCheckpoint, RolloutOptions, TrainConfig, VariantKind,
};
use tfdp_core::simenv::{generate_dataset, Dataset, Env, Scene, TaskName};

use crate::error::{HarnessError, Result};
use crate::report::{ResultRow, ResultsTable};

/// Environment variable that overrides the output directory of a config.
pub const OUT_ENV: &str = "MA2_OUT";

/// Training hyperparameters shared by every policy of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub ema_decay: Option<f64>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Recipe {
    fn default() -> Self {
        let base = TrainConfig::new(VariantKind::Dp, SamplerKind::Ddpm);
        Self {
            epochs: base.opt.epochs,
            lr: base.opt.lr,
            batch_size: base.opt.batch_size,
            cosine_decay: base.cosine_decay,
            ema_decay: base.ema_decay,
            hidden: base.hidden,
            embed_dim: base.embed_dim,
        }
    }
}

impl Recipe {
    pub fn train_config(&self, variant: VariantKind, sampler: SamplerKind, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(variant, sampler);
        cfg.opt.epochs = self.epochs;
        cfg.opt.lr = self.lr;
        cfg.opt.batch_size = self.batch_size;
        cfg.cosine_decay = self.cosine_decay;
        cfg.ema_decay = self.ema_decay;
        cfg.hidden = self.hidden.clone();
        cfg.embed_dim = self.embed_dim;
        cfg.seed = seed;
        cfg
    }
}

/// One experiment: which policies to train and how to evaluate them.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scene: Scene,
    pub tasks: Vec<TaskName>,
    pub variants: Vec<VariantKind>,
    pub samplers: Vec<SamplerKind>,
    /// Training seeds; every (task, variant, sampler) condition trains one
    /// policy per seed and pools the rollouts.
    pub seeds: Vec<u64>,
    /// Rollouts per policy.
    pub trials: usize,
    pub distractors: Vec<usize>,
    /// Rollout `i` resets the environment with seed `eval_seed + i`.
    pub eval_seed: u64,
    pub data_seed: u64,
    /// Demonstrations per task; the task default when absent.
    pub demos: Option<usize>,
    pub recipe: Recipe,
    pub out_dir: PathBuf,
    /// Where trained checkpoints are kept; `out_dir/checkpoints` if unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: Scene::default_scene(),
            tasks: TaskName::ALL.to_vec(),
            variants: VariantKind::ALL.to_vec(),
            samplers: vec![SamplerKind::Ddpm],
            seeds: vec![0],
            trials: 50,
            distractors: vec![0],
            eval_seed: 1000,
            data_seed: 0,
            demos: None,
            recipe: Recipe::default(),
            out_dir: PathBuf::from("results"),
            cache_dir: None,
        }
    }
}

fn list<T: std::str::FromStr>(cfg: &KvConfig, key: &str) -> Result<Option<Vec<T>>> {
    if !cfg.contains(key) {
        return Ok(None);
    }
    let v: Vec<String> = cfg.list(key)?;
    v.iter()
        .map(|s| s.parse::<T>().map_err(|_| HarnessError::Usage(format!("{key}: cannot parse {s:?}"))))
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

impl ExperimentConfig {
    /// Reads a `key = value` experiment file. Unknown keys are rejected;
    /// `scene` names a scene file relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        const KEYS: [&str; 18] = [
            "scene", "tasks", "variants", "samplers", "seeds", "trials", "distractors", "eval_seed", "data_seed", "demos", "epochs",
            "lr", "batch_size", "cosine_decay", "ema_decay", "hidden", "out", "cache",
        ];
        let kv = KvConfig::parse(text)?;
        if let Some((k, _)) = kv.keys_with_prefix("").find(|(k, _)| !KEYS.contains(k)) {
            return Err(HarnessError::Usage(format!("unknown experiment key {k:?}")));
        }
        let mut cfg = Self::default();
        if let Some(path) = kv.get("scene") {
            cfg.scene = load_scene(Some(&base.join(path)))?;
        }
        if let Some(t) = kv.get("tasks") {
            cfg.tasks = t.split_whitespace().map(TaskName::parse).collect::<Result<_, _>>()?;
        }
        if let Some(v) = list(&kv, "variants")? {
            cfg.variants = v;
        }
        if let Some(v) = list(&kv, "samplers")? {
            cfg.samplers = v;
        }
        if let Some(v) = list(&kv, "seeds")? {
            cfg.seeds = v;
        }
        if let Some(v) = list(&kv, "distractors")? {
            cfg.distractors = v;
        }
        cfg.trials = kv.parsed_or("trials", cfg.trials)?;
        cfg.eval_seed = kv.parsed_or("eval_seed", cfg.eval_seed)?;
        cfg.data_seed = kv.parsed_or("data_seed", cfg.data_seed)?;
        if kv.contains("demos") {
            cfg.demos = Some(kv.parsed("demos")?);
        }
        let r = &mut cfg.recipe;
        r.epochs = kv.parsed_or("epochs", r.epochs)?;
        r.lr = kv.parsed_or("lr", r.lr)?;
        r.batch_size = kv.parsed_or("batch_size", r.batch_size)?;
        r.cosine_decay = kv.parsed_or("cosine_decay", r.cosine_decay)?;
        match kv.get("ema_decay") {
            Some("none") => r.ema_decay = None,
            Some(_) => r.ema_decay = Some(kv.parsed("ema_decay")?),
            None => {}
        }
        if let Some(h) = list(&kv, "hidden")? {
            r.hidden = h;
        }
        if let Some(out) = kv.get("out") {
            cfg.out_dir = base.join(out);
        }
        if let Some(c) = kv.get("cache") {
            cfg.cache_dir = Some(base.join(c));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::file(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: &str| Err(HarnessError::Usage(m.to_string()));
        if self.trials == 0 {
            return usage("trials must be at least 1");
        }
        if self.tasks.is_empty() || self.variants.is_empty() || self.samplers.is_empty() || self.seeds.is_empty() {
            return usage("tasks, variants, samplers and seeds must be non-empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return usage("seeds must be distinct");
        }
        if self.recipe.epochs == 0 || self.recipe.batch_size == 0 || !(self.recipe.lr > 0.0) {
            return usage("epochs, batch_size and lr must be positive");
        }
        if self.demos == Some(0) {
            return usage("demos must be at least 1");
        }
        for t in &self.tasks {
            self.scene.task(*t)?;
        }
        Ok(())
    }

    /// Applies `MA2_OUT` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn demos_for(&self, task: TaskName) -> usize {
        self.demos.unwrap_or_else(|| task.default_demos())
    }

    /// Every setting that influences results, in canonical form.
    pub fn canonical(&self) -> KvConfig {
        let join = |v: Vec<String>| v.join(" ");
        let mut kv = KvConfig::default();
        kv.set("scene_hash", self.scene.hash());
        kv.set("tasks", join(self.tasks.iter().map(|t| t.to_string()).collect()));
        kv.set("variants", join(self.variants.iter().map(|v| v.to_string()).collect()));
        kv.set("samplers", join(self.samplers.iter().map(|s| s.to_string()).collect()));
        kv.set("seeds", join(self.seeds.iter().map(|s| s.to_string()).collect()));
        kv.set("distractors", join(self.distractors.iter().map(|s| s.to_string()).collect()));
        kv.set("trials", self.trials);
        kv.set("eval_seed", self.eval_seed);
        kv.set("data_seed", self.data_seed);
        kv.set("demos", self.demos.map_or("default".to_string(), |d| d.to_string()));
        for (k, v) in recipe_entries(&self.recipe) {
            kv.set(k, v);
        }
        kv
    }

    /// Hash of [`Self::canonical`].
    pub fn hash(&self) -> String {
        self.canonical().hash()
    }

    pub fn env(&self, task: TaskName) -> Result<Env> {
        Ok(Env::new(&self.scene, task)?)
    }

    pub fn dataset(&self, task: TaskName) -> Result<Dataset> {
        let env = self.env(task)?;
        Ok(generate_dataset(&env, &self.scene.hash(), self.demos_for(task), self.data_seed, self.scene.demo_noise)?)
    }
}

fn recipe_entries(r: &Recipe) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", r.epochs.to_string()),
        ("lr", r.lr.to_string()),
        ("batch_size", r.batch_size.to_string()),
        ("cosine_decay", r.cosine_decay.to_string()),
        ("ema_decay", r.ema_decay.map_or("none".to_string(), |v| v.to_string())),
        ("hidden", r.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ")),
        ("embed_dim", r.embed_dim.to_string()),
    ]
}

/// Reads a scene file, or the built-in scene when `path` is `None`.
pub fn load_scene(path: Option<&Path>) -> Result<Scene> {
    match path {
        None => Ok(Scene::default_scene()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(HarnessError::file(p))?;
            Ok(Scene::parse(&text)?)
        }
    }
}

/// The sampler whose training objective a checkpoint needs: DDIM reuses
/// the DDPM network.
pub fn training_sampler(sampler: SamplerKind) -> SamplerKind {
    match sampler {
        SamplerKind::Ddim => SamplerKind::Ddpm,
        s => s,
    }
}

/// A trained checkpoint together with how long training took.
#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: PolicyCheckpoint,
    pub train_seconds: f64,
    pub path: PathBuf,
    /// False when the checkpoint came from the cache.
    pub fresh: bool,
}

/// Trains checkpoints on demand and keeps them on disk, keyed by every
/// input that affects the weights.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    pub dir: PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn key(cfg: &ExperimentConfig, task: TaskName, variant: VariantKind, sampler: SamplerKind, seed: u64) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("scene_hash", cfg.scene.hash());
        kv.set("task", task);
        kv.set("variant", variant);
        kv.set("sampler", training_sampler(sampler));
        kv.set("seed", seed);
        kv.set("data_seed", cfg.data_seed);
        kv.set("demos", cfg.demos_for(task));
        for (k, v) in recipe_entries(&cfg.recipe) {
            kv.set(k, v);
        }
        kv
    }

    pub fn path(&self, cfg: &ExperimentConfig, task: TaskName, variant: VariantKind, sampler: SamplerKind, seed: u64) -> PathBuf {
        let key = Self::key(cfg, task, variant, sampler, seed);
        self.dir.join(format!("{task}_{variant}_{}_s{seed}_{}.ck", training_sampler(sampler), key.hash()))
    }

    /// Loads the checkpoint for a condition, training and saving it first
    /// if it is not on disk yet.
    pub fn get_or_train(
        &self,
        cfg: &ExperimentConfig,
        task: TaskName,
        variant: VariantKind,
        sampler: SamplerKind,
        seed: u64,
        log: &mut dyn FnMut(&str),
    ) -> Result<Trained> {
        let path = self.path(cfg, task, variant, sampler, seed);
        let meta = path.with_extension("meta");
        if path.exists() && meta.exists() {
            let bytes = std::fs::read(&path).map_err(HarnessError::file(&path))?;
            let checkpoint = PolicyCheckpoint::decode(&bytes)?;
            checkpoint.check_scene(&cfg.scene.hash())?;
            let text = std::fs::read_to_string(&meta).map_err(HarnessError::file(&meta))?;
            let train_seconds = KvConfig::parse(&text)?.parsed("train_seconds")?;
            return Ok(Trained { checkpoint, train_seconds, path, fresh: false });
        }
        let dataset = cfg.dataset(task)?;
        let env = cfg.env(task)?;
        let tc = cfg.recipe.train_config(variant, training_sampler(sampler), seed);
        let start = Instant::now();
        let checkpoint = train_policy(&dataset, &Conditioner::from_env(&env), &tc, |_, _| {})?;
        let train_seconds = start.elapsed().as_secs_f64();
        log(&format!("trained {task} {variant} {} seed {seed} in {train_seconds:.1} s", training_sampler(sampler)));
        std::fs::create_dir_all(&self.dir).map_err(HarnessError::file(&self.dir))?;
        std::fs::write(&path, checkpoint.encode()).map_err(HarnessError::file(&path))?;
        std::fs::write(&meta, format!("train_seconds = {train_seconds}\n")).map_err(HarnessError::file(&meta))?;
        Ok(Trained { checkpoint, train_seconds, path, fresh: true })
    }
}

/// Builds a policy that runs `sampler`, which must share the checkpoint's
/// training objective.
pub fn policy_with(checkpoint: PolicyCheckpoint, sampler: SamplerKind) -> Result<Policy> {
    if checkpoint.sampler.kind == sampler {
        return Ok(Policy::new(checkpoint)?);
    }
    let mut sc = SamplerConfig::new(sampler);
    sc.train_steps = checkpoint.sampler.train_steps;
    Ok(Policy::with_sampler(checkpoint, sc)?)
}

/// Aggregated rollouts of one policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSummary {
    pub trials: usize,
    pub successes: usize,
    pub stages: usize,
    /// Per-decision wall-clock of every rollout, milliseconds.
    pub decision_ms: Vec<f64>,
    /// Stage reached per trial, in trial order.
    pub outcomes: Vec<(bool, usize)>,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials.max(1) as f64
    }

    pub fn mean_stages(&self) -> f64 {
        self.stages as f64 / self.trials.max(1) as f64
    }

    pub fn merge(&mut self, other: EvalSummary) {
        self.trials += other.trials;
        self.successes += other.successes;
        self.stages += other.stages;
        self.decision_ms.extend(other.decision_ms);
        self.outcomes.extend(other.outcomes);
    }
}

/// Runs `trials` closed-loop episodes with reset seeds `eval_seed..`.
pub fn evaluate(policy: &Policy, env: &Env, scene_hash: &str, eval_seed: u64, trials: usize, distractors: usize) -> Result<EvalSummary> {
    let opts = RolloutOptions { distractors, ..RolloutOptions::default() };
    let mut out = EvalSummary::default();
    for i in 0..trials as u64 {
        let r = rollout(policy, env, scene_hash, eval_seed + i, &opts)?;
        out.trials += 1;
        out.successes += r.success as usize;
        out.stages += r.stages_completed;
        out.decision_ms.extend(&r.per_step_ms);
        out.outcomes.push((r.success, r.stages_completed));
    }
    Ok(out)
}

/// One evaluated condition, with training times of its policies.
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub task: TaskName,
    pub variant: VariantKind,
    pub sampler: SamplerKind,
    pub distractors: usize,
    pub summary: EvalSummary,
    pub params: usize,
    pub train_seconds: Vec<f64>,
}

impl ConditionResult {
    pub fn row(&self) -> ResultRow {
        ResultRow {
            task: self.task,
            variant: self.variant,
            sampler: self.sampler,
            trials: self.summary.trials,
            successes: self.summary.successes,
            mean_stages: self.summary.mean_stages(),
            latency_ms: None,
            params: self.params,
        }
    }
}

/// Trains (or loads) and evaluates every task × variant × sampler ×
/// distractor combination of `cfg`.
pub fn run_matrix(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<ConditionResult>> {
    cfg.validate()?;
    let store = CheckpointStore::new(cfg.cache_dir());
    let scene_hash = cfg.scene.hash();
    let mut out = Vec::new();
    for &task in &cfg.tasks {
        let env = cfg.env(task)?;
        for &variant in &cfg.variants {
            for &sampler in &cfg.samplers {
                let mut policies = Vec::new();
                let mut train_seconds = Vec::new();
                for &seed in &cfg.seeds {
                    let t = store.get_or_train(cfg, task, variant, sampler, seed, log)?;
                    train_seconds.push(t.train_seconds);
                    policies.push(policy_with(t.checkpoint, sampler)?);
                }
                let params = policies[0].ck.params.param_count();
                for &distractors in &cfg.distractors {
                    let mut summary = EvalSummary::default();
                    for p in &policies {
                        summary.merge(evaluate(p, &env, &scene_hash, cfg.eval_seed, cfg.trials, distractors)?);
                    }
                    log(&format!(
                        "{task} {variant} {sampler} distractors {distractors}: {}/{}",
                        summary.successes, summary.trials
                    ));
                    out.push(ConditionResult {
                        task,
                        variant,
                        sampler,
                        distractors,
                        summary,
                        params,
                        train_seconds: train_seconds.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Results of one distractor count as a table.
pub fn table_for(results: &[ConditionResult], distractors: usize) -> Result<ResultsTable> {
    let mut t = ResultsTable::new();
    for r in results.iter().filter(|r| r.distractors == distractors) {
        t.push(r.row())?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_experiment_files() {
        let cfg = ExperimentConfig::parse(
            "tasks = key_press two_drawer\nvariants = dp tf_full\nsamplers = ddim fm\nseeds = 3 4\ntrials = 7\n\
             distractors = 0 5\nepochs = 12\nema_decay = none\nhidden = 64 64\nout = res\n",
            Path::new("/tmp/x"),
        )
        .unwrap();
        assert_eq!(cfg.tasks, [TaskName::KeyPress, TaskName::TwoDrawer]);
        assert_eq!(cfg.variants, [VariantKind::Dp, VariantKind::TfFull]);
        assert_eq!(cfg.samplers, [SamplerKind::Ddim, SamplerKind::FlowMatching]);
        assert_eq!(cfg.seeds, [3, 4]);
        assert_eq!(cfg.distractors, [0, 5]);
        assert_eq!((cfg.trials, cfg.recipe.epochs, cfg.recipe.ema_decay), (7, 12, None));
        assert_eq!(cfg.recipe.hidden, [64, 64]);
        assert_eq!(cfg.out_dir, Path::new("/tmp/x/res"));
    }

    #[test]
    fn rejects_bad_experiments() {
        let base = Path::new(".");
        for text in ["trials = 0", "seeds = 1 1", "bogus = 1", "tasks = nope", "variants = dp wat", "epochs = 0"] {
            assert!(ExperimentConfig::parse(text, base).is_err(), "{text}");
        }
        assert_eq!(ExperimentConfig::parse("trials = 0", base).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn hash_tracks_result_relevant_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.trials = 49;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn ddim_shares_the_ddpm_checkpoint() {
        let cfg = ExperimentConfig::default();
        let store = CheckpointStore::new("/tmp/ck");
        let p = |s| store.path(&cfg, TaskName::TwoDrawer, VariantKind::Dp, s, 0);
        assert_eq!(p(SamplerKind::Ddim), p(SamplerKind::Ddpm));
        assert_ne!(p(SamplerKind::FlowMatching), p(SamplerKind::Ddpm));
    }
}

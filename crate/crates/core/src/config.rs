//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every field of
//! [`ExperimentConfig`] is addressable by the key of the same name; unknown
//! keys are errors. Task lists are comma-separated task names.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{DataConfig, FailureSource};
use crate::error::{Error, Result};
use crate::losses::TrainMode;
use crate::sim::{EnvVariant, Task};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "REWARD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    pub k: usize,
    pub prompt_len: usize,
    pub tau: f64,
    pub exclude_self: bool,
    pub batch_human: usize,
    pub batch_robot: usize,
    pub batch_failure: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_encoder: f64,
    pub lr_prompts: f64,
    pub grad_clip: f64,
    pub kmeans_iters: usize,
    /// Model initialization and batch sampling.
    pub seed: u64,
    /// Training dataset generation.
    pub data_seed: u64,
    /// Evaluation clips and planning episodes.
    pub eval_seed: u64,
    pub train_tasks: Vec<Task>,
    pub target_tasks: Vec<Task>,
    pub env_variant: EnvVariant,
    pub failure_sources: FailureSource,
    pub human_per_task: usize,
    pub robot_success_per_task: usize,
    pub robot_failure_per_task: usize,
    pub eval_success_per_task: usize,
    pub eval_failure_per_task: usize,
    pub noise: f64,
    pub domain_shift: f64,
    pub viewpoint_std: f64,
    pub plan_trials: usize,
    pub plan_seeds: usize,
    pub plan_candidates: usize,
    /// Planning trials per seed inside ablation cells; 0 skips planning.
    pub ablation_plan_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: TrainMode::Fvlc,
            k: 3,
            prompt_len: 2,
            tau: 0.07,
            exclude_self: false,
            batch_human: 8,
            batch_robot: 8,
            batch_failure: 8,
            epochs: 30,
            steps_per_epoch: 1000,
            lr_encoder: 1e-3,
            lr_prompts: 1e-2,
            grad_clip: 5.0,
            kmeans_iters: 50,
            seed: 0,
            data_seed: 0,
            eval_seed: 1000,
            train_tasks: vec![Task::OpenDrawer, Task::PushCupRightToLeft, Task::PokeCup],
            target_tasks: Task::TARGETS.to_vec(),
            env_variant: EnvVariant::Train,
            failure_sources: FailureSource::Both,
            human_per_task: 60,
            robot_success_per_task: 20,
            robot_failure_per_task: 20,
            eval_success_per_task: 20,
            eval_failure_per_task: 20,
            noise: 0.05,
            domain_shift: 1.0,
            viewpoint_std: 0.02,
            plan_trials: 50,
            plan_seeds: 3,
            plan_candidates: 300,
            ablation_plan_trials: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::BadConfig(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_tasks(value: &str) -> Result<Vec<Task>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Task>())
        .collect()
}

fn task_list(tasks: &[Task]) -> String {
    tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 35] = [
        "mode",
        "k",
        "prompt_len",
        "tau",
        "exclude_self",
        "batch_human",
        "batch_robot",
        "batch_failure",
        "epochs",
        "steps_per_epoch",
        "lr_encoder",
        "lr_prompts",
        "grad_clip",
        "kmeans_iters",
        "seed",
        "data_seed",
        "eval_seed",
        "train_tasks",
        "target_tasks",
        "env_variant",
        "failure_sources",
        "human_per_task",
        "robot_success_per_task",
        "robot_failure_per_task",
        "eval_success_per_task",
        "eval_failure_per_task",
        "noise",
        "domain_shift",
        "viewpoint_std",
        "plan_trials",
        "plan_seeds",
        "plan_candidates",
        "ablation_plan_trials",
        // Aliases of the paper-style symbols.
        "b_h",
        "b_r",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "k" => self.k = parse(key, v)?,
            "prompt_len" => self.prompt_len = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "exclude_self" => self.exclude_self = parse_bool(key, v)?,
            "batch_human" | "b_h" => self.batch_human = parse(key, v)?,
            "batch_robot" | "b_r" => self.batch_robot = parse(key, v)?,
            "batch_failure" => self.batch_failure = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "lr_encoder" => self.lr_encoder = parse(key, v)?,
            "lr_prompts" => self.lr_prompts = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "train_tasks" => self.train_tasks = parse_tasks(v)?,
            "target_tasks" => self.target_tasks = parse_tasks(v)?,
            "env_variant" => self.env_variant = v.parse()?,
            "failure_sources" => self.failure_sources = v.parse()?,
            "human_per_task" => self.human_per_task = parse(key, v)?,
            "robot_success_per_task" => self.robot_success_per_task = parse(key, v)?,
            "robot_failure_per_task" => self.robot_failure_per_task = parse(key, v)?,
            "eval_success_per_task" => self.eval_success_per_task = parse(key, v)?,
            "eval_failure_per_task" => self.eval_failure_per_task = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "domain_shift" => self.domain_shift = parse(key, v)?,
            "viewpoint_std" => self.viewpoint_std = parse(key, v)?,
            "plan_trials" => self.plan_trials = parse(key, v)?,
            "plan_seeds" => self.plan_seeds = parse(key, v)?,
            "plan_candidates" => self.plan_candidates = parse(key, v)?,
            "ablation_plan_trials" => self.ablation_plan_trials = parse(key, v)?,
            other => return Err(Error::BadConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("line {}: expected `key = value`", n + 1)))?;
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.name().into());
        put("k", self.k.to_string());
        put("prompt_len", self.prompt_len.to_string());
        put("tau", format!("{:?}", self.tau));
        put("exclude_self", self.exclude_self.to_string());
        put("batch_human", self.batch_human.to_string());
        put("batch_robot", self.batch_robot.to_string());
        put("batch_failure", self.batch_failure.to_string());
        put("epochs", self.epochs.to_string());
        put("steps_per_epoch", self.steps_per_epoch.to_string());
        put("lr_encoder", format!("{:?}", self.lr_encoder));
        put("lr_prompts", format!("{:?}", self.lr_prompts));
        put("grad_clip", format!("{:?}", self.grad_clip));
        put("kmeans_iters", self.kmeans_iters.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("eval_seed", self.eval_seed.to_string());
        put("train_tasks", task_list(&self.train_tasks));
        put("target_tasks", task_list(&self.target_tasks));
        put("env_variant", self.env_variant.name().into());
        put("failure_sources", self.failure_sources.name().into());
        put("human_per_task", self.human_per_task.to_string());
        put("robot_success_per_task", self.robot_success_per_task.to_string());
        put("robot_failure_per_task", self.robot_failure_per_task.to_string());
        put("eval_success_per_task", self.eval_success_per_task.to_string());
        put("eval_failure_per_task", self.eval_failure_per_task.to_string());
        put("noise", format!("{:?}", self.noise));
        put("domain_shift", format!("{:?}", self.domain_shift));
        put("viewpoint_std", format!("{:?}", self.viewpoint_std));
        put("plan_trials", self.plan_trials.to_string());
        put("plan_seeds", self.plan_seeds.to_string());
        put("plan_candidates", self.plan_candidates.to_string());
        put("ablation_plan_trials", self.ablation_plan_trials.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.k == 0 || self.prompt_len == 0 {
            return bad("k and prompt_len must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.batch_human == 0 || self.batch_robot == 0 {
            return bad("batch_human and batch_robot must be >= 1".into());
        }
        if self.mode != TrainMode::NoFailure && self.batch_failure == 0 {
            return bad(format!("mode {} needs batch_failure >= 1", self.mode));
        }
        if self.train_tasks.is_empty() {
            return bad("train_tasks is empty".into());
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_prompts", self.lr_prompts)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0".into());
        }
        if self.plan_candidates == 0 {
            return bad("plan_candidates must be >= 1".into());
        }
        Ok(())
    }

    /// All tasks the experiment touches, train tasks first.
    pub fn all_tasks(&self) -> Vec<Task> {
        let mut out = self.train_tasks.clone();
        for t in &self.target_tasks {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }

    /// Training data: human clips for every task, robot clips for every task
    /// (the trainer reads robot clips of train tasks only).
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            tasks: self.all_tasks(),
            human_per_task: self.human_per_task,
            robot_success_per_task: self.robot_success_per_task,
            robot_failure_per_task: self.robot_failure_per_task,
            failure_sources: self.failure_sources,
            noise: self.noise,
            domain_shift: self.domain_shift,
            viewpoint_std: self.viewpoint_std,
            seed: self.data_seed,
        }
    }

    /// Held-out robot clips of every task, from an independent seed.
    pub fn eval_data_config(&self) -> DataConfig {
        DataConfig {
            tasks: self.all_tasks(),
            human_per_task: 0,
            robot_success_per_task: self.eval_success_per_task,
            robot_failure_per_task: self.eval_failure_per_task,
            failure_sources: FailureSource::Both,
            noise: self.noise,
            domain_shift: self.domain_shift,
            viewpoint_std: self.viewpoint_std,
            seed: self.eval_seed,
        }
    }
}

/// Seed precedence: command-line flag, then `REWARD_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::BadConfig(format!("{SEED_ENV} is not an integer: `{v}`"))),
        None => Ok(config),
    }
}

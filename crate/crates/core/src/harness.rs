//! Training loop, evaluation and the ablation grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{align_clusters, label_churn, spherical_kmeans, ClusterState};
use crate::config::ExperimentConfig;
use crate::data::{derive_seed, gen_dataset_with, Dataset, FailureSource, LabeledClip};
use crate::dynamics::DynamicsModel;
use crate::embedding::Embedding;
use crate::encoders::{
    EncoderCache, EncoderDims, FailurePromptPool, PromptCache, RewardModel, TextTable,
    VideoEncoderParams,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Batch, FailureTexts, LossParts, LossWeights, TrainMode};
use crate::planner::{
    candidate, cem_refine, model_scorer, vmpc_plan, LearnedReward, OracleReward, PlanConfig,
};
use crate::sim::{self, Domain, EnvVariant, SimState, Task, Trajectory};

/// Fresh model: encoder, text table over every task, prompt pool over the
/// train tasks.
pub fn init_model(config: &ExperimentConfig) -> Result<RewardModel> {
    let dims = EncoderDims::default();
    let encoder = VideoEncoderParams::new(dims, derive_seed(config.seed, 0xe1, 0));
    let text = TextTable::new(&Task::ALL, dims.embed, derive_seed(config.seed, 0xe2, 0))?;
    let ids: Vec<usize> = config.train_tasks.iter().map(|t| t.id()).collect();
    let pool = FailurePromptPool::new(
        &ids,
        config.k,
        config.prompt_len,
        dims.embed,
        derive_seed(config.seed, 0xe3, 0),
    )?;
    Ok(RewardModel {
        encoder,
        text,
        pool,
    })
}

/// Clip indices of one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub human: Vec<usize>,
    pub robot_success: Vec<usize>,
    pub robot_failure: Vec<usize>,
}

/// Dataset strata the sampler draws from.
#[derive(Debug, Clone)]
pub struct Strata {
    pub human_by_task: BTreeMap<Task, Vec<usize>>,
    pub robot_success: Vec<usize>,
    /// Robot failures per train task, in dataset order.
    pub robot_failure: BTreeMap<Task, Vec<usize>>,
}

impl Strata {
    pub fn new(dataset: &Dataset, train_tasks: &[Task]) -> Self {
        let mut human_by_task: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
        let mut robot_success = Vec::new();
        let mut robot_failure: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
        for (i, c) in dataset.clips.iter().enumerate() {
            match c.domain {
                Domain::Human if c.success => human_by_task.entry(c.task).or_default().push(i),
                Domain::Robot if train_tasks.contains(&c.task) => {
                    if c.success {
                        robot_success.push(i);
                    } else {
                        robot_failure.entry(c.task).or_default().push(i);
                    }
                }
                _ => {}
            }
        }
        Strata {
            human_by_task,
            robot_success,
            robot_failure,
        }
    }

    pub fn failures(&self) -> Vec<usize> {
        self.robot_failure.values().flatten().copied().collect()
    }
}

fn draw(pool: &[usize], n: usize, rng: &mut impl Rng, stratum: &str) -> Result<Vec<usize>> {
    if pool.len() < n {
        return Err(Error::InsufficientStratum {
            stratum: stratum.into(),
            reason: format!("needs {n} clips, has {}", pool.len()),
        });
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// Draws `B_r` robot successes, `B_h` human clips and `B_f` robot failures.
///
/// Human slots first cover the robot tasks present, so every robot anchor
/// has a cross-domain positive; the rest come in same-task pairs over all
/// human tasks. Every success sample therefore has at least one other
/// same-task sample.
pub fn sample_batch(
    dataset: &Dataset,
    strata: &Strata,
    config: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<BatchIndices> {
    let robot_success = draw(&strata.robot_success, config.batch_robot, rng, "robot success")?;
    let mut robot_tasks: Vec<Task> = robot_success.iter().map(|&i| dataset.clips[i].task).collect();
    robot_tasks.sort();
    robot_tasks.dedup();

    let mut per_task: BTreeMap<Task, usize> = BTreeMap::new();
    let mut slots = config.batch_human;
    let mut uncovered = Vec::new();
    for &t in &robot_tasks {
        if slots > 0 {
            *per_task.entry(t).or_default() += 1;
            slots -= 1;
        } else {
            uncovered.push(t);
        }
    }
    if !uncovered.is_empty() {
        // Anchors without a human partner need a second robot sample.
        for t in uncovered {
            let n = robot_success.iter().filter(|&&i| dataset.clips[i].task == t).count();
            if n < 2 {
                return Err(Error::InsufficientStratum {
                    stratum: "human".into(),
                    reason: format!("batch_human too small to cover task {t}"),
                });
            }
        }
    }
    let human_tasks: Vec<Task> = strata
        .human_by_task
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&t, _)| t)
        .collect();
    while slots >= 2 {
        if human_tasks.is_empty() {
            return Err(Error::InsufficientStratum {
                stratum: "human".into(),
                reason: "no task has two human clips".into(),
            });
        }
        let t = human_tasks[rng.random_range(0..human_tasks.len())];
        *per_task.entry(t).or_default() += 2;
        slots -= 2;
    }
    if slots == 1 {
        let present: Vec<Task> = per_task.keys().copied().collect();
        let t = if present.is_empty() {
            robot_tasks[0]
        } else {
            present[rng.random_range(0..present.len())]
        };
        *per_task.entry(t).or_default() += 1;
    }
    let mut human = Vec::with_capacity(config.batch_human);
    for (&t, &n) in &per_task {
        let pool = strata.human_by_task.get(&t).map_or(&[][..], Vec::as_slice);
        human.extend(draw(pool, n, rng, &format!("human {t}"))?);
    }

    let robot_failure = if config.mode == TrainMode::NoFailure {
        Vec::new()
    } else {
        draw(&strata.failures(), config.batch_failure, rng, "robot failure")?
    };
    Ok(BatchIndices {
        human,
        robot_success,
        robot_failure,
    })
}

/// Pseudo-labels of every robot failure clip of the train tasks.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub states: BTreeMap<Task, ClusterState>,
    /// Dataset index to cluster.
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRecord {
    pub task: Task,
    pub objective: f64,
    pub churn: f64,
    pub sizes: Vec<usize>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Epoch {
        epoch: usize,
        mode: TrainMode,
        loss: f64,
        parts: LossParts,
        grad_norm: f64,
        clusters: Vec<ClusterRecord>,
    },
    Separation {
        task: Task,
        seen: bool,
        auc: f64,
    },
    Planning {
        task: Task,
        arm: String,
        dynamics: String,
        success: f64,
        per_seed: Vec<f64>,
    },
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::NonFiniteValue(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn encode_all(model: &RewardModel, dataset: &Dataset, idx: &[usize]) -> Result<Vec<Embedding>> {
    idx.iter()
        .map(|&i| model.encoder.encode(&dataset.clips[i].frames))
        .collect()
}

/// Clusters the failure embeddings of every train task. With `prev`, new
/// clusters are aligned to the previous centers and the prompt order is
/// kept; churn is measured against the previous labels.
pub fn recluster(
    model: &RewardModel,
    dataset: &Dataset,
    strata: &Strata,
    config: &ExperimentConfig,
    round: usize,
    prev: Option<&PseudoLabels>,
) -> Result<(PseudoLabels, Vec<ClusterRecord>)> {
    let mut states = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut records = Vec::new();
    for (&task, idx) in &strata.robot_failure {
        let feats = encode_all(model, dataset, idx)?;
        let seed = derive_seed(config.seed, 0xc100 + task.id() as u64, round as u64);
        let mut state = spherical_kmeans(&feats, config.k, config.kmeans_iters, seed)?;
        state.task_id = task.id();
        let mut churn = 0.0;
        if let Some(p) = prev.and_then(|p| p.states.get(&task)) {
            let perm = align_clusters(&p.centers, &state.centers)?;
            state.relabel(&perm);
            churn = label_churn(&p.assignments, &state.assignments);
        }
        for (&i, &q) in idx.iter().zip(&state.assignments) {
            labels.insert(i, q);
        }
        records.push(ClusterRecord {
            task,
            objective: state.objective,
            churn,
            sizes: state.sizes(),
        });
        states.insert(task, state);
    }
    Ok((PseudoLabels { states, labels }, records))
}

/// Forward state of one batch, kept for the backward pass.
struct Forward {
    batch: Batch,
    caches: Vec<(usize, EncoderCache)>,
    failure_texts: FailureTexts,
    prompt_caches: BTreeMap<usize, Vec<PromptCache>>,
}

fn forward_batch(
    model: &RewardModel,
    dataset: &Dataset,
    idx: &BatchIndices,
    labels: Option<&PseudoLabels>,
    config: &ExperimentConfig,
) -> Result<Forward> {
    let mut batch = Batch::new(config.tau);
    batch.exclude_self = config.exclude_self;
    let all: Vec<usize> = idx
        .human
        .iter()
        .chain(&idx.robot_success)
        .chain(&idx.robot_failure)
        .copied()
        .collect();
    let outs: Vec<(Embedding, EncoderCache)> = all
        .iter()
        .map(|&i| model.encoder.forward(&dataset.clips[i].frames))
        .collect::<Result<_>>()?;
    let mut caches = Vec::with_capacity(all.len());
    for (n, (&i, (emb, cache))) in all.iter().zip(outs).enumerate() {
        let clip = &dataset.clips[i];
        let task = clip.task.id();
        if n < idx.human.len() {
            batch.human.push(emb);
            batch.human_tasks.push(task);
        } else if n < idx.human.len() + idx.robot_success.len() {
            batch.robot_success.push(emb);
            batch.robot_success_tasks.push(task);
        } else {
            batch.robot_failure.push(emb);
            batch.failure_tasks.push(task);
            batch
                .failure_k
                .push(labels.and_then(|l| l.labels.get(&i).copied()).unwrap_or(0));
        }
        if n < idx.human.len() + idx.robot_success.len() || config.mode == TrainMode::Bce {
            batch.texts.insert(task, model.text.text_embed(task)?.clone());
        }
        caches.push((i, cache));
    }
    let mut failure_texts = FailureTexts::new();
    let mut prompt_caches = BTreeMap::new();
    if config.mode == TrainMode::Fvlc {
        for &t in model.pool.tasks() {
            let mut embs = Vec::with_capacity(model.pool.k());
            let mut cs = Vec::with_capacity(model.pool.k());
            for k in 0..model.pool.k() {
                let (e, c) = model.pool.forward(&model.text, t, k)?;
                embs.push(e);
                cs.push(c);
            }
            failure_texts.insert(t, embs);
            prompt_caches.insert(t, cs);
        }
        for &t in &batch.failure_tasks {
            batch.texts.insert(t, model.text.text_embed(t)?.clone());
        }
    }
    Ok(Forward {
        batch,
        caches,
        failure_texts,
        prompt_caches,
    })
}

/// Loss and parameter gradients `(encoder, pool)` of one batch.
fn loss_and_grads(
    model: &RewardModel,
    dataset: &Dataset,
    idx: &BatchIndices,
    labels: Option<&PseudoLabels>,
    config: &ExperimentConfig,
) -> Result<(f64, LossParts, Vec<f64>, Vec<f64>)> {
    let fwd = forward_batch(model, dataset, idx, labels, config)?;
    let (lv, parts) = total_loss(
        &fwd.batch,
        &fwd.failure_texts,
        config.mode,
        LossWeights::default(),
    )?;
    let g = &lv.grads;
    let emb_grads: Vec<&Vec<f64>> = g
        .human
        .iter()
        .chain(&g.robot_success)
        .chain(&g.robot_failure)
        .collect();
    let embs: Vec<&Embedding> = fwd
        .batch
        .human
        .iter()
        .chain(&fwd.batch.robot_success)
        .chain(&fwd.batch.robot_failure)
        .collect();
    let mut enc_grad = vec![0.0; model.encoder.num_params()];
    for (((i, cache), emb), go) in fwd.caches.iter().zip(embs).zip(emb_grads) {
        model
            .encoder
            .backward(&dataset.clips[*i].frames, emb, cache, go, &mut enc_grad);
    }
    let mut pool_grad = vec![0.0; model.pool.num_params()];
    for (t, gs) in &g.failure_texts {
        let caches = &fwd.prompt_caches[t];
        for (k, go) in gs.iter().enumerate() {
            let emb = &fwd.failure_texts[t][k];
            model
                .pool
                .backward(*t, k, emb, &caches[k], go, &mut pool_grad)?;
        }
    }
    if !lv.value.is_finite() {
        return Err(Error::NonFiniteValue("training loss".into()));
    }
    Ok((lv.value, parts, enc_grad, pool_grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RewardModel,
    pub labels: Option<PseudoLabels>,
    /// Epoch 0 is the mean loss at initialization, before any update.
    pub records: Vec<MetricRecord>,
}

impl TrainOutcome {
    /// Mean batch loss per epoch, starting with epoch 0.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Epoch { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

/// Plain gradient descent with global gradient-norm clipping.
///
/// In `fvlc` mode failure clips are clustered per train task before the
/// first epoch and again at the end of every epoch.
pub fn train(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = init_model(config)?;
    let strata = Strata::new(dataset, &config.train_tasks);
    let mut labels = None;
    let mut clusters = Vec::new();
    if config.mode == TrainMode::Fvlc {
        let (l, r) = recluster(&model, dataset, &strata, config, 0, None)?;
        labels = Some(l);
        clusters = r;
    }
    let mut records = Vec::new();

    // Initial loss over the batches of a dedicated stream.
    let mut rng0 = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xba7c, 0));
    let mut total = 0.0;
    let mut parts_sum = LossParts::default();
    let steps = config.steps_per_epoch.max(1);
    for _ in 0..steps {
        let idx = sample_batch(dataset, &strata, config, &mut rng0)?;
        let fwd = forward_batch(&model, dataset, &idx, labels.as_ref(), config)?;
        let (lv, parts) = total_loss(&fwd.batch, &fwd.failure_texts, config.mode, LossWeights::default())?;
        total += lv.value;
        add_parts(&mut parts_sum, &parts);
    }
    records.push(epoch_record(0, config.mode, total, parts_sum, 0.0, steps, clusters));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xba7c, 1));
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut parts_sum = LossParts::default();
        let mut norm_sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let idx = sample_batch(dataset, &strata, config, &mut rng)?;
            let (loss, parts, mut ge, mut gp) =
                loss_and_grads(&model, dataset, &idx, labels.as_ref(), config)?;
            if config.mode != TrainMode::Fvlc {
                gp.iter_mut().for_each(|g| *g = 0.0);
            }
            let gnorm = ge.iter().chain(&gp).map(|g| g * g).sum::<f64>().sqrt();
            if gnorm > config.grad_clip {
                let s = config.grad_clip / gnorm;
                ge.iter_mut().chain(gp.iter_mut()).for_each(|g| *g *= s);
            }
            for (p, g) in model.encoder.flat_mut().iter_mut().zip(&ge) {
                *p -= config.lr_encoder * g;
            }
            if config.mode == TrainMode::Fvlc {
                for (p, g) in model.pool.flat_mut().iter_mut().zip(&gp) {
                    *p -= config.lr_prompts * g;
                }
            }
            total += loss;
            add_parts(&mut parts_sum, &parts);
            norm_sum += gnorm;
        }
        let mut clusters = Vec::new();
        if config.mode == TrainMode::Fvlc {
            let (l, r) = recluster(&model, dataset, &strata, config, epoch, labels.as_ref())?;
            labels = Some(l);
            clusters = r;
        }
        records.push(epoch_record(
            epoch,
            config.mode,
            total,
            parts_sum,
            norm_sum,
            config.steps_per_epoch,
            clusters,
        ));
    }
    Ok(TrainOutcome {
        model,
        labels,
        records,
    })
}

fn add_parts(acc: &mut LossParts, p: &LossParts) {
    acc.cdc += p.cdc;
    acc.vlc += p.vlc;
    acc.failure += p.failure;
}

fn epoch_record(
    epoch: usize,
    mode: TrainMode,
    total: f64,
    parts: LossParts,
    norm_sum: f64,
    steps: usize,
    clusters: Vec<ClusterRecord>,
) -> MetricRecord {
    let n = steps.max(1) as f64;
    MetricRecord::Epoch {
        epoch,
        mode,
        loss: total / n,
        parts: LossParts {
            cdc: parts.cdc / n,
            vlc: parts.vlc / n,
            failure: parts.failure / n,
        },
        grad_norm: norm_sum / n,
        clusters,
    }
}

/// Area under the ROC curve of `scores` for `labels`; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::SizeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::OneClassOnly);
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredClip {
    pub task: Task,
    pub success: bool,
    pub score: f64,
    /// Score min-max normalized over the evaluated set.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub auc: f64,
    pub clips: Vec<ScoredClip>,
}

/// Learned reward of each clip for its own task, and the AUC of success
/// against failure.
pub fn evaluate_separation(model: &RewardModel, clips: &[&LabeledClip]) -> Result<SeparationReport> {
    let scores: Vec<f64> = clips
        .par_iter()
        .map(|c| model.score(&c.frames, c.task.id()))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = clips.iter().map(|c| c.success).collect();
    let auc = auc(&scores, &labels)?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let clips = clips
        .iter()
        .zip(&scores)
        .map(|(c, &s)| ScoredClip {
            task: c.task,
            success: c.success,
            score: s,
            normalized: if span > 0.0 { (s - lo) / span } else { 0.5 },
        })
        .collect();
    Ok(SeparationReport { auc, clips })
}

/// AUC of robot clips per task.
pub fn separation_by_task(
    model: &RewardModel,
    eval: &Dataset,
    tasks: &[Task],
) -> Result<BTreeMap<Task, f64>> {
    tasks
        .iter()
        .map(|&t| {
            let clips: Vec<&LabeledClip> = eval.select(Domain::Robot, Some(t), None).collect();
            Ok((t, evaluate_separation(model, &clips)?.auc))
        })
        .collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Held-out evaluation clips of every configured task, rendered in the
/// configured environment variant.
pub fn eval_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    gen_dataset_with(&config.eval_data_config(), &config.env_variant.render_params())
}

/// How actions are chosen in a planning trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanArm {
    /// One uniform random action sequence.
    Random,
    /// Random shooting scored by the ground-truth success indicator.
    Oracle,
    /// Random shooting scored by the learned reward.
    Learned,
}

impl PlanArm {
    pub fn name(self) -> &'static str {
        match self {
            PlanArm::Random => "random",
            PlanArm::Oracle => "oracle",
            PlanArm::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskPlanning {
    pub task: Task,
    /// Success rate for each seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanningReport {
    pub tasks: Vec<TaskPlanning>,
}

impl PlanningReport {
    pub fn mean(&self) -> f64 {
        mean(self.tasks.iter().map(|t| t.mean))
    }

    pub fn task(&self, task: Task) -> Option<&TaskPlanning> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Start state of planning trial `trial`.
pub fn trial_start(task: Task, seed: u64, trial: usize) -> SimState {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x57a7 + task.id() as u64, trial as u64));
    SimState::random_initial(task, &mut rng)
}

fn trial_plan_seed(task: Task, seed: u64, trial: usize) -> u64 {
    derive_seed(seed, 0x9a00 + task.id() as u64, trial as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanningSetup {
    pub trials: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub candidates: usize,
    pub variant: EnvVariant,
}

impl PlanningSetup {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        PlanningSetup {
            trials: config.plan_trials,
            seeds: config.plan_seeds,
            base_seed: config.eval_seed,
            candidates: config.plan_candidates,
            variant: config.env_variant,
        }
    }

    fn seed(&self, s: usize) -> u64 {
        derive_seed(self.base_seed, 0x5eed, s as u64)
    }
}

/// Success rate of executing each arm's plan in the true simulator.
pub fn evaluate_planning(
    model: &RewardModel,
    tasks: &[Task],
    arm: PlanArm,
    dynamics: &DynamicsModel,
    setup: &PlanningSetup,
) -> Result<PlanningReport> {
    if setup.trials == 0 {
        return Ok(PlanningReport::default());
    }
    let learned = LearnedReward {
        model,
        render: setup.variant.render_params(),
    };
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let mut per_seed = Vec::with_capacity(setup.seeds);
        for s in 0..setup.seeds {
            let seed = setup.seed(s);
            let mut successes = 0usize;
            for trial in 0..setup.trials {
                let s0 = trial_start(task, seed, trial);
                let plan_seed = trial_plan_seed(task, seed, trial);
                let config = PlanConfig {
                    g: setup.candidates,
                    seed: plan_seed,
                    ..PlanConfig::default()
                };
                let actions = match arm {
                    PlanArm::Random => candidate(plan_seed, 0, config.horizon),
                    PlanArm::Oracle => vmpc_plan(&OracleReward, task, dynamics, &s0, &config)?.actions,
                    PlanArm::Learned => vmpc_plan(&learned, task, dynamics, &s0, &config)?.actions,
                };
                if sim::success(task, &Trajectory::rollout(s0, &actions)) {
                    successes += 1;
                }
            }
            per_seed.push(successes as f64 / setup.trials as f64);
        }
        out.push(TaskPlanning {
            task,
            mean: mean(per_seed.iter().copied()),
            per_seed,
        });
    }
    Ok(PlanningReport { tasks: out })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CemTaskReport {
    pub task: Task,
    /// Mean learned score of the random-shooting plan and after refinement.
    pub learned_before: f64,
    pub learned_after: f64,
    /// True success rate of executing each plan.
    pub oracle_before: f64,
    pub oracle_after: f64,
    /// Refinement never lowered the learned score.
    pub monotone: bool,
}

/// Refines each learned-reward plan with CEM, scoring candidates by the
/// learned reward through `dynamics`, and compares true success before and
/// after.
pub fn evaluate_cem(
    model: &RewardModel,
    tasks: &[Task],
    dynamics: &DynamicsModel,
    setup: &PlanningSetup,
) -> Result<Vec<CemTaskReport>> {
    let learned = LearnedReward {
        model,
        render: setup.variant.render_params(),
    };
    let mut out = Vec::new();
    for &task in tasks {
        let (mut lb, mut la, mut ob, mut oa) = (0.0, 0.0, 0.0, 0.0);
        let mut monotone = true;
        let n = (setup.trials * setup.seeds).max(1) as f64;
        for s in 0..setup.seeds {
            let seed = setup.seed(s);
            for trial in 0..setup.trials {
                let s0 = trial_start(task, seed, trial);
                let config = PlanConfig {
                    g: setup.candidates,
                    seed: trial_plan_seed(task, seed, trial),
                    ..PlanConfig::default()
                };
                let plan = vmpc_plan(&learned, task, dynamics, &s0, &config)?;
                let scorer = model_scorer(&learned, task, dynamics, s0);
                let refined = cem_refine(&plan.actions, scorer, &config.cem, derive_seed(config.seed, 0xce, 0))?;
                monotone &= refined.history.windows(2).all(|w| w[1] >= w[0]);
                lb += plan.score;
                la += refined.best_score;
                let ok = |a: &[sim::Action]| sim::success(task, &Trajectory::rollout(s0, a));
                ob += f64::from(u8::from(ok(&plan.actions)));
                oa += f64::from(u8::from(ok(&refined.best)));
            }
        }
        out.push(CemTaskReport {
            task,
            learned_before: lb / n,
            learned_after: la / n,
            oracle_before: ob / n,
            oracle_after: oa / n,
            monotone,
        });
    }
    Ok(out)
}

/// Trains on `dataset` and evaluates on `eval`, returning every metric line.
pub fn run_pipeline(
    config: &ExperimentConfig,
    dataset: &Dataset,
    eval: &Dataset,
    dynamics: &DynamicsModel,
) -> Result<(TrainOutcome, Vec<MetricRecord>)> {
    let outcome = train(config, dataset)?;
    let mut records = outcome.records.clone();
    for (task, auc) in separation_by_task(&outcome.model, eval, &config.all_tasks())? {
        records.push(MetricRecord::Separation {
            task,
            seen: config.train_tasks.contains(&task),
            auc,
        });
    }
    let setup = PlanningSetup::from_config(config);
    for arm in [PlanArm::Random, PlanArm::Oracle, PlanArm::Learned] {
        let report = evaluate_planning(&outcome.model, &config.target_tasks, arm, dynamics, &setup)?;
        for t in report.tasks {
            records.push(MetricRecord::Planning {
                task: t.task,
                arm: arm.name().into(),
                dynamics: dynamics.name().into(),
                success: t.mean,
                per_seed: t.per_seed,
            });
        }
    }
    Ok((outcome, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub mode: TrainMode,
    /// `None` for modes without a prompt pool.
    pub k: Option<usize>,
    pub failure_source: FailureSource,
    pub auc_seen: f64,
    pub auc_heldout: f64,
    /// NaN when planning is disabled.
    pub planner_success: f64,
}

pub const ABLATION_K: [usize; 5] = [1, 2, 3, 4, 5];
pub const ABLATION_SOURCES: [FailureSource; 3] =
    [FailureSource::Random, FailureSource::NearSuccess, FailureSource::Both];

/// Cells of one seed: `no_failure` and `bce` once per failure source,
/// `fvlc` for every K and source.
pub fn ablation_cells() -> Vec<(TrainMode, Option<usize>, FailureSource)> {
    let mut cells = Vec::new();
    for mode in TrainMode::ALL {
        for source in ABLATION_SOURCES {
            if mode == TrainMode::Fvlc {
                for k in ABLATION_K {
                    cells.push((mode, Some(k), source));
                }
            } else {
                cells.push((mode, None, source));
            }
        }
    }
    cells
}

/// Runs the full grid. For each seed, model init and training data use the
/// seed and evaluation uses `base.eval_seed`; every cell of a seed shares the
/// same datasets per failure source.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    dynamics: &DynamicsModel,
) -> Result<Vec<AblationRow>> {
    let eval = eval_dataset(base)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut datasets = BTreeMap::new();
        for source in ABLATION_SOURCES {
            let mut c = base.clone();
            c.data_seed = seed;
            c.failure_sources = source;
            datasets.insert(source, gen_dataset_with(&c.data_config(), &EnvVariant::Train.render_params())?);
        }
        for (mode, k, source) in ablation_cells() {
            let mut c = base.clone();
            c.seed = seed;
            c.data_seed = seed;
            c.mode = mode;
            c.failure_sources = source;
            if let Some(k) = k {
                c.k = k;
            }
            if mode == TrainMode::NoFailure {
                c.batch_failure = 0;
            } else if c.batch_failure == 0 {
                c.batch_failure = ExperimentConfig::default().batch_failure;
            }
            let outcome = train(&c, &datasets[&source])?;
            let seen = separation_by_task(&outcome.model, &eval, &c.train_tasks)?;
            let held = separation_by_task(&outcome.model, &eval, &c.target_tasks)?;
            let planner_success = if c.ablation_plan_trials == 0 {
                f64::NAN
            } else {
                let setup = PlanningSetup {
                    trials: c.ablation_plan_trials,
                    seeds: 1,
                    ..PlanningSetup::from_config(&c)
                };
                evaluate_planning(&outcome.model, &c.target_tasks, PlanArm::Learned, dynamics, &setup)?.mean()
            };
            rows.push(AblationRow {
                seed,
                mode,
                k,
                failure_source: source,
                auc_seen: mean(seen.values().copied()),
                auc_heldout: mean(held.values().copied()),
                planner_success,
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.seed, a.mode, a.k, a.failure_source).cmp(&(b.seed, b.mode, b.k, b.failure_source))
    });
    Ok(rows)
}

pub const ABLATION_HEADER: [&str; 7] = [
    "seed",
    "mode",
    "k",
    "failure_source",
    "auc_seen",
    "auc_heldout",
    "planner_success",
];

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(ABLATION_HEADER).map_err(io)?;
    for r in rows {
        let f = |x: f64| if x.is_nan() { "-".to_string() } else { format!("{x:.4}") };
        w.write_record([
            r.seed.to_string(),
            r.mode.name().to_string(),
            r.k.map_or("-".to_string(), |k| k.to_string()),
            r.failure_source.name().to_string(),
            f(r.auc_seen),
            f(r.auc_heldout),
            f(r.planner_success),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

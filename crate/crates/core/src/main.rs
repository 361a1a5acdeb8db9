//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use reward_workbench::config::{resolve_seed, ExperimentConfig, SEED_ENV};
use reward_workbench::data::{
    derive_seed, gen_dataset_with, gen_scripted_success, load_dataset, save_dataset, DataConfig,
    FailureSource,
};
use reward_workbench::dynamics::{default_learned_dynamics, DynamicsModel, LearnedDynamics};
use reward_workbench::encoders::RewardModel;
use reward_workbench::gradcheck::gradient_suite;
use reward_workbench::harness::{
    eval_dataset, evaluate_planning, evaluate_separation, run_ablation, train, trial_start,
    write_ablation_csv, write_metrics, MetricRecord, PlanArm, PlanningSetup, ScoredClip,
};
use reward_workbench::planner::{vmpc_plan, LearnedReward, OracleReward, PlanConfig};
use reward_workbench::sim::{self, random_actions, Domain, Task, Trajectory, DEFAULT_HORIZON};

#[derive(Parser)]
#[command(name = "reward-workbench", version, about = "Failure-aware reward learning on a toy tabletop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled clip dataset.
    GenData(GenData),
    /// Train a reward model and write its checkpoint and metrics.
    Train(Train),
    /// Success/failure separation AUC of a trained model.
    EvalSep(EvalSep),
    /// Planning success rates of a trained model.
    EvalPlan(EvalPlan),
    /// Run the mode x K x failure-source grid and write a CSV report.
    Ablate(Ablate),
    /// Finite-difference check of every backward pass.
    GradCheck(GradCheck),
    /// Roll out a scripted or random policy in the simulator.
    SimRollout(SimRollout),
    /// Plan one episode and dump the trajectory.
    Plan(Plan),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides REWARD_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        c.seed = resolve_seed(self.seed, env.as_deref(), c.seed)?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_delimiter = ',', default_values_t = Task::ALL.to_vec())]
    tasks: Vec<Task>,
    #[arg(long, default_value_t = 60)]
    human_per_task: usize,
    #[arg(long, default_value_t = 20)]
    robot_success_per_task: usize,
    #[arg(long, default_value_t = 20)]
    robot_failure_per_task: usize,
    #[arg(long, default_value_t = FailureSource::Both)]
    failure_sources: FailureSource,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Dataset from `gen-data`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSep {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Evaluation clips; the held-out set of the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<Task>,
    /// JSON report with per-task AUC and normalized scores.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DynamicsArg {
    Gt,
    Learned,
}

#[derive(Args)]
struct DynamicsChoice {
    #[arg(long, value_enum, default_value_t = DynamicsArg::Gt)]
    dynamics: DynamicsArg,
    /// Learned dynamics checkpoint; trained on random episodes when absent.
    #[arg(long)]
    dynamics_model: Option<PathBuf>,
}

impl DynamicsChoice {
    fn build(&self, seed: u64) -> anyhow::Result<DynamicsModel> {
        Ok(match (self.dynamics, &self.dynamics_model) {
            (DynamicsArg::Gt, _) => DynamicsModel::GroundTruth,
            (DynamicsArg::Learned, Some(p)) => DynamicsModel::Learned(LearnedDynamics::load(p)?),
            (DynamicsArg::Learned, None) => default_learned_dynamics(seed)?.0,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Random,
    Oracle,
    Learned,
}

impl From<ArmArg> for PlanArm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Random => PlanArm::Random,
            ArmArg::Oracle => PlanArm::Oracle,
            ArmArg::Learned => PlanArm::Learned,
        }
    }
}

#[derive(Args)]
struct EvalPlan {
    #[command(flatten)]
    common: Common,
    /// Required for the learned arm.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<Task>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ArmArg::Random, ArmArg::Oracle, ArmArg::Learned])]
    arms: Vec<ArmArg>,
    #[command(flatten)]
    dynamics: DynamicsChoice,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    /// Seeds of the grid; defaults to the resolved master seed alone.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    dynamics: DynamicsChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 20)]
    batches: u64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Random,
    Scripted,
}

#[derive(Args)]
struct SimRollout {
    #[arg(long)]
    task: Task,
    #[arg(long, value_enum, default_value_t = PolicyArg::Scripted)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Learned,
    Oracle,
}

#[derive(Args)]
struct Plan {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    task: Task,
    #[arg(long, value_enum, default_value_t = RewardArg::Learned)]
    reward: RewardArg,
    /// Required for the learned reward.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    dynamics: DynamicsChoice,
    /// Candidate count.
    #[arg(long = "G", default_value_t = 300)]
    g: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RolloutDump<'a> {
    task: Task,
    success: bool,
    trajectory: &'a Trajectory,
}

#[derive(Serialize)]
struct PlanDump<'a> {
    task: Task,
    reward: &'static str,
    dynamics: &'static str,
    score: f64,
    success: bool,
    trajectory: &'a Trajectory,
}

#[derive(Serialize)]
struct SepTask {
    task: Task,
    auc: f64,
    clips: Vec<ScoredClip>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: Option<&PathBuf>) -> anyhow::Result<RewardModel> {
    let Some(p) = path else {
        bail!("--model is required for the learned reward");
    };
    RewardModel::load(p).with_context(|| format!("loading {}", p.display()))
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let config = DataConfig {
        tasks: a.tasks.clone(),
        human_per_task: a.human_per_task,
        robot_success_per_task: a.robot_success_per_task,
        robot_failure_per_task: a.robot_failure_per_task,
        failure_sources: a.failure_sources,
        noise: a.noise,
        seed: a.seed,
        ..DataConfig::default()
    };
    let data = gen_dataset_with(&config, &Default::default())?;
    save_dataset(&data, &a.out)?;
    println!("wrote {} clips to {}", data.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &Train) -> anyhow::Result<()> {
    let config = a.common.load()?;
    let data = match &a.data {
        Some(p) => load_dataset(p)?,
        None => gen_dataset_with(&config.data_config(), &Default::default())?,
    };
    let outcome = train(&config, &data)?;
    outcome.model.save(&a.out)?;
    if let Some(m) = &a.metrics {
        write_metrics(m, &outcome.records)?;
    }
    let losses = outcome.losses();
    println!(
        "mode {} loss {:.4} -> {:.4} over {} epochs",
        config.mode,
        losses[0],
        losses[losses.len() - 1],
        config.epochs
    );
    Ok(())
}

fn eval_sep(a: &EvalSep) -> anyhow::Result<()> {
    let config = a.common.load()?;
    let model = load_model(Some(&a.model))?;
    let eval = match &a.data {
        Some(p) => load_dataset(p)?,
        None => eval_dataset(&config)?,
    };
    let tasks = if a.tasks.is_empty() { config.all_tasks() } else { a.tasks.clone() };
    let mut report = Vec::new();
    for task in tasks {
        let clips: Vec<_> = eval.select(Domain::Robot, Some(task), None).collect();
        let r = evaluate_separation(&model, &clips)?;
        let seen = if config.train_tasks.contains(&task) { "seen" } else { "held-out" };
        println!("{:<24} {seen:<9} auc {:.4}", task.name(), r.auc);
        report.push(SepTask {
            task,
            auc: r.auc,
            clips: r.clips,
        });
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn eval_plan(a: &EvalPlan) -> anyhow::Result<()> {
    let mut config = a.common.load()?;
    if let Some(t) = a.trials {
        config.plan_trials = t;
    }
    if let Some(s) = a.seeds {
        config.plan_seeds = s;
    }
    let arms: Vec<PlanArm> = a.arms.iter().map(|&x| x.into()).collect();
    let model = match &a.model {
        Some(p) => load_model(Some(p))?,
        None if arms.contains(&PlanArm::Learned) => bail!("--model is required for the learned arm"),
        None => reward_workbench::harness::init_model(&config)?,
    };
    let dynamics = a.dynamics.build(config.seed)?;
    let tasks = if a.tasks.is_empty() { config.target_tasks.clone() } else { a.tasks.clone() };
    let setup = PlanningSetup::from_config(&config);
    let mut records = Vec::new();
    for arm in arms {
        let report = evaluate_planning(&model, &tasks, arm, &dynamics, &setup)?;
        for t in report.tasks {
            println!("{:<24} {:<8} {:<8} success {:.3}", t.task.name(), arm.name(), dynamics.name(), t.mean);
            records.push(MetricRecord::Planning {
                task: t.task,
                arm: arm.name().into(),
                dynamics: dynamics.name().into(),
                success: t.mean,
                per_seed: t.per_seed,
            });
        }
    }
    if let Some(m) = &a.metrics {
        write_metrics(m, &records)?;
    }
    Ok(())
}

fn ablate(a: &Ablate) -> anyhow::Result<()> {
    let config = a.common.load()?;
    let seeds = if a.seeds.is_empty() { vec![config.seed] } else { a.seeds.clone() };
    let dynamics = a.dynamics.build(config.seed)?;
    let rows = run_ablation(&config, &seeds, &dynamics)?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_ablation_csv(file, &rows)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn grad_check(a: &GradCheck) -> anyhow::Result<()> {
    let rows = gradient_suite(a.batches, a.tau)?;
    let mut failed = false;
    for name in reward_workbench::gradcheck::SUITE {
        let worst = rows
            .iter()
            .filter(|r| r.name == name)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        let ok = worst < a.tolerance;
        failed |= !ok;
        println!("{name:<28} max rel err {worst:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    if failed {
        bail!("gradient check exceeded tolerance {}", a.tolerance);
    }
    Ok(())
}

fn sim_rollout(a: &SimRollout) -> anyhow::Result<()> {
    let traj = match a.policy {
        PolicyArg::Scripted => gen_scripted_success(a.task, 0.0, a.seed)?,
        PolicyArg::Random => {
            let s0 = trial_start(a.task, a.seed, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, 0x70, 0));
            Trajectory::rollout(s0, &random_actions(DEFAULT_HORIZON, &mut rng))
        }
    };
    let success = sim::success(a.task, &traj);
    println!("{} horizon {} success {success}", a.task, traj.horizon());
    if let Some(p) = &a.out {
        write_json(
            p,
            &RolloutDump {
                task: a.task,
                success,
                trajectory: &traj,
            },
        )?;
    }
    Ok(())
}

fn plan(a: &Plan) -> anyhow::Result<()> {
    let config = a.common.load()?;
    let dynamics = a.dynamics.build(config.seed)?;
    let s0 = trial_start(a.task, config.seed, 0);
    let pc = PlanConfig {
        g: a.g,
        seed: derive_seed(config.seed, 0x91a, 0),
        ..PlanConfig::default()
    };
    let (plan, reward) = match a.reward {
        RewardArg::Oracle => (vmpc_plan(&OracleReward, a.task, &dynamics, &s0, &pc)?, "oracle"),
        RewardArg::Learned => {
            let model = load_model(a.model.as_ref())?;
            let r = LearnedReward {
                model: &model,
                render: config.env_variant.render_params(),
            };
            (vmpc_plan(&r, a.task, &dynamics, &s0, &pc)?, "learned")
        }
    };
    let traj = Trajectory::rollout(s0, &plan.actions);
    let success = sim::success(a.task, &traj);
    println!("{} score {:.4} success {success}", a.task, plan.score);
    if let Some(p) = &a.out {
        write_json(
            p,
            &PlanDump {
                task: a.task,
                reward,
                dynamics: dynamics.name(),
                score: plan.score,
                success,
                trajectory: &traj,
            },
        )?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::EvalSep(a) => eval_sep(&a),
        Command::EvalPlan(a) => eval_plan(&a),
        Command::Ablate(a) => ablate(&a),
        Command::GradCheck(a) => grad_check(&a),
        Command::SimRollout(a) => sim_rollout(&a),
        Command::Plan(a) => plan(&a),
    }
}

//! Synthetic human/robot clip datasets.
//!
//! Robot clips are simulator trajectories rendered in the robot domain.
//! Human clips replay scripted successful motions of the same tasks through
//! the fixed human-domain transform, with a per-clip viewpoint offset and
//! Gaussian feature noise on top. Human clips are always successes.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{
    self, Action, Domain, Grip, RenderParams, SimState, Task, Trajectory, DEFAULT_HORIZON,
    FRAME_WIDTH,
};

/// Frames per clip seen by the video encoder.
pub const CLIP_FRAMES: usize = 4;

/// Uniform action noise of the near-miss recipes.
pub const NEAR_MISS_NOISE: f64 = 0.03;

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "reward-dataset";

/// Upper bound on rejection-sampling attempts for a single clip.
const MAX_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Moves around without ever reaching the task object.
    Wander,
    /// Reaches the goal, then undoes it.
    Revert,
    /// Touches the task object but never reaches the goal.
    Incomplete,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Wander, Archetype::Revert, Archetype::Incomplete];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Wander => "wander",
            Archetype::Revert => "revert",
            Archetype::Incomplete => "incomplete",
        }
    }

    /// Labels a failed trajectory by what happened in it.
    pub fn classify(task: Task, traj: &Trajectory) -> Option<Archetype> {
        if sim::success(task, traj) {
            None
        } else if sim::success_at_intermediate(task, &traj.states) {
            Some(Archetype::Revert)
        } else if sim::touches_object(task, &traj.states) {
            Some(Archetype::Incomplete)
        } else {
            Some(Archetype::Wander)
        }
    }

    pub fn supported(self, task: Task) -> bool {
        !matches!(
            (task, self),
            (Task::Faucet, Archetype::Revert) | (Task::PokeCup, Archetype::Incomplete)
        )
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Archetype> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown archetype `{s}`")))
    }
}

/// Where robot failure clips come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureSource {
    /// Random action sequences that miss the goal.
    Random,
    /// Scripted near-successes: reverted or incomplete attempts.
    NearSuccess,
    /// Half of each.
    Both,
}

impl FailureSource {
    pub const ALL: [FailureSource; 3] = [
        FailureSource::Random,
        FailureSource::NearSuccess,
        FailureSource::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureSource::Random => "random",
            FailureSource::NearSuccess => "near_success",
            FailureSource::Both => "both",
        }
    }
}

impl fmt::Display for FailureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FailureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<FailureSource> {
        match s {
            "random" => Ok(FailureSource::Random),
            "near_success" | "near-success" => Ok(FailureSource::NearSuccess),
            "both" | "random,near_success" | "near_success,random" => Ok(FailureSource::Both),
            other => Err(Error::BadConfig(format!("unknown failure source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    /// `CLIP_FRAMES` rows of `FRAME_WIDTH` features.
    pub frames: Vec<Vec<f64>>,
    pub domain: Domain,
    pub task: Task,
    pub success: bool,
    pub archetype: Option<Archetype>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub clips: Vec<LabeledClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn select<'a>(
        &'a self,
        domain: Domain,
        task: Option<Task>,
        success: Option<bool>,
    ) -> impl Iterator<Item = &'a LabeledClip> + 'a {
        self.clips.iter().filter(move |c| {
            c.domain == domain
                && task.is_none_or(|t| c.task == t)
                && success.is_none_or(|s| c.success == s)
        })
    }

    pub fn count(&self, domain: Domain, task: Option<Task>, success: Option<bool>) -> usize {
        self.select(domain, task, success).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub tasks: Vec<Task>,
    pub human_per_task: usize,
    pub robot_success_per_task: usize,
    pub robot_failure_per_task: usize,
    pub failure_sources: FailureSource,
    /// Standard deviation of the human-domain feature noise. Robot clips
    /// receive a fifth of it.
    pub noise: f64,
    /// Strength of the human-domain affine transform, 0 = identity.
    pub domain_shift: f64,
    /// Standard deviation of the per-clip human viewpoint offset.
    pub viewpoint_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tasks: Task::ALL.to_vec(),
            human_per_task: 60,
            robot_success_per_task: 20,
            robot_failure_per_task: 20,
            failure_sources: FailureSource::Both,
            noise: 0.05,
            domain_shift: 1.0,
            viewpoint_std: 0.02,
            seed: 0,
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::BadConfig("no tasks configured".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::BadConfig("duplicate task in task list".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::BadConfig(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::BadConfig(format!(
                "domain_shift must lie in [0, 1], got {}",
                self.domain_shift
            )));
        }
        if !(self.viewpoint_std >= 0.0 && self.viewpoint_std.is_finite()) {
            return Err(Error::BadConfig("viewpoint_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent per-clip seeds.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// State indices sampled into a clip: uniform over `0..=horizon`.
pub fn clip_indices(horizon: usize) -> [usize; CLIP_FRAMES] {
    let mut out = [0; CLIP_FRAMES];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (i * horizon + (CLIP_FRAMES - 1) / 2) / (CLIP_FRAMES - 1);
    }
    out
}

/// Picks `CLIP_FRAMES` states uniformly from a state sequence.
pub fn subsample_states(states: &[SimState]) -> Vec<SimState> {
    clip_indices(states.len() - 1)
        .iter()
        .map(|&i| states[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub strength: f64,
    pub viewpoint_std: f64,
    pub noise: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            strength: 0.0,
            viewpoint_std: 0.0,
            noise: 0.0,
        }
    }
}

/// Renders one state in `domain`. The human transform is interpolated from
/// the identity by `strength`.
pub fn render_state(
    state: &SimState,
    domain: Domain,
    strength: f64,
    params: &RenderParams,
) -> [f64; FRAME_WIDTH] {
    let robot = sim::render_robot(state, params);
    match domain {
        Domain::Robot => robot,
        Domain::Human => {
            let human = sim::human_transform(&robot);
            let mut out = robot;
            for (o, h) in out.iter_mut().zip(human) {
                *o += strength * (h - *o);
            }
            out
        }
    }
}

/// Renders the clip frames of a trajectory.
pub fn render_clip(
    traj: &Trajectory,
    domain: Domain,
    shift: &DomainShift,
    params: &RenderParams,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let camera = match domain {
        Domain::Human if shift.viewpoint_std > 0.0 => {
            let n = Normal::new(0.0, shift.viewpoint_std).expect("finite std");
            [n.sample(rng), n.sample(rng)]
        }
        _ => [0.0, 0.0],
    };
    let noise_std = match domain {
        Domain::Human => shift.noise,
        Domain::Robot => shift.noise * 0.2,
    };
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    subsample_states(&traj.states)
        .iter()
        .map(|s| {
            let mut s = *s;
            s.camera_offset = [s.camera_offset[0] + camera[0], s.camera_offset[1] + camera[1]];
            let mut f = render_state(&s, domain, shift.strength, params).to_vec();
            if let Some(n) = &noise {
                for x in &mut f {
                    *x += n.sample(rng);
                }
            }
            f
        })
        .collect()
}

/// Renders planner-predicted states (already subsampled or not) with the
/// robot renderer and no noise.
pub fn render_robot_clip(states: &[SimState], params: &RenderParams) -> Vec<Vec<f64>> {
    subsample_states(states)
        .iter()
        .map(|s| sim::render_robot(s, params).to_vec())
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    /// Proportional approach to the task object plus an offset.
    GoTo { offset: [f64; 2], tol: f64 },
    /// Constant command for a number of steps; `noisy` controls whether the
    /// script's action noise is applied.
    Move { v: [f64; 2], steps: usize, grip: Grip, noisy: bool },
    /// Zero-velocity wait.
    Wait(usize),
}

fn approach_speed(delta: f64) -> f64 {
    delta.clamp(-sim::MAX_SPEED, sim::MAX_SPEED)
}

/// Executes a stage list on the simulator, padding with still actions (with
/// noise if `noise > 0`) until `horizon` steps.
fn run_script(
    task: Task,
    s0: SimState,
    stages: &[Stage],
    noise: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut s = s0;
    let mut states = vec![s0];
    let mut actions = Vec::with_capacity(horizon);
    let jitter = |rng: &mut dyn rand::RngCore, on: bool| -> [f64; 2] {
        if on && noise > 0.0 {
            [rng.random_range(-noise..=noise), rng.random_range(-noise..=noise)]
        } else {
            [0.0, 0.0]
        }
    };
    let push = |a: Action, s: &mut SimState, states: &mut Vec<SimState>, actions: &mut Vec<Action>| {
        if actions.len() < horizon {
            *s = sim::step(s, &a);
            states.push(*s);
            actions.push(a);
        }
    };
    for stage in stages {
        match *stage {
            Stage::GoTo { offset, tol } => {
                for _ in 0..40 {
                    if actions.len() >= horizon {
                        break;
                    }
                    let p = target(task, &s, offset);
                    let d = [p[0] - s.gripper[0], p[1] - s.gripper[1]];
                    if (d[0] * d[0] + d[1] * d[1]).sqrt() <= tol {
                        break;
                    }
                    let j = jitter(rng, true);
                    let a = Action::new(approach_speed(d[0]) + j[0], approach_speed(d[1]) + j[1], Grip::Hold);
                    push(a, &mut s, &mut states, &mut actions);
                }
            }
            Stage::Move { v, steps, grip, noisy } => {
                for _ in 0..steps {
                    let j = jitter(rng, noisy);
                    push(Action::new(v[0] + j[0], v[1] + j[1], grip), &mut s, &mut states, &mut actions);
                }
            }
            Stage::Wait(n) => {
                for _ in 0..n {
                    push(Action::still(), &mut s, &mut states, &mut actions);
                }
            }
        }
    }
    while actions.len() < horizon {
        push(Action::still(), &mut s, &mut states, &mut actions);
    }
    Trajectory { states, actions }
}

fn target(task: Task, s: &SimState, offset: [f64; 2]) -> [f64; 2] {
    let p = task.object_point(s);
    [p[0] + offset[0], p[1] + offset[1]]
}

fn goto(offset: [f64; 2]) -> Stage {
    Stage::GoTo { offset, tol: 0.008 }
}

fn mv(vx: f64, vy: f64, steps: usize) -> Stage {
    Stage::Move {
        v: [vx, vy],
        steps,
        grip: Grip::Hold,
        noisy: true,
    }
}

fn exact(vx: f64, vy: f64, steps: usize) -> Stage {
    Stage::Move {
        v: [vx, vy],
        steps,
        grip: Grip::Hold,
        noisy: false,
    }
}

fn grip(g: Grip) -> Stage {
    Stage::Move {
        v: [0.0, 0.0],
        steps: 1,
        grip: g,
        noisy: false,
    }
}

/// Scripted successful motion for `task`.
fn success_stages(task: Task) -> Vec<Stage> {
    match task {
        Task::CloseDrawer => vec![goto([0.0, 0.0]), mv(0.0, -0.03, 4), exact(0.0, -0.04, 3)],
        Task::OpenDrawer => vec![goto([0.0, 0.0]), mv(0.0, 0.03, 4), exact(0.0, 0.05, 3)],
        Task::Faucet => vec![goto([0.0, -0.01]), mv(0.03, 0.0, 2), exact(0.0, -0.05, 3)],
        Task::PushCupLeftToRight => vec![
            goto([-0.09, -0.02]),
            goto([-0.035, 0.0]),
            mv(0.03, 0.0, 4),
            exact(-0.04, 0.0, 2),
            exact(0.0, -0.04, 2),
        ],
        Task::PushCupRightToLeft => vec![
            goto([0.09, -0.02]),
            goto([0.035, 0.0]),
            mv(-0.03, 0.0, 4),
            exact(0.04, 0.0, 2),
            exact(0.0, -0.04, 2),
        ],
        Task::CupAway => vec![
            goto([0.0, -0.08]),
            goto([0.0, -0.035]),
            mv(0.0, 0.03, 6),
            exact(0.0, -0.05, 3),
        ],
        Task::PokeCup => vec![
            goto([-0.09, -0.02]),
            goto([-0.05, 0.0]),
            exact(0.015, 0.0, 1),
            exact(0.004, 0.0, 1),
            exact(-0.05, 0.0, 2),
        ],
    }
}

/// Scripted failure motion for a supported `(task, archetype)` pair; wander
/// is produced by rejection sampling instead.
fn failure_stages(task: Task, archetype: Archetype) -> Vec<Stage> {
    let carry = |vx: f64, vy: f64, steps: usize| Stage::Move {
        v: [vx, vy],
        steps,
        grip: Grip::Hold,
        noisy: false,
    };
    match (task, archetype) {
        (Task::CloseDrawer, Archetype::Revert) => vec![
            goto([0.0, 0.0]),
            mv(0.0, -0.03, 2),
            Stage::Wait(8),
            exact(0.0, 0.03, 3),
            exact(0.05, 0.0, 2),
        ],
        (Task::CloseDrawer, Archetype::Incomplete) => {
            vec![goto([0.0, 0.0]), exact(0.0, -0.008, 1), exact(0.05, 0.0, 2)]
        }
        (Task::OpenDrawer, Archetype::Revert) => vec![
            goto([0.0, 0.0]),
            mv(0.0, 0.03, 2),
            Stage::Wait(8),
            exact(0.0, -0.03, 3),
            exact(0.05, 0.0, 2),
        ],
        (Task::OpenDrawer, Archetype::Incomplete) => {
            vec![goto([0.0, 0.0]), exact(0.0, 0.008, 1), exact(0.05, 0.0, 2)]
        }
        (Task::Faucet, Archetype::Incomplete) => vec![
            goto([0.0, -0.07]),
            exact(0.0, 0.04, 1),
            Stage::Wait(3),
            exact(0.0, -0.04, 2),
        ],
        (Task::PushCupLeftToRight, Archetype::Revert) => vec![
            goto([-0.09, -0.02]),
            goto([-0.035, 0.0]),
            mv(0.03, 0.0, 3),
            Stage::Wait(6),
            grip(Grip::Close),
            carry(-0.03, 0.0, 3),
            grip(Grip::Open),
            exact(0.0, -0.05, 2),
        ],
        (Task::PushCupLeftToRight, Archetype::Incomplete) => vec![
            goto([-0.09, -0.02]),
            goto([-0.035, 0.0]),
            exact(0.02, 0.0, 1),
            exact(-0.04, 0.0, 2),
        ],
        (Task::PushCupRightToLeft, Archetype::Revert) => vec![
            goto([0.09, -0.02]),
            goto([0.035, 0.0]),
            mv(-0.03, 0.0, 3),
            Stage::Wait(6),
            grip(Grip::Close),
            carry(0.03, 0.0, 3),
            grip(Grip::Open),
            exact(0.0, -0.05, 2),
        ],
        (Task::PushCupRightToLeft, Archetype::Incomplete) => vec![
            goto([0.09, -0.02]),
            goto([0.035, 0.0]),
            exact(-0.02, 0.0, 1),
            exact(0.04, 0.0, 2),
        ],
        (Task::CupAway, Archetype::Revert) => vec![
            goto([0.0, -0.08]),
            goto([0.0, -0.035]),
            mv(0.0, 0.03, 5),
            Stage::Wait(6),
            grip(Grip::Close),
            carry(0.0, -0.03, 4),
            grip(Grip::Open),
            exact(0.0, -0.05, 2),
        ],
        (Task::CupAway, Archetype::Incomplete) => vec![
            goto([0.0, -0.08]),
            goto([0.0, -0.035]),
            exact(0.0, 0.025, 2),
            exact(0.0, -0.05, 2),
        ],
        (Task::PokeCup, Archetype::Revert) => vec![
            goto([-0.09, -0.02]),
            goto([-0.05, 0.0]),
            exact(0.015, 0.0, 1),
            Stage::Wait(8),
            mv(0.03, 0.0, 3),
            exact(-0.05, 0.0, 2),
        ],
        _ => Vec::new(),
    }
}

fn start_delay(rng: &mut impl Rng) -> Stage {
    Stage::Wait(rng.random_range(0..12))
}

fn with_delay(rng: &mut impl Rng, stages: Vec<Stage>) -> Vec<Stage> {
    let mut out = vec![start_delay(rng)];
    out.extend(stages);
    out
}

/// A scripted success with uniform action noise of amplitude `noise`,
/// retried until the predicate holds.
pub fn gen_scripted_success(task: Task, noise: f64, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let s0 = SimState::random_initial(task, &mut rng);
        let stages = with_delay(&mut rng, success_stages(task));
        let traj = run_script(task, s0, &stages, noise, DEFAULT_HORIZON, &mut rng);
        if sim::success(task, &traj) {
            return Ok(traj);
        }
    }
    Err(Error::BadConfig(format!("scripted success for {task} never succeeded")))
}

/// A uniformly random action sequence filtered by the ground-truth predicate.
pub fn gen_random_trajectory(task: Task, want_success: bool, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let s0 = SimState::random_initial(task, &mut rng);
        let traj = Trajectory::rollout(s0, &sim::random_actions(DEFAULT_HORIZON, &mut rng));
        if sim::success(task, &traj) == want_success {
            return Ok(traj);
        }
    }
    Err(Error::BadConfig(format!(
        "random shooting for {task} found no {} trajectory",
        if want_success { "successful" } else { "failed" }
    )))
}

/// A failed robot trajectory of the requested archetype.
pub fn gen_failure_trajectory(task: Task, archetype: Archetype, seed: u64) -> Result<Trajectory> {
    if !archetype.supported(task) {
        return Err(Error::ArchetypeUnsupported {
            task: task.name().into(),
            archetype: archetype.name().into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let s0 = SimState::random_initial(task, &mut rng);
        let traj = match archetype {
            Archetype::Wander => {
                Trajectory::rollout(s0, &sim::random_actions(DEFAULT_HORIZON, &mut rng))
            }
            _ => {
                let stages = with_delay(&mut rng, failure_stages(task, archetype));
                run_script(task, s0, &stages, NEAR_MISS_NOISE, DEFAULT_HORIZON, &mut rng)
            }
        };
        if Archetype::classify(task, &traj) == Some(archetype) {
            return Ok(traj);
        }
    }
    Err(Error::BadConfig(format!("could not realize {archetype} failure for {task}")))
}

/// One generated episode before rendering.
#[derive(Debug, Clone)]
pub struct Episode {
    pub domain: Domain,
    pub task: Task,
    pub success: bool,
    pub archetype: Option<Archetype>,
    pub seed: u64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Copy)]
enum Recipe {
    HumanDemo,
    RandomSuccess,
    ScriptedSuccess,
    RandomFailure,
    NearSuccessFailure,
}

fn near_success_archetypes(task: Task) -> Vec<Archetype> {
    [Archetype::Revert, Archetype::Incomplete]
        .into_iter()
        .filter(|a| a.supported(task))
        .collect()
}

fn make_episode(task: Task, recipe: Recipe, index: usize, seed: u64) -> Result<Episode> {
    let (domain, traj) = match recipe {
        Recipe::HumanDemo => (Domain::Human, gen_scripted_success(task, NEAR_MISS_NOISE, seed)?),
        Recipe::RandomSuccess => (Domain::Robot, gen_random_trajectory(task, true, seed)?),
        Recipe::ScriptedSuccess => {
            (Domain::Robot, gen_scripted_success(task, NEAR_MISS_NOISE, seed)?)
        }
        Recipe::RandomFailure => (Domain::Robot, gen_random_trajectory(task, false, seed)?),
        Recipe::NearSuccessFailure => {
            let kinds = near_success_archetypes(task);
            let kind = kinds[index % kinds.len()];
            (Domain::Robot, gen_failure_trajectory(task, kind, seed)?)
        }
    };
    let success = sim::success(task, &traj);
    Ok(Episode {
        domain,
        task,
        success,
        archetype: Archetype::classify(task, &traj),
        seed,
        trajectory: traj,
    })
}

/// All episodes for `config`, in a fixed order: per task, human demos, then
/// robot successes, then robot failures.
pub fn gen_episodes(config: &DataConfig) -> Result<Vec<Episode>> {
    config.validate()?;
    let mut plan = Vec::new();
    for &task in &config.tasks {
        for i in 0..config.human_per_task {
            plan.push((task, Recipe::HumanDemo, i));
        }
        for i in 0..config.robot_success_per_task {
            let recipe = if i % 2 == 0 {
                Recipe::RandomSuccess
            } else {
                Recipe::ScriptedSuccess
            };
            plan.push((task, recipe, i));
        }
        for i in 0..config.robot_failure_per_task {
            let recipe = match config.failure_sources {
                FailureSource::Random => Recipe::RandomFailure,
                FailureSource::NearSuccess => Recipe::NearSuccessFailure,
                FailureSource::Both if i % 2 == 0 => Recipe::RandomFailure,
                FailureSource::Both => Recipe::NearSuccessFailure,
            };
            plan.push((task, recipe, i));
        }
    }
    plan.par_iter()
        .enumerate()
        .map(|(idx, &(task, recipe, i))| {
            let stream = task.id() as u64 * 8 + recipe as u64;
            let seed = derive_seed(config.seed, stream, i as u64);
            make_episode(task, recipe, i / 2, seed).map(|e| (idx, e))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().map(|(_, e)| e).collect())
}

pub fn render_episode(ep: &Episode, config: &DataConfig, params: &RenderParams) -> LabeledClip {
    let shift = DomainShift {
        strength: config.domain_shift,
        viewpoint_std: config.viewpoint_std,
        noise: config.noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ep.seed, 0xc11f, 0));
    LabeledClip {
        frames: render_clip(&ep.trajectory, ep.domain, &shift, params, &mut rng),
        domain: ep.domain,
        task: ep.task,
        success: ep.success,
        archetype: ep.archetype,
        seed: ep.seed,
    }
}

pub fn gen_dataset(config: &DataConfig) -> Result<Dataset> {
    gen_dataset_with(config, &RenderParams::default())
}

pub fn gen_dataset_with(config: &DataConfig, params: &RenderParams) -> Result<Dataset> {
    let episodes = gen_episodes(config)?;
    Ok(Dataset {
        clips: episodes
            .par_iter()
            .map(|ep| render_episode(ep, config, params))
            .collect(),
    })
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes the dataset as versioned line-delimited text.
///
/// ```text
/// reward-dataset v1 clips=<N> frames=4 width=16
/// clip <domain> <task> <success 0|1> <archetype|-> <seed> <4*16 values>
/// ```
///
/// Values are written in Rust's shortest round-trip decimal form, so a load
/// reproduces every bit.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "{DATASET_MAGIC} v{DATASET_VERSION} clips={} frames={CLIP_FRAMES} width={FRAME_WIDTH}",
        dataset.len()
    )?;
    for c in &dataset.clips {
        write!(
            w,
            "clip {} {} {} {} {}",
            c.domain.name(),
            c.task.name(),
            u8::from(c.success),
            c.archetype.map_or("-", |a| a.name()),
            c.seed
        )?;
        for row in &c.frames {
            for x in row {
                write!(w, " {x:?}")?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn parse_header(
    line: &str,
    magic: &str,
    expected: u32,
    path: &Path,
) -> Result<Vec<(String, String)>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(corrupt(path, format!("missing `{magic}` header")));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| corrupt(path, "malformed version"))?;
    if version != expected {
        return Err(Error::VersionMismatch {
            expected,
            found: version,
        });
    }
    parts
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| corrupt(path, format!("bad header field `{kv}`")))
        })
        .collect()
}

pub(crate) fn header_usize(fields: &[(String, String)], key: &str, path: &Path) -> Result<usize> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| corrupt(path, format!("missing header field `{key}`")))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| corrupt(path, "empty file"))??;
    let fields = parse_header(&header, DATASET_MAGIC, DATASET_VERSION, path)?;
    let n = header_usize(&fields, "clips", path)?;
    let frames = header_usize(&fields, "frames", path)?;
    let width = header_usize(&fields, "width", path)?;
    let mut clips = Vec::with_capacity(n);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| corrupt(path, format!("record {}: {what}", lineno + 1));
        let mut tok = line.split(' ');
        if tok.next() != Some("clip") {
            return Err(bad("expected `clip`"));
        }
        let domain: Domain = tok.next().ok_or_else(|| bad("domain"))?.parse().map_err(|_| bad("domain"))?;
        let task: Task = tok.next().ok_or_else(|| bad("task"))?.parse().map_err(|_| bad("task"))?;
        let success = match tok.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad("success flag")),
        };
        let archetype = match tok.next() {
            Some("-") => None,
            Some(a) => Some(a.parse::<Archetype>().map_err(|_| bad("archetype"))?),
            None => return Err(bad("archetype")),
        };
        let seed: u64 = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("seed"))?;
        let values: Vec<f64> = tok
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("frame value"))?;
        if values.len() != frames * width {
            return Err(bad("wrong number of frame values"));
        }
        if archetype.is_some() == success {
            return Err(bad("archetype must be present exactly for failures"));
        }
        clips.push(LabeledClip {
            frames: values.chunks(width).map(|c| c.to_vec()).collect(),
            domain,
            task,
            success,
            archetype,
            seed,
        });
    }
    if clips.len() != n {
        return Err(corrupt(
            path,
            format!("header promises {n} clips, found {}", clips.len()),
        ));
    }
    Ok(Dataset { clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{dot, norm};

    fn small_config() -> DataConfig {
        DataConfig {
            tasks: vec![Task::CloseDrawer, Task::Faucet, Task::PushCupRightToLeft],
            human_per_task: 4,
            robot_success_per_task: 4,
            robot_failure_per_task: 6,
            seed: 11,
            ..DataConfig::default()
        }
    }

    #[test]
    fn identity_shift_without_noise_matches_robot_rendering() {
        let traj = gen_scripted_success(Task::CloseDrawer, NEAR_MISS_NOISE, 3).unwrap();
        let params = RenderParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let human = render_clip(&traj, Domain::Human, &DomainShift::none(), &params, &mut rng);
        let robot = render_clip(&traj, Domain::Robot, &DomainShift::none(), &params, &mut rng);
        assert_eq!(human, robot);
    }

    #[test]
    fn default_sizes_match_config() {
        let config = DataConfig {
            seed: 5,
            ..DataConfig::default()
        };
        let ds = gen_dataset(&config).unwrap();
        assert_eq!(ds.len(), 7 * (60 + 40));
        for task in Task::ALL {
            assert_eq!(ds.count(Domain::Human, Some(task), None), 60);
            assert_eq!(ds.count(Domain::Human, Some(task), Some(false)), 0);
            assert_eq!(ds.count(Domain::Robot, Some(task), Some(true)), 20);
            assert_eq!(ds.count(Domain::Robot, Some(task), Some(false)), 20);
        }
        for c in &ds.clips {
            assert_eq!(c.frames.len(), CLIP_FRAMES);
            assert!(c.frames.iter().all(|f| f.len() == FRAME_WIDTH));
            assert_eq!(c.archetype.is_some(), !c.success);
        }
    }

    #[test]
    fn archetype_semantics_hold_for_every_supported_pair() {
        for task in Task::ALL {
            for arch in Archetype::ALL {
                for seed in 0..4 {
                    match gen_failure_trajectory(task, arch, seed) {
                        Ok(traj) => {
                            assert!(!sim::success(task, &traj));
                            match arch {
                                Archetype::Wander => {
                                    assert!(!sim::touches_object(task, &traj.states))
                                }
                                Archetype::Revert => {
                                    assert!(sim::success_at_intermediate(task, &traj.states))
                                }
                                Archetype::Incomplete => {
                                    assert!(sim::touches_object(task, &traj.states));
                                    assert!(!sim::success_ever(task, &traj.states));
                                }
                            }
                        }
                        Err(Error::ArchetypeUnsupported { .. }) => assert!(!arch.supported(task)),
                        Err(e) => panic!("{task} {arch}: {e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn closing_drawer_archetypes() {
        for seed in 0..5 {
            let t = gen_failure_trajectory(Task::CloseDrawer, Archetype::Wander, seed).unwrap();
            assert!(t.states.iter().all(|s| s.drawer_ext == 0.07));
            let t = gen_failure_trajectory(Task::CloseDrawer, Archetype::Revert, seed).unwrap();
            let min = t.states.iter().map(|s| s.drawer_ext).fold(f64::INFINITY, f64::min);
            assert!(min < 0.05);
            assert!(t.states.last().unwrap().drawer_ext >= 0.05);
        }
    }

    #[test]
    fn faucet_incomplete_never_turns_the_handle() {
        for seed in 0..5 {
            let t = gen_failure_trajectory(Task::Faucet, Archetype::Incomplete, seed).unwrap();
            assert!(t.states.iter().all(|s| s.faucet_angle <= 0.01));
        }
        assert!(matches!(
            gen_failure_trajectory(Task::Faucet, Archetype::Revert, 0),
            Err(Error::ArchetypeUnsupported { .. })
        ));
    }

    #[test]
    fn labels_match_ground_truth() {
        let config = small_config();
        for ep in gen_episodes(&config).unwrap() {
            assert_eq!(sim::success(ep.task, &ep.trajectory), ep.success);
            assert!(ep.trajectory.replays_exactly());
            if ep.domain == Domain::Human {
                assert!(ep.success);
            }
            assert_eq!(ep.archetype, Archetype::classify(ep.task, &ep.trajectory));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        assert_eq!(gen_dataset(&config).unwrap(), gen_dataset(&config).unwrap());
        let other = DataConfig {
            seed: 12,
            ..small_config()
        };
        assert_ne!(gen_dataset(&config).unwrap(), gen_dataset(&other).unwrap());
    }

    #[test]
    fn domain_shift_is_nontrivial_but_keeps_signal() {
        let config = DataConfig::default();
        let shift = DomainShift {
            strength: config.domain_shift,
            viewpoint_std: config.viewpoint_std,
            noise: config.noise,
        };
        let params = RenderParams::default();
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..100u64 {
            let task = Task::ALL[i as usize % 7];
            let traj = gen_scripted_success(task, NEAR_MISS_NOISE, 1000 + i).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let robot = render_clip(&traj, Domain::Robot, &DomainShift::none(), &params, &mut rng);
            let human = render_clip(&traj, Domain::Human, &shift, &params, &mut rng);
            for (r, h) in robot.iter().zip(&human) {
                total += dot(r, h) / (norm(r) * norm(h));
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!(mean > 0.2 && mean < 0.9, "mean cosine {mean}");
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = gen_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let text = fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() * 2 / 3];
        let truncated = dir.path().join("cut.txt");
        fs::write(&truncated, cut).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(Error::CorruptFile { .. })));

        let bumped = text.replacen("reward-dataset v1", "reward-dataset v99", 1);
        let versioned = dir.path().join("v99.txt");
        fs::write(&versioned, bumped).unwrap();
        assert!(matches!(
            load_dataset(&versioned),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let config = DataConfig {
            tasks: vec![],
            ..DataConfig::default()
        };
        assert!(matches!(gen_dataset(&config), Err(Error::BadConfig(_))));
        let config = DataConfig {
            noise: -1.0,
            ..DataConfig::default()
        };
        assert!(matches!(gen_dataset(&config), Err(Error::BadConfig(_))));
    }

    #[test]
    fn clip_indices_cover_the_horizon() {
        assert_eq!(clip_indices(60), [0, 20, 40, 60]);
        assert_eq!(clip_indices(15), [0, 5, 10, 15]);
    }
}

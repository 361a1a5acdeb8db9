//! Random-shooting model-predictive planning and CEM refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{derive_seed, render_robot_clip};
use crate::dynamics::{chunked_predict, DynamicsModel, CHUNK};
use crate::encoders::RewardModel;
use crate::error::{Error, Result};
use crate::sim::{self, Action, RenderParams, SimState, Task, MAX_SPEED};

/// Scores a predicted state sequence for a task.
pub trait RewardFn: Sync {
    fn score(&self, task: Task, states: &[SimState]) -> Result<f64>;
}

/// `σ(v · t_T)` of the predicted states rendered as a robot clip.
pub struct LearnedReward<'a> {
    pub model: &'a RewardModel,
    pub render: RenderParams,
}

impl RewardFn for LearnedReward<'_> {
    fn score(&self, task: Task, states: &[SimState]) -> Result<f64> {
        let clip = render_robot_clip(states, &self.render);
        self.model.score(&clip, task.id())
    }
}

/// Ground-truth success indicator of the predicted states.
pub struct OracleReward;

impl RewardFn for OracleReward {
    fn score(&self, task: Task, states: &[SimState]) -> Result<f64> {
        Ok(if sim::success_states(task, states) { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CemConfig {
    pub iterations: usize,
    pub population: usize,
    pub elite_fraction: f64,
    pub init_std: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            iterations: 4,
            population: 64,
            elite_fraction: 0.1,
            init_std: 0.02,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).floor() as usize).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::BadConfig("CEM population must be >= 1".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::BadConfig(format!(
                "elite fraction must lie in (0, 1], got {}",
                self.elite_fraction
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::BadConfig("CEM init_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    /// Candidate count.
    pub g: usize,
    /// Actions per candidate.
    pub horizon: usize,
    pub seed: u64,
    pub cem: CemConfig,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            g: 300,
            horizon: sim::DEFAULT_HORIZON,
            seed: 0,
            cem: CemConfig::default(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::BadConfig("G must be >= 1".into()));
        }
        if self.horizon == 0 || self.horizon % CHUNK != 0 {
            return Err(Error::BadHorizon(self.horizon));
        }
        self.cem.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub score: f64,
    /// Index of the chosen candidate.
    pub index: usize,
}

/// Candidate `i` of a seeded random-shooting round.
pub fn candidate(seed: u64, i: usize, horizon: usize) -> Vec<Action> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5107, i as u64));
    sim::random_actions(horizon, &mut rng)
}

/// First index of the maximum; NaN never wins.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || scores[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Scores `G` uniform random action sequences through `model` and returns
/// the best; ties go to the lowest candidate index.
pub fn vmpc_plan(
    reward: &dyn RewardFn,
    task: Task,
    model: &DynamicsModel,
    s0: &SimState,
    config: &PlanConfig,
) -> Result<Plan> {
    config.validate()?;
    let scores: Vec<f64> = (0..config.g)
        .into_par_iter()
        .map(|i| {
            let actions = candidate(config.seed, i, config.horizon);
            let states = chunked_predict(model, s0, &actions)?;
            reward.score(task, &states)
        })
        .collect::<Result<_>>()?;
    let index = argmax(&scores);
    Ok(Plan {
        actions: candidate(config.seed, index, config.horizon),
        score: scores[index],
        index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    pub best: Vec<Action>,
    pub best_score: f64,
    /// Sampling mean after the last refit, as flat action codes.
    pub mean: Vec<f64>,
    /// Best-ever score before the first iteration and after each one.
    pub history: Vec<f64>,
}

fn flatten(actions: &[Action]) -> Vec<f64> {
    actions.iter().flat_map(|a| a.to_codes()).collect()
}

fn unflatten(codes: &[f64]) -> Vec<Action> {
    codes.chunks(3).map(Action::from_codes).collect()
}

fn clamp_code(j: usize, x: f64) -> f64 {
    if j % 3 == 2 {
        x.clamp(-1.0, 1.0)
    } else {
        x.clamp(-MAX_SPEED, MAX_SPEED)
    }
}

/// Cross-entropy search around `initial`. The initial sequence counts as the
/// first best-ever candidate and is only replaced by a strictly better one.
pub fn cem_refine<F>(initial: &[Action], scorer: F, config: &CemConfig, seed: u64) -> Result<CemResult>
where
    F: Fn(&[Action]) -> Result<f64> + Sync,
{
    config.validate()?;
    let mut mean = flatten(initial);
    let dim = mean.len();
    let mut std = vec![config.init_std; dim];
    let mut best = initial.to_vec();
    let mut best_score = scorer(initial)?;
    let mut history = vec![best_score];
    let elites = config.elite_count();
    for it in 0..config.iterations {
        let population: Vec<Vec<f64>> = (0..config.population)
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64, p as u64));
                (0..dim)
                    .map(|j| {
                        let x = if std[j] > 0.0 {
                            Normal::new(mean[j], std[j]).expect("finite std").sample(&mut rng)
                        } else {
                            mean[j]
                        };
                        clamp_code(j, x)
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<f64> = population
            .par_iter()
            .map(|codes| scorer(&unflatten(codes)))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..config.population).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = &order[..elites];
        if scores[top[0]] > best_score {
            best_score = scores[top[0]];
            best = unflatten(&population[top[0]]);
        }
        history.push(best_score);
        for j in 0..dim {
            let m = top.iter().map(|&i| population[i][j]).sum::<f64>() / elites as f64;
            let v = top
                .iter()
                .map(|&i| (population[i][j] - m).powi(2))
                .sum::<f64>()
                / elites as f64;
            mean[j] = m;
            std[j] = v.sqrt();
        }
    }
    Ok(CemResult {
        best,
        best_score,
        mean,
        history,
    })
}

/// Scorer for CEM: predicted states under `model`, scored by `reward`.
pub fn model_scorer<'a>(
    reward: &'a dyn RewardFn,
    task: Task,
    model: &'a DynamicsModel,
    s0: SimState,
) -> impl Fn(&[Action]) -> Result<f64> + Sync + 'a {
    move |actions| reward.score(task, &chunked_predict(model, &s0, actions)?)
}

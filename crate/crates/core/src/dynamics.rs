//! Chunked action-conditioned state prediction.
//!
//! Actions are consumed in chunks of four. The ground-truth model replays the
//! simulator; the learned model predicts the state change over one chunk as
//! `A x + b + V tanh(W x + c)` on standardized inputs `x = [s; a_1..a_4]` and
//! is applied autoregressively.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::derive_seed;
use crate::encoders::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::sim::{self, Action, SimState, Task, Trajectory, DEFAULT_HORIZON, STATE_DIM};

/// Actions per predicted chunk.
pub const CHUNK: usize = 4;
/// Contact features: gripper offset and squared distance to each of the
/// drawer handle, faucet handle and cup.
const CONTACT_FEATURES: usize = 9;
/// Width of the regressor input: state, contact features and four
/// `(vx, vy, grip)` codes.
pub const INPUT_DIM: usize = STATE_DIM + CONTACT_FEATURES + 3 * CHUNK;
/// Random episodes collected for the default learned model.
pub const RANDOM_EPISODES: usize = 2000;
/// Fewest chunk transitions `train_dynamics` accepts.
pub const MIN_TRANSITIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    GroundTruth,
    Learned(LearnedDynamics),
}

impl DynamicsModel {
    pub fn name(&self) -> &'static str {
        match self {
            DynamicsModel::GroundTruth => "gt",
            DynamicsModel::Learned(_) => "learned",
        }
    }
}

fn check_horizon(actions: &[Action]) -> Result<()> {
    if actions.is_empty() || actions.len() % CHUNK != 0 {
        return Err(Error::BadHorizon(actions.len()));
    }
    Ok(())
}

/// The initial state followed by the state after every chunk.
pub fn chunked_predict(model: &DynamicsModel, s0: &SimState, actions: &[Action]) -> Result<Vec<SimState>> {
    check_horizon(actions)?;
    match model {
        DynamicsModel::GroundTruth => {
            let mut out = Vec::with_capacity(actions.len() / CHUNK + 1);
            let mut s = *s0;
            out.push(s);
            for chunk in actions.chunks(CHUNK) {
                for a in chunk {
                    s = sim::step(&s, a);
                }
                out.push(s);
            }
            Ok(out)
        }
        DynamicsModel::Learned(m) => {
            let mut out = Vec::with_capacity(actions.len() / CHUNK + 1);
            let mut s = *s0;
            out.push(s);
            for chunk in actions.chunks(CHUNK) {
                s = m.predict_chunk(&s, chunk);
                out.push(s);
            }
            Ok(out)
        }
    }
}

fn chunk_input(s: &SimState, chunk: &[Action]) -> Vec<f64> {
    let mut x = s.to_vector().to_vec();
    for p in [s.drawer_handle(), sim::FAUCET_HANDLE, s.cup] {
        let d = [s.gripper[0] - p[0], s.gripper[1] - p[1]];
        x.extend_from_slice(&[d[0], d[1], d[0] * d[0] + d[1] * d[1]]);
    }
    for a in chunk {
        x.extend_from_slice(&a.to_codes());
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedDynamics {
    hidden: usize,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    /// `hidden × in` row-major.
    w: Vec<f64>,
    c: Vec<f64>,
    /// `out × (in + 1 + hidden)` row-major over features `[x; 1; tanh(Wx + c)]`.
    out: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl LearnedDynamics {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.in_mean)
            .zip(&self.in_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn features(&self, z: &[f64]) -> Vec<f64> {
        let mut phi = z.to_vec();
        phi.push(1.0);
        for h in 0..self.hidden {
            let row = &self.w[h * self.in_dim..(h + 1) * self.in_dim];
            let pre: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.c[h];
            phi.push(pre.tanh());
        }
        phi
    }

    /// Raw regressor output for one input row.
    pub fn predict_raw(&self, x: &[f64]) -> Vec<f64> {
        let phi = self.features(&self.standardize(x));
        self.out
            .chunks(phi.len())
            .map(|row| row.iter().zip(&phi).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict_chunk(&self, s: &SimState, chunk: &[Action]) -> SimState {
        let x = chunk_input(s, chunk);
        let delta = self.predict_raw(&x);
        let v: Vec<f64> = s.to_vector().iter().zip(&delta).map(|(a, d)| a + d).collect();
        SimState::from_vector(&v, s.camera_offset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = vec![self.in_dim as f64, self.out_dim as f64, self.hidden as f64];
        save_tensors(
            path,
            &[
                ("dynamics.dims".into(), vec![3], dims),
                ("dynamics.in_mean".into(), vec![self.in_dim], self.in_mean.clone()),
                ("dynamics.in_std".into(), vec![self.in_dim], self.in_std.clone()),
                ("dynamics.w".into(), vec![self.hidden, self.in_dim], self.w.clone()),
                ("dynamics.c".into(), vec![self.hidden], self.c.clone()),
                (
                    "dynamics.out".into(),
                    vec![self.out_dim, self.in_dim + 1 + self.hidden],
                    self.out.clone(),
                ),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t = load_tensors(path)?;
        let mut take = |name: &str| {
            t.remove(name).map(|(_, v)| v).ok_or_else(|| Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("missing tensor `{name}`"),
            })
        };
        let dims = take("dynamics.dims")?;
        let (in_dim, out_dim, hidden) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        let m = LearnedDynamics {
            hidden,
            in_mean: take("dynamics.in_mean")?,
            in_std: take("dynamics.in_std")?,
            w: take("dynamics.w")?,
            c: take("dynamics.c")?,
            out: take("dynamics.out")?,
            in_dim,
            out_dim,
        };
        if in_dim != INPUT_DIM
            || out_dim != STATE_DIM
            || m.out.len() != out_dim * (in_dim + 1 + hidden)
            || m.w.len() != hidden * in_dim
        {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: "dynamics tensor shapes disagree".into(),
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    /// Ridge penalty on the output layer.
    pub ridge: f64,
    /// Initial step of the hidden-layer line search.
    pub step: f64,
    pub seed: u64,
}

impl Default for DynamicsTrainConfig {
    fn default() -> Self {
        DynamicsTrainConfig {
            hidden: 64,
            epochs: 60,
            ridge: 1e-9,
            step: 1.0,
            seed: 0,
        }
    }
}

/// Uniform random episodes from random initial states of the given tasks.
pub fn collect_random_episodes(n: usize, tasks: &[Task], seed: u64) -> Vec<Trajectory> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xd1, i as u64));
            let task = tasks[i % tasks.len()];
            let s0 = SimState::random_initial(task, &mut rng);
            Trajectory::rollout(s0, &sim::random_actions(DEFAULT_HORIZON, &mut rng))
        })
        .collect()
}

/// Chunk transitions `(x, Δs)` of a set of trajectories.
pub fn chunk_transitions(episodes: &[Trajectory]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ep in episodes {
        for (c, chunk) in ep.actions.chunks_exact(CHUNK).enumerate() {
            let s = &ep.states[c * CHUNK];
            let next = &ep.states[(c + 1) * CHUNK];
            xs.push(chunk_input(s, chunk));
            ys.push(
                next.to_vector()
                    .iter()
                    .zip(s.to_vector())
                    .map(|(a, b)| a - b)
                    .collect(),
            );
        }
    }
    (xs, ys)
}

struct Fit<'a> {
    z: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    ridge: f64,
}

impl Fit<'_> {
    fn hidden_act(&self, w: &DMatrix<f64>, c: &DVector<f64>) -> DMatrix<f64> {
        let mut pre = self.z * w.transpose();
        for mut row in pre.row_iter_mut() {
            row += c.transpose();
        }
        pre.map(f64::tanh)
    }

    fn design(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.z.nrows();
        let ones = DMatrix::from_element(n, 1, 1.0);
        let mut phi = DMatrix::zeros(n, self.z.ncols() + 1 + h.ncols());
        phi.columns_mut(0, self.z.ncols()).copy_from(self.z);
        phi.columns_mut(self.z.ncols(), 1).copy_from(&ones);
        phi.columns_mut(self.z.ncols() + 1, h.ncols()).copy_from(h);
        phi
    }

    /// Ridge least squares for the output layer: `(ΦᵀΦ/N + λI) Θ = ΦᵀY/N`.
    fn solve_out(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = phi.nrows() as f64;
        let mut gram = phi.transpose() * phi / n;
        for i in 0..gram.nrows() {
            gram[(i, i)] += self.ridge;
        }
        let rhs = phi.transpose() * self.y / n;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NonFiniteValue("singular dynamics normal equations".into()))?;
        Ok(chol.solve(&rhs))
    }

    /// Mean squared error per row plus the ridge term.
    fn loss(&self, phi: &DMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
        let resid = phi * theta - self.y;
        resid.norm_squared() / phi.nrows() as f64 + self.ridge * theta.norm_squared()
    }
}

/// Fits the chunk regressor on explicit `(input, target)` rows. Returns the
/// model and the training loss after every epoch (index 0 is the initial
/// fit).
pub fn fit_regressor(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &DynamicsTrainConfig,
) -> Result<(LearnedDynamics, Vec<f64>)> {
    let n = inputs.len();
    if n < MIN_TRANSITIONS {
        return Err(Error::InsufficientData {
            needed: MIN_TRANSITIONS,
            got: n,
        });
    }
    if targets.len() != n {
        return Err(Error::SizeMismatch(format!("{n} inputs vs {} targets", targets.len())));
    }
    let in_dim = inputs[0].len();
    let out_dim = targets[0].len();
    let mut in_mean = vec![0.0; in_dim];
    for x in inputs {
        for (m, v) in in_mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut in_std = vec![0.0; in_dim];
    for x in inputs {
        for ((s, v), m) in in_std.iter_mut().zip(x).zip(&in_mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut in_std {
        *s = s.sqrt().max(1e-8);
    }
    let z = DMatrix::from_fn(n, in_dim, |i, j| (inputs[i][j] - in_mean[j]) / in_std[j]);
    // Targets are fitted per-dimension standardized so that rare object
    // motion is not drowned out by gripper motion; the scale is folded back
    // into the output layer at the end.
    let mut out_scale = vec![0.0; out_dim];
    for t in targets {
        for (s, v) in out_scale.iter_mut().zip(t) {
            *s += v * v / n as f64;
        }
    }
    for s in &mut out_scale {
        *s = s.sqrt().max(1e-8);
    }
    let y = DMatrix::from_fn(n, out_dim, |i, j| targets[i][j] / out_scale[j]);
    let fit = Fit {
        z: &z,
        y: &y,
        ridge: config.ridge,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (in_dim as f64).sqrt();
    let mut w = DMatrix::from_fn(config.hidden, in_dim, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    });
    let mut c = DVector::from_fn(config.hidden, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        0.1 * g
    });
    let mut h = fit.hidden_act(&w, &c);
    let mut phi = fit.design(&h);
    let mut theta = fit.solve_out(&phi)?;
    let mut loss = fit.loss(&phi, &theta);
    let mut losses = vec![loss];
    let mut step = config.step;
    for _ in 0..config.epochs {
        // Gradient of the loss w.r.t. the hidden layer, output layer fixed.
        let resid = &phi * &theta - &y;
        let v = theta.rows(in_dim + 1, config.hidden);
        let dh = (&resid * v.transpose()) * (2.0 / n as f64);
        let dpre = dh.component_mul(&h.map(|t| 1.0 - t * t));
        let gw = dpre.transpose() * &z;
        let gc = DVector::from_fn(config.hidden, |k, _| dpre.column(k).sum());
        let mut accepted = false;
        for _ in 0..30 {
            let w2 = &w - &gw * step;
            let c2 = &c - &gc * step;
            let h2 = fit.hidden_act(&w2, &c2);
            let phi2 = fit.design(&h2);
            if fit.loss(&phi2, &theta) < loss {
                w = w2;
                c = c2;
                h = h2;
                phi = phi2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            let refit = fit.solve_out(&phi)?;
            // The ridge solution minimizes the loss at fixed features; keep
            // the old layer if rounding says otherwise.
            if fit.loss(&phi, &refit) <= fit.loss(&phi, &theta) {
                theta = refit;
            }
            loss = fit.loss(&phi, &theta);
            step *= 2.0;
        }
        losses.push(loss);
    }
    for (j, s) in out_scale.iter().enumerate() {
        theta.column_mut(j).scale_mut(*s);
    }
    let model = LearnedDynamics {
        hidden: config.hidden,
        in_mean,
        in_std,
        w: w.transpose().as_slice().to_vec(),
        c: c.as_slice().to_vec(),
        out: theta.as_slice().to_vec(),
        in_dim,
        out_dim,
    };
    Ok((model, losses))
}

pub fn train_dynamics(
    episodes: &[Trajectory],
    config: &DynamicsTrainConfig,
) -> Result<(DynamicsModel, Vec<f64>)> {
    let (xs, ys) = chunk_transitions(episodes);
    let (m, losses) = fit_regressor(&xs, &ys, config)?;
    Ok((DynamicsModel::Learned(m), losses))
}

/// Learned model on `RANDOM_EPISODES` random episodes over every task.
pub fn default_learned_dynamics(seed: u64) -> Result<(DynamicsModel, Vec<f64>)> {
    let episodes = collect_random_episodes(RANDOM_EPISODES, &Task::ALL, derive_seed(seed, 0xd7, 0));
    let config = DynamicsTrainConfig {
        seed,
        ..DynamicsTrainConfig::default()
    };
    train_dynamics(&episodes, &config)
}

/// Mean per-coordinate absolute error of open-loop predictions against the
/// simulator, over all predicted states after `chunks` chunks.
pub fn open_loop_error(model: &DynamicsModel, episodes: &[Trajectory], chunks: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        let acts = &ep.actions[..chunks * CHUNK];
        let pred = chunked_predict(model, &ep.states[0], acts)?;
        let truth = ep.states[chunks * CHUNK].to_vector();
        let p = pred[chunks].to_vector();
        total += p.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += STATE_DIM;
    }
    Ok(total / count as f64)
}

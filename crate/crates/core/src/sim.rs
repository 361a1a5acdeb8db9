//! Deterministic 2-D tabletop with a drawer, a faucet handle and a cup.
//!
//! The table is the unit square. The camera sits on the `y = 0` edge, so
//! "away from the camera" is `+y`. A gripper that starts a step within
//! [`CONTACT_RADIUS`] of an object's handle point drives that object's degree
//! of freedom with its own displacement for that step:
//!
//! * drawer: `drawer_ext += dy` (the handle rides at `DRAWER_HANDLE + (0, ext)`),
//! * faucet: `faucet_angle += |dx|`,
//! * cup: carried by the full displacement when the grip is closed, otherwise
//!   pushed by the component of the displacement along the gripper-to-cup ray.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTACT_RADIUS: f64 = 0.04;
pub const MAX_SPEED: f64 = 0.05;
pub const DRAWER_OPEN: f64 = 0.07;
pub const DEFAULT_HORIZON: usize = 60;
/// Raw frame-feature width produced by [`render_features`].
pub const FRAME_WIDTH: usize = 16;

pub const DRAWER_HANDLE: [f64; 2] = [0.32, 0.45];
pub const FAUCET_HANDLE: [f64; 2] = [0.68, 0.5];
pub const CUP_HOME: [f64; 2] = [0.5, 0.45];

/// Slack used when comparing a predicate quantity with its threshold, so that
/// values like `0.55 - 0.5` are judged by their decimal intent.
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    OpenDrawer,
    PushCupRightToLeft,
    PokeCup,
    CloseDrawer,
    CupAway,
    Faucet,
    PushCupLeftToRight,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::OpenDrawer,
        Task::PushCupRightToLeft,
        Task::PokeCup,
        Task::CloseDrawer,
        Task::CupAway,
        Task::Faucet,
        Task::PushCupLeftToRight,
    ];

    /// The four evaluation tasks.
    pub const TARGETS: [Task; 4] = [
        Task::CloseDrawer,
        Task::CupAway,
        Task::Faucet,
        Task::PushCupLeftToRight,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Task> {
        Task::ALL.get(id).copied().ok_or(Error::UnknownTask(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::OpenDrawer => "open-drawer",
            Task::PushCupRightToLeft => "push-cup-right-to-left",
            Task::PokeCup => "poke-cup",
            Task::CloseDrawer => "close-drawer",
            Task::CupAway => "cup-away",
            Task::Faucet => "faucet",
            Task::PushCupLeftToRight => "push-cup-left-to-right",
        }
    }

    pub fn expression(self) -> &'static str {
        match self {
            Task::OpenDrawer => "opening drawer",
            Task::PushCupRightToLeft => "pushing cup from right to left",
            Task::PokeCup => "poking cup so lightly that it doesn't or almost doesn't move",
            Task::CloseDrawer => "closing drawer",
            Task::CupAway => "moving cup away from the camera",
            Task::Faucet => "moving the handle of the faucet",
            Task::PushCupLeftToRight => "pushing cup from left to right",
        }
    }

    /// The handle point the task is about, in state `s`.
    pub fn object_point(self, s: &SimState) -> [f64; 2] {
        match self {
            Task::OpenDrawer | Task::CloseDrawer => s.drawer_handle(),
            Task::Faucet => FAUCET_HANDLE,
            _ => s.cup,
        }
    }

    pub fn initial_drawer_ext(self) -> f64 {
        match self {
            Task::OpenDrawer => 0.0,
            _ => DRAWER_OPEN,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        if let Ok(id) = s.parse::<usize>() {
            return Task::from_id(id);
        }
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub gripper: [f64; 2],
    pub grip_closed: bool,
    pub drawer_ext: f64,
    pub faucet_angle: f64,
    pub cup: [f64; 2],
    pub camera_offset: [f64; 2],
}

impl SimState {
    pub fn drawer_handle(&self) -> [f64; 2] {
        [DRAWER_HANDLE[0], DRAWER_HANDLE[1] + self.drawer_ext]
    }

    /// Default layout for `task` with the gripper at `gripper`.
    pub fn for_task(task: Task, gripper: [f64; 2]) -> SimState {
        SimState {
            gripper,
            grip_closed: false,
            drawer_ext: task.initial_drawer_ext(),
            faucet_angle: 0.0,
            cup: CUP_HOME,
            camera_offset: [0.0, 0.0],
        }
    }

    /// Randomized initial state: gripper anywhere in the near band of the
    /// table, cup jittered by at most 0.01 around its home.
    pub fn random_initial(task: Task, rng: &mut impl Rng) -> SimState {
        let gripper = [rng.random_range(0.38..0.62), rng.random_range(0.2..0.32)];
        let mut s = SimState::for_task(task, gripper);
        s.cup = [
            CUP_HOME[0] + rng.random_range(-0.01..0.01),
            CUP_HOME[1] + rng.random_range(-0.01..0.01),
        ];
        s
    }

    /// Flat vector of the dynamic coordinates (camera excluded).
    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        [
            self.gripper[0],
            self.gripper[1],
            if self.grip_closed { 1.0 } else { 0.0 },
            self.drawer_ext,
            self.faucet_angle,
            self.cup[0],
            self.cup[1],
        ]
    }

    /// Inverse of [`SimState::to_vector`], clamping every field into range.
    pub fn from_vector(v: &[f64], camera_offset: [f64; 2]) -> SimState {
        SimState {
            gripper: [clamp01(v[0]), clamp01(v[1])],
            grip_closed: v[2] >= 0.5,
            drawer_ext: v[3].clamp(0.0, DRAWER_OPEN),
            faucet_angle: v[4].max(0.0),
            cup: [clamp01(v[5]), clamp01(v[6])],
            camera_offset,
        }
    }
}

/// Number of dynamic coordinates in [`SimState::to_vector`].
pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grip {
    Open,
    Close,
    Hold,
}

impl Grip {
    /// Continuous code used by regressors and CEM: close = 1, open = -1.
    pub fn code(self) -> f64 {
        match self {
            Grip::Open => -1.0,
            Grip::Close => 1.0,
            Grip::Hold => 0.0,
        }
    }

    pub fn from_code(c: f64) -> Grip {
        if c > 1.0 / 3.0 {
            Grip::Close
        } else if c < -1.0 / 3.0 {
            Grip::Open
        } else {
            Grip::Hold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    velocity: [f64; 2],
    pub grip: Grip,
}

impl Action {
    pub fn new(vx: f64, vy: f64, grip: Grip) -> Action {
        Action {
            velocity: [
                vx.clamp(-MAX_SPEED, MAX_SPEED),
                vy.clamp(-MAX_SPEED, MAX_SPEED),
            ],
            grip,
        }
    }

    pub fn still() -> Action {
        Action::new(0.0, 0.0, Grip::Hold)
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    /// Uniform over the clamped velocity box and the three grip commands.
    pub fn random(rng: &mut impl Rng) -> Action {
        let grip = match rng.random_range(0..3u8) {
            0 => Grip::Open,
            1 => Grip::Close,
            _ => Grip::Hold,
        };
        Action::new(
            rng.random_range(-MAX_SPEED..=MAX_SPEED),
            rng.random_range(-MAX_SPEED..=MAX_SPEED),
            grip,
        )
    }

    pub fn to_codes(&self) -> [f64; 3] {
        [self.velocity[0], self.velocity[1], self.grip.code()]
    }

    pub fn from_codes(c: &[f64]) -> Action {
        Action::new(c[0], c[1], Grip::from_code(c[2]))
    }
}

pub fn random_actions(n: usize, rng: &mut impl Rng) -> Vec<Action> {
    (0..n).map(|_| Action::random(rng)).collect()
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn in_contact(gripper: [f64; 2], point: [f64; 2]) -> bool {
    dist(gripper, point) <= CONTACT_RADIUS
}

/// One simulator step.
pub fn step(state: &SimState, action: &Action) -> SimState {
    let mut next = *state;
    let g0 = state.gripper;
    let v = action.velocity;
    let g1 = [clamp01(g0[0] + v[0]), clamp01(g0[1] + v[1])];
    let d = [g1[0] - g0[0], g1[1] - g0[1]];
    next.gripper = g1;
    match action.grip {
        Grip::Close => next.grip_closed = true,
        Grip::Open => next.grip_closed = false,
        Grip::Hold => {}
    }

    if in_contact(g0, state.drawer_handle()) && d[1] != 0.0 {
        next.drawer_ext = (state.drawer_ext + d[1]).clamp(0.0, DRAWER_OPEN);
    }
    if in_contact(g0, FAUCET_HANDLE) && d[0] != 0.0 {
        next.faucet_angle = state.faucet_angle + d[0].abs();
    }
    if in_contact(g0, state.cup) {
        if state.grip_closed {
            next.cup = [clamp01(state.cup[0] + d[0]), clamp01(state.cup[1] + d[1])];
        } else {
            let r = [state.cup[0] - g0[0], state.cup[1] - g0[1]];
            let len = (r[0] * r[0] + r[1] * r[1]).sqrt();
            if len > 1e-12 {
                let dir = [r[0] / len, r[1] / len];
                let push = d[0] * dir[0] + d[1] * dir[1];
                if push > 0.0 {
                    next.cup = [
                        clamp01(state.cup[0] + push * dir[0]),
                        clamp01(state.cup[1] + push * dir[1]),
                    ];
                }
            }
        }
    }
    next
}

/// States `s_0..s_T` and actions `a_0..a_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<SimState>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn rollout(s0: SimState, actions: &[Action]) -> Trajectory {
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(s0);
        let mut s = s0;
        for a in actions {
            s = step(&s, a);
            states.push(s);
        }
        Trajectory {
            states,
            actions: actions.to_vec(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// True when the stored states are exactly what replaying the actions
    /// from `s_0` produces.
    pub fn replays_exactly(&self) -> bool {
        self.states.len() == self.actions.len() + 1
            && Trajectory::rollout(self.states[0], &self.actions).states == self.states
    }
}

/// Ground-truth success predicate evaluated on a state sequence.
///
/// Drawer and cup tasks compare the last state with the first; the faucet
/// task looks at the accumulated handle displacement.
pub fn success_states(task: Task, states: &[SimState]) -> bool {
    let (Some(first), Some(last)) = (states.first(), states.last()) else {
        return false;
    };
    match task {
        Task::CloseDrawer => last.drawer_ext < 0.05 - THRESHOLD_SLACK,
        Task::OpenDrawer => last.drawer_ext - first.drawer_ext > 0.02 + THRESHOLD_SLACK,
        Task::Faucet => last.faucet_angle - first.faucet_angle > 0.01 + THRESHOLD_SLACK,
        Task::CupAway => last.cup[1] - first.cup[1] >= 0.1 - THRESHOLD_SLACK,
        Task::PushCupLeftToRight => last.cup[0] - first.cup[0] >= 0.05 - THRESHOLD_SLACK,
        Task::PushCupRightToLeft => first.cup[0] - last.cup[0] >= 0.05 - THRESHOLD_SLACK,
        Task::PokeCup => {
            let touched = states.iter().any(|s| in_contact(s.gripper, s.cup));
            touched && dist(first.cup, last.cup) < 0.02
        }
    }
}

pub fn success(task: Task, trajectory: &Trajectory) -> bool {
    success_states(task, &trajectory.states)
}

/// Whether the predicate holds on some proper prefix `s_0..s_t`, `t >= 1`,
/// ending before the last state.
pub fn success_at_intermediate(task: Task, states: &[SimState]) -> bool {
    (2..states.len()).any(|end| success_states(task, &states[..end]))
}

/// Whether the predicate holds on any prefix, including the full sequence.
pub fn success_ever(task: Task, states: &[SimState]) -> bool {
    (2..=states.len()).any(|end| success_states(task, &states[..end]))
}

pub fn touches_object(task: Task, states: &[SimState]) -> bool {
    states
        .iter()
        .any(|s| in_contact(s.gripper, task.object_point(s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Human,
    Robot,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Human => "human",
            Domain::Robot => "robot",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "human" => Ok(Domain::Human),
            "robot" => Ok(Domain::Robot),
            other => Err(Error::BadConfig(format!("unknown domain `{other}`"))),
        }
    }
}

/// Rendering parameters that never touch dynamics or predicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Added to every rendered position.
    pub view: [f64; 2],
    /// Scale of a fixed per-channel bias ("object colors").
    pub color_shift: f64,
    /// Rendered (not physical) displacement of the objects relative to the
    /// gripper.
    pub arrangement: [f64; 2],
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            view: [0.0, 0.0],
            color_shift: 0.0,
            arrangement: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvVariant {
    Train,
    ShiftedColor,
    ShiftedView,
    ShiftedArrangement,
}

impl EnvVariant {
    pub fn name(self) -> &'static str {
        match self {
            EnvVariant::Train => "train",
            EnvVariant::ShiftedColor => "shifted-color",
            EnvVariant::ShiftedView => "shifted-view",
            EnvVariant::ShiftedArrangement => "shifted-arrangement",
        }
    }

    /// Progressively harder variants: color, then color + view, then color +
    /// view + arrangement.
    pub fn render_params(self) -> RenderParams {
        let color = RenderParams {
            color_shift: 0.15,
            ..RenderParams::default()
        };
        match self {
            EnvVariant::Train => RenderParams::default(),
            EnvVariant::ShiftedColor => color,
            EnvVariant::ShiftedView => RenderParams {
                view: [0.03, -0.02],
                ..color
            },
            EnvVariant::ShiftedArrangement => RenderParams {
                view: [0.03, -0.02],
                arrangement: [0.02, 0.02],
                ..color
            },
        }
    }
}

impl FromStr for EnvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<EnvVariant> {
        [
            EnvVariant::Train,
            EnvVariant::ShiftedColor,
            EnvVariant::ShiftedView,
            EnvVariant::ShiftedArrangement,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::BadConfig(format!("unknown environment variant `{s}`")))
    }
}

const SCENE_DIM: usize = 7;

struct Renderer {
    proj: [[f64; SCENE_DIM]; FRAME_WIDTH],
    bias: [f64; FRAME_WIDTH],
    color: [f64; FRAME_WIDTH],
    human_mix: [[f64; FRAME_WIDTH]; FRAME_WIDTH],
    human_bias: [f64; FRAME_WIDTH],
}

/// Mixing strength of the human-domain transform: `Q = (1 - b) I + b R`.
const HUMAN_MIX: f64 = 0.25;

fn renderer() -> &'static Renderer {
    static RENDERER: OnceLock<Renderer> = OnceLock::new();
    RENDERER.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let scale = 1.0 / (SCENE_DIM as f64).sqrt();
        let mut proj = [[0.0; SCENE_DIM]; FRAME_WIDTH];
        for row in proj.iter_mut() {
            for x in row.iter_mut() {
                *x = gauss() * scale * 1.5;
            }
        }
        let mut bias = [0.0; FRAME_WIDTH];
        for b in bias.iter_mut() {
            *b = gauss() * 0.2;
        }
        let mut color = [0.0; FRAME_WIDTH];
        for c in color.iter_mut() {
            *c = gauss();
        }
        let mut human_mix = [[0.0; FRAME_WIDTH]; FRAME_WIDTH];
        let rscale = 1.0 / (FRAME_WIDTH as f64).sqrt();
        for (i, row) in human_mix.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                let identity = if i == j { 1.0 } else { 0.0 };
                *x = (1.0 - HUMAN_MIX) * identity + HUMAN_MIX * gauss() * rscale;
            }
        }
        let mut human_bias = [0.0; FRAME_WIDTH];
        for b in human_bias.iter_mut() {
            *b = gauss() * 0.1;
        }
        Renderer {
            proj,
            bias,
            color,
            human_mix,
            human_bias,
        }
    })
}

const GRIPPER_SCALE: f64 = 2.0;
const CUP_SCALE: f64 = 8.0;

/// Scene coordinates seen by the camera, centered and scaled so that each
/// task-relevant change is of order one.
fn scene_vector(s: &SimState, params: &RenderParams) -> [f64; SCENE_DIM] {
    let view = [
        s.camera_offset[0] + params.view[0],
        s.camera_offset[1] + params.view[1],
    ];
    let obj = [view[0] + params.arrangement[0], view[1] + params.arrangement[1]];
    [
        (s.gripper[0] + view[0] - 0.5) * GRIPPER_SCALE,
        (s.gripper[1] + view[1] - 0.45) * GRIPPER_SCALE,
        if s.grip_closed { 0.5 } else { -0.5 },
        (s.drawer_ext / DRAWER_OPEN - 0.5) * 2.5 + obj[1] * 4.0,
        (s.faucet_angle / 0.02).tanh() * 2.0 + obj[0] * 4.0,
        (s.cup[0] + obj[0] - CUP_HOME[0]) * CUP_SCALE,
        (s.cup[1] + obj[1] - CUP_HOME[1]) * CUP_SCALE,
    ]
}

/// Robot-domain rendering under `params`.
pub fn render_robot(s: &SimState, params: &RenderParams) -> [f64; FRAME_WIDTH] {
    let r = renderer();
    let z = scene_vector(s, params);
    let mut out = [0.0; FRAME_WIDTH];
    for (i, o) in out.iter_mut().enumerate() {
        let pre: f64 = r.proj[i].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + r.bias[i];
        *o = pre.tanh() + params.color_shift * r.color[i];
    }
    out
}

/// The fixed invertible affine map from robot-domain to human-domain frame
/// features.
pub fn human_transform(robot: &[f64; FRAME_WIDTH]) -> [f64; FRAME_WIDTH] {
    let r = renderer();
    let mut out = [0.0; FRAME_WIDTH];
    for (i, o) in out.iter_mut().enumerate() {
        *o = r.human_mix[i].iter().zip(robot).map(|(a, b)| a * b).sum::<f64>() + r.human_bias[i];
    }
    out
}

/// Frame features of `state` in `domain` with default render parameters.
pub fn render_features(state: &SimState, domain: Domain) -> [f64; FRAME_WIDTH] {
    render_with(state, domain, &RenderParams::default())
}

pub fn render_with(state: &SimState, domain: Domain, params: &RenderParams) -> [f64; FRAME_WIDTH] {
    let robot = render_robot(state, params);
    match domain {
        Domain::Robot => robot,
        Domain::Human => human_transform(&robot),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{dot, norm};

    fn at_drawer_handle(ext: f64) -> SimState {
        let mut s = SimState::for_task(Task::CloseDrawer, [0.0, 0.0]);
        s.drawer_ext = ext;
        s.gripper = s.drawer_handle();
        s
    }

    #[test]
    fn still_action_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for task in Task::ALL {
            let s = SimState::random_initial(task, &mut rng);
            assert_eq!(step(&s, &Action::still()), s);
        }
    }

    #[test]
    fn drawer_push_moves_by_axis_projection() {
        let s = at_drawer_handle(0.07);
        let next = step(&s, &Action::new(0.0, -0.05, Grip::Hold));
        // axis is +y, projection of (0, -0.05) is -0.05, clamped at 0.
        assert!((next.drawer_ext - 0.02).abs() < 1e-15);
        let s = at_drawer_handle(0.07);
        let next = step(&s, &Action::new(0.03, -0.04, Grip::Hold));
        assert!((next.drawer_ext - 0.03).abs() < 1e-15);
        let next = step(&at_drawer_handle(0.03), &Action::new(0.0, -0.05, Grip::Hold));
        assert_eq!(next.drawer_ext, 0.0);
    }

    #[test]
    fn far_gripper_only_moves_itself() {
        let s = SimState::for_task(Task::CupAway, [0.5, 0.05]);
        let a = Action::new(0.05, -0.03, Grip::Close);
        let next = step(&s, &a);
        assert_eq!(next.drawer_ext, s.drawer_ext);
        assert_eq!(next.faucet_angle, s.faucet_angle);
        assert_eq!(next.cup, s.cup);
        assert!((next.gripper[0] - 0.55).abs() < 1e-15);
        assert!((next.gripper[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn action_construction_clamps() {
        let a = Action::new(0.3, -9.0, Grip::Open);
        assert_eq!(a.velocity(), [0.05, -0.05]);
    }

    fn with_drawer(ext: f64) -> Vec<SimState> {
        let s0 = SimState::for_task(Task::CloseDrawer, [0.5, 0.2]);
        let mut s1 = s0;
        s1.drawer_ext = ext;
        vec![s0, s1]
    }

    #[test]
    fn drawer_threshold_is_strict() {
        assert!(success_states(Task::CloseDrawer, &with_drawer(0.049)));
        assert!(!success_states(Task::CloseDrawer, &with_drawer(0.05)));
    }

    #[test]
    fn faucet_threshold_is_strict() {
        let s0 = SimState::for_task(Task::Faucet, [0.5, 0.2]);
        let mut s1 = s0;
        s1.faucet_angle = 0.011;
        assert!(success_states(Task::Faucet, &[s0, s1]));
        s1.faucet_angle = 0.01;
        assert!(!success_states(Task::Faucet, &[s0, s1]));
    }

    #[test]
    fn push_threshold_is_inclusive() {
        let s0 = SimState::for_task(Task::PushCupLeftToRight, [0.2, 0.2]);
        let mut s1 = s0;
        s1.cup[0] = s0.cup[0] + 0.05;
        assert!(success_states(Task::PushCupLeftToRight, &[s0, s1]));
        s1.cup[0] = s0.cup[0] + 0.049;
        assert!(!success_states(Task::PushCupLeftToRight, &[s0, s1]));
        s1.cup[0] = s0.cup[0] - 0.05;
        assert!(success_states(Task::PushCupRightToLeft, &[s0, s1]));
    }

    #[test]
    fn cup_away_threshold() {
        let s0 = SimState::for_task(Task::CupAway, [0.2, 0.2]);
        let mut s1 = s0;
        s1.cup[1] += 0.1;
        assert!(success_states(Task::CupAway, &[s0, s1]));
        s1.cup[1] -= 0.002;
        assert!(!success_states(Task::CupAway, &[s0, s1]));
    }

    #[test]
    fn rendering_is_deterministic_and_sees_the_drawer() {
        let s = SimState::for_task(Task::CloseDrawer, [0.4, 0.3]);
        assert_eq!(render_features(&s, Domain::Robot), render_features(&s, Domain::Robot));
        let mut t = s;
        t.drawer_ext = 0.03;
        assert_ne!(render_features(&s, Domain::Robot), render_features(&t, Domain::Robot));
    }

    #[test]
    fn human_rendering_differs_from_robot() {
        let s = SimState::for_task(Task::CloseDrawer, [0.4, 0.3]);
        let r = render_features(&s, Domain::Robot);
        let h = render_features(&s, Domain::Human);
        let cos = dot(&r, &h) / (norm(&r) * norm(&h));
        assert!(cos < 1.0 - 1e-6, "{cos}");
    }

    #[test]
    fn random_steps_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut s = SimState::random_initial(Task::CloseDrawer, &mut rng);
        for i in 0..100_000 {
            if i % 500 == 0 {
                s = SimState::random_initial(Task::ALL[(i / 500) % 7], &mut rng);
            }
            s = step(&s, &Action::random(&mut rng));
            assert!((0.0..=1.0).contains(&s.gripper[0]) && (0.0..=1.0).contains(&s.gripper[1]));
            assert!((0.0..=1.0).contains(&s.cup[0]) && (0.0..=1.0).contains(&s.cup[1]));
            assert!((0.0..=DRAWER_OPEN).contains(&s.drawer_ext));
            assert!(s.faucet_angle >= 0.0);
        }
    }

    #[test]
    fn replay_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = SimState::random_initial(Task::Faucet, &mut rng);
        let actions = random_actions(60, &mut rng);
        let traj = Trajectory::rollout(s0, &actions);
        assert!(traj.replays_exactly());
        assert_eq!(traj.states.len(), 61);
    }
}

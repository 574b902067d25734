//! Small deterministic continuous-control tasks with action repeat 2 and
//! rewards in `[0, 1]`.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BirdError, Result};
use crate::rng::{stream_rng, Stream, StreamRng, StreamState};

pub const ACTION_REPEAT: usize = 2;
pub const DEFAULT_EPISODE_LIMIT: usize = 500;
pub const ENV_NAMES: [&str; 2] = ["pendulum-swingup", "pointmass-reach"];
pub const IMAGE_SIDE: usize = 8;

/// Physics of one task. `substep` advances by one internal step and
/// returns that step's reward in `[0, 1]`.
pub trait Task: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bound(&self) -> f64;
    fn reset(&mut self, rng: &mut StreamRng);
    fn substep(&mut self, action: &[f64]) -> f64;
    fn observe(&self) -> Vec<f64>;
    fn state(&self) -> Vec<f64>;
    fn set_state(&mut self, state: &[f64]) -> Result<()>;

    fn render(&self) -> Result<Array2<f64>> {
        Err(BirdError::RenderUnsupported(self.name().to_string()))
    }
}

/// Frictionless pole, `θ = 0` upright: `θ'' = (g/l) sin θ + τ / (m l²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pendulum {
    pub theta: f64,
    pub omega: f64,
}

impl Pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const DT: f64 = 0.05;
    pub const MICRO_STEPS: usize = 10;
    pub const MAX_TORQUE: f64 = 2.0;

    pub fn new() -> Self {
        Self { theta: PI, omega: 0.0 }
    }

    /// Kinetic plus potential energy per unit mass and length.
    pub fn energy(&self) -> f64 {
        0.5 * self.omega * self.omega + Self::GRAVITY * self.theta.cos()
    }

    fn accel(theta: f64, torque: f64) -> f64 {
        Self::GRAVITY * theta.sin() + torque
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum-swingup"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> f64 {
        Self::MAX_TORQUE
    }

    fn reset(&mut self, rng: &mut StreamRng) {
        self.theta = PI + rng.random_range(-0.1..0.1);
        self.omega = 0.0;
    }

    fn substep(&mut self, action: &[f64]) -> f64 {
        let torque = action[0].clamp(-Self::MAX_TORQUE, Self::MAX_TORQUE);
        let h = Self::DT / Self::MICRO_STEPS as f64;
        // velocity Verlet
        for _ in 0..Self::MICRO_STEPS {
            let half = self.omega + 0.5 * h * Self::accel(self.theta, torque);
            self.theta += h * half;
            self.omega = half + 0.5 * h * Self::accel(self.theta, torque);
        }
        0.5 * (1.0 + self.theta.cos())
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega / 8.0]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta, self.omega]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        match state {
            [t, w] if t.is_finite() && w.is_finite() => {
                self.theta = *t;
                self.omega = *w;
                Ok(())
            }
            _ => Err(BirdError::InvalidInput(format!("pendulum state must be 2 finite values, got {state:?}"))),
        }
    }

    fn render(&self) -> Result<Array2<f64>> {
        let c = (IMAGE_SIDE as f64 - 1.0) / 2.0;
        let len = c;
        // image rows grow downward, so upright points to row 0
        let tip = (c - len * self.theta.cos(), c + len * self.theta.sin());
        Ok(Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(r, col)| {
            let d = segment_distance((r as f64, col as f64), (c, c), tip);
            (1.0 - d / 0.75).clamp(0.0, 1.0)
        }))
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Unit-mass point in `[-1, 1]²` pushed toward a goal; inelastic walls.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMass {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
}

impl PointMass {
    pub const DT: f64 = 0.05;
    pub const MAX_FORCE: f64 = 1.0;
    pub const WALL: f64 = 1.0;

    pub fn new() -> Self {
        Self {
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.5, 0.5],
        }
    }

    pub fn distance(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for PointMass {
    fn name(&self) -> &'static str {
        "pointmass-reach"
    }

    fn obs_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bound(&self) -> f64 {
        Self::MAX_FORCE
    }

    fn reset(&mut self, rng: &mut StreamRng) {
        for i in 0..2 {
            self.pos[i] = rng.random_range(-0.8..0.8);
            self.goal[i] = rng.random_range(-0.8..0.8);
            self.vel[i] = 0.0;
        }
    }

    fn substep(&mut self, action: &[f64]) -> f64 {
        for i in 0..2 {
            let f = action[i].clamp(-Self::MAX_FORCE, Self::MAX_FORCE);
            self.vel[i] += Self::DT * f;
            self.pos[i] += Self::DT * self.vel[i];
            if self.pos[i].abs() > Self::WALL {
                self.pos[i] = self.pos[i].clamp(-Self::WALL, Self::WALL);
                self.vel[i] = 0.0;
            }
        }
        (-4.0 * self.distance()).exp()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]]
    }

    fn state(&self) -> Vec<f64> {
        self.observe()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != 6 || state.iter().any(|x| !x.is_finite()) {
            return Err(BirdError::InvalidInput(format!("point-mass state must be 6 finite values, got {state:?}")));
        }
        self.pos = [state[0], state[1]];
        self.vel = [state[2], state[3]];
        self.goal = [state[4], state[5]];
        Ok(())
    }

    fn render(&self) -> Result<Array2<f64>> {
        let to_px = |v: f64| (v + 1.0) / 2.0 * (IMAGE_SIDE as f64 - 1.0);
        let blob = |r: usize, c: usize, p: [f64; 2]| {
            let d2 = (r as f64 - to_px(p[1])).powi(2) + (c as f64 - to_px(p[0])).powi(2);
            (-d2).exp()
        };
        Ok(Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(r, c)| {
            blob(r, c, self.pos).max(0.5 * blob(r, c, self.goal))
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    Vector,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A task plus episode bookkeeping: action repeat, step limit, reset noise.
pub struct Env {
    task: Box<dyn Task>,
    rng: StreamRng,
    steps: usize,
    limit: usize,
    done: bool,
    mode: ObservationMode,
}

pub fn make_env(name: &str, seed: u64) -> Result<Env> {
    let task: Box<dyn Task> = match name {
        "pendulum-swingup" => Box::new(Pendulum::new()),
        "pointmass-reach" => Box::new(PointMass::new()),
        _ => {
            return Err(BirdError::UnknownEnv {
                name: name.to_string(),
                valid: ENV_NAMES.join(", "),
            })
        }
    };
    Ok(Env::new(task, stream_rng(seed, Stream::Env)))
}

impl Env {
    pub fn new(task: Box<dyn Task>, rng: StreamRng) -> Self {
        Self {
            task,
            rng,
            steps: 0,
            limit: DEFAULT_EPISODE_LIMIT,
            done: true,
            mode: ObservationMode::Vector,
        }
    }

    pub fn with_limit(mut self, limit: usize) -> Self {
        self.limit = limit;
        self
    }

    pub fn with_mode(mut self, mode: ObservationMode) -> Result<Self> {
        if mode == ObservationMode::Image {
            self.task.render()?;
        }
        self.mode = mode;
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        self.task.name()
    }

    pub fn obs_dim(&self) -> usize {
        match self.mode {
            ObservationMode::Vector => self.task.obs_dim(),
            ObservationMode::Image => IMAGE_SIDE * IMAGE_SIDE,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    pub fn action_bound(&self) -> f64 {
        self.task.action_bound()
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn task(&self) -> &dyn Task {
        self.task.as_ref()
    }

    pub fn task_mut(&mut self) -> &mut dyn Task {
        self.task.as_mut()
    }

    pub fn rng_state(&self) -> StreamState {
        StreamState::capture(&self.rng)
    }

    pub fn restore_rng(&mut self, state: &StreamState) {
        self.rng = state.restore();
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.mode {
            ObservationMode::Vector => self.task.observe(),
            ObservationMode::Image => self.task.render().map(|im| im.into_iter().collect()).unwrap_or_default(),
        }
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.task.reset(&mut self.rng);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    /// Applies `action` (clipped to bounds) for two substeps.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(BirdError::EpisodeDone);
        }
        if action.len() != self.action_dim() {
            return Err(BirdError::InvalidInput(format!(
                "action has {} dims, expected {}",
                action.len(),
                self.action_dim()
            )));
        }
        let bound = self.action_bound();
        let clipped: Vec<f64> = action
            .iter()
            .map(|a| if a.is_nan() { 0.0 } else { a.clamp(-bound, bound) })
            .collect();
        let mut total = 0.0;
        for _ in 0..ACTION_REPEAT {
            total += self.task.substep(&clipped);
        }
        self.steps += 1;
        self.done = self.steps >= self.limit;
        Ok(StepResult {
            observation: self.observe(),
            reward: (total / ACTION_REPEAT as f64).clamp(0.0, 1.0),
            done: self.done,
        })
    }

    pub fn render_tiny_image(&self) -> Result<Array2<f64>> {
        self.task.render()
    }
}

/// `action + N(0, sigma)`, clipped to `[-bound, bound]`.
pub fn exploration_noise(action: &[f64], sigma: f64, bound: f64, rng: &mut StreamRng) -> Vec<f64> {
    if sigma <= 0.0 {
        return action.iter().map(|a| a.clamp(-bound, bound)).collect();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    action
        .iter()
        .map(|a| (a + normal.sample(rng)).clamp(-bound, bound))
        .collect()
}

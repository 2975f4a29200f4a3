//! Parameterized dynamics families, rollouts and trajectories.
//!
//! Two families are provided. The pendulum follows the classic-control
//! swing-up convention (angle 0 is upright); the spring–mass system is a
//! damped oscillator whose mass and damping vary across environments. Both
//! expose the true reward as a function of `(observation, action)` so the
//! planner can score imagined rollouts.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{atan2, cos, sin};
use crate::{config_err, rng_from_seed, Result, SimRng};

pub const GRAVITY: f64 = 10.0;
pub const DT: f64 = 0.05;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const SPRING_K: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Pendulum,
    #[serde(rename = "springmass")]
    SpringMass,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Pendulum => "pendulum",
            FamilyKind::SpringMass => "springmass",
        }
    }

    /// Observation dimension.
    pub fn state_dim(self) -> usize {
        match self {
            FamilyKind::Pendulum => 3,
            FamilyKind::SpringMass => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        1
    }

    /// Per-dimension action bounds.
    pub fn action_bounds(self) -> (f64, f64) {
        (-MAX_TORQUE, MAX_TORQUE)
    }

    /// Maps the physical state to what agents observe.
    pub fn observe(self, phys: [f64; 2]) -> Vec<f64> {
        match self {
            FamilyKind::Pendulum => vec![cos(phys[0]), sin(phys[0]), phys[1]],
            FamilyKind::SpringMass => vec![phys[0], phys[1]],
        }
    }

    /// The known reward `r(s, a)`, evaluated on observations. Always `≤ 0`.
    pub fn reward(self, obs: &[f64], action: &[f64]) -> f64 {
        let (lo, hi) = self.action_bounds();
        let u = action[0].clamp(lo, hi);
        match self {
            FamilyKind::Pendulum => {
                let th = atan2(obs[1], obs[0]);
                -(th * th + 0.1 * obs[2] * obs[2] + 0.001 * u * u)
            }
            FamilyKind::SpringMass => -(obs[0] * obs[0] + 0.1 * obs[1] * obs[1] + 0.001 * u * u),
        }
    }

    /// Seeded initial physical state.
    pub fn initial_state<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 2] {
        match self {
            FamilyKind::Pendulum => [
                rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
                rng.random_range(-1.0..1.0),
            ],
            FamilyKind::SpringMass => [rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)],
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for FamilyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(FamilyKind::Pendulum),
            "springmass" => Ok(FamilyKind::SpringMass),
            other => Err(config_err(format!("unknown environment family {other:?}"))),
        }
    }
}

/// Hidden physical parameters of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnvParams {
    Pendulum { mass: f64, length: f64 },
    #[serde(rename = "springmass")]
    SpringMass { mass: f64, damping: f64 },
}

impl EnvParams {
    pub fn kind(&self) -> FamilyKind {
        match self {
            EnvParams::Pendulum { .. } => FamilyKind::Pendulum,
            EnvParams::SpringMass { .. } => FamilyKind::SpringMass,
        }
    }

    pub fn values(&self) -> [(&'static str, f64); 2] {
        match *self {
            EnvParams::Pendulum { mass, length } => [("m", mass), ("l", length)],
            EnvParams::SpringMass { mass, damping } => [("m", mass), ("d", damping)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.values() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// One deterministic transition from a physical state.
    pub fn step(&self, phys: [f64; 2], action: &[f64]) -> ([f64; 2], f64) {
        match *self {
            EnvParams::Pendulum { mass, length } => pendulum_step(phys, action[0], mass, length),
            EnvParams::SpringMass { mass, damping } => {
                springmass_step(phys, action[0], mass, damping)
            }
        }
    }
}

/// Pendulum transition on `[θ, θ̇]`; returns the next state and `r(s, u)`.
pub fn pendulum_step(state: [f64; 2], torque: f64, mass: f64, length: f64) -> ([f64; 2], f64) {
    let [th, thdot] = state;
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let reward = FamilyKind::Pendulum.reward(&FamilyKind::Pendulum.observe(state), &[u]);
    let acc = 3.0 * GRAVITY / (2.0 * length) * sin(th) + 3.0 / (mass * length * length) * u;
    let new_thdot = (thdot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
    let new_th = th + new_thdot * DT;
    ([new_th, new_thdot], reward)
}

/// Damped spring–mass transition on `[x, v]`.
pub fn springmass_step(state: [f64; 2], force: f64, mass: f64, damping: f64) -> ([f64; 2], f64) {
    let [x, v] = state;
    let u = force.clamp(-MAX_TORQUE, MAX_TORQUE);
    let reward = FamilyKind::SpringMass.reward(&state, &[u]);
    let acc = (-SPRING_K * x - damping * v + u) / mass;
    let new_v = v + acc * DT;
    let new_x = x + new_v * DT;
    ([new_x, new_v], reward)
}

/// K training and L test environments of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFamily {
    pub kind: FamilyKind,
    pub train_params: Vec<EnvParams>,
    pub test_params: Vec<EnvParams>,
    pub episode_length: usize,
    /// Distance sensitivity of the similarity transform.
    pub beta: f64,
}

const PENDULUM_TRAIN: [f64; 11] = [0.75, 0.8, 0.85, 0.90, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25];
const PENDULUM_TEST: [f64; 8] = [0.2, 0.4, 0.5, 0.7, 1.3, 1.5, 1.6, 1.8];
const SPRING_TRAIN: [f64; 5] = [0.75, 0.85, 1.0, 1.15, 1.25];
const SPRING_TEST: [f64; 4] = [0.2, 0.4, 1.6, 1.8];

fn grid(values: &[f64], make: impl Fn(f64, f64) -> EnvParams) -> Vec<EnvParams> {
    let mut out = Vec::with_capacity(values.len() * values.len());
    for &a in values {
        for &b in values {
            out.push(make(a, b));
        }
    }
    out
}

impl EnvFamily {
    /// Pendulum with every `(m, l)` combination of the training and test lists.
    pub fn pendulum() -> Self {
        let make = |mass, length| EnvParams::Pendulum { mass, length };
        Self {
            kind: FamilyKind::Pendulum,
            train_params: grid(&PENDULUM_TRAIN, make),
            test_params: grid(&PENDULUM_TEST, make),
            episode_length: 200,
            beta: 10.0,
        }
    }

    pub fn springmass() -> Self {
        let make = |mass, damping| EnvParams::SpringMass { mass, damping };
        Self {
            kind: FamilyKind::SpringMass,
            train_params: grid(&SPRING_TRAIN, make),
            test_params: grid(&SPRING_TEST, make),
            episode_length: 200,
            beta: 1.0,
        }
    }

    pub fn by_kind(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Pendulum => Self::pendulum(),
            FamilyKind::SpringMass => Self::springmass(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_params.is_empty() {
            return Err(config_err("empty training parameter list"));
        }
        if !(self.beta > 0.0) {
            return Err(config_err("beta must be positive"));
        }
        for p in self.train_params.iter().chain(&self.test_params) {
            p.validate()?;
            if p.kind() != self.kind {
                return Err(config_err("parameter family does not match the family kind"));
            }
        }
        if self
            .test_params
            .iter()
            .any(|t| self.train_params.iter().any(|p| p == t))
        {
            return Err(config_err("train and test parameter lists overlap"));
        }
        Ok(())
    }

    /// Indices of the training environments at the extremes of both
    /// parameters: `(min, min)`, `(min, max)`, `(max, min)`, `(max, max)`.
    pub fn corner_indices(&self) -> Vec<usize> {
        let vals: Vec<[f64; 2]> = self
            .train_params
            .iter()
            .map(|p| {
                let v = p.values();
                [v[0].1, v[1].1]
            })
            .collect();
        let lo = |d: usize| vals.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
        let hi = |d: usize| vals.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
        let mut out = Vec::with_capacity(4);
        for a in [lo(0), hi(0)] {
            for b in [lo(1), hi(1)] {
                if let Some(i) = vals.iter().position(|v| v[0] == a && v[1] == b) {
                    if !out.contains(&i) {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    /// Label used for test environment `i`; training labels are plain indices.
    pub fn test_label(&self, i: usize) -> usize {
        self.train_params.len() + i
    }
}

/// Uniform draw from the training list; returns `(label, params)`.
pub fn sample_training_env<R: Rng + ?Sized>(
    family: &EnvFamily,
    rng: &mut R,
) -> Result<(usize, EnvParams)> {
    if family.train_params.is_empty() {
        return Err(config_err("cannot sample from an empty training list"));
    }
    let i = rng.random_range(0..family.train_params.len());
    Ok((i, family.train_params[i]))
}

/// Environment label that counts how often it is read.
///
/// Copies share the counter, so reads through any segment cut from a
/// trajectory are attributed back to it.
#[derive(Clone)]
pub struct HiddenLabel {
    value: usize,
    reads: Arc<AtomicUsize>,
}

impl HiddenLabel {
    pub fn new(value: usize) -> Self {
        Self {
            value,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Returns the label and records the access.
    pub fn reveal(&self) -> usize {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.value
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl fmt::Debug for HiddenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("HiddenLabel(..)")
    }
}

/// One episode: `states.len() == actions.len() + 1 == rewards.len() + 1`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    label: HiddenLabel,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        id: u64,
        env_label: usize,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != actions.len() + 1 || rewards.len() != actions.len() {
            return Err(config_err("trajectory lengths are inconsistent"));
        }
        Ok(Self {
            id,
            label: HiddenLabel::new(env_label),
            states,
            actions,
            rewards,
        })
    }

    pub fn with_identity(mut self, id: u64, env_label: usize) -> Self {
        self.id = id;
        self.label = HiddenLabel::new(env_label);
        self
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Evaluation-only access to the environment label; every call is counted.
    pub fn env_label(&self) -> usize {
        self.label.reveal()
    }

    pub fn hidden_label(&self) -> &HiddenLabel {
        &self.label
    }

    pub fn label_reads(&self) -> usize {
        self.label.read_count()
    }
}

/// Chooses actions given the history so far (`states` ends with the current state).
pub trait ActionSource {
    fn act(&mut self, states: &[Vec<f64>], actions: &[Vec<f64>], rng: &mut SimRng) -> Vec<f64>;
}

/// Always applies zero action.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl ActionSource for ZeroPolicy {
    fn act(&mut self, _: &[Vec<f64>], _: &[Vec<f64>], _: &mut SimRng) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }
}

/// Uniform random actions within bounds.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub action_dim: usize,
    pub low: f64,
    pub high: f64,
}

impl RandomPolicy {
    pub fn for_family(kind: FamilyKind) -> Self {
        let (low, high) = kind.action_bounds();
        Self {
            action_dim: kind.action_dim(),
            low,
            high,
        }
    }
}

impl ActionSource for RandomPolicy {
    fn act(&mut self, _: &[Vec<f64>], _: &[Vec<f64>], rng: &mut SimRng) -> Vec<f64> {
        (0..self.action_dim)
            .map(|_| rng.random_range(self.low..self.high))
            .collect()
    }
}

/// Rolls out `horizon` steps from a seeded initial state.
///
/// The returned trajectory has id 0 and label 0; use
/// [`Trajectory::with_identity`] to tag it.
pub fn rollout<P: ActionSource + ?Sized>(
    params: &EnvParams,
    policy: &mut P,
    horizon: usize,
    seed: u64,
) -> Trajectory {
    let mut rng = rng_from_seed(seed);
    let phys = params.kind().initial_state(&mut rng);
    rollout_from(params, phys, policy, horizon, &mut rng)
}

/// Rolls out from an explicit physical state.
pub fn rollout_from<P: ActionSource + ?Sized>(
    params: &EnvParams,
    mut phys: [f64; 2],
    policy: &mut P,
    horizon: usize,
    rng: &mut SimRng,
) -> Trajectory {
    let kind = params.kind();
    let (lo, hi) = kind.action_bounds();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    states.push(kind.observe(phys));
    for _ in 0..horizon {
        let mut a = policy.act(&states, &actions, rng);
        a.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let (next, r) = params.step(phys, &a);
        phys = next;
        actions.push(a);
        rewards.push(r);
        states.push(kind.observe(phys));
    }
    Trajectory {
        id: 0,
        label: HiddenLabel::new(0),
        states,
        actions,
        rewards,
    }
}

//! Reinforcement-learning environment: the learned actuator models drive the
//! joint state, the reward scores task-space velocity tracking, and a batched
//! stepper runs many independent copies.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitCircle, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator_net::{learned_joint_step, ActuatorError, ActuatorModelSet, JointHistory, WINDOW_LEN};
use crate::hydraulic_plant::{PwmCommand, CONTROL_DT};
use crate::machine_model::{forward_kinematics, joint_positions, MachineParams, ACTIVE_JOINTS, LOCKED_JOINT, NUM_JOINTS};
use crate::neural::Normalizer;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment is done; reset it before stepping")]
    Done,
    #[error("expected {expected} action values, got {found}")]
    ActionShape { expected: usize, found: usize },
    #[error("expected {expected} action rows, got {found}")]
    BatchShape { expected: usize, found: usize },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("no collision-free spawn after {0} attempts")]
    SpawnExhausted(usize),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Ticks per episode (20 Hz).
    pub episode_len: usize,
    /// Maximum noise amplitude as a fraction of each feature's running std.
    pub noise_amplitude: f64,
    pub noise_enabled: bool,
    pub goal_speed_max: f64,
    /// Reset positions are drawn from the limits shrunk to this fraction.
    pub reset_range_fraction: f64,
    pub num_envs: usize,
    /// Joints driven by the policy. The full machine uses `[0, 2, 3, 4]`;
    /// the reduced planar setup uses `[2, 3]` with goals in the arm plane.
    pub controlled_joints: Vec<usize>,
    /// Position of every joint the policy does not drive.
    pub fixed_q: [f64; NUM_JOINTS],
    /// Redraw the goal every this many ticks; 0 keeps one goal per episode.
    pub goal_resample_ticks: usize,
    /// Chance that a drawn goal is exactly zero (hold still).
    pub zero_goal_probability: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_len: 200,
            noise_amplitude: 0.05,
            noise_enabled: true,
            goal_speed_max: 0.5,
            reset_range_fraction: 0.9,
            num_envs: 16,
            controlled_joints: ACTIVE_JOINTS.to_vec(),
            fixed_q: [0.0, 0.5, 0.6, 1.2, 0.6],
            goal_resample_ticks: 0,
            zero_goal_probability: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if self.episode_len == 0 {
            return bad("episode_len must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return bad("noise_amplitude must lie in [0, 1]");
        }
        if self.num_envs == 0 {
            return bad("num_envs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.zero_goal_probability) {
            return bad("zero_goal_probability must lie in [0, 1]");
        }
        if !(self.goal_speed_max >= 0.0) {
            return bad("goal_speed_max must be non-negative");
        }
        if self.controlled_joints.is_empty() || self.controlled_joints.iter().any(|j| !ACTIVE_JOINTS.contains(j)) {
            return bad("controlled_joints must be a non-empty subset of the actuated joints");
        }
        if self.controlled_joints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("controlled_joints must be strictly increasing");
        }
        Ok(())
    }

    /// Goals restricted to the vertical plane of the arm when yaw is not driven.
    pub fn planar(&self) -> bool {
        !self.controlled_joints.contains(&0)
    }

    pub fn obs_dim(&self) -> usize {
        observation_dim(self.controlled_joints.len())
    }

    pub fn action_dim(&self) -> usize {
        self.controlled_joints.len()
    }

    pub fn layout_tag(&self) -> String {
        observation_layout(&self.controlled_joints)
    }
}

pub fn observation_dim(num_joints: usize) -> usize {
    6 + num_joints * 3 * WINDOW_LEN
}

/// Human-readable tag of the observation ordering, stored with checkpoints.
pub fn observation_layout(joints: &[usize]) -> String {
    let names: Vec<String> = joints.iter().map(|j| format!("q{}", j + 1)).collect();
    format!("v_ee[3],v_d[3],per-joint({}):q[13],qdot[13],duty_prev[13]", names.join(","))
}

/// Inverse of [`observation_layout`]: the controlled joints (0-based).
pub fn parse_layout(layout: &str) -> Option<Vec<usize>> {
    let inner = layout.split_once("per-joint(")?.1.split_once(')')?.0;
    inner.split(',').map(|name| name.strip_prefix('q')?.parse::<usize>().ok()?.checked_sub(1).filter(|&j| j < NUM_JOINTS)).collect()
}

/// Task-space tracking reward: `1 / (1 + ‖v_d − v_ee‖)`.
pub fn reward(v_desired: &Vector3<f64>, v_ee: &Vector3<f64>) -> f64 {
    1.0 / (1.0 + (v_desired - v_ee).norm())
}

/// True iff any joint pivot or the tool tip lies strictly below the ground.
pub fn ground_collision(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> bool {
    joint_positions(params, q).iter().any(|p| p.z < 0.0)
}

/// Direction uniform on the sphere (or on the arm's vertical plane when
/// `planar_yaw` is given), speed uniform in `[0, max_speed]`.
pub fn sample_goal_velocity(rng: &mut impl Rng, max_speed: f64, planar_yaw: Option<f64>) -> Vector3<f64> {
    let speed = rng.random_range(0.0..=max_speed);
    let dir = match planar_yaw {
        None => {
            let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
            Vector3::new(x, y, z)
        }
        Some(yaw) => {
            let [radial, z]: [f64; 2] = UnitCircle.sample(rng);
            Vector3::new(radial * yaw.cos(), radial * yaw.sin(), z)
        }
    };
    dir * speed
}

/// Assemble an observation from raw signals; see [`observation_layout`].
pub fn build_observation(
    v_ee: &Vector3<f64>,
    v_desired: &Vector3<f64>,
    histories: &[JointHistory; NUM_JOINTS],
    joints: &[usize],
) -> Vec<f64> {
    let mut obs = Vec::with_capacity(observation_dim(joints.len()));
    obs.extend(v_ee.iter());
    obs.extend(v_desired.iter());
    for &j in joints {
        let h = &histories[j];
        obs.extend_from_slice(&h.q);
        obs.extend_from_slice(&h.qdot);
        obs.extend_from_slice(&h.past_duty);
    }
    obs
}

/// Indices of features that come from sensors (v_ee, q, q̇) and receive noise.
pub fn measured_features(num_joints: usize) -> Vec<usize> {
    let mut idx = vec![0, 1, 2];
    for k in 0..num_joints {
        let base = 6 + k * 3 * WINDOW_LEN;
        idx.extend(base..base + 2 * WINDOW_LEN);
    }
    idx
}

/// Map policy actions in `[−1, 1]` to a PWM command for the controlled joints.
pub fn action_to_command(params: &MachineParams, joints: &[usize], action: &[f64]) -> PwmCommand {
    let mut duties = [0.0; NUM_JOINTS];
    for (&j, &a) in joints.iter().zip(action) {
        duties[j] = a.clamp(-1.0, 1.0) * params.duty_cap;
    }
    PwmCommand::from_duties(&duties, params.duty_cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Timeout,
    GroundSpawn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
    /// Noise-free end-effector velocity behind the reward.
    pub v_ee: Vector3<f64>,
}

/// Everything that evolves inside one environment; serialisable so training
/// can resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
    pub histories: [JointHistory; NUM_JOINTS],
    pub goal: [f64; 3],
    pub v_ee: [f64; 3],
    pub tick: usize,
    pub done: bool,
    pub episode_return: f64,
    pub feature_stats: Normalizer,
    /// Spawns and goals.
    pub rng: ChaCha8Rng,
    /// Observation noise only, so toggling noise leaves episodes unchanged.
    pub noise_rng: ChaCha8Rng,
}

/// Mix a global seed and a stream index into an independent seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ArmEnv {
    cfg: EnvConfig,
    params: Arc<MachineParams>,
    models: Arc<ActuatorModelSet>,
    state: EnvState,
}

impl ArmEnv {
    pub fn new(cfg: EnvConfig, params: Arc<MachineParams>, models: Arc<ActuatorModelSet>, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let q = cfg.fixed_q;
        let dim = cfg.obs_dim();
        let state = EnvState {
            q,
            qdot: [0.0; NUM_JOINTS],
            histories: q.map(JointHistory::at_rest),
            goal: [0.0; 3],
            v_ee: [0.0; 3],
            tick: 0,
            done: true,
            episode_return: 0.0,
            feature_stats: Normalizer::new(dim),
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX)),
        };
        Ok(Self { cfg, params, models, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn params(&self) -> &MachineParams {
        &self.params
    }

    fn sample_reset_q(&mut self) -> [f64; NUM_JOINTS] {
        let mut q = self.cfg.fixed_q;
        q[LOCKED_JOINT] = self.params.q2_fixed_angle;
        for &j in &self.cfg.controlled_joints {
            let l = self.params.joint_limits[j].shrunk(self.cfg.reset_range_fraction);
            q[j] = self.state.rng.random_range(l.min..=l.max);
        }
        q
    }

    /// Start a new episode. A spawn below ground yields a terminated result
    /// with zero reward.
    pub fn reset(&mut self) -> StepResult {
        let q = self.sample_reset_q();
        let goal = self.draw_goal(q[0]);
        let s = &mut self.state;
        s.q = q;
        s.qdot = [0.0; NUM_JOINTS];
        s.histories = q.map(JointHistory::at_rest);
        s.goal = goal.into();
        s.v_ee = [0.0; 3];
        s.tick = 0;
        s.episode_return = 0.0;
        let spawn_collides = ground_collision(&self.params, &q);
        s.done = spawn_collides;
        let observation = self.observe();
        StepResult {
            observation,
            reward: 0.0,
            done: spawn_collides,
            done_reason: spawn_collides.then_some(DoneReason::GroundSpawn),
            v_ee: Vector3::zeros(),
        }
    }

    fn draw_goal(&mut self, yaw: f64) -> Vector3<f64> {
        let p = self.cfg.zero_goal_probability;
        if p > 0.0 && self.state.rng.random_bool(p) {
            return Vector3::zeros();
        }
        sample_goal_velocity(&mut self.state.rng, self.cfg.goal_speed_max, self.cfg.planar().then_some(yaw))
    }

    fn observe(&mut self) -> Vec<f64> {
        let s = &mut self.state;
        let mut obs = build_observation(&Vector3::from(s.v_ee), &Vector3::from(s.goal), &s.histories, &self.cfg.controlled_joints);
        s.feature_stats.update(std::iter::once(obs.as_slice()));
        if self.cfg.noise_enabled && self.cfg.noise_amplitude > 0.0 {
            let a = self.cfg.noise_amplitude;
            for i in measured_features(self.cfg.controlled_joints.len()) {
                obs[i] += s.noise_rng.random_range(-a..=a) * s.feature_stats.std[i];
            }
        }
        obs
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::Done);
        }
        let n = self.cfg.controlled_joints.len();
        if action.len() != n {
            return Err(EnvError::ActionShape { expected: n, found: action.len() });
        }
        let command = action_to_command(&self.params, &self.cfg.controlled_joints, action);
        let duties = command.duties(self.params.duty_cap);
        let p_before = forward_kinematics(&self.params, &self.state.q).position;
        for &j in &self.cfg.controlled_joints {
            let model = self.models.model(j).ok_or(ActuatorError::MissingModel(j))?;
            let (q, qdot) = learned_joint_step(&self.params, model, &self.state.histories[j], duties[j])?;
            self.state.histories[j].advance(duties[j], q, qdot);
            self.state.q[j] = q;
            self.state.qdot[j] = qdot;
        }
        let p_after = forward_kinematics(&self.params, &self.state.q).position;
        let v_ee = (p_after - p_before) / CONTROL_DT;
        let r = reward(&Vector3::from(self.state.goal), &v_ee);
        let s = &mut self.state;
        s.v_ee = v_ee.into();
        s.tick += 1;
        s.episode_return += r;
        s.done = s.tick >= self.cfg.episode_len;
        let done = s.done;
        let period = self.cfg.goal_resample_ticks;
        if !done && period > 0 && self.state.tick % period == 0 {
            let yaw = self.state.q[0];
            self.state.goal = self.draw_goal(yaw).into();
        }
        let observation = self.observe();
        Ok(StepResult { observation, reward: r, done, done_reason: done.then_some(DoneReason::Timeout), v_ee })
    }
}

/// Result of stepping every environment once.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    /// Per-env results; for finished envs this is the terminal result.
    pub results: Vec<StepResult>,
    /// Observation to act on next (from `reset()` where an episode ended).
    pub next_observations: Vec<Vec<f64>>,
    /// Episodes discarded at spawn because the arm started below ground.
    pub ground_spawns: usize,
    /// Returns of episodes that finished on this step.
    pub finished_returns: Vec<f64>,
}

/// Minimal interface the PPO trainer needs from a batch of environments.
pub trait VecEnvironment {
    fn num_envs(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Start fresh episodes everywhere and return the first observations.
    fn reset_all(&mut self) -> Result<Vec<Vec<f64>>, EnvError>;
    fn step(&mut self, actions: &[Vec<f64>]) -> Result<VecStep, EnvError>;
    fn save_state(&self) -> serde_json::Value;
    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError>;
}

/// Spawn attempts before giving up on finding a collision-free start.
pub const MAX_SPAWN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ArmVecEnv {
    pub envs: Vec<ArmEnv>,
}

impl ArmVecEnv {
    /// `cfg.num_envs` environments, env `i` seeded from `(seed, i)`.
    pub fn new(cfg: &EnvConfig, params: Arc<MachineParams>, models: Arc<ActuatorModelSet>, seed: u64) -> Result<Self, EnvError> {
        let envs = (0..cfg.num_envs)
            .map(|i| ArmEnv::new(cfg.clone(), params.clone(), models.clone(), stream_seed(seed, i as u64)))
            .collect::<Result<_, _>>()?;
        Ok(Self { envs })
    }

    fn valid_reset(env: &mut ArmEnv, spawns: &mut usize) -> Result<Vec<f64>, EnvError> {
        for _ in 0..MAX_SPAWN_ATTEMPTS {
            let r = env.reset();
            if !r.done {
                return Ok(r.observation);
            }
            *spawns += 1;
        }
        Err(EnvError::SpawnExhausted(MAX_SPAWN_ATTEMPTS))
    }
}

impl VecEnvironment for ArmVecEnv {
    fn num_envs(&self) -> usize {
        self.envs.len()
    }

    fn obs_dim(&self) -> usize {
        self.envs[0].cfg.obs_dim()
    }

    fn action_dim(&self) -> usize {
        self.envs[0].cfg.action_dim()
    }

    fn reset_all(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        let mut spawns = 0;
        self.envs.iter_mut().map(|e| Self::valid_reset(e, &mut spawns)).collect()
    }

    fn step(&mut self, actions: &[Vec<f64>]) -> Result<VecStep, EnvError> {
        if actions.len() != self.envs.len() {
            return Err(EnvError::BatchShape { expected: self.envs.len(), found: actions.len() });
        }
        let mut out = VecStep {
            results: Vec::with_capacity(actions.len()),
            next_observations: Vec::with_capacity(actions.len()),
            ground_spawns: 0,
            finished_returns: Vec::new(),
        };
        for (env, action) in self.envs.iter_mut().zip(actions) {
            let result = env.step(action)?;
            let next = if result.done {
                out.finished_returns.push(env.state.episode_return);
                Self::valid_reset(env, &mut out.ground_spawns)?
            } else {
                result.observation.clone()
            };
            out.results.push(result);
            out.next_observations.push(next);
        }
        Ok(out)
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(self.envs.iter().map(|e| &e.state).collect::<Vec<_>>()).expect("env state serialises")
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        let states: Vec<EnvState> = serde_json::from_value(state).map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        if states.len() != self.envs.len() {
            return Err(EnvError::BatchShape { expected: self.envs.len(), found: states.len() });
        }
        for (env, s) in self.envs.iter_mut().zip(states) {
            env.state = s;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::actuator_net::{train_actuator_model, ActuatorModel, ActuatorSample, ActuatorTrainConfig, ActuatorWindow};

    /// Cheap models (a few epochs on synthetic data) — enough to exercise the plumbing.
    pub(crate) fn quick_models() -> Arc<ActuatorModelSet> {
        use std::sync::OnceLock;
        static MODELS: OnceLock<Arc<ActuatorModelSet>> = OnceLock::new();
        MODELS
            .get_or_init(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let samples: Vec<ActuatorSample> = (0..1200)
                    .map(|_| {
                        let mut w = ActuatorWindow::at_rest(rng.random_range(-0.5..0.5));
                        let d = rng.random_range(-0.63..0.63);
                        w.duty[WINDOW_LEN - 1] = d;
                        ActuatorSample { input: w, target: 0.4 * d }
                    })
                    .collect();
                let cfg = ActuatorTrainConfig { epochs: 3, ..Default::default() };
                let models: Vec<ActuatorModel> = ACTIVE_JOINTS
                    .iter()
                    .map(|&j| train_actuator_model(j, &samples, &ActuatorTrainConfig { seed: j as u64, ..cfg.clone() }).unwrap().0)
                    .collect();
                Arc::new(ActuatorModelSet::new(models).unwrap())
            })
            .clone()
    }

    fn env(seed: u64) -> ArmEnv {
        ArmEnv::new(EnvConfig::default(), Arc::new(MachineParams::default()), quick_models(), seed).unwrap()
    }

    #[test]
    fn reward_arithmetic() {
        let v = Vector3::new(0.1, -0.2, 0.3);
        assert_eq!(reward(&v, &v), 1.0);
        assert_eq!(reward(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros()), 0.5);
        assert_eq!(reward(&Vector3::new(0.0, 3.0, 0.0), &Vector3::zeros()), 0.25);
        assert!(reward(&Vector3::new(1e-9, 0.0, 0.0), &Vector3::zeros()) < 1.0);
    }

    #[test]
    fn observation_is_162_wide() {
        let mut e = env(1);
        let r = e.reset();
        assert_eq!(r.observation.len(), 162);
        assert_eq!(EnvConfig::default().obs_dim(), 162);
        assert!(r.observation.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn goals_resample_on_schedule() {
        let cfg = EnvConfig { goal_resample_ticks: 10, zero_goal_probability: 0.3, episode_len: 400, ..EnvConfig::default() };
        let mut e = ArmEnv::new(cfg, Arc::new(MachineParams::default()), quick_models(), 4).unwrap();
        while e.reset().done {}
        let mut goals = vec![e.state().goal];
        let mut zeros = 0;
        for t in 1..400 {
            let r = e.step(&[0.0; 4]).unwrap();
            if t % 10 != 0 {
                assert_eq!(e.state().goal, *goals.last().unwrap());
            } else if !r.done {
                goals.push(e.state().goal);
                zeros += (e.state().goal == [0.0; 3]) as usize;
            }
        }
        assert_eq!(goals.len(), 40);
        assert!((4..=22).contains(&zeros), "{zeros}");
    }

    #[test]
    fn layout_round_trip() {
        for joints in [vec![0, 2, 3, 4], vec![2, 3]] {
            assert_eq!(parse_layout(&observation_layout(&joints)), Some(joints));
        }
        assert_eq!(parse_layout("v_ee[3]"), None);
        assert_eq!(parse_layout("per-joint(q9)"), None);
    }

    #[test]
    fn ground_collision_cases() {
        let p = MachineParams::default();
        assert!(!ground_collision(&p, &[0.0, 0.5, 1.2, 0.3, 0.0]));
        // Low boom, arm and tool folded fully down: the tip ends under ground.
        assert!(ground_collision(&p, &[0.0, 0.5, -0.5, 2.2, 1.5]));
        // Boundary: a tip exactly at z = 0 is not a collision.
        let mut q = [0.0, 0.5, 0.2, 1.0, 0.0];
        let lo = (-0.8f64, 1.5f64);
        let (mut a, mut b) = lo;
        for _ in 0..200 {
            q[4] = 0.5 * (a + b);
            if forward_kinematics(&p, &q).position.z > 0.0 {
                a = q[4];
            } else {
                b = q[4];
            }
        }
        q[4] = a;
        assert!(forward_kinematics(&p, &q).position.z >= 0.0);
        assert!(!ground_collision(&p, &q));
    }

    #[test]
    fn goal_speed_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let v = sample_goal_velocity(&mut rng, 0.5, None);
            assert!(v.norm() <= 0.5 + 1e-12);
            total += v.norm();
        }
        assert!((total / n as f64 - 0.25).abs() <= 0.01);
        let v = sample_goal_velocity(&mut ChaCha8Rng::seed_from_u64(1), 0.5, Some(0.7));
        assert!((v.y.atan2(v.x) - 0.7).abs() < 1e-9 || (v.y.atan2(v.x) - 0.7 + std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn spawn_below_ground_terminates_with_zero_reward() {
        // Tool folded fully down: low boom spawns put the tip under ground.
        let mut cfg = EnvConfig::default();
        cfg.fixed_q = [0.0, 0.5, 0.0, 0.0, 1.5];
        cfg.controlled_joints = vec![2, 3, 4];
        let p = Arc::new(MachineParams::default());
        let mut e = ArmEnv::new(cfg, p.clone(), quick_models(), 0).unwrap();
        let mut seen = false;
        for _ in 0..200 {
            let r = e.reset();
            if ground_collision(&p, &e.state().q) {
                assert!(r.done);
                assert_eq!(r.reward, 0.0);
                assert_eq!(r.done_reason, Some(DoneReason::GroundSpawn));
                assert!(matches!(e.step(&[0.0, 0.0, 0.0]), Err(EnvError::Done)));
                seen = true;
            } else {
                assert!(!r.done);
            }
        }
        assert!(seen);
    }

    #[test]
    fn resets_stay_within_limits_and_are_seeded() {
        let p = MachineParams::default();
        let mut e = env(5);
        for _ in 0..1000 {
            e.reset();
            for j in 0..NUM_JOINTS {
                assert!(p.joint_limits[j].contains(e.state().q[j]));
            }
        }
        assert_eq!(env(9).reset(), env(9).reset());
    }

    #[test]
    fn episode_runs_to_timeout_and_sums_rewards() {
        let mut cfg = EnvConfig::default();
        cfg.episode_len = 20;
        let mut e = ArmEnv::new(cfg, Arc::new(MachineParams::default()), quick_models(), 2).unwrap();
        while e.reset().done {}
        let mut total = 0.0;
        for t in 0..20 {
            let r = e.step(&[0.3, -0.2, 0.5, 0.0]).unwrap();
            assert!((0.0..=1.0).contains(&r.reward));
            total += r.reward;
            assert_eq!(r.done, t == 19);
            assert_eq!(r.done_reason.is_some(), r.done);
        }
        assert_eq!(total, e.state().episode_return);
        assert!(matches!(e.step(&[0.0; 4]), Err(EnvError::Done)));
        assert!(matches!(env(1).step(&[0.0; 3]), Err(EnvError::Done)));
    }

    #[test]
    fn noise_changes_only_the_reported_observation() {
        let p = Arc::new(MachineParams::default());
        let mut quiet_cfg = EnvConfig::default();
        quiet_cfg.noise_enabled = false;
        let mut noisy = ArmEnv::new(EnvConfig::default(), p.clone(), quick_models(), 4).unwrap();
        let mut quiet = ArmEnv::new(quiet_cfg, p, quick_models(), 4).unwrap();
        loop {
            let (a, b) = (noisy.reset(), quiet.reset());
            assert_eq!(a.done, b.done);
            if !a.done {
                break;
            }
        }
        let mut differs = false;
        for _ in 0..30 {
            let a = noisy.step(&[0.5, 0.5, -0.5, 0.2]).unwrap();
            let b = quiet.step(&[0.5, 0.5, -0.5, 0.2]).unwrap();
            assert_eq!(noisy.state().q, quiet.state().q);
            assert_eq!(a.reward, b.reward);
            // v_d and duty history are never perturbed
            assert_eq!(a.observation[3..6], b.observation[3..6]);
            assert_eq!(a.observation[6 + 26..6 + 39], b.observation[6 + 26..6 + 39]);
            for i in 0..a.observation.len() {
                let bound = 0.05 * noisy.state().feature_stats.std[i] + 1e-12;
                assert!((a.observation[i] - b.observation[i]).abs() <= bound);
            }
            differs |= a.observation != b.observation;
        }
        assert!(differs);
    }

    fn drive(v: &mut ArmVecEnv, steps: usize) -> Vec<VecStep> {
        (0..steps)
            .map(|t| {
                let actions: Vec<Vec<f64>> =
                    (0..v.num_envs()).map(|i| (0..4).map(|k| ((t + i + k) as f64 * 0.37).sin()).collect()).collect();
                v.step(&actions).unwrap()
            })
            .collect()
    }

    #[test]
    fn vectorised_equals_sequential() {
        let mut cfg = EnvConfig::default();
        cfg.episode_len = 15;
        cfg.num_envs = 8;
        let p = Arc::new(MachineParams::default());
        let mut batch = ArmVecEnv::new(&cfg, p.clone(), quick_models(), 77).unwrap();
        batch.reset_all().unwrap();
        let batch_steps = drive(&mut batch, 40);
        for i in 0..8 {
            let mut one_cfg = cfg.clone();
            one_cfg.num_envs = 1;
            let mut single =
                ArmVecEnv { envs: vec![ArmEnv::new(cfg.clone(), p.clone(), quick_models(), stream_seed(77, i as u64)).unwrap()] };
            single.reset_all().unwrap();
            for (t, step) in batch_steps.iter().enumerate() {
                let action: Vec<f64> = (0..4).map(|k| ((t + i + k) as f64 * 0.37).sin()).collect();
                let s = single.step(&[action]).unwrap();
                assert_eq!(s.results[0], step.results[i]);
                assert_eq!(s.next_observations[0], step.next_observations[i]);
            }
        }
    }

    #[test]
    fn done_env_auto_resets() {
        let mut cfg = EnvConfig::default();
        cfg.episode_len = 5;
        cfg.num_envs = 2;
        let p = Arc::new(MachineParams::default());
        let mut v = ArmVecEnv::new(&cfg, p, quick_models(), 1).unwrap();
        v.reset_all().unwrap();
        let steps = drive(&mut v, 5);
        let last = &steps[4];
        assert!(last.results.iter().all(|r| r.done));
        assert_eq!(last.finished_returns.len(), 2);
        for (r, next) in last.results.iter().zip(&last.next_observations) {
            assert_ne!(&r.observation, next);
        }
        assert!(v.envs.iter().all(|e| e.state().tick == 0 && !e.state().done));
        assert!(matches!(v.step(&[vec![0.0; 4]]), Err(EnvError::BatchShape { .. })));
    }

    #[test]
    fn state_round_trip_is_exact() {
        let mut cfg = EnvConfig::default();
        cfg.num_envs = 3;
        let p = Arc::new(MachineParams::default());
        let mut a = ArmVecEnv::new(&cfg, p.clone(), quick_models(), 5).unwrap();
        a.reset_all().unwrap();
        drive(&mut a, 7);
        let saved = serde_json::to_string(&a.save_state()).unwrap();
        let mut b = ArmVecEnv::new(&cfg, p, quick_models(), 999).unwrap();
        b.load_state(serde_json::from_str(&saved).unwrap()).unwrap();
        assert_eq!(drive(&mut a, 10), drive(&mut b, 10));
    }

    #[test]
    fn reduced_configuration_is_planar() {
        let mut cfg = EnvConfig::default();
        cfg.controlled_joints = vec![2, 3];
        assert_eq!(cfg.obs_dim(), 84);
        let mut e = ArmEnv::new(cfg, Arc::new(MachineParams::default()), quick_models(), 8).unwrap();
        while e.reset().done {}
        let g = e.state().goal;
        assert!(g[1].abs() < 1e-12, "yaw fixed at 0 keeps goals in the x–z plane");
        let r = e.step(&[0.4, -0.4]).unwrap();
        assert!(r.v_ee.y.abs() < 1e-12);
    }
}

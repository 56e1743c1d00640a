//! Interactive sessions: an operator streams task-space velocity goals, the
//! session closes the chosen controller around the synthetic plant at 20 Hz
//! and reports the resulting state. Transport-agnostic; the websocket server
//! wraps this.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator_net::JointHistory;
use crate::experiments::StartPreset;
use crate::hydraulic_plant::{step_plant, PlantState, PwmCommand, CONTROL_DT};
use crate::jacobian_ctrl::{JacCtrlConfig, JacobianController};
use crate::machine_model::{active_jacobian, forward_kinematics, manipulability, MachineParams, NUM_JOINTS};
use crate::neural::WeightFile;
use crate::ppo::PolicyArtifact;
use crate::sim_env::{action_to_command, build_observation, parse_layout, reward};

/// Largest accepted goal speed (m/s); faster commands are scaled down.
pub const MAX_COMMAND_SPEED: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no policy checkpoint loaded")]
    MissingPolicy,
    #[error("cannot load policy checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("controller failed: {0}")]
    Controller(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    RlPolicy,
    Jacobian,
    /// Duties pass straight through to the valves.
    RawJoint,
}

/// Messages accepted from a client. Unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Command {
        #[serde(default)]
        vx: f64,
        #[serde(default)]
        vy: f64,
        #[serde(default)]
        vz: f64,
        /// Per-joint duties, used only in `raw_joint` mode.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duty: Option<[f64; NUM_JOINTS]>,
    },
    Mode {
        controller: ControllerMode,
    },
    Reset {
        preset: StartPreset,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eef {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub t: f64,
    pub q: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub u: [f64; NUM_JOINTS],
    pub eef: Eef,
    pub v_ee: [f64; 3],
    pub v_d: [f64; 3],
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Ack {
        /// Which request is acknowledged: `command`, `mode` or `reset`.
        request: String,
        mode: ControllerMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    Error {
        reason: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialise")
    }

    fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error { reason: reason.into() }
    }
}

/// Read a policy checkpoint written by training.
pub fn load_policy(path: &Path) -> Result<PolicyArtifact, ServiceError> {
    let fail = |reason: String| ServiceError::Checkpoint { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let file = WeightFile::from_json(&text).map_err(|e| fail(e.to_string()))?;
    PolicyArtifact::from_weight_file(&file).map_err(|e| fail(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub params: Arc<MachineParams>,
    pub preset: StartPreset,
    pub mode: ControllerMode,
    pub policy: Option<Arc<PolicyArtifact>>,
    pub jacobian: JacCtrlConfig,
}

impl SessionConfig {
    pub fn new(params: Arc<MachineParams>) -> Self {
        Self { params, preset: StartPreset::MidWorkspace, mode: ControllerMode::Jacobian, policy: None, jacobian: JacCtrlConfig::default() }
    }
}

/// One operator's control loop. Single-owner; sessions share nothing but
/// read-only parameters and the policy.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    params: Arc<MachineParams>,
    mode: ControllerMode,
    policy: Option<(Arc<PolicyArtifact>, Vec<usize>)>,
    jacobian_cfg: JacCtrlConfig,
    jacobian: JacobianController,
    plant: PlantState,
    histories: [JointHistory; NUM_JOINTS],
    v_ee: Vector3<f64>,
    v_d: Vector3<f64>,
    raw_duty: [f64; NUM_JOINTS],
    pending_reset: Option<StartPreset>,
    rng: ChaCha8Rng,
    tick: u64,
}

impl Session {
    pub fn open(id: u64, cfg: SessionConfig) -> Result<Self, ServiceError> {
        let policy = match cfg.policy {
            Some(p) => {
                let joints = parse_layout(&p.layout)
                    .ok_or_else(|| ServiceError::Checkpoint { path: "<memory>".into(), reason: format!("layout '{}'", p.layout) })?;
                Some((p, joints))
            }
            None if cfg.mode == ControllerMode::RlPolicy => return Err(ServiceError::MissingPolicy),
            None => None,
        };
        let jacobian = JacobianController::new(cfg.jacobian.clone()).map_err(|e| ServiceError::Controller(e.to_string()))?;
        let q = cfg.preset.q();
        Ok(Self {
            id,
            params: cfg.params,
            mode: cfg.mode,
            policy,
            jacobian_cfg: cfg.jacobian,
            jacobian,
            plant: PlantState::at_rest(q),
            histories: q.map(JointHistory::at_rest),
            v_ee: Vector3::zeros(),
            v_d: Vector3::zeros(),
            raw_duty: [0.0; NUM_JOINTS],
            pending_reset: None,
            rng: ChaCha8Rng::seed_from_u64(id),
            tick: 0,
        })
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    /// Parse and apply one text frame.
    pub fn handle_text(&mut self, text: &str) -> ServerMessage {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => ServerMessage::error(format!("malformed message: {e}")),
        }
    }

    /// Apply a request; it takes effect on the next tick.
    pub fn handle(&mut self, msg: ClientMessage) -> ServerMessage {
        match msg {
            ClientMessage::Command { vx, vy, vz, duty } => {
                if self.pending_reset.is_some() {
                    return ServerMessage::error("resetting");
                }
                let v = Vector3::new(vx, vy, vz);
                if !v.iter().all(|c| c.is_finite()) {
                    return ServerMessage::error("velocity must be finite");
                }
                let mut warnings = Vec::new();
                let speed = v.norm();
                self.v_d = if speed > MAX_COMMAND_SPEED {
                    warnings.push(format!("speed {speed:.3} m/s clamped to {MAX_COMMAND_SPEED}"));
                    v * (MAX_COMMAND_SPEED / speed)
                } else {
                    v
                };
                if let Some(d) = duty {
                    let cap = self.params.duty_cap;
                    if d.iter().any(|x| !x.is_finite()) {
                        return ServerMessage::error("duty must be finite");
                    }
                    if d.iter().any(|x| x.abs() > cap) {
                        warnings.push(format!("duty clamped to ±{cap}"));
                    }
                    self.raw_duty = d.map(|x| x.clamp(-cap, cap));
                }
                self.ack("command", (!warnings.is_empty()).then(|| warnings.join("; ")))
            }
            ClientMessage::Mode { controller } => {
                if controller == ControllerMode::RlPolicy && self.policy.is_none() {
                    return ServerMessage::error(ServiceError::MissingPolicy.to_string());
                }
                self.mode = controller;
                self.jacobian = JacobianController::new(self.jacobian_cfg.clone()).expect("validated at open");
                self.raw_duty = [0.0; NUM_JOINTS];
                self.ack("mode", None)
            }
            ClientMessage::Reset { preset } => {
                self.pending_reset = Some(preset);
                self.ack("reset", None)
            }
        }
    }

    fn ack(&self, request: &str, warning: Option<String>) -> ServerMessage {
        ServerMessage::Ack { request: request.into(), mode: self.mode, warning }
    }

    fn apply_reset(&mut self, preset: StartPreset) {
        let q = preset.q();
        self.plant = PlantState::at_rest(q);
        self.histories = q.map(JointHistory::at_rest);
        self.v_ee = Vector3::zeros();
        self.v_d = Vector3::zeros();
        self.raw_duty = [0.0; NUM_JOINTS];
        self.jacobian = JacobianController::new(self.jacobian_cfg.clone()).expect("validated at open");
    }

    /// One control cycle: controller → PWM → plant step → state report.
    pub fn tick(&mut self) -> Result<StateMessage, ServiceError> {
        if let Some(preset) = self.pending_reset.take() {
            self.apply_reset(preset);
        }
        let params = self.params.clone();
        let (command, lambda) = match self.mode {
            ControllerMode::Jacobian => {
                let out = self
                    .jacobian
                    .step(&params, &self.plant.joint.q, &self.plant.joint.qdot, &self.v_ee, &self.v_d, CONTROL_DT)
                    .map_err(|e| ServiceError::Controller(e.to_string()))?;
                (out.command, Some(out.rate.lambda))
            }
            ControllerMode::RlPolicy => {
                let (policy, joints) = self.policy.as_ref().ok_or(ServiceError::MissingPolicy)?;
                let obs = build_observation(&self.v_ee, &self.v_d, &self.histories, joints);
                let action = policy.act(&obs, true, &mut self.rng).map_err(|e| ServiceError::Controller(e.to_string()))?;
                (action_to_command(&params, joints, &action), None)
            }
            ControllerMode::RawJoint => (PwmCommand::from_duties(&self.raw_duty, params.duty_cap), None),
        };
        let duty = command.duties(params.duty_cap);
        let next = step_plant(&params, &self.plant, &command, CONTROL_DT).expect("positive period");
        for j in 0..NUM_JOINTS {
            self.histories[j].advance(duty[j], next.joint.q[j], next.joint.qdot[j]);
        }
        let p0 = forward_kinematics(&params, &self.plant.joint.q).position;
        let p1 = forward_kinematics(&params, &next.joint.q).position;
        self.v_ee = (p1 - p0) / CONTROL_DT;
        self.plant = next;
        self.tick += 1;
        let w = manipulability(&active_jacobian(&params, &next.joint.q));
        Ok(StateMessage {
            t: self.tick as f64 * CONTROL_DT,
            q: next.joint.q,
            qd: next.joint.qdot,
            u: duty,
            eef: Eef { x: p1.x, y: p1.y, z: p1.z },
            v_ee: self.v_ee.into(),
            v_d: self.v_d.into(),
            reward: reward(&self.v_d, &self.v_ee),
            lambda,
            w: Some(w),
        })
    }
}

/// Summary row for the session listing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub mode: ControllerMode,
    pub tick: u64,
}

impl From<&Session> for SessionInfo {
    fn from(s: &Session) -> Self {
        SessionInfo { id: s.id, mode: s.mode, tick: s.tick }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{make_axis_profile, run_taskspace_eval, Axis, TaskController};
    use crate::neural::Normalizer;
    use crate::ppo::GaussianPolicy;
    use crate::sim_env::{observation_dim, observation_layout};

    fn params() -> Arc<MachineParams> {
        Arc::new(MachineParams::default())
    }

    fn random_policy(joints: &[usize]) -> PolicyArtifact {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = observation_dim(joints.len());
        let mut policy = GaussianPolicy::new(dim, joints.len(), &[16, 16], -0.5, &mut rng).unwrap();
        // Larger output weights so the policy actually moves the arm.
        for l in policy.net.layers_mut() {
            l.weight.mapv_inplace(|w| w * 30.0);
        }
        PolicyArtifact { policy, obs_norm: Normalizer::new(dim), obs_clip: 10.0, layout: observation_layout(joints) }
    }

    #[test]
    fn open_and_first_state() {
        let mut s = Session::open(1, SessionConfig::new(params())).unwrap();
        let st = s.tick().unwrap();
        assert_eq!(st.t, CONTROL_DT);
        // Zero command at rest: nothing moves.
        assert_eq!(st.q, StartPreset::MidWorkspace.q());
        assert_eq!(st.reward, 1.0);
    }

    #[test]
    fn rl_mode_needs_a_policy() {
        let cfg = SessionConfig { mode: ControllerMode::RlPolicy, ..SessionConfig::new(params()) };
        assert!(matches!(Session::open(1, cfg), Err(ServiceError::MissingPolicy)));
        let mut s = Session::open(1, SessionConfig::new(params())).unwrap();
        assert!(matches!(s.handle_text(r#"{"type":"mode","controller":"rl_policy"}"#), ServerMessage::Error { .. }));
        assert!(matches!(load_policy(Path::new("/nonexistent/policy.json")), Err(ServiceError::Checkpoint { .. })));
    }

    #[test]
    fn commands_apply_next_tick_and_clamp() {
        let mut s = Session::open(2, SessionConfig::new(params())).unwrap();
        let ack = s.handle_text(r#"{"type":"command","vx":0.1,"vy":0,"vz":0,"extra":"ignored"}"#);
        assert_eq!(ack, ServerMessage::Ack { request: "command".into(), mode: ControllerMode::Jacobian, warning: None });
        assert_eq!(s.tick().unwrap().v_d, [0.1, 0.0, 0.0]);
        let ack = s.handle_text(r#"{"type":"command","vx":2.0,"vy":0,"vz":0}"#);
        assert!(matches!(ack, ServerMessage::Ack { warning: Some(_), .. }));
        let v = s.tick().unwrap().v_d;
        assert!((Vector3::from(v).norm() - MAX_COMMAND_SPEED).abs() < 1e-15);
        assert!(matches!(s.handle_text("{not json"), ServerMessage::Error { .. }));
        assert!(matches!(s.handle_text(r#"{"type":"teleport"}"#), ServerMessage::Error { .. }));
    }

    #[test]
    fn command_during_reset_is_rejected() {
        let mut s = Session::open(3, SessionConfig::new(params())).unwrap();
        s.handle_text(r#"{"type":"command","vx":0.2}"#);
        for _ in 0..10 {
            s.tick().unwrap();
        }
        assert!(matches!(s.handle_text(r#"{"type":"reset","preset":"low_boom"}"#), ServerMessage::Ack { .. }));
        assert_eq!(s.handle_text(r#"{"type":"command","vx":0.1}"#), ServerMessage::Error { reason: "resetting".into() });
        let st = s.tick().unwrap();
        assert_eq!(st.v_d, [0.0; 3]);
        assert_eq!(st.q, StartPreset::LowBoom.q());
        assert!(matches!(s.handle_text(r#"{"type":"command","vx":0.1}"#), ServerMessage::Ack { .. }));
    }

    #[test]
    fn mode_switch_keeps_plant_state() {
        let mut s = Session::open(4, SessionConfig::new(params())).unwrap();
        s.handle_text(r#"{"type":"command","vx":0.0,"vz":0.2}"#);
        for _ in 0..20 {
            s.tick().unwrap();
        }
        let before = *s.plant();
        s.handle_text(r#"{"type":"mode","controller":"raw_joint"}"#);
        assert_eq!(*s.plant(), before);
        assert_eq!(s.mode(), ControllerMode::RawJoint);
        s.handle_text(r#"{"type":"command","duty":[0.0,0.0,0.0,0.5,0.0]}"#);
        let st = s.tick().unwrap();
        assert!(st.u[3] > 0.45 && st.u[0] == 0.0);
    }

    #[test]
    fn sessions_are_independent() {
        let mut a = Session::open(1, SessionConfig::new(params())).unwrap();
        let mut b = Session::open(2, SessionConfig::new(params())).unwrap();
        a.handle_text(r#"{"type":"command","vx":0.2}"#);
        for _ in 0..10 {
            a.tick().unwrap();
            b.tick().unwrap();
        }
        assert_ne!(a.plant().joint.q, b.plant().joint.q);
        assert_eq!(b.plant().joint.q, StartPreset::MidWorkspace.q());
    }

    #[test]
    fn state_message_round_trip() {
        let mut s = Session::open(1, SessionConfig::new(params())).unwrap();
        s.handle_text(r#"{"type":"command","vx":0.1,"vy":0.05,"vz":-0.02}"#);
        for _ in 0..5 {
            let msg = ServerMessage::State(s.tick().unwrap());
            let text = msg.to_json();
            assert!(text.starts_with(r#"{"type":"state""#));
            assert_eq!(serde_json::from_str::<ServerMessage>(&text).unwrap(), msg);
        }
    }

    fn replay(controller: ControllerMode, art: Option<Arc<PolicyArtifact>>) {
        let p = params();
        let profile = make_axis_profile(Axis::X, 0.15, 4.0).unwrap();
        let q0 = StartPreset::MidWorkspace.q();
        let task = match &art {
            Some(a) => TaskController::Rl(a),
            None => TaskController::Jacobian(JacCtrlConfig::default()),
        };
        let (record, _) = run_taskspace_eval(&p, &task, &profile, q0, "mid_workspace").unwrap();
        let cfg = SessionConfig { mode: controller, policy: art.clone(), ..SessionConfig::new(p) };
        let mut s = Session::open(9, cfg).unwrap();
        let mut moved = false;
        for (v, row) in profile.velocities.iter().zip(&record.rows) {
            s.handle(ClientMessage::Command { vx: v.x, vy: v.y, vz: v.z, duty: None });
            let st = s.tick().unwrap();
            assert_eq!(st.q, row.q);
            assert_eq!(st.qd, row.qdot);
            assert_eq!(st.u, row.duty);
            assert_eq!(st.v_ee, row.velocity);
            moved |= st.q != q0;
        }
        assert!(moved);
    }

    #[test]
    fn jacobian_session_replays_offline_run() {
        replay(ControllerMode::Jacobian, None);
    }

    #[test]
    fn policy_session_replays_offline_run() {
        replay(ControllerMode::RlPolicy, Some(Arc::new(random_policy(&[2, 3]))));
    }
}

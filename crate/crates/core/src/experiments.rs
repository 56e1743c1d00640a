//! Reproducible evaluation harnesses: the sim-to-real trajectory gap replay and
//! the axis-wise task-space tracking comparison between the learned policy and
//! the Jacobian baseline.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator_net::ActuatorModelSet;
use crate::actuator_net::{ActuatorError, JointHistory, JointSimulator, LearnedSimulator, PlantSimulator};
use crate::hydraulic_plant::{step_plant, PlantError, PlantState, PwmCommand, CONTROL_DT};
use crate::jacobian_ctrl::{JacCtrlConfig, JacobianController, JacobianError};
use crate::machine_model::{active_jacobian, forward_kinematics, manipulability, JointState, MachineParams, ACTIVE_JOINTS, NUM_JOINTS};
use crate::ppo::{PolicyArtifact, PpoError};
use crate::sim_env::{action_to_command, build_observation, parse_layout};

/// Length of the replay sequence (30 s at 20 Hz).
pub const SEQUENCE_TICKS: usize = 600;
/// Start pose of the replay experiment.
pub const Q_START: [f64; NUM_JOINTS] = [1.5, 0.5, 0.58, 1.71, 1.24];
/// Minimum duty every active joint sees in a replay sequence.
pub const MIN_SEQUENCE_DUTY: f64 = 0.3;
/// Length of the window after a reversal used for the post-reversal error.
pub const POST_REVERSAL_TICKS: usize = 40;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown controller '{0}' (expected rl_policy or jacobian)")]
    UnknownController(String),
    #[error("unknown axis '{0}' (expected x, y or z)")]
    UnknownAxis(String),
    #[error("unknown start preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("records differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("policy layout '{0}' is not understood")]
    Layout(String),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub commands: Vec<PwmCommand>,
    pub seed: u64,
    pub description: String,
}

/// One ±duty pulse pair per block: `+d` then rest then `−d` then rest, so
/// each block nets roughly zero displacement.
fn pulse_block(out: &mut Vec<[f64; NUM_JOINTS]>, amplitudes: &[(usize, f64)], ticks: usize) {
    let push = ticks * 2 / 5;
    let rest = ticks / 2 - push;
    for sign in [1.0, -1.0] {
        let mut duties = [0.0; NUM_JOINTS];
        for &(j, a) in amplitudes {
            duties[j] = sign * a;
        }
        out.extend(std::iter::repeat_n(duties, push));
        out.extend(std::iter::repeat_n([0.0; NUM_JOINTS], rest));
    }
}

/// Deterministic 30 s sequence: single-joint pulses, then pairs, then every
/// active joint at once.
pub fn make_control_sequence(params: &MachineParams, seed: u64) -> ControlSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = SEQUENCE_TICKS / 12;
    let hi = params.duty_cap.min(0.55);
    // Leaves headroom for the 8-bit quantisation above the minimum.
    let amplitude = |rng: &mut ChaCha8Rng| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.random_range(MIN_SEQUENCE_DUTY + 0.02..hi)
    };
    let mut duties = Vec::with_capacity(SEQUENCE_TICKS);
    for j in ACTIVE_JOINTS {
        let a = amplitude(&mut rng);
        pulse_block(&mut duties, &[(j, a)], block);
    }
    for (a, b) in [(0, 2), (2, 3), (3, 4), (0, 4)] {
        let amps = [(a, amplitude(&mut rng)), (b, amplitude(&mut rng))];
        pulse_block(&mut duties, &amps, block);
    }
    for _ in 0..4 {
        let amps: Vec<(usize, f64)> = ACTIVE_JOINTS.iter().map(|&j| (j, amplitude(&mut rng))).collect();
        pulse_block(&mut duties, &amps, block);
    }
    duties.resize(SEQUENCE_TICKS, [0.0; NUM_JOINTS]);
    ControlSequence {
        commands: duties.iter().map(|d| PwmCommand::from_duties(d, params.duty_cap)).collect(),
        seed,
        description: "single-joint pulses (10 s), joint pairs (10 s), all active joints (10 s)".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t: f64,
    pub v_desired: [f64; 3],
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
    /// Commanded joint rates (zero when the controller has none).
    pub qdot_desired: [f64; 4],
    pub duty: [f64; NUM_JOINTS],
    pub lambda: f64,
    pub manipulability: f64,
}

/// A 20 Hz time series plus the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub controller: String,
    pub preset: String,
    pub rows: Vec<TrackingRow>,
}

impl TrackingRecord {
    fn new(controller: &str, preset: &str) -> Self {
        Self { controller: controller.into(), preset: preset.into(), rows: Vec::new() }
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["t", "vx_d", "vy_d", "vz_d", "x", "y", "z", "vx", "vy", "vz"].map(String::from).to_vec();
        h.extend((1..=NUM_JOINTS).map(|i| format!("q{i}")));
        h.extend((1..=NUM_JOINTS).map(|i| format!("qdot{i}")));
        h.extend((1..=4).map(|i| format!("qd_des{i}")));
        h.extend((1..=NUM_JOINTS).map(|i| format!("u{i}")));
        h.push("lambda".into());
        h.push("w".into());
        h
    }

    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::csv_header())?;
        for r in &self.rows {
            let mut rec = vec![r.t];
            rec.extend(r.v_desired);
            rec.extend(r.position);
            rec.extend(r.velocity);
            rec.extend(r.q);
            rec.extend(r.qdot);
            rec.extend(r.qdot_desired);
            rec.extend(r.duty);
            rec.push(r.lambda);
            rec.push(r.manipulability);
            w.write_record(rec.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn push_state(&mut self, params: &MachineParams, t: f64, prev: &JointState, next: &JointState, extra: RowExtra) {
        let p0 = forward_kinematics(params, &prev.q).position;
        let p1 = forward_kinematics(params, &next.q).position;
        let w = manipulability(&active_jacobian(params, &next.q));
        self.rows.push(TrackingRow {
            t,
            v_desired: extra.v_desired.into(),
            position: p1.into(),
            velocity: ((p1 - p0) / CONTROL_DT).into(),
            q: next.q,
            qdot: next.qdot,
            qdot_desired: extra.qdot_desired.into(),
            duty: extra.duty,
            lambda: extra.lambda,
            manipulability: w,
        });
    }
}

struct RowExtra {
    v_desired: Vector3<f64>,
    qdot_desired: Vector4<f64>,
    duty: [f64; NUM_JOINTS],
    lambda: f64,
}

/// Trajectory gap between a reference and a candidate rollout. Joint metrics
/// run over the active joints; task metrics use the Euclidean norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GapMetrics {
    pub max_joint_position: f64,
    pub rms_joint_position: f64,
    pub max_joint_velocity: f64,
    pub rms_joint_velocity: f64,
    pub max_task_position: f64,
    pub rms_task_position: f64,
    pub max_task_velocity: f64,
    pub rms_task_velocity: f64,
    pub terminal_offset: f64,
}

pub fn gap_metrics(reference: &TrackingRecord, candidate: &TrackingRecord) -> Result<GapMetrics, ExperimentError> {
    let (a, b) = (&reference.rows, &candidate.rows);
    if a.len() != b.len() {
        return Err(ExperimentError::LengthMismatch(a.len(), b.len()));
    }
    let mut m = GapMetrics::default();
    if a.is_empty() {
        return Ok(m);
    }
    let (mut sq_q, mut sq_qd, mut sq_p, mut sq_v) = (0.0, 0.0, 0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for j in ACTIVE_JOINTS {
            let dq = (ra.q[j] - rb.q[j]).abs();
            let dqd = (ra.qdot[j] - rb.qdot[j]).abs();
            m.max_joint_position = m.max_joint_position.max(dq);
            m.max_joint_velocity = m.max_joint_velocity.max(dqd);
            sq_q += dq * dq;
            sq_qd += dqd * dqd;
        }
        let dp = (Vector3::from(ra.position) - Vector3::from(rb.position)).norm();
        let dv = (Vector3::from(ra.velocity) - Vector3::from(rb.velocity)).norm();
        m.max_task_position = m.max_task_position.max(dp);
        m.max_task_velocity = m.max_task_velocity.max(dv);
        sq_p += dp * dp;
        sq_v += dv * dv;
    }
    let n = a.len() as f64;
    let nj = n * ACTIVE_JOINTS.len() as f64;
    m.rms_joint_position = (sq_q / nj).sqrt();
    m.rms_joint_velocity = (sq_qd / nj).sqrt();
    m.rms_task_position = (sq_p / n).sqrt();
    m.rms_task_velocity = (sq_v / n).sqrt();
    let (la, lb) = (a.last().unwrap(), b.last().unwrap());
    m.terminal_offset = (Vector3::from(la.position) - Vector3::from(lb.position)).norm();
    Ok(m)
}

fn replay(
    params: &MachineParams,
    sim: &mut impl JointSimulator,
    sequence: &ControlSequence,
    label: &str,
) -> Result<TrackingRecord, ExperimentError> {
    let mut record = TrackingRecord::new(label, "q_start");
    let mut prev = sim.joint_state();
    for (k, cmd) in sequence.commands.iter().enumerate() {
        let next = sim.step(cmd)?;
        let extra =
            RowExtra { v_desired: Vector3::zeros(), qdot_desired: Vector4::zeros(), duty: cmd.duties(params.duty_cap), lambda: 0.0 };
        record.push_state(params, (k + 1) as f64 * CONTROL_DT, &prev, &next, extra);
        prev = next;
    }
    Ok(record)
}

/// Replay one sequence on two simulators and measure the gap between them.
pub fn compare_simulators(
    params: &MachineParams,
    reference: &mut impl JointSimulator,
    candidate: &mut impl JointSimulator,
    sequence: &ControlSequence,
) -> Result<(TrackingRecord, TrackingRecord, GapMetrics), ExperimentError> {
    let a = replay(params, reference, sequence, "plant")?;
    let b = replay(params, candidate, sequence, "model")?;
    let gap = gap_metrics(&a, &b)?;
    Ok((a, b, gap))
}

/// Plant versus learned models from `Q_START`.
pub fn run_sim2real(
    params: &MachineParams,
    models: &ActuatorModelSet,
    sequence: &ControlSequence,
) -> Result<(TrackingRecord, TrackingRecord, GapMetrics), ExperimentError> {
    let mut plant = PlantSimulator::new(params, Q_START);
    let mut model = LearnedSimulator::new(params, models, Q_START);
    compare_simulators(params, &mut plant, &mut model, sequence)
}

/// Plant against itself: every gap must be exactly zero.
pub fn run_sim2real_oracle(
    params: &MachineParams,
    sequence: &ControlSequence,
) -> Result<(TrackingRecord, TrackingRecord, GapMetrics), ExperimentError> {
    let mut a = PlantSimulator::new(params, Q_START);
    let mut b = PlantSimulator::new(params, Q_START);
    compare_simulators(params, &mut a, &mut b, sequence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["x", "y", "z"][self.index()]
    }
}

impl FromStr for Axis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(ExperimentError::UnknownAxis(other.into())),
        }
    }
}

/// Task-space velocity profile sampled at the control period.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisProfile {
    pub axis: Axis,
    pub speed: f64,
    pub velocities: Vec<Vector3<f64>>,
    /// Tick at which the commanded velocity changes sign.
    pub reversal_tick: usize,
}

/// Ramp – hold – reverse – hold – ramp on one axis (10/30/20/30/10 % of the
/// duration), zero on the others. Symmetric, so the net displacement is zero.
pub fn make_axis_profile(axis: Axis, speed: f64, duration: f64) -> Result<AxisProfile, ExperimentError> {
    if !(speed.is_finite() && duration > 0.0) {
        return Err(ExperimentError::InvalidProfile(format!("speed {speed}, duration {duration}")));
    }
    let n = (duration / CONTROL_DT).round() as usize;
    if n < 10 {
        return Err(ExperimentError::InvalidProfile("duration shorter than 0.5 s".into()));
    }
    let shape = |f: f64| -> f64 {
        match f {
            f if f < 0.1 => f / 0.1,
            f if f < 0.4 => 1.0,
            f if f < 0.6 => 1.0 - 2.0 * (f - 0.4) / 0.2,
            f if f < 0.9 => -1.0,
            f => -1.0 + (f - 0.9) / 0.1,
        }
    };
    let velocities = (0..n)
        .map(|k| {
            // Sample at tick centres so the halves mirror exactly.
            let f = (k as f64 + 0.5) / n as f64;
            let mut v = Vector3::zeros();
            v[axis.index()] = speed * shape(f);
            v
        })
        .collect();
    Ok(AxisProfile { axis, speed, velocities, reversal_tick: n / 2 })
}

/// Named start configurations for the tracking runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPreset {
    MidWorkspace,
    NearExtension,
    LowBoom,
}

impl StartPreset {
    pub const ALL: [StartPreset; 3] = [StartPreset::MidWorkspace, StartPreset::NearExtension, StartPreset::LowBoom];

    pub fn q(self) -> [f64; NUM_JOINTS] {
        match self {
            StartPreset::MidWorkspace => [0.0, 0.5, 0.6, 1.2, 0.6],
            StartPreset::NearExtension => [0.0, 0.5, 0.2, 0.15, 0.1],
            StartPreset::LowBoom => [0.0, 0.5, 0.3, 0.6, 0.2],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StartPreset::MidWorkspace => "mid_workspace",
            StartPreset::NearExtension => "near_extension",
            StartPreset::LowBoom => "low_boom",
        }
    }
}

impl FromStr for StartPreset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| ExperimentError::UnknownPreset(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    RlPolicy,
    Jacobian,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::RlPolicy => "rl_policy",
            ControllerKind::Jacobian => "jacobian",
        }
    }
}

impl FromStr for ControllerKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl_policy" => Ok(ControllerKind::RlPolicy),
            "jacobian" => Ok(ControllerKind::Jacobian),
            other => Err(ExperimentError::UnknownController(other.into())),
        }
    }
}

/// A controller ready to be closed around the plant.
#[derive(Debug, Clone)]
pub enum TaskController<'a> {
    /// Deterministic policy mean; joints outside the policy's layout get zero duty.
    Rl(&'a PolicyArtifact),
    Jacobian(JacCtrlConfig),
}

impl TaskController<'_> {
    pub fn kind(&self) -> ControllerKind {
        match self {
            TaskController::Rl(_) => ControllerKind::RlPolicy,
            TaskController::Jacobian(_) => ControllerKind::Jacobian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// RMS velocity tracking error per axis (m/s).
    pub rms_velocity_error: [f64; 3],
    /// Largest off-axis deviation from the profile's integral (m).
    pub max_offaxis_drift: f64,
    /// Largest joint acceleration over the active joints (rad/s²).
    pub peak_joint_acceleration: f64,
    /// RMS velocity error norm over the window following the reversal (m/s).
    pub post_reversal_rms: f64,
}

impl TaskMetrics {
    pub const NAMES: [&'static str; 6] = [
        "rms_velocity_error_x",
        "rms_velocity_error_y",
        "rms_velocity_error_z",
        "max_offaxis_drift",
        "peak_joint_acceleration",
        "post_reversal_rms",
    ];

    pub fn values(&self) -> [f64; 6] {
        let [x, y, z] = self.rms_velocity_error;
        [x, y, z, self.max_offaxis_drift, self.peak_joint_acceleration, self.post_reversal_rms]
    }
}

pub fn tracking_metrics(
    record: &TrackingRecord,
    profile: &AxisProfile,
    start_q: &[f64; NUM_JOINTS],
    params: &MachineParams,
) -> TaskMetrics {
    let rows = &record.rows;
    let mut sq = [0.0; 3];
    let mut expected = forward_kinematics(params, start_q).position;
    let mut drift: f64 = 0.0;
    let mut peak: f64 = 0.0;
    let mut prev_qdot = [0.0; NUM_JOINTS];
    let (rev_lo, rev_hi) = (profile.reversal_tick, (profile.reversal_tick + POST_REVERSAL_TICKS).min(rows.len()));
    let mut post = 0.0;
    for (k, r) in rows.iter().enumerate() {
        let err = Vector3::from(r.v_desired) - Vector3::from(r.velocity);
        for a in 0..3 {
            sq[a] += err[a] * err[a];
        }
        if (rev_lo..rev_hi).contains(&k) {
            post += err.norm_squared();
        }
        expected += Vector3::from(r.v_desired) * CONTROL_DT;
        let mut off = Vector3::from(r.position) - expected;
        off[profile.axis.index()] = 0.0;
        drift = drift.max(off.norm());
        for j in ACTIVE_JOINTS {
            peak = peak.max(((r.qdot[j] - prev_qdot[j]) / CONTROL_DT).abs());
        }
        prev_qdot = r.qdot;
    }
    let n = rows.len().max(1) as f64;
    TaskMetrics {
        rms_velocity_error: sq.map(|s| (s / n).sqrt()),
        max_offaxis_drift: drift,
        peak_joint_acceleration: peak,
        post_reversal_rms: if rev_hi > rev_lo { (post / (rev_hi - rev_lo) as f64).sqrt() } else { 0.0 },
    }
}

/// Close `controller` around the synthetic plant for the whole profile.
pub fn run_taskspace_eval(
    params: &MachineParams,
    controller: &TaskController<'_>,
    profile: &AxisProfile,
    start_q: [f64; NUM_JOINTS],
    preset: &str,
) -> Result<(TrackingRecord, TaskMetrics), ExperimentError> {
    let mut state = PlantState::at_rest(start_q);
    let mut histories = start_q.map(JointHistory::at_rest);
    let mut v_ee = Vector3::zeros();
    let mut record = TrackingRecord::new(controller.kind().as_str(), preset);
    let (mut jac, rl_joints) = match controller {
        TaskController::Jacobian(cfg) => (Some(JacobianController::new(cfg.clone())?), Vec::new()),
        TaskController::Rl(art) => (None, parse_layout(&art.layout).ok_or_else(|| ExperimentError::Layout(art.layout.clone()))?),
    };
    // Only used by a stochastic policy; the evaluation acts on the mean.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (k, goal) in profile.velocities.iter().enumerate() {
        let (command, qdot_desired, lambda) = match (controller, jac.as_mut()) {
            (TaskController::Jacobian(_), Some(ctrl)) => {
                let out = ctrl.step(params, &state.joint.q, &state.joint.qdot, &v_ee, goal, CONTROL_DT)?;
                (out.command, out.rate.qdot_desired, out.rate.lambda)
            }
            (TaskController::Rl(art), _) => {
                let obs = build_observation(&v_ee, goal, &histories, &rl_joints);
                let action = art.act(&obs, true, &mut rng)?;
                (action_to_command(params, &rl_joints, &action), Vector4::zeros(), 0.0)
            }
            (TaskController::Jacobian(_), None) => unreachable!("controller built above"),
        };
        let duty = command.duties(params.duty_cap);
        let next = step_plant(params, &state, &command, CONTROL_DT)?;
        for j in 0..NUM_JOINTS {
            histories[j].advance(duty[j], next.joint.q[j], next.joint.qdot[j]);
        }
        let extra = RowExtra { v_desired: *goal, qdot_desired, duty, lambda };
        record.push_state(params, (k + 1) as f64 * CONTROL_DT, &state.joint, &next.joint, extra);
        v_ee = Vector3::from(record.rows.last().unwrap().velocity);
        state = next;
    }
    let metrics = tracking_metrics(&record, profile, &start_q, params);
    Ok((record, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub controller: String,
    pub axis: String,
    /// `None` marks a run that is expected but missing.
    pub metrics: Option<TaskMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub csv: String,
    pub text: String,
}

/// Placeholder written for metrics of a missing run.
pub const MISSING: &str = "MISSING";

/// One row per (controller, axis, metric), sorted by controller then axis.
pub fn compare_report(entries: &[ReportEntry]) -> Result<Report, ExperimentError> {
    let mut sorted: Vec<&ReportEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| (&a.controller, &a.axis).cmp(&(&b.controller, &b.axis)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["controller", "axis", "metric", "value"])?;
    let mut text = String::new();
    for e in sorted {
        let _ = writeln!(text, "{} / {}", e.controller, e.axis);
        for (i, name) in TaskMetrics::NAMES.iter().enumerate() {
            let value = e.metrics.map_or_else(|| MISSING.to_string(), |m| m.values()[i].to_string());
            let _ = writeln!(text, "  {name:<24} {value}");
            w.write_record([e.controller.as_str(), e.axis.as_str(), name, value.as_str()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(Report { csv: String::from_utf8(bytes).expect("csv output is utf-8"), text })
}

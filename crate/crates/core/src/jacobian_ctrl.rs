//! Baseline controller: resolved-motion rate control with a joint-limit
//! weighted, damped pseudo-inverse, followed by per-joint PID loops that turn
//! joint-rate commands into PWM.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulic_plant::PwmCommand;
use crate::machine_model::{active_jacobian, manipulability, JointLimits, MachineParams, ACTIVE_JOINTS, NUM_JOINTS};

/// Upper bound on a joint-limit weight.
pub const MAX_WEIGHT: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum JacobianError {
    #[error("singular task-space system with zero damping")]
    Singular,
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the integral accumulator (rad). Anti-windup: `ki · integral_clamp`
    /// must not exceed the duty cap.
    pub integral_clamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JacCtrlConfig {
    /// Velocity-error feedback gain (diagonal of K).
    pub k_gain: [f64; 3],
    /// Damping constant.
    pub k: f64,
    /// Manipulability below which damping switches on.
    pub w0: f64,
    pub lambda_max: f64,
    pub w_gain: f64,
    /// Use `J W⁻¹ Jᵀ` inside the inverse instead of the `J W Jᵀ` form.
    pub standard_wls: bool,
    /// One gain set for every active joint, in both directions.
    pub pid: PidGains,
    pub duty_cap: f64,
}

impl Default for JacCtrlConfig {
    fn default() -> Self {
        Self {
            k_gain: [1.0; 3],
            k: 0.1,
            w0: 2.0,
            lambda_max: 1.0,
            w_gain: 1.0,
            standard_wls: false,
            pid: PidGains { kp: 1.2, ki: 20.0, kd: 0.02, integral_clamp: 0.63 / 20.0 },
            duty_cap: 0.63,
        }
    }
}

impl JacCtrlConfig {
    pub fn validate(&self) -> Result<(), JacobianError> {
        let bad = |m: &str| Err(JacobianError::InvalidConfig(m.into()));
        if self.k_gain.iter().any(|g| !(*g >= 0.0)) {
            return bad("K must be positive semi-definite (non-negative diagonal)");
        }
        if !(self.k > 0.0) {
            return bad("k must be positive");
        }
        if !(self.lambda_max >= 0.0) || !(self.w0 > 0.0) {
            return bad("lambda_max must be non-negative and w0 positive");
        }
        if !(self.w_gain >= 0.0) || !(self.pid.integral_clamp >= 0.0) {
            return bad("w_gain and integral clamp must be non-negative");
        }
        if self.pid.ki * self.pid.integral_clamp > self.duty_cap * (1.0 + 1e-9) {
            return bad("ki · integral_clamp exceeds the duty cap, so the integral can wind up");
        }
        Ok(())
    }
}

/// Gradient of the joint-limit criterion
/// `H(q) = (q_max − q_min)² / (4 (q_max − q)(q − q_min))`.
pub fn limit_gradient(q: f64, limits: &JointLimits) -> f64 {
    let (lo, hi) = (limits.min, limits.max);
    let range = hi - lo;
    let denom = 4.0 * (hi - q).powi(2) * (q - lo).powi(2);
    if denom <= 0.0 {
        return f64::INFINITY.copysign(2.0 * q - hi - lo);
    }
    range * range * (2.0 * q - hi - lo) / denom
}

/// Diagonal joint-limit weights over the active joints. A joint is penalised
/// unless its previous rate carried it away from its nearer limit.
pub fn weight_matrix(params: &MachineParams, q: &[f64; NUM_JOINTS], prev_qdot: &[f64; 4], w_gain: f64) -> Vector4<f64> {
    let mut w = Vector4::from_element(1.0);
    for (k, &j) in ACTIVE_JOINTS.iter().enumerate() {
        let grad = limit_gradient(q[j], &params.joint_limits[j]);
        let moving_away = prev_qdot[k] * grad < 0.0;
        if !moving_away {
            w[k] = (1.0 + w_gain * grad.abs()).min(MAX_WEIGHT);
        }
    }
    w
}

/// Threshold-linear damping: zero above `w0`, rising to `λ_max·k` at a singularity.
pub fn damping(j: &Matrix3x4<f64>, k: f64, w0: f64, lambda_max: f64) -> f64 {
    let w = manipulability(j);
    if w >= w0 {
        0.0
    } else {
        lambda_max * k * (1.0 - w / w0)
    }
}

/// `J⁺ = W⁻¹ Jᵀ (J W Jᵀ + λ² I)⁻¹`, or with `W⁻¹` in the middle when `standard_wls`.
pub fn dls_pinv(j: &Matrix3x4<f64>, w: &Vector4<f64>, lambda: f64, standard_wls: bool) -> Result<Matrix4x3<f64>, JacobianError> {
    let w_inv = Matrix4::from_diagonal(&w.map(|v| 1.0 / v));
    let middle = if standard_wls { w_inv } else { Matrix4::from_diagonal(w) };
    let m = j * middle * j.transpose() + Matrix3::identity() * (lambda * lambda);
    if lambda == 0.0 {
        let sv = m.singular_values();
        if sv.min() <= 1e-12 * sv.max().max(1e-300) {
            return Err(JacobianError::Singular);
        }
    }
    let inv = m.try_inverse().ok_or(JacobianError::Singular)?;
    Ok(w_inv * j.transpose() * inv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCommand {
    pub qdot_desired: Vector4<f64>,
    pub lambda: f64,
    pub manipulability: f64,
    pub weights: Vector4<f64>,
}

/// `q̇ = J⁺(q)(ẋ_goal + K e)` over the active joints.
pub fn resolved_rate_step(
    params: &MachineParams,
    q: &[f64; NUM_JOINTS],
    xdot_goal: &Vector3<f64>,
    error: &Vector3<f64>,
    prev_qdot: &[f64; 4],
    cfg: &JacCtrlConfig,
) -> Result<RateCommand, JacobianError> {
    let j = active_jacobian(params, q);
    let weights = weight_matrix(params, q, prev_qdot, cfg.w_gain);
    let lambda = damping(&j, cfg.k, cfg.w0, cfg.lambda_max);
    let pinv = dls_pinv(&j, &weights, lambda, cfg.standard_wls)?;
    let k = Matrix3::from_diagonal(&Vector3::from(cfg.k_gain));
    Ok(RateCommand { qdot_desired: pinv * (xdot_goal + k * error), lambda, manipulability: manipulability(&j), weights })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: [f64; 4],
    pub prev_error: [f64; 4],
}

/// One PID tick per active joint; returns the PWM command and the duties.
pub fn pid_to_pwm(
    qdot_desired: &Vector4<f64>,
    qdot_measured: &[f64; 4],
    state: &mut PidState,
    gains: &PidGains,
    duty_cap: f64,
    dt: f64,
) -> (PwmCommand, [f64; NUM_JOINTS]) {
    let mut duties = [0.0; NUM_JOINTS];
    for (k, &j) in ACTIVE_JOINTS.iter().enumerate() {
        let e = qdot_desired[k] - qdot_measured[k];
        state.integral[k] = (state.integral[k] + e * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
        let derivative = (e - state.prev_error[k]) / dt;
        state.prev_error[k] = e;
        duties[j] = (gains.kp * e + gains.ki * state.integral[k] + gains.kd * derivative).clamp(-duty_cap, duty_cap);
    }
    (PwmCommand::from_duties(&duties, duty_cap), duties)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub command: PwmCommand,
    pub rate: RateCommand,
    pub duties: [f64; NUM_JOINTS],
}

/// Stateful rate controller: keeps the PID state and the previous goal
/// (velocity-error term). The direction gate uses the measured joint rates.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianController {
    pub cfg: JacCtrlConfig,
    pub pid: PidState,
    prev_goal: Option<Vector3<f64>>,
}

impl JacobianController {
    pub fn new(cfg: JacCtrlConfig) -> Result<Self, JacobianError> {
        cfg.validate()?;
        Ok(Self { cfg, pid: PidState::default(), prev_goal: None })
    }

    /// One 20 Hz tick from measured joint state and end-effector velocity.
    pub fn step(
        &mut self,
        params: &MachineParams,
        q: &[f64; NUM_JOINTS],
        qdot: &[f64; NUM_JOINTS],
        v_ee: &Vector3<f64>,
        goal: &Vector3<f64>,
        dt: f64,
    ) -> Result<ControlOutput, JacobianError> {
        // The velocity error left over from the previous tick's goal.
        let error = self.prev_goal.map_or_else(Vector3::zeros, |g| g - v_ee);
        let measured = [qdot[0], qdot[2], qdot[3], qdot[4]];
        let rate = resolved_rate_step(params, q, goal, &error, &measured, &self.cfg)?;
        let (command, duties) = pid_to_pwm(&rate.qdot_desired, &measured, &mut self.pid, &self.cfg.pid, self.cfg.duty_cap, dt);
        self.prev_goal = Some(*goal);
        Ok(ControlOutput { command, rate, duties })
    }
}

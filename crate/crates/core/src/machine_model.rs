//! Kinematics of a five-joint hydraulic manipulator: a yaw base carrying a
//! planar pitch chain (boom, arm, tool).
//!
//! Joint order is `[q1 yaw, q2 reach (locked), q3 boom, q4 arm, q5 tool]`.
//! Only q1, q3, q4 and q5 are used for task-space control.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix3x4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulic_plant::calibrate_sweep_gains;

/// Number of revolute joints.
pub const NUM_JOINTS: usize = 5;
/// Index of the locked reach joint.
pub const LOCKED_JOINT: usize = 1;
/// Indices of the joints used for task-space control.
pub const ACTIVE_JOINTS: [usize; 4] = [0, 2, 3, 4];

pub type Jacobian = SMatrix<f64, 3, NUM_JOINTS>;
pub type ActiveJacobian = Matrix3x4<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid machine parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub min: f64,
    pub max: f64,
}

impl JointLimits {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, q: f64) -> bool {
        q >= self.min && q <= self.max
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.min, self.max)
    }

    /// Limits shrunk symmetrically about the midpoint to `fraction` of the range.
    pub fn shrunk(&self, fraction: f64) -> Self {
        let half = 0.5 * self.range() * fraction;
        Self::new(self.mid() - half, self.mid() + half)
    }
}

/// Crank geometry converting cylinder stroke speed into joint rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderGeometry {
    /// Pivot to cylinder base distance (m).
    pub a: f64,
    /// Pivot to rod attachment distance (m).
    pub b: f64,
    /// Offset between joint angle and crank angle (rad).
    pub phi: f64,
}

impl CylinderGeometry {
    /// Perpendicular distance from the pivot to the cylinder axis at joint angle `q`.
    pub fn lever_arm(&self, q: f64) -> f64 {
        let psi = q + self.phi;
        let length = (self.a * self.a + self.b * self.b - 2.0 * self.a * self.b * psi.cos()).sqrt();
        self.a * self.b * psi.sin() / length
    }

    /// Smallest lever arm over `limits`, sampled densely.
    pub fn min_lever_arm(&self, limits: &JointLimits) -> f64 {
        const SAMPLES: usize = 2001;
        (0..SAMPLES)
            .map(|i| limits.min + limits.range() * i as f64 / (SAMPLES - 1) as f64)
            .map(|q| self.lever_arm(q))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Cylinder speed (m/s, or rad/s for a rotary drive) at full duty, per direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionGains {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineParams {
    pub base_height: f64,
    /// Boom, arm and tool lengths.
    pub link_lengths: [f64; 3],
    pub q2_fixed_angle: f64,
    pub joint_limits: [JointLimits; NUM_JOINTS],
    /// `None` marks a rotary drive (slew motor) with a unit lever arm.
    pub cylinder_geometry: [Option<CylinderGeometry>; NUM_JOINTS],
    pub direction_gains: [DirectionGains; NUM_JOINTS],
    pub dead_zone: f64,
    pub duty_cap: f64,
    /// Lag time constant when a joint starts from rest (s).
    pub tau_rest: f64,
    /// Lag time constant once a joint is moving (s).
    pub tau_move: f64,
    /// Speed below which a joint counts as resting (rad/s).
    pub rest_threshold: f64,
}

/// Peak speeds (rad/s) at the duty cap used to calibrate the default gains.
/// Joint 5 values are the measured extrema of the real machine and are matched
/// on a full-range sweep; the others are peaks of the steady speed map.
const DEFAULT_PEAK_SPEEDS: [(f64, f64); NUM_JOINTS] = [(0.30, 0.30), (0.20, 0.20), (0.26, 0.38), (0.40, 0.28), (0.24, 0.47)];

const TOOL_JOINT: usize = 4;

/// Duty at the 8-bit command cap (80/127).
pub const CAP_DUTY: f64 = 80.0 / 127.0;

impl Default for MachineParams {
    fn default() -> Self {
        let limits = [
            JointLimits::new(-2.8, 2.8),
            JointLimits::new(0.0, 1.0),
            JointLimits::new(-0.5, 1.6),
            JointLimits::new(-0.2, 2.2),
            JointLimits::new(-0.8, 1.5),
        ];
        let centred = |l: &JointLimits, a: f64, b: f64| CylinderGeometry { a, b, phi: std::f64::consts::FRAC_PI_2 - l.mid() };
        let geometry = [
            None,
            Some(centred(&limits[1], 0.9, 0.3)),
            Some(centred(&limits[2], 1.0, 0.3)),
            Some(centred(&limits[3], 0.8, 0.25)),
            Some(centred(&limits[4], 0.5, 0.15)),
        ];
        let mut params = Self {
            base_height: 0.5,
            link_lengths: [1.5, 1.0, 0.5],
            q2_fixed_angle: 0.5,
            joint_limits: limits,
            cylinder_geometry: geometry,
            direction_gains: [DirectionGains { positive: 1.0, negative: 1.0 }; NUM_JOINTS],
            dead_zone: 0.07,
            duty_cap: 0.63,
            tau_rest: 0.174,
            tau_move: 0.045,
            rest_threshold: 0.02,
        };
        for (joint, &(pos, neg)) in DEFAULT_PEAK_SPEEDS.iter().enumerate() {
            params.direction_gains[joint] = params.calibrate_gains(joint, pos, neg, CAP_DUTY);
        }
        static TOOL_GAINS: OnceLock<DirectionGains> = OnceLock::new();
        let (pos, neg) = DEFAULT_PEAK_SPEEDS[TOOL_JOINT];
        params.direction_gains[TOOL_JOINT] = *TOOL_GAINS.get_or_init(|| calibrate_sweep_gains(&params, TOOL_JOINT, pos, neg, CAP_DUTY));
        params
    }
}

impl MachineParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidParameter(msg));
        let finite = [self.base_height, self.q2_fixed_angle, self.dead_zone, self.duty_cap, self.tau_rest, self.tau_move];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite scalar".into());
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return bad("link lengths must be positive".into());
        }
        for (i, l) in self.joint_limits.iter().enumerate() {
            if !(l.min < l.max) {
                return bad(format!("joint {} limits: min must be below max", i + 1));
            }
        }
        if !self.joint_limits[LOCKED_JOINT].contains(self.q2_fixed_angle) {
            return bad("q2_fixed_angle outside joint 2 limits".into());
        }
        if !(0.0 <= self.dead_zone && self.dead_zone < self.duty_cap && self.duty_cap <= 1.0) {
            return bad("require 0 <= dead_zone < duty_cap <= 1".into());
        }
        for (i, g) in self.direction_gains.iter().enumerate() {
            if !(g.positive > 0.0 && g.negative > 0.0) {
                return bad(format!("joint {} direction gains must be positive", i + 1));
            }
        }
        if !(self.tau_rest > self.tau_move && self.tau_move > 0.0) {
            return bad("require tau_rest > tau_move > 0".into());
        }
        if !(self.rest_threshold > 0.0) {
            return bad("rest_threshold must be positive".into());
        }
        for (i, geom) in self.cylinder_geometry.iter().enumerate() {
            if let Some(g) = geom {
                if !(g.a > 0.0 && g.b > 0.0) {
                    return bad(format!("joint {} cylinder distances must be positive", i + 1));
                }
                let r_min = g.min_lever_arm(&self.joint_limits[i]);
                if !(r_min > 1e-3) {
                    return bad(format!("joint {} crank passes a singularity inside its limits", i + 1));
                }
            }
        }
        Ok(())
    }

    /// Lever arm of joint `joint` at angle `q`; 1 for rotary drives.
    pub fn lever_arm(&self, joint: usize, q: f64) -> f64 {
        self.cylinder_geometry[joint].map_or(1.0, |g| g.lever_arm(q))
    }

    pub fn min_lever_arm(&self, joint: usize) -> f64 {
        self.cylinder_geometry[joint].map_or(1.0, |g| g.min_lever_arm(&self.joint_limits[joint]))
    }

    /// Gains such that the fastest steady speed over the joint range at `duty`
    /// equals `peak_pos` (positive direction) and `peak_neg` (negative direction).
    pub fn calibrate_gains(&self, joint: usize, peak_pos: f64, peak_neg: f64, duty: f64) -> DirectionGains {
        let effective = (duty.abs() - self.dead_zone) / (1.0 - self.dead_zone);
        let r_min = self.min_lever_arm(joint);
        DirectionGains { positive: peak_pos * r_min / effective, negative: peak_neg * r_min / effective }
    }

    /// Total length of the pitch chain.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Absolute pitch of boom, arm and tool.
    pub fn link_pitches(&self, q: &[f64; NUM_JOINTS]) -> [f64; 3] {
        let boom = q[1] - self.q2_fixed_angle + q[2];
        let arm = boom - q[3];
        let tool = arm - q[4];
        [boom, arm, tool]
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let params: Self = serde_json::from_str(text).map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
}

impl JointState {
    pub fn at_rest(q: [f64; NUM_JOINTS]) -> Self {
        Self { q, qdot: [0.0; NUM_JOINTS] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EefPose {
    pub position: Vector3<f64>,
    /// Tool pitch; reported but never tracked.
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EefState {
    pub position: Vector3<f64>,
    pub heading: f64,
    pub velocity: Vector3<f64>,
}

/// Radial reach and height (above the yaw pivot) of the three link ends.
fn planar_points(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> [(f64, f64); 3] {
    let pitches = params.link_pitches(q);
    let mut out = [(0.0, 0.0); 3];
    let (mut rho, mut h) = (0.0, 0.0);
    for k in 0..3 {
        rho += params.link_lengths[k] * pitches[k].cos();
        h += params.link_lengths[k] * pitches[k].sin();
        out[k] = (rho, h);
    }
    out
}

pub fn forward_kinematics(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> EefPose {
    let (rho, h) = planar_points(params, q)[2];
    let (s1, c1) = q[0].sin_cos();
    EefPose { position: Vector3::new(rho * c1, rho * s1, params.base_height + h), heading: params.link_pitches(q)[2] }
}

/// Cartesian positions of the boom pivot, boom end, arm end and tool tip.
pub fn joint_positions(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> [Vector3<f64>; 4] {
    let (s1, c1) = q[0].sin_cos();
    let mut out = [Vector3::new(0.0, 0.0, params.base_height); 4];
    for (k, (rho, h)) in planar_points(params, q).into_iter().enumerate() {
        out[k + 1] = Vector3::new(rho * c1, rho * s1, params.base_height + h);
    }
    out
}

pub fn jacobian(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> Jacobian {
    let pitches = params.link_pitches(q);
    let l = &params.link_lengths;
    let (s1, c1) = q[0].sin_cos();
    let (rho, h) = planar_points(params, q)[2];

    // d(rho, h)/dq for the pitch joints; a joint rotates every link outboard of it.
    // q2 and q3 both drive the boom; q4 and q5 fold the chain downward.
    let tail =
        |from: usize| -> (f64, f64) { (from..3).fold((0.0, 0.0), |(r, z), k| (r + l[k] * pitches[k].cos(), z + l[k] * pitches[k].sin())) };
    let (r_arm, z_arm) = tail(1);
    let (r_tool, z_tool) = tail(2);
    let planar = [(-h, rho), (-h, rho), (z_arm, -r_arm), (z_tool, -r_tool)];

    let mut jac = Jacobian::zeros();
    jac[(0, 0)] = -rho * s1;
    jac[(1, 0)] = rho * c1;
    for (col, (drho, dh)) in planar.into_iter().enumerate() {
        jac[(0, col + 1)] = drho * c1;
        jac[(1, col + 1)] = drho * s1;
        jac[(2, col + 1)] = dh;
    }
    jac
}

/// Jacobian restricted to the controlled joints q1, q3, q4, q5.
pub fn active_jacobian(params: &MachineParams, q: &[f64; NUM_JOINTS]) -> ActiveJacobian {
    select_active(&jacobian(params, q))
}

pub fn select_active(full: &Jacobian) -> ActiveJacobian {
    ActiveJacobian::from_fn(|r, c| full[(r, ACTIVE_JOINTS[c])])
}

/// `sqrt(det(J Jᵀ))`, zero for a row-rank-deficient Jacobian.
pub fn manipulability(j: &ActiveJacobian) -> f64 {
    let gram: Matrix3<f64> = j * j.transpose();
    gram.determinant().max(0.0).sqrt()
}

pub fn eef_state(params: &MachineParams, state: &JointState) -> EefState {
    let pose = forward_kinematics(params, &state.q);
    let qdot = nalgebra::SVector::<f64, NUM_JOINTS>::from_column_slice(&state.qdot);
    EefState { position: pose.position, heading: pose.heading, velocity: jacobian(params, &state.q) * qdot }
}

/// Expand active-joint values into a full joint vector (q2 slot gets `locked`).
pub fn expand_active(active: &[f64; 4], locked: f64) -> [f64; NUM_JOINTS] {
    [active[0], locked, active[1], active[2], active[3]]
}

pub fn gather_active(full: &[f64; NUM_JOINTS]) -> [f64; 4] {
    ACTIVE_JOINTS.map(|j| full[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Q_START: [f64; 5] = [1.5, 0.5, 0.58, 1.71, 1.24];

    /// Independent homogeneous-transform chain: yaw about z, then pitch joints
    /// about the local y axis with link translations along local x.
    fn transform_chain(p: &MachineParams, q: &[f64; 5]) -> Vector3<f64> {
        let yaw =
            Isometry3::from_parts(Translation3::new(0.0, 0.0, p.base_height), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[0]));
        // Rotation about -y raises +x toward +z.
        let pitch = |angle: f64| UnitQuaternion::from_axis_angle(&-Vector3::y_axis(), angle);
        let mut t = yaw * Isometry3::from_parts(Translation3::identity(), pitch(q[1] - p.q2_fixed_angle + q[2]));
        t *= Isometry3::translation(p.link_lengths[0], 0.0, 0.0);
        t *= Isometry3::from_parts(Translation3::identity(), pitch(-q[3]));
        t *= Isometry3::translation(p.link_lengths[1], 0.0, 0.0);
        t *= Isometry3::from_parts(Translation3::identity(), pitch(-q[4]));
        t *= Isometry3::translation(p.link_lengths[2], 0.0, 0.0);
        t.translation.vector
    }

    fn random_config(p: &MachineParams, rng: &mut impl Rng) -> [f64; 5] {
        let mut q = [0.0; 5];
        for (j, l) in p.joint_limits.iter().enumerate() {
            q[j] = rng.random_range(l.min..=l.max);
        }
        q[LOCKED_JOINT] = p.q2_fixed_angle;
        q
    }

    fn straight(p: &MachineParams, yaw: f64) -> [f64; 5] {
        [yaw, p.q2_fixed_angle, 0.0, 0.0, 0.0]
    }

    #[test]
    fn default_params_are_valid() {
        MachineParams::default().validate().unwrap();
        for j in 0..5 {
            let l = MachineParams::default().joint_limits[j];
            assert!(l.contains(Q_START[j]), "start pose joint {j} outside limits");
        }
    }

    #[test]
    fn straight_chain_reaches_sum_of_links() {
        let p = MachineParams::default();
        let pose = forward_kinematics(&p, &straight(&p, 0.0));
        assert!((pose.position.x - 3.0).abs() < 1e-15);
        assert_eq!(pose.position.y, 0.0);
        assert!((pose.position.z - p.base_height).abs() < 1e-15);

        let pose = forward_kinematics(&p, &straight(&p, std::f64::consts::FRAC_PI_2));
        assert!(pose.position.x.abs() < 1e-12);
        assert!((pose.position.y - 3.0).abs() < 1e-12);
    }

    #[test]
    fn start_pose_matches_transform_chain() {
        let p = MachineParams::default();
        let closed = forward_kinematics(&p, &Q_START).position;
        let chain = transform_chain(&p, &Q_START);
        assert!((closed - chain).norm() < 1e-12, "{closed} vs {chain}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_config(&p, &mut rng);
            assert!((forward_kinematics(&p, &q).position - transform_chain(&p, &q)).norm() < 1e-12);
        }
    }

    #[test]
    fn yaw_column_is_revolute_about_z() {
        let p = MachineParams::default();
        let q = [0.0, p.q2_fixed_angle, 0.4, 0.9, 0.3];
        let pos = forward_kinematics(&p, &q).position;
        let j = jacobian(&p, &q);
        assert!((j[(0, 0)] + pos.y).abs() < 1e-15);
        assert!((j[(1, 0)] - pos.x).abs() < 1e-15);
        assert_eq!(j[(2, 0)], 0.0);
    }

    fn finite_difference_jacobian(p: &MachineParams, q: &[f64; 5], h: f64) -> Jacobian {
        let mut out = Jacobian::zeros();
        for c in 0..5 {
            let (mut qp, mut qm) = (*q, *q);
            qp[c] += h;
            qm[c] -= h;
            let d = (forward_kinematics(p, &qp).position - forward_kinematics(p, &qm).position) / (2.0 * h);
            out.set_column(c, &d);
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = MachineParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = random_config(&p, &mut rng);
            let analytic = jacobian(&p, &q);
            let numeric = finite_difference_jacobian(&p, &q, 1e-6);
            let rel = (analytic - numeric).amax() / analytic.amax().max(1e-12);
            assert!(rel <= 1e-6, "relative error {rel} at {q:?}");
        }
    }

    #[test]
    fn active_jacobian_drops_locked_column() {
        let p = MachineParams::default();
        let full = jacobian(&p, &Q_START);
        let active = active_jacobian(&p, &Q_START);
        assert_eq!(active.shape(), (3, 4));
        assert_eq!(active, full.remove_column(1));
    }

    #[test]
    fn active_jacobian_predicts_rollout_velocity() {
        let p = MachineParams::default();
        let qdot_active = [0.1, -0.05, 0.08, 0.12];
        let dt = 1e-4;
        let mut q = [0.2, p.q2_fixed_angle, 0.6, 1.2, 0.5];
        for _ in 0..20 {
            let before = forward_kinematics(&p, &q).position;
            let mut q_next = q;
            for (k, &j) in ACTIVE_JOINTS.iter().enumerate() {
                q_next[j] += qdot_active[k] * dt;
            }
            let mut q_mid = q;
            for (k, &j) in ACTIVE_JOINTS.iter().enumerate() {
                q_mid[j] += 0.5 * qdot_active[k] * dt;
            }
            let measured = (forward_kinematics(&p, &q_next).position - before) / dt;
            let predicted = active_jacobian(&p, &q_mid) * nalgebra::Vector4::from(qdot_active);
            assert!((measured - predicted).norm() < 1e-8, "{measured} vs {predicted}");
            q = q_next;
        }
    }

    #[test]
    fn manipulability_examples() {
        let mut j = ActiveJacobian::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert!((manipulability(&j) - 1.0).abs() < 1e-15);
        j.set_row(1, &nalgebra::RowVector4::zeros());
        assert_eq!(manipulability(&j), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let j = ActiveJacobian::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let svd_product: f64 = j.svd(false, false).singular_values.iter().product();
            let w = manipulability(&j);
            assert!((w - svd_product).abs() <= 1e-9 * svd_product, "{w} vs {svd_product}");
        }
    }

    #[test]
    fn full_extension_is_near_singular() {
        let p = MachineParams::default();
        let sigma_min = |q: &[f64; 5]| active_jacobian(&p, q).svd(false, false).singular_values.min();
        let extended = sigma_min(&straight(&p, 0.0));
        let mid = sigma_min(&[0.0, p.q2_fixed_angle, 0.6, 1.2, 0.6]);
        assert!(extended < 0.05 * mid, "extended {extended}, mid {mid}");
    }

    #[test]
    fn eef_velocity_is_jacobian_times_rate() {
        let p = MachineParams::default();
        let state = JointState { q: Q_START, qdot: [0.1, 0.0, -0.2, 0.05, 0.3] };
        let eef = eef_state(&p, &state);
        let h = 1e-6;
        let mut qp = state.q;
        let mut qm = state.q;
        for j in 0..5 {
            qp[j] += h * state.qdot[j];
            qm[j] -= h * state.qdot[j];
        }
        let fd = (forward_kinematics(&p, &qp).position - forward_kinematics(&p, &qm).position) / (2.0 * h);
        assert!((fd - eef.velocity).norm() < 1e-8);
    }

    #[test]
    fn joint_positions_end_at_tool_tip() {
        let p = MachineParams::default();
        let pts = joint_positions(&p, &Q_START);
        assert_eq!(pts[3], forward_kinematics(&p, &Q_START).position);
        for k in 0..3 {
            assert!(((pts[k + 1] - pts[k]).norm() - p.link_lengths[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = MachineParams::default();
        p.tau_move = p.tau_rest;
        assert!(p.validate().is_err());
        let mut p = MachineParams::default();
        p.joint_limits[4] = JointLimits::new(-1.6, 1.6);
        assert!(p.validate().is_err(), "crank range wider than pi must be rejected");
        let mut p = MachineParams::default();
        p.dead_zone = 0.7;
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let p = MachineParams::default();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(MachineParams::from_json(&text).unwrap(), p);
    }

    proptest::proptest! {
        #[test]
        fn yaw_rotates_plane_and_keeps_height(
            q3 in -0.5f64..1.6, q4 in -0.2f64..2.2, q5 in -0.8f64..1.5,
            yaw in -2.8f64..2.8, delta in -1.0f64..1.0,
        ) {
            let p = MachineParams::default();
            let a = forward_kinematics(&p, &[yaw, p.q2_fixed_angle, q3, q4, q5]).position;
            let b = forward_kinematics(&p, &[yaw + delta, p.q2_fixed_angle, q3, q4, q5]).position;
            let (s, c) = delta.sin_cos();
            proptest::prop_assert!((b.x - (c * a.x - s * a.y)).abs() < 1e-12);
            proptest::prop_assert!((b.y - (s * a.x + c * a.y)).abs() < 1e-12);
            proptest::prop_assert_eq!(a.z, b.z);
        }

        #[test]
        fn position_stays_in_workspace_ball(
            q1 in -2.8f64..2.8, q3 in -0.5f64..1.6, q4 in -0.2f64..2.2, q5 in -0.8f64..1.5,
        ) {
            let p = MachineParams::default();
            let pos = forward_kinematics(&p, &[q1, p.q2_fixed_angle, q3, q4, q5]).position;
            proptest::prop_assert!(pos.norm() <= p.base_height + p.reach() + 1e-12);
        }
    }
}

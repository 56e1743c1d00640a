//! Synthetic hydraulic plant standing in for the real machine.
//!
//! Each joint is independent: the 8-bit PWM code is decoded into a signed duty,
//! a dead zone and a direction-dependent cylinder speed give the steady joint
//! rate through the crank lever arm, and a first-order lag whose time constant
//! depends on whether the joint started from rest shapes the response.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine_model::{forward_kinematics, DirectionGains, JointState, MachineParams, LOCKED_JOINT, NUM_JOINTS};

/// Control period of the machine control unit (20 Hz).
pub const CONTROL_DT: f64 = 0.05;

const PWM_HALF_RANGE: f64 = 127.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("PWM code {0} outside 0..=255")]
    PwmOutOfRange(u32),
    #[error("time step must be positive, got {0}")]
    InvalidTimestep(f64),
}

/// Decode an 8-bit PWM code: `[0,127]` drives positive, `[255,128]` negative.
pub fn decode_pwm(u: u32) -> Result<f64, PlantError> {
    match u {
        0..=127 => Ok(u as f64 / PWM_HALF_RANGE),
        128..=255 => Ok(-((255 - u) as f64) / PWM_HALF_RANGE),
        _ => Err(PlantError::PwmOutOfRange(u)),
    }
}

/// Encode a signed duty, clamping its magnitude to `duty_cap`. Rest encodes as 0.
pub fn encode_duty(s: f64, duty_cap: f64) -> u8 {
    let magnitude = s.abs().min(duty_cap).min(1.0);
    let code = (magnitude * PWM_HALF_RANGE).round() as u8;
    if s < 0.0 && code > 0 {
        255 - code
    } else {
        code
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PwmCommand {
    pub u: [u8; NUM_JOINTS],
}

impl PwmCommand {
    pub const REST: Self = Self { u: [0; NUM_JOINTS] };

    pub fn from_duties(duties: &[f64; NUM_JOINTS], duty_cap: f64) -> Self {
        Self { u: duties.map(|s| encode_duty(s, duty_cap)) }
    }

    /// Signed duties with the magnitude clamped to `duty_cap`.
    pub fn duties(&self, duty_cap: f64) -> [f64; NUM_JOINTS] {
        self.u.map(|u| {
            let s = decode_pwm(u as u32).expect("u8 is always a valid code");
            s.clamp(-duty_cap, duty_cap)
        })
    }
}

/// Steady joint rate (rad/s) for duty `s` at joint angle `q`.
pub fn steady_velocity(params: &MachineParams, joint: usize, s: f64, q: f64) -> f64 {
    let magnitude = s.abs().min(1.0);
    if magnitude <= params.dead_zone {
        return 0.0;
    }
    let effective = (magnitude - params.dead_zone) / (1.0 - params.dead_zone);
    let gains = &params.direction_gains[joint];
    let cylinder_speed = if s > 0.0 { gains.positive * effective } else { -gains.negative * effective };
    cylinder_speed / params.lever_arm(joint, q)
}

/// Largest steady speed of `joint` over its range at the duty cap.
pub fn max_steady_speed(params: &MachineParams, joint: usize) -> f64 {
    let g = &params.direction_gains[joint];
    let effective = (params.duty_cap.min(1.0) - params.dead_zone) / (1.0 - params.dead_zone);
    g.positive.max(g.negative) * effective / params.min_lever_arm(joint)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Positions and lagged joint rates.
    pub joint: JointState,
    /// Joints that started from rest and have not yet reached 90% of their target rate.
    pub starting: [bool; NUM_JOINTS],
    pub time: f64,
}

impl PlantState {
    pub fn at_rest(q: [f64; NUM_JOINTS]) -> Self {
        Self { joint: JointState::at_rest(q), starting: [false; NUM_JOINTS], time: 0.0 }
    }

    pub fn filtered_qdot(&self) -> &[f64; NUM_JOINTS] {
        &self.joint.qdot
    }
}

/// Advance one joint by `dt`. Returns `(q, qdot, starting)`.
pub fn step_joint(params: &MachineParams, joint: usize, q: f64, qdot: f64, starting: bool, duty: f64, dt: f64) -> (f64, f64, bool) {
    let target = steady_velocity(params, joint, duty, q);
    let starting = starting || qdot.abs() < params.rest_threshold;
    let tau = if starting { params.tau_rest } else { params.tau_move };
    let mut qdot_next = target + (qdot - target) * (-dt / tau).exp();
    let reached = target != 0.0 && qdot_next * target > 0.0 && qdot_next.abs() >= 0.9 * target.abs();
    let starting = starting && !reached;

    let limits = &params.joint_limits[joint];
    let mut q_next = q + qdot_next * dt;
    if q_next >= limits.max {
        q_next = limits.max;
        qdot_next = qdot_next.min(0.0);
    } else if q_next <= limits.min {
        q_next = limits.min;
        qdot_next = qdot_next.max(0.0);
    }
    (q_next, qdot_next, starting)
}

pub fn step_plant(params: &MachineParams, state: &PlantState, command: &PwmCommand, dt: f64) -> Result<PlantState, PlantError> {
    if !(dt > 0.0) {
        return Err(PlantError::InvalidTimestep(dt));
    }
    let duties = command.duties(params.duty_cap);
    let mut next = *state;
    for joint in 0..NUM_JOINTS {
        if joint == LOCKED_JOINT {
            next.joint.qdot[joint] = 0.0;
            next.starting[joint] = false;
            continue;
        }
        let (q, qdot, starting) =
            step_joint(params, joint, state.joint.q[joint], state.joint.qdot[joint], state.starting[joint], duties[joint], dt);
        next.joint.q[joint] = q;
        next.joint.qdot[joint] = qdot;
        next.starting[joint] = starting;
    }
    next.time = state.time + dt;
    Ok(next)
}

/// Roll the plant through `commands` at 20 Hz. The result holds `state0`
/// followed by one state per command.
pub fn simulate_sequence(params: &MachineParams, state0: &PlantState, commands: &[PwmCommand]) -> Vec<PlantState> {
    let mut out = Vec::with_capacity(commands.len() + 1);
    out.push(*state0);
    for command in commands {
        let next = step_plant(params, out.last().unwrap(), command, CONTROL_DT).expect("control period is positive");
        out.push(next);
    }
    out
}

/// Fastest rate seen while `joint`, starting at rest at one limit, is driven at
/// constant `duty` across its whole range. Returns the signed extreme of the trace.
pub fn sweep_extreme(params: &MachineParams, joint: usize, duty: f64) -> f64 {
    const DT: f64 = 1e-3;
    const MAX_STEPS: usize = 1_000_000;
    let limits = &params.joint_limits[joint];
    let mut q = if duty > 0.0 { limits.min } else { limits.max };
    let (mut qdot, mut starting) = (0.0, false);
    let mut extreme = 0.0f64;
    for _ in 0..MAX_STEPS {
        (q, qdot, starting) = step_joint(params, joint, q, qdot, starting, duty, DT);
        if qdot == 0.0 && (q == limits.min || q == limits.max) {
            break;
        }
        if qdot.abs() > extreme.abs() {
            extreme = qdot;
        }
    }
    extreme
}

/// Gains for which a full-range sweep at `duty` peaks at `peak_pos` (positive
/// direction) and `peak_neg` (negative direction). Unlike the steady-map
/// calibration this accounts for the lag, which keeps the traced rate below the
/// steady rate near the limits where the lever arm shrinks fastest.
pub fn calibrate_sweep_gains(params: &MachineParams, joint: usize, peak_pos: f64, peak_neg: f64, duty: f64) -> DirectionGains {
    let mut p = params.clone();
    p.direction_gains[joint] = p.calibrate_gains(joint, peak_pos, peak_neg, duty);
    for _ in 0..50 {
        let pos = sweep_extreme(&p, joint, duty.abs());
        let neg = -sweep_extreme(&p, joint, -duty.abs());
        if ((pos - peak_pos) / peak_pos).abs() < 1e-6 && ((neg - peak_neg) / peak_neg).abs() < 1e-6 {
            break;
        }
        let g = &mut p.direction_gains[joint];
        g.positive *= peak_pos / pos;
        g.negative *= peak_neg / neg;
    }
    p.direction_gains[joint]
}

/// CSV `t, q1..q5, qd1..qd5, u1..u5, x, y, z`; row k carries the command issued
/// at state k (the final state, which has none, gets zeros).
pub fn trajectory_csv(params: &MachineParams, states: &[PlantState], commands: &[PwmCommand]) -> String {
    let mut out = String::from("t,q1,q2,q3,q4,q5,qd1,qd2,qd3,qd4,qd5,u1,u2,u3,u4,u5,x,y,z\n");
    for (k, s) in states.iter().enumerate() {
        let u = commands.get(k).copied().unwrap_or(PwmCommand::REST);
        let p = forward_kinematics(params, &s.joint.q).position;
        let mut fields = vec![s.time.to_string()];
        fields.extend(s.joint.q.iter().map(f64::to_string));
        fields.extend(s.joint.qdot.iter().map(f64::to_string));
        fields.extend(u.u.iter().map(u8::to_string));
        fields.extend([p.x, p.y, p.z].iter().map(f64::to_string));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine_model::JointLimits;

    fn mid_pose(p: &MachineParams) -> [f64; 5] {
        let mut q = p.joint_limits.map(|l| l.mid());
        q[LOCKED_JOINT] = p.q2_fixed_angle;
        q
    }

    #[test]
    fn decode_matches_command_conventions() {
        assert!((decode_pwm(80).unwrap() - 0.6299).abs() < 1e-4);
        assert!((decode_pwm(175).unwrap() + 0.6299).abs() < 1e-4);
        assert_eq!(decode_pwm(0).unwrap(), 0.0);
        assert_eq!(decode_pwm(255).unwrap(), 0.0);
        assert_eq!(decode_pwm(127).unwrap(), 1.0);
        assert_eq!(decode_pwm(128).unwrap(), -1.0);
        assert_eq!(decode_pwm(256), Err(PlantError::PwmOutOfRange(256)));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_duty(0.6299, 0.63), 80);
        assert_eq!(encode_duty(-0.6299, 0.63), 175);
        assert_eq!(encode_duty(0.0, 0.63), 0);
        assert_eq!(encode_duty(-0.0, 0.63), 0);
        assert_eq!(encode_duty(0.9, 0.63), 80, "magnitude clamps to the cap");
        assert_eq!(encode_duty(-1e-4, 0.63), 0, "tiny negative duty is rest, not 255");
    }

    #[test]
    fn decode_clamps_to_cap() {
        let cmd = PwmCommand { u: [127, 128, 80, 175, 3] };
        let d = cmd.duties(0.63);
        assert_eq!(d[0], 0.63);
        assert_eq!(d[1], -0.63);
        assert!((d[2] - 80.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn dead_zone_gives_zero_rate() {
        let p = MachineParams::default();
        for joint in 0..5 {
            for s in [0.0, 0.03, -0.05, 0.07, -0.07] {
                assert_eq!(steady_velocity(&p, joint, s, 0.3), 0.0);
            }
        }
        assert!(steady_velocity(&p, 4, 0.0709, 0.3) > 0.0);
    }

    #[test]
    fn default_tool_sweep_hits_measured_extrema() {
        let p = MachineParams::default();
        let pos = sweep_extreme(&p, 4, p.duty_cap);
        let neg = sweep_extreme(&p, 4, -p.duty_cap);
        assert!((pos - 0.24).abs() < 1e-3, "positive extreme {pos}");
        assert!((neg + 0.47).abs() < 1e-3, "negative extreme {neg}");
        // The lag keeps the trace below the steady peak at the limit.
        assert!(max_steady_speed(&p, 4) > 0.47);
    }

    #[test]
    fn lever_arm_modulates_rate() {
        let p = MachineParams::default();
        let l = p.joint_limits[3];
        let centre = steady_velocity(&p, 3, 0.5, l.mid());
        let edge = steady_velocity(&p, 3, 0.5, l.min + 0.01);
        assert!(edge > 1.5 * centre, "rate should grow as the lever arm shrinks");
        // The yaw drive has no crank.
        assert_eq!(steady_velocity(&p, 0, 0.5, -2.0), steady_velocity(&p, 0, 0.5, 2.0));
    }

    #[test]
    fn rest_command_keeps_plant_still() {
        let p = MachineParams::default();
        let s0 = PlantState::at_rest(mid_pose(&p));
        let traj = simulate_sequence(&p, &s0, &vec![PwmCommand::REST; 600]);
        assert_eq!(traj.len(), 601);
        assert_eq!(traj.last().unwrap().joint.q, s0.joint.q);
    }

    #[test]
    fn decaying_rate_without_command() {
        let p = MachineParams::default();
        let mut s = PlantState::at_rest(mid_pose(&p));
        s.joint.qdot[3] = 0.2;
        let traj = simulate_sequence(&p, &s, &vec![PwmCommand::REST; 40]);
        let rates: Vec<f64> = traj.iter().map(|s| s.joint.qdot[3]).collect();
        assert!(rates.windows(2).all(|w| w[1].abs() <= w[0].abs()));
        assert!(rates.last().unwrap().abs() < 1e-6);
    }

    #[test]
    fn empty_sequence_is_singleton() {
        let p = MachineParams::default();
        let s0 = PlantState::at_rest(mid_pose(&p));
        assert_eq!(simulate_sequence(&p, &s0, &[]), vec![s0]);
    }

    #[test]
    fn limits_clamp_position_and_blocked_rate() {
        let p = MachineParams::default();
        let mut q = mid_pose(&p);
        q[4] = p.joint_limits[4].max - 0.01;
        let s0 = PlantState::at_rest(q);
        let cmd = PwmCommand { u: [0, 0, 0, 0, 80] };
        let traj = simulate_sequence(&p, &s0, &vec![cmd; 60]);
        let last = traj.last().unwrap();
        assert_eq!(last.joint.q[4], p.joint_limits[4].max);
        assert_eq!(last.joint.qdot[4], 0.0);
    }

    #[test]
    fn locked_joint_never_moves() {
        let p = MachineParams::default();
        let s0 = PlantState::at_rest(mid_pose(&p));
        let traj = simulate_sequence(&p, &s0, &vec![PwmCommand { u: [80; 5] }; 40]);
        assert!(traj.iter().all(|s| s.joint.q[LOCKED_JOINT] == p.q2_fixed_angle));
    }

    #[test]
    fn rejects_bad_timestep() {
        let p = MachineParams::default();
        let s0 = PlantState::at_rest(mid_pose(&p));
        assert!(step_plant(&p, &s0, &PwmCommand::REST, 0.0).is_err());
    }

    /// Time at which the rate first covers 90% of the change from `from`
    /// toward the (configuration-dependent) steady target.
    fn rise_time(p: &MachineParams, start: PlantState, joint: usize, duty: f64, dt: f64) -> f64 {
        let from = start.joint.qdot[joint];
        let mut duties = [0.0; 5];
        duties[joint] = duty;
        let mut s = start;
        loop {
            let target = steady_velocity(p, joint, duty, s.joint.q[joint]);
            if (s.joint.qdot[joint] - from).abs() >= 0.9 * (target - from).abs() {
                return s.time - start.time;
            }
            s = step_plant_duty(p, &s, &duties, dt);
        }
    }

    fn step_plant_duty(p: &MachineParams, s: &PlantState, duties: &[f64; 5], dt: f64) -> PlantState {
        let mut next = *s;
        for j in 0..5 {
            if j == LOCKED_JOINT {
                continue;
            }
            let (q, qd, st) = step_joint(p, j, s.joint.q[j], s.joint.qdot[j], s.starting[j], duties[j], dt);
            next.joint.q[j] = q;
            next.joint.qdot[j] = qd;
            next.starting[j] = st;
        }
        next.time += dt;
        next
    }

    #[test]
    fn response_is_slow_from_rest_and_fast_when_moving() {
        let p = MachineParams::default();
        let dt = 1e-4;
        let from_rest = rise_time(&p, PlantState::at_rest(mid_pose(&p)), 4, 0.63, dt);
        assert!((from_rest - 0.10f64.ln().abs() * p.tau_rest).abs() < 0.01, "{from_rest}");

        let mut moving = PlantState::at_rest(mid_pose(&p));
        let mut duties = [0.0; 5];
        duties[4] = 0.35;
        for _ in 0..20_000 {
            moving = step_plant_duty(&p, &moving, &duties, dt);
        }
        assert!(!moving.starting[4]);
        let from_motion = rise_time(&p, moving, 4, 0.63, dt);
        assert!((from_motion - 10f64.ln() * p.tau_move).abs() < 0.01, "{from_motion}");
    }

    #[test]
    fn csv_has_one_row_per_state() {
        let p = MachineParams::default();
        let s0 = PlantState::at_rest(mid_pose(&p));
        let cmds = vec![PwmCommand { u: [10, 0, 20, 30, 40] }; 3];
        let csv = trajectory_csv(&p, &simulate_sequence(&p, &s0, &cmds), &cmds);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 19);
        assert!(lines[1].contains(",10,0,20,30,40,"));
    }

    proptest::proptest! {
        #[test]
        fn pwm_round_trip(s in -0.63f64..0.63) {
            let back = decode_pwm(encode_duty(s, 0.63) as u32).unwrap();
            proptest::prop_assert!((back - s).abs() <= 0.5 / 127.0 + 1e-12);
        }

        #[test]
        fn gravity_assisted_direction_is_faster(q in -0.8f64..1.5) {
            let p = MachineParams::default();
            let down = steady_velocity(&p, 4, -0.63, q);
            let up = steady_velocity(&p, 4, 0.63, q);
            proptest::prop_assert!(down.abs() > up.abs());
        }

        #[test]
        fn duty_to_cylinder_speed_ignores_configuration(s in -1.0f64..1.0, qa in -0.5f64..1.6, qb in -0.5f64..1.6) {
            let p = MachineParams::default();
            let va = steady_velocity(&p, 2, s, qa) * p.lever_arm(2, qa);
            let vb = steady_velocity(&p, 2, s, qb) * p.lever_arm(2, qb);
            proptest::prop_assert!((va - vb).abs() < 1e-12);
        }

        #[test]
        fn joints_are_decoupled(u in proptest::array::uniform5(0u8..=255), steps in 1usize..40) {
            let p = MachineParams::default();
            let s0 = PlantState::at_rest(mid_pose(&p));
            let together = simulate_sequence(&p, &s0, &vec![PwmCommand { u }; steps]);
            for j in [0, 2, 3, 4] {
                let mut alone = [0u8; 5];
                alone[j] = u[j];
                let solo = simulate_sequence(&p, &s0, &vec![PwmCommand { u: alone }; steps]);
                for (a, b) in together.iter().zip(&solo) {
                    proptest::prop_assert_eq!(a.joint.q[j], b.joint.q[j]);
                    proptest::prop_assert_eq!(a.joint.qdot[j], b.joint.qdot[j]);
                }
            }
        }

        #[test]
        fn rate_bounded_and_position_in_limits(u in proptest::collection::vec(proptest::array::uniform5(0u8..=255), 1..80)) {
            let p = MachineParams::default();
            let cmds: Vec<PwmCommand> = u.into_iter().map(|u| PwmCommand { u }).collect();
            let traj = simulate_sequence(&p, &PlantState::at_rest(mid_pose(&p)), &cmds);
            for s in &traj {
                for j in 0..5 {
                    let l: JointLimits = p.joint_limits[j];
                    proptest::prop_assert!(l.contains(s.joint.q[j]));
                    proptest::prop_assert!(s.joint.qdot[j].abs() <= max_steady_speed(&p, j) + 1e-12);
                }
            }
            let replay = simulate_sequence(&p, &PlantState::at_rest(mid_pose(&p)), &cmds);
            proptest::prop_assert_eq!(traj, replay);
        }
    }
}

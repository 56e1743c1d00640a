//! WebAssembly bindings for the demo page in `www/`. Every function returns
//! a JSON string so the page needs no generated TypeScript types.

use hydroarm::experiments::{make_axis_profile, run_taskspace_eval, Axis, StartPreset, TaskController};
use hydroarm::hydraulic_plant::{step_joint, CONTROL_DT};
use hydroarm::jacobian_ctrl::JacCtrlConfig;
use hydroarm::machine_model::{active_jacobian, joint_positions, manipulability, MachineParams, ACTIVE_JOINTS, NUM_JOINTS};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Pose {
    /// Boom pivot, boom end, arm end and tool tip as (x, y, z).
    points: Vec<[f64; 3]>,
    manipulability: f64,
    /// `q` after clamping into the joint limits.
    q: [f64; NUM_JOINTS],
}

#[derive(Serialize)]
struct Step {
    t: Vec<f64>,
    qdot: Vec<f64>,
    target: f64,
    t90: Option<f64>,
}

#[derive(Serialize)]
struct Track {
    t: Vec<f64>,
    desired: Vec<[f64; 3]>,
    actual: Vec<[f64; 3]>,
    lambda: Vec<f64>,
    max_offaxis_drift: f64,
    post_reversal_rms: f64,
    peak_joint_acceleration: f64,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

fn pose(params: &MachineParams, q: &[f64]) -> Result<Pose, String> {
    if q.len() != NUM_JOINTS {
        return Err(format!("expected {NUM_JOINTS} joint angles, got {}", q.len()));
    }
    let mut qq = [0.0; NUM_JOINTS];
    for (j, v) in q.iter().enumerate() {
        qq[j] = params.joint_limits[j].clamp(*v);
    }
    let points = joint_positions(params, &qq).iter().map(|p| [p.x, p.y, p.z]).collect();
    Ok(Pose { points, manipulability: manipulability(&active_jacobian(params, &qq)), q: qq })
}

/// Joint positions and manipulability for joint angles `q` (5 values).
#[wasm_bindgen]
pub fn arm_pose(q: &[f64]) -> Result<String, JsError> {
    pose(&MachineParams::default(), q).map(|p| to_json(&p)).map_err(|e| JsError::new(&e))
}

fn step(params: &MachineParams, joint: usize, duty: f64, from_motion: bool, seconds: f64) -> Result<Step, String> {
    if !ACTIVE_JOINTS.contains(&joint) {
        return Err(format!("joint {joint} is not powered"));
    }
    let duty = duty.clamp(-1.0, 1.0);
    let mut q = params.joint_limits[joint].mid();
    let (mut qdot, mut starting) = (0.0, true);
    if from_motion {
        // Settle at half the command first.
        for _ in 0..40 {
            (q, qdot, starting) = step_joint(params, joint, q, qdot, starting, 0.5 * duty, CONTROL_DT);
        }
    }
    let v0 = qdot;
    // Fine substeps so the curve shows the lag shape rather than 20 Hz stairs.
    let dt = CONTROL_DT / 10.0;
    let n = (seconds.clamp(0.1, 10.0) / dt).round() as usize;
    let (mut t, mut v) = (vec![0.0], vec![qdot]);
    for k in 1..=n {
        (q, qdot, starting) = step_joint(params, joint, q, qdot, starting, duty, dt);
        t.push(k as f64 * dt);
        v.push(qdot);
    }
    let target = hydroarm::hydraulic_plant::steady_velocity(params, joint, duty, q);
    let t90 = (target != v0).then(|| v.iter().position(|&x| (x - v0) / (target - v0) >= 0.9).map(|i| t[i])).flatten();
    Ok(Step { t, qdot: v, target, t90 })
}

/// Rate response of one powered joint (0, 2, 3 or 4) to a duty step,
/// from rest or from steady motion at half the duty.
#[wasm_bindgen]
pub fn step_response(joint: usize, duty: f64, from_motion: bool, seconds: f64) -> Result<String, JsError> {
    step(&MachineParams::default(), joint, duty, from_motion, seconds).map(|s| to_json(&s)).map_err(|e| JsError::new(&e))
}

fn track(params: &MachineParams, preset: &str, axis: &str, speed: f64, k: f64) -> Result<Track, String> {
    let preset: StartPreset = preset.parse().map_err(|e: hydroarm::experiments::ExperimentError| e.to_string())?;
    let axis: Axis = axis.parse().map_err(|e: hydroarm::experiments::ExperimentError| e.to_string())?;
    let profile = make_axis_profile(axis, speed.clamp(0.0, 0.5), 8.0).map_err(|e| e.to_string())?;
    let cfg = JacCtrlConfig { k, ..JacCtrlConfig::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    let (record, m) =
        run_taskspace_eval(params, &TaskController::Jacobian(cfg), &profile, preset.q(), preset.as_str()).map_err(|e| e.to_string())?;
    let start = record.rows.first().map(|r| r.position).unwrap_or_default();
    let mut integral = start;
    let mut desired = Vec::with_capacity(record.rows.len());
    for (i, _) in record.rows.iter().enumerate() {
        if let Some(prev) = i.checked_sub(1).map(|k| &record.rows[k]) {
            for a in 0..3 {
                integral[a] += prev.v_desired[a] * CONTROL_DT;
            }
        }
        desired.push(integral);
    }
    Ok(Track {
        t: record.rows.iter().map(|r| r.t).collect(),
        desired,
        actual: record.rows.iter().map(|r| r.position).collect(),
        lambda: record.rows.iter().map(|r| r.lambda).collect(),
        max_offaxis_drift: m.max_offaxis_drift,
        post_reversal_rms: m.post_reversal_rms,
        peak_joint_acceleration: m.peak_joint_acceleration,
    })
}

/// Closed-loop Jacobian + PID tracking of an 8 s axis profile on the plant.
/// `preset`: mid_workspace | near_extension | low_boom; `axis`: x | y | z.
#[wasm_bindgen]
pub fn dls_track(preset: &str, axis: &str, speed: f64, k: f64) -> Result<String, JsError> {
    track(&MachineParams::default(), preset, axis, speed, k).map(|t| to_json(&t)).map_err(|e| JsError::new(&e))
}

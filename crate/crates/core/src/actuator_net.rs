//! Data-driven actuator model: excitation signals, per-joint dataset
//! collection from the plant, windowed MLP training and closed-loop rollout.
//!
//! The model for joint `i` maps a 0.6 s window (13 samples at 20 Hz) of joint
//! position, joint rate and signed duty to the joint rate one tick later.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulic_plant::{step_plant, PlantState, PwmCommand, CONTROL_DT};
use crate::machine_model::{JointState, MachineParams, ACTIVE_JOINTS, LOCKED_JOINT, NUM_JOINTS};
use crate::neural::{mse, Activation, AdamState, Mlp, MlpSpec, NeuralError, Normalizer, WeightFile};

/// Samples per stream: t−0.6 s through t inclusive.
pub const WINDOW_LEN: usize = 13;
/// Model input width: q, q̇ and duty streams.
pub const WINDOW_FEATURES: usize = 3 * WINDOW_LEN;

#[derive(Debug, Error)]
pub enum ActuatorError {
    #[error("dataset has {0} samples, need at least {1}")]
    DatasetTooSmall(usize, usize),
    #[error("non-finite training loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("malformed window: {0}")]
    MalformedWindow(String),
    #[error("no model for joint {0}")]
    MissingModel(usize),
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One joint's 0.6 s history, oldest sample first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorWindow {
    pub q: [f64; WINDOW_LEN],
    pub qdot: [f64; WINDOW_LEN],
    pub duty: [f64; WINDOW_LEN],
}

impl ActuatorWindow {
    pub fn at_rest(q: f64) -> Self {
        Self { q: [q; WINDOW_LEN], qdot: [0.0; WINDOW_LEN], duty: [0.0; WINDOW_LEN] }
    }

    /// Streams concatenated as `[q…, q̇…, duty…]`.
    pub fn features(&self) -> [f64; WINDOW_FEATURES] {
        let mut out = [0.0; WINDOW_FEATURES];
        out[..WINDOW_LEN].copy_from_slice(&self.q);
        out[WINDOW_LEN..2 * WINDOW_LEN].copy_from_slice(&self.qdot);
        out[2 * WINDOW_LEN..].copy_from_slice(&self.duty);
        out
    }

    pub fn validate(&self) -> Result<(), ActuatorError> {
        if self.features().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ActuatorError::MalformedWindow("non-finite sample".into()))
        }
    }
}

fn shift_in(buf: &mut [f64; WINDOW_LEN], value: f64) {
    buf.copy_within(1.., 0);
    buf[WINDOW_LEN - 1] = value;
}

/// Rolling per-joint history. Positions and rates run up to the current tick;
/// duties run up to the previous tick (the current command is not chosen yet).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistory {
    pub q: [f64; WINDOW_LEN],
    pub qdot: [f64; WINDOW_LEN],
    pub past_duty: [f64; WINDOW_LEN],
}

impl JointHistory {
    pub fn at_rest(q: f64) -> Self {
        Self { q: [q; WINDOW_LEN], qdot: [0.0; WINDOW_LEN], past_duty: [0.0; WINDOW_LEN] }
    }

    /// Model input once `duty` is chosen for the current tick.
    pub fn model_window(&self, duty: f64) -> ActuatorWindow {
        let mut d = self.past_duty;
        shift_in(&mut d, duty);
        ActuatorWindow { q: self.q, qdot: self.qdot, duty: d }
    }

    /// Record the duty applied at the current tick and the state it produced.
    pub fn advance(&mut self, duty: f64, q_next: f64, qdot_next: f64) {
        shift_in(&mut self.past_duty, duty);
        shift_in(&mut self.q, q_next);
        shift_in(&mut self.qdot, qdot_next);
    }

    pub fn current_q(&self) -> f64 {
        self.q[WINDOW_LEN - 1]
    }

    pub fn current_qdot(&self) -> f64 {
        self.qdot[WINDOW_LEN - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SegmentTag {
    /// Sine excitation above the dead zone.
    Excite,
    /// Rest or dead-zone command between excitation segments.
    Hold,
    /// Reposition to a random point of the range; excluded from training.
    Return,
}

impl SegmentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentTag::Excite => "EXCITE",
            SegmentTag::Hold => "HOLD",
            SegmentTag::Return => "RETURN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitationConfig {
    /// Sine frequency range (Hz).
    pub freq_range: (f64, f64),
    /// Peak duty range.
    pub amp_range: (f64, f64),
    /// Smallest duty magnitude emitted during excitation.
    pub dead_zone_floor: f64,
    pub duty_cap: f64,
    /// Length of a sine segment, in periods.
    pub periods_range: (f64, f64),
    /// Rest between segments (s).
    pub hold_range: (f64, f64),
    /// Largest duty used while repositioning.
    pub return_duty: f64,
    /// Chance of repositioning to a random point after a completed segment
    /// (a limit hit always repositions).
    pub reposition_probability: f64,
    pub seed: u64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            freq_range: (0.05, 0.5),
            amp_range: (0.15, 0.63),
            dead_zone_floor: 0.075,
            duty_cap: 0.63,
            periods_range: (0.5, 1.5),
            hold_range: (0.5, 2.0),
            return_duty: 0.4,
            reposition_probability: 0.3,
            seed: 0,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self, params: &MachineParams) -> Result<(), String> {
        if self.dead_zone_floor < params.dead_zone {
            return Err("dead_zone_floor below the dead zone".into());
        }
        if !(self.amp_range.0 >= self.dead_zone_floor && self.amp_range.0 <= self.amp_range.1 && self.amp_range.1 <= self.duty_cap) {
            return Err("amplitude range must lie within [dead_zone_floor, duty_cap]".into());
        }
        if !(self.freq_range.0 > 0.0 && self.freq_range.0 <= self.freq_range.1) {
            return Err("invalid frequency range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Phase {
    Hold { remaining: usize, duty: f64 },
    Excite { tick: usize, length: usize, freq: f64, amp: f64, sign: f64 },
    Return { target: f64 },
}

/// Closed-loop excitation source for one joint. After a limit hit the joint is
/// driven to a random point of its range, so asymmetric joints (which drift
/// toward their faster side) still get covered end to end.
#[derive(Debug, Clone)]
pub struct ExcitationGenerator {
    cfg: ExcitationConfig,
    joint: usize,
    dead_zone: f64,
    limits: (f64, f64),
    phase: Phase,
    rng: ChaCha8Rng,
}

impl ExcitationGenerator {
    pub fn new(cfg: &ExcitationConfig, params: &MachineParams, joint: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (joint as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let phase = Self::new_hold(cfg, params.dead_zone, &mut rng);
        let l = params.joint_limits[joint];
        Self { cfg: cfg.clone(), joint, dead_zone: params.dead_zone, limits: (l.min, l.max), phase, rng }
    }

    fn new_hold(cfg: &ExcitationConfig, dead_zone: f64, rng: &mut ChaCha8Rng) -> Phase {
        let seconds = rng.random_range(cfg.hold_range.0..=cfg.hold_range.1);
        let duty = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-dead_zone..=dead_zone) };
        Phase::Hold { remaining: (seconds / CONTROL_DT).round().max(1.0) as usize, duty }
    }

    /// The first half-wave heads toward a random point of the range, which
    /// keeps the visited positions spread out.
    fn new_excite(&mut self, q: f64) -> Phase {
        let (lo, hi) = self.limits;
        let aim = self.rng.random_range(lo..=hi);
        let c = &self.cfg;
        let freq = self.rng.random_range(c.freq_range.0..=c.freq_range.1);
        let amp = self.rng.random_range(c.amp_range.0..=c.amp_range.1);
        let periods = self.rng.random_range(c.periods_range.0..=c.periods_range.1);
        let sign = if aim >= q { 1.0 } else { -1.0 };
        let length = ((periods / freq) / CONTROL_DT).round().max(1.0) as usize;
        Phase::Excite { tick: 0, length, freq, amp, sign }
    }

    fn random_target(&mut self) -> f64 {
        let (lo, hi) = self.limits;
        let margin = 0.05 * (hi - lo);
        self.rng.random_range(lo + margin..=hi - margin)
    }

    pub fn joint(&self) -> usize {
        self.joint
    }

    fn at_limit(&self, q: f64) -> bool {
        q <= self.limits.0 || q >= self.limits.1
    }

    /// Duty for the current tick given the joint's measured position.
    pub fn next_duty(&mut self, q: f64) -> (f64, SegmentTag) {
        let at_limit = self.at_limit(q);
        loop {
            match &mut self.phase {
                Phase::Hold { remaining, duty } => {
                    if *remaining == 0 {
                        self.phase = self.new_excite(q);
                        continue;
                    }
                    *remaining -= 1;
                    return (*duty, SegmentTag::Hold);
                }
                Phase::Excite { tick, length, freq, amp, sign } => {
                    let finished = *tick >= *length;
                    if (*tick > 0 && at_limit) || (finished && self.rng.random_bool(self.cfg.reposition_probability)) {
                        self.phase = Phase::Return { target: self.random_target() };
                        continue;
                    }
                    if finished {
                        self.phase = Self::new_hold(&self.cfg, self.dead_zone, &mut self.rng);
                        continue;
                    }
                    let phase = 2.0 * std::f64::consts::PI * *freq * (*tick as f64) * CONTROL_DT;
                    let wave = phase.sin();
                    let direction = if wave < 0.0 { -*sign } else { *sign };
                    let floor = self.cfg.dead_zone_floor;
                    let duty = direction * (floor + (*amp - floor) * wave.abs());
                    *tick += 1;
                    return (duty, SegmentTag::Excite);
                }
                Phase::Return { target } => {
                    let error = *target - q;
                    if error.abs() < 0.02 {
                        self.phase = Self::new_hold(&self.cfg, self.dead_zone, &mut self.rng);
                        continue;
                    }
                    let magnitude = (2.0 * error.abs()).clamp(self.dead_zone + 0.05, self.cfg.return_duty);
                    return (magnitude.copysign(error), SegmentTag::Return);
                }
            }
        }
    }
}

/// Home configuration used while collecting data: every joint at mid-range.
pub fn home_configuration(params: &MachineParams) -> [f64; NUM_JOINTS] {
    let mut q = params.joint_limits.map(|l| l.mid());
    q[0] = 0.0;
    q[LOCKED_JOINT] = params.q2_fixed_angle;
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub t: f64,
    pub q: f64,
    pub qdot: f64,
    /// Duty applied at this tick (after PWM quantisation).
    pub duty: f64,
    pub tag: SegmentTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    pub joint: usize,
    pub rows: Vec<DatasetRow>,
}

/// Run the excitation closed loop against the plant for `ticks` ticks.
/// Returns the tagged duty sequence and the states visited (one more than duties).
pub fn generate_excitation(
    params: &MachineParams,
    cfg: &ExcitationConfig,
    joint: usize,
    start: &PlantState,
    ticks: usize,
) -> (Vec<(f64, SegmentTag)>, Vec<PlantState>) {
    let mut generator = ExcitationGenerator::new(cfg, params, joint);
    let mut state = *start;
    let mut duties = Vec::with_capacity(ticks);
    let mut states = Vec::with_capacity(ticks + 1);
    states.push(state);
    for _ in 0..ticks {
        let (duty, tag) = generator.next_duty(state.joint.q[joint]);
        let mut duties_full = [0.0; NUM_JOINTS];
        duties_full[joint] = duty;
        let command = PwmCommand::from_duties(&duties_full, cfg.duty_cap);
        state = step_plant(params, &state, &command, CONTROL_DT).expect("positive period");
        duties.push((duty, tag));
        states.push(state);
    }
    (duties, states)
}

/// Excite one joint for `duration` seconds with the others held at home.
pub fn collect_joint_dataset(params: &MachineParams, cfg: &ExcitationConfig, joint: usize, duration: f64) -> JointDataset {
    let ticks = (duration / CONTROL_DT).round() as usize;
    let start = PlantState::at_rest(home_configuration(params));
    let (duties, states) = generate_excitation(params, cfg, joint, &start, ticks);
    let rows = duties
        .iter()
        .zip(&states)
        .map(|(&(duty, tag), s)| {
            let mut full = [0.0; NUM_JOINTS];
            full[joint] = duty;
            DatasetRow {
                t: s.time,
                q: s.joint.q[joint],
                qdot: s.joint.qdot[joint],
                duty: PwmCommand::from_duties(&full, cfg.duty_cap).duties(params.duty_cap)[joint],
                tag,
            }
        })
        .collect();
    JointDataset { joint, rows }
}

/// Datasets for every actuated joint (q2 is locked).
pub fn collect_dataset(params: &MachineParams, cfg: &ExcitationConfig, duration_per_joint: f64) -> Vec<JointDataset> {
    ACTIVE_JOINTS.iter().map(|&j| collect_joint_dataset(params, cfg, j, duration_per_joint)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSample {
    pub input: ActuatorWindow,
    /// Joint rate one tick after the window's last sample.
    pub target: f64,
}

impl JointDataset {
    /// Training samples: windows of 13 consecutive non-RETURN rows and the next row's rate.
    pub fn samples(&self) -> Vec<ActuatorSample> {
        let rows = &self.rows;
        let mut out = Vec::new();
        for end in WINDOW_LEN - 1..rows.len().saturating_sub(1) {
            let span = &rows[end + 1 - WINDOW_LEN..=end];
            if span.iter().any(|r| r.tag == SegmentTag::Return) {
                continue;
            }
            let mut w = ActuatorWindow::at_rest(0.0);
            for (k, r) in span.iter().enumerate() {
                w.q[k] = r.q;
                w.qdot[k] = r.qdot;
                w.duty[k] = r.duty;
            }
            out.push(ActuatorSample { input: w, target: rows[end + 1].qdot });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }

    pub fn from_csv(joint: usize, text: &str) -> Result<Self, ActuatorError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| ActuatorError::Parse(e.to_string()))?;
        if header != vec!["t", "q", "qdot", "duty", "tag"] {
            return Err(ActuatorError::Parse("unexpected header".into()));
        }
        let rows = r.deserialize().collect::<Result<Vec<DatasetRow>, _>>().map_err(|e| ActuatorError::Parse(e.to_string()))?;
        Ok(Self { joint, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuatorTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    /// Margin added on each side of the normalised target range.
    pub range_margin: f64,
    /// Std of Gaussian noise added to the normalised q and q̇ streams of each
    /// minibatch. Keeps self-fed rollouts from locking onto their own history.
    pub input_noise: f64,
    /// Learning rate at the last epoch as a fraction of `lr` (linear decay).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for ActuatorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 150,
            batch_size: 32,
            lr: 5e-3,
            holdout_fraction: 0.1,
            range_margin: 0.1,
            input_noise: 0.2,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

pub const MIN_TRAINING_SAMPLES: usize = 1000;

/// Learned rate model for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorModel {
    pub joint: usize,
    pub mlp: Mlp,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    /// Normalised target interval the sigmoid output is stretched over.
    pub output_range: (f64, f64),
}

impl ActuatorModel {
    fn squash(&self, a: f64) -> f64 {
        self.output_range.0 + (self.output_range.1 - self.output_range.0) * a
    }

    /// Joint rate one tick ahead (rad/s).
    pub fn predict_next_velocity(&self, window: &ActuatorWindow) -> Result<f64, ActuatorError> {
        window.validate()?;
        let mut x = window.features();
        self.input_norm.normalize_in_place(&mut x);
        let a = self.mlp.predict(&x)?[0];
        Ok(self.target_norm.denormalize(&[self.squash(a)])[0])
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile::from_mlp(&self.mlp)
            .with_normalizer("input", &self.input_norm)
            .with_normalizer("target", &self.target_norm)
            .with_metadata("joint", self.joint.into())
            .with_metadata("output_range", serde_json::json!([self.output_range.0, self.output_range.1]))
            .with_metadata("input_layout", "q[13],qdot[13],duty[13] oldest first".into())
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self, ActuatorError> {
        let corrupt = |m: &str| ActuatorError::Neural(NeuralError::Corrupt(m.into()));
        let joint = file.metadata.get("joint").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("missing joint"))? as usize;
        let range = file
            .metadata
            .get("output_range")
            .and_then(|v| v.as_array())
            .and_then(|a| Some((a.first()?.as_f64()?, a.get(1)?.as_f64()?)))
            .ok_or_else(|| corrupt("missing output_range"))?;
        let norm = |name: &str| file.normalizers.get(name).cloned().ok_or_else(|| corrupt(&format!("missing {name} normalizer")));
        let model = Self { joint, mlp: file.to_mlp()?, input_norm: norm("input")?, target_norm: norm("target")?, output_range: range };
        if model.mlp.spec().input_size() != WINDOW_FEATURES || model.mlp.spec().output_size() != 1 {
            return Err(corrupt("actuator model must map 39 inputs to 1 output"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ActuatorError> {
        Ok(crate::neural::save_weights(path, &self.to_weight_file())?)
    }

    pub fn load(path: &Path) -> Result<Self, ActuatorError> {
        Self::from_weight_file(&crate::neural::load_weights(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean training MSE in normalised units.
    pub train_mse: f64,
    pub holdout_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<EpochLoss>,
    /// Held-out one-step RMSE (rad/s).
    pub holdout_rmse: f64,
    pub holdout_target_std: f64,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

fn feature_matrix(samples: &[&ActuatorSample], norm: &Normalizer) -> Array2<f64> {
    let mut x = Array2::zeros((samples.len(), WINDOW_FEATURES));
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(samples) {
        let mut f = s.input.features();
        norm.normalize_in_place(&mut f);
        row.assign(&ndarray::ArrayView1::from(&f[..]));
    }
    x
}

/// Fit a 39→hidden→1 ReLU network with a sigmoid output stretched over the
/// normalised target range. The last `holdout_fraction` of samples (in time
/// order) is held out.
/// Chronological split: the last `fraction` of samples (at least one) is held out.
pub fn holdout_split(samples: &[ActuatorSample], fraction: f64) -> (&[ActuatorSample], &[ActuatorSample]) {
    let held = ((samples.len() as f64 * fraction).round() as usize).max(1).min(samples.len());
    samples.split_at(samples.len() - held)
}

/// Root-mean-square one-step velocity error of `model` over `samples` (rad/s).
pub fn one_step_rmse(model: &ActuatorModel, samples: &[ActuatorSample]) -> Result<f64, ActuatorError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sq = 0.0;
    for s in samples {
        let e = model.predict_next_velocity(&s.input)? - s.target;
        sq += e * e;
    }
    Ok((sq / samples.len() as f64).sqrt())
}

pub fn train_actuator_model(
    joint: usize,
    samples: &[ActuatorSample],
    cfg: &ActuatorTrainConfig,
) -> Result<(ActuatorModel, TrainReport), ActuatorError> {
    if samples.len() < MIN_TRAINING_SAMPLES {
        return Err(ActuatorError::DatasetTooSmall(samples.len(), MIN_TRAINING_SAMPLES));
    }
    let (train, holdout) = holdout_split(samples, cfg.holdout_fraction);

    let mut input_norm = Normalizer::new(WINDOW_FEATURES);
    let features: Vec<[f64; WINDOW_FEATURES]> = train.iter().map(|s| s.input.features()).collect();
    input_norm.update(features.iter().map(|f| f.as_slice()));
    let mut target_norm = Normalizer::new(1);
    target_norm.update(train.iter().map(|s| std::slice::from_ref(&s.target)));

    let normalized_targets: Vec<f64> = train.iter().map(|s| target_norm.normalize(&[s.target])[0]).collect();
    let lo = normalized_targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = normalized_targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = cfg.range_margin * (hi - lo).max(1e-6);
    let output_range = (lo - pad, hi + pad);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (joint as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    let mut sizes = vec![WINDOW_FEATURES];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mlp = Mlp::new(MlpSpec::new(sizes, Activation::Relu, Activation::Sigmoid), &mut rng)?;
    let mut model = ActuatorModel { joint, mlp, input_norm, target_norm, output_range };
    let mut adam = AdamState::for_mlp(&model.mlp, cfg.lr);

    let train_refs: Vec<&ActuatorSample> = train.iter().collect();
    let holdout_refs: Vec<&ActuatorSample> = holdout.iter().collect();
    let x_train = feature_matrix(&train_refs, &model.input_norm);
    let y_train = Array2::from_shape_vec((train.len(), 1), normalized_targets).expect("column");
    let x_hold = feature_matrix(&holdout_refs, &model.input_norm);
    let y_hold = Array2::from_shape_fn((holdout.len(), 1), |(i, _)| model.target_norm.normalize(&[holdout[i].target])[0]);

    let span = output_range.1 - output_range.0;
    let holdout_mse = |m: &ActuatorModel| -> Result<f64, ActuatorError> {
        let (a, _) = m.mlp.forward(x_hold.view())?;
        let pred = a.mapv(|v| m.squash(v));
        Ok(mse(pred.view(), y_hold.view()).0)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        adam.lr = cfg.lr * (1.0 - progress * (1.0 - cfg.final_lr_fraction));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut xb = x_train.select(Axis(0), batch);
            if cfg.input_noise > 0.0 {
                let noise = Normal::new(0.0, cfg.input_noise).expect("finite std");
                for mut row in xb.axis_iter_mut(Axis(0)) {
                    for v in row.iter_mut().take(2 * WINDOW_LEN) {
                        *v += noise.sample(&mut rng);
                    }
                }
            }
            let yb = y_train.select(Axis(0), batch);
            let (a, cache) = model.mlp.forward(xb.view())?;
            let pred = a.mapv(|v| model.squash(v));
            let (loss, grad_pred) = mse(pred.view(), yb.view());
            if !loss.is_finite() {
                return Err(ActuatorError::NonFiniteLoss(epoch));
            }
            total += loss * batch.len() as f64;
            let grad_a = grad_pred * span;
            let (grads, _) = model.mlp.backward(&cache, grad_a.view())?;
            adam.step_mlp(&mut model.mlp, &grads)?;
        }
        let train_mse = total / train.len() as f64;
        losses.push(EpochLoss { epoch, train_mse, holdout_mse: holdout_mse(&model)? });
    }

    let holdout_rmse = one_step_rmse(&model, holdout)?;
    let mean = holdout.iter().map(|s| s.target).sum::<f64>() / holdout.len() as f64;
    let holdout_target_std = (holdout.iter().map(|s| (s.target - mean).powi(2)).sum::<f64>() / holdout.len() as f64).sqrt();
    let report = TrainReport { losses, holdout_rmse, holdout_target_std, train_samples: train.len(), holdout_samples: holdout.len() };
    Ok((model, report))
}

/// Learned models for the actuated joints.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorModelSet {
    models: [Option<ActuatorModel>; NUM_JOINTS],
}

impl ActuatorModelSet {
    pub fn new(models: Vec<ActuatorModel>) -> Result<Self, ActuatorError> {
        let mut slots: [Option<ActuatorModel>; NUM_JOINTS] = Default::default();
        for m in models {
            let j = m.joint;
            slots[j] = Some(m);
        }
        for j in ACTIVE_JOINTS {
            if slots[j].is_none() {
                return Err(ActuatorError::MissingModel(j));
            }
        }
        Ok(Self { models: slots })
    }

    pub fn model(&self, joint: usize) -> Option<&ActuatorModel> {
        self.models[joint].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActuatorModel> {
        self.models.iter().flatten()
    }

    pub fn file_name(joint: usize) -> String {
        format!("actuator_joint{}.json", joint + 1)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, ActuatorError> {
        let mut models = Vec::new();
        for j in ACTIVE_JOINTS {
            let path = dir.join(Self::file_name(j));
            if !path.exists() {
                return Err(ActuatorError::MissingModel(j));
            }
            models.push(ActuatorModel::load(&path)?);
        }
        Self::new(models)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), ActuatorError> {
        for m in self.iter() {
            m.save(&dir.join(Self::file_name(m.joint)))?;
        }
        Ok(())
    }
}

/// Something that turns PWM commands into joint motion at 20 Hz.
pub trait JointSimulator {
    fn joint_state(&self) -> JointState;
    fn step(&mut self, command: &PwmCommand) -> Result<JointState, ActuatorError>;
}

/// The synthetic plant behind the [`JointSimulator`] interface.
#[derive(Debug, Clone)]
pub struct PlantSimulator<'a> {
    pub params: &'a MachineParams,
    pub state: PlantState,
}

impl<'a> PlantSimulator<'a> {
    pub fn new(params: &'a MachineParams, q0: [f64; NUM_JOINTS]) -> Self {
        Self { params, state: PlantState::at_rest(q0) }
    }
}

impl JointSimulator for PlantSimulator<'_> {
    fn joint_state(&self) -> JointState {
        self.state.joint
    }

    fn step(&mut self, command: &PwmCommand) -> Result<JointState, ActuatorError> {
        self.state = step_plant(self.params, &self.state, command, CONTROL_DT).expect("positive period");
        Ok(self.state.joint)
    }
}

/// Kinematic simulation driven by the learned actuator models: predicted rates
/// are integrated into positions and fed back into the windows.
#[derive(Debug, Clone)]
pub struct LearnedSimulator<'a> {
    pub params: &'a MachineParams,
    pub models: &'a ActuatorModelSet,
    pub state: JointState,
    pub histories: [JointHistory; NUM_JOINTS],
}

impl<'a> LearnedSimulator<'a> {
    /// Starts at rest at `q0` with 13 ticks of rest history.
    pub fn new(params: &'a MachineParams, models: &'a ActuatorModelSet, q0: [f64; NUM_JOINTS]) -> Self {
        Self { params, models, state: JointState::at_rest(q0), histories: q0.map(JointHistory::at_rest) }
    }

    pub fn with_histories(params: &'a MachineParams, models: &'a ActuatorModelSet, histories: [JointHistory; NUM_JOINTS]) -> Self {
        let mut state = JointState::at_rest([0.0; NUM_JOINTS]);
        for j in 0..NUM_JOINTS {
            state.q[j] = histories[j].current_q();
            state.qdot[j] = histories[j].current_qdot();
        }
        Self { params, models, state, histories }
    }
}

/// One learned step for a single joint: returns `(q_next, qdot_next)`.
pub fn learned_joint_step(
    params: &MachineParams,
    model: &ActuatorModel,
    history: &JointHistory,
    duty: f64,
) -> Result<(f64, f64), ActuatorError> {
    let mut qdot = model.predict_next_velocity(&history.model_window(duty))?;
    let limits = params.joint_limits[model.joint];
    let mut q = history.current_q() + qdot * CONTROL_DT;
    if q >= limits.max {
        q = limits.max;
        qdot = qdot.min(0.0);
    } else if q <= limits.min {
        q = limits.min;
        qdot = qdot.max(0.0);
    }
    Ok((q, qdot))
}

impl JointSimulator for LearnedSimulator<'_> {
    fn joint_state(&self) -> JointState {
        self.state
    }

    fn step(&mut self, command: &PwmCommand) -> Result<JointState, ActuatorError> {
        let duties = command.duties(self.params.duty_cap);
        for j in ACTIVE_JOINTS {
            let model = self.models.model(j).ok_or(ActuatorError::MissingModel(j))?;
            let (q, qdot) = learned_joint_step(self.params, model, &self.histories[j], duties[j])?;
            self.histories[j].advance(duties[j], q, qdot);
            self.state.q[j] = q;
            self.state.qdot[j] = qdot;
        }
        Ok(self.state)
    }
}

/// Self-feeding rollout of the learned models from `history`. Returns the
/// joint states after each command (the initial state excluded).
pub fn rollout_model(
    params: &MachineParams,
    models: &ActuatorModelSet,
    history: [JointHistory; NUM_JOINTS],
    commands: &[PwmCommand],
) -> Result<Vec<JointState>, ActuatorError> {
    let mut sim = LearnedSimulator::with_histories(params, models, history);
    commands.iter().map(|c| sim.step(c)).collect()
}

//! `hydroarm` command line: data collection, actuator training, policy
//! training, the evaluation harnesses and the session server.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or runtime error,
//! 3 an evaluation check failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hydroarm::actuator_net::{collect_joint_dataset, holdout_split, one_step_rmse, train_actuator_model, ActuatorModelSet, JointDataset};
use hydroarm::config::WorkbenchConfig;
use hydroarm::experiments::{
    compare_report, make_axis_profile, make_control_sequence, run_sim2real, run_sim2real_oracle, run_taskspace_eval, Axis, ControllerKind,
    GapMetrics, ReportEntry, StartPreset, TaskController, TaskMetrics,
};
use hydroarm::hydraulic_plant::max_steady_speed;
use hydroarm::machine_model::ACTIVE_JOINTS;
use hydroarm::ppo::{curve_csv, evaluate, PolicyArtifact, PpoTrainer, TrainerCheckpoint};
use hydroarm::service::load_policy;
use hydroarm::sim_env::ArmVecEnv;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest accepted held-out one-step RMSE, as a fraction of max joint speed.
pub const RMSE_LIMIT_FRACTION: f64 = 0.05;
/// Largest accepted terminal end-effector gap after the 30 s replay (m).
pub const ROLLOUT_GAP_LIMIT: f64 = 0.2;
/// Largest accepted off-axis drift of the policy on the x profile (m).
pub const DRIFT_LIMIT: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("checks failed: {}", .0.join("; "))]
    Check(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "hydroarm", version, about = "Hydraulic manipulator workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record excitation datasets from the synthetic plant.
    CollectData {
        /// Seconds of data per joint (default from config).
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train one actuator model per active joint.
    TrainActuator {
        /// Dataset directory (default: <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Held-out one-step error and the 30 s replay gap of trained models.
    EvalActuator {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory (default: <out>/models).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train the task-space policy with PPO on the learned models.
    TrainPolicy {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this trainer checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Replay a fixed 30 s PWM sequence on the plant and on the learned models.
    EvalSim2real {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Compare the plant with itself (harness self-test).
        #[arg(long)]
        oracle: bool,
    },
    /// Axis-wise velocity tracking on the plant.
    EvalTaskspace {
        /// rl_policy, jacobian or all.
        #[arg(long, default_value = "all")]
        controller: String,
        /// x, y or z (default: the axes listed in the config).
        #[arg(long)]
        axis: Option<String>,
        /// Policy file (default: <out>/policy.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Hold speed of the profile in m/s (default from config).
        #[arg(long)]
        speed: Option<f64>,
    },
    /// Run the websocket session server.
    Serve {
        /// Listening port; HYDROARM_PORT takes precedence.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Policy file enabling the rl_policy mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Simulation speed relative to real time.
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CollectData { .. } => "collect-data",
            Command::TrainActuator { .. } => "train-actuator",
            Command::EvalActuator { .. } => "eval-actuator",
            Command::TrainPolicy { .. } => "train-policy",
            Command::EvalSim2real { .. } => "eval-sim2real",
            Command::EvalTaskspace { .. } => "eval-taskspace",
            Command::Serve { .. } => "serve",
        }
    }
}

/// Seed for the stream named `label`: the first 8 bytes of
/// `sha256(label ‖ master_le)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(master.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct Manifest {
    subcommand: String,
    seed: u64,
    sub_seeds: BTreeMap<String, u64>,
    config_sha256: String,
    versions: BTreeMap<String, String>,
    /// sha256 of every checkpoint or model file read.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

struct Run {
    cfg: WorkbenchConfig,
    global: GlobalArgs,
    manifest: Manifest,
}

impl Run {
    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.global.seed, label);
        self.manifest.sub_seeds.insert(label.into(), s);
        s
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(runtime)?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn record_input(&mut self, path: &Path) {
        if let Ok(bytes) = std::fs::read(path) {
            self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        let name = format!("manifest_{}.json", self.manifest.subcommand);
        self.manifest.outputs.sort();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(runtime)?;
        std::fs::create_dir_all(&self.global.out).map_err(runtime)?;
        std::fs::write(self.out(&name), text).map_err(runtime)
    }

    fn data_dir(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone().unwrap_or_else(|| self.out("data"))
    }

    fn models_dir(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone().unwrap_or_else(|| self.out("models"))
    }

    fn load_models(&mut self, dir: &Path) -> Result<ActuatorModelSet, CliError> {
        let set = ActuatorModelSet::load_dir(dir).map_err(|e| CliError::Config(format!("loading models from {}: {e}", dir.display())))?;
        for j in ACTIVE_JOINTS {
            self.record_input(&dir.join(ActuatorModelSet::file_name(j)));
        }
        Ok(set)
    }

    fn load_datasets(&mut self, dir: &Path) -> Result<Vec<JointDataset>, CliError> {
        ACTIVE_JOINTS
            .iter()
            .map(|&j| {
                let path = dir.join(dataset_file(j));
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
                self.record_input(&path);
                JointDataset::from_csv(j, &text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            })
            .collect()
    }
}

pub fn dataset_file(joint: usize) -> String {
    format!("joint{}.csv", joint + 1)
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.global.config {
        Some(path) => WorkbenchConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => WorkbenchConfig::default(),
    };
    let versions =
        BTreeMap::from([("hydroarm".to_string(), env!("CARGO_PKG_VERSION").to_string()), ("manifest_format".to_string(), "1".to_string())]);
    let manifest = Manifest {
        subcommand: cli.command.name().into(),
        seed: cli.global.seed,
        sub_seeds: BTreeMap::new(),
        config_sha256: sha256_hex(cfg.to_json().as_bytes()),
        versions,
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let mut run = Run { cfg, global: cli.global, manifest };
    let outcome = match &cli.command {
        Command::CollectData { seconds } => collect_data(&mut run, *seconds),
        Command::TrainActuator { data, epochs } => train_actuator(&mut run, data, *epochs),
        Command::EvalActuator { data, models } => eval_actuator(&mut run, data, models),
        Command::TrainPolicy { models, envs, steps, checkpoint } => train_policy(&mut run, models, *envs, *steps, checkpoint),
        Command::EvalSim2real { models, oracle } => eval_sim2real(&mut run, models, *oracle),
        Command::EvalTaskspace { controller, axis, checkpoint, preset, speed } => {
            eval_taskspace(&mut run, controller, axis.as_deref(), checkpoint, preset.as_deref(), *speed)
        }
        Command::Serve { port, checkpoint, speedup } => return serve(&run, *port, checkpoint, *speedup),
    };
    // The manifest is written even when a check fails, so failed runs stay traceable.
    match outcome {
        Err(CliError::Config(_)) | Err(CliError::Runtime(_)) => outcome,
        other => {
            run.finish()?;
            other
        }
    }
}

fn collect_data(run: &mut Run, seconds: Option<f64>) -> Result<(), CliError> {
    let seconds = seconds.unwrap_or(run.cfg.collection_seconds);
    if !(seconds > 0.0) {
        return Err(CliError::Config("--seconds must be positive".into()));
    }
    let mut excitation = run.cfg.excitation.clone();
    excitation.seed = run.seed("excitation");
    let params = run.cfg.machine.clone();
    for j in ACTIVE_JOINTS {
        let ds = collect_joint_dataset(&params, &excitation, j, seconds);
        println!("joint {}: {} rows", j + 1, ds.rows.len());
        run.write(&format!("data/{}", dataset_file(j)), &ds.to_csv())?;
    }
    Ok(())
}

fn train_actuator(run: &mut Run, data: &Option<PathBuf>, epochs: Option<usize>) -> Result<(), CliError> {
    let datasets = run.load_datasets(&run.data_dir(data))?;
    let mut cfg = run.cfg.actuator.clone();
    cfg.seed = run.seed("actuator");
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let mut models = Vec::new();
    let mut curve = String::from("joint,epoch,train_mse,holdout_mse\n");
    let mut summary = String::from("joint,holdout_rmse,holdout_target_std,train_samples,holdout_samples\n");
    for ds in &datasets {
        let (model, report) = train_actuator_model(ds.joint, &ds.samples(), &cfg).map_err(runtime)?;
        for l in &report.losses {
            curve.push_str(&format!("{},{},{},{}\n", ds.joint + 1, l.epoch, l.train_mse, l.holdout_mse));
        }
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            ds.joint + 1,
            report.holdout_rmse,
            report.holdout_target_std,
            report.train_samples,
            report.holdout_samples
        ));
        println!("joint {}: held-out rmse {:.5} rad/s", ds.joint + 1, report.holdout_rmse);
        models.push(model);
    }
    let set = ActuatorModelSet::new(models).map_err(runtime)?;
    for model in set.iter() {
        let name = format!("models/{}", ActuatorModelSet::file_name(model.joint));
        run.write(&name, &model.to_weight_file().to_json())?;
    }
    run.write("actuator_training.csv", &curve)?;
    run.write("actuator_summary.csv", &summary)
}

fn eval_actuator(run: &mut Run, data: &Option<PathBuf>, models: &Option<PathBuf>) -> Result<(), CliError> {
    let set = run.load_models(&run.models_dir(models))?;
    let datasets = run.load_datasets(&run.data_dir(data))?;
    let params = run.cfg.machine.clone();
    let mut failures = Vec::new();
    let mut csv = String::from("joint,holdout_rmse,max_speed,rmse_fraction,limit\n");
    for ds in &datasets {
        let samples = ds.samples();
        let (_, holdout) = holdout_split(&samples, run.cfg.actuator.holdout_fraction);
        let model = set.model(ds.joint).ok_or_else(|| CliError::Config(format!("no model for joint {}", ds.joint + 1)))?;
        let rmse = one_step_rmse(model, holdout).map_err(runtime)?;
        let vmax = max_steady_speed(&params, ds.joint);
        let frac = rmse / vmax;
        println!("joint {}: held-out rmse {rmse:.5} rad/s = {:.2}% of {vmax:.3} rad/s", ds.joint + 1, 100.0 * frac);
        if frac > RMSE_LIMIT_FRACTION {
            failures.push(format!("joint {} one-step rmse {:.2}% > {:.0}%", ds.joint + 1, 100.0 * frac, 100.0 * RMSE_LIMIT_FRACTION));
        }
        csv.push_str(&format!("{},{rmse},{vmax},{frac},{RMSE_LIMIT_FRACTION}\n", ds.joint + 1));
    }
    run.write("actuator_eval.csv", &csv)?;
    let seq = make_control_sequence(&params, run.seed("sequence"));
    let (_, _, gap) = run_sim2real(&params, &set, &seq).map_err(runtime)?;
    println!("30 s replay: terminal end-effector gap {:.4} m", gap.terminal_offset);
    run.write("actuator_rollout_gap.csv", &gap_csv(&gap))?;
    if gap.terminal_offset > ROLLOUT_GAP_LIMIT {
        failures.push(format!("rollout gap {:.3} m > {ROLLOUT_GAP_LIMIT} m", gap.terminal_offset));
    }
    check(failures)
}

fn check(failures: Vec<String>) -> Result<(), CliError> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failures))
    }
}

fn gap_csv(g: &GapMetrics) -> String {
    let rows = [
        ("max_joint_position", g.max_joint_position),
        ("rms_joint_position", g.rms_joint_position),
        ("max_joint_velocity", g.max_joint_velocity),
        ("rms_joint_velocity", g.rms_joint_velocity),
        ("max_task_position", g.max_task_position),
        ("rms_task_position", g.rms_task_position),
        ("max_task_velocity", g.max_task_velocity),
        ("rms_task_velocity", g.rms_task_velocity),
        ("terminal_offset", g.terminal_offset),
    ];
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

/// Copy of `art` whose mean action is identically zero.
pub fn zero_policy(art: &PolicyArtifact) -> PolicyArtifact {
    let mut zero = art.clone();
    for l in zero.policy.net.layers_mut() {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    zero
}

fn train_policy(
    run: &mut Run,
    models: &Option<PathBuf>,
    envs: Option<usize>,
    steps: Option<u64>,
    checkpoint: &Option<PathBuf>,
) -> Result<(), CliError> {
    let set = Arc::new(run.load_models(&run.models_dir(models))?);
    let params = Arc::new(run.cfg.machine.clone());
    let mut env_cfg = run.cfg.env.clone();
    if let Some(n) = envs {
        env_cfg.num_envs = n;
    }
    env_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut ppo_cfg = run.cfg.ppo.clone();
    ppo_cfg.seed = run.seed("ppo");
    if let Some(s) = steps {
        ppo_cfg.total_steps = s;
    }
    let env = ArmVecEnv::new(&env_cfg, params.clone(), set.clone(), run.seed("env")).map_err(|e| CliError::Config(e.to_string()))?;
    let mut trainer = match checkpoint {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            run.record_input(path);
            let mut ck = TrainerCheckpoint::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?;
            ck.config.total_steps = ppo_cfg.total_steps;
            PpoTrainer::resume(env, ck).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => PpoTrainer::new(env, ppo_cfg, env_cfg.layout_tag()).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let every = trainer.cfg.checkpoint_every;
    let ck_path = run.out("checkpoint.json");
    std::fs::create_dir_all(&run.global.out).map_err(runtime)?;
    let mut ck_error = None;
    trainer
        .train(|t, s| {
            if s.update % 50 == 0 {
                println!("update {} steps {} mean reward {:.4}", s.update, s.env_steps, s.mean_reward);
            }
            if every > 0 && s.update % every == 0 {
                if let Err(e) = std::fs::write(&ck_path, t.checkpoint().to_json()) {
                    ck_error = Some(e);
                    return false;
                }
            }
            true
        })
        .map_err(runtime)?;
    if let Some(e) = ck_error {
        return Err(runtime(e));
    }
    let art = trainer.artifact();
    run.write("policy.json", &art.to_weight_file().to_json())?;
    run.write("checkpoint.json", &trainer.checkpoint().to_json())?;
    run.write("training_curve.csv", &curve_csv(&trainer.curve))?;

    let eval_cfg = hydroarm::sim_env::EnvConfig { noise_enabled: false, ..env_cfg };
    let eval_seed = run.seed("eval");
    let steps = run.cfg.experiments.eval_steps_per_env;
    let mut eval_env = ArmVecEnv::new(&eval_cfg, params.clone(), set.clone(), eval_seed).map_err(runtime)?;
    let policy = evaluate(&art, &mut eval_env, steps, true, eval_seed).map_err(runtime)?;
    let mut eval_env = ArmVecEnv::new(&eval_cfg, params, set, eval_seed).map_err(runtime)?;
    let zero = evaluate(&zero_policy(&art), &mut eval_env, steps, true, eval_seed).map_err(runtime)?;
    println!("evaluation mean reward {:.4} (zero policy {:.4})", policy.mean_reward, zero.mean_reward);
    run.write("policy_eval.csv", &format!("metric,value\nmean_reward,{}\nzero_policy_reward,{}\n", policy.mean_reward, zero.mean_reward))
}

fn eval_sim2real(run: &mut Run, models: &Option<PathBuf>, oracle: bool) -> Result<(), CliError> {
    let params = run.cfg.machine.clone();
    let seq = make_control_sequence(&params, run.seed("sequence"));
    let (reference, candidate, gap) = if oracle {
        run_sim2real_oracle(&params, &seq).map_err(runtime)?
    } else {
        let set = run.load_models(&run.models_dir(models))?;
        run_sim2real(&params, &set, &seq).map_err(runtime)?
    };
    run.write("sim2real_plant.csv", &reference.to_csv().map_err(runtime)?)?;
    run.write("sim2real_model.csv", &candidate.to_csv().map_err(runtime)?)?;
    run.write("sim2real_gap.csv", &gap_csv(&gap))?;
    println!("terminal end-effector gap {:.4} m", gap.terminal_offset);
    if oracle {
        check(if gap == GapMetrics::default() { vec![] } else { vec!["plant-vs-plant gap is not zero".into()] })
    } else if gap.terminal_offset > ROLLOUT_GAP_LIMIT {
        check(vec![format!("terminal gap {:.3} m > {ROLLOUT_GAP_LIMIT} m", gap.terminal_offset)])
    } else {
        Ok(())
    }
}

fn eval_taskspace(
    run: &mut Run,
    controller: &str,
    axis: Option<&str>,
    checkpoint: &Option<PathBuf>,
    preset: Option<&str>,
    speed: Option<f64>,
) -> Result<(), CliError> {
    let usage = |e: hydroarm::experiments::ExperimentError| CliError::Config(e.to_string());
    let kinds: Vec<ControllerKind> = match controller {
        "all" => vec![ControllerKind::Jacobian, ControllerKind::RlPolicy],
        c => vec![c.parse().map_err(usage)?],
    };
    let axes: Vec<Axis> = match axis {
        Some(a) => vec![a.parse().map_err(usage)?],
        None => run.cfg.experiments.axes.clone(),
    };
    let preset: StartPreset = match preset {
        Some(p) => p.parse().map_err(usage)?,
        None => run.cfg.experiments.preset,
    };
    let speed = speed.unwrap_or(run.cfg.experiments.profile_speed);
    let policy = if kinds.contains(&ControllerKind::RlPolicy) {
        let path = checkpoint.clone().unwrap_or_else(|| run.out("policy.json"));
        let art = load_policy(&path).map_err(|e| CliError::Config(e.to_string()))?;
        run.record_input(&path);
        Some(art)
    } else {
        None
    };
    let params = run.cfg.machine.clone();
    let mut entries = Vec::new();
    let mut results: BTreeMap<(Axis, &str), TaskMetrics> = BTreeMap::new();
    for &axis in &axes {
        let profile = make_axis_profile(axis, speed, run.cfg.experiments.profile_duration).map_err(usage)?;
        for &kind in &kinds {
            let ctrl = match kind {
                ControllerKind::Jacobian => TaskController::Jacobian(run.cfg.jacobian.clone()),
                ControllerKind::RlPolicy => TaskController::Rl(policy.as_ref().expect("loaded above")),
            };
            let (record, metrics) = run_taskspace_eval(&params, &ctrl, &profile, preset.q(), preset.as_str()).map_err(runtime)?;
            run.write(&format!("tracking_{}_{}.csv", kind.as_str(), axis.as_str()), &record.to_csv().map_err(runtime)?)?;
            entries.push(ReportEntry { controller: kind.as_str().into(), axis: axis.as_str().into(), metrics: Some(metrics) });
            results.insert((axis, kind.as_str()), metrics);
        }
    }
    let report = compare_report(&entries).map_err(runtime)?;
    print!("{}", report.text);
    run.write("taskspace_report.csv", &report.csv)?;
    run.write("taskspace_report.txt", &report.text)?;

    let mut failures = Vec::new();
    if let Some(rl) = results.get(&(Axis::X, "rl_policy")) {
        if rl.max_offaxis_drift > DRIFT_LIMIT {
            failures.push(format!("policy off-axis drift {:.3} m > {DRIFT_LIMIT} m on x", rl.max_offaxis_drift));
        }
        if let Some(jac) = results.get(&(Axis::X, "jacobian")) {
            if rl.max_offaxis_drift >= jac.max_offaxis_drift {
                failures.push("policy drift is not below the Jacobian drift on x".into());
            }
            if rl.post_reversal_rms >= jac.post_reversal_rms {
                failures.push("policy post-reversal error is not below the Jacobian error on x".into());
            }
        }
    }
    check(failures)
}

fn serve(run: &Run, port: u16, checkpoint: &Option<PathBuf>, speedup: f64) -> Result<(), CliError> {
    let port = match std::env::var("HYDROARM_PORT") {
        Ok(v) => v.parse().map_err(|_| CliError::Config(format!("HYDROARM_PORT='{v}' is not a port")))?,
        Err(_) => port,
    };
    if !(speedup > 0.0) {
        return Err(CliError::Config("--speedup must be positive".into()));
    }
    let mut cfg = hydroarm_server::ServerConfig::new(run.cfg.machine.clone());
    cfg.jacobian = run.cfg.jacobian.clone();
    cfg.speedup = speedup;
    if let Some(path) = checkpoint {
        cfg.policy = Some(Arc::new(load_policy(path).map_err(|e| CliError::Config(e.to_string()))?));
    }
    let _ = tracing_subscriber::fmt().try_init();
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await.map_err(|e| CliError::Config(format!("port {port}: {e}")))?;
        println!("listening on {}", listener.local_addr().map_err(runtime)?);
        hydroarm_server::serve(listener, cfg).await.map_err(runtime)
    })
}

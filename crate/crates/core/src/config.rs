//! Top-level configuration for the whole pipeline. Every section has working
//! defaults; a JSON file may override any subset of fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator_net::{ActuatorTrainConfig, ExcitationConfig};
use crate::experiments::{Axis, StartPreset};
use crate::jacobian_ctrl::JacCtrlConfig;
use crate::machine_model::MachineParams;
use crate::ppo::PpoConfig;
use crate::sim_env::EnvConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Hold speed of the axis profiles (m/s).
    pub profile_speed: f64,
    /// Profile duration (s).
    pub profile_duration: f64,
    pub preset: StartPreset,
    pub axes: Vec<Axis>,
    /// Ticks per environment for the policy evaluation.
    pub eval_steps_per_env: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile_speed: 0.15,
            profile_duration: 8.0,
            preset: StartPreset::MidWorkspace,
            axes: vec![Axis::X, Axis::Z],
            eval_steps_per_env: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkbenchConfig {
    pub machine: MachineParams,
    pub excitation: ExcitationConfig,
    /// Length of the excitation recording per active joint (s).
    pub collection_seconds: f64,
    pub actuator: ActuatorTrainConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub jacobian: JacCtrlConfig,
    pub experiments: ExperimentConfig,
}

impl Default for WorkbenchConfig {
    /// Desk-scale defaults: 20 min of data per joint and the reduced planar
    /// (boom + arm) policy, trained with piecewise-constant goals (a new goal
    /// every 2 s, one in five of them a hold), a shorter discount horizon and
    /// a learning rate annealed to zero.
    fn default() -> Self {
        Self {
            machine: MachineParams::default(),
            excitation: ExcitationConfig::default(),
            collection_seconds: 1200.0,
            actuator: ActuatorTrainConfig::default(),
            env: EnvConfig {
                controlled_joints: vec![2, 3],
                goal_speed_max: 0.3,
                goal_resample_ticks: 40,
                zero_goal_probability: 0.2,
                num_envs: 32,
                ..EnvConfig::default()
            },
            ppo: PpoConfig { gamma: 0.95, lr_final_fraction: 0.0, total_steps: 8_000_000, ..PpoConfig::default() },
            jacobian: JacCtrlConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl WorkbenchConfig {
    /// Overlay `text` on the workbench defaults. Nested sections merge field
    /// by field, so `{"env": {"num_envs": 32}}` keeps the other env settings.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, serde_json::from_str(text)?);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.machine.validate().map_err(|e| invalid(&e))?;
        self.excitation.validate(&self.machine).map_err(|e| invalid(&e))?;
        self.env.validate().map_err(|e| invalid(&e))?;
        self.ppo.validate().map_err(|e| invalid(&e))?;
        self.jacobian.validate().map_err(|e| invalid(&e))?;
        if !(self.collection_seconds > 0.0) {
            return Err(ConfigError::Invalid("collection_seconds must be positive".into()));
        }
        let ex = &self.experiments;
        if !(ex.profile_speed >= 0.0 && ex.profile_duration >= 0.5) || ex.eval_steps_per_env == 0 {
            return Err(ConfigError::Invalid("experiment profile needs speed ≥ 0, duration ≥ 0.5 s and eval steps > 0".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_matches_code() {
        let text = include_str!("../../../config/default.json");
        assert_eq!(WorkbenchConfig::from_json(text).unwrap(), WorkbenchConfig::default());
    }

    #[test]
    fn partial_override() {
        let cfg = WorkbenchConfig::from_json(r#"{"collection_seconds": 120, "ppo": {"total_steps": 5000}}"#).unwrap();
        assert_eq!(cfg.collection_seconds, 120.0);
        assert_eq!(cfg.ppo.total_steps, 5000);
        assert_eq!(cfg.ppo.gamma, WorkbenchConfig::default().ppo.gamma);
        let cfg = WorkbenchConfig::from_json(r#"{"env": {"num_envs": 32}}"#).unwrap();
        assert_eq!(cfg.env.num_envs, 32);
        assert_eq!(cfg.env.controlled_joints, vec![2, 3]);
        assert!(matches!(WorkbenchConfig::from_json(r#"{"collection_seconds": -1}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(WorkbenchConfig::from_json("{"), Err(ConfigError::Parse(_))));
    }
}

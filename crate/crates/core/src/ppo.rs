//! Proximal policy optimisation with generalised advantage estimation.
//!
//! Gaussian policy with a state-independent log-std; actions are clipped to
//! [−1, 1] after their log-probability has been taken. Policy, log-std and
//! value network share one Adam optimiser.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{Activation, AdamState, Gradients, Mlp, MlpSpec, NeuralError, Normalizer, WeightFile};
use crate::sim_env::{EnvError, VecEnvironment};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const CHECKPOINT_VERSION: u32 = 1;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: usize },
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    /// The learning rate decays linearly to `lr · lr_final_fraction` over
    /// `total_steps`; 1 keeps it constant.
    pub lr_final_fraction: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Ticks collected per environment before each update.
    pub horizon: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub total_steps: u64,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Normalised observations are clipped to ±this.
    pub obs_clip: f64,
    /// Write a checkpoint every this many updates (0 = never).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            lr_final_fraction: 1.0,
            epochs: 4,
            minibatches: 4,
            horizon: 64,
            entropy_coef: 0.0,
            value_coef: 0.5,
            total_steps: 1_000_000,
            max_grad_norm: Some(0.5),
            hidden: vec![256, 128, 64],
            init_log_std: -0.5,
            obs_clip: 10.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 {
            return bad("epochs, minibatches and horizon must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return bad("lr_final_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Advantages and returns for one environment's trajectory segment.
///
/// `dones[t]` marks that the episode ended after step `t`; `last_value` is
/// the value of the observation following the final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Shape(format!("rewards {n}, values {}, dones {}", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// In-place normalisation to zero mean and unit (population) std.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = if std > 1e-12 { std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) / denom;
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut impl Rng) -> Result<Self, PpoError> {
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(action_dim);
        let mut net = Mlp::new(MlpSpec::new(sizes, Activation::Elu, Activation::Linear), rng)?;
        // Small output layer so initial means sit near zero.
        if let Some(last) = net.layers_mut().last_mut() {
            last.weight.mapv_inplace(|w| w * 0.01);
            last.bias.fill(0.0);
        }
        Ok(Self { net, log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim] })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

pub fn value_network(obs_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Mlp, PpoError> {
    let mut sizes = vec![obs_dim];
    sizes.extend(hidden);
    sizes.push(1);
    Ok(Mlp::new(MlpSpec::new(sizes, Activation::Elu, Activation::Linear), rng)?)
}

/// One minibatch of (normalised) observations and rollout quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub net_grads: Gradients,
    pub log_std_grad: Vec<f64>,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// Clipped surrogate `−mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) − c_H·H` and its gradient.
pub fn surrogate_loss(policy: &GaussianPolicy, batch: &MiniBatch, clip_eps: f64, entropy_coef: f64) -> Result<SurrogateOutput, PpoError> {
    let b = batch.obs.nrows();
    let (mean, cache) = policy.net.forward(batch.obs.view())?;
    let inv_var: Vec<f64> = policy.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut grad_mean = Array2::zeros(mean.raw_dim());
    let mut log_std_grad = vec![0.0; policy.action_dim()];
    let (mut loss, mut clipped, mut kl) = (0.0, 0usize, 0.0);
    for i in 0..b {
        let m = mean.row(i);
        let a = batch.actions.row(i);
        let logp = gaussian_log_prob(m.as_slice().expect("contiguous"), &policy.log_std, a.as_slice().expect("contiguous"));
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let clipped_obj = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        loss -= unclipped.min(clipped_obj) / b as f64;
        kl += ((ratio - 1.0) - (logp - batch.old_log_probs[i])) / b as f64;
        if (ratio - 1.0).abs() > clip_eps {
            clipped += 1;
        }
        // Gradient flows only through the unclipped branch when it is the minimum.
        if unclipped <= clipped_obj {
            let dlogp = -unclipped / b as f64;
            for k in 0..policy.action_dim() {
                let diff = a[k] - m[k];
                grad_mean[[i, k]] = dlogp * diff * inv_var[k];
                log_std_grad[k] += dlogp * (diff * diff * inv_var[k] - 1.0);
            }
        }
    }
    let entropy: f64 = policy.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum();
    loss -= entropy_coef * entropy;
    for g in &mut log_std_grad {
        *g -= entropy_coef;
    }
    let (net_grads, _) = policy.net.backward(&cache, grad_mean.view())?;
    Ok(SurrogateOutput { loss, net_grads, log_std_grad, clip_fraction: clipped as f64 / b as f64, approx_kl: kl, entropy })
}

/// Mean squared error of the value head against the returns, with gradient.
pub fn value_loss(value: &Mlp, obs: ArrayView2<'_, f64>, returns: &[f64]) -> Result<(f64, Gradients), PpoError> {
    let (v, cache) = value.forward(obs)?;
    let b = returns.len() as f64;
    let mut grad = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for (i, r) in returns.iter().enumerate() {
        let e = v[[i, 0]] - r;
        loss += e * e / b;
        grad[[i, 0]] = 2.0 * e / b;
    }
    let (grads, _) = value.backward(&cache, grad.view())?;
    Ok((loss, grads))
}

/// Frozen policy for deployment: network, log-std and observation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArtifact {
    pub policy: GaussianPolicy,
    pub obs_norm: Normalizer,
    pub obs_clip: f64,
    pub layout: String,
}

impl PolicyArtifact {
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        let clip = self.obs_clip;
        self.obs_norm.normalize(obs).into_iter().map(|v| v.clamp(-clip, clip)).collect()
    }

    /// Mean action (deterministic) or a Gaussian sample, clipped to [−1, 1].
    pub fn act(&self, obs: &[f64], deterministic: bool, rng: &mut impl Rng) -> Result<Vec<f64>, PpoError> {
        let mean = self.policy.net.predict(&self.normalize(obs))?;
        Ok(mean
            .iter()
            .zip(&self.policy.log_std)
            .map(|(m, ls)| {
                let a = if deterministic {
                    *m
                } else {
                    let e: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * e
                };
                a.clamp(-1.0, 1.0)
            })
            .collect())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile::from_mlp(&self.policy.net)
            .with_normalizer("obs", &self.obs_norm)
            .with_metadata("log_std", serde_json::json!(self.policy.log_std))
            .with_metadata("obs_clip", serde_json::json!(self.obs_clip))
            .with_metadata("observation_layout", serde_json::json!(self.layout))
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self, PpoError> {
        let bad = |m: &str| PpoError::Checkpoint(m.into());
        let log_std: Vec<f64> =
            file.metadata.get("log_std").and_then(|v| serde_json::from_value(v.clone()).ok()).ok_or_else(|| bad("missing log_std"))?;
        let obs_clip = file.metadata.get("obs_clip").and_then(|v| v.as_f64()).ok_or_else(|| bad("missing obs_clip"))?;
        let layout = file.metadata.get("observation_layout").and_then(|v| v.as_str()).ok_or_else(|| bad("missing layout"))?.to_string();
        let obs_norm = file.normalizers.get("obs").cloned().ok_or_else(|| bad("missing obs normalizer"))?;
        let net = file.to_mlp()?;
        if net.spec().output_size() != log_std.len() || net.spec().input_size() != obs_norm.dim() {
            return Err(bad("policy shapes disagree with metadata"));
        }
        Ok(Self { policy: GaussianPolicy { net, log_std }, obs_norm, obs_clip, layout })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub env_steps: u64,
    /// Mean per-step reward over the rollout.
    pub mean_reward: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub episodes_finished: usize,
    pub mean_episode_return: Option<f64>,
    pub ground_spawns: usize,
}

/// Complete trainer state; restoring it continues training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub version: u32,
    pub config: PpoConfig,
    pub layout: String,
    pub policy: WeightFile,
    pub log_std: Vec<f64>,
    pub value: WeightFile,
    pub obs_norm: Normalizer,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub env_state: serde_json::Value,
    pub current_obs: Vec<Vec<f64>>,
    pub update: usize,
    pub env_steps: u64,
    pub curve: Vec<CurveRow>,
}

impl TrainerCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, PpoError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PpoError::Checkpoint(format!("version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        Ok(ck)
    }
}

pub struct PpoTrainer<E: VecEnvironment> {
    pub cfg: PpoConfig,
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub obs_norm: Normalizer,
    pub env: E,
    pub layout: String,
    adam: AdamState,
    rng: ChaCha8Rng,
    current_obs: Vec<Vec<f64>>,
    pub update: usize,
    pub env_steps: u64,
    pub curve: Vec<CurveRow>,
}

fn adam_sizes(policy: &GaussianPolicy, value: &Mlp) -> Vec<usize> {
    let mut sizes: Vec<usize> = policy.net.layers().iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
    sizes.push(policy.log_std.len());
    sizes.extend(value.layers().iter().flat_map(|l| [l.weight.len(), l.bias.len()]));
    sizes
}

impl<E: VecEnvironment> PpoTrainer<E> {
    pub fn new(mut env: E, cfg: PpoConfig, layout: String) -> Result<Self, PpoError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let policy = GaussianPolicy::new(env.obs_dim(), env.action_dim(), &cfg.hidden, cfg.init_log_std, &mut rng)?;
        let value = value_network(env.obs_dim(), &cfg.hidden, &mut rng)?;
        let adam = AdamState::new(&adam_sizes(&policy, &value), cfg.lr);
        let current_obs = env.reset_all()?;
        let obs_norm = Normalizer::new(env.obs_dim());
        Ok(Self { cfg, policy, value, obs_norm, env, layout, adam, rng, current_obs, update: 0, env_steps: 0, curve: Vec::new() })
    }

    pub fn artifact(&self) -> PolicyArtifact {
        PolicyArtifact {
            policy: self.policy.clone(),
            obs_norm: self.obs_norm.clone(),
            obs_clip: self.cfg.obs_clip,
            layout: self.layout.clone(),
        }
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            layout: self.layout.clone(),
            policy: WeightFile::from_mlp(&self.policy.net),
            log_std: self.policy.log_std.clone(),
            value: WeightFile::from_mlp(&self.value),
            obs_norm: self.obs_norm.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            env_state: self.env.save_state(),
            current_obs: self.current_obs.clone(),
            update: self.update,
            env_steps: self.env_steps,
            curve: self.curve.clone(),
        }
    }

    /// Rebuild a trainer around `env` (constructed with the same settings).
    pub fn resume(mut env: E, ck: TrainerCheckpoint) -> Result<Self, PpoError> {
        env.load_state(ck.env_state)?;
        let policy = GaussianPolicy { net: ck.policy.to_mlp()?, log_std: ck.log_std };
        let value = ck.value.to_mlp()?;
        if policy.net.spec().input_size() != env.obs_dim() || policy.action_dim() != env.action_dim() {
            return Err(PpoError::Checkpoint("checkpoint does not match the environment shape".into()));
        }
        Ok(Self {
            cfg: ck.config,
            policy,
            value,
            obs_norm: ck.obs_norm,
            env,
            layout: ck.layout,
            adam: ck.adam,
            rng: ck.rng,
            current_obs: ck.current_obs,
            update: ck.update,
            env_steps: ck.env_steps,
            curve: ck.curve,
        })
    }

    fn normalized(&self, rows: &[Vec<f64>]) -> Array2<f64> {
        let clip = self.cfg.obs_clip;
        let mut x = Array2::zeros((rows.len(), self.env.obs_dim()));
        for (mut out, row) in x.axis_iter_mut(Axis(0)).zip(rows) {
            for (o, v) in out.iter_mut().zip(self.obs_norm.normalize(row)) {
                *o = v.clamp(-clip, clip);
            }
        }
        x
    }

    /// Collect one rollout, then run the clipped-surrogate epochs on it.
    pub fn train_update(&mut self) -> Result<UpdateStats, PpoError> {
        let progress = (self.env_steps as f64 / self.cfg.total_steps.max(1) as f64).min(1.0);
        self.adam.lr = self.cfg.lr * (1.0 - (1.0 - self.cfg.lr_final_fraction) * progress);
        let n = self.env.num_envs();
        let h = self.cfg.horizon;
        let a_dim = self.env.action_dim();
        let obs_dim = self.env.obs_dim();
        let mut obs_buf = Array2::zeros((h * n, obs_dim));
        let mut act_buf = Array2::zeros((h * n, a_dim));
        let mut logp_buf = vec![0.0; h * n];
        let mut rewards = vec![vec![0.0; h]; n];
        let mut values = vec![vec![0.0; h]; n];
        let mut dones = vec![vec![false; h]; n];
        let (mut reward_sum, mut finished, mut ground_spawns) = (0.0, Vec::new(), 0);

        for t in 0..h {
            self.obs_norm.update(self.current_obs.iter().map(|o| o.as_slice()));
            let x = self.normalized(&self.current_obs);
            let (mean, _) = self.policy.net.forward(x.view())?;
            let (v, _) = self.value.forward(x.view())?;
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let row = t * n + i;
                let mut a = vec![0.0; a_dim];
                for k in 0..a_dim {
                    let e: f64 = StandardNormal.sample(&mut self.rng);
                    a[k] = mean[[i, k]] + self.policy.log_std[k].exp() * e;
                }
                logp_buf[row] = gaussian_log_prob(mean.row(i).as_slice().expect("contiguous"), &self.policy.log_std, &a);
                obs_buf.row_mut(row).assign(&x.row(i));
                act_buf.row_mut(row).assign(&Array1::from(a.clone()));
                values[i][t] = v[[i, 0]];
                actions.push(a.iter().map(|v| v.clamp(-1.0, 1.0)).collect());
            }
            let step = self.env.step(&actions)?;
            ground_spawns += step.ground_spawns;
            finished.extend(step.finished_returns.iter().copied());
            let timeouts: Vec<usize> = (0..n).filter(|&i| step.results[i].done).collect();
            let terminal_values = if timeouts.is_empty() {
                Array2::zeros((0, 1))
            } else {
                let rows: Vec<Vec<f64>> = timeouts.iter().map(|&i| step.results[i].observation.clone()).collect();
                self.value.forward(self.normalized(&rows).view())?.0
            };
            for (i, r) in step.results.iter().enumerate() {
                reward_sum += r.reward;
                rewards[i][t] = r.reward;
                dones[i][t] = r.done;
            }
            // Episodes end only by time limit here, so bootstrap from the terminal state.
            for (k, &i) in timeouts.iter().enumerate() {
                rewards[i][t] += self.cfg.gamma * terminal_values[[k, 0]];
            }
            self.current_obs = step.next_observations;
        }
        let x_last = self.normalized(&self.current_obs);
        let (v_last, _) = self.value.forward(x_last.view())?;

        let mut adv_buf = vec![0.0; h * n];
        let mut ret_buf = vec![0.0; h * n];
        for i in 0..n {
            let (adv, ret) = compute_gae(&rewards[i], &values[i], &dones[i], v_last[[i, 0]], self.cfg.gamma, self.cfg.gae_lambda)?;
            for t in 0..h {
                adv_buf[t * n + i] = adv[t];
                ret_buf[t * n + i] = ret[t];
            }
        }
        normalize_advantages(&mut adv_buf);

        let total = h * n;
        let mb_size = total.div_ceil(self.cfg.minibatches);
        let mut order: Vec<usize> = (0..total).collect();
        let (mut clip_sum, mut kl_sum, mut pl_sum, mut vl_sum, mut ent, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(mb_size) {
                let batch = MiniBatch {
                    obs: obs_buf.select(Axis(0), chunk),
                    actions: act_buf.select(Axis(0), chunk),
                    old_log_probs: chunk.iter().map(|&k| logp_buf[k]).collect(),
                    advantages: chunk.iter().map(|&k| adv_buf[k]).collect(),
                    returns: chunk.iter().map(|&k| ret_buf[k]).collect(),
                };
                let sur = surrogate_loss(&self.policy, &batch, self.cfg.clip_eps, self.cfg.entropy_coef)?;
                let (vl, mut vgrads) = value_loss(&self.value, batch.obs.view(), &batch.returns)?;
                if !sur.loss.is_finite() {
                    return Err(PpoError::NonFinite { what: "policy loss", update: self.update });
                }
                if !vl.is_finite() {
                    return Err(PpoError::NonFinite { what: "value loss", update: self.update });
                }
                vgrads.scale(self.cfg.value_coef);
                let mut net_grads = sur.net_grads;
                let mut ls_grad = sur.log_std_grad;
                if let Some(max_norm) = self.cfg.max_grad_norm {
                    let norm = (net_grads.sum_of_squares() + vgrads.sum_of_squares() + ls_grad.iter().map(|g| g * g).sum::<f64>()).sqrt();
                    if norm > max_norm {
                        let f = max_norm / norm;
                        net_grads.scale(f);
                        vgrads.scale(f);
                        ls_grad.iter_mut().for_each(|g| *g *= f);
                    }
                }
                let mut grads: Vec<&[f64]> = net_grads.tensors();
                grads.push(&ls_grad);
                grads.extend(vgrads.tensors());
                let mut params: Vec<&mut [f64]> = self.policy.net.tensors_mut();
                params.push(&mut self.policy.log_std);
                params.extend(self.value.tensors_mut());
                self.adam.step(params, &grads)?;
                self.policy.clamp_log_std();

                clip_sum += sur.clip_fraction;
                kl_sum += sur.approx_kl;
                pl_sum += sur.loss;
                vl_sum += vl;
                ent = sur.entropy;
                count += 1.0;
            }
        }

        self.update += 1;
        self.env_steps += total as u64;
        let stats = UpdateStats {
            update: self.update,
            env_steps: self.env_steps,
            mean_reward: reward_sum / total as f64,
            clip_frac: clip_sum / count,
            kl: kl_sum / count,
            policy_loss: pl_sum / count,
            value_loss: vl_sum / count,
            entropy: ent,
            episodes_finished: finished.len(),
            mean_episode_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            ground_spawns,
        };
        self.curve.push(CurveRow {
            update: stats.update,
            env_steps: stats.env_steps,
            mean_reward: stats.mean_reward,
            clip_frac: stats.clip_frac,
            kl: stats.kl,
        });
        Ok(stats)
    }

    /// Train until `cfg.total_steps`; `on_update` sees every update's stats and
    /// may stop training early by returning `false`.
    pub fn train(&mut self, mut on_update: impl FnMut(&Self, &UpdateStats) -> bool) -> Result<(), PpoError> {
        while self.env_steps < self.cfg.total_steps {
            let stats = self.train_update()?;
            if !on_update(self, &stats) {
                break;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_reward: f64,
    pub steps: usize,
    pub episodes_finished: usize,
}

/// Run `artifact` for `steps_per_env` ticks in every environment and report
/// the mean per-step reward.
pub fn evaluate<E: VecEnvironment>(
    artifact: &PolicyArtifact,
    env: &mut E,
    steps_per_env: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalStats, PpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset_all()?;
    let (mut total, mut count, mut episodes) = (0.0, 0usize, 0usize);
    for _ in 0..steps_per_env {
        let actions = obs.iter().map(|o| artifact.act(o, deterministic, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        let step = env.step(&actions)?;
        total += step.results.iter().map(|r| r.reward).sum::<f64>();
        count += step.results.len();
        episodes += step.finished_returns.len();
        obs = step.next_observations;
    }
    Ok(EvalStats { mean_reward: total / count as f64, steps: count, episodes_finished: episodes })
}

/// One-dimensional sanity task: observe x ~ U(−1, 1), reward `1/(1+|a − 0.5x|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVecEnv {
    pub episode_len: usize,
    xs: Vec<f64>,
    ticks: Vec<usize>,
    returns: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl ToyVecEnv {
    pub fn new(num_envs: usize, episode_len: usize, seed: u64) -> Self {
        let rngs = (0..num_envs).map(|i| ChaCha8Rng::seed_from_u64(crate::sim_env::stream_seed(seed, i as u64))).collect();
        Self { episode_len, xs: vec![0.0; num_envs], ticks: vec![0; num_envs], returns: vec![0.0; num_envs], rngs }
    }

    pub fn target(x: f64) -> f64 {
        0.5 * x
    }
}

impl VecEnvironment for ToyVecEnv {
    fn num_envs(&self) -> usize {
        self.xs.len()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset_all(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        for i in 0..self.xs.len() {
            self.xs[i] = self.rngs[i].random_range(-1.0..1.0);
            self.ticks[i] = 0;
            self.returns[i] = 0.0;
        }
        Ok(self.xs.iter().map(|&x| vec![x]).collect())
    }

    fn step(&mut self, actions: &[Vec<f64>]) -> Result<crate::sim_env::VecStep, EnvError> {
        use crate::sim_env::{DoneReason, StepResult, VecStep};
        if actions.len() != self.xs.len() {
            return Err(EnvError::BatchShape { expected: self.xs.len(), found: actions.len() });
        }
        let mut out = VecStep { results: Vec::new(), next_observations: Vec::new(), ground_spawns: 0, finished_returns: Vec::new() };
        for i in 0..self.xs.len() {
            let a = actions[i][0].clamp(-1.0, 1.0);
            let r = 1.0 / (1.0 + (a - Self::target(self.xs[i])).abs());
            self.returns[i] += r;
            self.ticks[i] += 1;
            self.xs[i] = self.rngs[i].random_range(-1.0..1.0);
            let done = self.ticks[i] >= self.episode_len;
            if done {
                out.finished_returns.push(self.returns[i]);
                self.ticks[i] = 0;
                self.returns[i] = 0.0;
            }
            out.results.push(StepResult {
                observation: vec![self.xs[i]],
                reward: r,
                done,
                done_reason: done.then_some(DoneReason::Timeout),
                v_ee: nalgebra::Vector3::zeros(),
            });
            out.next_observations.push(vec![self.xs[i]]);
        }
        Ok(out)
    }

    fn save_state(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("toy state serialises")
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<(), EnvError> {
        *self = serde_json::from_value(state).map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Copy of a batch restricted to rows `range`; handy for tests and diagnostics.
pub fn slice_batch(batch: &MiniBatch, range: std::ops::Range<usize>) -> MiniBatch {
    MiniBatch {
        obs: batch.obs.slice(s![range.clone(), ..]).to_owned(),
        actions: batch.actions.slice(s![range.clone(), ..]).to_owned(),
        old_log_probs: batch.old_log_probs[range.clone()].to_vec(),
        advantages: batch.advantages[range.clone()].to_vec(),
        returns: batch.returns[range].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: A_t = Σ_k (γλ)^k δ_{t+k} within the episode.
    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { last };
        let delta: Vec<f64> = (0..n).map(|t| r[t] + g * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t]).collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..=5 {
            for _ in 0..50 {
                let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
                let last = rng.random_range(-1.0..1.0);
                let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
                let (adv, ret) = compute_gae(&r, &v, &d, last, g, l).unwrap();
                for (a, o) in adv.iter().zip(gae_oracle(&r, &v, &d, last, g, l)) {
                    assert!((a - o).abs() <= 1e-12);
                }
                for t in 0..len {
                    assert_eq!(ret[t], adv[t] + v[t]);
                }
            }
        }
    }

    #[test]
    fn gae_special_cases() {
        let r = [0.3, -0.1, 0.7];
        let v = [0.2, 0.5, -0.4];
        let d = [false, false, true];
        let (adv, _) = compute_gae(&r, &v, &d, 9.0, 0.9, 0.0).unwrap();
        assert_eq!(adv, vec![0.3 + 0.9 * 0.5 - 0.2, -0.1 + 0.9 * -0.4 - 0.5, 0.7 - -0.4]);
        let (adv, _) = compute_gae(&r, &[0.0; 3], &d, 9.0, 1.0, 1.0).unwrap();
        assert!((adv[0] - 0.9).abs() < 1e-15 && (adv[1] - 0.6).abs() < 1e-15 && (adv[2] - 0.7).abs() < 1e-15);
        // Hand-computed: γ=0.9, λ=0.8, 3-step episode.
        let (adv, _) = compute_gae(&r, &v, &d, 0.0, 0.9, 0.8).unwrap();
        let d2 = 0.7 + 0.4;
        let d1 = -0.1 + 0.9 * -0.4 - 0.5;
        let d0 = 0.3 + 0.9 * 0.5 - 0.2;
        let a1 = d1 + 0.72 * d2;
        assert!((adv[2] - d2).abs() < 1e-12 && (adv[1] - a1).abs() < 1e-12 && (adv[0] - (d0 + 0.72 * a1)).abs() < 1e-12);
        assert!(compute_gae(&r, &v[..2], &d, 0.0, 0.9, 0.8).is_err());
    }

    #[test]
    fn advantage_normalisation() {
        let mut a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 5.0 + 2.0).collect();
        normalize_advantages(&mut a);
        let mean = a.iter().sum::<f64>() / 100.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(mean.abs() <= 1e-9 && (std - 1.0).abs() <= 1e-6);
    }

    fn toy_batch(policy: &GaussianPolicy, rng: &mut ChaCha8Rng, shift: f64) -> MiniBatch {
        let b = 6;
        let obs = Array2::from_shape_fn((b, 3), |_| rng.random_range(-1.0..1.0));
        let (mean, _) = policy.net.forward(obs.view()).unwrap();
        let actions = Array2::from_shape_fn((b, 2), |(i, k)| mean[[i, k]] + rng.random_range(-0.5..0.5));
        let old_log_probs = (0..b)
            .map(|i| {
                gaussian_log_prob(mean.row(i).as_slice().unwrap(), &policy.log_std, actions.row(i).as_slice().unwrap())
                    + shift * rng.random_range(-1.0..1.0)
            })
            .collect();
        let advantages = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
        MiniBatch { obs, actions, old_log_probs, advantages, returns: vec![0.0; b] }
    }

    fn small_policy(seed: u64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GaussianPolicy::new(3, 2, &[5, 4], -0.3, &mut rng).unwrap();
        // Undo the small-output initialisation so every parameter matters.
        for l in p.net.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let last = p.net.layers_mut().last_mut().unwrap();
        last.weight.mapv_inplace(|w| w * 50.0);
        p.log_std = vec![-0.3, 0.2];
        p
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = small_policy(2);
        let batch = toy_batch(&policy, &mut rng, 0.1);
        let out = surrogate_loss(&policy, &batch, 0.2, 0.01).unwrap();
        let h = 1e-6;
        let analytic: Vec<f64> = out.net_grads.tensors().concat().into_iter().chain(out.log_std_grad.iter().copied()).collect();
        let n_net: usize = policy.net.num_parameters();
        let mut max_rel: f64 = 0.0;
        for k in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut p = policy.clone();
                if k < n_net {
                    let mut idx = k;
                    for t in p.net.tensors_mut() {
                        if idx < t.len() {
                            t[idx] += delta;
                            break;
                        }
                        idx -= t.len();
                    }
                } else {
                    p.log_std[k - n_net] += delta;
                }
                surrogate_loss(&p, &batch, 0.2, 0.01).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn clip_arithmetic() {
        let policy = small_policy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = toy_batch(&policy, &mut rng, 0.0);
        // ρ = 1 everywhere → loss = −mean(A).
        let out = surrogate_loss(&policy, &batch, 0.2, 0.0).unwrap();
        let mean_a = batch.advantages.iter().sum::<f64>() / 6.0;
        assert!((out.loss + mean_a).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 0.0);
        // ρ = 2 with A > 0: the clipped branch contributes 1.2·A.
        for (i, lp) in batch.old_log_probs.iter_mut().enumerate() {
            *lp -= 2f64.ln();
            batch.advantages[i] = 1.0;
        }
        let out = surrogate_loss(&policy, &batch, 0.2, 0.0).unwrap();
        assert!((out.loss + 1.2).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 1.0);
        assert!(out.log_std_grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn huge_clip_equals_vanilla_policy_gradient() {
        let policy = small_policy(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = toy_batch(&policy, &mut rng, 0.0);
        let out = surrogate_loss(&policy, &batch, 1e9, 0.0).unwrap();
        // Vanilla gradient of −mean(A·log π) at ρ = 1.
        let (mean, cache) = policy.net.forward(batch.obs.view()).unwrap();
        let mut gm = Array2::zeros(mean.raw_dim());
        let mut gls = vec![0.0; 2];
        for i in 0..6 {
            for k in 0..2 {
                let var = (2.0 * policy.log_std[k]).exp();
                let diff = batch.actions[[i, k]] - mean[[i, k]];
                gm[[i, k]] = -batch.advantages[i] * diff / var / 6.0;
                gls[k] += -batch.advantages[i] * (diff * diff / var - 1.0) / 6.0;
            }
        }
        let (g, _) = policy.net.backward(&cache, gm.view()).unwrap();
        for (a, b) in out.net_grads.tensors().concat().iter().zip(g.tensors().concat()) {
            assert!((a - b).abs() < 1e-12);
        }
        for k in 0..2 {
            assert!((out.log_std_grad[k] - gls[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn value_training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut value = value_network(4, &[16, 16], &mut rng).unwrap();
        let obs = Array2::from_shape_fn((32, 4), |_| rng.random_range(-1.0..1.0));
        let targets: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut adam = AdamState::for_mlp(&value, 1e-3);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let (loss, grads) = value_loss(&value, obs.view(), &targets).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
            adam.step_mlp(&mut value, &grads).unwrap();
        }
    }

    #[test]
    fn policy_actions_are_bounded_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut policy = GaussianPolicy::new(5, 3, &[8], 0.5, &mut rng).unwrap();
        policy.net.layers_mut()[1].weight.mapv_inplace(|w| w * 500.0);
        let artifact = PolicyArtifact { policy, obs_norm: Normalizer::new(5), obs_clip: 10.0, layout: "toy".into() };
        for _ in 0..200 {
            let obs: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
            let a = artifact.act(&obs, false, &mut rng).unwrap();
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(artifact.act(&obs, true, &mut rng).unwrap(), artifact.act(&obs, true, &mut rng).unwrap());
            let s1 = artifact.act(&obs, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(s1, artifact.act(&obs, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        }
        let back = PolicyArtifact::from_weight_file(&WeightFile::from_json(&artifact.to_weight_file().to_json()).unwrap()).unwrap();
        assert_eq!(back.to_weight_file(), artifact.to_weight_file());
    }

    fn toy_trainer(seed: u64) -> PpoTrainer<ToyVecEnv> {
        let cfg = PpoConfig { hidden: vec![32, 32], lr: 3e-3, horizon: 32, total_steps: 50_000, seed, ..Default::default() };
        PpoTrainer::new(ToyVecEnv::new(8, 16, seed), cfg, "x".into()).unwrap()
    }

    #[test]
    fn resume_reproduces_next_update_bit_exactly() {
        let mut a = toy_trainer(3);
        for _ in 0..3 {
            a.train_update().unwrap();
        }
        let ck = TrainerCheckpoint::from_json(&a.checkpoint().to_json()).unwrap();
        let mut b = PpoTrainer::resume(ToyVecEnv::new(8, 16, 999), ck).unwrap();
        let sa = a.train_update().unwrap();
        let sb = b.train_update().unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.checkpoint(), b.checkpoint());
    }

    #[test]
    fn learning_rate_decays_linearly() {
        let cfg = PpoConfig { hidden: vec![8], horizon: 8, total_steps: 640, lr: 1e-3, lr_final_fraction: 0.0, ..Default::default() };
        let mut t = PpoTrainer::new(ToyVecEnv::new(8, 16, 0), cfg, "x".into()).unwrap();
        t.train_update().unwrap();
        assert_eq!(t.adam.lr, 1e-3);
        for _ in 0..4 {
            t.train_update().unwrap();
        }
        // 4 of 10 updates done when the fifth one starts
        assert!((t.adam.lr - 6e-4).abs() < 1e-15, "{}", t.adam.lr);
        assert!(PpoConfig { lr_final_fraction: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn reward_curve_rows_are_monotone() {
        let mut t = toy_trainer(4);
        for _ in 0..3 {
            t.train_update().unwrap();
        }
        let csv = curve_csv(&t.curve);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "update,env_steps,mean_reward,clip_frac,kl");
        assert_eq!(lines.len(), 4);
        assert!(t.curve.windows(2).all(|w| w[1].env_steps > w[0].env_steps && w[1].update == w[0].update + 1));
        assert!(t.curve.iter().all(|r| (0.0..=1.0).contains(&r.clip_frac)));
    }

    #[test]
    fn toy_task_converges_within_50k_steps() {
        let mut t = toy_trainer(1);
        t.train(|_, _| true).unwrap();
        assert!(t.env_steps <= 50_000 + 8 * 32);
        let artifact = t.artifact();
        let eval = evaluate(&artifact, &mut ToyVecEnv::new(8, 16, 123), 200, true, 0).unwrap();
        assert!(eval.mean_reward >= 0.95, "mean reward {}", eval.mean_reward);
    }
}

//! Rollout collection, generalized advantage estimation, the clipped policy
//! objective, value and classification losses, and the full training loop
//! with annealed Adam updates.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_clip_limit, DatasetManifest};
use crate::env::{
    Action, EnvConfig, FeatureMap, GaussianInit, MeanClipScoreScorer, RewardConfig,
    TerminalScorer, VecEnv,
};
use crate::error::{Error, Result};
use crate::nets::{AgentMode, AgentNets, PoolInput, NUM_ACTIONS};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::derive_rng;

/// All training hyperparameters. Defaults follow the published schedule:
/// 8 parallel environments, 500k timesteps, epsilon 0.2, gamma 0.99,
/// advantage decay 0.95, value coefficient 0.5, entropy coefficient 0.01,
/// 4 epochs of 4 minibatches of 128 per iteration, cost 1 at lambda 0.05,
/// and a per-study clip bound of 200.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub total_timesteps: usize,
    pub num_envs: usize,
    pub rollout_length: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub minibatch_size: usize,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub lambda_advantage: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub critic_weight_decay: f64,
    pub max_grad_norm: f64,
    pub hidden_width: usize,
    pub n_max: usize,
    pub lambda_cost: f64,
    pub clip_cost: f64,
    pub keep_s0: bool,
    pub policy_to_pooler: bool,
    pub mode: AgentMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 500_000,
            num_envs: 8,
            rollout_length: 128,
            epochs: 4,
            minibatches: 4,
            minibatch_size: 128,
            clip_epsilon: 0.2,
            gamma: 0.99,
            lambda_advantage: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 2.5e-4,
            critic_weight_decay: 1e-4,
            max_grad_norm: 0.5,
            hidden_width: 128,
            n_max: 200,
            lambda_cost: 0.05,
            clip_cost: 1.0,
            keep_s0: true,
            policy_to_pooler: false,
            mode: AgentMode::Full,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_timesteps == 0 || self.num_envs == 0 || self.rollout_length == 0 {
            return Err(Error::Config("timesteps, envs and rollout length must be positive".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("epochs and minibatch shape must be positive".into()));
        }
        if self.minibatches * self.minibatch_size > self.num_envs * self.rollout_length {
            return Err(Error::Config(format!(
                "minibatches*minibatch_size = {} exceeds the rollout buffer of {}",
                self.minibatches * self.minibatch_size,
                self.num_envs * self.rollout_length
            )));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if self.clip_epsilon <= 0.0 {
            return Err(Error::Config("clip epsilon must be positive".into()));
        }
        if self.value_coef < 0.0
            || self.entropy_coef < 0.0
            || self.lambda_advantage < 0.0
            || self.lambda_cost < 0.0
            || self.clip_cost < 0.0
            || self.critic_weight_decay < 0.0
        {
            return Err(Error::Config("coefficients must be non-negative".into()));
        }
        if self.hidden_width == 0 || self.n_max == 0 {
            return Err(Error::Config("hidden width and n_max must be positive".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.total_timesteps.div_ceil(self.num_envs * self.rollout_length)
    }

    pub fn total_updates(&self) -> u64 {
        (self.iterations() * self.epochs * self.minibatches) as u64
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { keep_s0: self.keep_s0, ..EnvConfig::default() }
    }
}

/// One stored step of experience.
#[derive(Debug, Clone)]
pub struct Transition {
    pub pool: PoolInput,
    pub mask: [bool; NUM_ACTIONS],
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub label: u8,
}

/// Per-environment trajectory streams plus computed advantages and returns.
#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Vec<Transition>>,
    /// Value estimate of the state following each environment's last stored
    /// step (zeroed out by the done mask at terminals).
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize) -> Self {
        Self {
            steps: (0..num_envs).map(|_| Vec::new()).collect(),
            bootstrap: vec![0.0; num_envs],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

/// Backward-recursion advantage estimation:
/// `delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t)` and
/// `A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}`, with returns
/// `R_t = A_t + V(s_t)`.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) -> Result<()> {
    if buffer.total_len() == 0 {
        return Err(Error::Contract("advantage estimation over an empty buffer".into()));
    }
    buffer.advantages = buffer.steps.iter().map(|s| vec![0.0; s.len()]).collect();
    buffer.returns = buffer.steps.iter().map(|s| vec![0.0; s.len()]).collect();
    for (e, stream) in buffer.steps.iter().enumerate() {
        let mut a_next = 0.0;
        for t in (0..stream.len()).rev() {
            let not_done = if stream[t].done { 0.0 } else { 1.0 };
            let v_next =
                if t + 1 < stream.len() { stream[t + 1].value } else { buffer.bootstrap[e] };
            let delta = stream[t].reward + gamma * v_next * not_done - stream[t].value;
            a_next = delta + gamma * lambda * not_done * a_next;
            buffer.advantages[e][t] = a_next;
            buffer.returns[e][t] = a_next + stream[t].value;
        }
    }
    Ok(())
}

/// The clipped surrogate objective for one sample (to be maximized).
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    (ratio * advantage).min(clipped)
}

/// Mean clipped policy loss (negated objective) and the clip fraction.
pub fn policy_loss(ratios: &[f64], advantages: &[f64], epsilon: f64) -> (f64, f64) {
    let n = ratios.len() as f64;
    let mut objective = 0.0;
    let mut clipped = 0usize;
    for (&r, &a) in ratios.iter().zip(advantages) {
        objective += clipped_surrogate(r, a, epsilon);
        if (r - 1.0).abs() > epsilon {
            clipped += 1;
        }
    }
    (-objective / n, clipped as f64 / n)
}

/// Mean squared error between value estimates and returns.
pub fn value_loss(values: &[f64], returns: &[f64]) -> f64 {
    let n = values.len() as f64;
    values.iter().zip(returns).map(|(v, r)| (v - r) * (v - r)).sum::<f64>() / n
}

/// Clamped binary cross-entropy for a single prediction.
pub fn bce(y_hat: f64, label: u8) -> f64 {
    let y_hat = y_hat.clamp(1e-7, 1.0 - 1e-7);
    if label == 1 {
        -y_hat.ln()
    } else {
        -(1.0 - y_hat).ln()
    }
}

/// Mean clamped binary cross-entropy.
pub fn classification_loss(y_hats: &[f64], labels: &[u8]) -> f64 {
    let n = y_hats.len() as f64;
    y_hats.iter().zip(labels).map(|(&y, &l)| bce(y, l)).sum::<f64>() / n
}

/// In-place normalization to mean 0 and unit standard deviation, with a
/// floor of 1e-8 on the std.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Mean loss components over one iteration's updates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub classification_loss: f64,
    pub clip_fraction: f64,
}

/// The three Adam groups: the decayed critic group (pooler + value head),
/// the actor, and the predictor.
pub struct Optimizers {
    pub critic: Adam,
    pub actor: Adam,
    pub predictor: Adam,
}

impl Optimizers {
    pub fn new(cfg: &PpoConfig) -> Result<Self> {
        let base = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
        Ok(Self {
            critic: Adam::new(AdamConfig { weight_decay: cfg.critic_weight_decay, ..base })?,
            actor: Adam::new(base)?,
            predictor: Adam::new(base)?,
        })
    }
}

/// One combined update phase: `epochs` passes of `minibatches` shuffled
/// minibatches, each minimizing
/// `L_P - lambda_entropy H + lambda_V L_V + L_c` with routed gradients and
/// one annealed Adam step per minibatch.
#[allow(clippy::too_many_arguments)]
pub fn combined_update(
    nets: &mut AgentNets,
    opts: &mut Optimizers,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    update_counter: &mut u64,
    total_updates: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats> {
    let mut order: Vec<(usize, usize)> = buffer
        .steps
        .iter()
        .enumerate()
        .flat_map(|(e, s)| (0..s.len()).map(move |t| (e, t)))
        .collect();
    if order.is_empty() {
        return Err(Error::Contract("update phase over an empty buffer".into()));
    }
    let mut stats = LossStats::default();
    let mut n_updates = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in 0..cfg.minibatches {
            let batch = &order[mb * cfg.minibatch_size..(mb + 1) * cfg.minibatch_size];
            let m = batch.len() as f64;
            let mut adv: Vec<f64> =
                batch.iter().map(|&(e, t)| buffer.advantages[e][t]).collect();
            normalize_advantages(&mut adv);

            let mut surrogate_sum = 0.0;
            let mut entropy_sum = 0.0;
            let mut vloss_sum = 0.0;
            let mut closs_sum = 0.0;
            let mut clip_count = 0usize;

            for (j, &(e, t)) in batch.iter().enumerate() {
                let tr = &buffer.steps[e][t];
                let pool = nets.pool(&tr.pool)?;
                let value_cache = nets.value.forward(pool.h_bar())?;
                let value = value_cache.scalar_output();
                let (dist, actor_cache) = nets.actor_forward(pool.h_bar(), &tr.mask)?;

                let ratio = (dist.log_prob(tr.action) - tr.log_prob).exp();
                let a = adv[j];
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
                surrogate_sum += unclipped.min(clipped);
                entropy_sum += dist.entropy;
                if (ratio - 1.0).abs() > cfg.clip_epsilon {
                    clip_count += 1;
                }

                // d(loss)/d(actor logits): the surrogate only propagates
                // through the unclipped branch when the min selects it.
                let surrogate_active = unclipped <= clipped;
                let mut d_logits = [0.0; NUM_ACTIONS];
                for k in 0..NUM_ACTIONS {
                    if !tr.mask[k] {
                        continue;
                    }
                    let p = dist.probs[k];
                    let d_surr = if surrogate_active {
                        let indicator = if k == tr.action { 1.0 } else { 0.0 };
                        ratio * a * (indicator - p)
                    } else {
                        0.0
                    };
                    let d_entropy = if p > 0.0 { -p * (p.ln() + dist.entropy) } else { 0.0 };
                    d_logits[k] = (-d_surr - cfg.entropy_coef * d_entropy) / m;
                }

                let ret = buffer.returns[e][t];
                vloss_sum += (value - ret) * (value - ret);
                let d_value = cfg.value_coef * 2.0 * (value - ret) / m;

                let predictor = nets.predictor_forward(pool.h_bar())?;
                let predictor_pass = predictor.as_ref().map(|(y_hat, cache)| {
                    closs_sum += bce(*y_hat, tr.label);
                    (cache, (y_hat - f64::from(tr.label)) / m)
                });

                nets.backprop_routed(
                    &tr.pool,
                    &pool,
                    Some((&value_cache, d_value)),
                    Some((&actor_cache, &d_logits)),
                    predictor_pass,
                )?;
            }

            clip_grad_norm(&mut nets.all_params_mut(), cfg.max_grad_norm);
            opts.critic.step(&mut nets.critic_params_mut(), *update_counter, total_updates)?;
            opts.actor.step(&mut nets.actor_params_mut(), *update_counter, total_updates)?;
            if nets.predictor.is_some() {
                opts.predictor.step(
                    &mut nets.predictor_params_mut(),
                    *update_counter,
                    total_updates,
                )?;
            }
            *update_counter += 1;

            stats.policy_loss += -surrogate_sum / m;
            stats.entropy += entropy_sum / m;
            stats.value_loss += vloss_sum / m;
            stats.classification_loss += closs_sum / m;
            stats.clip_fraction += clip_count as f64 / m;
            n_updates += 1;
        }
    }
    let n = n_updates as f64;
    stats.policy_loss /= n;
    stats.entropy /= n;
    stats.value_loss /= n;
    stats.classification_loss /= n;
    stats.clip_fraction /= n;
    Ok(stats)
}

/// One row of the per-iteration training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub timesteps: usize,
    pub mean_episode_reward: f64,
    pub mean_episode_length: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub classification_loss: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,timesteps,mean_episode_reward,mean_episode_length,policy_loss,value_loss,entropy,classification_loss,clip_fraction,lr";

impl TrainLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.timesteps,
            self.mean_episode_reward,
            self.mean_episode_length,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.classification_loss,
            self.clip_fraction,
            self.lr
        )
    }
}

pub fn render_train_log(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainResult {
    pub nets: AgentNets,
    pub init: GaussianInit,
    pub reward: RewardConfig,
    pub log: Vec<TrainLogRow>,
}

/// Full training: alternate rollout collection and combined updates until the
/// configured number of timesteps, annealing the learning rate linearly to
/// zero. Deterministic for a fixed (dataset, config, seed).
pub fn train(manifest: &DatasetManifest, cfg: &PpoConfig, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    let reward = RewardConfig::from_manifest(manifest, cfg.lambda_cost, cfg.clip_cost)?;
    if cfg.mode == AgentMode::Ab1 && !manifest.all_clip_scores_present() {
        return Err(Error::Capability(
            "AB1 training requires clip_score on every clip".into(),
        ));
    }

    let mut work = manifest.clone();
    apply_clip_limit(&mut work, cfg.n_max, seed);
    let work = Arc::new(work);

    let fmap = FeatureMap::new(cfg.mode);
    let feature_dim = fmap.dim(work.d);
    let init = GaussianInit::estimate(&work, &fmap)?;
    let mut nets = AgentNets::init(
        cfg.mode,
        feature_dim,
        cfg.hidden_width,
        cfg.policy_to_pooler,
        &mut derive_rng(seed, 0x696e6974),
    )?;
    let mut venv = VecEnv::new(
        Arc::clone(&work),
        fmap,
        init.clone(),
        reward.clone(),
        cfg.env_config(),
        cfg.num_envs,
        seed,
    )?;
    let mut opts = Optimizers::new(cfg)?;
    let mut rng_actions = derive_rng(seed, 0x616374);
    let mut rng_shuffle = derive_rng(seed, 0x73687566);

    let iterations = cfg.iterations();
    let total_updates = cfg.total_updates();
    let mut update_counter = 0u64;
    let mut timesteps = 0usize;
    let mut log = Vec::with_capacity(iterations);

    for iteration in 1..=iterations {
        let lr_now = cfg.learning_rate
            * (1.0 - update_counter.min(total_updates) as f64 / total_updates as f64);
        let mut buffer = RolloutBuffer::new(cfg.num_envs);
        let mut episode_rewards = Vec::new();
        let mut episode_lengths = Vec::new();

        for _step in 0..cfg.rollout_length {
            for e in 0..cfg.num_envs {
                let pool_snapshot = venv.env(e).state().pool.clone();
                let mask = venv.env(e).mask();
                let label = venv.env(e).study().label;
                let (value, pool_cache, _) = nets.critic_forward(&pool_snapshot)?;
                let (dist, _) = nets.actor_forward(pool_cache.h_bar(), &mask)?;
                let action_idx = dist.sample(&mut rng_actions);
                let action = Action::from_index(action_idx)
                    .ok_or_else(|| Error::Contract("sampled action out of range".into()))?;
                let outcome = {
                    let scorer: &dyn TerminalScorer = match cfg.mode {
                        AgentMode::Ab1 => &MeanClipScoreScorer,
                        _ => &nets,
                    };
                    venv.env_mut(e).step(action, scorer)?
                };
                buffer.steps[e].push(Transition {
                    pool: pool_snapshot,
                    mask,
                    action: action_idx,
                    log_prob: dist.log_prob(action_idx),
                    value,
                    reward: outcome.reward,
                    done: outcome.done,
                    label,
                });
                if outcome.done {
                    episode_rewards.push(outcome.reward);
                    episode_lengths.push(outcome.clips_used.unwrap_or(0) as f64);
                    venv.env_mut(e).advance()?;
                }
            }
            timesteps += cfg.num_envs;
        }

        for e in 0..cfg.num_envs {
            let (value, _, _) = nets.critic_forward(&venv.env(e).state().pool)?;
            buffer.bootstrap[e] = value;
        }
        compute_gae(&mut buffer, cfg.gamma, cfg.lambda_advantage)?;
        let stats = combined_update(
            &mut nets,
            &mut opts,
            &buffer,
            cfg,
            &mut update_counter,
            total_updates,
            &mut rng_shuffle,
        )?;

        let mean_of = |xs: &[f64]| {
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        log.push(TrainLogRow {
            iteration,
            timesteps,
            mean_episode_reward: mean_of(&episode_rewards),
            mean_episode_length: mean_of(&episode_lengths),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            classification_loss: stats.classification_loss,
            clip_fraction: stats.clip_fraction,
            lr: lr_now,
        });
    }

    Ok(TrainResult { nets, init, reward, log })
}

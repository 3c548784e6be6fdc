//! The learned components: the per-dimension attention pooler that fuses a
//! variable number of clip embeddings into one state vector, the value
//! network that uses pooling as its front stage, the masked-categorical
//! actor, and the sigmoid predictor head — plus the gradient-routing rule
//! that trains the pooler only through the value and classification losses.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    masked_log_softmax, masked_softmax, Activation, Dense, Mlp, MlpCache, MlpSpec,
    OutputActivation, ParamTensor,
};

pub const NUM_ACTIONS: usize = 4;
pub const STOP_ACTION: usize = 3;

/// A variable-length bag of slot embeddings with a validity mask. Slots are
/// stored slot-major (each slot's feature vector is contiguous); invalid
/// slots are padding and contribute nothing to any head.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolInput {
    dim: usize,
    features: Vec<f64>,
    valid: Vec<bool>,
}

impl PoolInput {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), valid: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_slots(&self) -> usize {
        self.valid.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn push(&mut self, features: &[f64]) {
        assert_eq!(features.len(), self.dim, "slot feature length mismatch");
        self.features.extend_from_slice(features);
        self.valid.push(true);
    }

    /// Append a zeroed padding slot.
    pub fn push_padding(&mut self) {
        self.features.extend(std::iter::repeat(0.0).take(self.dim));
        self.valid.push(false);
    }

    /// Mark an existing slot as padding (used when the initial pseudo-slot is
    /// configured to drop out once real clips arrive).
    pub fn invalidate(&mut self, slot: usize) {
        self.valid[slot] = false;
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }
}

/// The pooled state vector plus the attention weights that produced it.
/// `beta` is slot-major like [`PoolInput`]; for every feature dimension the
/// weights over valid slots sum to 1 and are exactly 0 on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledState {
    pub h_bar: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Per-dimension softmax pooling over valid slots with caller-provided
/// weight vectors (one per slot, slot-major). Padding behaves as a weight of
/// negative infinity.
pub fn pool_with_weights(input: &PoolInput, weights: &[f64]) -> Result<PooledState> {
    let d = input.dim();
    let n = input.n_slots();
    if weights.len() != n * d {
        return Err(Error::Shape("weight matrix does not match pool input".into()));
    }
    if input.n_valid() == 0 {
        return Err(Error::Contract("pooling requires at least one valid slot".into()));
    }
    let mut beta = vec![0.0; n * d];
    let mut h_bar = vec![0.0; d];
    for k in 0..d {
        let mut max = f64::NEG_INFINITY;
        for t in input.valid_indices() {
            max = max.max(weights[t * d + k]);
        }
        let mut sum = 0.0;
        for t in input.valid_indices() {
            let e = (weights[t * d + k] - max).exp();
            beta[t * d + k] = e;
            sum += e;
        }
        let mut acc = 0.0;
        for t in input.valid_indices() {
            let b = beta[t * d + k] / sum;
            beta[t * d + k] = b;
            acc += b * input.slot(t)[k];
        }
        h_bar[k] = acc;
    }
    Ok(PooledState { h_bar, beta })
}

/// A single shared dense layer mapping each slot embedding to its weight
/// vector through tanh; sharing across slot positions keeps pooling
/// size-agnostic.
#[derive(Debug, Clone)]
pub struct AttentionPooler {
    pub dense: Dense,
    dim: usize,
}

impl AttentionPooler {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let mut w = ParamTensor::zeros(dim, dim);
        // Small gain keeps the tanh weight map unsaturated for embedding
        // inputs whose norm grows with sqrt(D).
        w.init_scaled_uniform(0.25, rng);
        Self { dense: Dense { w, b: ParamTensor::zeros(dim, 1) }, dim }
    }

    pub fn from_parts(dense: Dense, dim: usize) -> Result<Self> {
        if dense.w.rows() != dim || dense.w.cols() != dim || dense.b.rows() != dim {
            return Err(Error::Shape("attention parameters do not match feature dim".into()));
        }
        Ok(Self { dense, dim })
    }

    fn weights_for(&self, input: &PoolInput) -> Vec<f64> {
        let d = self.dim;
        let mut w = vec![0.0; input.n_slots() * d];
        let mut z = vec![0.0; d];
        for t in input.valid_indices() {
            self.dense.w.matvec(input.slot(t), &mut z);
            for ((wk, zk), bk) in w[t * d..(t + 1) * d].iter_mut().zip(&z).zip(self.dense.b.values())
            {
                *wk = (zk + bk).tanh();
            }
        }
        w
    }
}

/// How embeddings are fused into the unified state.
#[derive(Debug, Clone)]
pub enum Pooler {
    Attention(AttentionPooler),
    /// Plain masked mean over valid slots; no learned parameters.
    Mean,
}

/// Forward cache for a pooling pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub state: PooledState,
    /// tanh-activated weight vectors (slot-major); empty for mean pooling.
    weights: Vec<f64>,
}

impl PoolCache {
    pub fn h_bar(&self) -> &[f64] {
        &self.state.h_bar
    }
}

impl Pooler {
    pub fn forward(&self, input: &PoolInput) -> Result<PoolCache> {
        match self {
            Pooler::Attention(att) => {
                let weights = att.weights_for(input);
                let state = pool_with_weights(input, &weights)?;
                Ok(PoolCache { state, weights })
            }
            Pooler::Mean => {
                let n_valid = input.n_valid();
                if n_valid == 0 {
                    return Err(Error::Contract("pooling requires at least one valid slot".into()));
                }
                let d = input.dim();
                let share = 1.0 / n_valid as f64;
                let mut h_bar = vec![0.0; d];
                let mut beta = vec![0.0; input.n_slots() * d];
                for t in input.valid_indices() {
                    for k in 0..d {
                        h_bar[k] += input.slot(t)[k] * share;
                        beta[t * d + k] = share;
                    }
                }
                Ok(PoolCache { state: PooledState { h_bar, beta }, weights: Vec::new() })
            }
        }
    }

    /// Accumulate parameter gradients for `d_hbar` and return the gradient
    /// with respect to each slot's features (slot-major, zero on padding).
    pub fn backward(
        &mut self,
        input: &PoolInput,
        cache: &PoolCache,
        d_hbar: &[f64],
    ) -> Result<Vec<f64>> {
        let d = input.dim();
        if d_hbar.len() != d {
            return Err(Error::Shape("pooled gradient length mismatch".into()));
        }
        let n = input.n_slots();
        let beta = &cache.state.beta;
        let mut d_features = vec![0.0; n * d];
        match self {
            Pooler::Mean => {
                for t in input.valid_indices() {
                    for k in 0..d {
                        d_features[t * d + k] = d_hbar[k] * beta[t * d + k];
                    }
                }
            }
            Pooler::Attention(att) => {
                // d beta_t(k) = d_hbar(k) * h_t(k); softmax backward per
                // dimension gives d w_t(k), then the shared tanh dense layer.
                let mut d_w = vec![0.0; n * d];
                for k in 0..d {
                    let mut weighted_sum = 0.0;
                    for t in input.valid_indices() {
                        let db = d_hbar[k] * input.slot(t)[k];
                        weighted_sum += beta[t * d + k] * db;
                        d_w[t * d + k] = db;
                    }
                    for t in input.valid_indices() {
                        let b = beta[t * d + k];
                        d_w[t * d + k] = b * (d_w[t * d + k] - weighted_sum);
                        // Direct path of h_t(k) into h_bar(k).
                        d_features[t * d + k] += d_hbar[k] * b;
                    }
                }
                let mut d_pre = vec![0.0; d];
                for t in input.valid_indices() {
                    for k in 0..d {
                        let w = cache.weights[t * d + k];
                        d_pre[k] = d_w[t * d + k] * (1.0 - w * w);
                    }
                    att.dense.w.add_outer_to_grad(&d_pre, input.slot(t));
                    att.dense.b.add_to_grad(&d_pre);
                    att.dense.w.matvec_transpose_add(
                        &d_pre,
                        &mut d_features[t * d..(t + 1) * d],
                    );
                }
            }
        }
        Ok(d_features)
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Pooler::Attention(att) => vec![&att.dense.w, &att.dense.b],
            Pooler::Mean => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Pooler::Attention(att) => vec![&mut att.dense.w, &mut att.dense.b],
            Pooler::Mean => vec![],
        }
    }
}

/// Masked categorical distribution over {A4C, PLAX, PSAX, Stop}.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub probs: [f64; NUM_ACTIONS],
    pub log_probs: [f64; NUM_ACTIONS],
    pub entropy: f64,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64], mask: &[bool; NUM_ACTIONS]) -> Result<Self> {
        let p = masked_softmax(logits, mask)?;
        let lp = masked_log_softmax(logits, mask)?;
        let entropy = -p
            .iter()
            .zip(&lp)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &li)| pi * li)
            .sum::<f64>();
        let mut probs = [0.0; NUM_ACTIONS];
        let mut log_probs = [f64::NEG_INFINITY; NUM_ACTIONS];
        probs.copy_from_slice(&p);
        log_probs.copy_from_slice(&lp);
        Ok(Self { probs, log_probs, entropy })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let x: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_valid = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_valid = i;
                if x < acc {
                    return i;
                }
            }
        }
        last_valid
    }

    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }
}

/// Which state representation and pooling variant the agent runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    /// Embedding state with attention pooling and a learned predictor.
    Full,
    /// Per-clip feature is `[clip_score, one-hot view]`; the final score is
    /// the plain mean of processed clip scores (no predictor head).
    Ab1,
    /// Embedding state with mean pooling instead of attention.
    Ab2,
}

impl AgentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentMode::Full => "full",
            AgentMode::Ab1 => "ab1",
            AgentMode::Ab2 => "ab2",
        }
    }
}

impl FromStr for AgentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(AgentMode::Full),
            "ab1" => Ok(AgentMode::Ab1),
            "ab2" => Ok(AgentMode::Ab2),
            other => Err(Error::Config(format!("unknown agent mode {other:?}"))),
        }
    }
}

/// The four learned components plus the routing configuration.
#[derive(Debug, Clone)]
pub struct AgentNets {
    pub mode: AgentMode,
    pub feature_dim: usize,
    pub hidden_width: usize,
    /// When set, policy-loss gradients also flow into the pooler. Off by
    /// default: the pooler is trained jointly via the value and
    /// classification losses only.
    pub policy_to_pooler: bool,
    pub pooler: Pooler,
    pub value: Mlp,
    pub actor: Mlp,
    pub predictor: Option<Mlp>,
}

impl AgentNets {
    pub fn init(
        mode: AgentMode,
        feature_dim: usize,
        hidden_width: usize,
        policy_to_pooler: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = hidden_width;
        let pooler = match mode {
            AgentMode::Full | AgentMode::Ab1 => {
                Pooler::Attention(AttentionPooler::init(feature_dim, rng))
            }
            AgentMode::Ab2 => Pooler::Mean,
        };
        // The value network runs pooling as its front stage followed by four
        // dense layers; actor and predictor are three-layer heads on h_bar.
        let value_spec = MlpSpec::new(
            vec![feature_dim, h, h, h, 1],
            Activation::Tanh,
            OutputActivation::Identity,
        )?;
        let actor_spec = MlpSpec::new(
            vec![feature_dim, h, h, NUM_ACTIONS],
            Activation::Tanh,
            OutputActivation::Identity,
        )?;
        let value = Mlp::init(value_spec, 1.0, rng);
        let actor = Mlp::init(actor_spec, 0.01, rng);
        let predictor = match mode {
            AgentMode::Ab1 => None,
            _ => {
                let spec = MlpSpec::new(
                    vec![feature_dim, h, h, 1],
                    Activation::Tanh,
                    OutputActivation::Sigmoid,
                )?;
                Some(Mlp::init(spec, 1.0, rng))
            }
        };
        Ok(Self {
            mode,
            feature_dim,
            hidden_width,
            policy_to_pooler,
            pooler,
            value,
            actor,
            predictor,
        })
    }

    pub fn pool(&self, input: &PoolInput) -> Result<PoolCache> {
        self.pooler.forward(input)
    }

    /// Pooling plus the value head: returns V(s) with both caches.
    pub fn critic_forward(&self, input: &PoolInput) -> Result<(f64, PoolCache, MlpCache)> {
        let pool = self.pool(input)?;
        let vc = self.value.forward(pool.h_bar())?;
        Ok((vc.scalar_output(), pool, vc))
    }

    pub fn actor_forward(
        &self,
        h_bar: &[f64],
        mask: &[bool; NUM_ACTIONS],
    ) -> Result<(ActionDistribution, MlpCache)> {
        let cache = self.actor.forward(h_bar)?;
        let dist = ActionDistribution::from_logits(&cache.logits, mask)?;
        Ok((dist, cache))
    }

    /// Class probability from the predictor head. `None` in AB1 mode, where
    /// the study score is the mean of processed clip scores instead.
    pub fn predictor_forward(&self, h_bar: &[f64]) -> Result<Option<(f64, MlpCache)>> {
        match &self.predictor {
            Some(net) => {
                let cache = net.forward(h_bar)?;
                Ok(Some((cache.scalar_output(), cache)))
            }
            None => Ok(None),
        }
    }

    /// Apply the routing rule for one sample's gradients.
    ///
    /// Policy/entropy gradients (given w.r.t. actor logits) update the actor
    /// only; the value gradient flows through the value head into the pooler;
    /// the classification gradient (w.r.t. the predictor's output logit)
    /// flows through the predictor head into the pooler.
    pub fn backprop_routed(
        &mut self,
        input: &PoolInput,
        pool_cache: &PoolCache,
        value_pass: Option<(&MlpCache, f64)>,
        actor_pass: Option<(&MlpCache, &[f64; NUM_ACTIONS])>,
        predictor_pass: Option<(&MlpCache, f64)>,
    ) -> Result<()> {
        let d = self.feature_dim;
        let mut d_hbar = vec![0.0; d];
        if let Some((cache, d_logits)) = actor_pass {
            let into_input = self.actor.backward(cache, d_logits)?;
            if self.policy_to_pooler {
                for (acc, g) in d_hbar.iter_mut().zip(&into_input) {
                    *acc += g;
                }
            }
        }
        let mut pooled_loss = false;
        if let Some((cache, d_value)) = value_pass {
            let into_input = self.value.backward(cache, &[d_value])?;
            for (acc, g) in d_hbar.iter_mut().zip(&into_input) {
                *acc += g;
            }
            pooled_loss = true;
        }
        if let Some((cache, d_logit)) = predictor_pass {
            let net = self
                .predictor
                .as_mut()
                .ok_or_else(|| Error::Contract("predictor gradients without a predictor".into()))?;
            let into_input = net.backward(cache, &[d_logit])?;
            for (acc, g) in d_hbar.iter_mut().zip(&into_input) {
                *acc += g;
            }
            pooled_loss = true;
        }
        if pooled_loss || self.policy_to_pooler {
            self.pooler.backward(input, pool_cache, &d_hbar)?;
        }
        Ok(())
    }

    /// Critic group (pooler + value head): the decayed parameter group.
    pub fn critic_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.pooler.params_mut();
        out.extend(self.value.params_mut());
        out
    }

    pub fn actor_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.actor.params_mut()
    }

    pub fn predictor_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.predictor.as_mut().map(|n| n.params_mut()).unwrap_or_default()
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.pooler.params_mut();
        out.extend(self.value.params_mut());
        out.extend(self.actor.params_mut());
        if let Some(p) = self.predictor.as_mut() {
            out.extend(p.params_mut());
        }
        out
    }

    pub fn clear_grads(&mut self) {
        for p in self.all_params_mut() {
            p.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;

    fn single_slot_input(values: &[f64]) -> PoolInput {
        let mut input = PoolInput::new(values.len());
        input.push(values);
        input
    }

    #[test]
    fn singleton_pooling_is_identity() {
        let input = single_slot_input(&[0.4, -1.2, 3.0]);
        let state = pool_with_weights(&input, &[0.7, -2.0, 5.0]).unwrap();
        assert_eq!(state.h_bar, vec![0.4, -1.2, 3.0]);
        assert_eq!(state.beta, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn equal_weights_give_elementwise_mean() {
        let mut input = PoolInput::new(2);
        input.push(&[1.0, 4.0]);
        input.push(&[3.0, 0.0]);
        let state = pool_with_weights(&input, &[0.3, 0.3, 0.3, 0.3]).unwrap();
        assert_abs_diff_eq!(state.h_bar[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(state.h_bar[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn hand_computed_one_dimensional_case() {
        // h = [1, 3], w = [0, ln 3]: beta = [0.25, 0.75], pooled = 2.5.
        let mut input = PoolInput::new(1);
        input.push(&[1.0]);
        input.push(&[3.0]);
        let state = pool_with_weights(&input, &[0.0, 3.0f64.ln()]).unwrap();
        assert_abs_diff_eq!(state.beta[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(state.beta[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(state.h_bar[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn padding_gets_zero_beta_and_no_influence() {
        let mut input = PoolInput::new(2);
        input.push(&[1.0, 2.0]);
        input.push_padding();
        // Garbage in the padded slot must not change anything.
        input.slot_mut(1).copy_from_slice(&[99.0, -99.0]);
        let state = pool_with_weights(&input, &[0.0, 0.0, 50.0, 50.0]).unwrap();
        assert_eq!(state.h_bar, vec![1.0, 2.0]);
        assert_eq!(&state.beta[2..], &[0.0, 0.0]);
    }

    #[test]
    fn no_valid_slots_is_an_error() {
        let mut input = PoolInput::new(1);
        input.push_padding();
        assert!(pool_with_weights(&input, &[0.0]).is_err());
    }

    #[test]
    fn beta_columns_sum_to_one_per_dimension() {
        let mut rng = derive_rng(3, 1);
        let att = AttentionPooler::init(4, &mut rng);
        let pooler = Pooler::Attention(att);
        let mut input = PoolInput::new(4);
        for _ in 0..6 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            input.push(&v);
        }
        input.push_padding();
        let cache = pooler.forward(&input).unwrap();
        for k in 0..4 {
            let sum: f64 = (0..input.n_slots()).map(|t| cache.state.beta[t * 4 + k]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn permuting_valid_slots_leaves_h_bar_unchanged() {
        let mut rng = derive_rng(4, 2);
        let pooler = Pooler::Attention(AttentionPooler::init(3, &mut rng));
        let slots: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut input = PoolInput::new(3);
        for s in &slots {
            input.push(s);
        }
        let mut permuted = PoolInput::new(3);
        for idx in [3, 0, 4, 1, 2] {
            permuted.push(&slots[idx]);
        }
        let a = pooler.forward(&input).unwrap();
        let b = pooler.forward(&permuted).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(a.state.h_bar[k], b.state.h_bar[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_pooler_averages_valid_slots() {
        let pooler = Pooler::Mean;
        let mut input = PoolInput::new(2);
        input.push(&[1.0, 3.0]);
        input.push(&[3.0, 1.0]);
        input.push_padding();
        let cache = pooler.forward(&input).unwrap();
        assert_eq!(cache.state.h_bar, vec![2.0, 2.0]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = derive_rng(11, 5);
        for _ in 0..10 {
            let d = 3;
            let mut pooler = Pooler::Attention(AttentionPooler::init(d, &mut rng));
            let mut input = PoolInput::new(d);
            for _ in 0..4 {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                input.push(&v);
            }
            input.push_padding();
            let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

            let cache = pooler.forward(&input).unwrap();
            for p in pooler.params_mut() {
                p.clear_grad();
            }
            pooler.backward(&input, &cache, &probe).unwrap();
            let analytic: Vec<Vec<f64>> =
                pooler.params().iter().map(|p| p.grad().to_vec()).collect();

            let h = 1e-5;
            let loss = |pooler: &Pooler| -> f64 {
                let c = pooler.forward(&input).unwrap();
                c.state.h_bar.iter().zip(&probe).map(|(x, p)| x * p).sum()
            };
            for pi in 0..2 {
                for k in 0..pooler.params()[pi].len() {
                    let orig = pooler.params()[pi].values()[k];
                    pooler.params_mut()[pi].values_mut()[k] = orig + h;
                    let up = loss(&pooler);
                    pooler.params_mut()[pi].values_mut()[k] = orig - h;
                    let down = loss(&pooler);
                    pooler.params_mut()[pi].values_mut()[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[pi][k];
                    let rel = (a - fd).abs() / f64::max(1e-4, a.abs().max(fd.abs()));
                    assert!(rel < 1e-4, "attention param {pi}[{k}]: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn uniform_logits_make_uniform_distribution() {
        let dist = ActionDistribution::from_logits(&[0.0; 4], &[true; 4]).unwrap();
        for p in dist.probs {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(dist.entropy, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn stop_only_mask_is_deterministic() {
        let dist =
            ActionDistribution::from_logits(&[1.0, 2.0, 3.0, 0.5], &[false, false, false, true])
                .unwrap();
        assert_eq!(dist.probs[STOP_ACTION], 1.0);
        assert_abs_diff_eq!(dist.entropy, 0.0, epsilon = 1e-12);
        let mut rng = derive_rng(0, 0);
        assert_eq!(dist.sample(&mut rng), STOP_ACTION);
    }

    #[test]
    fn softmax_values_from_shifted_logit() {
        // logits [1, 1, 1, 1 - ln 2]: probabilities proportional to
        // [1, 1, 1, 1/2], i.e. [2/7, 2/7, 2/7, 1/7].
        let logits = [1.0, 1.0, 1.0, 1.0 - 2.0f64.ln()];
        let dist = ActionDistribution::from_logits(&logits, &[true; 4]).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(dist.probs[i], 2.0 / 7.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(dist.probs[3], 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_bounded_by_log_unmasked() {
        let mut rng = derive_rng(21, 9);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut mask = [false; 4];
            let n_open = rng.random_range(1..=4usize);
            let mut open = 0;
            while open < n_open {
                let i = rng.random_range(0..4);
                if !mask[i] {
                    mask[i] = true;
                    open += 1;
                }
            }
            let dist = ActionDistribution::from_logits(&logits, &mask).unwrap();
            assert!(dist.entropy >= -1e-12);
            assert!(dist.entropy <= (n_open as f64).ln() + 1e-12);
        }
    }

    fn tiny_nets(mode: AgentMode) -> AgentNets {
        let mut rng = derive_rng(77, 3);
        AgentNets::init(mode, 4, 8, false, &mut rng).unwrap()
    }

    #[test]
    fn critic_on_single_clip_composites_pool_and_head() {
        // Value head replaced by a sum over h_bar: pooling a single slot is
        // the identity, so V = sum(h).
        let mut nets = tiny_nets(AgentMode::Full);
        let spec = MlpSpec::new(vec![2, 1], Activation::Tanh, OutputActivation::Identity).unwrap();
        let w = ParamTensor::from_values(1, 2, vec![1.0, 1.0]).unwrap();
        let b = ParamTensor::zeros(1, 1);
        nets.value = Mlp::from_parts(spec, vec![Dense { w, b }]).unwrap();
        nets.pooler = {
            let mut rng = derive_rng(0, 0);
            Pooler::Attention(AttentionPooler::init(2, &mut rng))
        };
        nets.feature_dim = 2;
        let input = single_slot_input(&[1.0, 2.0]);
        let (v, _, _) = nets.critic_forward(&input).unwrap();
        assert_abs_diff_eq!(v, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn padded_slots_do_not_change_any_head() {
        let nets = tiny_nets(AgentMode::Full);
        let mut rng = derive_rng(8, 8);
        let mut a = PoolInput::new(4);
        for _ in 0..3 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            a.push(&v);
        }
        let mut b = a.clone();
        b.push_padding();
        b.slot_mut(3).copy_from_slice(&[7.0, -7.0, 7.0, -7.0]);

        let (va, pa, _) = nets.critic_forward(&a).unwrap();
        let (vb, pb, _) = nets.critic_forward(&b).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());
        let mask = [true; 4];
        let (da, _) = nets.actor_forward(pa.h_bar(), &mask).unwrap();
        let (db, _) = nets.actor_forward(pb.h_bar(), &mask).unwrap();
        for i in 0..4 {
            assert_eq!(da.probs[i].to_bits(), db.probs[i].to_bits());
        }
        let (ya, _) = nets.predictor_forward(pa.h_bar()).unwrap().unwrap();
        let (yb, _) = nets.predictor_forward(pb.h_bar()).unwrap().unwrap();
        assert_eq!(ya.to_bits(), yb.to_bits());
    }

    #[test]
    fn zero_predictor_outputs_half() {
        let mut nets = tiny_nets(AgentMode::Full);
        if let Some(p) = nets.predictor.as_mut() {
            for t in p.params_mut() {
                t.values_mut().fill(0.0);
            }
        }
        let input = single_slot_input(&[0.3, -0.4, 0.2, 0.9]);
        let pool = nets.pool(&input).unwrap();
        let (y_hat, _) = nets.predictor_forward(pool.h_bar()).unwrap().unwrap();
        assert_eq!(y_hat, 0.5);
    }

    #[test]
    fn predictor_logit_ln3_gives_three_quarters() {
        use crate::nn::sigmoid;
        assert_abs_diff_eq!(sigmoid(3.0f64.ln()), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn pure_policy_loss_leaves_pooler_and_value_untouched() {
        let mut nets = tiny_nets(AgentMode::Full);
        let input = single_slot_input(&[0.5, -0.5, 1.0, 0.0]);
        let pool = nets.pool(&input).unwrap();
        let mask = [true; 4];
        let (_, actor_cache) = nets.actor_forward(pool.h_bar(), &mask).unwrap();
        nets.clear_grads();
        let d_logits = [0.7, -0.3, 0.1, -0.5];
        nets.backprop_routed(&input, &pool, None, Some((&actor_cache, &d_logits)), None).unwrap();
        for p in nets.pooler.params() {
            assert!(p.grad().iter().all(|&g| g == 0.0));
        }
        for p in nets.value.params() {
            assert!(p.grad().iter().all(|&g| g == 0.0));
        }
        assert!(nets.actor.params().iter().any(|p| p.grad().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn pure_value_loss_leaves_actor_untouched() {
        let mut nets = tiny_nets(AgentMode::Full);
        // Two valid slots: with a single slot the per-dimension softmax is
        // constant and attention gradients are legitimately zero.
        let mut input = PoolInput::new(4);
        input.push(&[0.5, -0.5, 1.0, 0.0]);
        input.push(&[-0.2, 0.8, 0.1, -0.9]);
        let (_, pool, vc) = nets.critic_forward(&input).unwrap();
        nets.clear_grads();
        nets.backprop_routed(&input, &pool, Some((&vc, 1.0)), None, None).unwrap();
        for p in nets.actor.params() {
            assert!(p.grad().iter().all(|&g| g == 0.0));
        }
        assert!(nets.pooler.params().iter().any(|p| p.grad().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn combined_loss_pooler_gradient_matches_finite_differences() {
        // Loss = V(s) + BCE(predict(s), 1) with the actor held fixed; the
        // pooler gradient must equal the sum of both paths.
        let mut rng = derive_rng(5, 5);
        let mut nets = tiny_nets(AgentMode::Full);
        let mut input = PoolInput::new(4);
        for _ in 0..3 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            input.push(&v);
        }

        let loss = |nets: &AgentNets| -> f64 {
            let pool = nets.pool(&input).unwrap();
            let vc = nets.value.forward(pool.h_bar()).unwrap();
            let (y_hat, _) = nets.predictor_forward(pool.h_bar()).unwrap().unwrap();
            vc.scalar_output() - y_hat.max(1e-12).ln()
        };

        let pool = nets.pool(&input).unwrap();
        let vc = nets.value.forward(pool.h_bar()).unwrap();
        let (y_hat, pc) = nets.predictor_forward(pool.h_bar()).unwrap().unwrap();
        nets.clear_grads();
        // d/d y_hat of -ln(y_hat) chained through sigmoid: y_hat - 1.
        nets.backprop_routed(&input, &pool, Some((&vc, 1.0)), None, Some((&pc, y_hat - 1.0)))
            .unwrap();
        let analytic: Vec<Vec<f64>> =
            nets.pooler.params().iter().map(|p| p.grad().to_vec()).collect();

        let h = 1e-5;
        for pi in 0..2 {
            for k in 0..nets.pooler.params()[pi].len() {
                let orig = nets.pooler.params()[pi].values()[k];
                nets.pooler.params_mut()[pi].values_mut()[k] = orig + h;
                let up = loss(&nets);
                nets.pooler.params_mut()[pi].values_mut()[k] = orig - h;
                let down = loss(&nets);
                nets.pooler.params_mut()[pi].values_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[pi][k];
                let rel = (a - fd).abs() / f64::max(1e-4, a.abs().max(fd.abs()));
                assert!(rel < 1e-4, "pooler param {pi}[{k}]: {a} vs {fd}");
            }
        }
    }
}

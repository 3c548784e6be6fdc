//! The per-study decision process: episodes over a bag of clips, with
//! view-request and stop actions, action masking, and a terminal reward that
//! trades classification accuracy against per-clip processing cost.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, DatasetManifest, StudyRecord, ViewLabel};
use crate::error::{Error, Result};
use crate::nets::{AgentMode, AgentNets, PoolInput, NUM_ACTIONS, STOP_ACTION};
use crate::rng::derive_rng;

/// An agent action: request one clip of a view, or stop and predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    View(ViewLabel),
    Stop,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::View(v) => v.index(),
            Action::Stop => STOP_ACTION,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0..=2 => ViewLabel::from_index(i).map(Action::View),
            STOP_ACTION => Some(Action::Stop),
            _ => None,
        }
    }
}

/// Terminal-reward parameters. `class_weight[y] = 1 / p(y)` estimated from
/// the training manifest; rewards are a training-only construct, so the
/// training prior is used even when stepping episodes on other data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_cost: f64,
    pub clip_cost: f64,
    pub class_weight: [f64; 2],
}

impl RewardConfig {
    pub fn from_manifest(manifest: &DatasetManifest, lambda_cost: f64, clip_cost: f64) -> Result<Self> {
        if lambda_cost < 0.0 || clip_cost < 0.0 {
            return Err(Error::Config("costs must be non-negative".into()));
        }
        let prior = manifest.class_prior;
        if prior[0] == 0.0 || prior[1] == 0.0 {
            return Err(Error::Validation(
                "dataset needs at least one study per class; the class weight 1/p(y) is undefined"
                    .into(),
            ));
        }
        Ok(Self { lambda_cost, clip_cost, class_weight: [1.0 / prior[0], 1.0 / prior[1]] })
    }

    /// Terminal reward: accuracy term minus the accumulated clip cost. The
    /// initial pseudo-slot costs nothing; only real clips are charged.
    pub fn terminal_reward(&self, label: u8, y_pred: u8, clips_processed: usize) -> f64 {
        let hit = if y_pred == label { self.class_weight[label as usize] } else { 0.0 };
        hit - self.lambda_cost * self.clip_cost * clips_processed as f64
    }
}

/// Elementwise Gaussian used to draw the initial pseudo-embedding, with mean
/// and variance estimated per dimension from all training-clip features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianInit {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianInit {
    pub fn estimate(manifest: &DatasetManifest, fmap: &FeatureMap) -> Result<GaussianInit> {
        let dim = fmap.dim(manifest.d);
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        let mut count = 0.0;
        for study in &manifest.studies {
            for clip in &study.clips {
                let f = fmap.features(clip)?;
                count += 1.0;
                for k in 0..dim {
                    let delta = f[k] - mean[k];
                    mean[k] += delta / count;
                    m2[k] += delta * (f[k] - mean[k]);
                }
            }
        }
        if count == 0.0 {
            return Err(Error::Validation("cannot estimate init from an empty dataset".into()));
        }
        let var = m2.iter().map(|v| v / count).collect();
        Ok(GaussianInit { mean, var })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| Normal::new(m, v.sqrt()).unwrap().sample(rng))
            .collect()
    }
}

/// Maps a clip to the per-slot feature vector for the configured agent mode.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub mode: AgentMode,
}

impl FeatureMap {
    pub fn new(mode: AgentMode) -> Self {
        Self { mode }
    }

    pub fn dim(&self, embedding_dim: usize) -> usize {
        match self.mode {
            AgentMode::Full | AgentMode::Ab2 => embedding_dim,
            // [clip_score, one-hot view]
            AgentMode::Ab1 => 4,
        }
    }

    pub fn features(&self, clip: &ClipRecord) -> Result<Vec<f64>> {
        match self.mode {
            AgentMode::Full | AgentMode::Ab2 => Ok(clip.embedding.clone()),
            AgentMode::Ab1 => {
                let score = clip.clip_score.ok_or_else(|| {
                    Error::Capability(format!(
                        "clip {} has no clip_score; AB1 state features require per-clip scores",
                        clip.clip_id
                    ))
                })?;
                let mut f = vec![score, 0.0, 0.0, 0.0];
                f[1 + clip.view.index()] = 1.0;
                Ok(f)
            }
        }
    }
}

/// Produces the study-level class probability at episode termination.
pub trait TerminalScorer {
    fn score(&self, pool: &PoolInput, state: &EpisodeState, study: &StudyRecord) -> Result<f64>;
}

impl TerminalScorer for AgentNets {
    fn score(&self, pool: &PoolInput, _state: &EpisodeState, _study: &StudyRecord) -> Result<f64> {
        let cache = self.pool(pool)?;
        match self.predictor_forward(cache.h_bar())? {
            Some((y_hat, _)) => Ok(y_hat),
            None => Err(Error::Contract(
                "agent has no predictor head; use a score-based terminal scorer".into(),
            )),
        }
    }
}

/// AB1 terminal rule: the prediction is the mean clip score over processed
/// clips.
pub struct MeanClipScoreScorer;

impl TerminalScorer for MeanClipScoreScorer {
    fn score(&self, _pool: &PoolInput, state: &EpisodeState, study: &StudyRecord) -> Result<f64> {
        if state.processed.is_empty() {
            return Ok(0.5);
        }
        let mut sum = 0.0;
        for &idx in &state.processed {
            sum += study.clips[idx].clip_score.ok_or_else(|| {
                Error::Capability(format!(
                    "clip {} has no clip_score for mean-score termination",
                    study.clips[idx].clip_id
                ))
            })?;
        }
        Ok(sum / state.processed.len() as f64)
    }
}

/// Episode state: the ordered processed clips, the pool input holding the
/// pseudo-slot plus processed features, and the per-view remaining clips.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub study_idx: usize,
    pub pool: PoolInput,
    /// Clip indices into the study, in processing order.
    pub processed: Vec<usize>,
    /// Unprocessed clip indices per view.
    remaining: [Vec<usize>; 3],
    /// Number of real clips processed so far.
    pub t: usize,
}

impl EpisodeState {
    pub fn remaining_count(&self, view: ViewLabel) -> usize {
        self.remaining[view.index()].len()
    }

    fn remaining_total(&self) -> usize {
        self.remaining.iter().map(Vec::len).sum()
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    /// Mask for the next decision; all false when done.
    pub mask: [bool; NUM_ACTIONS],
    /// Set at terminal steps.
    pub y_hat: Option<f64>,
    pub y_pred: Option<u8>,
    /// Clips processed at termination (for episode-length accounting).
    pub clips_used: Option<usize>,
}

/// How the environment picks a concrete clip when a view is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipPick {
    /// Uniformly at random without replacement (matches training).
    Uniform,
    /// In stored clip order.
    Sequential,
}

/// Per-episode behavior switches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Keep the initial pseudo-slot in the pool for the whole episode; when
    /// false it is dropped once the first real clip arrives.
    pub keep_s0: bool,
    pub clip_pick: ClipPick,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { keep_s0: true, clip_pick: ClipPick::Uniform }
    }
}

/// A single sequential environment bound to one dataset. Studies are drawn
/// from a shuffled stream that reshuffles on exhaustion, so every pass over
/// the data sees a fresh study order.
pub struct EpisodeEnv {
    manifest: Arc<DatasetManifest>,
    fmap: FeatureMap,
    init: GaussianInit,
    reward: RewardConfig,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    state: EpisodeState,
    mask: [bool; NUM_ACTIONS],
}

impl EpisodeEnv {
    pub fn new(
        manifest: Arc<DatasetManifest>,
        fmap: FeatureMap,
        init: GaussianInit,
        reward: RewardConfig,
        cfg: EnvConfig,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..manifest.studies.len()).collect();
        order.shuffle(&mut rng);
        let first = order[0];
        let (state, mask) = reset_episode(&manifest, first, &fmap, &init, &cfg, &mut rng)?;
        Ok(Self { manifest, fmap, init, reward, cfg, rng, order, cursor: 0, state, mask })
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn mask(&self) -> [bool; NUM_ACTIONS] {
        self.mask
    }

    pub fn study(&self) -> &StudyRecord {
        &self.manifest.studies[self.state.study_idx]
    }

    /// Start an episode on an explicit study with a caller-provided RNG
    /// stream; evaluation derives one stream per (seed, study) pair.
    pub fn reset_to_with_rng(&mut self, study_idx: usize, rng: ChaCha8Rng) -> Result<()> {
        self.rng = rng;
        self.reset_to(study_idx)
    }

    /// Start an episode on an explicit study (testing and evaluation entry
    /// point; training uses the stream via [`EpisodeEnv::advance`]).
    pub fn reset_to(&mut self, study_idx: usize) -> Result<()> {
        let (state, mask) =
            reset_episode(&self.manifest, study_idx, &self.fmap, &self.init, &self.cfg, &mut self.rng)?;
        self.state = state;
        self.mask = mask;
        Ok(())
    }

    /// Auto-reset on the next study in the stream.
    pub fn advance(&mut self) -> Result<()> {
        use rand::seq::SliceRandom;
        self.cursor += 1;
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.reset_to(idx)
    }

    pub fn step(&mut self, action: Action, scorer: &dyn TerminalScorer) -> Result<StepOutcome> {
        step_episode(
            &self.manifest,
            &mut self.state,
            &mut self.mask,
            action,
            scorer,
            &self.fmap,
            &self.reward,
            &self.cfg,
            &mut self.rng,
        )
    }
}

fn initial_mask(state: &EpisodeState, study: &StudyRecord) -> [bool; NUM_ACTIONS] {
    compute_mask(state, study)
}

/// Masking rules: a view is available iff it has unprocessed clips; Stop is
/// withheld until `min(2, total clips)` have been processed.
fn compute_mask(state: &EpisodeState, study: &StudyRecord) -> [bool; NUM_ACTIONS] {
    let mut mask = [false; NUM_ACTIONS];
    for view in ViewLabel::ALL {
        mask[view.index()] = state.remaining_count(view) > 0;
    }
    let must_process = study.clips.len().min(2);
    mask[STOP_ACTION] = state.processed.len() >= must_process;
    mask
}

fn reset_episode(
    manifest: &DatasetManifest,
    study_idx: usize,
    fmap: &FeatureMap,
    init: &GaussianInit,
    _cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EpisodeState, [bool; NUM_ACTIONS])> {
    let study = manifest
        .studies
        .get(study_idx)
        .ok_or_else(|| Error::Contract(format!("study index {study_idx} out of range")))?;
    if study.clips.is_empty() {
        return Err(Error::Validation(format!("study {} is empty", study.study_id)));
    }
    let dim = fmap.dim(manifest.d);
    if init.mean.len() != dim {
        return Err(Error::Shape("pseudo-embedding init does not match feature dim".into()));
    }
    let mut pool = PoolInput::new(dim);
    pool.push(&init.sample(rng));
    let mut remaining: [Vec<usize>; 3] = Default::default();
    for (i, clip) in study.clips.iter().enumerate() {
        remaining[clip.view.index()].push(i);
    }
    let state = EpisodeState { study_idx, pool, processed: Vec::new(), remaining, t: 0 };
    let mask = initial_mask(&state, study);
    Ok((state, mask))
}

#[allow(clippy::too_many_arguments)]
fn step_episode(
    manifest: &DatasetManifest,
    state: &mut EpisodeState,
    mask: &mut [bool; NUM_ACTIONS],
    action: Action,
    scorer: &dyn TerminalScorer,
    fmap: &FeatureMap,
    reward: &RewardConfig,
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let study = &manifest.studies[state.study_idx];
    if !mask[action.index()] {
        return Err(Error::Contract(format!(
            "action {:?} is masked at step {} of study {}",
            action, state.t, study.study_id
        )));
    }
    match action {
        Action::Stop => terminate(state, mask, study, scorer, reward),
        Action::View(view) => {
            let bucket = &mut state.remaining[view.index()];
            let pick = match cfg.clip_pick {
                ClipPick::Uniform => rng.random_range(0..bucket.len()),
                ClipPick::Sequential => 0,
            };
            let clip_idx = bucket.remove(pick);
            let features = fmap.features(&study.clips[clip_idx])?;
            if !cfg.keep_s0 && state.t == 0 {
                state.pool.invalidate(0);
            }
            state.pool.push(&features);
            state.processed.push(clip_idx);
            state.t += 1;
            if state.remaining_total() == 0 {
                // Exhaustion forces termination with the standard reward.
                terminate(state, mask, study, scorer, reward)
            } else {
                *mask = compute_mask(state, study);
                Ok(StepOutcome {
                    reward: 0.0,
                    done: false,
                    mask: *mask,
                    y_hat: None,
                    y_pred: None,
                    clips_used: None,
                })
            }
        }
    }
}

fn terminate(
    state: &mut EpisodeState,
    mask: &mut [bool; NUM_ACTIONS],
    study: &StudyRecord,
    scorer: &dyn TerminalScorer,
    reward: &RewardConfig,
) -> Result<StepOutcome> {
    let y_hat = scorer.score(&state.pool, state, study)?;
    let y_pred = u8::from(y_hat >= 0.5);
    *mask = [false; NUM_ACTIONS];
    Ok(StepOutcome {
        reward: reward.terminal_reward(study.label, y_pred, state.processed.len()),
        done: true,
        mask: *mask,
        y_hat: Some(y_hat),
        y_pred: Some(y_pred),
        clips_used: Some(state.processed.len()),
    })
}

/// A batch of independent environments with per-environment RNG streams and
/// study iterators; stepping is order-deterministic by environment index.
pub struct VecEnv {
    envs: Vec<EpisodeEnv>,
}

impl VecEnv {
    pub fn new(
        manifest: Arc<DatasetManifest>,
        fmap: FeatureMap,
        init: GaussianInit,
        reward: RewardConfig,
        cfg: EnvConfig,
        num_envs: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::Config("need at least one environment".into()));
        }
        let envs = (0..num_envs)
            .map(|e| {
                EpisodeEnv::new(
                    Arc::clone(&manifest),
                    fmap,
                    init.clone(),
                    reward.clone(),
                    cfg,
                    derive_rng(master_seed, 0x656e76 + e as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { envs })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn env(&self, i: usize) -> &EpisodeEnv {
        &self.envs[i]
    }

    pub fn env_mut(&mut self, i: usize) -> &mut EpisodeEnv {
        &mut self.envs[i]
    }
}

//! Study-level metrics (sensitivity, specificity, AUC, cost%), the benchmark
//! policies, the high-variability study subset, and report rendering for the
//! summary, trace and figure-data CSV files.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_clip_limit, DatasetManifest, StudyRecord, ViewLabel};
use crate::env::{
    Action, EnvConfig, EpisodeEnv, FeatureMap, GaussianInit, MeanClipScoreScorer, RewardConfig,
    TerminalScorer,
};
use crate::error::{Error, Result};
use crate::nets::{AgentMode, AgentNets};
use crate::rng::{derive_rng, fnv1a64};

/// The four headline metrics for one policy on one study set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub cost_pct: f64,
}

impl MetricSet {
    pub fn nan() -> Self {
        Self { sensitivity: f64::NAN, specificity: f64::NAN, auc: f64::NAN, cost_pct: f64::NAN }
    }
}

/// Sensitivity and specificity at a decision threshold.
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (y, pred) {
            (1, true) => tp += 1,
            (1, false) => fn_ += 1,
            (0, false) => tn += 1,
            _ => fp += 1,
        }
    }
    let sens = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { f64::NAN };
    let spec = if tn + fp > 0 { tn as f64 / (tn + fp) as f64 } else { f64::NAN };
    (sens, spec)
}

/// AUC as the rank statistic: the probability that a random positive
/// outscores a random negative, with ties counting one half. Errors if only
/// one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("AUC undefined: only one class present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn cost_pct(clips_used: usize, clips_total: usize) -> f64 {
    if clips_total == 0 {
        f64::NAN
    } else {
        100.0 * clips_used as f64 / clips_total as f64
    }
}

/// All four metrics over per-study results; the cost denominator is the sum
/// of the provided totals.
pub fn metrics(
    scores: &[f64],
    labels: &[u8],
    clips_used: &[usize],
    clips_total: &[usize],
) -> Result<MetricSet> {
    if scores.len() != labels.len() || scores.len() != clips_used.len() {
        return Err(Error::Shape("metric inputs must have matching lengths".into()));
    }
    let (sensitivity, specificity) = sens_spec(scores, labels, 0.5);
    let auc = auc(scores, labels)?;
    Ok(MetricSet {
        sensitivity,
        specificity,
        auc,
        cost_pct: cost_pct(clips_used.iter().sum(), clips_total.iter().sum()),
    })
}

/// Per-study evaluation record for one policy and seed.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub study_id: String,
    pub label: u8,
    pub score: f64,
    pub clips_used: usize,
    pub clips_total: usize,
    /// Views of processed clips in processing order (stored order for
    /// whole-study policies).
    pub views: Vec<ViewLabel>,
    /// clip_score of each processed clip in order; NaN when absent.
    pub step_scores: Vec<f64>,
    /// Prediction after each processed clip (only for sequential policies).
    pub step_preds: Vec<f64>,
}

/// The evaluated policies. `rl_*` run a trained agent checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    AllClips,
    WeightedClips,
    A4cClips,
    SingleClip,
    RandomSample,
    StdHeuristic,
    RlFull,
    RlAb1,
    RlAb2,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 9] = [
        PolicyKind::AllClips,
        PolicyKind::WeightedClips,
        PolicyKind::A4cClips,
        PolicyKind::SingleClip,
        PolicyKind::RandomSample,
        PolicyKind::StdHeuristic,
        PolicyKind::RlAb1,
        PolicyKind::RlAb2,
        PolicyKind::RlFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AllClips => "all_clips",
            PolicyKind::WeightedClips => "weighted_clips",
            PolicyKind::A4cClips => "a4c",
            PolicyKind::SingleClip => "single_clip",
            PolicyKind::RandomSample => "random_sample",
            PolicyKind::StdHeuristic => "std",
            PolicyKind::RlFull => "rl_full",
            PolicyKind::RlAb1 => "rl_ab1",
            PolicyKind::RlAb2 => "rl_ab2",
        }
    }

    pub fn parse(s: &str) -> Result<PolicyKind> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }

    pub fn agent_mode(self) -> Option<AgentMode> {
        match self {
            PolicyKind::RlFull => Some(AgentMode::Full),
            PolicyKind::RlAb1 => Some(AgentMode::Ab1),
            PolicyKind::RlAb2 => Some(AgentMode::Ab2),
            _ => None,
        }
    }
}

/// How the weighted-clips baseline weights each clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    /// Confidence in the clip's assigned view: the maximum view probability.
    MaxProb,
    /// Probability of the clip's recorded view label.
    TrueView,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    /// Number of evaluation repeats with distinct seeds.
    pub n_seeds: usize,
    /// Fraction of studies (by within-study score std, descending) in the
    /// high-variability subset.
    pub uncertain_quantile: f64,
    /// Std threshold of the heuristic stopping baseline.
    pub std_threshold: f64,
    pub weight_rule: WeightRule,
    /// Greedy instead of sampled action selection for RL policies.
    pub greedy: bool,
    pub n_max: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            uncertain_quantile: 0.25,
            std_threshold: 0.241,
            weight_rule: WeightRule::MaxProb,
            greedy: false,
            n_max: 200,
        }
    }
}

/// A restored agent ready for evaluation.
pub struct RlArtifacts {
    pub nets: AgentNets,
    pub init: GaussianInit,
    pub env: EnvConfig,
}

pub struct EvalRequest<'a> {
    pub manifest: &'a DatasetManifest,
    pub policies: Vec<PolicyKind>,
    pub rl_full: Option<RlArtifacts>,
    pub rl_ab1: Option<RlArtifacts>,
    pub rl_ab2: Option<RlArtifacts>,
    pub settings: EvalSettings,
    pub master_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SeedReport {
    pub seed: u64,
    pub all: MetricSet,
    pub uncertain: MetricSet,
    pub skipped: usize,
}

#[derive(Debug)]
pub struct PolicyReport {
    pub policy: PolicyKind,
    pub seeds: Vec<SeedReport>,
    /// Outcomes per seed, aligned with `seeds`.
    pub outcomes: Vec<Vec<StudyOutcome>>,
}

impl PolicyReport {
    pub fn mean(&self) -> SeedReport {
        aggregate(&self.seeds, |xs| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn std(&self) -> SeedReport {
        aggregate(&self.seeds, |xs| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
        })
    }
}

fn aggregate(seeds: &[SeedReport], f: impl Fn(&[f64]) -> f64) -> SeedReport {
    let pick = |g: &dyn Fn(&SeedReport) -> f64| -> f64 {
        let xs: Vec<f64> = seeds.iter().map(g).filter(|x| x.is_finite()).collect();
        if xs.is_empty() {
            f64::NAN
        } else {
            f(&xs)
        }
    };
    SeedReport {
        seed: 0,
        all: MetricSet {
            sensitivity: pick(&|r| r.all.sensitivity),
            specificity: pick(&|r| r.all.specificity),
            auc: pick(&|r| r.all.auc),
            cost_pct: pick(&|r| r.all.cost_pct),
        },
        uncertain: MetricSet {
            sensitivity: pick(&|r| r.uncertain.sensitivity),
            specificity: pick(&|r| r.uncertain.specificity),
            auc: pick(&|r| r.uncertain.auc),
            cost_pct: pick(&|r| r.uncertain.cost_pct),
        },
        skipped: seeds.first().map(|r| r.skipped).unwrap_or(0),
    }
}

pub struct EvalOutput {
    pub reports: Vec<PolicyReport>,
    /// Indices of the high-variability subset, when clip scores allow it.
    pub uncertain: Option<Vec<usize>>,
}

impl EvalOutput {
    pub fn report(&self, policy: PolicyKind) -> Option<&PolicyReport> {
        self.reports.iter().find(|r| r.policy == policy)
    }
}

fn require_scores(study: &StudyRecord, policy: PolicyKind) -> Result<()> {
    if !study.has_clip_scores() {
        return Err(Error::Capability(format!(
            "policy {} requires clip_score on every clip (study {})",
            policy.name(),
            study.study_id
        )));
    }
    Ok(())
}

fn running_means(scores: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len());
    let mut sum = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        sum += s;
        out.push(sum / (i + 1) as f64);
    }
    out
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mean of all clip scores; processes every clip.
pub fn policy_all_clips(study: &StudyRecord) -> Result<StudyOutcome> {
    require_scores(study, PolicyKind::AllClips)?;
    let scores: Vec<f64> = study.clips.iter().map(|c| c.clip_score.unwrap()).collect();
    Ok(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: scores.iter().sum::<f64>() / scores.len() as f64,
        clips_used: study.clips.len(),
        clips_total: study.clips.len(),
        views: study.clips.iter().map(|c| c.view).collect(),
        step_scores: scores,
        step_preds: Vec::new(),
    })
}

/// View-probability-weighted mean of all clip scores.
pub fn policy_weighted_clips(study: &StudyRecord, rule: WeightRule) -> Result<StudyOutcome> {
    require_scores(study, PolicyKind::WeightedClips)?;
    if !study.has_view_probs() {
        return Err(Error::Capability(format!(
            "policy weighted_clips requires view_probs on every clip (study {})",
            study.study_id
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut step_scores = Vec::new();
    for clip in &study.clips {
        let probs = clip.view_probs.unwrap();
        let w = match rule {
            WeightRule::MaxProb => probs.iter().cloned().fold(f64::MIN, f64::max),
            WeightRule::TrueView => probs[clip.view.index()],
        };
        let s = clip.clip_score.unwrap();
        num += w * s;
        den += w;
        step_scores.push(s);
    }
    Ok(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: num / den,
        clips_used: study.clips.len(),
        clips_total: study.clips.len(),
        views: study.clips.iter().map(|c| c.view).collect(),
        step_scores,
        step_preds: Vec::new(),
    })
}

/// Mean over A4C clips only; `None` when the study has no A4C clip (the
/// study is skipped and counted in the report).
pub fn policy_a4c(study: &StudyRecord) -> Result<Option<StudyOutcome>> {
    require_scores(study, PolicyKind::A4cClips)?;
    let picked: Vec<(usize, f64)> = study
        .clips_of_view(ViewLabel::A4c)
        .map(|(i, c)| (i, c.clip_score.unwrap()))
        .collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let scores: Vec<f64> = picked.iter().map(|&(_, s)| s).collect();
    Ok(Some(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: scores.iter().sum::<f64>() / scores.len() as f64,
        clips_used: picked.len(),
        clips_total: study.clips.len(),
        views: vec![ViewLabel::A4c; picked.len()],
        step_scores: scores,
        step_preds: Vec::new(),
    }))
}

/// One uniformly random clip's score.
pub fn policy_single_clip(study: &StudyRecord, rng: &mut ChaCha8Rng) -> Result<StudyOutcome> {
    require_scores(study, PolicyKind::SingleClip)?;
    let clip = &study.clips[rng.random_range(0..study.clips.len())];
    let s = clip.clip_score.unwrap();
    Ok(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: s,
        clips_used: 1,
        clips_total: study.clips.len(),
        views: vec![clip.view],
        step_scores: vec![s],
        step_preds: vec![s],
    })
}

/// Include each clip independently with its view's rate (the agent's global
/// per-view usage fraction), guaranteeing at least one clip; the score is the
/// mean over the sampled clips.
pub fn policy_random_sample(
    study: &StudyRecord,
    rates: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<StudyOutcome> {
    require_scores(study, PolicyKind::RandomSample)?;
    let mut picked: Vec<usize> = (0..study.clips.len())
        .filter(|&i| rng.random::<f64>() < rates[study.clips[i].view.index()])
        .collect();
    if picked.is_empty() {
        picked.push(rng.random_range(0..study.clips.len()));
    }
    picked.shuffle(rng);
    let step_scores: Vec<f64> =
        picked.iter().map(|&i| study.clips[i].clip_score.unwrap()).collect();
    let step_preds = running_means(&step_scores);
    Ok(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: *step_preds.last().unwrap(),
        clips_used: picked.len(),
        clips_total: study.clips.len(),
        views: picked.iter().map(|&i| study.clips[i].view).collect(),
        step_scores,
        step_preds,
    })
}

/// Heuristic stopping: process at least two random clips and keep going
/// while the sample std of processed scores exceeds the threshold.
pub fn policy_std_heuristic(
    study: &StudyRecord,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StudyOutcome> {
    require_scores(study, PolicyKind::StdHeuristic)?;
    let mut order: Vec<usize> = (0..study.clips.len()).collect();
    order.shuffle(rng);
    let mut processed = Vec::new();
    let mut step_scores = Vec::new();
    for (count, &i) in order.iter().enumerate() {
        processed.push(i);
        step_scores.push(study.clips[i].clip_score.unwrap());
        let enough = count + 1 >= study.clips.len().min(2);
        if enough && sample_std(&step_scores) <= threshold {
            break;
        }
    }
    let step_preds = running_means(&step_scores);
    Ok(StudyOutcome {
        study_id: study.study_id.clone(),
        label: study.label,
        score: *step_preds.last().unwrap(),
        clips_used: processed.len(),
        clips_total: study.clips.len(),
        views: processed.iter().map(|&i| study.clips[i].view).collect(),
        step_scores,
        step_preds,
    })
}

/// Run the trained agent on one study: sampled (or greedy) actions, per-step
/// predictions, and the action/view trace.
pub fn policy_rl(
    env: &mut EpisodeEnv,
    nets: &AgentNets,
    study_idx: usize,
    rng: ChaCha8Rng,
    greedy: bool,
    action_rng: &mut ChaCha8Rng,
) -> Result<StudyOutcome> {
    env.reset_to_with_rng(study_idx, rng)?;
    let study_id = env.study().study_id.clone();
    let label = env.study().label;
    let clips_total = env.study().clips.len();
    let scorer_mean = MeanClipScoreScorer;
    let mut views = Vec::new();
    let mut step_scores = Vec::new();
    let mut step_preds = Vec::new();
    let final_score;
    loop {
        let pool_cache = nets.pool(&env.state().pool)?;
        let mask = env.mask();
        let (dist, _) = nets.actor_forward(pool_cache.h_bar(), &mask)?;
        let action_idx = if greedy { dist.greedy() } else { dist.sample(action_rng) };
        let action = Action::from_index(action_idx).unwrap();
        if let Action::View(v) = action {
            views.push(v);
        }
        let outcome = {
            let scorer: &dyn TerminalScorer = match nets.mode {
                AgentMode::Ab1 => &scorer_mean,
                _ => nets,
            };
            env.step(action, scorer)?
        };
        if let Action::View(_) = action {
            let &clip_idx = env.state().processed.last().unwrap();
            let clip = &env.study().clips[clip_idx];
            step_scores.push(clip.clip_score.unwrap_or(f64::NAN));
            // Prediction with everything processed so far.
            let pred = match nets.mode {
                AgentMode::Ab1 => {
                    scorer_mean.score(&env.state().pool, env.state(), env.study())?
                }
                _ => {
                    let cache = nets.pool(&env.state().pool)?;
                    nets.predictor_forward(cache.h_bar())?
                        .map(|(y, _)| y)
                        .ok_or_else(|| Error::Contract("missing predictor head".into()))?
                }
            };
            step_preds.push(pred);
        }
        if outcome.done {
            final_score = outcome.y_hat.unwrap();
            break;
        }
    }
    Ok(StudyOutcome {
        study_id,
        label,
        score: final_score,
        clips_used: views.len(),
        clips_total,
        views,
        step_scores,
        step_preds,
    })
}

/// Indices of the top-quantile studies by within-study clip-score std,
/// ties broken by study id.
pub fn uncertain_subset(manifest: &DatasetManifest, quantile: f64) -> Result<Vec<usize>> {
    if !(0.0 < quantile && quantile <= 1.0) {
        return Err(Error::Config("uncertainty quantile must lie in (0, 1]".into()));
    }
    if !manifest.all_clip_scores_present() {
        return Err(Error::Capability(
            "the high-variability subset requires clip_score on every clip".into(),
        ));
    }
    let mut keyed: Vec<(usize, f64)> = manifest
        .studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let scores: Vec<f64> = s.clips.iter().map(|c| c.clip_score.unwrap()).collect();
            (i, sample_std(&scores))
        })
        .collect();
    keyed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| manifest.studies[a.0].study_id.cmp(&manifest.studies[b.0].study_id))
    });
    let k = ((quantile * manifest.studies.len() as f64).ceil() as usize)
        .clamp(1, manifest.studies.len());
    let mut idx: Vec<usize> = keyed[..k].iter().map(|&(i, _)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

fn rl_artifacts_for<'r>(req: &'r EvalRequest, policy: PolicyKind) -> Result<&'r RlArtifacts> {
    let (slot, mode) = match policy {
        PolicyKind::RlFull => (&req.rl_full, AgentMode::Full),
        PolicyKind::RlAb1 => (&req.rl_ab1, AgentMode::Ab1),
        PolicyKind::RlAb2 => (&req.rl_ab2, AgentMode::Ab2),
        _ => unreachable!(),
    };
    let art = slot.as_ref().ok_or_else(|| {
        Error::Capability(format!("policy {} needs a matching checkpoint", policy.name()))
    })?;
    if art.nets.mode != mode {
        return Err(Error::Validation(format!(
            "checkpoint mode {:?} does not match policy {}",
            art.nets.mode,
            policy.name()
        )));
    }
    Ok(art)
}

/// Evaluate one policy across all studies for one seed.
#[allow(clippy::too_many_arguments)]
fn eval_policy_once(
    manifest: &Arc<DatasetManifest>,
    policy: PolicyKind,
    req: &EvalRequest,
    seed: u64,
    rates: Option<[f64; 3]>,
) -> Result<(Vec<StudyOutcome>, usize)> {
    let settings = &req.settings;
    let mut outcomes = Vec::with_capacity(manifest.studies.len());
    let mut skipped = 0usize;

    let mut rl_env: Option<(EpisodeEnv, &AgentNets)> = match policy {
        PolicyKind::RlFull | PolicyKind::RlAb1 | PolicyKind::RlAb2 => {
            let art = rl_artifacts_for(req, policy)?;
            let env = EpisodeEnv::new(
                Arc::clone(manifest),
                FeatureMap::new(art.nets.mode),
                art.init.clone(),
                // Rewards are a training construct; evaluation ignores them.
                RewardConfig { lambda_cost: 0.0, clip_cost: 0.0, class_weight: [1.0, 1.0] },
                art.env,
                derive_rng(req.master_seed, seed),
            )?;
            Some((env, &art.nets))
        }
        _ => None,
    };

    for (idx, study) in manifest.studies.iter().enumerate() {
        let stream = fnv1a64(&study.study_id) ^ fnv1a64(policy.name()).wrapping_add(seed);
        let mut rng = derive_rng(req.master_seed, stream);
        let outcome = match policy {
            PolicyKind::AllClips => Some(policy_all_clips(study)?),
            PolicyKind::WeightedClips => {
                Some(policy_weighted_clips(study, settings.weight_rule)?)
            }
            PolicyKind::A4cClips => {
                let out = policy_a4c(study)?;
                if out.is_none() {
                    log::warn!(
                        "study {} has no A4C clips; skipped by the a4c policy",
                        study.study_id
                    );
                    skipped += 1;
                }
                out
            }
            PolicyKind::SingleClip => Some(policy_single_clip(study, &mut rng)?),
            PolicyKind::RandomSample => {
                let rates = rates.ok_or_else(|| {
                    Error::Capability(
                        "random_sample requires rl_full in the same evaluation run to match its per-view clip budget"
                            .into(),
                    )
                })?;
                Some(policy_random_sample(study, rates, &mut rng)?)
            }
            PolicyKind::StdHeuristic => {
                Some(policy_std_heuristic(study, settings.std_threshold, &mut rng)?)
            }
            PolicyKind::RlFull | PolicyKind::RlAb1 | PolicyKind::RlAb2 => {
                let (env, nets) = rl_env.as_mut().unwrap();
                let episode_rng = derive_rng(req.master_seed, stream ^ 0x726c);
                Some(policy_rl(env, nets, idx, episode_rng, settings.greedy, &mut rng)?)
            }
        };
        if let Some(out) = outcome {
            outcomes.push(out);
        }
    }
    Ok((outcomes, skipped))
}

/// The agent's global per-view usage rates from one seed's outcomes:
/// clips it selected per view divided by the clips available per view.
fn per_view_rates(manifest: &DatasetManifest, outcomes: &[StudyOutcome]) -> [f64; 3] {
    let mut used = [0usize; 3];
    for o in outcomes {
        for v in &o.views {
            used[v.index()] += 1;
        }
    }
    let mut avail = [0usize; 3];
    for s in &manifest.studies {
        for c in &s.clips {
            avail[c.view.index()] += 1;
        }
    }
    let mut rates = [0.0; 3];
    for v in 0..3 {
        rates[v] = if avail[v] == 0 { 0.0 } else { (used[v] as f64 / avail[v] as f64).min(1.0) };
    }
    rates
}

fn seed_metrics(
    manifest: &DatasetManifest,
    outcomes: &[StudyOutcome],
    uncertain: Option<&[usize]>,
) -> (MetricSet, MetricSet) {
    let full_denominator = manifest.total_clips();
    let collect = |filter: &dyn Fn(&StudyOutcome) -> bool| -> (Vec<f64>, Vec<u8>, usize) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut used = 0usize;
        for o in outcomes.iter().filter(|o| filter(o)) {
            scores.push(o.score);
            labels.push(o.label);
            used += o.clips_used;
        }
        (scores, labels, used)
    };

    let (scores, labels, used) = collect(&|_| true);
    let all = match auc(&scores, &labels) {
        Ok(a) => {
            let (sens, spec) = sens_spec(&scores, &labels, 0.5);
            MetricSet {
                sensitivity: sens,
                specificity: spec,
                auc: a,
                cost_pct: cost_pct(used, full_denominator),
            }
        }
        Err(e) => {
            log::warn!("metrics undefined on the full set: {e}");
            MetricSet::nan()
        }
    };

    let uncertain_set = match uncertain {
        Some(idx) => {
            let wanted: std::collections::HashSet<&str> =
                idx.iter().map(|&i| manifest.studies[i].study_id.as_str()).collect();
            let (scores, labels, used) = collect(&|o| wanted.contains(o.study_id.as_str()));
            match auc(&scores, &labels) {
                Ok(a) => {
                    let (sens, spec) = sens_spec(&scores, &labels, 0.5);
                    // The cost denominator stays the full set's clips.
                    MetricSet {
                        sensitivity: sens,
                        specificity: spec,
                        auc: a,
                        cost_pct: cost_pct(used, full_denominator),
                    }
                }
                Err(e) => {
                    log::warn!("metrics undefined on the high-variability subset: {e}");
                    MetricSet::nan()
                }
            }
        }
        None => MetricSet::nan(),
    };
    (all, uncertain_set)
}

/// Evaluate every requested policy over `n_seeds` repeats.
///
/// `rl_full` is evaluated before `random_sample` so the random baseline can
/// match the agent's per-view clip budget seed by seed.
pub fn run_eval(req: &EvalRequest) -> Result<EvalOutput> {
    let mut work = req.manifest.clone();
    apply_clip_limit(&mut work, req.settings.n_max, req.master_seed);
    let manifest = Arc::new(work);

    let uncertain = if manifest.all_clip_scores_present() {
        Some(uncertain_subset(&manifest, req.settings.uncertain_quantile)?)
    } else {
        None
    };

    let mut policies = req.policies.clone();
    policies.dedup();
    // Budget-matching order: the agent first.
    if policies.contains(&PolicyKind::RandomSample) && !policies.contains(&PolicyKind::RlFull) {
        return Err(Error::Capability(
            "random_sample requires rl_full in the same evaluation run to match its per-view clip budget"
                .into(),
        ));
    }
    let seeds: Vec<u64> = (0..req.settings.n_seeds as u64).collect();

    // Evaluate rl_full first (if requested) to derive per-seed budgets.
    let mut rl_full_report: Option<PolicyReport> = None;
    let mut budgets: Vec<Option<[f64; 3]>> = vec![None; seeds.len()];
    if policies.contains(&PolicyKind::RlFull) {
        let mut seed_reports = Vec::new();
        let mut outcome_sets = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            let (outcomes, skipped) =
                eval_policy_once(&manifest, PolicyKind::RlFull, req, seed, None)?;
            budgets[si] = Some(per_view_rates(&manifest, &outcomes));
            let (all, unc) = seed_metrics(&manifest, &outcomes, uncertain.as_deref());
            seed_reports.push(SeedReport { seed, all, uncertain: unc, skipped });
            outcome_sets.push(outcomes);
        }
        rl_full_report = Some(PolicyReport {
            policy: PolicyKind::RlFull,
            seeds: seed_reports,
            outcomes: outcome_sets,
        });
    }

    let mut reports = Vec::new();
    for &policy in &policies {
        if policy == PolicyKind::RlFull {
            continue;
        }
        let mut seed_reports = Vec::new();
        let mut outcome_sets = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            let (outcomes, skipped) =
                eval_policy_once(&manifest, policy, req, seed, budgets[si])?;
            let (all, unc) = seed_metrics(&manifest, &outcomes, uncertain.as_deref());
            seed_reports.push(SeedReport { seed, all, uncertain: unc, skipped });
            outcome_sets.push(outcomes);
        }
        reports.push(PolicyReport { policy, seeds: seed_reports, outcomes: outcome_sets });
    }
    if let Some(r) = rl_full_report {
        // Keep the caller's requested ordering in the final report list.
        let pos = policies.iter().position(|&p| p == PolicyKind::RlFull).unwrap_or(0);
        reports.insert(pos.min(reports.len()), r);
    }
    Ok(EvalOutput { reports, uncertain })
}

pub const SUMMARY_HEADER: &str = "policy,seed,sensitivity,specificity,auc,cost_pct,sensitivity_uncertain,specificity_uncertain,auc_uncertain,cost_pct_uncertain,studies_skipped";

pub fn render_summary_csv(output: &EvalOutput) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let row = |policy: &str, seed: &str, r: &SeedReport| {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            policy,
            seed,
            r.all.sensitivity,
            r.all.specificity,
            r.all.auc,
            r.all.cost_pct,
            r.uncertain.sensitivity,
            r.uncertain.specificity,
            r.uncertain.auc,
            r.uncertain.cost_pct,
            r.skipped
        )
    };
    for report in &output.reports {
        for sr in &report.seeds {
            out.push_str(&row(report.policy.name(), &sr.seed.to_string(), sr));
        }
        out.push_str(&row(report.policy.name(), "mean", &report.mean()));
        out.push_str(&row(report.policy.name(), "std", &report.std()));
    }
    out
}

pub const TRACES_HEADER: &str =
    "policy,seed,study_id,label,score,clips_used,clips_total,views_sequence";

pub fn render_traces_csv(output: &EvalOutput) -> String {
    let mut out = String::from(TRACES_HEADER);
    out.push('\n');
    for report in &output.reports {
        for (sr, outcomes) in report.seeds.iter().zip(&report.outcomes) {
            for o in outcomes {
                let views: Vec<&str> = o.views.iter().map(|v| v.as_str()).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    report.policy.name(),
                    sr.seed,
                    o.study_id,
                    o.label,
                    o.score,
                    o.clips_used,
                    o.clips_total,
                    views.join("|")
                ));
            }
        }
    }
    out
}

pub const FIG2_HEADER: &str = "policy,label,clips_processed,mean_score,std_score,n_studies";

/// Mean prediction (with std band) per class as clips are sequentially
/// processed, for every policy that records per-step predictions.
pub fn render_fig2_csv(output: &EvalOutput) -> String {
    let mut out = String::from(FIG2_HEADER);
    out.push('\n');
    for report in &output.reports {
        let max_len = report
            .outcomes
            .iter()
            .flat_map(|set| set.iter().map(|o| o.step_preds.len()))
            .max()
            .unwrap_or(0);
        if max_len == 0 {
            continue;
        }
        for label in [1u8, 0u8] {
            for k in 1..=max_len {
                let vals: Vec<f64> = report
                    .outcomes
                    .iter()
                    .flat_map(|set| set.iter())
                    .filter(|o| o.label == label && o.step_preds.len() >= k)
                    .map(|o| o.step_preds[k - 1])
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std =
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    report.policy.name(),
                    label,
                    k,
                    mean,
                    std,
                    vals.len()
                ));
            }
        }
    }
    out
}

pub const FIG3_HEADER: &str = "study_id,label,correct,fraction_used,step,view,clip_score";

/// Per-study selection map data from the agent's first evaluation seed: one
/// row per processed clip with its view and classifier score.
pub fn render_fig3_csv(output: &EvalOutput) -> String {
    let mut out = String::from(FIG3_HEADER);
    out.push('\n');
    if let Some(report) = output.report(PolicyKind::RlFull) {
        if let Some(outcomes) = report.outcomes.first() {
            for o in outcomes {
                let correct = u8::from((o.score >= 0.5) == (o.label == 1));
                let fraction = o.clips_used as f64 / o.clips_total as f64;
                for (step, view) in o.views.iter().enumerate() {
                    let clip_score =
                        o.step_scores.get(step).copied().unwrap_or(f64::NAN);
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        o.study_id,
                        o.label,
                        correct,
                        fraction,
                        step + 1,
                        view.as_str(),
                        clip_score
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClipRecord;
    use approx::assert_abs_diff_eq;

    fn study(id: &str, label: u8, scores: &[f64], views: &[ViewLabel]) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            label,
            clips: scores
                .iter()
                .zip(views)
                .enumerate()
                .map(|(i, (&s, &view))| ClipRecord {
                    clip_id: format!("{id}c{i}"),
                    view,
                    embedding: vec![0.0, 0.0],
                    clip_score: Some(s),
                    view_probs: Some({
                        let mut p = [0.05, 0.05, 0.05];
                        p[view.index()] = 0.9;
                        p
                    }),
                })
                .collect(),
        }
    }

    /// Brute-force pairwise oracle, independent of the rank implementation.
    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            let _ = i;
            if li != 1 {
                continue;
            }
            for (&sj, &lj) in scores.iter().zip(labels) {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_perfect_and_tied_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
        // pos [0.8, 0.4], neg [0.4, 0.2]: one tie pair counts a half.
        let a = auc(&[0.8, 0.4, 0.4, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(a, 3.5 / 4.0, epsilon = 1e-15);
        // pos [0.8, 0.4], neg [0.6, 0.2]: no ties, 3 of 4 pairs ordered.
        let b = auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(b, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(auc(&[0.5, 0.6], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_brute_force_on_random_sets() {
        use rand::Rng;
        let mut rng = derive_rng(17, 0);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
            labels[0] = 1;
            labels[if n > 1 { 1 } else { 0 }] = 0;
            // Quantized scores generate plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect();
            let fast = auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
    }

    #[test]
    fn sens_spec_at_threshold() {
        let (sens, spec) = sens_spec(&[0.9, 0.3, 0.6, 0.1], &[1, 1, 0, 0], 0.5);
        assert_eq!(sens, 0.5);
        assert_eq!(spec, 0.5);
    }

    #[test]
    fn all_clips_is_plain_mean() {
        let s = study("s", 1, &[0.2, 0.4], &[ViewLabel::A4c, ViewLabel::Plax]);
        let o = policy_all_clips(&s).unwrap();
        assert_abs_diff_eq!(o.score, 0.3, epsilon = 1e-15);
        assert_eq!(o.clips_used, 2);
    }

    #[test]
    fn weighted_equals_mean_under_uniform_probs() {
        let mut s = study("s", 0, &[0.2, 0.8], &[ViewLabel::A4c, ViewLabel::Plax]);
        for c in &mut s.clips {
            c.view_probs = Some([1.0 / 3.0; 3]);
        }
        let o = policy_weighted_clips(&s, WeightRule::MaxProb).unwrap();
        assert_abs_diff_eq!(o.score, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weighted_hand_case() {
        // scores [0.9, 0.1], max view probs [0.9, 0.3]: (0.81+0.03)/1.2 = 0.7.
        let mut s = study("s", 0, &[0.9, 0.1], &[ViewLabel::A4c, ViewLabel::Plax]);
        s.clips[0].view_probs = Some([0.9, 0.06, 0.04]);
        s.clips[1].view_probs = Some([0.3, 0.3, 0.4]);
        // With MaxProb the second clip's weight is its largest entry 0.4, so
        // use the recorded-view rule to hit the 0.3 weight.
        s.clips[1].view = ViewLabel::A4c;
        let o = policy_weighted_clips(&s, WeightRule::TrueView).unwrap();
        assert_abs_diff_eq!(o.score, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn a4c_policy_skips_studies_without_that_view() {
        let s = study("s", 0, &[0.2, 0.8], &[ViewLabel::Plax, ViewLabel::Psax]);
        assert!(policy_a4c(&s).unwrap().is_none());
        let s2 = study("s2", 0, &[0.2, 0.8, 0.5], &[ViewLabel::A4c, ViewLabel::A4c, ViewLabel::Psax]);
        let o = policy_a4c(&s2).unwrap().unwrap();
        assert_abs_diff_eq!(o.score, 0.5, epsilon = 1e-12);
        assert_eq!(o.clips_used, 2);
        assert_eq!(o.clips_total, 3);
    }

    #[test]
    fn std_heuristic_stops_on_agreement_and_continues_on_spread() {
        let mut rng = derive_rng(1, 1);
        let flat = study("flat", 0, &[0.5; 6], &[ViewLabel::A4c; 6]);
        let o = policy_std_heuristic(&flat, 0.241, &mut rng).unwrap();
        assert_eq!(o.clips_used, 2);

        // std([0,1]) = 0.7071 > 0.241: keeps going through all clips.
        let spread = study("spread", 1, &[0.0, 1.0], &[ViewLabel::A4c, ViewLabel::Plax]);
        let o = policy_std_heuristic(&spread, 0.241, &mut rng).unwrap();
        assert_eq!(o.clips_used, 2, "only two clips exist");
        assert_abs_diff_eq!(sample_std(&[0.0, 1.0]), 0.7071, epsilon = 1e-4);

        // A threshold no finite std exceeds stops at the minimum; a threshold
        // below every std consumes all clips.
        let mixed = study(
            "mixed",
            1,
            &[0.1, 0.9, 0.4, 0.6, 0.2],
            &[ViewLabel::A4c, ViewLabel::A4c, ViewLabel::Plax, ViewLabel::Plax, ViewLabel::Psax],
        );
        let o = policy_std_heuristic(&mixed, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(o.clips_used, 2);
        let o = policy_std_heuristic(&mixed, f64::NEG_INFINITY, &mut rng).unwrap();
        assert_eq!(o.clips_used, 5);
    }

    #[test]
    fn single_clip_study_returns_its_score() {
        let s = study("one", 1, &[0.8], &[ViewLabel::Psax]);
        let mut rng = derive_rng(0, 0);
        let o = policy_std_heuristic(&s, 0.241, &mut rng).unwrap();
        assert_eq!(o.clips_used, 1);
        assert_abs_diff_eq!(o.score, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn random_sample_saturates_to_all_clips() {
        let s = study(
            "s",
            1,
            &[0.1, 0.2, 0.3],
            &[ViewLabel::A4c, ViewLabel::Plax, ViewLabel::Psax],
        );
        let mut rng = derive_rng(2, 2);
        let o = policy_random_sample(&s, [1.0, 1.0, 1.0], &mut rng).unwrap();
        assert_eq!(o.clips_used, 3);
        assert_abs_diff_eq!(o.score, 0.2, epsilon = 1e-12);
        // Zero budget on two views with full budget on A4C reduces to A4C.
        let o = policy_random_sample(&s, [1.0, 0.0, 0.0], &mut rng).unwrap();
        assert_eq!(o.views, vec![ViewLabel::A4c]);
        assert_abs_diff_eq!(o.score, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn random_sample_never_returns_empty() {
        let s = study("s", 0, &[0.4, 0.6], &[ViewLabel::Plax, ViewLabel::Plax]);
        for i in 0..50 {
            let mut rng = derive_rng(3, i);
            let o = policy_random_sample(&s, [0.0, 0.0, 0.0], &mut rng).unwrap();
            assert_eq!(o.clips_used, 1);
        }
    }

    #[test]
    fn uncertain_subset_picks_highest_std() {
        let studies = vec![
            study("a", 0, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("b", 1, &[0.1, 0.9], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("c", 0, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("d", 1, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
        ];
        let m = DatasetManifest::new(2, studies).unwrap();
        let idx = uncertain_subset(&m, 0.25).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn uncertain_subset_tie_breaks_on_study_id() {
        let studies = vec![
            study("b", 0, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("a", 1, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("c", 0, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
            study("d", 1, &[0.5, 0.5], &[ViewLabel::A4c, ViewLabel::Plax]),
        ];
        let m = DatasetManifest::new(2, studies).unwrap();
        // All tied: the lexicographically first id wins the single slot.
        let idx = uncertain_subset(&m, 0.25).unwrap();
        assert_eq!(idx, vec![1], "study \"a\" sits at index 1");
    }

    #[test]
    fn missing_scores_is_a_capability_error() {
        let mut s = study("s", 0, &[0.2, 0.4], &[ViewLabel::A4c, ViewLabel::Plax]);
        s.clips[1].clip_score = None;
        assert!(matches!(policy_all_clips(&s), Err(Error::Capability(_))));
        let mut rng = derive_rng(0, 1);
        assert!(matches!(policy_single_clip(&s, &mut rng), Err(Error::Capability(_))));
    }
}

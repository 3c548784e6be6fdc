//! Studies, clips, views and labels; dataset file ingestion and the synthetic
//! generator used for desk-scale verification.
//!
//! A dataset file is line-oriented text: the first line is a header object
//! `{"format":"clipstop-v1","D":<int>}` and every following line is one study
//! object. See [`load_dataset`] / [`write_dataset`].

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

pub const DATASET_FORMAT: &str = "clipstop-v1";

/// The three echocardiographic views the agent can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    #[serde(rename = "A4C")]
    A4c,
    #[serde(rename = "PLAX")]
    Plax,
    #[serde(rename = "PSAX")]
    Psax,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 3] = [ViewLabel::A4c, ViewLabel::Plax, ViewLabel::Psax];

    pub fn index(self) -> usize {
        match self {
            ViewLabel::A4c => 0,
            ViewLabel::Plax => 1,
            ViewLabel::Psax => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ViewLabel> {
        ViewLabel::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::A4c => "A4C",
            ViewLabel::Plax => "PLAX",
            ViewLabel::Psax => "PSAX",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A4C" => Ok(ViewLabel::A4c),
            "PLAX" => Ok(ViewLabel::Plax),
            "PSAX" => Ok(ViewLabel::Psax),
            other => Err(Error::Validation(format!("unknown view label {other:?}"))),
        }
    }
}

/// One clip: its precomputed embedding plus the optional per-clip classifier
/// score and view probabilities that the score-based baselines need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub view: ViewLabel,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_probs: Option<[f64; 3]>,
}

/// A labeled bag of clips; the episode unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRecord {
    pub study_id: String,
    /// Binary ground truth, 1 = disease.
    pub label: u8,
    pub clips: Vec<ClipRecord>,
}

impl StudyRecord {
    pub fn clips_of_view(&self, view: ViewLabel) -> impl Iterator<Item = (usize, &ClipRecord)> {
        self.clips.iter().enumerate().filter(move |(_, c)| c.view == view)
    }

    pub fn has_clip_scores(&self) -> bool {
        self.clips.iter().all(|c| c.clip_score.is_some())
    }

    pub fn has_view_probs(&self) -> bool {
        self.clips.iter().all(|c| c.view_probs.is_some())
    }
}

/// A validated dataset: embedding dimension, studies, and the class prior
/// estimated from study counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub d: usize,
    pub studies: Vec<StudyRecord>,
    /// `class_prior[y]` for y in {0, 1}; components sum to 1 exactly.
    pub class_prior: [f64; 2],
}

impl DatasetManifest {
    pub fn new(d: usize, studies: Vec<StudyRecord>) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Validation("dataset contains no studies".into()));
        }
        for s in &studies {
            validate_study(s, d)?;
        }
        let class_prior = class_prior_from_counts(&studies);
        Ok(Self { d, studies, class_prior })
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.studies.iter().filter(|s| s.label == label).count()
    }

    pub fn total_clips(&self) -> usize {
        self.studies.iter().map(|s| s.clips.len()).sum()
    }

    pub fn all_clip_scores_present(&self) -> bool {
        self.studies.iter().all(|s| s.has_clip_scores())
    }

    pub fn all_view_probs_present(&self) -> bool {
        self.studies.iter().all(|s| s.has_view_probs())
    }
}

fn class_prior_from_counts(studies: &[StudyRecord]) -> [f64; 2] {
    let n = studies.len() as f64;
    let pos = studies.iter().filter(|s| s.label == 1).count() as f64;
    [(n - pos) / n, pos / n]
}

fn validate_study(study: &StudyRecord, d: usize) -> Result<()> {
    if study.clips.is_empty() {
        return Err(Error::Validation(format!("study {} has no clips", study.study_id)));
    }
    if study.label > 1 {
        return Err(Error::Validation(format!(
            "study {} has non-binary label {}",
            study.study_id, study.label
        )));
    }
    for clip in &study.clips {
        if clip.embedding.len() != d {
            return Err(Error::Validation(format!(
                "study {}: clip {} embedding has length {}, dataset declares D={}",
                study.study_id,
                clip.clip_id,
                clip.embedding.len(),
                d
            )));
        }
        if let Some(score) = clip.clip_score {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Validation(format!(
                    "study {}: clip {} score {} outside [0,1]",
                    study.study_id, clip.clip_id, score
                )));
            }
        }
        if let Some(p) = clip.view_probs {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "study {}: clip {} view_probs must be non-negative and sum to 1",
                    study.study_id, clip.clip_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    #[serde(rename = "D")]
    d: usize,
}

/// Load and validate a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: DatasetHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::Validation("dataset file is empty".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format {:?}, expected {DATASET_FORMAT:?}", header.format),
        });
    }
    if header.d == 0 {
        return Err(Error::Parse { line: 1, msg: "header D must be positive".into() });
    }

    let mut studies = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let study: StudyRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        studies.push(study);
    }
    DatasetManifest::new(header.d, studies)
}

/// Write a manifest in the dataset file format. Floats round-trip exactly.
pub fn write_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader { format: DATASET_FORMAT.to_string(), d: manifest.d };
    let write_err = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Validation(e.to_string()))?;
    out.write_all(b"\n").map_err(write_err)?;
    for study in &manifest.studies {
        serde_json::to_writer(&mut out, study).map_err(|e| Error::Validation(e.to_string()))?;
        out.write_all(b"\n").map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

/// Permute study order and each study's clip order; content is otherwise
/// identical. Deterministic given the seed.
pub fn shuffle_dataset(manifest: &DatasetManifest, seed: u64) -> DatasetManifest {
    let mut rng = derive_rng(seed, 0x73687566);
    let mut out = manifest.clone();
    out.studies.shuffle(&mut rng);
    for study in &mut out.studies {
        study.clips.shuffle(&mut rng);
    }
    out
}

/// Enforce the per-study clip bound: studies with more clips are shuffled and
/// truncated to the first `n_max`, with a warning per affected study.
pub fn apply_clip_limit(manifest: &mut DatasetManifest, n_max: usize, seed: u64) {
    let mut rng = derive_rng(seed, 0x7472756e);
    for study in &mut manifest.studies {
        if study.clips.len() > n_max {
            log::warn!(
                "study {} has {} clips; truncating to {} after shuffling",
                study.study_id,
                study.clips.len(),
                n_max
            );
            study.clips.shuffle(&mut rng);
            study.clips.truncate(n_max);
        }
    }
}

/// Controls for the synthetic generator. Per-view arrays are indexed by
/// [`ViewLabel::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub n_studies: usize,
    /// Probability that a study is a disease case.
    pub disease_fraction: f64,
    /// Mean shift (along the class direction) of disease clips per view.
    pub informativeness: [f64; 3],
    /// Per-view embedding noise scale (> 0).
    pub noise_scale: [f64; 3],
    /// Inclusive (min, max) clips per view.
    pub clips_per_view: [(usize, usize); 3],
    /// Magnitude of the per-view cluster offset in embedding space. Encoder
    /// embeddings of different views occupy different regions; this controls
    /// how far apart the view clusters sit.
    pub view_cluster_offset: f64,
    /// Fraction of clips that are low quality (acquisition noise), with their
    /// embedding noise scaled by `low_quality_noise_mult`. Quality is not
    /// observable from clip metadata, only from embedding content.
    pub low_quality_fraction: f64,
    pub low_quality_noise_mult: f64,
    /// Slope of the logistic mapping projection -> clip score.
    pub score_gain: f64,
    /// Standard deviation of the logit noise on clip scores.
    pub score_noise: f64,
    /// Magnitude of the symmetric jitter on near-one-hot view probabilities.
    pub view_prob_noise: f64,
    pub seed: u64,
    /// Seed of the class-separating direction. Datasets meant to share one
    /// embedding geometry (train/test splits) must share this; `seed` then
    /// only controls the sampled studies.
    pub direction_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::informative_a4c(0)
    }
}

impl SynthConfig {
    /// A task where only A4C clips carry class signal; PLAX and PSAX are
    /// pure noise. The default benchmark configuration.
    pub fn informative_a4c(seed: u64) -> Self {
        Self {
            d: 16,
            n_studies: 1000,
            disease_fraction: 0.5,
            informativeness: [1.5, 0.0, 0.0],
            noise_scale: [1.0, 1.0, 1.0],
            clips_per_view: [(3, 10), (3, 10), (3, 10)],
            view_cluster_offset: 3.0,
            low_quality_fraction: 0.0,
            low_quality_noise_mult: 1.0,
            score_gain: 1.5,
            score_noise: 2.0,
            view_prob_noise: 0.05,
            seed,
            direction_seed: 0,
        }
    }

    /// A degenerate task where every view is equally (un)informative, used to
    /// exercise cost-driven early stopping.
    pub fn identical_views(seed: u64) -> Self {
        Self {
            d: 16,
            n_studies: 400,
            disease_fraction: 0.5,
            informativeness: [1.0, 1.0, 1.0],
            noise_scale: [1.0, 1.0, 1.0],
            clips_per_view: [(3, 10), (3, 10), (3, 10)],
            view_cluster_offset: 0.0,
            low_quality_fraction: 0.0,
            low_quality_noise_mult: 1.0,
            score_gain: 1.5,
            score_noise: 2.0,
            view_prob_noise: 0.05,
            seed,
            direction_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("synthetic D must be positive".into()));
        }
        if self.n_studies == 0 {
            return Err(Error::Config("n_studies must be positive".into()));
        }
        if !(0.0 < self.disease_fraction && self.disease_fraction < 1.0) {
            return Err(Error::Config("disease_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.low_quality_fraction) || self.low_quality_noise_mult <= 0.0 {
            return Err(Error::Config("clip quality parameters out of range".into()));
        }
        if self.noise_scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        for (v, &(lo, hi)) in ViewLabel::ALL.iter().zip(&self.clips_per_view) {
            if lo > hi {
                return Err(Error::Config(format!("clips_per_view for {v}: min {lo} > max {hi}")));
            }
        }
        if self.clips_per_view.iter().all(|&(_, hi)| hi == 0) {
            return Err(Error::Config("at least one view must allow clips".into()));
        }
        Ok(())
    }
}

/// Generate a dataset as a pure function of the config.
///
/// Disease clips of view `v` are drawn from `N(informativeness[v] * u, s_v^2 I)`
/// where `u` is a fixed unit direction; controls come from the zero-mean
/// Gaussian. Clip scores pass the projection onto `u` through a noisy
/// logistic, and view probabilities are near-one-hot with symmetric jitter.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, 0x73796e7468);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // The class-separating unit direction and the per-view cluster centers
    // are part of the population geometry, not of the sample: they have
    // their own seed.
    let mut dir_rng = derive_rng(cfg.direction_seed, 0x646972);
    let mut unit = || -> Vec<f64> {
        let mut v: Vec<f64> = (0..cfg.d).map(|_| std_normal.sample(&mut dir_rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    };
    let direction = unit();
    let view_centers: [Vec<f64>; 3] = [unit(), unit(), unit()];
    // Center the score logistic between the two classes' mean projections.
    let score_center = cfg.informativeness.iter().sum::<f64>() / 6.0;

    let mut studies = Vec::with_capacity(cfg.n_studies);
    for i in 0..cfg.n_studies {
        let label = u8::from(rng.random::<f64>() < cfg.disease_fraction);
        let study_id = format!("study{i:05}");
        let mut counts = [0usize; 3];
        for (c, &(lo, hi)) in counts.iter_mut().zip(&cfg.clips_per_view) {
            *c = rng.random_range(lo..=hi);
        }
        if counts.iter().sum::<usize>() == 0 {
            // Every view rolled zero; studies must hold at least one clip.
            let v = cfg.clips_per_view.iter().position(|&(_, hi)| hi > 0).unwrap();
            counts[v] = 1;
        }
        let mut clips = Vec::new();
        for view in ViewLabel::ALL {
            let v = view.index();
            let n_clips = counts[v];
            for j in 0..n_clips {
                let shift = if label == 1 { cfg.informativeness[v] } else { 0.0 };
                let quality_mult = if rng.random::<f64>() < cfg.low_quality_fraction {
                    cfg.low_quality_noise_mult
                } else {
                    1.0
                };
                let noise = cfg.noise_scale[v] * quality_mult;
                let embedding: Vec<f64> = direction
                    .iter()
                    .zip(&view_centers[v])
                    .map(|(&u, &c)| {
                        cfg.view_cluster_offset * c + shift * u + noise * std_normal.sample(&mut rng)
                    })
                    .collect();
                let projection: f64 =
                    embedding.iter().zip(&direction).map(|(h, u)| h * u).sum();
                let logit = cfg.score_gain * (projection - score_center)
                    + cfg.score_noise * std_normal.sample(&mut rng);
                let clip_score = crate::nn::sigmoid(logit);
                let mut probs = [0.0f64; 3];
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = rng.random::<f64>() * cfg.view_prob_noise
                        + if k == v { 1.0 } else { 0.0 };
                }
                let total: f64 = probs.iter().sum();
                for p in &mut probs {
                    *p /= total;
                }
                clips.push(ClipRecord {
                    clip_id: format!("{study_id}_{}{j}", view.as_str().to_lowercase()),
                    view,
                    embedding,
                    clip_score: Some(clip_score),
                    view_probs: Some(probs),
                });
            }
        }
        studies.push(StudyRecord { study_id, label, clips });
    }
    DatasetManifest::new(cfg.d, studies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_manifest() -> DatasetManifest {
        DatasetManifest::new(
            4,
            vec![
                StudyRecord {
                    study_id: "s0".into(),
                    label: 1,
                    clips: vec![ClipRecord {
                        clip_id: "c0".into(),
                        view: ViewLabel::A4c,
                        embedding: vec![0.1, 0.2, 0.3, 0.4],
                        clip_score: Some(0.8),
                        view_probs: Some([0.9, 0.05, 0.05]),
                    }],
                },
                StudyRecord {
                    study_id: "s1".into(),
                    label: 0,
                    clips: vec![ClipRecord {
                        clip_id: "c1".into(),
                        view: ViewLabel::Plax,
                        embedding: vec![-0.5, 0.0, 0.25, 1.0],
                        clip_score: Some(0.2),
                        view_probs: None,
                    }],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_counts_give_half_half_prior() {
        let m = tiny_manifest();
        assert_eq!(m.class_prior, [0.5, 0.5]);
    }

    #[test]
    fn prior_matches_count_arithmetic() {
        // 1720 studies with 338 positive.
        let studies: Vec<StudyRecord> = (0..1720)
            .map(|i| StudyRecord {
                study_id: format!("s{i}"),
                label: u8::from(i < 338),
                clips: vec![ClipRecord {
                    clip_id: format!("c{i}"),
                    view: ViewLabel::A4c,
                    embedding: vec![0.0],
                    clip_score: None,
                    view_probs: None,
                }],
            })
            .collect();
        let m = DatasetManifest::new(1, studies).unwrap();
        assert!((m.class_prior[1] - 338.0 / 1720.0).abs() < 1e-15);
        assert!((m.class_prior[1] - 0.19651).abs() < 1e-5);
        assert_eq!(m.class_prior[0] + m.class_prior[1], 1.0);
    }

    #[test]
    fn embedding_length_mismatch_names_study() {
        let bad = StudyRecord {
            study_id: "broken".into(),
            label: 0,
            clips: vec![ClipRecord {
                clip_id: "c".into(),
                view: ViewLabel::A4c,
                embedding: vec![1.0, 2.0, 3.0],
                clip_score: None,
                view_probs: None,
            }],
        };
        let err = DatasetManifest::new(4, vec![bad]).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(DatasetManifest::new(4, vec![]).is_err());
    }

    #[test]
    fn file_round_trip_preserves_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let m = tiny_manifest();
        write_dataset(&m, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"clipstop-v1\",\"D\":2}\n{\"study_id\":\"s\",\"label\":5}\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn wrong_format_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fmt.jsonl");
        std::fs::write(&path, "{\"format\":\"other\",\"D\":2}\n").unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig { n_studies: 30, ..SynthConfig::informative_a4c(9) };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let different = generate_synthetic(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, different);
    }

    #[test]
    fn positive_count_within_binomial_bound() {
        let cfg = SynthConfig { n_studies: 1000, ..SynthConfig::informative_a4c(3) };
        let m = generate_synthetic(&cfg).unwrap();
        let pos = m.count_label(1) as f64;
        // 99% binomial interval around 500: ~500 +/- 2.58 * sqrt(250).
        let half_width = 2.58 * (1000.0f64 * 0.25).sqrt();
        assert!((pos - 500.0).abs() < half_width, "positives: {pos}");
    }

    /// Brute-force Mann-Whitney statistic, independent of the eval module.
    fn mw_statistic(pos: &[f64], neg: &[f64]) -> f64 {
        let mut u = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    u += 1.0;
                } else if p == n {
                    u += 0.5;
                }
            }
        }
        u / (pos.len() as f64 * neg.len() as f64)
    }

    #[test]
    fn only_informative_view_separates_classes() {
        let cfg = SynthConfig {
            n_studies: 300,
            informativeness: [2.0, 0.0, 0.0],
            ..SynthConfig::informative_a4c(5)
        };
        let m = generate_synthetic(&cfg).unwrap();
        let mut scores: [(Vec<f64>, Vec<f64>); 3] = Default::default();
        for s in &m.studies {
            for c in &s.clips {
                let bucket = &mut scores[c.view.index()];
                let side = if s.label == 1 { &mut bucket.0 } else { &mut bucket.1 };
                side.push(c.clip_score.unwrap());
            }
        }
        let u_a4c = mw_statistic(&scores[0].0, &scores[0].1);
        assert!(u_a4c > 0.7, "A4C should separate classes, U = {u_a4c}");
        for v in 1..3 {
            let (pos, neg) = (&scores[v].0, &scores[v].1);
            let u = mw_statistic(pos, neg);
            let (n1, n2) = (pos.len() as f64, neg.len() as f64);
            // Null std of U/(n1 n2); 4 sigma keeps the check non-flaky.
            let sigma = ((n1 + n2 + 1.0) / (12.0 * n1 * n2)).sqrt();
            assert!((u - 0.5).abs() < 4.0 * sigma, "view {v} leaked signal, U = {u}");
        }
    }

    #[test]
    fn shuffle_preserves_content() {
        let cfg = SynthConfig { n_studies: 100, ..SynthConfig::informative_a4c(2) };
        let m = generate_synthetic(&cfg).unwrap();
        let shuffled = shuffle_dataset(&m, 11);
        let mut ids: Vec<&str> = m.studies.iter().map(|s| s.study_id.as_str()).collect();
        let mut ids2: Vec<&str> = shuffled.studies.iter().map(|s| s.study_id.as_str()).collect();
        ids.sort_unstable();
        ids2.sort_unstable();
        assert_eq!(ids, ids2);
        assert_eq!(m.total_clips(), shuffled.total_clips());

        let order: Vec<&str> = m.studies.iter().map(|s| s.study_id.as_str()).collect();
        let order_a: Vec<&str> = shuffled.studies.iter().map(|s| s.study_id.as_str()).collect();
        let other = shuffle_dataset(&m, 12);
        let order_b: Vec<&str> = other.studies.iter().map(|s| s.study_id.as_str()).collect();
        assert_ne!(order, order_a);
        assert_ne!(order_a, order_b);
    }

    #[test]
    fn shuffle_single_study_single_clip_is_identity() {
        let m = DatasetManifest::new(
            1,
            vec![StudyRecord {
                study_id: "only".into(),
                label: 0,
                clips: vec![ClipRecord {
                    clip_id: "c".into(),
                    view: ViewLabel::Psax,
                    embedding: vec![1.0],
                    clip_score: None,
                    view_probs: None,
                }],
            }],
        )
        .unwrap();
        assert_eq!(shuffle_dataset(&m, 1), m);
    }

    #[test]
    fn clip_limit_truncates_with_warning() {
        let clips: Vec<ClipRecord> = (0..12)
            .map(|i| ClipRecord {
                clip_id: format!("c{i}"),
                view: ViewLabel::A4c,
                embedding: vec![i as f64],
                clip_score: None,
                view_probs: None,
            })
            .collect();
        let mut m = DatasetManifest::new(
            1,
            vec![StudyRecord { study_id: "big".into(), label: 0, clips }],
        )
        .unwrap();
        apply_clip_limit(&mut m, 5, 3);
        assert_eq!(m.studies[0].clips.len(), 5);
        // Determinism: same seed, same subset.
        let mut m2 = DatasetManifest::new(
            1,
            vec![StudyRecord {
                study_id: "big".into(),
                label: 0,
                clips: (0..12)
                    .map(|i| ClipRecord {
                        clip_id: format!("c{i}"),
                        view: ViewLabel::A4c,
                        embedding: vec![i as f64],
                        clip_score: None,
                        view_probs: None,
                    })
                    .collect(),
            }],
        )
        .unwrap();
        apply_clip_limit(&mut m2, 5, 3);
        assert_eq!(m.studies[0].clips, m2.studies[0].clips);
    }
}

//! The run configuration: a TOML document with per-command sections plus
//! command-line overrides. Unknown keys are rejected, and every run writes
//! back the fully resolved document as `config.snapshot` so it can be
//! replayed bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use clipstop_core::data::SynthConfig;
use clipstop_core::eval::{EvalSettings, PolicyKind, WeightRule};
use clipstop_core::ppo::PpoConfig;
use clipstop_core::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out_dir: Option<String>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub ppo: PpoConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training dataset path.
    pub dataset: Option<String>,
    /// Evaluation dataset path (falls back to `dataset`).
    pub eval_dataset: Option<String>,
    pub checkpoint: Option<String>,
    pub checkpoint_ab1: Option<String>,
    pub checkpoint_ab2: Option<String>,
    /// Output file for `synth`.
    pub out_file: Option<String>,
}

/// Mirrors [`SynthConfig`] with optional fields; unset values fall back to
/// the selected preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// One of `informative-a4c`, `identical-views`, `custom`.
    pub preset: Option<String>,
    pub d: Option<usize>,
    pub n_studies: Option<usize>,
    pub disease_fraction: Option<f64>,
    pub informativeness: Option<[f64; 3]>,
    pub noise_scale: Option<[f64; 3]>,
    pub clips_min: Option<[usize; 3]>,
    pub clips_max: Option<[usize; 3]>,
    pub view_cluster_offset: Option<f64>,
    pub low_quality_fraction: Option<f64>,
    pub low_quality_noise_mult: Option<f64>,
    pub score_gain: Option<f64>,
    pub score_noise: Option<f64>,
    pub view_prob_noise: Option<f64>,
    pub seed: Option<u64>,
    pub direction_seed: Option<u64>,
}

impl SynthSection {
    pub fn resolve(&self) -> Result<SynthConfig> {
        let seed = self.seed.unwrap_or(0);
        let preset = self.preset.as_deref().unwrap_or("informative-a4c");
        let mut cfg = match preset {
            "informative-a4c" => SynthConfig::informative_a4c(seed),
            "identical-views" => SynthConfig::identical_views(seed),
            "custom" => {
                // No preset defaults: the dimension has to come from the
                // config or a flag.
                let d = self.d.ok_or_else(|| {
                    Error::Config("synth preset \"custom\" requires an explicit D".into())
                })?;
                SynthConfig { d, ..SynthConfig::informative_a4c(seed) }
            }
            other => return Err(Error::Config(format!("unknown synth preset {other:?}"))),
        };
        if let Some(d) = self.d {
            cfg.d = d;
        }
        if let Some(n) = self.n_studies {
            cfg.n_studies = n;
        }
        if let Some(f) = self.disease_fraction {
            cfg.disease_fraction = f;
        }
        if let Some(v) = self.informativeness {
            cfg.informativeness = v;
        }
        if let Some(v) = self.noise_scale {
            cfg.noise_scale = v;
        }
        if let (Some(lo), Some(hi)) = (self.clips_min, self.clips_max) {
            cfg.clips_per_view = [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])];
        } else if self.clips_min.is_some() != self.clips_max.is_some() {
            return Err(Error::Config("clips_min and clips_max must be given together".into()));
        }
        if let Some(v) = self.view_cluster_offset {
            cfg.view_cluster_offset = v;
        }
        if let Some(v) = self.low_quality_fraction {
            cfg.low_quality_fraction = v;
        }
        if let Some(v) = self.low_quality_noise_mult {
            cfg.low_quality_noise_mult = v;
        }
        if let Some(v) = self.score_gain {
            cfg.score_gain = v;
        }
        if let Some(v) = self.score_noise {
            cfg.score_noise = v;
        }
        if let Some(v) = self.view_prob_noise {
            cfg.view_prob_noise = v;
        }
        if let Some(v) = self.direction_seed {
            cfg.direction_seed = v;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write back the resolved values so the snapshot replays exactly.
    pub fn record(cfg: &SynthConfig, preset: &str) -> SynthSection {
        SynthSection {
            preset: Some(preset.to_string()),
            d: Some(cfg.d),
            n_studies: Some(cfg.n_studies),
            disease_fraction: Some(cfg.disease_fraction),
            informativeness: Some(cfg.informativeness),
            noise_scale: Some(cfg.noise_scale),
            clips_min: Some(cfg.clips_per_view.map(|(lo, _)| lo)),
            clips_max: Some(cfg.clips_per_view.map(|(_, hi)| hi)),
            view_cluster_offset: Some(cfg.view_cluster_offset),
            low_quality_fraction: Some(cfg.low_quality_fraction),
            low_quality_noise_mult: Some(cfg.low_quality_noise_mult),
            score_gain: Some(cfg.score_gain),
            score_noise: Some(cfg.score_noise),
            view_prob_noise: Some(cfg.view_prob_noise),
            seed: Some(cfg.seed),
            direction_seed: Some(cfg.direction_seed),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub policies: Option<Vec<String>>,
    pub seeds: Option<usize>,
    pub uncertain_quantile: Option<f64>,
    pub std_threshold: Option<f64>,
    /// `max_prob` or `true_view`.
    pub weight_rule: Option<String>,
    pub greedy: Option<bool>,
    pub n_max: Option<usize>,
    pub export_fig2: Option<bool>,
    pub export_fig3: Option<bool>,
}

impl EvalSection {
    pub fn settings(&self) -> Result<EvalSettings> {
        let mut s = EvalSettings::default();
        if let Some(n) = self.seeds {
            if n == 0 {
                return Err(Error::Config("eval needs at least one seed".into()));
            }
            s.n_seeds = n;
        }
        if let Some(q) = self.uncertain_quantile {
            s.uncertain_quantile = q;
        }
        if let Some(t) = self.std_threshold {
            s.std_threshold = t;
        }
        if let Some(rule) = &self.weight_rule {
            s.weight_rule = match rule.as_str() {
                "max_prob" => WeightRule::MaxProb,
                "true_view" => WeightRule::TrueView,
                other => return Err(Error::Config(format!("unknown weight rule {other:?}"))),
            };
        }
        if let Some(g) = self.greedy {
            s.greedy = g;
        }
        if let Some(n) = self.n_max {
            s.n_max = n;
        }
        Ok(s)
    }

    pub fn policy_list(&self) -> Result<Option<Vec<PolicyKind>>> {
        match &self.policies {
            None => Ok(None),
            Some(names) => {
                let mut out = Vec::new();
                for name in names {
                    out.push(PolicyKind::parse(name)?);
                }
                Ok(Some(out))
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

pub fn write_snapshot(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Agent checkpoints: a versioned, self-describing serialization of all
//! parameter tensors plus the network specs and the episode settings needed
//! to evaluate the agent later. Loading rejects shape mismatches.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GaussianInit};
use crate::error::{Error, Result};
use crate::nets::{AgentMode, AgentNets, AttentionPooler, Pooler};
use crate::nn::{Dense, Mlp, MlpSpec};

pub const CHECKPOINT_FORMAT: &str = "clipstop-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct MlpRecord {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

impl MlpRecord {
    fn capture(net: &Mlp) -> Self {
        Self { spec: net.spec().clone(), layers: net.layers.clone() }
    }

    fn restore(self) -> Result<Mlp> {
        let mut net = Mlp::from_parts(self.spec, self.layers)?;
        for p in net.params_mut() {
            p.ensure_grad();
            if !p.all_finite() {
                return Err(Error::Validation("checkpoint contains non-finite values".into()));
            }
        }
        Ok(net)
    }
}

/// A complete training artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    pub mode: AgentMode,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub policy_to_pooler: bool,
    pub env: EnvConfig,
    pub init: GaussianInit,
    attention: Option<Dense>,
    value: MlpRecord,
    actor: MlpRecord,
    predictor: Option<MlpRecord>,
}

impl Checkpoint {
    pub fn capture(nets: &AgentNets, init: &GaussianInit, env: EnvConfig) -> Self {
        let attention = match &nets.pooler {
            Pooler::Attention(att) => Some(att.dense.clone()),
            Pooler::Mean => None,
        };
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            mode: nets.mode,
            feature_dim: nets.feature_dim,
            hidden_width: nets.hidden_width,
            policy_to_pooler: nets.policy_to_pooler,
            env,
            init: init.clone(),
            attention,
            value: MlpRecord::capture(&nets.value),
            actor: MlpRecord::capture(&nets.actor),
            predictor: nets.predictor.as_ref().map(MlpRecord::capture),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Validation(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Parse { line: 0, msg: format!("bad checkpoint: {e}") })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the networks, validating every shape against the stored specs
    /// and the structural expectations of the stored mode.
    pub fn restore(self) -> Result<(AgentNets, GaussianInit, EnvConfig)> {
        let pooler = match (self.mode, self.attention) {
            (AgentMode::Full | AgentMode::Ab1, Some(dense)) => {
                Pooler::Attention(AttentionPooler::from_parts(dense, self.feature_dim)?)
            }
            (AgentMode::Ab2, None) => Pooler::Mean,
            (mode, _) => {
                return Err(Error::Validation(format!(
                    "checkpoint attention parameters do not match mode {mode:?}"
                )));
            }
        };
        let predictor = match (self.mode, self.predictor) {
            (AgentMode::Full | AgentMode::Ab2, Some(rec)) => Some(rec.restore()?),
            (AgentMode::Ab1, None) => None,
            (mode, _) => {
                return Err(Error::Validation(format!(
                    "checkpoint predictor does not match mode {mode:?}"
                )));
            }
        };
        let value = self.value.restore()?;
        let actor = self.actor.restore()?;
        if value.spec().input_dim() != self.feature_dim
            || actor.spec().input_dim() != self.feature_dim
        {
            return Err(Error::Shape("checkpoint widths do not match feature_dim".into()));
        }
        let nets = AgentNets {
            mode: self.mode,
            feature_dim: self.feature_dim,
            hidden_width: self.hidden_width,
            policy_to_pooler: self.policy_to_pooler,
            pooler,
            value,
            actor,
            predictor,
        };
        Ok((nets, self.init, self.env))
    }
}

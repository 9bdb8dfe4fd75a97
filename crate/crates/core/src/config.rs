//! Run configuration file: TOML with one table per component.
//!
//! ```toml
//! [model]
//! hidden_dim = 64
//! [moe]
//! top_k = 2
//! [contrastive]
//! temperature = 0.07
//! [train]
//! total_steps = 2000
//! [train.loss_weights]
//! contrastive_weight = 0.01
//! [corpus]
//! num_tasks = 4
//! ```
//!
//! Every table and key is optional; unknown keys are rejected.

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::MoeConfig;
use crate::training::{SyntheticCorpusSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub contrastive: ContrastiveConfig,
    pub train: TrainConfig,
    pub corpus: SyntheticCorpusSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe.validate()?;
        self.contrastive.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.corpus.seq_len > self.model.max_seq_len {
            return Err(crate::error::config(format!(
                "corpus.seq_len {} exceeds model.max_seq_len {}",
                self.corpus.seq_len, self.model.max_seq_len
            )));
        }
        if self.corpus.vocab_size > self.model.vocab_size {
            return Err(crate::error::config(
                "corpus.vocab_size exceeds model.vocab_size",
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (re-serialized) TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// The small model used for gradient checks: `d = 16`, 2 layers,
    /// 4 experts with top-2, `d_h = 16`, `K = 4`, dropout on.
    pub fn gradcheck() -> Self {
        let mut cfg = Self {
            model: ModelConfig {
                vocab_size: 24,
                hidden_dim: 16,
                num_layers: 2,
                num_heads: 2,
                mlp_inner_dim: 32,
                max_seq_len: 8,
                attn_lora_rank: 2,
                attn_lora_alpha: 4.0,
                ..ModelConfig::default()
            },
            moe: MoeConfig {
                num_experts: 4,
                top_k: 2,
                rank: 2,
                lora_alpha: 4.0,
                ..MoeConfig::default()
            },
            contrastive: ContrastiveConfig {
                proj_dim: 16,
                queue_len: 4,
                ..ContrastiveConfig::default()
            },
            ..Self::default()
        };
        cfg.corpus.vocab_size = 24;
        cfg.corpus.num_tasks = 2;
        cfg.corpus.seq_len = 7;
        cfg.corpus.num_sequences = 16;
        cfg.train.batch_size = 2;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.train.total_steps = 321;
        cfg.moe.router_noise = crate::moe::RouterNoise::Gaussian(0.5);
        cfg.contrastive.num_negatives = Some(3);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[model]\nhiden_dim = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
        assert!(RunConfig::from_toml_str("[optimizer]\nlr = 1\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nwarmup_steps = 10\ntotal_steps = 10\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_str("[moe]\ntop_k = 9\n").is_err());
        assert!(RunConfig::from_toml_str("[contrastive]\ntemperature = 0.0\n").is_err());
        assert!(RunConfig::gradcheck().validate().is_ok());
    }
}

//! Merged configuration: one JSON file covering model geometry, training,
//! decoding, graph construction and vocabulary limits. Every field has a
//! default; file values override defaults; command-line flags override the
//! file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DiscourseConfig, LdaConfig};
use crate::inference::DecodeConfig;
use crate::model::ModelConfig;
use crate::text::EncodeCaps;
use crate::training::TrainConfig;

/// Vocabulary construction limits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_size: 50_000,
        }
    }
}

/// Graph construction options shared by `build-graph` and on-the-fly graphs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Entries below this are zeroed (diagonal exempt); 0 keeps graphs dense.
    pub threshold: f64,
    pub lda: LdaConfig,
    pub discourse: DiscourseConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            threshold: 0.0,
            lda: LdaConfig::default(),
            discourse: DiscourseConfig::default(),
        }
    }
}

/// The full configuration tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub graph: GraphConfig,
    pub vocab: VocabConfig,
}

impl Config {
    /// Loads a JSON config file over the defaults. Unknown keys are fatal.
    pub fn load(path: &Path) -> Result<Config> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading config {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Encoding caps implied by the model geometry.
    pub fn caps(&self) -> EncodeCaps {
        EncodeCaps {
            max_paragraphs: self.model.max_paragraphs,
            max_tokens_per_paragraph: self.model.max_tokens_per_paragraph,
            max_summary_tokens: self.model.max_summary_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_field() {
        let cfg = Config::default();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.train.clip_norm, 2.0);
        assert_eq!(cfg.decode.beam, 5);
        assert_eq!(cfg.graph.threshold, 0.0);
    }

    #[test]
    fn file_overrides_defaults_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": {"d_model": 32, "heads": 2}}"#).unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.d_ff, 256); // untouched default

        std::fs::write(&path, r#"{"model": {"d_modell": 32}}"#).unwrap();
        assert!(matches!(Config::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = Config::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}

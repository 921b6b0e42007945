//! Settings file shared by every subcommand.
//!
//! ```toml
//! seed = 7
//!
//! [model]          # network geometry, see ModelConfig
//! base_channels = 8
//! [model.lca]
//! d = 2
//!
//! [train]          # optimisation, see TrainConfig
//! epochs = 50
//!
//! [synth]          # scene generator, see SynthSpec
//! max_targets = 3
//! ```
//!
//! The file is read first; explicit command-line flags then override it.

use std::path::Path;

use lcae_core::data::SynthSpec;
use lcae_core::model::ModelConfig;
use lcae_core::train::TrainConfig;
use lcae_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    #[serde(skip)]
    pub input_size_given: bool,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: FileConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.input_size_given = table
            .get("model")
            .and_then(|m| m.as_table())
            .is_some_and(|m| m.contains_key("input_size"));
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_defaults() {
        let cfg = FileConfig::parse("seed = 3\n[model]\nbase_channels = 8\n[model.lca]\nd = 2\n[train]\nepochs = 5\nmilestones = []").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!((cfg.model.base_channels, cfg.model.lca.d, cfg.train.epochs), (8, 2, 5));
        assert!(!cfg.input_size_given);
        assert!(FileConfig::parse("[model]\ninput_size = [64, 64]").unwrap().input_size_given);
        assert!(FileConfig::parse("colour = 1").is_err());
    }
}

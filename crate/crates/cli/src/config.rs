use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stainkit::enhance::EnhanceMode;
use stainkit::metrics::{KidOptions, DEFAULT_PATCH_SIZE};
use stainkit::synth::SynthConfig;
use stainkit::training::{TeacherTrainConfig, TrainConfig};
use stainkit::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceSection {
    pub mode: EnhanceMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub niqe_patch_size: usize,
    /// Embedder weights file; the built-in fixed-seed embedder when unset.
    pub embedder: Option<PathBuf>,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
    pub kid_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let k = KidOptions::default();
        Self {
            niqe_patch_size: DEFAULT_PATCH_SIZE,
            embedder: None,
            kid_subsets: k.subsets,
            kid_subset_size: k.subset_size,
            kid_seed: k.seed,
        }
    }
}

impl EvaluateSection {
    pub fn kid_options(&self) -> KidOptions {
        KidOptions {
            subsets: self.kid_subsets,
            subset_size: self.kid_subset_size,
            seed: self.kid_seed,
        }
    }
}

/// Everything one pipeline needs; every section is optional in the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides the seed of every section when set.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub enhance: EnhanceSection,
    pub teacher: TeacherTrainConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("config file {}", path.display())),
            _ => Error::Config(format!("{}: {e}", path.display())),
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the seed override and checks every section.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.teacher.seed = s;
            self.train.seed = s;
        }
        self.synth.validate()?;
        self.teacher.validate()?;
        self.train.validate()?;
        if self.evaluate.niqe_patch_size < 8 || self.evaluate.niqe_patch_size % 2 != 0 {
            return Err(Error::Config("evaluate.niqe_patch_size must be even and >= 8".into()));
        }
        if self.evaluate.kid_subsets == 0 || self.evaluate.kid_subset_size < 2 {
            return Err(Error::Config("KID needs at least one subset of size >= 2".into()));
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let cfg = PipelineConfig::parse("seed = 3\n[train]\nseed = 9\n").unwrap();
        let r = cfg.clone().resolve(None).unwrap();
        assert_eq!((r.synth.seed, r.teacher.seed, r.train.seed), (3, 3, 3));
        let r = cfg.resolve(Some(11)).unwrap();
        assert_eq!((r.synth.seed, r.teacher.seed, r.train.seed, r.seed), (11, 11, 11, Some(11)));
    }

    #[test]
    fn sections_parse_and_hash_changes() {
        let text = "[train]\nvariant = \"ablation2\"\nupdate_order = \"generator-first\"\n[train.weights]\nlambda1 = 2.5\n[enhance]\nmode = \"per-image\"\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.train.weights.lambda1, 2.5);
        assert_eq!(cfg.enhance.mode, EnhanceMode::PerImage);
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
        assert!(PipelineConfig::parse("[train]\nlr = 1\n").is_err());
        assert!(PipelineConfig::default().resolve(None).is_ok());
        let bad = PipelineConfig::parse("[evaluate]\nniqe_patch_size = 7\n").unwrap();
        assert!(bad.resolve(None).is_err());
    }
}

//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::matching::MatchWeights;
use crate::model::ArmConfig;
use crate::parser::ModelConfig;
use crate::synth::{DatasetConfig, StyleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path to `manifest.jsonl`.
    pub manifest: PathBuf,
    pub train_split: String,
    pub test_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: PathBuf::from("data/manifest.jsonl"), train_split: "train".into(), test_split: "test".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Styles rendered as intervened views for the invariance loss.
    pub views: Vec<StyleId>,
    pub matching: MatchWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), views: vec![StyleId::Cartoon, StyleId::Sketch], matching: MatchWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of training after which the step size is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 8, lr: 2e-4, weight_decay: 1e-4, lr_drop_at: 0.8, lr_drop_factor: 0.1, checkpoint_every: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub max_instances: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.5, max_instances: 4, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub arm: ArmConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            arm: ArmConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.arm.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&t.lr_drop_at) || !(t.lr_drop_factor > 0.0) {
            return Err(Error::Config("lr_drop_at must be in [0, 1] and lr_drop_factor positive".into()));
        }
        if self.arm.use_inv && self.loss.views.is_empty() {
            return Err(Error::Config("use_inv needs at least one view style".into()));
        }
        if self.eval.max_instances == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex digest of everything that influences training, excluding the
    /// run name and data location.
    pub fn fingerprint(&self) -> Result<String> {
        let key = serde_json::json!({
            "seed": self.seed,
            "model": self.model,
            "arm": self.arm,
            "loss": self.loss,
            "train": self.train,
            "splits": [self.data.train_split, self.data.test_split],
        });
        Ok(hex_digest(serde_json::to_string(&key)?.as_bytes()))
    }
}

/// Settings for the three comparison protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seeds: Vec<u64>,
    /// Seeds of the test-time interventions; results are averaged.
    pub intervention_seeds: Vec<u64>,
    pub train_split: String,
    pub test_split: String,
    pub cartoon_split: String,
    pub sketch_split: String,
    /// Test scenes used by the representation probes.
    pub probe_scenes: usize,
    /// Single-threaded kernels, so tables regenerate bit for bit.
    pub strict: bool,
    pub dataset: DatasetConfig,
    pub base: ExperimentConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        use crate::synth::SplitSpec;
        let split = |name: &str, size, style| SplitSpec { name: name.into(), size, styles: vec![style] };
        ProtocolConfig {
            seeds: vec![0, 1, 2],
            intervention_seeds: vec![0, 1, 2],
            dataset: DatasetConfig {
                scene: Default::default(),
                seed_base: 0,
                max_persons: 4,
                splits: vec![
                    split("train", 300, StyleId::Natural),
                    split("test", 60, StyleId::Natural),
                    split("test_cartoon", 60, StyleId::Cartoon),
                    split("test_sketch", 60, StyleId::Sketch),
                ],
            },
            train_split: "train".into(),
            test_split: "test".into(),
            cartoon_split: "test_cartoon".into(),
            sketch_split: "test_sketch".into(),
            probe_scenes: 60,
            strict: true,
            base: ExperimentConfig::default(),
        }
    }
}

impl ProtocolConfig {
    /// Small preset that trains every arm in minutes on one CPU core:
    /// 64px scenes, a 16x16 feature grid and 32-wide features.
    pub fn desk() -> Self {
        let mut p = ProtocolConfig::default();
        p.dataset.scene.image_size = 64;
        p.dataset.scene.scale_range = (0.3, 0.4);
        p.dataset.splits[0].size = 240;
        for s in &mut p.dataset.splits[1..] {
            s.size = 60;
        }
        p.base.model = ModelConfig { image_size: 64, stride: 4, dim: 32, num_queries: 8, decoder_layers: 2, heads: 4, kernel_hidden: 32 };
        p.base.train = TrainConfig { epochs: 30, batch_size: 8, lr: 1e-3, checkpoint_every: 10, ..TrainConfig::default() };
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.base.validate()?;
        if self.seeds.is_empty() || self.intervention_seeds.is_empty() {
            return Err(Error::Config("protocol needs at least one seed".into()));
        }
        for name in [&self.train_split, &self.test_split, &self.cartoon_split, &self.sketch_split] {
            if !self.dataset.splits.iter().any(|s| &s.name == name) {
                return Err(Error::Config(format!("dataset has no split `{name}`")));
            }
        }
        if self.dataset.scene.image_size != self.base.model.image_size {
            return Err(Error::Config("dataset and model image sizes differ".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let p = ProtocolConfig::default();
        let text = toml::to_string(&p).unwrap();
        assert_eq!(ProtocolConfig::from_toml(&text).unwrap(), p);
    }

    #[test]
    fn div_without_cfs_is_rejected() {
        let text = "[arm]\nuse_cfs = false\nuse_div = true\nuse_inv = false\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[train]\nepochs = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_name_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { name: "other".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }
}

//! TOML run configuration covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::decoders::{Decoder2DConfig, Decoder3DConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::mapnet::MapperConfig;
use crate::pipeline::Mode;
use crate::polyprep::PolyprepConfig;
use crate::synthgen::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub fpr_limits: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { fpr_limits: vec![0.3, 0.01] }
    }
}

/// Sample counts for the `synth` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCounts {
    pub train: usize,
    pub test_nominal: usize,
    pub test_anomalous: usize,
}

impl Default for SynthCounts {
    fn default() -> Self {
        Self { train: 64, test_nominal: 32, test_anomalous: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: Mode,
    /// Dataset manifest; defaults to `<out_dir>/data/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub synth_counts: SynthCounts,
    pub align: AlignConfig,
    pub mapper: MapperConfig,
    pub decoder2d: Decoder2DConfig,
    pub decoder3d: Decoder3DConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub metrics: MetricsConfig,
    pub polyprep: PolyprepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mode: Mode::default(),
            manifest: None,
            synth: SynthConfig::default(),
            synth_counts: SynthCounts::default(),
            align: AlignConfig::default(),
            mapper: MapperConfig::default(),
            decoder2d: Decoder2DConfig::default(),
            decoder3d: Decoder3DConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            metrics: MetricsConfig::default(),
            polyprep: PolyprepConfig::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Schema { path: "config".into(), msg: e.to_string() })?;
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: format!("config: {}", e.path()),
            msg: e.into_inner().message().to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fusion.validate()?;
        self.polyprep.validate()?;
        positive("synth_counts.train", self.synth_counts.train)?;
        positive("mapper.depth", self.mapper.depth)?;
        if self.mapper.hidden == Some(0) {
            return Err(Error::Config("mapper.hidden must be positive".into()));
        }
        let d2 = &self.decoder2d;
        for (n, v) in [("latent", d2.latent), ("window", d2.window), ("mlp_ratio", d2.mlp_ratio), ("kernel", d2.kernel), ("stride", d2.stride)] {
            positive(&format!("decoder2d.{n}"), v)?;
        }
        let d3 = &self.decoder3d;
        for (n, v) in [("latent", d3.latent), ("kernel", d3.kernel), ("stride", d3.stride), ("gate_kernel", d3.gate_kernel)] {
            positive(&format!("decoder3d.{n}"), v)?;
        }
        positive("align.k", self.align.k)?;
        let adam = &self.train.adam;
        if !(adam.lr > 0.0 && adam.lr.is_finite()) || !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) || adam.eps <= 0.0 {
            return Err(Error::Config("train.adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if self.metrics.fpr_limits.is_empty() || self.metrics.fpr_limits.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::Config("metrics.fpr_limits must be nonempty and lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out_dir.join("data").join("manifest.jsonl"))
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\nmode = \"3d\"\n[fusion]\nvariant = \"c6\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, Mode::ThreeD);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.fusion.variant, crate::fusion::Variant::C6);
        assert_eq!(cfg.decoder2d, Decoder2DConfig::default());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_values_are_rejected() {
        match RunConfig::from_toml("[fusion]\ntemperature = \"hot\"\n") {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "config: fusion.temperature"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.metrics.fpr_limits = vec![0.0];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.decoder2d.window = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

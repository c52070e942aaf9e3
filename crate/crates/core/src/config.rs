//! Model architecture bundle and the TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::{DatasetManifest, DegradationKind};
use crate::error::{bail_validation, Error, Result};
use crate::hflora::{DiscConfig, LoraConfig, LoraTrainConfig};
use crate::lhvae::{PriorConfig, Stage1Config, VaeConfig};
use crate::nn::derive_seed;
use crate::pipeline::{DEFAULT_OVERLAP, DEFAULT_TILE};
use crate::restorer::{RestorerConfig, RestorerTrainConfig};
use crate::training::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub prior: PriorConfig,
    pub restorer: RestorerConfig,
    pub lora: LoraConfig,
    pub disc: DiscConfig,
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            vae: VaeConfig::reference(),
            prior: PriorConfig::reference(),
            restorer: RestorerConfig::reference(),
            lora: LoraConfig::reference(),
            disc: DiscConfig::reference(),
        }
    }

    /// Narrow VAE and restorer for 64×64 desk experiments.
    pub fn desk() -> Self {
        Self {
            vae: VaeConfig::desk(),
            restorer: RestorerConfig { width: 32, blocks: 4 },
            ..Self::reference()
        }
    }

    pub fn toy() -> Self {
        Self {
            vae: VaeConfig::toy(),
            prior: PriorConfig::toy(),
            restorer: RestorerConfig::toy(),
            lora: LoraConfig { rank: 1, gamma: 1.0 },
            disc: DiscConfig { widths: vec![2, 2] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.prior.validate()?;
        self.restorer.validate()?;
        self.lora.validate()?;
        self.disc.validate()?;
        if self.prior.downsample() != self.vae.downsample() {
            return Err(crate::Error::Config(format!(
                "prior factor {} differs from the VAE factor {}",
                self.prior.downsample(),
                self.vae.downsample()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub tile: usize,
    pub overlap: usize,
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    /// Trailing dataset samples held out from training for evaluation.
    pub holdout: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
            alpha: 0.5,
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            holdout: 64,
        }
    }
}

pub const MAX_SEED: u64 = i64::MAX as u64;

/// Everything one end-to-end run needs, as a single TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `resolved` derives every stage seed from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub dataset: DatasetManifest,
    pub stage1: Stage1Config,
    pub restorer: RestorerTrainConfig,
    pub lora: LoraTrainConfig,
    pub pipeline: PipelineOptions,
}

impl RunConfig {
    /// 512 procedural 64×64 images with three degradations, desk-sized model.
    pub fn desk() -> Self {
        let kinds = vec![DegradationKind::GaussianNoise, DegradationKind::LowLight, DegradationKind::Haze];
        let mut stage1 = Stage1Config::new(1500, kinds.clone());
        stage1.optim.lr = 2e-3;
        let lora = LoraTrainConfig {
            optim: OptimConfig { lr: 1e-4, ..OptimConfig::default() },
            disc_optim: OptimConfig { lr: 1e-4, ..OptimConfig::default() },
            ..LoraTrainConfig::default()
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            model: ModelConfig::desk(),
            dataset: DatasetManifest::procedural(512, 64, kinds, 0),
            stage1,
            restorer: RestorerTrainConfig::default(),
            lora,
            pipeline: PipelineOptions::default(),
        }
    }

    /// Copy with every stage seed derived from the master seed, kept to 63 bits
    /// because TOML integers are signed.
    pub fn resolved(&self) -> Self {
        let stage = |stream| derive_seed(self.seed, stream) & MAX_SEED;
        let mut r = self.clone();
        r.dataset.seed = stage(100);
        r.stage1.seed = stage(101);
        r.restorer.seed = stage(102);
        r.lora.seed = stage(103);
        r
    }

    fn seeds(&self) -> [u64; 6] {
        [self.seed, self.model.prior.seed, self.dataset.seed, self.stage1.seed, self.restorer.seed, self.lora.seed]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.seeds().into_iter().find(|&s| s > MAX_SEED) {
            bail_validation!("seed {s} exceeds {MAX_SEED}, the largest TOML integer");
        }
        self.model.validate()?;
        self.dataset.validate()?;
        self.stage1.validate(self.model.vae.downsample(), self.dataset.resolution)?;
        self.restorer.validate()?;
        self.lora.validate()?;
        let p = &self.pipeline;
        if p.alpha_grid.is_empty() || !p.alpha_grid.iter().chain([&p.alpha]).all(|a| (0.0..=1.0).contains(a)) {
            bail_validation!("alpha values must lie in [0, 1] and the grid must be non-empty");
        }
        if p.tile == 0 || 2 * p.overlap >= p.tile {
            bail_validation!("tile {} / overlap {} invalid", p.tile, p.overlap);
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

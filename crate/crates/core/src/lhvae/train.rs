use std::collections::BTreeMap;

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian_noise, stage1_loss, SemanticPrior, Stage1Batch, Stage1Weights, Vae};
use crate::checkpoint::{CheckpointBundle, Stage};
use crate::config::ModelConfig;
use crate::degrade::{perturb, Dataset, DegradationKind, PerturbConfig};
use crate::error::{bail_validation, Error, Result};
use crate::nn::derive_seed;
use crate::tensor::{HwcTensor, ImageTensor};
use crate::training::{guard_finite, random_crop, OptimConfig, SnapshotPolicy, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub weights: Stage1Weights,
    pub perturb: PerturbConfig,
    /// Latent downsampling scales for the equivariance term; each must divide the latent size.
    pub eqv_scales: Vec<usize>,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Square training crop in pixels; `None` trains on full images.
    #[serde(default)]
    pub crop: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub snapshot: SnapshotPolicy,
}

fn default_log_every() -> usize {
    50
}

impl Stage1Config {
    pub fn new(steps: usize, kinds: Vec<DegradationKind>) -> Self {
        Self {
            weights: Stage1Weights::default(),
            perturb: PerturbConfig::for_steps(steps, kinds),
            eqv_scales: vec![1, 2],
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            steps,
            batch_size: 8,
            crop: Some(32),
            seed: 0,
            log_every: default_log_every(),
            snapshot: SnapshotPolicy::default(),
        }
    }

    pub fn validate(&self, downsample: usize, resolution: usize) -> Result<()> {
        self.weights.validate()?;
        self.perturb.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.log_every == 0 {
            bail_validation!("batch size and log interval must be positive");
        }
        let side = self.crop.unwrap_or(resolution).min(resolution);
        if side % downsample != 0 {
            bail_validation!("training size {side} not divisible by the downsample factor {downsample}");
        }
        let latent = side / downsample;
        if self.eqv_scales.is_empty() {
            bail_validation!("at least one equivariance scale is required");
        }
        if let Some(s) = self.eqv_scales.iter().find(|&&s| s == 0 || latent % s != 0) {
            bail_validation!("equivariance scale {s} does not divide the latent size {latent}");
        }
        Ok(())
    }
}

/// Draws crops, perturbations, noise and the equivariance scale for step `t`.
/// Returns the batch with its clean and perturbed crops (for diagnostics).
pub fn sample_stage1_batch(
    dataset: &Dataset,
    t: usize,
    cfg: &Stage1Config,
    latent_channels: usize,
    downsample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Stage1Batch, Vec<ImageTensor>, Vec<ImageTensor>)> {
    let dev = Device::Cpu;
    let mut cleans = Vec::with_capacity(cfg.batch_size);
    let mut perturbed = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let sample = &dataset.samples[rng.random_range(0..dataset.len())];
        let (h, w, _) = sample.clean.shape();
        let (top, left, ch, cw) = random_crop(rng, h, w, cfg.crop);
        let clean = sample.clean.crop(top, left, ch, cw)?;
        let paired = if sample.degraded.is_empty() {
            None
        } else {
            let k = rng.random_range(0..sample.degraded.len());
            let deg = sample.degraded.values().nth(k).expect("index in range");
            Some(deg.crop(top, left, ch, cw)?)
        };
        let (p, _) = perturb(&clean, paired.as_ref(), t as i64, &cfg.perturb, rng.random())?;
        cleans.push(clean);
        perturbed.push(p);
    }
    let c: Vec<&ImageTensor> = cleans.iter().collect();
    let p: Vec<&ImageTensor> = perturbed.iter().collect();
    let clean_t = HwcTensor::stack_nchw(&c, DType::F32, &dev)?;
    let (n, _, h, w) = clean_t.dims4()?;
    let eps = gaussian_noise((n, latent_channels, h / downsample, w / downsample), rng.random(), DType::F32, &dev)?;
    let eqv_scale = cfg.eqv_scales[rng.random_range(0..cfg.eqv_scales.len())];
    Ok((
        Stage1Batch {
            clean: clean_t,
            perturbed: HwcTensor::stack_nchw(&p, DType::F32, &dev)?,
            eps,
            eqv_scale,
        },
        cleans,
        perturbed,
    ))
}

/// Stage-1 optimization of encoder, decoder and projection head.
pub fn train_stage1(cfg: &Stage1Config, model: &ModelConfig, dataset: &Dataset) -> Result<(CheckpointBundle, TrainLog)> {
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("Stage-1 training needs a non-empty dataset".into()));
    }
    let vae = Vae::new(model.vae.clone())?;
    let f = vae.downsample();
    cfg.validate(f, dataset.samples[0].clean.height().min(dataset.samples[0].clean.width()))?;
    let dev = Device::Cpu;
    let prior = SemanticPrior::from_config(&model.prior, model.vae.latent_channels, &dev)?;
    let mut init = vae.init_params(derive_seed(cfg.seed, 1), &dev)?;
    init.extend(&prior.init_projection(derive_seed(cfg.seed, 2), &dev)?);

    let mut log = TrainLog::default();
    let params = if cfg.steps == 0 {
        init
    } else {
        let vars = init.to_vars()?;
        let mut opt = cfg.optim.build(&vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
        for step in 0..cfg.steps {
            let (batch, cleans, perturbed) =
                sample_stage1_batch(dataset, step, cfg, model.vae.latent_channels, f, &mut rng)?;
            let (loss, terms) = stage1_loss(&vae, &vars.params(), &prior, &batch, &cfg.weights)?;
            let snap: Vec<(&str, &ImageTensor)> = cleans
                .iter()
                .map(|c| ("clean", c))
                .chain(perturbed.iter().map(|p| ("perturbed", p)))
                .collect();
            guard_finite(step, &terms, &snap, &cfg.snapshot)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.steps {
                log.push(step, "stage1", terms);
            }
            let grads = loss.backward()?;
            candle_nn::Optimizer::step(&mut opt, &grads)?;
        }
        vars.snapshot()?
    };

    let mut bundle = CheckpointBundle::new(Stage::Stage1, model.clone(), params);
    bundle.training = BTreeMap::from([("stage1".to_string(), serde_json::to_value(cfg)?)]);
    Ok((bundle, log))
}

//! Latent restoration network R_θ: residual conv blocks at latent resolution with a
//! global skip, trained through the frozen decoder.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointBundle, Stage};
use crate::degrade::Dataset;
use crate::error::{bail_validation, Error, Result};
use crate::lhvae::{gaussian_noise, param_dtype, recon_l1_t, Vae};
use crate::nn::{derive_seed, scalar, Activation, ConvSpec, ParamSet};
use crate::tensor::{HwcTensor, ImageTensor, LatentTensor};
use crate::training::{guard_finite, random_crop, OptimConfig, SnapshotPolicy, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestorerConfig {
    pub width: usize,
    pub blocks: usize,
}

impl RestorerConfig {
    pub fn reference() -> Self {
        Self { width: 64, blocks: 6 }
    }

    pub fn toy() -> Self {
        Self { width: 3, blocks: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            bail_validation!("restorer width must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: RestorerConfig,
    latent_channels: usize,
    conv_in: ConvSpec,
    blocks: Vec<(ConvSpec, ConvSpec)>,
    conv_out: ConvSpec,
}

impl Restorer {
    pub fn new(config: RestorerConfig, latent_channels: usize) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let blocks = (0..config.blocks)
            .map(|i| {
                (
                    ConvSpec::new(format!("restorer.block{i}.conv1"), w, w, 3, 1),
                    ConvSpec::new(format!("restorer.block{i}.conv2"), w, w, 3, 1),
                )
            })
            .collect();
        Ok(Self {
            conv_in: ConvSpec::new("restorer.conv_in", latent_channels, w, 3, 1),
            conv_out: ConvSpec::new("restorer.conv_out", w, latent_channels, 3, 1),
            blocks,
            latent_channels,
            config,
        })
    }

    fn convs(&self) -> Vec<&ConvSpec> {
        let mut v = vec![&self.conv_in];
        for (a, b) in &self.blocks {
            v.push(a);
            v.push(b);
        }
        v.push(&self.conv_out);
        v
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    /// Random weights with a zero output layer, so the initial map is the identity.
    pub fn init_params(&self, seed: u64, device: &Device) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for spec in self.convs() {
            for (k, v) in spec.init(&mut rng, 1.0, device)? {
                p.insert(k, v);
            }
        }
        let out = &self.conv_out;
        p.insert(out.weight_name(), Tensor::zeros(out.weight_shape(), DType::F32, device)?);
        Ok(p)
    }

    pub fn forward_t(&self, p: &ParamSet, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.latent_channels {
            bail_validation!("latent has {c} channels, restorer expects {}", self.latent_channels);
        }
        let mut h = Activation::Silu.apply(&self.conv_in.forward(p, z)?)?;
        for (a, b) in &self.blocks {
            let r = b.forward(p, &Activation::Silu.apply(&a.forward(p, &h)?)?)?;
            h = (h + r)?;
        }
        Ok((z + self.conv_out.forward(p, &h)?)?)
    }

    pub fn restore_latent(&self, p: &ParamSet, z: &LatentTensor) -> Result<LatentTensor> {
        let t = z.to_nchw(param_dtype(p)?, &Device::Cpu)?;
        Ok(HwcTensor::unstack_nchw(&self.forward_t(p, &t)?)?.remove(0))
    }
}

/// ∥D_ψ*(R_θ(z_deg)) − I_clean∥₁; only θ may carry gradient.
pub fn res_loss_t(
    restorer: &Restorer,
    theta: &ParamSet,
    vae: &Vae,
    vae_params: &ParamSet,
    z_deg: &Tensor,
    clean: &Tensor,
) -> Result<Tensor> {
    let out = vae.decode_t(vae_params, &restorer.forward_t(theta, z_deg)?)?;
    recon_l1_t(&out, clean)
}

pub fn res_loss(
    restorer: &Restorer,
    theta: &ParamSet,
    vae: &Vae,
    vae_params: &ParamSet,
    z_deg: &LatentTensor,
    clean: &ImageTensor,
) -> Result<f64> {
    let dt = param_dtype(theta)?;
    let z = z_deg.to_nchw(dt, &Device::Cpu)?;
    let c = clean.to_nchw(dt, &Device::Cpu)?;
    scalar(&res_loss_t(restorer, theta, vae, vae_params, &z, &c)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestorerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square training crop in pixels (a multiple of the downsample factor); `None` = full images.
    #[serde(default)]
    pub crop: Option<usize>,
    pub optim: OptimConfig,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub snapshot: SnapshotPolicy,
}

fn default_log_every() -> usize {
    50
}

impl Default for RestorerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            crop: Some(32),
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            seed: 0,
            log_every: default_log_every(),
            snapshot: SnapshotPolicy::default(),
        }
    }
}

impl RestorerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            bail_validation!("batch size and log interval must be positive");
        }
        self.optim.validate()
    }
}

/// Encoder posterior of a degraded image, cached once because the encoder is frozen.
struct CachedPair {
    mu: Tensor,
    logvar: Tensor,
    clean: ImageTensor,
}

pub(crate) fn require_vae(bundle: &CheckpointBundle) -> Result<(Vae, ParamSet)> {
    if !(bundle.has_namespace("vae.enc.") && bundle.has_namespace("vae.dec.")) || bundle.stage < Stage::Stage1 {
        return Err(Error::Config("a trained Stage-1 VAE checkpoint is required".into()));
    }
    let vae = Vae::new(bundle.model.vae.clone())?;
    Ok((vae, bundle.params.with_prefix("vae.").frozen_copy()?))
}

/// Trains θ against the frozen decoder; the VAE blobs pass through untouched.
pub fn train_restorer(
    cfg: &RestorerTrainConfig,
    dataset: &Dataset,
    bundle: &CheckpointBundle,
) -> Result<(CheckpointBundle, TrainLog)> {
    cfg.validate()?;
    let (vae, vae_params) = require_vae(bundle)?;
    let f = vae.downsample();
    if let Some(c) = cfg.crop {
        if c == 0 || c % f != 0 {
            bail_validation!("restorer crop {c} must be a positive multiple of {f}");
        }
    }
    let restorer = Restorer::new(bundle.model.restorer.clone(), vae.config.latent_channels)?;
    let dev = Device::Cpu;
    let init = restorer.init_params(derive_seed(cfg.seed, 11), &dev)?;
    let mut log = TrainLog::default();

    let theta = if cfg.steps == 0 {
        init
    } else {
        let pairs = dataset.all_pairs();
        if pairs.is_empty() {
            return Err(Error::Config("dataset has no degraded pairs for restorer training".into()));
        }
        let mut cache = Vec::with_capacity(pairs.len());
        for (_, deg, clean) in &pairs {
            let (mu, logvar) = vae.encode_t(&vae_params, &deg.to_nchw(DType::F32, &dev)?)?;
            cache.push(CachedPair {
                mu,
                logvar,
                clean: (*clean).clone(),
            });
        }

        let vars = init.to_vars()?;
        let mut opt = cfg.optim.build(&vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12));
        for step in 0..cfg.steps {
            let theta = vars.params();
            let mut zs = Vec::with_capacity(cfg.batch_size);
            let mut cleans = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let item = &cache[rng.random_range(0..cache.len())];
                let (h, w, _) = item.clean.shape();
                let (top, left, ch, cw) = random_crop(&mut rng, h / f, w / f, cfg.crop.map(|c| c / f));
                let mu = item.mu.narrow(2, top, ch)?.narrow(3, left, cw)?;
                let lv = item.logvar.narrow(2, top, ch)?.narrow(3, left, cw)?;
                let eps = gaussian_noise(mu.dims4()?, rng.random(), DType::F32, &dev)?;
                zs.push((mu + (lv * 0.5)?.exp()?.mul(&eps)?)?);
                cleans.push(item.clean.crop(top * f, left * f, ch * f, cw * f)?);
            }
            let z = Tensor::cat(&zs, 0)?;
            let refs: Vec<&ImageTensor> = cleans.iter().collect();
            let clean = HwcTensor::stack_nchw(&refs, DType::F32, &dev)?;
            let loss = res_loss_t(&restorer, &theta, &vae, &vae_params, &z, &clean)?;
            let terms = BTreeMap::from([("res".to_string(), scalar(&loss)?)]);
            let batch: Vec<(&str, &ImageTensor)> = cleans.iter().map(|c| ("clean", c)).collect();
            guard_finite(step, &terms, &batch, &cfg.snapshot)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.steps {
                log.push(step, "restorer", terms);
            }
            let grads = loss.backward()?;
            candle_nn::Optimizer::step(&mut opt, &grads)?;
        }
        vars.snapshot()?
    };

    let mut params = ParamSet::new();
    for (k, v) in bundle.params.iter() {
        if !k.starts_with("restorer.") {
            params.insert(k.clone(), v.clone());
        }
    }
    params.extend(&theta);
    let mut out = bundle.clone();
    out.params = params;
    out.stage = bundle.stage.max(Stage::Restorer);
    out.training.insert("restorer".into(), serde_json::to_value(cfg)?);
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::procedural_image;

    #[test]
    fn zero_output_layer_is_identity_and_shape_preserving() {
        let r = Restorer::new(RestorerConfig::reference(), 4).unwrap();
        let p = r.init_params(1, &Device::Cpu).unwrap();
        let z = HwcTensor::from_fn(5, 7, 4, |y, x, c| (y * 3 + x + c) as f32 * 0.1 - 1.0);
        assert_eq!(r.restore_latent(&p, &z).unwrap(), z);
        assert!(r.restore_latent(&p, &HwcTensor::filled(4, 4, 3, 0.0)).is_err());
        assert!(r.num_params() < 500_000);
    }

    #[test]
    fn res_loss_zero_when_decoding_matches() {
        let vae = Vae::new(crate::lhvae::VaeConfig::reference()).unwrap();
        let vp = vae.init_params(0, &Device::Cpu).unwrap();
        let r = Restorer::new(RestorerConfig::reference(), 4).unwrap();
        let theta = r.init_params(0, &Device::Cpu).unwrap();
        let z = vae.encode(&vp, &procedural_image(32, 1)).unwrap().mu;
        let target = vae.decode(&vp, &z).unwrap();
        assert!(res_loss(&r, &theta, &vae, &vp, &z, &target).unwrap() < 1e-7);
    }
}

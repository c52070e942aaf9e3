use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    default_targets, disc_loss_t, effective_weights, fhf_loss_t, init_adapter, missing, phf_gen_loss_t,
    Discriminator,
};
use crate::checkpoint::{CheckpointBundle, Stage};
use crate::degrade::Dataset;
use crate::error::{bail_validation, Error, Result};
use crate::freq::HFOperatorConfig;
use crate::nn::{derive_seed, scalar, ParamSet};
use crate::restorer::{require_vae, Restorer};
use crate::tensor::{HwcTensor, ImageTensor};
use crate::training::{guard_finite, random_crop, OptimConfig, SnapshotPolicy, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTrainConfig {
    /// Total generator steps across both phases.
    pub steps: usize,
    /// Consecutive fidelity (encoder adapter) steps per cycle.
    pub n_f: usize,
    /// Consecutive perception (decoder adapter + discriminator) steps per cycle.
    pub n_p: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub crop: Option<usize>,
    pub optim: OptimConfig,
    pub disc_optim: OptimConfig,
    #[serde(default)]
    pub hf: HFOperatorConfig,
    /// Route the fidelity path through the restorer (ablation switch).
    #[serde(default)]
    pub restorer_in_fhf: bool,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub snapshot: SnapshotPolicy,
}

fn default_log_every() -> usize {
    50
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            n_f: 1,
            n_p: 1,
            batch_size: 8,
            crop: Some(32),
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            disc_optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            hf: HFOperatorConfig::default(),
            restorer_in_fhf: false,
            seed: 0,
            log_every: default_log_every(),
            snapshot: SnapshotPolicy::default(),
        }
    }
}

impl LoraTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.n_p == 0 {
            bail_validation!("phase lengths n_f and n_p must be ≥ 1");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            bail_validation!("batch size and log interval must be positive");
        }
        self.hf.validate()?;
        self.optim.validate()?;
        self.disc_optim.validate()
    }
}

struct Pair {
    deg: ImageTensor,
    clean: ImageTensor,
    /// R_θ(mu(E_φ*(deg))), fixed for the whole run.
    restored: Tensor,
}

/// Alternates fidelity steps on the encoder adapter with discriminator + perception steps
/// on the decoder adapter. The VAE and restorer are only ever read.
pub fn alternating_train(
    cfg: &LoraTrainConfig,
    dataset: &Dataset,
    bundle: &CheckpointBundle,
) -> Result<(CheckpointBundle, TrainLog)> {
    cfg.validate()?;
    let (vae, vae_params) = require_vae(bundle)?;
    if !bundle.has_namespace("restorer.") {
        return Err(missing("a trained restorer"));
    }
    let f = vae.downsample();
    if let Some(c) = cfg.crop {
        if c == 0 || c % f != 0 {
            bail_validation!("crop {c} must be a positive multiple of {f}");
        }
        if c < cfg.hf.min_extent() {
            bail_validation!("crop {c} is smaller than the high-pass support {}", cfg.hf.min_extent());
        }
    }
    let model = &bundle.model;
    let dev = Device::Cpu;
    let restorer = Restorer::new(model.restorer.clone(), model.vae.latent_channels)?;
    let theta = bundle.params.with_prefix("restorer.").frozen_copy()?;
    let disc = Discriminator::new(&model.disc)?;
    let (enc_targets, dec_targets) = default_targets(&vae, model.lora.rank);
    let gamma = model.lora.gamma;

    let enc_init = init_adapter(&enc_targets, model.lora.rank, derive_seed(cfg.seed, 21), &dev)?;
    let dec_init = init_adapter(&dec_targets, model.lora.rank, derive_seed(cfg.seed, 22), &dev)?;
    let disc_init = disc.init_params(derive_seed(cfg.seed, 23), &dev)?;
    let mut log = TrainLog::default();

    let (enc_ad, dec_ad, disc_p) = if cfg.steps == 0 {
        (enc_init, dec_init, disc_init)
    } else {
        let pairs_src = dataset.all_pairs();
        if pairs_src.is_empty() {
            return Err(Error::Config("dataset has no degraded pairs for adapter training".into()));
        }
        let mut pairs = Vec::with_capacity(pairs_src.len());
        for (_, deg, clean) in pairs_src {
            let (mu, _) = vae.encode_t(&vae_params, &deg.to_nchw(DType::F32, &dev)?)?;
            pairs.push(Pair {
                deg: deg.clone(),
                clean: clean.clone(),
                restored: restorer.forward_t(&theta, &mu)?,
            });
        }

        let enc_vars = enc_init.to_vars()?;
        let dec_vars = dec_init.to_vars()?;
        let disc_vars = disc_init.to_vars()?;
        let mut enc_opt = cfg.optim.build(&enc_vars)?;
        let mut dec_opt = cfg.optim.build(&dec_vars)?;
        let mut disc_opt = cfg.disc_optim.build(&disc_vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 24));
        let fhf_restorer = cfg.restorer_in_fhf.then_some((&restorer, &theta));

        let cycle = cfg.n_f + cfg.n_p;
        for step in 0..cfg.steps {
            // one batch: (degraded crops, clean crops, restored latent crops)
            let mut degs = Vec::with_capacity(cfg.batch_size);
            let mut cleans = Vec::with_capacity(cfg.batch_size);
            let mut latents = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let pair = &pairs[rng.random_range(0..pairs.len())];
                let (h, w, _) = pair.clean.shape();
                let (top, left, ch, cw) = random_crop(&mut rng, h / f, w / f, cfg.crop.map(|c| c / f));
                degs.push(pair.deg.crop(top * f, left * f, ch * f, cw * f)?);
                cleans.push(pair.clean.crop(top * f, left * f, ch * f, cw * f)?);
                latents.push(pair.restored.narrow(2, top, ch)?.narrow(3, left, cw)?);
            }
            let clean_t = HwcTensor::stack_nchw(&cleans.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let snap: Vec<(&str, &ImageTensor)> = degs
                .iter()
                .map(|d| ("degraded", d))
                .chain(cleans.iter().map(|c| ("clean", c)))
                .collect();

            let terms = if step % cycle < cfg.n_f {
                let deg_t = HwcTensor::stack_nchw(&degs.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
                let enc_w = effective_weights(&vae_params, &enc_vars.params(), &enc_targets, gamma, 1.0)?;
                let loss = fhf_loss_t(&vae, &enc_w, &vae_params, fhf_restorer, &deg_t, &clean_t, &cfg.hf)?;
                let terms = BTreeMap::from([("fhf".to_string(), scalar(&loss)?)]);
                guard_finite(step, &terms, &snap, &cfg.snapshot)?;
                enc_opt.step(&loss.backward()?)?;
                terms
            } else {
                let z = Tensor::cat(&latents, 0)?;
                let dec_w = effective_weights(&vae_params, &dec_vars.params(), &dec_targets, gamma, 1.0)?;
                let fake = vae.decode_t(&dec_w, &z)?;
                let d_loss = disc_loss_t(&disc, &disc_vars.params(), &clean_t, &fake, &cfg.hf)?;
                let d_val = scalar(&d_loss)?;
                disc_opt.step(&d_loss.backward()?)?;
                let g_loss = phf_gen_loss_t(&disc, &disc_vars.params().frozen_copy()?, &fake, &cfg.hf)?;
                let terms = BTreeMap::from([("disc".to_string(), d_val), ("phf".to_string(), scalar(&g_loss)?)]);
                guard_finite(step, &terms, &snap, &cfg.snapshot)?;
                dec_opt.step(&g_loss.backward()?)?;
                terms
            };
            let phase = if step % cycle < cfg.n_f { "fhf" } else { "phf" };
            if step % cfg.log_every < cycle || step + 1 == cfg.steps {
                log.push(step, phase, terms);
            }
        }
        (enc_vars.snapshot()?, dec_vars.snapshot()?, disc_vars.snapshot()?)
    };

    // frozen parts are written back from the very tensors the run read
    let mut params = ParamSet::new();
    for (k, v) in bundle.params.iter() {
        if !(k.starts_with("lora.") || k.starts_with("disc.") || k.starts_with("vae.") || k.starts_with("restorer.")) {
            params.insert(k.clone(), v.clone());
        }
    }
    params.extend(&vae_params);
    params.extend(&theta);
    params.extend(&enc_ad);
    params.extend(&dec_ad);
    params.extend(&disc_p);
    let mut out = bundle.clone();
    out.params = params;
    out.stage = Stage::Lora;
    out.training.insert("lora".into(), serde_json::to_value(cfg)?);
    Ok((out, log))
}

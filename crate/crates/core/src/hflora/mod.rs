//! High-frequency-guided LoRA: low-rank adapters on encoder (fidelity) and decoder
//! (perception) convolutions, the high-frequency patch discriminator, their losses and
//! the alternating training loop.

mod train;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use train::{alternating_train, LoraTrainConfig};

use crate::error::{bail_validation, Error, Result};
use crate::freq::{high_pass_nchw, HFOperatorConfig};
use crate::lhvae::{recon_l1_t, Vae};
use crate::nn::{ops, Activation, ConvSpec, Layer, PadMode, ParamSet, Sequential};
use crate::restorer::Restorer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub gamma: f64,
}

impl LoraConfig {
    pub fn reference() -> Self {
        Self { rank: 4, gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            bail_validation!("LoRA rank must be ≥ 1");
        }
        if !self.gamma.is_finite() {
            bail_validation!("LoRA scale must be finite");
        }
        Ok(())
    }
}

/// (m, k) view of a conv kernel: out-channels × in-channels·kernel-area.
pub fn matrix_shape(spec: &ConvSpec) -> (usize, usize) {
    (spec.c_out, spec.c_in * spec.kernel * spec.kernel)
}

/// `vae.enc.down1` → `lora.enc.down1`.
pub fn adapter_name(spec: &ConvSpec) -> String {
    format!("lora.{}", spec.name.strip_prefix("vae.").unwrap_or(&spec.name))
}

/// Convolutions that can carry a rank-`rank` adapter (rank ≤ min(m, k)).
pub fn eligible_targets<'a>(convs: impl Iterator<Item = &'a ConvSpec>, rank: usize) -> Vec<ConvSpec> {
    convs
        .filter(|c| {
            let (m, k) = matrix_shape(c);
            rank <= m.min(k)
        })
        .cloned()
        .collect()
}

/// Encoder and decoder target lists for a VAE.
pub fn default_targets(vae: &Vae, rank: usize) -> (Vec<ConvSpec>, Vec<ConvSpec>) {
    (
        eligible_targets(vae.encoder().convs(), rank),
        eligible_targets(vae.decoder().convs(), rank),
    )
}

/// A (r×k) ~ N(0, 1/k), B (m×r) = 0 for every target.
pub fn init_adapter(targets: &[ConvSpec], rank: usize, seed: u64, device: &Device) -> Result<ParamSet> {
    if rank == 0 {
        bail_validation!("LoRA rank must be ≥ 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for spec in targets {
        let (m, k) = matrix_shape(spec);
        if rank > m.min(k) {
            bail_validation!("rank {rank} exceeds min(m, k) = {} for {}", m.min(k), spec.name);
        }
        let normal = Normal::new(0.0f32, 1.0 / (k as f32).sqrt()).expect("positive std");
        let a: Vec<f32> = (0..rank * k).map(|_| normal.sample(&mut rng)).collect();
        let name = adapter_name(spec);
        p.insert(format!("{name}.a"), Tensor::from_vec(a, (rank, k), device)?);
        p.insert(format!("{name}.b"), Tensor::zeros((m, rank), DType::F32, device)?);
    }
    Ok(p)
}

/// Base weights with `W + α·γ·(B·A)` on every target; α = 0 returns the base tensors as-is.
pub fn effective_weights(
    base: &ParamSet,
    adapter: &ParamSet,
    targets: &[ConvSpec],
    gamma: f64,
    alpha: f64,
) -> Result<ParamSet> {
    let mut out = base.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for spec in targets {
        let w = base.get(&spec.weight_name())?;
        let name = adapter_name(spec);
        let a = adapter.get(&format!("{name}.a"))?;
        let b = adapter.get(&format!("{name}.b"))?;
        let (m, k) = matrix_shape(spec);
        let (ra, ka) = a.dims2()?;
        let (mb, rb) = b.dims2()?;
        if ka != k || mb != m || ra != rb || w.dims() != [spec.c_out, spec.c_in, spec.kernel, spec.kernel] {
            bail_validation!(
                "adapter {name} (A {:?}, B {:?}) does not fit weight {:?}",
                a.dims(),
                b.dims(),
                w.dims()
            );
        }
        let delta = b.matmul(a)?.reshape(w.dims())?;
        let delta = if delta.dtype() != w.dtype() { delta.to_dtype(w.dtype())? } else { delta };
        out.insert(spec.weight_name(), (w + (delta * (alpha * gamma))?)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    /// Hidden widths; one more stride-2 conv maps the last width to a logit.
    pub widths: Vec<usize>,
}

impl DiscConfig {
    pub fn reference() -> Self {
        Self { widths: vec![32, 64, 128] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            bail_validation!("discriminator widths must be positive");
        }
        Ok(())
    }
}

/// Patch discriminator over HF(image): stride-2 3×3 convs, zero padded, ending in a
/// one-channel logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    net: Sequential,
}

impl Discriminator {
    pub fn new(cfg: &DiscConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            layers.push(Layer::Conv(
                ConvSpec::new(format!("disc.conv{i}"), c_in, w, 3, 2).with_padding(1, PadMode::Zeros),
                Activation::LeakyRelu,
            ));
            c_in = w;
        }
        layers.push(Layer::Conv(
            ConvSpec::new("disc.logit", c_in, 1, 3, 2).with_padding(1, PadMode::Zeros),
            Activation::None,
        ));
        Ok(Self {
            net: Sequential { layers },
        })
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Receptive field of one output logit, in pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for c in self.net.convs() {
            rf += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        rf
    }

    pub fn init_params(&self, seed: u64, device: &Device) -> Result<ParamSet> {
        self.net.init(seed, device)
    }

    /// Patch logits for already high-passed input.
    pub fn forward_t(&self, p: &ParamSet, hf: &Tensor) -> Result<Tensor> {
        self.net.forward(p, hf)
    }
}

const LOGIT_CLAMP: f64 = 20.0;

fn clamped(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?)
}

/// ∥HF(D_ψ*(mu(E_{φ*+Δφ}(I_deg)))) − HF(I_clean)∥₁. `enc_params` carries the adapted
/// encoder weights, `dec_params` the frozen decoder. An optional restorer sits between.
pub fn fhf_loss_t(
    vae: &Vae,
    enc_params: &ParamSet,
    dec_params: &ParamSet,
    restorer: Option<(&Restorer, &ParamSet)>,
    deg: &Tensor,
    clean: &Tensor,
    hf: &HFOperatorConfig,
) -> Result<Tensor> {
    let (mu, _) = vae.encode_t(enc_params, deg)?;
    let z = match restorer {
        Some((r, theta)) => r.forward_t(theta, &mu)?,
        None => mu,
    };
    let out = vae.decode_t(dec_params, &z)?;
    recon_l1_t(&high_pass_nchw(&out, hf)?, &high_pass_nchw(clean, hf)?)
}

/// −mean log σ(D_HF(HF(fake))) with logits clamped to ±20.
pub fn phf_gen_loss_t(disc: &Discriminator, disc_params: &ParamSet, fake: &Tensor, hf: &HFOperatorConfig) -> Result<Tensor> {
    let logits = disc.forward_t(disc_params, &high_pass_nchw(fake, hf)?)?;
    Ok(ops::log_sigmoid(&clamped(&logits)?)?.mean_all()?.neg()?)
}

/// −mean log σ(D(HF(real))) − mean log(1 − σ(D(HF(fake)))); the fake path is detached.
pub fn disc_loss_t(
    disc: &Discriminator,
    disc_params: &ParamSet,
    real: &Tensor,
    fake: &Tensor,
    hf: &HFOperatorConfig,
) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        bail_validation!("real {:?} and fake {:?} differ in shape", real.dims(), fake.dims());
    }
    let lr = disc.forward_t(disc_params, &high_pass_nchw(real, hf)?)?;
    let lf = disc.forward_t(disc_params, &high_pass_nchw(&fake.detach(), hf)?)?;
    disc_loss_from_logits(&lr, &lf)
}

/// Binary cross-entropy of real and fake patch logits.
pub fn disc_loss_from_logits(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real_term = ops::log_sigmoid(&clamped(real_logits)?)?.mean_all()?;
    let fake_term = ops::log_sigmoid(&clamped(fake_logits)?.neg()?)?.mean_all()?;
    Ok((real_term + fake_term)?.neg()?)
}

/// The generator side of the perception path: D_{ψ*+Δψ}(z_restored).
pub fn phf_generate_t(vae: &Vae, dec_params: &ParamSet, z_restored: &Tensor) -> Result<Tensor> {
    vae.decode_t(dec_params, z_restored)
}

pub(crate) fn missing(what: &str) -> Error {
    Error::Config(format!("checkpoint lacks {what}"))
}

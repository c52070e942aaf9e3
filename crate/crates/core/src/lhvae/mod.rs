//! The latent-harmony VAE: encoder, decoder, Gaussian posterior and the Stage-1 losses
//! (reconstruction + KL, latent invariance to degradations, scale equivariance).

mod prior;
mod train;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use prior::{FeatureExtractor, PriorConfig, RandomConvExtractor, SemanticPrior};
pub use train::{sample_stage1_batch, train_stage1, Stage1Config};

use crate::error::{bail_validation, Result};
use crate::nn::{ops, scalar, Activation, ConvSpec, Layer, ParamSet, Sequential};
use crate::tensor::{HwcTensor, ImageTensor, LatentTensor};

const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_channels: usize,
    /// Channel widths per resolution level; `len − 1` stride-2 stages set the factor f.
    pub widths: Vec<usize>,
}

impl VaeConfig {
    /// f = 4, c_z = 4, widths (32, 64, 128).
    pub fn reference() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![32, 64, 128],
        }
    }

    /// Narrower variant used for quick experiments.
    pub fn desk() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![16, 32, 64],
        }
    }

    /// A few hundred parameters, for gradient checks.
    pub fn toy() -> Self {
        Self {
            latent_channels: 2,
            widths: vec![3, 3],
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            bail_validation!("VAE widths and latent channels must be positive");
        }
        Ok(())
    }
}

/// Encoder/decoder architecture; weights live in a [`ParamSet`] under `vae.enc.*` / `vae.dec.*`.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    encoder: Sequential,
    decoder: Sequential,
}

impl Vae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let top = *w.last().unwrap();
        let cz = config.latent_channels;

        let mut enc = vec![Layer::Conv(ConvSpec::new("vae.enc.conv_in", 3, w[0], 3, 1), Activation::Silu)];
        for i in 1..w.len() {
            enc.push(Layer::Conv(
                ConvSpec::new(format!("vae.enc.down{i}"), w[i - 1], w[i], 3, 2),
                Activation::Silu,
            ));
        }
        enc.push(Layer::Conv(ConvSpec::new("vae.enc.mid", top, top, 3, 1), Activation::Silu));
        enc.push(Layer::Conv(ConvSpec::new("vae.enc.out", top, 2 * cz, 3, 1), Activation::None));

        let mut dec = vec![
            Layer::Conv(ConvSpec::new("vae.dec.conv_in", cz, top, 3, 1), Activation::Silu),
            Layer::Conv(ConvSpec::new("vae.dec.mid", top, top, 3, 1), Activation::Silu),
        ];
        for i in (1..w.len()).rev() {
            dec.push(Layer::Upsample(2));
            dec.push(Layer::Conv(
                ConvSpec::new(format!("vae.dec.up{i}"), w[i], w[i - 1], 3, 1),
                Activation::Silu,
            ));
        }
        dec.push(Layer::Conv(ConvSpec::new("vae.dec.out", w[0], 3, 3, 1), Activation::Sigmoid));

        Ok(Self {
            config,
            encoder: Sequential { layers: enc },
            decoder: Sequential { layers: dec },
        })
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    pub fn init_params(&self, seed: u64, device: &Device) -> Result<ParamSet> {
        let mut p = self.encoder.init(crate::nn::derive_seed(seed, 1), device)?;
        p.extend(&self.decoder.init(crate::nn::derive_seed(seed, 2), device)?);
        Ok(p)
    }

    /// (mu, logvar) for images (N, 3, H, W); logvar clamped to a finite range.
    pub fn encode_t(&self, p: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.downsample();
        if h % f != 0 || w % f != 0 {
            bail_validation!("image {h}x{w} not divisible by the downsample factor {f}");
        }
        let out = self.encoder.forward(p, x)?;
        let cz = self.config.latent_channels;
        let mu = out.narrow(1, 0, cz)?;
        let logvar = out.narrow(1, cz, cz)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    pub fn decode_t(&self, p: &ParamSet, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            bail_validation!("latent has {c} channels, expected {}", self.config.latent_channels);
        }
        self.decoder.forward(p, z)
    }

    pub fn encode(&self, p: &ParamSet, image: &ImageTensor) -> Result<GaussianPosterior> {
        let x = image.to_nchw(param_dtype(p)?, &Device::Cpu)?;
        let (mu, logvar) = self.encode_t(p, &x)?;
        GaussianPosterior::new(
            HwcTensor::unstack_nchw(&mu)?.remove(0),
            HwcTensor::unstack_nchw(&logvar)?.remove(0),
        )
    }

    pub fn decode(&self, p: &ParamSet, z: &LatentTensor) -> Result<ImageTensor> {
        let t = z.to_nchw(param_dtype(p)?, &Device::Cpu)?;
        Ok(HwcTensor::unstack_nchw(&self.decode_t(p, &t)?)?.remove(0))
    }
}

/// dtype of the first parameter (all entries share one dtype).
pub(crate) fn param_dtype(p: &ParamSet) -> Result<DType> {
    Ok(p.iter().next().map(|(_, t)| t.dtype()).unwrap_or(DType::F32))
}

/// q(z | x) = N(mu, exp(logvar)).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: LatentTensor,
    pub logvar: LatentTensor,
}

impl GaussianPosterior {
    pub fn new(mu: LatentTensor, logvar: LatentTensor) -> Result<Self> {
        mu.ensure_same_shape(&logvar)?;
        Ok(Self { mu, logvar })
    }
}

/// z = mu + exp(logvar/2)·ε with seeded ε; `deterministic` returns mu exactly.
pub fn reparameterize(post: &GaussianPosterior, seed: u64, deterministic: bool) -> LatentTensor {
    if deterministic {
        return post.mu.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(&m, &lv)| {
            let e: f32 = StandardNormal.sample(&mut rng);
            m + (lv * 0.5).exp() * e
        })
        .collect();
    let (h, w, c) = post.mu.shape();
    HwcTensor::new(h, w, c, data).expect("shape taken from mu")
}

/// Standard normal noise tensor of `shape`, seeded.
pub fn gaussian_noise(shape: (usize, usize, usize, usize), seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// mean ½(mu² + e^logvar − 1 − logvar)
pub fn kl_loss_t(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let t = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    Ok(((t - 1.0)? * 0.5)?.mean_all()?)
}

pub fn recon_l1_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        bail_validation!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// 1 − mean over positions of the cosine between `projected` and `target` along channels;
/// positions where either vector has zero norm are skipped.
pub fn inv_loss_t(projected: &Tensor, target: &Tensor) -> Result<Tensor> {
    if projected.dims() != target.dims() {
        bail_validation!("projection {:?} and features {:?} are not aligned", projected.dims(), target.dims());
    }
    let dot = (projected * target)?.sum_keepdim(1)?;
    let sa = projected.sqr()?.sum_keepdim(1)?;
    let sb = target.sqr()?.sum_keepdim(1)?;
    let ma = sa.gt(0.0)?.to_dtype(sa.dtype())?;
    let mb = sb.gt(0.0)?.to_dtype(sb.dtype())?;
    let mask = (&ma * &mb)?;
    // unit padding under the square root keeps masked positions finite with zero gradient
    let na = (sa + (1.0 - &ma)?)?.sqrt()?;
    let nb = (sb + (1.0 - &mb)?)?.sqrt()?;
    let cos = ((dot / (na * nb)?)? * &mask)?;
    let count = scalar(&mask.sum_all()?)?.max(1.0);
    Ok((1.0 - (cos.sum_all()? / count)?)?)
}

/// Downsample by integer `s` with half-pixel-centred bilinear sampling: the average of
/// the two centre pixels of each s-block per axis (the centre pixel for odd s).
pub fn bilinear_downsample(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        bail_validation!("scale {s} does not divide {h}x{w}");
    }
    let axis = |t: &Tensor, dim: usize, n: usize| -> Result<Tensor> {
        let idx = |off: usize| -> Result<Tensor> {
            let v: Vec<u32> = (0..n / s).map(|i| (i * s + off) as u32).collect();
            Ok(Tensor::from_vec(v, n / s, t.device())?)
        };
        if s % 2 == 1 {
            Ok(t.index_select(&idx((s - 1) / 2)?, dim)?)
        } else {
            let a = t.index_select(&idx(s / 2 - 1)?, dim)?;
            let b = t.index_select(&idx(s / 2)?, dim)?;
            Ok(((a + b)? * 0.5)?)
        }
    };
    axis(&axis(x, 2, h)?, 3, w)
}

/// L1 between D(avg_pool(z, s)) and the bilinear s-downsampled clean image.
pub fn eqv_loss_t(vae: &Vae, p: &ParamSet, z: &Tensor, clean: &Tensor, s: usize) -> Result<Tensor> {
    let (_, _, h, w) = z.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        bail_validation!("equivariance scale {s} does not divide latent {h}x{w}");
    }
    let decoded = vae.decode_t(p, &ops::avg_pool(z, s)?)?;
    recon_l1_t(&decoded, &bilinear_downsample(clean, s)?)
}

fn hwc_pair(a: &HwcTensor, b: &HwcTensor) -> Result<(Tensor, Tensor)> {
    a.ensure_same_shape(b)?;
    Ok((a.to_nchw(DType::F64, &Device::Cpu)?, b.to_nchw(DType::F64, &Device::Cpu)?))
}

pub fn kl_loss(post: &GaussianPosterior) -> Result<f64> {
    let (mu, lv) = hwc_pair(&post.mu, &post.logvar)?;
    scalar(&kl_loss_t(&mu, &lv)?)
}

pub fn recon_l1(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (x, y) = hwc_pair(a, b)?;
    scalar(&recon_l1_t(&x, &y)?)
}

/// L_Inv for one latent: P(z_deg) against the clean image's features.
pub fn inv_loss(prior: &SemanticPrior, p: &ParamSet, z_deg: &LatentTensor, f_vfm: &HwcTensor) -> Result<f64> {
    let z = z_deg.to_nchw(param_dtype(p)?, &Device::Cpu)?;
    let proj = prior.project(p, &z)?;
    let target = f_vfm.to_nchw(proj.dtype(), &Device::Cpu)?;
    scalar(&inv_loss_t(&proj, &target)?)
}

pub fn eqv_loss(vae: &Vae, p: &ParamSet, z: &LatentTensor, clean: &ImageTensor, s: usize) -> Result<f64> {
    let (h, w, _) = z.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        bail_validation!("equivariance scale {s} does not divide latent {h}x{w}");
    }
    let dt = param_dtype(p)?;
    let pooled = ops::avg_pool(&z.to_nchw(dt, &Device::Cpu)?, s)?;
    let decoded = HwcTensor::unstack_nchw(&vae.decode_t(p, &pooled)?)?.remove(0);
    let target = bilinear_downsample(&clean.to_nchw(DType::F32, &Device::Cpu)?, s)?;
    recon_l1(&decoded, &HwcTensor::unstack_nchw(&target)?.remove(0))
}

/// Loss weights of the Stage-1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Weights {
    pub lambda_kl: f64,
    pub lambda_inv: f64,
    pub lambda_eqv: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            lambda_kl: 1e-4,
            lambda_inv: 0.5,
            lambda_eqv: 1.0,
        }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda_inv", self.lambda_inv),
            ("lambda_eqv", self.lambda_eqv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail_validation!("{name} must be a finite non-negative number, got {v}");
            }
        }
        Ok(())
    }
}

/// One Stage-1 minibatch with every random choice already drawn.
#[derive(Clone, Debug)]
pub struct Stage1Batch {
    /// (N, 3, H, W) clean images.
    pub clean: Tensor,
    /// Perturbed copies of `clean` (drive only the invariance term).
    pub perturbed: Tensor,
    /// Reparameterization noise, latent-shaped.
    pub eps: Tensor,
    pub eqv_scale: usize,
}

/// Total Stage-1 loss and its per-term values.
pub fn stage1_loss(
    vae: &Vae,
    p: &ParamSet,
    prior: &SemanticPrior,
    batch: &Stage1Batch,
    w: &Stage1Weights,
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let mut terms = BTreeMap::new();
    let (mu, logvar) = vae.encode_t(p, &batch.clean)?;
    let z = (&mu + (logvar.clone() * 0.5)?.exp()?.mul(&batch.eps)?)?;
    let recon = recon_l1_t(&vae.decode_t(p, &z)?, &batch.clean)?;
    let kl = kl_loss_t(&mu, &logvar)?;
    let mut total = (&recon + (&kl * w.lambda_kl)?)?;
    terms.insert("recon".into(), scalar(&recon)?);
    terms.insert("kl".into(), scalar(&kl)?);
    terms.insert("vae".into(), scalar(&total)?);

    if w.lambda_inv > 0.0 {
        let (mu_pert, _) = vae.encode_t(p, &batch.perturbed)?;
        let target = prior.features(&batch.clean)?;
        let inv = inv_loss_t(&prior.project(p, &mu_pert)?, &target)?;
        terms.insert("inv".into(), scalar(&inv)?);
        total = (total + (inv * w.lambda_inv)?)?;
    }
    if w.lambda_eqv > 0.0 {
        let eqv = if batch.eqv_scale == 1 {
            recon.clone()
        } else {
            eqv_loss_t(vae, p, &z, &batch.clean, batch.eqv_scale)?
        };
        terms.insert("eqv".into(), scalar(&eqv)?);
        total = (total + (eqv * w.lambda_eqv)?)?;
    }
    terms.insert("total".into(), scalar(&total)?);
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::procedural_image;
    use proptest::prelude::*;

    fn vae_and_params() -> (Vae, ParamSet) {
        let vae = Vae::new(VaeConfig::reference()).unwrap();
        let p = vae.init_params(1, &Device::Cpu).unwrap();
        (vae, p)
    }

    #[test]
    fn shapes_follow_the_downsample_factor() {
        let (vae, p) = vae_and_params();
        let post = vae.encode(&p, &procedural_image(64, 0)).unwrap();
        assert_eq!(post.mu.shape(), (16, 16, 4));
        let img = vae.decode(&p, &post.mu).unwrap();
        assert_eq!(img.shape(), (64, 64, 3));
        let small = vae.decode(&p, &HwcTensor::filled(8, 8, 4, 0.1)).unwrap();
        assert_eq!(small.shape(), (32, 32, 3));
        assert!(small.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(vae.encode(&p, &procedural_image(30, 0)).is_err());
    }

    #[test]
    fn encode_is_pure_and_sensitive() {
        let (vae, p) = vae_and_params();
        let img = procedural_image(32, 4);
        let a = vae.encode(&p, &img).unwrap();
        assert_eq!(a, vae.encode(&p, &img).unwrap());
        let mut other = img.clone();
        other.set(5, 7, 1, 1.0 - img.get(5, 7, 1));
        assert_ne!(a, vae.encode(&p, &other).unwrap());
    }

    #[test]
    fn reference_param_count_within_budget() {
        let (vae, _) = vae_and_params();
        assert!(vae.num_params() < 600_000, "{}", vae.num_params());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = HwcTensor::from_fn(2, 2, 1, |y, x, _| (y + x) as f32);
        let post = GaussianPosterior::new(mu.clone(), HwcTensor::filled(2, 2, 1, 0.0)).unwrap();
        assert_eq!(reparameterize(&post, 1, true), mu);
        assert_eq!(reparameterize(&post, 9, false), reparameterize(&post, 9, false));
        let sentinel = GaussianPosterior::new(mu.clone(), HwcTensor::filled(2, 2, 1, f32::NEG_INFINITY)).unwrap();
        assert_eq!(reparameterize(&sentinel, 9, false), mu);
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        let mu = HwcTensor::new(1, 1, 2, vec![0.3, -1.2]).unwrap();
        let lv = HwcTensor::new(1, 1, 2, vec![0.0, (4.0f32).ln()]).unwrap();
        let post = GaussianPosterior::new(mu.clone(), lv).unwrap();
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        for i in 0..n {
            let z = reparameterize(&post, i, false);
            sums[0] += z.data()[0] as f64;
            sums[1] += z.data()[1] as f64;
        }
        for (k, sigma) in [(0, 1.0), (1, 2.0)] {
            let mean = sums[k] / n as f64;
            assert!((mean - mu.data()[k] as f64).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn kl_closed_forms() {
        let post = |m: f32, lv: f32| GaussianPosterior::new(HwcTensor::filled(1, 1, 1, m), HwcTensor::filled(1, 1, 1, lv)).unwrap();
        assert_eq!(kl_loss(&post(0.0, 0.0)).unwrap(), 0.0);
        assert!((kl_loss(&post(1.0, 0.0)).unwrap() - 0.5).abs() < 1e-12);
    }

    /// E_q[log q(z) − log p(z)] from 10⁶ draws of z ~ N(mu, e^logvar).
    fn kl_monte_carlo(mu: f64, logvar: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (0.5 * logvar).exp();
        let n = 1_000_000;
        let sum: f64 = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mu + sd * e;
                -0.5 * e * e - 0.5 * logvar + 0.5 * z * z
            })
            .sum();
        sum / n as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        for (m, lv) in [(0.0f32, 4f32.ln()), (0.7, -0.5), (-1.3, 0.9)] {
            let post = GaussianPosterior::new(HwcTensor::filled(1, 1, 1, m), HwcTensor::filled(1, 1, 1, lv)).unwrap();
            let mc = kl_monte_carlo(m as f64, lv as f64, 3);
            assert!((kl_loss(&post).unwrap() - mc).abs() < 1e-2, "({m}, {lv}): {mc}");
        }
    }

    #[test]
    fn recon_closed_forms() {
        let a = HwcTensor::filled(4, 4, 3, 0.2);
        let b = HwcTensor::filled(4, 4, 3, 0.6);
        assert_eq!(recon_l1(&a, &a).unwrap(), 0.0);
        assert!((recon_l1(&a, &b).unwrap() - 0.4).abs() < 1e-7);
        assert!(recon_l1(&a, &HwcTensor::filled(4, 4, 1, 0.0)).is_err());
    }

    #[test]
    fn inv_loss_extremes() {
        let dev = Device::Cpu;
        let f = Tensor::new(&[[[[1.0f64]], [[2.0]], [[-0.5]]]], &dev).unwrap();
        assert!(scalar(&inv_loss_t(&f, &f).unwrap()).unwrap().abs() < 1e-12);
        assert!((scalar(&inv_loss_t(&f.neg().unwrap(), &f).unwrap()).unwrap() - 2.0).abs() < 1e-12);
        // a zero vector at one of two positions is skipped
        let a = Tensor::new(&[[[[1.0f64, 0.0]], [[0.0, 0.0]]]], &dev).unwrap();
        let b = Tensor::new(&[[[[1.0f64, 1.0]], [[0.0, 1.0]]]], &dev).unwrap();
        assert!(scalar(&inv_loss_t(&a, &b).unwrap()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bilinear_downsample_oracle() {
        // centre-sampled bilinear at integer scale: average of the middle pixels
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 64.0, &dev).unwrap().reshape((1, 1, 8, 8)).unwrap();
        let d2: Vec<f64> = bilinear_downsample(&x, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(d2[0], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
        let d4: Vec<f64> = bilinear_downsample(&x, 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(d4[0], (9.0 + 10.0 + 17.0 + 18.0) / 4.0);
        assert!(bilinear_downsample(&x, 3).is_err());
    }

    #[test]
    fn eqv_at_scale_one_is_reconstruction() {
        let (vae, p) = vae_and_params();
        let img = procedural_image(32, 8);
        let z = vae.encode(&p, &img).unwrap().mu;
        let rec = recon_l1(&vae.decode(&p, &z).unwrap(), &img).unwrap();
        let eqv = eqv_loss(&vae, &p, &z, &img, 1).unwrap();
        assert_eq!(rec, eqv);
        assert!(eqv_loss(&vae, &p, &z, &img, 3).is_err());
    }

    #[test]
    fn eqv_zero_for_constant_equivariant_fixture() {
        // decoder weights zero except the output bias: D(z) is constant, as is the image
        let (vae, p) = vae_and_params();
        let mut q = ParamSet::new();
        for (k, v) in p.iter() {
            q.insert(k.clone(), v.zeros_like().unwrap());
        }
        let c = 0.3f32;
        let logit = (c / (1.0 - c)).ln();
        q.insert("vae.dec.out.bias", Tensor::new(&[logit, logit, logit], &Device::Cpu).unwrap());
        let img = HwcTensor::filled(32, 32, 3, c);
        let z = HwcTensor::filled(8, 8, 4, 0.7);
        for s in [1, 2, 4] {
            assert!(eqv_loss(&vae, &q, &z, &img, s).unwrap() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_nonnegative(mu in prop::collection::vec(-5.0f32..5.0, 6), lv in prop::collection::vec(-6.0f32..6.0, 6)) {
            let post = GaussianPosterior::new(
                HwcTensor::new(1, 2, 3, mu).unwrap(),
                HwcTensor::new(1, 2, 3, lv).unwrap(),
            ).unwrap();
            prop_assert!(kl_loss(&post).unwrap() >= 0.0);
        }

        #[test]
        fn recon_l1_matches_loop(a in prop::collection::vec(0.0f32..1.0, 12), b in prop::collection::vec(0.0f32..1.0, 12)) {
            let x = HwcTensor::new(2, 2, 3, a.clone()).unwrap();
            let y = HwcTensor::new(2, 2, 3, b.clone()).unwrap();
            let oracle: f64 = a.iter().zip(&b).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / 12.0;
            prop_assert!((recon_l1(&x, &y).unwrap() - oracle).abs() < 1e-7);
        }
    }
}

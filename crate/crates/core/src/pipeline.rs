//! Inference with the α blend, tiled inference, image-quality metrics and α sweeps.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointBundle;
use crate::config::ModelConfig;
use crate::error::{bail_validation, Result};
use crate::freq::{hf_energy_proportion, SpectralBands};
use crate::hflora::{default_targets, effective_weights, matrix_shape, missing, Discriminator};
use crate::lhvae::{FeatureExtractor, SemanticPrior, Vae};
use crate::nn::{ops, ParamSet};
use crate::restorer::Restorer;
use crate::tensor::ImageTensor;

pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;

/// Multipliers applied to the encoder and decoder adapters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterScales {
    pub enc: f64,
    pub dec: f64,
}

impl AdapterScales {
    /// φ = φ* + αΔφ, ψ = ψ* + (1−α)Δψ.
    pub fn blend(alpha: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        Ok(Self { enc: alpha, dec: 1.0 - alpha })
    }

    pub const NONE: Self = Self { enc: 0.0, dec: 0.0 };
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        bail_validation!("alpha {alpha} outside [0, 1]");
    }
    Ok(())
}

/// A loaded bundle ready for inference. Read-only; share it behind an `Arc`.
#[derive(Debug)]
pub struct Pipeline {
    vae: Vae,
    base: ParamSet,
    restorer: Restorer,
    theta: ParamSet,
    enc_targets: Vec<crate::nn::ConvSpec>,
    dec_targets: Vec<crate::nn::ConvSpec>,
    adapters: Option<ParamSet>,
    gamma: f64,
    prior: SemanticPrior,
    device: Device,
}

impl Pipeline {
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        let (vae, base) = crate::restorer::require_vae(bundle)?;
        if !bundle.has_namespace("restorer.") {
            return Err(missing("a trained restorer"));
        }
        let model = &bundle.model;
        let device = Device::Cpu;
        let restorer = Restorer::new(model.restorer.clone(), model.vae.latent_channels)?;
        let (enc_targets, dec_targets) = default_targets(&vae, model.lora.rank);
        let lora = bundle.params.with_prefix("lora.");
        let complete = enc_targets
            .iter()
            .chain(&dec_targets)
            .all(|t| lora.contains(&format!("{}.a", crate::hflora::adapter_name(t))));
        let adapters = if complete && !lora.is_empty() {
            Some(lora)
        } else {
            if !lora.is_empty() {
                log::warn!("checkpoint carries an incomplete adapter set; using base weights");
            }
            None
        };
        Ok(Self {
            vae,
            base,
            theta: bundle.params.with_prefix("restorer."),
            restorer,
            enc_targets,
            dec_targets,
            adapters,
            gamma: model.lora.gamma,
            prior: SemanticPrior::from_config(&model.prior, model.vae.latent_channels, &device)?,
            device,
        })
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.is_some()
    }

    pub fn downsample(&self) -> usize {
        self.vae.downsample()
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.prior.extractor()
    }

    fn weights(&self, scales: AdapterScales) -> Result<(ParamSet, ParamSet)> {
        match &self.adapters {
            Some(a) => Ok((
                effective_weights(&self.base, a, &self.enc_targets, self.gamma, scales.enc)?,
                effective_weights(&self.base, a, &self.dec_targets, self.gamma, scales.dec)?,
            )),
            None => Ok((self.base.clone(), self.base.clone())),
        }
    }

    /// D_{ψ*+(1−α)Δψ}(R_θ(mean E_{φ*+αΔφ}(image))).
    pub fn infer(&self, image: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
        self.infer_scaled(image, AdapterScales::blend(alpha)?)
    }

    /// Inference with independent adapter multipliers (used for ablations).
    pub fn infer_scaled(&self, image: &ImageTensor, scales: AdapterScales) -> Result<ImageTensor> {
        Ok(self.infer_batch(std::slice::from_ref(image), scales)?.remove(0))
    }

    /// Same-shape images in one forward pass. Sizes that are not multiples of the
    /// downsampling factor are reflect-padded and cropped back.
    pub fn infer_batch(&self, images: &[ImageTensor], scales: AdapterScales) -> Result<Vec<ImageTensor>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let (h, w, c) = first.shape();
        if c != 3 {
            bail_validation!("expected an RGB image, got {c} channels");
        }
        if images.iter().any(|i| i.shape() != (h, w, c)) {
            bail_validation!("batched images must share one shape");
        }
        let f = self.downsample();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        let padded: Vec<ImageTensor> = images.iter().map(|i| reflect_pad(i, ph, pw)).collect::<Result<_>>()?;
        let x = ImageTensor::stack_nchw(&padded.iter().collect::<Vec<_>>(), DType::F32, &self.device)?;
        let (enc, dec) = self.weights(scales)?;
        let (mu, _) = self.vae.encode_t(&enc, &x)?;
        let z = self.restorer.forward_t(&self.theta, &mu)?;
        let out = self.vae.decode_t(&dec, &z)?;
        ImageTensor::unstack_nchw(&out)?
            .into_iter()
            .map(|o| if (ph, pw) == (h, w) { Ok(o) } else { o.crop(0, 0, h, w) })
            .collect()
    }

    /// Overlapping tiles blended with linear feathering over the overlap band.
    pub fn tile_infer(&self, image: &ImageTensor, alpha: f64, tile: usize, overlap: usize) -> Result<ImageTensor> {
        let scales = AdapterScales::blend(alpha)?;
        let f = self.downsample();
        if tile < f || tile % f != 0 {
            bail_validation!("tile {tile} must be a positive multiple of {f}");
        }
        if 2 * overlap >= tile {
            bail_validation!("overlap {overlap} must be below half the tile {tile}");
        }
        let (h, w, c) = image.shape();
        if h <= tile && w <= tile {
            return self.infer_scaled(image, scales);
        }
        let ys = tile_starts(h, tile, overlap);
        let xs = tile_starts(w, tile, overlap);
        let (th, tw) = (tile.min(h), tile.min(w));
        let mut acc = vec![0.0f64; h * w * c];
        let mut wsum = vec![0.0f64; h * w];
        for &y0 in &ys {
            let wy = feather(th, overlap, y0 > 0, y0 + th < h);
            for &x0 in &xs {
                let wx = feather(tw, overlap, x0 > 0, x0 + tw < w);
                let out = self.infer_scaled(&image.crop(y0, x0, th, tw)?, scales)?;
                for ty in 0..th {
                    for tx in 0..tw {
                        let wt = wy[ty] * wx[tx];
                        let idx = (y0 + ty) * w + x0 + tx;
                        wsum[idx] += wt;
                        for ch in 0..c {
                            acc[idx * c + ch] += wt * out.get(ty, tx, ch) as f64;
                        }
                    }
                }
            }
        }
        let data = acc
            .iter()
            .enumerate()
            .map(|(i, v)| (v / wsum[i / c]) as f32)
            .collect();
        ImageTensor::new(h, w, c, data)
    }

    /// Tiled α-blend inference plus metrics against `reference` when given. Metrics are
    /// taken on the unquantized output, so every front end reports the same numbers.
    pub fn restore(
        &self,
        image: &ImageTensor,
        alpha: f64,
        reference: Option<&ImageTensor>,
        tile: usize,
        overlap: usize,
    ) -> Result<(ImageTensor, Option<MetricsReport>)> {
        if let Some(r) = reference {
            image.ensure_same_shape(r)?;
        }
        let out = self.tile_infer(image, alpha, tile, overlap)?;
        let metrics = reference.map(|r| self.metrics(&out, r)).transpose()?;
        Ok((out, metrics))
    }

    /// Metrics of one output against its reference.
    pub fn metrics(&self, output: &ImageTensor, reference: &ImageTensor) -> Result<MetricsReport> {
        MetricsReport::compute(output, reference, self.extractor())
    }

    /// Mean metrics over (degraded, clean) pairs.
    pub fn evaluate(&self, pairs: &[(&ImageTensor, &ImageTensor)], scales: AdapterScales) -> Result<MetricsReport> {
        if pairs.is_empty() {
            bail_validation!("evaluation set is empty");
        }
        let mut reports = Vec::with_capacity(pairs.len());
        for (deg, clean) in pairs {
            let out = self.infer_scaled(deg, scales)?;
            reports.push(self.metrics(&out, clean)?);
        }
        Ok(MetricsReport::mean(&reports))
    }
}

/// Convenience wrapper: load and run once.
pub fn infer(bundle: &CheckpointBundle, image: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    validate_alpha(alpha)?;
    Pipeline::from_bundle(bundle)?.infer(image, alpha)
}

fn tile_starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < n).collect();
    starts.push(n - tile);
    starts
}

/// Ramp weights rising over `overlap` pixels on every side that borders another tile.
fn feather(len: usize, overlap: usize, ramp_start: bool, ramp_end: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut v = 1.0f64;
            if overlap > 0 {
                let ramp = |d: usize| ((d + 1) as f64 / (overlap + 1) as f64).min(1.0);
                if ramp_start {
                    v = v.min(ramp(i));
                }
                if ramp_end {
                    v = v.min(ramp(len - 1 - i));
                }
            }
            v
        })
        .collect()
}

/// Mirror-pads bottom and right edges (edge pixel not repeated) up to `h`×`w`.
pub fn reflect_pad(img: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    let (ih, iw, c) = img.shape();
    if (ih, iw) == (h, w) {
        return Ok(img.clone());
    }
    if h < ih || w < iw || h - ih >= ih.max(2) || w - iw >= iw.max(2) {
        bail_validation!("cannot reflect-pad {ih}x{iw} to {h}x{w}");
    }
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    Ok(ImageTensor::from_fn(h, w, c, |y, x, ch| img.get(mirror(y, ih), mirror(x, iw), ch)))
}

/// 10·log10(1/MSE) in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gray(img: &ImageTensor) -> Vec<f64> {
    let c = img.channels();
    img.data()
        .chunks(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Valid-mode separable filtering with a symmetric kernel.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM on the channel-mean gray image: 11×11 Gaussian window (σ=1.5), interior
/// positions only, data range 1.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        bail_validation!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}");
    }
    let k = ops::gaussian_taps(SSIM_SIGMA);
    debug_assert_eq!(k.len(), SSIM_WIN);
    let (x, y) = (gray(a), gray(b));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, _, _) = filter_valid(&x, h, w, &k);
    let (my, _, _) = filter_valid(&y, h, w, &k);
    let (mxx, _, _) = filter_valid(&prod(&x, &x), h, w, &k);
    let (myy, _, _) = filter_valid(&prod(&y, &y), h, w, &k);
    let (mxy, _, _) = filter_valid(&prod(&x, &y), h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Perceptual distance proxy: per layer of the frozen extractor, features are
/// unit-normalized along channels and the squared distance (summed over channels) is
/// averaged over positions; the result is the mean over layers.
pub fn lpips_proxy(a: &ImageTensor, b: &ImageTensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let dev = Device::Cpu;
    let fa = extractor.feature_pyramid(&a.to_nchw(DType::F32, &dev)?)?;
    let fb = extractor.feature_pyramid(&b.to_nchw(DType::F32, &dev)?)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (unit_normalize(x)? - unit_normalize(y)?)?;
        total += d.sqr()?.sum(1)?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / fa.len() as f64)
}

fn unit_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// dB; serialized as the string "inf" for identical images.
    #[serde(with = "inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    /// HF energy proportion of the output minus that of the reference.
    pub hf_energy_gap: f64,
}

impl MetricsReport {
    pub fn compute(output: &ImageTensor, reference: &ImageTensor, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let bands = SpectralBands::default();
        Ok(Self {
            psnr: psnr(output, reference)?,
            ssim: ssim(output, reference)?,
            lpips_proxy: lpips_proxy(output, reference, extractor)?,
            hf_energy_gap: hf_energy_proportion(output, &bands)? - hf_energy_proportion(reference, &bands)?,
        })
    }

    /// Field-wise mean; panics on an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            lpips_proxy: avg(|r| r.lpips_proxy),
            hf_energy_gap: avg(|r| r.hf_energy_gap),
        }
    }
}

mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid psnr {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn column(&self, f: fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| f(&r.metrics)).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.alpha).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,psnr,ssim,lpips_proxy,hf_energy_gap\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(s, "{},{},{},{},{}", r.alpha, m.psnr, m.ssim, m.lpips_proxy, m.hf_energy_gap);
        }
        s
    }
}

/// One averaged report per α over the (degraded, clean) evaluation pairs.
pub fn sweep_alpha(pipeline: &Pipeline, pairs: &[(&ImageTensor, &ImageTensor)], grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        bail_validation!("alpha grid is empty");
    }
    for &a in grid {
        validate_alpha(a)?;
    }
    if !pipeline.has_adapters() {
        log::warn!("sweeping a checkpoint without adapters; every row will be identical");
    }
    let rows = grid
        .iter()
        .map(|&alpha| {
            Ok(SweepRow {
                alpha,
                metrics: pipeline.evaluate(pairs, AdapterScales::blend(alpha)?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { rows })
}

/// Average ranks (1-based), ties share their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Static parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub encoder: usize,
    pub decoder: usize,
    pub projection: usize,
    pub restorer: usize,
    pub lora_encoder: usize,
    pub lora_decoder: usize,
    pub discriminator: usize,
    /// VAE + restorer + projection head: the deployed restoration model.
    pub budget_total: usize,
}

pub fn param_report(model: &ModelConfig) -> Result<ParamReport> {
    model.validate()?;
    let vae = Vae::new(model.vae.clone())?;
    let restorer = Restorer::new(model.restorer.clone(), model.vae.latent_channels)?;
    let disc = Discriminator::new(&model.disc)?;
    let projection = model.vae.latent_channels * model.prior.feature_dim + model.prior.feature_dim;
    let (et, dt) = default_targets(&vae, model.lora.rank);
    let lora = |ts: &[crate::nn::ConvSpec]| {
        ts.iter()
            .map(|t| {
                let (m, k) = matrix_shape(t);
                model.lora.rank * (m + k)
            })
            .sum()
    };
    let encoder = vae.encoder().num_params();
    let decoder = vae.decoder().num_params();
    Ok(ParamReport {
        encoder,
        decoder,
        projection,
        restorer: restorer.num_params(),
        lora_encoder: lora(&et),
        lora_decoder: lora(&dt),
        discriminator: disc.num_params(),
        budget_total: encoder + decoder + projection + restorer.num_params(),
    })
}

//! Frequency tooling: the high-pass operator used by the high-frequency losses, an
//! orthonormal 2-D DCT for spectral analysis, and cross-degradation cosine similarity.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail_validation, Result};
use crate::nn::ops::{blur_planes, gaussian_blur, gaussian_taps};
use crate::tensor::HwcTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
pub enum HFOperatorConfig {
    GaussianResidual { sigma: f64 },
    DctMask { cutoff: f64 },
}

impl Default for HFOperatorConfig {
    fn default() -> Self {
        HFOperatorConfig::GaussianResidual { sigma: 2.0 }
    }
}

impl HFOperatorConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HFOperatorConfig::GaussianResidual { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                bail_validation!("high-pass sigma must be > 0, got {sigma}")
            }
            HFOperatorConfig::DctMask { cutoff } if !(cutoff > 0.0 && cutoff < 1.0) => {
                bail_validation!("high-pass cutoff must lie in (0,1), got {cutoff}")
            }
            _ => Ok(()),
        }
    }

    /// Smallest spatial extent the operator accepts.
    pub fn min_extent(&self) -> usize {
        match *self {
            HFOperatorConfig::GaussianResidual { sigma } => gaussian_taps(sigma).len(),
            HFOperatorConfig::DctMask { .. } => 2,
        }
    }

    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let min = self.min_extent();
        if h < min || w < min {
            bail_validation!("high-pass needs spatial dims ≥ {min}, got {h}x{w}");
        }
        Ok(())
    }
}

/// Orthonormal DCT-II basis, row k / column i.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

fn check_2d(data: &[f64], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        bail_validation!("DCT of an empty array");
    }
    if data.len() != rows * cols {
        bail_validation!("array length {} does not match {rows}x{cols}", data.len());
    }
    Ok(())
}

// out = A · X · Bᵀ for row-major A (r×r), X (r×c), B (c×c)
fn sandwich(a: &[f64], x: &[f64], b: &[f64], rows: usize, cols: usize, transpose: bool) -> Vec<f64> {
    let at = |i: usize, k: usize| if transpose { a[k * rows + i] } else { a[i * rows + k] };
    let bt = |j: usize, k: usize| if transpose { b[k * cols + j] } else { b[j * cols + k] };
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..rows {
            let aik = at(i, k);
            if aik == 0.0 {
                continue;
            }
            for j in 0..cols {
                tmp[i * cols + j] += aik * x[k * cols + j];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..cols).map(|k| tmp[i * cols + k] * bt(j, k)).sum();
        }
    }
    out
}

/// Orthonormal type-II 2-D DCT of a row-major `rows`×`cols` array.
pub fn dct2(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    check_2d(data, rows, cols)?;
    Ok(sandwich(&dct_matrix(rows), data, &dct_matrix(cols), rows, cols, false))
}

pub fn idct2(coeffs: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    check_2d(coeffs, rows, cols)?;
    Ok(sandwich(&dct_matrix(rows), coeffs, &dct_matrix(cols), rows, cols, true))
}

/// Normalized radial frequency of DCT index (u, v) on a U×V grid, in [0, 1].
pub fn radial_frequency(u: usize, v: usize, rows: usize, cols: usize) -> f64 {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    (norm(u, rows).powi(2) + norm(v, cols).powi(2)).sqrt() / std::f64::consts::SQRT_2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralBands {
    pub cutoff: f64,
    #[serde(default = "default_true")]
    pub dc_excluded: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SpectralBands {
    fn default() -> Self {
        Self {
            cutoff: 0.5,
            dc_excluded: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Lf,
    Hf,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Lf => "lf",
            Band::Hf => "hf",
        }
    }
}

impl SpectralBands {
    pub fn new(cutoff: f64) -> Self {
        Self {
            cutoff,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            bail_validation!("band cutoff must lie in (0,1), got {}", self.cutoff);
        }
        Ok(())
    }

    /// Band of coefficient (u, v); `None` for an excluded DC term.
    pub fn band_of(&self, u: usize, v: usize, rows: usize, cols: usize) -> Option<Band> {
        if u == 0 && v == 0 && self.dc_excluded {
            return None;
        }
        if radial_frequency(u, v, rows, cols) >= self.cutoff {
            Some(Band::Hf)
        } else {
            Some(Band::Lf)
        }
    }
}

/// (lf, hf) energy per channel; channels without counted energy are skipped.
fn band_energies(x: &HwcTensor, bands: &SpectralBands) -> Result<Vec<(f64, f64)>> {
    bands.validate()?;
    let (h, w, c) = x.shape();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane: Vec<f64> = x.plane(ch).into_iter().map(f64::from).collect();
        let coeffs = dct2(&plane, h, w)?;
        let (mut lf, mut hf) = (0.0, 0.0);
        for u in 0..h {
            for v in 0..w {
                let e = coeffs[u * w + v].powi(2);
                match bands.band_of(u, v, h, w) {
                    Some(Band::Lf) => lf += e,
                    Some(Band::Hf) => hf += e,
                    None => {}
                }
            }
        }
        out.push((lf, hf));
    }
    Ok(out)
}

// Relative floor below which a channel's counted energy is treated as rounding noise.
const ENERGY_FLOOR: f64 = 1e-20;

fn band_proportion(x: &HwcTensor, bands: &SpectralBands, pick: Band) -> Result<f64> {
    let scale: f64 = x.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().max(1.0);
    let props: Vec<f64> = band_energies(x, bands)?
        .into_iter()
        .filter(|(lf, hf)| lf + hf > ENERGY_FLOOR * scale)
        .map(|(lf, hf)| match pick {
            Band::Lf => lf / (lf + hf),
            Band::Hf => hf / (lf + hf),
        })
        .collect();
    if props.is_empty() {
        return Ok(0.0);
    }
    Ok(props.iter().sum::<f64>() / props.len() as f64)
}

/// Share of spectral energy at radial frequency ≥ cutoff, averaged over channels.
/// Returns 0 when there is no energy to split.
pub fn hf_energy_proportion(x: &HwcTensor, bands: &SpectralBands) -> Result<f64> {
    band_proportion(x, bands, Band::Hf)
}

pub fn lf_energy_proportion(x: &HwcTensor, bands: &SpectralBands) -> Result<f64> {
    band_proportion(x, bands, Band::Lf)
}

/// Radially binned energy spectrum averaged over channels (`bins` equal-width bins over [0,1]).
pub fn radial_spectrum(x: &HwcTensor, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        bail_validation!("spectrum needs at least one bin");
    }
    let (h, w, c) = x.shape();
    let mut out = vec![0.0; bins];
    for ch in 0..c {
        let plane: Vec<f64> = x.plane(ch).into_iter().map(f64::from).collect();
        let coeffs = dct2(&plane, h, w)?;
        for u in 0..h {
            for v in 0..w {
                if u == 0 && v == 0 {
                    continue;
                }
                let r = radial_frequency(u, v, h, w);
                let b = ((r * bins as f64) as usize).min(bins - 1);
                out[b] += coeffs[u * w + v].powi(2) / c as f64;
            }
        }
    }
    Ok(out)
}

/// High-pass of an H×W×C tensor, computed per channel in f64.
pub fn high_pass(x: &HwcTensor, cfg: &HFOperatorConfig) -> Result<HwcTensor> {
    let (h, w, c) = x.shape();
    cfg.check_extent(h, w)?;
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let plane: Vec<f64> = x.plane(ch).into_iter().map(f64::from).collect();
        let hp: Vec<f64> = match *cfg {
            HFOperatorConfig::GaussianResidual { sigma } => {
                let mut lf = plane.clone();
                blur_planes(&mut lf, h, w, &gaussian_taps(sigma), false);
                plane.iter().zip(&lf).map(|(a, b)| a - b).collect()
            }
            HFOperatorConfig::DctMask { cutoff } => {
                let mut coeffs = dct2(&plane, h, w)?;
                for u in 0..h {
                    for v in 0..w {
                        if radial_frequency(u, v, h, w) < cutoff {
                            coeffs[u * w + v] = 0.0;
                        }
                    }
                }
                idct2(&coeffs, h, w)?
            }
        };
        planes.push(hp.into_iter().map(|v| v as f32).collect());
    }
    HwcTensor::from_planes(h, w, &planes)
}

/// The complementary low-pass: `low_pass(x) + high_pass(x) = x`.
pub fn low_pass(x: &HwcTensor, cfg: &HFOperatorConfig) -> Result<HwcTensor> {
    let hp = high_pass(x, cfg)?;
    HwcTensor::new(
        x.height(),
        x.width(),
        x.channels(),
        x.data().iter().zip(hp.data()).map(|(a, b)| a - b).collect(),
    )
}

fn mask_tensor(h: usize, w: usize, cutoff: f64, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let mask: Vec<f64> = (0..h * w)
        .map(|i| if radial_frequency(i / w, i % w, h, w) >= cutoff { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(mask, (h, w), dev)?.to_dtype(dtype)?)
}

/// Differentiable high-pass of an (N, C, H, W) tensor.
pub fn high_pass_nchw(x: &Tensor, cfg: &HFOperatorConfig) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    cfg.check_extent(h, w)?;
    match *cfg {
        HFOperatorConfig::GaussianResidual { sigma } => Ok((x - gaussian_blur(x, sigma)?)?),
        HFOperatorConfig::DctMask { cutoff } => {
            let (dt, dev) = (x.dtype(), x.device());
            let ch = Tensor::from_vec(dct_matrix(h), (h, h), dev)?.to_dtype(dt)?;
            let cw = Tensor::from_vec(dct_matrix(w), (w, w), dev)?.to_dtype(dt)?;
            let coeffs = ch.broadcast_matmul(x)?.broadcast_matmul(&cw.t()?)?;
            let kept = coeffs.broadcast_mul(&mask_tensor(h, w, cutoff, dt, dev)?)?;
            Ok(ch.t()?.broadcast_matmul(&kept)?.broadcast_matmul(&cw)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CDCSReport {
    pub overall: f64,
    pub per_band: BTreeMap<String, f64>,
    pub num_contents: usize,
    pub num_degradations: usize,
    pub skipped_pairs: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn band_vector(x: &HwcTensor, bands: &SpectralBands, band: Band) -> Result<Vec<f64>> {
    let (h, w, c) = x.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        let plane: Vec<f64> = x.plane(ch).into_iter().map(f64::from).collect();
        let coeffs = dct2(&plane, h, w)?;
        for u in 0..h {
            for v in 0..w {
                if bands.band_of(u, v, h, w) == Some(band) {
                    out.push(coeffs[u * w + v]);
                }
            }
        }
    }
    Ok(out)
}

// mean over contents of the mean over unordered degradation pairs
fn mean_pair_cosine(vectors: &[Vec<Vec<f64>>], skipped: &mut usize) -> f64 {
    let contents = vectors[0].len();
    let mut content_means = Vec::with_capacity(contents);
    for i in 0..contents {
        let mut sims = Vec::new();
        for a in 0..vectors.len() {
            for b in a + 1..vectors.len() {
                match cosine(&vectors[a][i], &vectors[b][i]) {
                    Some(s) => sims.push(s),
                    None => *skipped += 1,
                }
            }
        }
        if !sims.is_empty() {
            content_means.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    if content_means.is_empty() {
        return 0.0;
    }
    content_means.iter().sum::<f64>() / content_means.len() as f64
}

/// Cross-degradation cosine similarity. `latents[d][i]` is content `i` under degradation `d`.
pub fn cdcs(latents: &BTreeMap<String, Vec<HwcTensor>>, bands: Option<&SpectralBands>) -> Result<CDCSReport> {
    if latents.len() < 2 {
        bail_validation!("CDCS needs at least two degradations, got {}", latents.len());
    }
    let sets: Vec<&Vec<HwcTensor>> = latents.values().collect();
    let contents = sets[0].len();
    if contents == 0 {
        bail_validation!("CDCS needs at least one content");
    }
    let shape = sets[0][0].shape();
    for (id, set) in latents {
        if set.len() != contents {
            bail_validation!("degradation {id} has {} latents, expected {contents}", set.len());
        }
        if let Some(bad) = set.iter().find(|t| t.shape() != shape) {
            bail_validation!("latent shape {:?} in {id} differs from {:?}", bad.shape(), shape);
        }
    }

    let mut skipped = 0;
    let flat: Vec<Vec<Vec<f64>>> = sets
        .iter()
        .map(|s| s.iter().map(|t| t.data().iter().map(|v| f64::from(*v)).collect()).collect())
        .collect();
    let overall = mean_pair_cosine(&flat, &mut skipped);
    if skipped > 0 {
        log::warn!("CDCS skipped {skipped} pair(s) with a zero-norm latent");
    }

    let mut per_band = BTreeMap::new();
    if let Some(bands) = bands {
        bands.validate()?;
        for band in [Band::Lf, Band::Hf] {
            let vecs = sets
                .iter()
                .map(|s| s.iter().map(|t| band_vector(t, bands, band)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let mut band_skipped = 0;
            per_band.insert(band.as_str().to_string(), mean_pair_cosine(&vecs, &mut band_skipped));
        }
    }

    Ok(CDCSReport {
        overall,
        per_band,
        num_contents: contents,
        num_degradations: sets.len(),
        skipped_pairs: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_dct(x: &[f64], n: usize, m: usize) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        let s = |k: usize, len: usize| {
            if k == 0 {
                (1.0 / len as f64).sqrt()
            } else {
                (2.0 / len as f64).sqrt()
            }
        };
        let mut out = vec![0.0; n * m];
        for u in 0..n {
            for v in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..m {
                        acc += x[i * m + j]
                            * (pi * u as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
                            * (pi * v as f64 * (2 * j + 1) as f64 / (2 * m) as f64).cos();
                    }
                }
                out[u * m + v] = s(u, n) * s(v, m) * acc;
            }
        }
        out
    }

    fn random_plane(n: usize, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dct_matches_brute_force() {
        let x = random_plane(8, 8, 3);
        let fast = dct2(&x, 8, 8).unwrap();
        for (a, b) in fast.iter().zip(brute_dct(&x, 8, 8)) {
            assert!((a - b).abs() < 1e-8);
        }
        let y = random_plane(5, 7, 4);
        for (a, b) in dct2(&y, 5, 7).unwrap().iter().zip(brute_dct(&y, 5, 7)) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let c = dct2(&vec![0.3; 16], 4, 4).unwrap();
        assert!((c[0] - 4.0 * 0.3).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random_plane(12, 9, 5);
        let c = dct2(&x, 12, 9).unwrap();
        let back = idct2(&c, 12, 9).unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-6));
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = c.iter().map(|v| v * v).sum();
        assert!((ex - ec).abs() / ex < 1e-6);
        assert!(dct2(&[], 0, 0).is_err());
    }

    #[test]
    fn constant_high_pass_is_zero() {
        let x = HwcTensor::filled(16, 16, 3, 0.42);
        for cfg in [HFOperatorConfig::default(), HFOperatorConfig::DctMask { cutoff: 0.3 }] {
            let hp = high_pass(&x, &cfg).unwrap();
            assert!(hp.data().iter().all(|v| v.abs() < 1e-6), "{cfg:?}");
        }
        assert_eq!(hf_energy_proportion(&x, &SpectralBands::default()).unwrap(), 0.0);
    }

    #[test]
    fn low_plus_high_reconstructs() {
        let x = HwcTensor::from_fn(20, 20, 2, |y, x, c| ((y * 13 + x * 7 + c * 5) % 11) as f32 / 11.0);
        let cfg = HFOperatorConfig::default();
        let (lo, hi) = (low_pass(&x, &cfg).unwrap(), high_pass(&x, &cfg).unwrap());
        for ((a, b), v) in lo.data().iter().zip(hi.data()).zip(x.data()) {
            assert!((a + b - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn sinusoid_near_nyquist_passes_high_pass() {
        // oracle: the FFT-measured AC energy of the input, scaled by the Gaussian's
        // closed-form attenuation at f, bounds the energy the low-pass can keep
        use rustfft::{num_complex::Complex, FftPlanner};
        let f = 0.45;
        let x = HwcTensor::from_fn(64, 64, 1, |_, col, _| (std::f32::consts::TAU * f * col as f32).cos());
        let hp = high_pass(&x, &HFOperatorConfig::default()).unwrap();
        let ac = |t: &HwcTensor| {
            let mut fft = FftPlanner::<f64>::new();
            let plan = fft.plan_fft_forward(64);
            let mut total = 0.0;
            for r in 0..64 {
                let mut row: Vec<Complex<f64>> =
                    (0..64).map(|c| Complex::new(t.get(r, c, 0) as f64, 0.0)).collect();
                plan.process(&mut row);
                total += row[1..].iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
            total
        };
        let response = (-2.0 * std::f64::consts::PI.powi(2) * 4.0 * (f as f64).powi(2)).exp();
        assert!(response < 1e-6);
        let ratio = ac(&hp) / ac(&x);
        assert!(ratio >= 0.9, "retained {ratio}");
    }

    #[test]
    fn high_pass_validation() {
        let x = HwcTensor::filled(16, 16, 1, 0.0);
        assert!(high_pass(&x, &HFOperatorConfig::GaussianResidual { sigma: 0.0 }).is_err());
        assert!(high_pass(&x, &HFOperatorConfig::DctMask { cutoff: 1.0 }).is_err());
        let small = HwcTensor::filled(8, 8, 1, 0.0);
        assert!(high_pass(&small, &HFOperatorConfig::default()).is_err());
    }

    #[test]
    fn nchw_high_pass_matches_hwc() {
        let x = HwcTensor::from_fn(16, 16, 3, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f32 / 7.0);
        for cfg in [HFOperatorConfig::default(), HFOperatorConfig::DctMask { cutoff: 0.4 }] {
            let t = x.to_nchw(DType::F64, &Device::Cpu).unwrap();
            let got = HwcTensor::unstack_nchw(&high_pass_nchw(&t, &cfg).unwrap()).unwrap();
            let want = high_pass(&x, &cfg).unwrap();
            for (a, b) in got[0].data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "{cfg:?}");
            }
        }
    }

    #[test]
    fn checkerboard_two_by_two_is_all_high_frequency() {
        let board = HwcTensor::from_fn(2, 2, 1, |y, x, _| ((y + x) % 2) as f32);
        let c = dct2(&board.plane(0).iter().map(|v| *v as f64).collect::<Vec<_>>(), 2, 2).unwrap();
        // AC energy sits only in the (1,1) coefficient
        assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12 && c[3].abs() > 0.9);
        let p = hf_energy_proportion(&board, &SpectralBands::default()).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_checkerboard_is_dominated_by_high_frequency() {
        let board = HwcTensor::from_fn(16, 16, 1, |y, x, _| ((y + x) % 2) as f32);
        let p = hf_energy_proportion(&board, &SpectralBands::default()).unwrap();
        assert!(p > 0.9, "{p}");
    }

    #[test]
    fn white_noise_matches_coefficient_fraction() {
        let bands = SpectralBands::default();
        let n = 64;
        let mut hf_count = 0usize;
        for u in 0..n {
            for v in 0..n {
                if bands.band_of(u, v, n, n) == Some(Band::Hf) {
                    hf_count += 1;
                }
            }
        }
        let expected = hf_count as f64 / (n * n - 1) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mean = 0.0;
        for _ in 0..100 {
            let x = HwcTensor::from_fn(n, n, 1, |_, _, _| rng.random_range(-1.0..1.0));
            mean += hf_energy_proportion(&x, &bands).unwrap() / 100.0;
        }
        assert!((mean - expected).abs() <= 0.02, "{mean} vs {expected}");
    }

    fn lat(v: &[f32]) -> HwcTensor {
        HwcTensor::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    fn two_sets(a: Vec<HwcTensor>, b: Vec<HwcTensor>) -> BTreeMap<String, Vec<HwcTensor>> {
        BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)])
    }

    #[test]
    fn cdcs_hand_examples() {
        let r = cdcs(&two_sets(vec![lat(&[1.0, 0.0])], vec![lat(&[0.0, 1.0])]), None).unwrap();
        assert_eq!(r.overall, 0.0);
        let r = cdcs(&two_sets(vec![lat(&[1.0, 1.0])], vec![lat(&[1.0, 0.0])]), None).unwrap();
        assert!((r.overall - 0.5f64.sqrt()).abs() < 1e-12);
        let set = vec![lat(&[0.3, -1.0, 2.0]), lat(&[1.0, 1.0, 0.5])];
        let r = cdcs(&two_sets(set.clone(), set), Some(&SpectralBands::default())).unwrap();
        assert!((r.overall - 1.0).abs() < 1e-12);
        assert!(r.per_band.values().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cdcs_rejects_bad_input_and_skips_zero_norm() {
        let one = BTreeMap::from([("a".to_string(), vec![lat(&[1.0])])]);
        assert!(cdcs(&one, None).is_err());
        assert!(cdcs(&two_sets(vec![lat(&[1.0, 0.0])], vec![lat(&[1.0])]), None).is_err());
        assert!(cdcs(&two_sets(vec![lat(&[1.0])], vec![]), None).is_err());
        let r = cdcs(
            &two_sets(vec![lat(&[0.0, 0.0]), lat(&[1.0, 0.0])], vec![lat(&[1.0, 0.0]), lat(&[1.0, 0.0])]),
            None,
        )
        .unwrap();
        assert_eq!(r.skipped_pairs, 1);
        assert_eq!(r.overall, 1.0);
    }

    fn arb_latents() -> impl Strategy<Value = (Vec<Vec<f32>>, usize)> {
        (2usize..4, 1usize..4).prop_flat_map(|(d, n)| {
            (prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 16), d * n), Just(n))
        })
    }

    fn as_map(raw: &[Vec<f32>], n: usize, order: &[usize]) -> BTreeMap<String, Vec<HwcTensor>> {
        let d = raw.len() / n;
        (0..d)
            .map(|k| {
                let src = order[k];
                (
                    format!("d{k}"),
                    (0..n)
                        .map(|i| HwcTensor::new(4, 4, 1, raw[src * n + i].clone()).unwrap())
                        .collect(),
                )
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cdcs_scale_and_permutation_invariant((raw, n) in arb_latents(), scale in 0.01f32..50.0) {
            let d = raw.len() / n;
            let bands = SpectralBands::default();
            let ident: Vec<usize> = (0..d).collect();
            let base = cdcs(&as_map(&raw, n, &ident), Some(&bands)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base.overall));
            let scaled: Vec<Vec<f32>> = raw.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let s = cdcs(&as_map(&scaled, n, &ident), Some(&bands)).unwrap();
            prop_assert!((s.overall - base.overall).abs() < 1e-5);
            let rev: Vec<usize> = (0..d).rev().collect();
            let p = cdcs(&as_map(&raw, n, &rev), Some(&bands)).unwrap();
            prop_assert!((p.overall - base.overall).abs() < 1e-12);
            for (k, v) in &base.per_band {
                prop_assert!((p.per_band[k] - v).abs() < 1e-12);
            }
        }

        #[test]
        fn band_proportions_sum_to_one(v in prop::collection::vec(-1.0f32..1.0, 48)) {
            let x = HwcTensor::new(4, 4, 3, v).unwrap();
            let bands = SpectralBands::new(0.4);
            let hf = hf_energy_proportion(&x, &bands).unwrap();
            let lf = lf_energy_proportion(&x, &bands).unwrap();
            prop_assert!((0.0..=1.0).contains(&hf));
            prop_assert!((hf + lf - 1.0).abs() < 1e-9);
        }

        #[test]
        fn high_pass_is_linear(
            a in -1.0f32..1.0,
            b in -1.0f32..1.0,
            u in prop::collection::vec(-1.0f32..1.0, 256),
            w in prop::collection::vec(-1.0f32..1.0, 256),
        ) {
            let cfg = HFOperatorConfig::default();
            let x = HwcTensor::new(16, 16, 1, u).unwrap();
            let y = HwcTensor::new(16, 16, 1, w).unwrap();
            let combo = HwcTensor::new(16, 16, 1,
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = high_pass(&combo, &cfg).unwrap();
            let (hx, hy) = (high_pass(&x, &cfg).unwrap(), high_pass(&y, &cfg).unwrap());
            for i in 0..256 {
                let rhs = a * hx.data()[i] + b * hy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-6);
            }
        }
    }
}

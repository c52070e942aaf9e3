//! The frozen semantic prior: a feature extractor that supplies invariance targets
//! from clean images, plus the trainable projection head P that maps latents into
//! its feature space.

use std::fmt::Debug;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail_validation, Result};
use crate::nn::{Activation, ConvSpec, Layer, ParamSet, Sequential};
use crate::tensor::{HwcTensor, ImageTensor};

/// Any frozen image → feature-map network. Implementations must be deterministic and
/// must not expose trainable variables.
pub trait FeatureExtractor: Send + Sync + Debug {
    fn feature_dim(&self) -> usize;
    /// Spatial reduction of the final map relative to the input.
    fn downsample(&self) -> usize;
    /// Final feature map (N, feature_dim, H/f, W/f), detached from any graph.
    fn features(&self, x: &Tensor) -> Result<Tensor>;
    /// Every intermediate map, shallow to deep; used by the perceptual proxy.
    fn feature_pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub seed: u64,
    /// Widths of the conv stages; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
}

impl PriorConfig {
    pub fn reference() -> Self {
        Self {
            seed: 0x5EED_CAFE,
            widths: vec![32, 64, 128],
            feature_dim: 256,
        }
    }

    pub fn toy() -> Self {
        Self {
            seed: 3,
            widths: vec![4, 4],
            feature_dim: 8,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.feature_dim == 0 {
            bail_validation!("prior widths and feature_dim must be positive");
        }
        Ok(())
    }
}

/// Seeded random conv stack standing in for a pretrained vision backbone.
#[derive(Debug)]
pub struct RandomConvExtractor {
    net: Sequential,
    params: ParamSet,
    feature_dim: usize,
    downsample: usize,
}

impl RandomConvExtractor {
    pub fn new(cfg: &PriorConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Layer::Conv(ConvSpec::new(format!("prior.conv{i}"), c_in, w, 3, stride), Activation::Silu));
            c_in = w;
        }
        layers.push(Layer::Conv(
            ConvSpec::new("prior.head", c_in, cfg.feature_dim, 1, 1),
            Activation::None,
        ));
        let net = Sequential { layers };
        let params = net.init(cfg.seed, device)?;
        Ok(Self {
            net,
            params,
            feature_dim: cfg.feature_dim,
            downsample: cfg.downsample(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_for(&self, dtype: DType) -> Result<ParamSet> {
        if dtype == DType::F32 {
            Ok(self.params.clone())
        } else {
            self.params.to_dtype(dtype)
        }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn downsample(&self) -> usize {
        self.downsample
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.params_for(x.dtype())?;
        Ok(self.net.forward(&p, &x.detach())?.detach())
    }

    fn feature_pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let p = self.params_for(x.dtype())?;
        self.net.forward_features(&p, x)
    }
}

/// Extractor plus the projection head P (`vae.proj.*`, a 1×1 conv c_z → feature_dim).
#[derive(Clone, Debug)]
pub struct SemanticPrior {
    extractor: Arc<dyn FeatureExtractor>,
    proj: ConvSpec,
}

impl SemanticPrior {
    pub fn new(extractor: Arc<dyn FeatureExtractor>, latent_channels: usize) -> Self {
        let proj = ConvSpec::new("vae.proj", latent_channels, extractor.feature_dim(), 1, 1);
        Self { extractor, proj }
    }

    pub fn from_config(cfg: &PriorConfig, latent_channels: usize, device: &Device) -> Result<Self> {
        Ok(Self::new(Arc::new(RandomConvExtractor::new(cfg, device)?), latent_channels))
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.extractor.as_ref()
    }

    pub fn projection(&self) -> &ConvSpec {
        &self.proj
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn init_projection(&self, seed: u64, device: &Device) -> Result<ParamSet> {
        Sequential {
            layers: vec![Layer::Conv(self.proj.clone(), Activation::None)],
        }
        .init(seed, device)
    }

    /// f_VFM for a batch of clean images (no gradient).
    pub fn features(&self, clean: &Tensor) -> Result<Tensor> {
        self.extractor.features(clean)
    }

    /// P(z) at latent resolution.
    pub fn project(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        self.proj.forward(params, z)
    }

    /// Feature map of one clean image, at latent resolution.
    pub fn semantic_features(&self, image: &ImageTensor) -> Result<HwcTensor> {
        let f = self.extractor.downsample();
        if image.height() % f != 0 || image.width() % f != 0 {
            bail_validation!("image {}x{} not divisible by the prior's factor {f}", image.height(), image.width());
        }
        let t = image.to_nchw(DType::F32, &Device::Cpu)?;
        Ok(HwcTensor::unstack_nchw(&self.features(&t)?)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{apply_degradation, procedural_image, DegradationKind, DegradationSpec};

    fn prior() -> SemanticPrior {
        SemanticPrior::from_config(&PriorConfig::reference(), 4, &Device::Cpu).unwrap()
    }

    #[test]
    fn features_are_deterministic_and_latent_aligned() {
        let p = prior();
        let img = procedural_image(32, 1);
        let a = p.semantic_features(&img).unwrap();
        assert_eq!(a, p.semantic_features(&img).unwrap());
        assert_eq!(a.shape(), (8, 8, 256));
        assert!(p.semantic_features(&procedural_image(30, 1)).is_err());
    }

    #[test]
    fn degraded_variants_give_different_features() {
        let p = prior();
        let img = procedural_image(32, 2);
        let n = apply_degradation(&img, DegradationSpec::new(DegradationKind::GaussianNoise, 0.5), 1).unwrap();
        let l = apply_degradation(&img, DegradationSpec::new(DegradationKind::LowLight, 0.5), 1).unwrap();
        let (fa, fb) = (p.semantic_features(&n).unwrap(), p.semantic_features(&l).unwrap());
        let diff: f32 = fa.data().iter().zip(fb.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn same_seed_same_extractor() {
        let a = RandomConvExtractor::new(&PriorConfig::reference(), &Device::Cpu).unwrap();
        let b = RandomConvExtractor::new(&PriorConfig::reference(), &Device::Cpu).unwrap();
        for ((ka, va), (kb, vb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ka, kb);
            let x: Vec<f32> = va.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = vb.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }
}

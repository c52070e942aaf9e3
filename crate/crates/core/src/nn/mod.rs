//! Minimal network plumbing on top of candle: named parameter sets, convolution
//! layer specs and sequential stacks whose weights are supplied at call time.
//!
//! Keeping weights outside the layer structs is what lets the same architecture be run
//! with frozen constants, trainable variables, or LoRA-blended weights.

pub mod conv;
pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use conv::{conv2d, PadMode};

use crate::error::{Error, Result};

/// Name → tensor map of network weights. Entries may be constants or variable views.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Deep copy into fresh constant storage, detached from any variable.
    pub fn frozen_copy(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.detach().copy()?);
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// Promote every entry to a trainable variable (fresh storage).
    pub fn to_vars(&self) -> Result<VarSet> {
        let mut vars = VarSet::default();
        for (k, v) in &self.tensors {
            vars.vars.insert(k.clone(), Var::from_tensor(&v.detach().copy()?)?);
        }
        Ok(vars)
    }
}

/// Trainable parameters: name → candle variable.
#[derive(Clone, Debug, Default)]
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Views sharing storage with the variables, so gradients route back to them.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, v) in &self.vars {
            p.insert(k.clone(), v.as_tensor().clone());
        }
        p
    }

    pub fn snapshot(&self) -> Result<ParamSet> {
        self.params().frozen_copy()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Silu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::None => Ok(x.clone()),
            Activation::Silu => x.silu(),
            Activation::LeakyRelu => x.maximum(&(x * 0.2)?),
            Activation::Sigmoid => candle_nn::ops::sigmoid(x),
        }
    }
}

/// A square-kernel convolution with bias. Weight `{name}.weight` (O,I,K,K), bias `{name}.bias` (O).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            pad_mode: PadMode::Reflect,
        }
    }

    pub fn with_padding(mut self, padding: usize, mode: PadMode) -> Self {
        self.padding = padding;
        self.pad_mode = mode;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> (usize, usize, usize, usize) {
        (self.c_out, self.c_in, self.kernel, self.kernel)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        let y = conv2d(x, w, self.stride, self.padding, self.pad_mode)?;
        Ok(y.broadcast_add(&b.reshape((1, self.c_out, 1, 1))?)?)
    }

    /// Uniform(±gain/√fan_in) weights, zero bias.
    pub fn init(&self, rng: &mut ChaCha8Rng, gain: f32, device: &Device) -> Result<[(String, Tensor); 2]> {
        let fan_in = (self.c_in * self.kernel * self.kernel) as f32;
        let bound = gain / fan_in.sqrt();
        let n = self.c_out * self.c_in * self.kernel * self.kernel;
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok([
            (self.weight_name(), Tensor::from_vec(w, self.weight_shape(), device)?),
            (self.bias_name(), Tensor::zeros(self.c_out, DType::F32, device)?),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvSpec, Activation),
    Upsample(usize),
}

pub const HE_GAIN: f32 = 2.449_489_7;

/// A plain feed-forward stack of convolutions and upsampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c, _) => Some(c),
            Layer::Upsample(_) => None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convs().map(ConvSpec::num_params).sum()
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(spec, act) => act.apply(&spec.forward(p, &h)?)?,
                Layer::Upsample(f) => ops::upsample_nearest(&h, *f)?,
            };
        }
        Ok(h)
    }

    /// Forward pass that also returns every post-activation conv output.
    pub fn forward_features(&self, p: &ParamSet, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut feats = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(spec, act) => {
                    h = act.apply(&spec.forward(p, &h)?)?;
                    feats.push(h.clone());
                }
                Layer::Upsample(f) => h = ops::upsample_nearest(&h, *f)?,
            }
        }
        Ok(feats)
    }

    /// He-uniform weights (bound √(6/fan_in)), zero bias.
    pub fn init(&self, seed: u64, device: &Device) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for spec in self.convs() {
            for (k, v) in spec.init(&mut rng, HE_GAIN, device)? {
                p.insert(k, v);
            }
        }
        Ok(p)
    }
}

/// SplitMix64 step: derives independent sub-seeds from a base seed and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scalar value of a 0-d or 1-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

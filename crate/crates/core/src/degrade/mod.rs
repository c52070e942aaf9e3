//! Synthetic degradations, the monotone severity/interpolation schedules and the
//! progressive perturbation used on the perturbed encoder path during autoencoder training.

mod dataset;
mod procedural;

pub use dataset::{build_dataset, Dataset, DatasetManifest, DatasetSource, Sample};
pub use procedural::procedural_image;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_validation, Error, Result};
use crate::nn::ops::{blur_planes, gaussian_taps};
use crate::tensor::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianNoise,
    GaussianBlur,
    LowLight,
    Haze,
    BlockArtifact,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::GaussianNoise,
        DegradationKind::GaussianBlur,
        DegradationKind::LowLight,
        DegradationKind::Haze,
        DegradationKind::BlockArtifact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::LowLight => "low_light",
            DegradationKind::Haze => "haze",
            DegradationKind::BlockArtifact => "block_artifact",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: f32,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: f32) -> Self {
        Self { kind, severity }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            bail_validation!("severity {} outside [0,1]", self.severity);
        }
        Ok(())
    }
}

const HAZE_AIRLIGHT: f32 = 0.9;
const BLOCK: usize = 8;

/// Applies one synthetic degradation. Output has the input's shape and lies in [0,1].
/// Severity 0 returns an exact copy.
pub fn apply_degradation(image: &ImageTensor, spec: DegradationSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    let sev = spec.severity;
    if sev == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match spec.kind {
        DegradationKind::GaussianNoise => {
            let normal = Normal::new(0.0f32, 0.2 * sev).expect("positive sigma");
            let mut out = image.clone();
            for v in out.data_mut() {
                *v += normal.sample(&mut rng);
            }
            out
        }
        DegradationKind::GaussianBlur => {
            let (h, w, c) = image.shape();
            let taps = gaussian_taps(3.0 * sev as f64);
            let mut planes: Vec<Vec<f32>> = (0..c).map(|ch| image.plane(ch)).collect();
            for p in &mut planes {
                blur_planes(p, h, w, &taps, false);
            }
            ImageTensor::from_planes(h, w, &planes)?
        }
        DegradationKind::LowLight => {
            let gain = 1.0 - 0.8 * sev;
            let gamma = 1.0 + sev;
            image.map(|v| gain * v.max(0.0).powf(gamma))
        }
        DegradationKind::Haze => {
            let a = 0.7 * sev;
            image.map(|v| (1.0 - a) * v + a * HAZE_AIRLIGHT)
        }
        DegradationKind::BlockArtifact => block_artifact(image, sev / 2.0, &mut rng),
    };
    Ok(out.clamp01())
}

fn block_artifact(image: &ImageTensor, prob: f32, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w, c) = image.shape();
    let mut out = image.clone();
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            if rng.random::<f32>() >= prob {
                continue;
            }
            let (y1, x1) = ((by + BLOCK).min(h), (bx + BLOCK).min(w));
            let n = ((y1 - by) * (x1 - bx)) as f32;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in by..y1 {
                    for x in bx..x1 {
                        sum += image.get(y, x, ch);
                    }
                }
                for y in by..y1 {
                    for x in bx..x1 {
                        out.set(y, x, ch, sum / n);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    CosineRamp,
}

/// Monotone ramp from `v_min` at t=0 to `v_max` at `t_max`, flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub t_max: u64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Schedule {
    pub fn linear(t_max: u64, v_min: f64, v_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_max,
            v_min,
            v_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            bail_validation!("schedule t_max must be ≥ 1");
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite()) || self.v_min > self.v_max {
            bail_validation!("schedule range [{}, {}] is not increasing", self.v_min, self.v_max);
        }
        Ok(())
    }

    pub fn value(&self, t: i64) -> Result<f64> {
        if t < 0 {
            bail_validation!("schedule step must be non-negative, got {t}");
        }
        self.validate()?;
        let frac = (t as f64 / self.t_max as f64).min(1.0);
        let ramp = match self.kind {
            ScheduleKind::Linear => frac,
            ScheduleKind::CosineRamp => 0.5 * (1.0 - (std::f64::consts::PI * frac).cos()),
        };
        Ok((self.v_min + (self.v_max - self.v_min) * ramp).clamp(self.v_min, self.v_max))
    }
}

pub fn schedule_value(s: &Schedule, t: i64) -> Result<f64> {
    s.value(t)
}

/// Branch probabilities and ramps of the progressive perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub sev_schedule: Schedule,
    pub beta_schedule: Schedule,
    /// Pool sampled by the synthetic branch.
    pub kinds: Vec<DegradationKind>,
    /// Apply a random non-empty subset of `kinds` instead of exactly one.
    #[serde(default)]
    pub compose: bool,
}

impl PerturbConfig {
    /// Defaults for a run of `steps` optimizer steps: ramps finish halfway.
    pub fn for_steps(steps: usize, kinds: Vec<DegradationKind>) -> Self {
        let t_max = (steps as u64 / 2).max(1);
        Self {
            p0: 0.2,
            p1: 0.4,
            p2: 0.4,
            sev_schedule: Schedule::linear(t_max, 0.0, 1.0),
            beta_schedule: Schedule::linear(t_max, 0.0, 1.0),
            kinds,
            compose: false,
        }
    }

    /// Perturbation disabled (p0 = 1).
    pub fn identity(steps: usize, kinds: Vec<DegradationKind>) -> Self {
        Self {
            p0: 1.0,
            p1: 0.0,
            p2: 0.0,
            ..Self::for_steps(steps, kinds)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p0, self.p1, self.p2];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            bail_validation!("branch probabilities must be non-negative, got {ps:?}");
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail_validation!("branch probabilities must sum to 1, got {sum}");
        }
        if self.p1 > 0.0 && self.kinds.is_empty() {
            bail_validation!("synthetic branch enabled with an empty degradation pool");
        }
        self.sev_schedule.validate()?;
        self.beta_schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PerturbBranch {
    Clean = 0,
    Synthetic = 1,
    Interpolated = 2,
}

/// Draws one of the three perturbation branches for step `t`.
pub fn perturb(
    clean: &ImageTensor,
    paired_deg: Option<&ImageTensor>,
    t: i64,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<(ImageTensor, PerturbBranch)> {
    cfg.validate()?;
    if t < 0 {
        bail_validation!("perturbation step must be non-negative, got {t}");
    }
    if cfg.p2 > 0.0 && paired_deg.is_none() {
        bail_validation!("interpolation branch has p2 > 0 but no paired degraded image");
    }
    if let Some(d) = paired_deg {
        clean.ensure_same_shape(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    if u < cfg.p0 {
        return Ok((clean.clone(), PerturbBranch::Clean));
    }
    if u < cfg.p0 + cfg.p1 || cfg.p2 == 0.0 {
        let sev = cfg.sev_schedule.value(t)? as f32;
        let kinds: Vec<DegradationKind> = if cfg.compose {
            let subset: Vec<_> = cfg.kinds.iter().copied().filter(|_| rng.random::<bool>()).collect();
            if subset.is_empty() {
                vec![cfg.kinds[rng.random_range(0..cfg.kinds.len())]]
            } else {
                subset
            }
        } else {
            vec![cfg.kinds[rng.random_range(0..cfg.kinds.len())]]
        };
        let mut out = clean.clone();
        for kind in kinds {
            out = apply_degradation(&out, DegradationSpec::new(kind, sev), rng.random())?;
        }
        return Ok((out, PerturbBranch::Synthetic));
    }
    let beta = cfg.beta_schedule.value(t)? as f32;
    let deg = paired_deg.expect("checked above");
    let data = clean
        .data()
        .iter()
        .zip(deg.data())
        .map(|(&c, &d)| (1.0 - beta) * c + beta * d)
        .collect();
    let (h, w, c) = clean.shape();
    Ok((ImageTensor::new(h, w, c, data)?, PerturbBranch::Interpolated))
}

//! Shared training plumbing: optimizer settings, crop sampling, loss logs and the
//! non-finite guard.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_validation, Error, Result};
use crate::io::{write_png, BitDepth};
use crate::nn::VarSet;
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail_validation!("learning rate must be > 0, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail_validation!("Adam betas must lie in [0,1)");
        }
        if self.weight_decay < 0.0 {
            bail_validation!("weight decay must be ≥ 0");
        }
        Ok(())
    }

    pub fn build(&self, vars: &VarSet) -> Result<AdamW> {
        Ok(AdamW::new(
            vars.all_vars(),
            ParamsAdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
        )?)
    }
}

/// One logged step: loss terms by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub phase: String,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn push(&mut self, step: usize, phase: &str, terms: BTreeMap<String, f64>) {
        log::info!(
            "{phase} step {step}: {}",
            terms
                .iter()
                .map(|(k, v)| format!("{k}={v:.5}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        self.entries.push(LogEntry {
            step,
            phase: phase.to_string(),
            terms,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values of `term` in `phase`, in step order.
    pub fn series(&self, phase: &str, term: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.phase == phase)
            .filter_map(|e| e.terms.get(term).copied())
            .collect()
    }

    /// JSON-lines rendering.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

/// Where a non-finite step dumps its batch; `None` skips the dump.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPolicy {
    pub dir: Option<PathBuf>,
}

/// Returns an error naming the first non-finite term, after dumping `batch` as PNGs.
pub fn guard_finite(
    step: usize,
    terms: &BTreeMap<String, f64>,
    batch: &[(&str, &ImageTensor)],
    policy: &SnapshotPolicy,
) -> Result<()> {
    let Some((term, _)) = terms.iter().find(|(_, v)| !v.is_finite()) else {
        return Ok(());
    };
    let snapshot = match &policy.dir {
        Some(dir) => {
            let dir = dir.join(format!("nonfinite_step{step:06}"));
            for (i, (name, img)) in batch.iter().enumerate() {
                write_png(&dir.join(format!("{i:03}_{name}.png")), img, BitDepth::Eight)?;
            }
            std::fs::write(dir.join("terms.json"), serde_json::to_string_pretty(terms)?)?;
            Some(dir)
        }
        None => None,
    };
    Err(Error::NonFinite {
        step,
        term: term.clone(),
        snapshot,
    })
}

/// A uniformly placed square crop, or the full image when `size` is `None` or too large.
pub fn random_crop(rng: &mut ChaCha8Rng, h: usize, w: usize, size: Option<usize>) -> (usize, usize, usize, usize) {
    match size {
        Some(s) if s < h || s < w => {
            let s = s.min(h).min(w);
            (rng.random_range(0..=h - s), rng.random_range(0..=w - s), s, s)
        }
        _ => (0, 0, h, w),
    }
}

pub fn step_optimizer(opt: &mut AdamW, loss: &candle_core::Tensor) -> Result<()> {
    let grads = loss.backward()?;
    opt.step(&grads)?;
    Ok(())
}

//! Central finite-difference verification of analytic gradients, run in f64.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::degrade::{apply_degradation, procedural_image, DegradationKind, DegradationSpec};
use crate::error::{bail_validation, Result};
use crate::freq::HFOperatorConfig;
use crate::hflora::{
    default_targets, disc_loss_t, effective_weights, fhf_loss_t, init_adapter, phf_gen_loss_t, Discriminator,
};
use crate::lhvae::{gaussian_noise, stage1_loss, SemanticPrior, Stage1Batch, Stage1Weights, Vae};
use crate::nn::{scalar, ConvSpec, ParamSet};
use crate::restorer::{res_loss_t, Restorer};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    /// max |g_analytic − g_numeric| / max(|g_analytic|, |g_numeric|, floor).
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Floor on the relative-error denominator so entries with vanishing gradient are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn trainable<'a>(params: &'a ParamSet, prefixes: &[&str]) -> Vec<(&'a String, &'a Tensor)> {
    params.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).collect()
}

/// Gradients of `loss` with respect to every parameter under `prefixes`; `None` marks a
/// parameter the loss graph never reaches.
pub fn analytic_grads<F>(params: &ParamSet, prefixes: &[&str], loss: F) -> Result<BTreeMap<String, Option<Tensor>>>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    let mut sub = ParamSet::new();
    for (k, v) in trainable(params, prefixes) {
        sub.insert(k.clone(), v.clone());
    }
    let vars = sub.to_vars()?;
    let mut full = params.clone();
    full.extend(&vars.params());
    let grads = loss(&full)?.backward()?;
    Ok(vars
        .iter()
        .map(|(k, v)| (k.clone(), grads.get(v.as_tensor()).cloned()))
        .collect())
}

/// Compares analytic gradients with central differences (step `eps`) for every entry of
/// every parameter under `prefixes`. All parameters must be f64.
pub fn gradcheck<F>(params: &ParamSet, prefixes: &[&str], eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    if let Some((k, _)) = params.iter().find(|(_, t)| t.dtype() != DType::F64) {
        bail_validation!("gradcheck needs f64 parameters; {k} is not");
    }
    if trainable(params, prefixes).is_empty() {
        bail_validation!("no parameters match {prefixes:?}");
    }
    let analytic = analytic_grads(params, prefixes, &loss)?;
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for (name, grad) in &analytic {
        let base = params.get(name)?;
        let values: Vec<f64> = base.flatten_all()?.to_vec1()?;
        let g: Vec<f64> = match grad {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; values.len()],
        };
        for i in 0..values.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[i] += delta;
                let mut p = params.clone();
                p.insert(name.clone(), Tensor::from_vec(v, base.dims(), base.device())?);
                scalar(&loss(&p)?)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

struct Toy {
    model: ModelConfig,
    vae: Vae,
    params: ParamSet,
    clean: Tensor,
    deg: Tensor,
}

fn toy() -> Result<Toy> {
    let model = ModelConfig::toy();
    let dev = Device::Cpu;
    let vae = Vae::new(model.vae.clone())?;
    let mut params = vae.init_params(7, &dev)?;
    let r = Restorer::new(model.restorer.clone(), model.vae.latent_channels)?;
    params.extend(&r.init_params(8, &dev)?);
    let img = |seed| -> Result<(ImageTensor, ImageTensor)> {
        let c = procedural_image(16, seed);
        let d = apply_degradation(&c, DegradationSpec::new(DegradationKind::GaussianNoise, 0.5), seed)?;
        Ok((c, d))
    };
    let (c1, d1) = img(1)?;
    let (c2, d2) = img(2)?;
    Ok(Toy {
        clean: ImageTensor::stack_nchw(&[&c1, &c2], DType::F64, &dev)?,
        deg: ImageTensor::stack_nchw(&[&d1, &d2], DType::F64, &dev)?,
        params: params.to_dtype(DType::F64)?,
        model,
        vae,
    })
}

/// Random non-zero B so the adapter path is exercised.
fn adapters(t: &Toy) -> Result<(Vec<ConvSpec>, Vec<ConvSpec>, ParamSet)> {
    let dev = Device::Cpu;
    let (et, dt) = default_targets(&t.vae, t.model.lora.rank);
    let mut ad = init_adapter(&et, t.model.lora.rank, 1, &dev)?;
    ad.extend(&init_adapter(&dt, t.model.lora.rank, 2, &dev)?);
    let mut out = ParamSet::new();
    for (i, (k, v)) in ad.iter().enumerate() {
        let v = if k.ends_with(".b") {
            gaussian_noise((1, 1, v.dims()[0], v.dims()[1]), 100 + i as u64, DType::F32, &dev)
                ?
                .reshape(v.dims())
                ?
                .affine(0.1, 0.0)
                ?
        } else {
            v.clone()
        };
        out.insert(k.clone(), v);
    }
    Ok((et, dt, out.to_dtype(DType::F64)?))
}

/// Discriminator weights with non-zero biases: flat image regions give exactly zero
/// high-pass input, which would otherwise park pre-activations on the LeakyReLU kink.
fn disc_params(disc: &Discriminator) -> Result<ParamSet> {
    let dev = Device::Cpu;
    let mut p = ParamSet::new();
    for (i, (k, v)) in disc.init_params(5, &dev)?.iter().enumerate() {
        let v = if k.ends_with(".bias") {
            gaussian_noise((1, 1, 1, v.dims()[0]), 200 + i as u64, DType::F32, &dev)
                ?
                .reshape(v.dims())
                ?
                .affine(0.1, 0.0)
                ?
        } else {
            v.clone()
        };
        p.insert(k.clone(), v);
    }
    Ok(p.to_dtype(DType::F64)?)
}


/// Gradient checks of the five training losses on toy f64 models (under 1k trainable
/// entries each), in the order stage1, res, fhf, phf_gen, disc.
pub fn loss_suite(eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let t = toy()?;
    let dev = Device::Cpu;
    let mut out = Vec::new();

    let prior = SemanticPrior::from_config(&t.model.prior, t.model.vae.latent_channels, &dev)?;
    let mut params = t.params.clone();
    params.extend(&prior.init_projection(9, &dev)?.to_dtype(DType::F64)?);
    let noise = gaussian_noise((2, 2, 8, 8), 4, DType::F64, &dev)?;
    let batch = Stage1Batch { clean: t.clean.clone(), perturbed: t.deg.clone(), eps: noise, eqv_scale: 2 };
    let w = Stage1Weights { lambda_kl: 0.1, ..Stage1Weights::default() };
    out.push(("stage1_loss", gradcheck(&params, &["vae."], eps, |p| Ok(stage1_loss(&t.vae, p, &prior, &batch, &w)?.0))?));

    let r = Restorer::new(t.model.restorer.clone(), t.model.vae.latent_channels)?;
    let (mu, _) = t.vae.encode_t(&t.params, &t.deg)?;
    let mut params = t.params.clone();
    // nudge the zero-initialized output conv so every restorer weight gets gradient
    let w = params.get("restorer.conv_out.weight")?.clone();
    params.insert("restorer.conv_out.weight", (w + 0.05)?);
    let vae_p = params.with_prefix("vae.");
    out.push((
        "res_loss",
        gradcheck(&params, &["restorer."], eps, |p| {
            res_loss_t(&r, &p.with_prefix("restorer."), &t.vae, &vae_p, &mu, &t.clean)
        })?,
    ));

    let (et, dt, ad) = adapters(&t)?;
    let disc = Discriminator::new(&t.model.disc)?;
    let mut params = t.params.clone();
    params.extend(&ad);
    params.extend(&disc_params(&disc)?);
    let hf = HFOperatorConfig::default();
    let gamma = t.model.lora.gamma;
    out.push((
        "fhf_loss",
        gradcheck(&params, &["lora.enc."], eps, |p| {
            let enc = effective_weights(p, p, &et, gamma, 1.0)?;
            fhf_loss_t(&t.vae, &enc, p, None, &t.deg, &t.clean, &hf)
        })?,
    ));
    let fake = |p: &ParamSet| -> Result<Tensor> {
        let dec = effective_weights(p, p, &dt, gamma, 1.0)?;
        t.vae.decode_t(&dec, &mu)
    };
    out.push(("phf_gen_loss", gradcheck(&params, &["lora.dec."], eps, |p| phf_gen_loss_t(&disc, p, &fake(p)?, &hf))?));
    let fixed_fake = fake(&params)?;
    out.push(("disc_loss", gradcheck(&params, &["disc."], eps, |p| disc_loss_t(&disc, p, &t.clean, &fixed_fake, &hf))?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-3;

    #[test]
    fn quadratic_matches() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap());
        let r = gradcheck(&p, &["w"], EPS, |p| Ok(p.get("w")?.sqr()?.sum_all()?)).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8);
        let f32p = p.to_dtype(DType::F32).unwrap();
        assert!(gradcheck(&f32p, &["w"], EPS, |p| Ok(p.get("w")?.sum_all()?)).is_err());
    }

    #[test]
    fn every_loss_matches_finite_differences() {
        let suite = loss_suite(EPS).unwrap();
        assert_eq!(suite.len(), 5);
        for (name, r) in suite {
            assert!(r.checked > 0 && r.checked <= 1000, "{name}: {}", r.checked);
            assert!(r.max_rel_error < TOL, "{name}: {r:?}");
        }
    }

    #[test]
    fn losses_do_not_reach_frozen_parameters() {
        let t = toy().unwrap();
        let (et, dt, ad) = adapters(&t).unwrap();
        let disc = Discriminator::new(&t.model.disc).unwrap();
        let mut params = t.params.clone();
        params.extend(&ad);
        params.extend(&disc_params(&disc).unwrap());
        let hf = HFOperatorConfig::default();
        let gamma = t.model.lora.gamma;
        let unreached = |g: &BTreeMap<String, Option<Tensor>>, prefix: &str| {
            g.iter().filter(|(k, _)| k.starts_with(prefix)).all(|(_, v)| v.is_none())
        };
        let enc_frozen = params.frozen_copy().unwrap();
        // fhf: only the encoder adapter is live
        let g = analytic_grads(&params, &["vae.", "restorer.", "lora.dec.", "disc."], |p| {
            let enc = effective_weights(&enc_frozen, p, &et, gamma, 1.0)?;
            fhf_loss_t(&t.vae, &enc, &enc_frozen, None, &t.deg, &t.clean, &hf)
        })
        .unwrap();
        assert!(g.values().all(Option::is_none));
        // disc loss: the fake path is detached, so the decoder adapter is unreached
        let g = analytic_grads(&params, &["lora.dec.", "disc."], |p| {
            let dec = effective_weights(&enc_frozen, p, &dt, gamma, 1.0)?;
            let (mu, _) = t.vae.encode_t(&enc_frozen, &t.deg)?;
            let fake = t.vae.decode_t(&dec, &mu)?;
            disc_loss_t(&disc, p, &t.clean, &fake, &hf)
        })
        .unwrap();
        assert!(unreached(&g, "lora.dec."));
        assert!(g.iter().filter(|(k, _)| k.starts_with("disc.")).all(|(_, v)| v.is_some()));
        // the same loss without the detach does reach the decoder adapter
        let g = analytic_grads(&params, &["lora.dec."], |p| {
            let dec = effective_weights(&enc_frozen, p, &dt, gamma, 1.0)?;
            let (mu, _) = t.vae.encode_t(&enc_frozen, &t.deg)?;
            let fake = t.vae.decode_t(&dec, &mu)?;
            let lr = disc.forward_t(p, &crate::freq::high_pass_nchw(&t.clean, &hf)?)?;
            let lf = disc.forward_t(p, &crate::freq::high_pass_nchw(&fake, &hf)?)?;
            crate::hflora::disc_loss_from_logits(&lr, &lf)
        })
        .unwrap();
        assert!(g.values().all(Option::is_some));
    }
}

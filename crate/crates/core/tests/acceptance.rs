//! Acceptance suite: one PASS/FAIL line per criterion P1–P11.
//!
//! Exits 0 after reporting unless `LH_ACCEPTANCE_STRICT=1`, in which case any FAIL
//! exits 1. Desk training (≈10 min on one core) runs once and is shared.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Device;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use latent_harmony::checkpoint::CheckpointBundle;
use latent_harmony::config::{ModelConfig, RunConfig};
use latent_harmony::degrade::{build_dataset, procedural_image, Dataset, DatasetManifest, PerturbConfig};
use latent_harmony::freq::{cdcs, dct2, hf_energy_proportion, SpectralBands};
use latent_harmony::gradcheck::loss_suite;
use latent_harmony::hflora::{alternating_train, LoraTrainConfig};
use latent_harmony::lhvae::{kl_loss, recon_l1, train_stage1, GaussianPosterior, Vae};
use latent_harmony::pipeline::{param_report, psnr, spearman, ssim, sweep_alpha, AdapterScales, Pipeline};
use latent_harmony::restorer::train_restorer;
use latent_harmony::{HwcTensor, ImageTensor, Result};

type Verdict = Result<(bool, String)>;

struct Desk {
    cfg: RunConfig,
    hold: Dataset,
    train: Dataset,
    full: CheckpointBundle,
    no_inv: CheckpointBundle,
    no_eqv: CheckpointBundle,
    restored: CheckpointBundle,
    lora: CheckpointBundle,
}

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    eprintln!("  [{label}: {:.0}s]", t.elapsed().as_secs_f64());
    Ok(out)
}

impl Desk {
    fn build() -> Result<Self> {
        let cfg = RunConfig::desk().resolved();
        cfg.validate()?;
        let ds = build_dataset(&cfg.dataset)?;
        let (train, hold) = ds.split(cfg.pipeline.holdout)?;
        let kinds = cfg.dataset.kinds.clone();
        let full = timed("stage-1", || Ok(train_stage1(&cfg.stage1, &cfg.model, &train)?.0))?;
        let mut a = cfg.stage1.clone();
        a.weights.lambda_inv = 0.0;
        a.perturb = PerturbConfig::identity(a.steps, kinds);
        let no_inv = timed("stage-1 without L_inv", || Ok(train_stage1(&a, &cfg.model, &train)?.0))?;
        let mut e = cfg.stage1.clone();
        e.weights.lambda_eqv = 0.0;
        let no_eqv = timed("stage-1 without L_eqv", || Ok(train_stage1(&e, &cfg.model, &train)?.0))?;
        let restored = timed("restorer", || Ok(train_restorer(&cfg.restorer, &train, &full)?.0))?;
        let lora = timed("adapters", || Ok(alternating_train(&cfg.lora, &train, &restored)?.0))?;
        Ok(Self { cfg, hold, train, full, no_inv, no_eqv, restored, lora })
    }

    fn held_out_pairs(&self) -> Vec<(&ImageTensor, &ImageTensor)> {
        self.hold.all_pairs().into_iter().map(|(_, d, c)| (d, c)).collect()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn lcg_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut s = seed;
    let data = (0..h * w * 3)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    HwcTensor::new(h, w, 3, data).unwrap()
}

fn kl_monte_carlo(mu: f64, logvar: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (0.5 * logvar).exp();
    let sum: f64 = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu + sd * e;
            -0.5 * e * e - 0.5 * logvar + 0.5 * z * z
        })
        .sum();
    sum / n as f64
}

fn p1() -> Verdict {
    let post = |m: f32, lv: f32| GaussianPosterior::new(HwcTensor::filled(1, 1, 1, m), HwcTensor::filled(1, 1, 1, lv));
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    check("kl(0,0)=0", kl_loss(&post(0.0, 0.0)?)? == 0.0);
    check("kl(1,0)=0.5", close(kl_loss(&post(1.0, 0.0)?)?, 0.5, 1e-12));
    let lv = 4f32.ln();
    let kl = kl_loss(&post(0.0, lv)?)?;
    let mc = kl_monte_carlo(0.0, lv as f64, 1_000_000, 11);
    check("kl vs Monte-Carlo", close(kl, mc, 1e-2));

    let a = HwcTensor::filled(8, 8, 3, 0.2);
    let b = HwcTensor::filled(8, 8, 3, 0.6);
    check("l1 identical", recon_l1(&a, &a)? == 0.0);
    check("l1 0.2 vs 0.6", close(recon_l1(&a, &b)?, 0.4, 1e-7));
    let (x, y) = (lcg_image(9, 7, 1), lcg_image(9, 7, 2));
    let l1_oracle = x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / x.data().len() as f64;
    check("l1 loop oracle", close(recon_l1(&x, &y)?, l1_oracle, 1e-7));

    check("psnr identical", psnr(&x, &x)? == f64::INFINITY);
    let off = HwcTensor::filled(8, 8, 3, 0.5);
    let off2 = HwcTensor::filled(8, 8, 3, 0.6);
    check("psnr offset 0.1", close(psnr(&off, &off2)?, 20.0, 1e-4));
    let mse = x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / x.data().len() as f64;
    check("psnr formula oracle", close(psnr(&x, &y)?, 10.0 * (1.0 / mse).log10(), 1e-6));

    let n = lcg_image(32, 32, 3);
    check("ssim identical", close(ssim(&n, &n)?, 1.0, 1e-12));
    check("ssim inverted < 0", ssim(&n, &n.map(|v| 1.0 - v))? < 0.0);
    // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
    // use_sample_covariance=False, data_range=1) on the channel-mean gray images
    let reference = [
        0.7832752789005781,
        0.8066551427274247,
        0.8514848075038949,
        0.8193747241935155,
        0.79955988817645,
        0.8067388671676453,
        0.8179493443740804,
        0.8490792625417987,
        0.81772360429288,
        0.8367334861647151,
    ];
    let mut worst: f64 = 0.0;
    for (k, want) in reference.iter().enumerate() {
        let a = lcg_image(24, 24, 2 * k as u64);
        let noise = lcg_image(24, 24, 2 * k as u64 + 1);
        let b = HwcTensor::new(24, 24, 3, a.data().iter().zip(noise.data()).map(|(p, q)| 0.6 * p + 0.3 * q + 0.05).collect())?;
        worst = worst.max((ssim(&a, &b)? - want).abs());
    }
    check("ssim reference", worst < 1e-4);
    let detail = format!("kl={kl:.5} mc={mc:.5}, ssim ref max err {worst:.1e}");
    Ok((fails.is_empty(), if fails.is_empty() { detail } else { format!("{detail}; failed: {}", fails.join(", ")) }))
}

fn p2() -> Verdict {
    let suite = loss_suite(1e-5)?;
    let ok = suite.iter().all(|(_, r)| r.max_rel_error < 1e-3 && r.checked <= 1000);
    let detail = suite
        .iter()
        .map(|(n, r)| format!("{n} {:.1e} ({} entries)", r.max_rel_error, r.checked))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, detail))
}

fn p3(d: &Desk) -> Verdict {
    let vae_before = d.full.namespace_hash("vae.")?;
    let vae_after_restorer = d.restored.namespace_hash("vae.")?;
    let (after, _) = alternating_train(&with_steps(&d.cfg.lora, 200), &d.train, &d.restored)?;
    let ok_res = vae_before == vae_after_restorer;
    let ok_vae = after.namespace_hash("vae.")? == vae_before;
    let ok_theta = after.namespace_hash("restorer.")? == d.restored.namespace_hash("restorer.")?;
    let moved = after.namespace_hash("lora.")? != alternating_train(&with_steps(&d.cfg.lora, 0), &d.train, &d.restored)?.0.namespace_hash("lora.")?;
    Ok((
        ok_res && ok_vae && ok_theta && moved,
        format!("restorer run keeps φ*,ψ*: {ok_res}; 200 LoRA steps keep φ*,ψ*: {ok_vae}, θ: {ok_theta}; adapters moved: {moved}"),
    ))
}

fn with_steps(c: &LoraTrainConfig, steps: usize) -> LoraTrainConfig {
    LoraTrainConfig { steps, ..c.clone() }
}

fn p4(d: &Desk) -> Verdict {
    let (fresh, _) = alternating_train(&with_steps(&d.cfg.lora, 0), &d.train, &d.restored)?;
    let p = Pipeline::from_bundle(&fresh)?;
    if !p.has_adapters() {
        return Ok((false, "fresh bundle carries no adapters".into()));
    }
    let mut identical = 0;
    let images: Vec<&ImageTensor> = d.hold.samples.iter().take(8).map(|s| &s.clean).collect();
    for img in &images {
        let base = p.infer(img, 0.0)?;
        if [0.25, 0.5, 0.75, 1.0].iter().all(|&a| p.infer(img, a).map(|o| o.data() == base.data()).unwrap_or(false)) {
            identical += 1;
        }
    }
    Ok((identical == images.len(), format!("{identical}/{} images byte-identical across the α grid", images.len())))
}

fn latent_stats(b: &CheckpointBundle, hold: &Dataset) -> Result<(f64, f64)> {
    let vae = Vae::new(b.model.vae.clone())?;
    let p = b.params.with_prefix("vae.");
    let mut map: BTreeMap<String, Vec<HwcTensor>> = BTreeMap::new();
    let mut hf = 0.0;
    for s in &hold.samples {
        for (k, deg) in &s.degraded {
            map.entry(k.as_str().to_string()).or_default().push(vae.encode(&p, deg)?.mu);
        }
        hf += hf_energy_proportion(&vae.encode(&p, &s.clean)?.mu, &SpectralBands::default())?;
    }
    Ok((cdcs(&map, None)?.overall, hf / hold.len() as f64))
}

fn p5(d: &Desk) -> Verdict {
    let (c_full, hf_full) = latent_stats(&d.full, &d.hold)?;
    let (c_noinv, _) = latent_stats(&d.no_inv, &d.hold)?;
    let (_, hf_noeqv) = latent_stats(&d.no_eqv, &d.hold)?;
    let a = c_full >= c_noinv + 0.05;
    let b = hf_full <= hf_noeqv;
    Ok((
        a && b,
        format!(
            "(a) CDCS full {c_full:.4} vs no-inv {c_noinv:.4} [{}]; (b) latent HF full {hf_full:.4} vs no-eqv {hf_noeqv:.4} [{}]",
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" }
        ),
    ))
}

fn p6(d: &Desk) -> Verdict {
    let p = Pipeline::from_bundle(&d.restored)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in d.hold.kinds() {
        let (mut base, mut rest, mut n) = (0.0, 0.0, 0.0);
        for (deg, clean) in d.hold.pairs(kind) {
            base += psnr(deg, clean)?;
            rest += psnr(&p.infer(deg, d.cfg.pipeline.alpha)?, clean)?;
            n += 1.0;
        }
        ok &= rest > base;
        parts.push(format!("{} {:.2}→{:.2} dB", kind.as_str(), base / n, rest / n));
    }
    Ok((ok, parts.join(", ")))
}

fn p7(d: &Desk) -> Verdict {
    let p = Pipeline::from_bundle(&d.lora)?;
    let pairs = d.held_out_pairs();
    let t = sweep_alpha(&p, &pairs, &[0.0, 0.25, 0.5, 0.75, 1.0])?;
    let rp = spearman(&t.alphas(), &t.column(|m| m.psnr));
    let rl = spearman(&t.alphas(), &t.column(|m| m.lpips_proxy));
    let ok = rp.is_some_and(|r| r > 0.0) && rl.is_some_and(|r| r > 0.0);
    let fmt = |v: Vec<f64>, prec: usize| v.iter().map(|x| format!("{x:.prec$}")).collect::<Vec<_>>().join("/");
    Ok((
        ok,
        format!(
            "ρ(α,PSNR)={} ρ(α,lpips)={}; PSNR {} lpips {}",
            rp.map_or("undef".into(), |r| format!("{r:.2}")),
            rl.map_or("undef".into(), |r| format!("{r:.2}")),
            fmt(t.column(|m| m.psnr), 2),
            fmt(t.column(|m| m.lpips_proxy), 4)
        ),
    ))
}

fn ablation(bundle: &CheckpointBundle, pairs: &[(&ImageTensor, &ImageTensor)], alpha: f64) -> Result<(bool, bool, String)> {
    let p = Pipeline::from_bundle(bundle)?;
    let full = p.evaluate(pairs, AdapterScales::blend(alpha)?)?;
    let no_fhf = p.evaluate(pairs, AdapterScales { enc: 0.0, dec: 1.0 - alpha })?;
    let no_phf = p.evaluate(pairs, AdapterScales { enc: alpha, dec: 0.0 })?;
    let fhf = no_fhf.psnr < full.psnr;
    let phf = no_phf.lpips_proxy > full.lpips_proxy;
    Ok((
        fhf,
        phf,
        format!(
            "α={alpha}: PSNR full {:.3} vs no-FHF {:.3} [{}]; lpips full {:.4} vs no-PHF {:.4} [{}]",
            full.psnr,
            no_fhf.psnr,
            if fhf { "ok" } else { "fail" },
            full.lpips_proxy,
            no_phf.lpips_proxy,
            if phf { "ok" } else { "fail" }
        ),
    ))
}

fn p8(d: &Desk) -> Verdict {
    let (a, b, detail) = ablation(&d.lora, &d.held_out_pairs(), d.cfg.pipeline.alpha)?;
    Ok((a && b, detail))
}

fn brute_dct(x: &[f64], n: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let s = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x[i * n + j]
                        * ((2 * i + 1) as f64 * u as f64 * pi / (2 * n) as f64).cos()
                        * ((2 * j + 1) as f64 * v as f64 * pi / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = s(u) * s(v) * acc;
        }
    }
    out
}

fn p9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dct_err: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = dct2(&x, 8, 8)?;
        dct_err = dct_err.max(fast.iter().zip(brute_dct(&x, 8)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let v = |a: [f32; 3]| HwcTensor::new(1, 1, 3, a.to_vec()).unwrap();
    let set = |items: &[(&str, [f32; 3])]| -> BTreeMap<String, Vec<HwcTensor>> {
        items.iter().map(|(k, a)| (k.to_string(), vec![v(*a)])).collect()
    };
    let cases = [
        (set(&[("a", [1.0, 0.0, 0.0]), ("b", [0.0, 1.0, 0.0])]), 0.0),
        (set(&[("a", [1.0, 2.0, 2.0]), ("b", [2.0, 1.0, 2.0])]), 8.0 / 9.0),
        (set(&[("a", [3.0, 4.0, 0.0]), ("b", [0.0, 4.0, 3.0])]), 16.0 / 25.0),
        (set(&[("a", [1.0, 2.0, 2.0]), ("b", [2.0, 1.0, 2.0]), ("c", [2.0, 2.0, 1.0])]), 8.0 / 9.0),
        (set(&[("a", [1.0, 1.0, 0.0]), ("b", [1.0, 0.0, 0.0])]), 1.0 / 2f64.sqrt()),
    ];
    let mut cdcs_err: f64 = 0.0;
    for (latents, want) in &cases {
        cdcs_err = cdcs_err.max((cdcs(latents, None)?.overall - want).abs());
    }
    let ok = dct_err < 1e-8 && cdcs_err <= 1e-15;
    Ok((ok, format!("dct2 vs O(N⁴) max err {dct_err:.1e}; cdcs vs hand cosines max err {cdcs_err:.1e}")))
}

fn p10(d: &Desk) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    let small = {
        let mut m = DatasetManifest::procedural(24, 32, d.cfg.dataset.kinds.clone(), 3);
        m.severity = d.cfg.dataset.severity;
        m
    };
    let ds1 = build_dataset(&small)?;
    let ds2 = build_dataset(&small)?;
    let same_ds = ds1 == ds2;
    ok &= same_ds;
    parts.push(format!("dataset {}", if same_ds { "same" } else { "DIFFERS" }));

    let mut s1 = d.cfg.stage1.clone();
    s1.steps = 20;
    s1.perturb = PerturbConfig::for_steps(20, small.kinds.clone());
    let run_s1 = || train_stage1(&s1, &d.cfg.model, &ds1).map(|r| r.0);
    let (a, b) = (run_s1()?, run_s1()?);
    let mut rc = d.cfg.restorer.clone();
    rc.steps = 20;
    let (ra, rb) = (train_restorer(&rc, &ds1, &a)?.0, train_restorer(&rc, &ds1, &a)?.0);
    let lc = with_steps(&d.cfg.lora, 20);
    let (la, lb) = (alternating_train(&lc, &ds1, &ra)?.0, alternating_train(&lc, &ds1, &ra)?.0);
    for (name, x, y) in [("stage-1", &a, &b), ("restorer", &ra, &rb), ("adapters", &la, &lb)] {
        let same = x.digest()? == y.digest()?;
        ok &= same;
        parts.push(format!("{name} {}", if same { "same" } else { "DIFFERS" }));
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("bundle.lh");
    d.lora.save(&path)?;
    let first = std::fs::read(&path)?;
    CheckpointBundle::load(&path)?.save(&path)?;
    let idempotent = first == std::fs::read(&path)? && first == d.lora.to_bytes()?;
    ok &= idempotent;
    parts.push(format!("save→load→save {}", if idempotent { "byte-identical" } else { "DIFFERS" }));

    let p = Pipeline::from_bundle(&d.lora)?;
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let img = procedural_image(256, 900 + seed);
        let whole = p.infer(&img, d.cfg.pipeline.alpha)?;
        let tiled = p.tile_infer(&img, d.cfg.pipeline.alpha, 128, 32)?;
        worst = worst.max(recon_l1(&whole, &tiled)?);
    }
    ok &= worst < 0.01;
    parts.push(format!("tile vs whole mean |Δ| ≤ {worst:.2e}"));
    Ok((ok, parts.join(", ")))
}

fn p11() -> Verdict {
    let r = param_report(&ModelConfig::reference())?;
    let with_adapters = r.budget_total + r.lora_encoder + r.lora_decoder;
    Ok((
        r.budget_total <= 1_200_000,
        format!(
            "VAE {} + projection {} + restorer {} = {} (adapters +{} → {}; discriminator {} is training-only)",
            r.encoder + r.decoder,
            r.projection,
            r.restorer,
            r.budget_total,
            r.lora_encoder + r.lora_decoder,
            with_adapters,
            r.discriminator
        ),
    ))
}

fn main() {
    let _ = Device::Cpu;
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |id: &'static str, v: Verdict| {
        match &v {
            Ok((true, d)) => println!("{id} PASS  {d}"),
            Ok((false, d)) => println!("{id} FAIL  {d}"),
            Err(e) => println!("{id} FAIL  error: {e}"),
        }
        verdicts.push((id, v));
    };
    report("P1", p1());
    report("P2", p2());
    report("P9", p9());
    report("P11", p11());
    match timed("desk training", Desk::build) {
        Ok(d) => {
            report("P3", p3(&d));
            report("P4", p4(&d));
            report("P5", p5(&d));
            report("P6", p6(&d));
            report("P7", p7(&d));
            report("P8", p8(&d));
            report("P10", p10(&d));
            // informational: the fidelity adapter trained through the restorer
            let mut lc = d.cfg.lora.clone();
            lc.restorer_in_fhf = true;
            if let Ok((b, _)) = alternating_train(&lc, &d.train, &d.restored) {
                if let Ok((_, _, detail)) = ablation(&b, &d.held_out_pairs(), d.cfg.pipeline.alpha) {
                    println!("note  fidelity adapter trained through R_θ (not scored): {detail}");
                }
            }
        }
        Err(e) => {
            for id in ["P3", "P4", "P5", "P6", "P7", "P8", "P10"] {
                report(id, Err(latent_harmony::Error::Config(format!("desk training failed: {e}"))));
            }
        }
    }
    let failed: Vec<&str> = verdicts.iter().filter(|(_, v)| !matches!(v, Ok((true, _)))).map(|(id, _)| *id).collect();
    println!("acceptance: {} passed, {} failed {:?}", verdicts.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() && std::env::var("LH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

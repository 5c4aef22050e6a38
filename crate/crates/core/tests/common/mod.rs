//! Acceptance suites, shared by the `acceptance` target and the per-suite tests.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use dpvger::bnn::{
    analytic_kl, free_energy_grad, sample_noise, vcl_prior_update, KlWeight, MeanFieldPosterior, PosteriorInit,
    PriorSpec,
};
use dpvger::data::LabeledSet;
use dpvger::gan::{discriminator_grad, gan_losses, generator_grad, train_class_gan, DpContext, GanConfig};
use dpvger::harness::{run_prepared, ExperimentConfig, MethodKind, PreparedData, RunOutput};
use dpvger::nn::finite_diff::relative_error;
use dpvger::nn::{
    finite_diff_grad, mlp_backward, mlp_forward, mlp_predict, softmax_xent, Activation, Matrix, MlpParams,
    PerExampleGrads, RngState,
};
use dpvger::privacy::mechanism::example_norm;
use dpvger::privacy::{
    calibrate_sigma, clip, compose, default_orders, epsilon_for, privatize, rdp_subsampled_gaussian, step_curve,
    ClipMode, DomainTag, DpConfig, PrivacyLedger,
};
use dpvger::tasks::RawDataset;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Partials below this magnitude are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-4;

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, GRADIENT_FLOOR))
        .fold(0.0, f64::max)
}

fn random_widths(rng: &mut RngState, input: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    for _ in 0..1 + rng.below(2) {
        w.push(2 + rng.below(15));
    }
    w.push(output);
    w
}

// ---------------------------------------------------------------- gradients

/// He init with random biases, so no pre-activation sits exactly on a ReLU kink.
fn random_net(widths: &[usize], output: Activation, rng: &mut RngState) -> MlpParams {
    let mut p = MlpParams::he_init(widths, output, rng).unwrap();
    for layer in p.layers_mut() {
        let b = rng.gaussian(layer.b.rows(), layer.b.cols());
        layer.b = b.map(|v| 0.1 * v);
    }
    p
}

pub const GRADIENT_NETS: usize = 24;
pub const GRADIENT_TOL: f64 = 1e-5;

/// Every exposed loss against central differences on randomized nets of
/// width ≤ 16.
pub fn gradient_suite() -> Outcome {
    let mut rng = RngState::new(0x6ad);
    let h = 1e-5;
    let mut worst = [0.0f64; 5];
    for net in 0..GRADIENT_NETS {
        let input = 2 + rng.below(10);
        let batch = 2 + rng.below(6);

        let widths = random_widths(&mut rng, input, 10);
        let p = random_net(&widths, Activation::Identity, &mut rng);
        let x = rng.gaussian(batch, input);
        let y: Vec<usize> = (0..batch).map(|_| rng.below(10)).collect();
        let loss = |q: &MlpParams| softmax_xent(&mlp_forward(q, &x).unwrap().0, &y).unwrap().0;
        let (logits, cache) = mlp_forward(&p, &x).unwrap();
        let (_, dl) = softmax_xent(&logits, &y).unwrap();
        let g = mlp_backward(&p, &cache, &dl).unwrap().to_flat();
        let fd = finite_diff_grad(|w| loss(&p.with_flat(w).unwrap()), &p.to_flat(), h);
        worst[0] = worst[0].max(max_rel(&g, &fd));

        let latent = 2 + rng.below(6);
        let image = 2 + rng.below(14);
        let gw = random_widths(&mut rng, latent, image);
        let gen = random_net(&gw, Activation::Sigmoid, &mut rng);
        let dw = random_widths(&mut rng, image, 1);
        let disc = random_net(&dw, Activation::Identity, &mut rng);
        let z = rng.gaussian(batch, latent);
        let real = rng.gaussian(batch + 1, image).map(|v| 0.5 + 0.3 * v);
        let fake = mlp_predict(&gen, &z).unwrap();
        let (_, gd) = discriminator_grad(&disc, &real, &fake, None).unwrap();
        let fd = finite_diff_grad(
            |w| discriminator_grad(&disc.with_flat(w).unwrap(), &real, &fake, None).unwrap().0,
            &disc.to_flat(),
            h,
        );
        worst[1] = worst[1].max(max_rel(&gd, &fd));

        let diversity = if net % 2 == 0 { 0.0 } else { 0.5 + 2.0 * rng.uniform() };
        let (_, gg) = generator_grad(&gen, &disc, &z, diversity).unwrap();
        let fd = finite_diff_grad(
            |w| generator_grad(&gen.with_flat(w).unwrap(), &disc, &z, diversity).unwrap().0,
            &gen.to_flat(),
            h,
        );
        worst[2] = worst[2].max(max_rel(&gg, &fd));

        let real_logits = rng.gaussian(batch, 1).map(|v| 3.0 * v);
        let fake_logits = rng.gaussian(batch + 2, 1).map(|v| 3.0 * v);
        let l = gan_losses(&real_logits, &fake_logits).unwrap();
        let fr = finite_diff_grad(
            |w| gan_losses(&Matrix::from_vec(batch, 1, w.to_vec()).unwrap(), &fake_logits).unwrap().d_loss,
            real_logits.as_slice(),
            h,
        );
        let ff = finite_diff_grad(
            |w| gan_losses(&real_logits, &Matrix::from_vec(batch + 2, 1, w.to_vec()).unwrap()).unwrap().d_loss,
            fake_logits.as_slice(),
            h,
        );
        let fg = finite_diff_grad(
            |w| gan_losses(&real_logits, &Matrix::from_vec(batch + 2, 1, w.to_vec()).unwrap()).unwrap().g_loss,
            fake_logits.as_slice(),
            h,
        );
        worst[3] = worst[3]
            .max(max_rel(l.d_real_grad.as_slice(), &fr))
            .max(max_rel(l.d_fake_grad.as_slice(), &ff))
            .max(max_rel(l.g_fake_grad.as_slice(), &fg));

        let bwidths = random_widths(&mut rng, input, 10);
        let mut post = MeanFieldPosterior::init(&bwidths, PosteriorInit::default(), &mut rng).unwrap();
        let mut flat = post.to_flat();
        let n = flat.len() / 2;
        for v in &mut flat[n..] {
            *v = -3.0 + 2.0 * rng.uniform();
        }
        post.assign_flat(&flat).unwrap();
        let prior = if net % 3 == 0 { PriorSpec::standard() } else { vcl_prior_update(&post) };
        let prior = match prior {
            PriorSpec::PerWeight { mean, std } => {
                let jitter = |m: &MlpParams, s: f64, rng: &mut RngState| {
                    let f: Vec<f64> = m.to_flat().iter().map(|v| v + s * rng.normal()).collect();
                    m.with_flat(&f).unwrap()
                };
                let mean = jitter(&mean, 0.3, &mut rng);
                let std_flat: Vec<f64> = std.to_flat().iter().map(|v| v * (1.0 + rng.uniform())).collect();
                PriorSpec::PerWeight {
                    mean,
                    std: std.with_flat(&std_flat).unwrap(),
                }
            }
            other => other,
        };
        let batch_set = LabeledSet::new(x.clone(), y.clone()).unwrap();
        let weight = KlWeight {
            dataset_size: 50 + rng.below(500),
            tasks_seen: 1 + rng.below(5),
        };
        let noise: Vec<Vec<f64>> = (0..1 + rng.below(3)).map(|_| sample_noise(&post, &mut rng)).collect();
        let (_, gf) = free_energy_grad(&post, &prior, &batch_set, weight, &noise).unwrap();
        let fd = finite_diff_grad(
            |w| {
                let mut q = post.clone();
                q.assign_flat(w).unwrap();
                free_energy_grad(&q, &prior, &batch_set, weight, &noise).unwrap().0.total
            },
            &post.to_flat(),
            h,
        );
        worst[4] = worst[4].max(max_rel(&gf, &fd));
    }
    let names = ["softmax xent", "GAN d_loss", "GAN g_loss", "GAN logits", "free energy"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|w| *w <= GRADIENT_TOL), || {
        format!("max relative error above {GRADIENT_TOL}: {detail}")
    })?;
    Ok(format!("{GRADIENT_NETS} nets; worst relative error: {detail}"))
}

// ---------------------------------------------------------------------- KL

fn random_posterior(rng: &mut RngState, widths: &[usize]) -> MeanFieldPosterior {
    let mut post = MeanFieldPosterior::init(widths, PosteriorInit::default(), rng).unwrap();
    let flat: Vec<f64> = (0..post.to_flat().len()).map(|_| 2.0 * rng.normal()).collect();
    post.assign_flat(&flat).unwrap();
    post
}

fn random_prior(rng: &mut RngState, post: &MeanFieldPosterior) -> PriorSpec {
    if rng.below(2) == 0 {
        PriorSpec::Isotropic {
            mean: rng.normal(),
            std: 0.1 + 2.0 * rng.uniform(),
        }
    } else {
        let mean: Vec<f64> = post.mu().to_flat().iter().map(|_| rng.normal()).collect();
        let std: Vec<f64> = post.mu().to_flat().iter().map(|_| 0.1 + 2.0 * rng.uniform()).collect();
        PriorSpec::PerWeight {
            mean: post.mu().with_flat(&mean).unwrap(),
            std: post.mu().with_flat(&std).unwrap(),
        }
    }
}

fn prior_flat(prior: &PriorSpec, n: usize) -> (Vec<f64>, Vec<f64>) {
    match prior {
        PriorSpec::Isotropic { mean, std } => (vec![*mean; n], vec![*std; n]),
        PriorSpec::PerWeight { mean, std } => (mean.to_flat(), std.to_flat()),
    }
}

fn log_normal(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn kl_suite() -> Outcome {
    let mut rng = RngState::new(0x1c1);
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let (input, output) = (1 + rng.below(4), 1 + rng.below(3));
        let widths = random_widths(&mut rng, input, output);
        let post = random_posterior(&mut rng, &widths);
        let prior = random_prior(&mut rng, &post);
        let kl = analytic_kl(&post, &prior).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("negative KL {kl}"))?;
        min_kl = min_kl.min(kl);
    }

    let samples = 100_000;
    let mut worst_z = 0.0f64;
    for _ in 0..5 {
        let post = random_posterior(&mut rng, &[2, 2, 1]);
        let prior = random_prior(&mut rng, &post);
        let n = post.num_weights();
        let mu = post.mu().to_flat();
        let sd = post.sigma().to_flat();
        let (m0, s0) = prior_flat(&prior, n);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let mut d = 0.0;
            for i in 0..n {
                let w = mu[i] + sd[i] * rng.normal();
                d += log_normal(w, mu[i], sd[i]) - log_normal(w, m0[i], s0[i]);
            }
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        let kl = analytic_kl(&post, &prior).unwrap();
        let z = (mean - kl).abs() / se;
        ensure(z <= 3.0, || format!("Monte Carlo KL {mean} vs analytic {kl}: {z:.2} standard errors"))?;
        worst_z = worst_z.max(z);
    }

    for _ in 0..100 {
        let post = random_posterior(&mut rng, &[3, 4, 2]);
        let kl = analytic_kl(&post, &vcl_prior_update(&post)).unwrap();
        ensure(kl == 0.0, || format!("KL(q, q) = {kl:e}"))?;
    }
    Ok(format!(
        "10^4 posteriors, min KL {min_kl:.3e}; MC agreement within {worst_z:.2} SE; KL(q,q) = 0 exactly"
    ))
}

// -------------------------------------------------------------- accountant

/// `ln ∫ N(x; 0, σ²) · (1 − q + q·e^{(2x−1)/(2σ²)})^α dx` by the trapezoid
/// rule, in log space.
fn oracle_log_moment(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    let s2 = sigma * sigma;
    let (lo, hi) = (-14.0 * sigma - 1.0, a + 14.0 * sigma + 1.0);
    let h = sigma / 64.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let log_base = |x: f64| -x * x / (2.0 * s2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    // (1 − q) + q·r with r = e^{(2x−1)/(2σ²)}, in log space
    let log_mix = |x: f64| {
        let lr = (2.0 * x - 1.0) / (2.0 * s2) + q.ln();
        let l1 = (-q).ln_1p();
        let (hi, lo) = if lr > l1 { (lr, l1) } else { (l1, lr) };
        hi + (lo - hi).exp().ln_1p()
    };
    let logs: Vec<f64> = (0..=steps)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5f64.ln() } else { 0.0 };
            w + log_base(x) + a * log_mix(x)
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_total = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + h.ln();
    if log_total > 0.5 {
        return log_total;
    }
    // small moments: integrate (mix^α − 1) directly so ln(1 + I) keeps its precision
    let mut sum = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let r = ((2.0 * x - 1.0) / (2.0 * s2)).exp();
        sum += w * log_base(x).exp() * (a * (q * (r - 1.0)).ln_1p()).exp_m1();
    }
    (sum * h).ln_1p()
}

pub fn oracle_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    oracle_log_moment(q, sigma, alpha) / (alpha as f64 - 1.0)
}

pub const ACCOUNTANT_QS: [f64; 3] = [0.001, 0.01, 0.1];
pub const ACCOUNTANT_SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const ACCOUNTANT_ALPHAS: [u32; 6] = [2, 4, 8, 16, 32, 64];

pub fn accountant_suite() -> Outcome {
    let err = |e: dpvger::Error| e.to_string();
    for &sigma in &ACCOUNTANT_SIGMAS {
        for &alpha in &ACCOUNTANT_ALPHAS {
            let v = rdp_subsampled_gaussian(1.0, sigma, alpha).map_err(err)?;
            let expect = alpha as f64 / (2.0 * sigma * sigma);
            ensure((v - expect).abs() <= 1e-12, || format!("q=1 RDP {v} vs {expect}"))?;
        }
    }

    let mut worst = 0.0f64;
    for &q in &ACCOUNTANT_QS {
        for &sigma in &ACCOUNTANT_SIGMAS {
            for &alpha in &ACCOUNTANT_ALPHAS {
                let v = rdp_subsampled_gaussian(q, sigma, alpha).map_err(err)?;
                let o = oracle_rdp(q, sigma, alpha);
                let rel = (v - o).abs() / o.abs();
                ensure(rel <= 1e-6, || format!("q={q} σ={sigma} α={alpha}: {v} vs oracle {o} ({rel:.2e})"))?;
                worst = worst.max(rel);
            }
        }
    }

    let orders = default_orders();
    let mut ledger = PrivacyLedger::new(DomainTag { task: 0, class: 0 });
    ledger.append(0.01, 1.1, 300).map_err(err)?;
    ledger.append(0.05, 2.3, 17).map_err(err)?;
    let composed = compose(&ledger, &orders).map_err(err)?;
    let a = step_curve(0.01, 1.1, &orders).map_err(err)?.scaled(300);
    let b = step_curve(0.05, 2.3, &orders).map_err(err)?.scaled(17);
    let summed = a.add(&b).map_err(err)?;
    ensure(composed == summed, || "composition is not additive".into())?;
    for (i, &alpha) in orders.iter().enumerate() {
        let one = rdp_subsampled_gaussian(0.01, 1.1, alpha).map_err(err)?;
        ensure(a.values()[i] == 300.0 * one, || format!("scaling at α={alpha} not exact"))?;
    }

    let mut trips = 0;
    for &(target, delta, q, steps) in &[
        (1.0, 1e-8, 0.064, 450u64),
        (2.0, 1e-8, 0.064, 450),
        (5.0, 1e-4, 0.064, 450),
        (0.5, 1e-5, 0.01, 10_000),
        (8.0, 1e-6, 0.2, 50),
    ] {
        let sigma = calibrate_sigma(target, delta, q, steps).map_err(err)?;
        let mut l = PrivacyLedger::new(DomainTag { task: 0, class: 1 });
        l.append(q, sigma, steps).map_err(err)?;
        let (eps, _) = dpvger::privacy::to_eps_delta(&compose(&l, &orders).map_err(err)?, delta).map_err(err)?;
        ensure(eps <= target && eps >= 0.99 * target, || {
            format!("round trip for target {target}: σ={sigma} gives ε={eps}")
        })?;
        trips += 1;
    }

    for (qi, &q) in ACCOUNTANT_QS.iter().enumerate() {
        for (si, &sigma) in ACCOUNTANT_SIGMAS.iter().enumerate() {
            for (ai, &alpha) in ACCOUNTANT_ALPHAS.iter().enumerate() {
                let v = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
                if qi > 0 {
                    let lower = rdp_subsampled_gaussian(ACCOUNTANT_QS[qi - 1], sigma, alpha).unwrap();
                    ensure(v >= lower, || format!("not increasing in q at σ={sigma} α={alpha}"))?;
                }
                if si > 0 {
                    let noisier = v;
                    let quieter = rdp_subsampled_gaussian(q, ACCOUNTANT_SIGMAS[si - 1], alpha).unwrap();
                    ensure(quieter >= noisier, || format!("not decreasing in σ at q={q} α={alpha}"))?;
                }
                if ai > 0 {
                    let lower = rdp_subsampled_gaussian(q, sigma, ACCOUNTANT_ALPHAS[ai - 1]).unwrap();
                    ensure(v >= lower, || format!("not increasing in α at q={q} σ={sigma}"))?;
                }
            }
        }
    }
    Ok(format!(
        "q=1 closed form exact; worst oracle disagreement {worst:.2e}; composition exact; {trips} round trips in [0.99ε, ε]; monotone on grid"
    ))
}

// --------------------------------------------------------------- mechanism

fn blob_images(n: usize, width: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    let mut m = Matrix::zeros(n, width);
    for r in 0..n {
        let shift = rng.uniform();
        for (c, v) in m.row_mut(r).iter_mut().enumerate() {
            let centre = (c as f64 / width as f64 - 0.3 - 0.4 * shift).abs();
            *v = (1.0 - 3.0 * centre).clamp(0.0, 1.0) + 0.05 * rng.uniform();
        }
    }
    m
}

fn small_gan_config(width: usize) -> GanConfig {
    let mut cfg = GanConfig::new(width);
    cfg.latent_dim = 4;
    cfg.gen_hidden = vec![12];
    cfg.disc_hidden = vec![10];
    cfg.batch_size = 16;
    cfg.epochs = 6;
    cfg.pretrain_epochs = 4;
    cfg.lr = 1e-3;
    cfg
}

pub fn mechanism_suite() -> Outcome {
    let mut rng = RngState::new(0x3ec);
    let mut worst_ratio = 0.0f64;
    for i in 0..1000 {
        let batch = 1 + rng.below(32);
        let layers = 1 + rng.below(4);
        let mut ranges = Vec::new();
        let mut start = 0;
        for _ in 0..layers {
            let len = 1 + rng.below(20);
            ranges.push(start..start + len);
            start += len;
        }
        let scale = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let g = rng.gaussian(batch, start).map(|v| v * scale);
        let c = 10f64.powf(2.0 * rng.uniform() - 1.0);
        let mode = if i % 2 == 0 { ClipMode::Global } else { ClipMode::PerLayer };
        let pe = PerExampleGrads::new(g, ranges).map_err(|e| e.to_string())?;
        let clipped = clip(pe, c, mode);
        for k in 0..batch {
            let ratio = example_norm(&clipped, k) / c;
            ensure(ratio <= 1.0 + 1e-12, || format!("batch {i}: clipped norm {} > C={c}", ratio * c))?;
            worst_ratio = worst_ratio.max(ratio);
        }
        let private = privatize(&clipped, c, 0.0, &mut rng);
        let mut mean = vec![0.0; start];
        for k in 0..batch {
            for (m, v) in mean.iter_mut().zip(clipped.example(k)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        ensure(private == mean, || format!("batch {i}: σ=0 privatize differs from the clipped mean"))?;
    }

    let width = 12;
    let data = blob_images(80, width, 5);
    let public = blob_images(20, width, 6);
    let cfg = small_gan_config(width);
    let mut identical = 0;
    for seed in 0..3u64 {
        for public in [None, Some(&public)] {
            let (plain, _) = train_class_gan(&data, 3, 0, &cfg, None, public, &mut RngState::new(seed)).unwrap();
            let dp = DpConfig {
                clip_norm: f64::INFINITY,
                noise_multiplier: 0.0,
                sample_rate: cfg.sample_rate(data.rows()),
                target_epsilon: 1.0,
                delta: 1e-5,
                clip_mode: ClipMode::Global,
            };
            let mut ledger = PrivacyLedger::new(DomainTag { task: 0, class: 3 });
            let ctx = DpContext {
                config: &dp,
                ledger: &mut ledger,
            };
            let (private, _) = train_class_gan(&data, 3, 0, &cfg, Some(ctx), public, &mut RngState::new(seed)).unwrap();
            let bits = |p: &MlpParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(
                bits(&plain.generator) == bits(&private.generator)
                    && bits(&plain.discriminator) == bits(&private.discriminator),
                || format!("seed {seed}: DP-off training differs from non-private training"),
            )?;
            identical += 1;
        }
    }
    Ok(format!(
        "10^3 batches, max clipped norm / C = {worst_ratio:.6}; σ=0 equals clipped mean; {identical} DP-off GAN trainings byte-identical"
    ))
}

// ---------------------------------------------------------------- protocol

/// Synthetic 28×28 digits: a class-specific bar pattern plus pixel noise.
pub fn synthetic_data(per_class: usize, seed: u64) -> RawDataset {
    let mut rng = RngState::new(seed);
    let side = 28;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * 10 {
        let c = i % 10;
        let mut img = vec![0.0; side * side];
        for (p, v) in img.iter_mut().enumerate() {
            let (r, col) = (p / side, p % side);
            let on = (r / 3 + c) % 5 == 0 || (col / 4 + 2 * c) % 7 == 0;
            *v = if on { 0.8 } else { 0.1 } + 0.1 * rng.uniform();
        }
        rows.push(img);
        labels.push(c);
    }
    RawDataset::new(Matrix::from_rows(&rows).unwrap(), labels, side).unwrap()
}

pub fn protocol_config(method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = method.parse().unwrap();
    cfg.seed = 3;
    cfg.per_class_cap = 0;
    cfg.test_per_class_cap = 0;
    cfg.public_fraction = 0.1;
    cfg.bnn_hidden = vec![16];
    cfg.bnn_epochs = 1;
    cfg.sgd_epochs = 1;
    cfg.gan_latent = 4;
    cfg.gan_gen_hidden = vec![8];
    cfg.gan_disc_hidden = vec![8];
    cfg.gan_batch = 8;
    cfg.gan_epochs = 2;
    cfg.gan_pretrain_epochs = 2;
    cfg.save_checkpoints = false;
    cfg
}

pub fn protocol_suite() -> Outcome {
    let train = synthetic_data(30, 1);
    let test = synthetic_data(10, 2);
    let mut checked = Vec::new();
    for name in MethodKind::NAMES {
        let cfg = protocol_config(name);
        let data = PreparedData::from_raw(&cfg, train.clone(), test.clone()).map_err(|e| e.to_string())?;
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let a = run_prepared(&cfg, &data, Some(dirs[0].path())).map_err(|e| format!("{name}: {e}"))?;
        let b = run_prepared(&cfg, &data, Some(dirs[1].path())).map_err(|e| format!("{name}: {e}"))?;

        for r in &a.reads {
            ensure(r.window == Some(r.owner), || {
                format!("{name}: task {} rows read while window was {:?}", r.owner, r.window)
            })?;
        }
        ensure(a.reads.windows(2).all(|w| w[0].owner <= w[1].owner), || {
            format!("{name}: a retired task's rows were read after a later task started")
        })?;
        ensure(a.reads.iter().map(|r| r.owner).max() == Some(4), || {
            format!("{name}: read log does not cover all tasks")
        })?;

        ensure(a.matrix.num_tasks() == 5, || format!("{name}: {} rows", a.matrix.num_tasks()))?;
        for (i, row) in a.matrix.rows().iter().enumerate() {
            ensure(row.len() == i + 1, || format!("{name}: row {i} has {} entries", row.len()))?;
        }
        let metrics = std::fs::read_to_string(dirs[0].path().join("metrics.csv")).unwrap();
        for line in metrics.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (i, j): (usize, usize) = (f[2].parse().unwrap(), f[3].parse().unwrap());
            ensure(j <= i, || format!("{name}: metrics row with eval_task {j} > trained_task {i}"))?;
        }
        ensure(metrics.lines().count() == 16, || format!("{name}: metrics.csv has {} lines", metrics.lines().count()))?;
        ensure(a.output_widths == vec![10; 5], || format!("{name}: output widths {:?}", a.output_widths))?;

        for file in ["metrics.csv", "summary.csv", "privacy_report.txt"] {
            let x = std::fs::read(dirs[0].path().join(file)).unwrap();
            let y = std::fs::read(dirs[1].path().join(file)).unwrap();
            ensure(x == y, || format!("{name}: {file} differs between same-seed runs"))?;
        }
        ensure(a.matrix == b.matrix, || format!("{name}: matrices differ"))?;
        checked.push(name);
    }
    Ok(format!(
        "{} methods: reads confined to open windows, lower-triangular 5×5, width 10, byte-identical CSVs",
        checked.len()
    ))
}

// ------------------------------------------------------------- experiments

pub const SEEDS: [u64; 3] = [0, 1, 2];

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn desk_config(method: MethodKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = method;
    cfg.seed = seed;
    cfg.data_dir = mnist_dir();
    cfg.save_checkpoints = false;
    cfg
}

pub fn public_eps(epsilon: f64) -> MethodKind {
    MethodKind::DpVgerPublic { epsilon, delta: 1e-8 }
}

pub fn nopublic() -> MethodKind {
    MethodKind::DpVgerNoPublic {
        epsilon: 5.0,
        delta: 1e-4,
    }
}

type Slot = Arc<OnceLock<Result<Arc<RunOutput>, String>>>;

/// Desk-scale runs, each computed at most once per process.
pub struct RunCache {
    data: OnceLock<Result<PreparedData, String>>,
    slots: Mutex<HashMap<(String, u64), Slot>>,
}

impl RunCache {
    pub fn global() -> &'static RunCache {
        static CACHE: OnceLock<RunCache> = OnceLock::new();
        CACHE.get_or_init(|| RunCache {
            data: OnceLock::new(),
            slots: Mutex::new(HashMap::new()),
        })
    }

    fn data(&self) -> Result<&PreparedData, String> {
        self.data
            .get_or_init(|| {
                let cfg = desk_config(MethodKind::Vger, 0);
                PreparedData::load(&cfg).map_err(|e| format!("MNIST from {}: {e}", cfg.data_dir.display()))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn get(&self, method: MethodKind, seed: u64) -> Result<Arc<RunOutput>, String> {
        let slot = {
            let mut slots = self.slots.lock().unwrap();
            slots.entry((method.label(), seed)).or_default().clone()
        };
        slot.get_or_init(|| {
            let data = self.data()?;
            let cfg = desk_config(method, seed);
            let t = std::time::Instant::now();
            let out = run_prepared(&cfg, data, None).map_err(|e| format!("{}: {e}", method.label()))?;
            eprintln!("  ran {} seed {seed} in {:.0}s", method.label(), t.elapsed().as_secs_f64());
            Ok(Arc::new(out))
        })
        .clone()
    }

    pub fn final_means(&self, method: MethodKind) -> Result<Vec<f64>, String> {
        SEEDS
            .iter()
            .map(|&s| self.get(method, s).map(|o| o.matrix.final_mean().unwrap_or(0.0)))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_seeds(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

pub fn forgetting(cache: &RunCache) -> Outcome {
    let mut last = Vec::new();
    let mut old = Vec::new();
    for &s in &SEEDS {
        let out = cache.get(MethodKind::PlainSgd, s)?;
        let row = out.matrix.final_row().ok_or("empty matrix")?;
        last.push(row[4]);
        old.push(mean(&row[..4]));
    }
    let plain = cache.final_means(MethodKind::PlainSgd)?;
    let vger = cache.final_means(MethodKind::Vger)?;
    let detail = format!(
        "PLAIN acc[4][4] {} (mean {:.3}), tasks 0-3 {} (mean {:.3}); final mean VGER {:.3} vs PLAIN {:.3} (gap {:.3})",
        fmt_seeds(&last),
        mean(&last),
        fmt_seeds(&old),
        mean(&old),
        mean(&vger),
        mean(&plain),
        mean(&vger) - mean(&plain)
    );
    ensure(mean(&last) >= 0.9 && mean(&old) <= 0.3 && mean(&vger) - mean(&plain) >= 0.25, || detail.clone())?;
    Ok(detail)
}

pub fn ordering(cache: &RunCache) -> Outcome {
    let vger = mean(&cache.final_means(MethodKind::Vger)?);
    let p2 = mean(&cache.final_means(public_eps(2.0))?);
    let p1 = mean(&cache.final_means(public_eps(1.0))?);
    let core = mean(&cache.final_means(MethodKind::CoresetOnly)?);
    let nopub = mean(&cache.final_means(nopublic())?);
    let tie = 0.01;
    let detail = format!(
        "VGER {vger:.3} ≥ PUBLIC(2) {p2:.3} ≥ PUBLIC(1) {p1:.3} ≥ CORESET {core:.3}; NOPUBLIC(5) {nopub:.3} < PUBLIC(1)"
    );
    ensure(vger >= p2 - tie && p2 >= p1 - tie && p1 >= core - tie && nopub < p1, || detail.clone())?;
    Ok(detail)
}

/// Largest step count at `(q, σ)` whose ε stays within `target`.
fn max_steps_within(q: f64, sigma: f64, delta: f64, target: f64) -> u64 {
    let orders = default_orders();
    let ok = |k: u64| epsilon_for(q, sigma, k, delta, &orders).unwrap().0 <= target;
    let (mut lo, mut hi) = (0u64, 1u64);
    while ok(hi) {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn privacy_reporting(cache: &RunCache) -> Outcome {
    let mut runs = 0;
    let mut worst = 0.0f64;
    for method in [public_eps(1.0), public_eps(2.0), nopublic()] {
        let (target, delta) = method.budget().unwrap();
        for &s in &SEEDS {
            let out = cache.get(method, s)?;
            let label = method.label();
            ensure(out.report.entries.len() == 10, || {
                format!("{label} seed {s}: {} report entries", out.report.entries.len())
            })?;
            let mut domains: Vec<(usize, usize)> = out.report.entries.iter().map(|e| (e.domain.task, e.domain.class)).collect();
            domains.sort_unstable();
            domains.dedup();
            ensure(domains.len() == 10, || format!("{label} seed {s}: duplicate domains in report"))?;
            for e in &out.report.entries {
                ensure(e.epsilon <= target && e.delta == delta, || {
                    format!("{label} seed {s}: class {} spent ({}, {})", e.domain.class, e.epsilon, e.delta)
                })?;
                worst = worst.max(e.epsilon / target);
            }
            for g in &out.gans {
                let ledger = out.ledgers.get(g.domain).ok_or("missing ledger")?;
                let sigma = g.sigma.ok_or("missing σ")?;
                let q = ledger.entries().first().map_or(1.0, |e| e.q);
                let cap = max_steps_within(q, sigma, delta, target);
                ensure(ledger.steps() == g.stats.d_steps && ledger.steps() <= g.planned_steps.min(cap), || {
                    format!(
                        "{label} seed {s} class {}: {} ledger steps, {} planned, {} allowed",
                        g.domain.class,
                        ledger.steps(),
                        g.planned_steps,
                        cap
                    )
                })?;
            }
            runs += 1;
        }
    }

    let width = 12;
    let data = blob_images(200, width, 9);
    let mut cfg = small_gan_config(width);
    let (target, delta) = (1.0, 1e-5);
    let q = cfg.sample_rate(data.rows());
    let planned = cfg.planned_steps(data.rows());
    let sigma = calibrate_sigma(target, delta, q, planned).map_err(|e| e.to_string())?;
    let cap = max_steps_within(q, sigma, delta, target);
    cfg.epochs *= 3;
    let dp = DpConfig {
        clip_norm: 1.0,
        noise_multiplier: sigma,
        sample_rate: q,
        target_epsilon: target,
        delta,
        clip_mode: ClipMode::Global,
    };
    let mut ledger = PrivacyLedger::new(DomainTag { task: 0, class: 7 });
    let (pair, stats) = train_class_gan(
        &data,
        7,
        0,
        &cfg,
        Some(DpContext {
            config: &dp,
            ledger: &mut ledger,
        }),
        None,
        &mut RngState::new(4),
    )
    .map_err(|e| e.to_string())?;
    let spent = pair.privacy.ok_or("no privacy stamp")?.0;
    ensure(stats.halted && ledger.steps() == cap && spent <= target, || {
        format!(
            "halting demo: halted={} after {} steps, calibrated maximum {cap}, ε={spent}",
            stats.halted,
            ledger.steps()
        )
    })?;
    Ok(format!(
        "{runs} DP runs × 10 class GANs, max ε/target {worst:.4}; ledger steps ≤ calibrated maximum; a 3× over-long run halts at exactly {cap} steps (ε={spent:.4})"
    ))
}

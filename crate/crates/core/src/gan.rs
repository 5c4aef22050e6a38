//! Per-class MLP GANs, optionally trained under differential privacy, and
//! the replay store that outlives the data they were trained on.

use crate::bnn::softplus;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, mlp_backward, mlp_backward_with_input, mlp_forward, mlp_predict, per_example_grads, sigmoid,
    Activation, AdamState, Matrix, MlpParams, RngState,
};
use crate::privacy::{clip, compose, default_orders, privatize, step_curve, to_eps_delta, DpConfig, PrivacyLedger};

/// Discriminator logits are clamped to `±LOGIT_CLAMP` before any log or sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Flattened image size; the generator's output width.
    pub image_width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs over the public rows before private training.
    pub pretrain_epochs: usize,
    /// Multiplier on the generator's output-layer init weights.
    pub output_init_scale: f64,
    /// Weight of the generator's pairwise diversity term.
    pub diversity_weight: f64,
    /// Initial std of Gaussian noise added to every discriminator input,
    /// annealed linearly to zero over private training.
    pub instance_noise: f64,
}

impl GanConfig {
    pub fn new(image_width: usize) -> Self {
        Self {
            latent_dim: 32,
            gen_hidden: vec![128],
            disc_hidden: vec![64],
            image_width,
            lr: 2e-4,
            batch_size: 64,
            epochs: 50,
            pretrain_epochs: 300,
            output_init_scale: 0.3,
            diversity_weight: 200.0,
            instance_noise: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.latent_dim, self.image_width, self.batch_size]
            .into_iter()
            .chain(self.gen_hidden.iter().copied())
            .chain(self.disc_hidden.iter().copied());
        for w in widths {
            if w == 0 {
                return Err(Error::InvalidArgument("GAN widths and batch size must be positive".into()));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("GAN learning rate must be > 0, got {}", self.lr)));
        }
        for (name, v) in [
            ("output init scale", self.output_init_scale),
            ("diversity weight", self.diversity_weight),
            ("instance noise", self.instance_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("GAN {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn generator_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend_from_slice(&self.gen_hidden);
        w.push(self.image_width);
        w
    }

    pub fn discriminator_widths(&self) -> Vec<usize> {
        let mut w = vec![self.image_width];
        w.extend_from_slice(&self.disc_hidden);
        w.push(1);
        w
    }

    /// Batch size actually used on `n` rows.
    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.min(n)
    }

    /// Sampling rate `B / n` of private training on `n` rows.
    pub fn sample_rate(&self, n: usize) -> f64 {
        self.effective_batch(n) as f64 / n as f64
    }

    /// Discriminator steps of a full run on `n` rows.
    pub fn planned_steps(&self, n: usize) -> u64 {
        if n == 0 {
            return 0;
        }
        (self.epochs * (n / self.effective_batch(n))) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanPair {
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    pub class_label: usize,
    pub task_id: usize,
    /// `(ε, δ)` spent, present iff trained with DP.
    pub privacy: Option<(f64, f64)>,
}

impl GanPair {
    pub fn latent_dim(&self) -> usize {
        self.generator.input_width()
    }

    /// `n` generated images, clamped to `[0, 1]`.
    pub fn generate(&self, n: usize, rng: &mut RngState) -> Result<Matrix> {
        let z = rng.gaussian(n, self.latent_dim());
        let mut x = mlp_predict(&self.generator, &z)?;
        x.map_inplace(|v| v.clamp(0.0, 1.0));
        Ok(x)
    }
}

/// Generators kept after their training data is deleted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    pairs: Vec<GanPair>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair; a second pair for the same `(task, class)` is rejected.
    pub fn insert(&mut self, pair: GanPair) -> Result<()> {
        if pair.class_label >= crate::bnn::NUM_CLASSES {
            return Err(Error::InvalidLabel {
                label: pair.class_label,
                classes: crate::bnn::NUM_CLASSES,
            });
        }
        if self
            .pairs
            .iter()
            .any(|p| p.task_id == pair.task_id && p.class_label == pair.class_label)
        {
            return Err(Error::InvalidArgument(format!(
                "replay store already holds task {} class {}",
                pair.task_id, pair.class_label
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn pairs(&self) -> &[GanPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.class_label).collect()
    }
}

/// `n_per_class` generated rows for every stored class, in store order.
pub fn sample_replay(store: &ReplayStore, n_per_class: usize, rng: &mut RngState) -> Result<LabeledSet> {
    let Some(first) = store.pairs.first() else {
        if n_per_class > 0 {
            return Err(Error::InvalidArgument("cannot sample replay from an empty store".into()));
        }
        return Ok(LabeledSet::empty(0));
    };
    let mut out = LabeledSet::empty(first.generator.output_width());
    for p in &store.pairs {
        let x = p.generate(n_per_class, rng)?;
        out = out.concat(&LabeledSet::new(x, vec![p.class_label; n_per_class])?)?;
    }
    Ok(out)
}

/// Losses and their gradients with respect to the (unclamped) logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// ∂d_loss/∂real logits.
    pub d_real_grad: Matrix,
    /// ∂d_loss/∂fake logits.
    pub d_fake_grad: Matrix,
    /// ∂g_loss/∂fake logits.
    pub g_fake_grad: Matrix,
}

fn clamp_mask(l: f64) -> (f64, f64) {
    let c = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    (c, if l.abs() > LOGIT_CLAMP { 0.0 } else { 1.0 })
}

/// `d_loss = −mean log D(x) − mean log(1 − D(G(z)))`, `g_loss = −mean log D(G(z))`
/// with `D = sigmoid(clamp(logit))`.
pub fn gan_losses(real_logits: &Matrix, fake_logits: &Matrix) -> Result<GanLosses> {
    for (m, what) in [(real_logits, "real logits"), (fake_logits, "fake logits")] {
        if m.cols() != 1 {
            return Err(Error::Dimension {
                op: "gan_losses",
                left: m.shape(),
                right: (m.rows(), 1),
            });
        }
        if m.is_empty() {
            return Err(Error::EmptyBatch(what));
        }
        if !m.all_finite() {
            return Err(Error::NonFinite("gan_losses"));
        }
    }
    let (nr, nf) = (real_logits.rows() as f64, fake_logits.rows() as f64);
    let mut d_real_grad = Matrix::zeros(real_logits.rows(), 1);
    let mut real_term = 0.0;
    for (g, &l) in d_real_grad.as_mut_slice().iter_mut().zip(real_logits.as_slice()) {
        let (c, mask) = clamp_mask(l);
        real_term += softplus(-c);
        *g = mask * (sigmoid(c) - 1.0) / nr;
    }
    let mut d_fake_grad = Matrix::zeros(fake_logits.rows(), 1);
    let mut g_fake_grad = Matrix::zeros(fake_logits.rows(), 1);
    let (mut fake_term, mut g_term) = (0.0, 0.0);
    for ((dg, gg), &l) in d_fake_grad
        .as_mut_slice()
        .iter_mut()
        .zip(g_fake_grad.as_mut_slice())
        .zip(fake_logits.as_slice())
    {
        let (c, mask) = clamp_mask(l);
        let s = sigmoid(c);
        fake_term += softplus(c);
        g_term += softplus(-c);
        *dg = mask * s / nf;
        *gg = mask * (s - 1.0) / nf;
    }
    Ok(GanLosses {
        d_loss: real_term / nr + fake_term / nf,
        g_loss: g_term / nf,
        d_real_grad,
        d_fake_grad,
        g_fake_grad,
    })
}

/// Privacy context of a DP training run.
pub struct DpContext<'a> {
    pub config: &'a DpConfig,
    pub ledger: &'a mut PrivacyLedger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanStats {
    /// Discriminator steps on private data.
    pub d_steps: u64,
    pub g_steps: u64,
    pub pretrain_steps: u64,
    /// Stopped before the planned step count because the budget would be exceeded.
    pub halted: bool,
    pub last_d_loss: f64,
    pub last_g_loss: f64,
}

/// `d_loss` and its gradient with respect to the discriminator's parameters
/// for one batch of real and generated rows.
///
/// With `dp`, the real rows' per-example gradients are clipped and noised
/// before averaging; generated rows carry no private information and are
/// averaged directly.
pub fn discriminator_grad(
    disc: &MlpParams,
    real: &Matrix,
    fake: &Matrix,
    dp: Option<(&DpConfig, &mut RngState)>,
) -> Result<(f64, Vec<f64>)> {
    let (nr, nf) = (real.rows() as f64, fake.rows() as f64);
    let (real_logits, real_cache) = mlp_forward(disc, real)?;
    let (fake_logits, fake_cache) = mlp_forward(disc, fake)?;
    let losses = gan_losses(&real_logits, &fake_logits)?;
    // per-row loss gradients, unscaled; the mean is taken after summation
    let real_row_grad = losses.d_real_grad.map(|g| g * nr);
    let fake_row_grad = losses.d_fake_grad.map(|g| g * nf);
    let mut grad = match dp {
        Some((cfg, rng)) => {
            let pe = per_example_grads(disc, &real_cache, &real_row_grad)?;
            let clipped = clip(pe, cfg.clip_norm, cfg.clip_mode);
            privatize(&clipped, cfg.clip_norm, cfg.noise_multiplier, rng)
        }
        None => {
            let mut g = mlp_backward(disc, &real_cache, &real_row_grad)?.to_flat();
            g.iter_mut().for_each(|v| *v /= nr);
            g
        }
    };
    let fake_part = mlp_backward(disc, &fake_cache, &fake_row_grad)?.to_flat();
    for (r, f) in grad.iter_mut().zip(&fake_part) {
        *r += f / nf;
    }
    Ok((losses.d_loss, grad))
}

/// Generator loss at latents `z` and its gradient with respect to the
/// generator's parameters: the non-saturating `g_loss` minus
/// `diversity` times the mean squared pixel distance between paired
/// samples (row `i` with row `i + b/2`), normalized by the mean squared
/// distance of their latents. Reads no data and no privacy state.
pub fn generator_grad(gen: &MlpParams, disc: &MlpParams, z: &Matrix, diversity: f64) -> Result<(f64, Vec<f64>)> {
    let (fake, gen_cache) = mlp_forward(gen, z)?;
    let (logits, disc_cache) = mlp_forward(disc, &fake)?;
    let losses = gan_losses(&Matrix::zeros(1, 1), &logits)?;
    let through_d = mlp_backward_with_input(disc, &disc_cache, &losses.g_fake_grad)?;
    let mut image_grad = through_d.input.expect("input gradient requested");
    let mut loss = losses.g_loss;
    let half = fake.rows() / 2;
    if diversity > 0.0 && half > 0 {
        let mean_sq = |m: &Matrix| {
            (0..half)
                .map(|i| m.row(i).iter().zip(m.row(i + half)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / (half * m.cols()) as f64
        };
        let z_dist = mean_sq(z);
        if z_dist > 0.0 {
            let scale = diversity / z_dist;
            loss -= scale * mean_sq(&fake);
            let k = 2.0 * scale / (half * fake.cols()) as f64;
            for i in 0..half {
                for c in 0..fake.cols() {
                    let g = k * (fake.get(i, c) - fake.get(i + half, c));
                    image_grad.set(i, c, image_grad.get(i, c) - g);
                    image_grad.set(i + half, c, image_grad.get(i + half, c) + g);
                }
            }
        }
    }
    Ok((loss, mlp_backward(gen, &gen_cache, &image_grad)?.to_flat()))
}

struct Trainer {
    gen: MlpParams,
    disc: MlpParams,
    gen_adam: AdamState,
    disc_adam: AdamState,
    lr: f64,
    latent: usize,
    diversity: f64,
    noise_std: f64,
}

impl Trainer {
    fn d_step(&mut self, real: &Matrix, dp: Option<&DpConfig>, rng: &mut RngState) -> Result<f64> {
        let z = rng.gaussian(real.rows(), self.latent);
        let mut fake = mlp_predict(&self.gen, &z)?;
        let mut real = real.clone();
        if self.noise_std > 0.0 {
            for m in [&mut real, &mut fake] {
                let e = rng.gaussian(m.rows(), m.cols());
                for (v, e) in m.as_mut_slice().iter_mut().zip(e.as_slice()) {
                    *v += self.noise_std * e;
                }
            }
        }
        let (loss, grad) = discriminator_grad(&self.disc, &real, &fake, dp.map(|c| (c, &mut *rng)))?;
        let mut flat = self.disc.to_flat();
        adam_step(&mut flat, &grad, &mut self.disc_adam, self.lr)?;
        self.disc.assign_flat(&flat)?;
        Ok(loss)
    }

    fn g_step(&mut self, b: usize, rng: &mut RngState) -> Result<f64> {
        let z = rng.gaussian(b, self.latent);
        let (loss, grad) = generator_grad(&self.gen, &self.disc, &z, self.diversity)?;
        let mut flat = self.gen.to_flat();
        adam_step(&mut flat, &grad, &mut self.gen_adam, self.lr)?;
        self.gen.assign_flat(&flat)?;
        Ok(loss)
    }

    fn batches(n: usize, b: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
        let perm = rng.permutation(n);
        perm.chunks_exact(b).map(<[usize]>::to_vec).collect()
    }
}

fn current_epsilon(curve: &crate::privacy::RdpCurve, delta: f64) -> Result<f64> {
    to_eps_delta(curve, delta).map(|(e, _)| e)
}

/// Trains one class's GAN.
///
/// With `dp`, every discriminator step on `data` is clipped and noised and
/// appends one `(q = B/n, σ)` entry to the ledger; training stops before
/// any step whose inclusion would push the ledger's ε above the target.
/// `public` rows, if given, pretrain both networks without noise or ledger
/// entries.
pub fn train_class_gan(
    data: &Matrix,
    class_label: usize,
    task_id: usize,
    cfg: &GanConfig,
    mut dp: Option<DpContext<'_>>,
    public: Option<&Matrix>,
    rng: &mut RngState,
) -> Result<(GanPair, GanStats)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch("GAN training data"));
    }
    if data.cols() != cfg.image_width {
        return Err(Error::Dimension {
            op: "train_class_gan",
            left: data.shape(),
            right: (data.rows(), cfg.image_width),
        });
    }
    let n = data.rows();
    let b = cfg.effective_batch(n);
    let q = cfg.sample_rate(n);
    let orders = default_orders();
    let mut accounting = None;
    if let Some(ctx) = dp.as_mut() {
        ctx.config.validate()?;
        let sigma = ctx.config.noise_multiplier;
        let spent_curve = compose(ctx.ledger, &orders)?;
        let spent = current_epsilon(&spent_curve, ctx.config.delta)?;
        if spent >= ctx.config.target_epsilon {
            return Err(Error::BudgetExhausted {
                spent,
                target: ctx.config.target_epsilon,
            });
        }
        // σ = 0 is the degenerate mechanism: ledgered but never budget-limited
        if sigma > 0.0 {
            let step = step_curve(q, sigma, &orders)?;
            let first = current_epsilon(&spent_curve.add(&step)?, ctx.config.delta)?;
            if first > ctx.config.target_epsilon {
                return Err(Error::BudgetExhausted {
                    spent,
                    target: ctx.config.target_epsilon,
                });
            }
            accounting = Some((spent_curve, step));
        }
    }

    let mut gen = MlpParams::he_init(&cfg.generator_widths(), Activation::Sigmoid, rng)?;
    if let Some(last) = gen.layers_mut().last_mut() {
        last.w.scale(cfg.output_init_scale);
    }
    let disc = MlpParams::he_init(&cfg.discriminator_widths(), Activation::Identity, rng)?;
    let mut t = Trainer {
        gen_adam: AdamState::new(gen.num_params()),
        disc_adam: AdamState::new(disc.num_params()),
        gen,
        disc,
        lr: cfg.lr,
        latent: cfg.latent_dim,
        diversity: cfg.diversity_weight,
        noise_std: 0.0,
    };
    let total_steps = cfg.planned_steps(n).max(1) as f64;
    let mut stats = GanStats {
        d_steps: 0,
        g_steps: 0,
        pretrain_steps: 0,
        halted: false,
        last_d_loss: f64::NAN,
        last_g_loss: f64::NAN,
    };

    if let Some(pub_x) = public.filter(|p| !p.is_empty()) {
        if pub_x.cols() != cfg.image_width {
            return Err(Error::Dimension {
                op: "train_class_gan public",
                left: pub_x.shape(),
                right: (pub_x.rows(), cfg.image_width),
            });
        }
        let pb = cfg.effective_batch(pub_x.rows());
        for _ in 0..cfg.pretrain_epochs {
            for idx in Trainer::batches(pub_x.rows(), pb, rng) {
                stats.last_d_loss = t.d_step(&pub_x.select_rows(&idx), None, rng)?;
                stats.last_g_loss = t.g_step(pb, rng)?;
                stats.pretrain_steps += 1;
            }
        }
    }

    'epochs: for _ in 0..cfg.epochs {
        for idx in Trainer::batches(n, b, rng) {
            if let (Some(ctx), Some((spent, step))) = (dp.as_ref(), accounting.as_mut()) {
                let projected = spent.add(step)?;
                if current_epsilon(&projected, ctx.config.delta)? > ctx.config.target_epsilon {
                    stats.halted = true;
                    break 'epochs;
                }
                *spent = projected;
            }
            let real = data.select_rows(&idx);
            t.noise_std = cfg.instance_noise * (1.0 - stats.d_steps as f64 / total_steps).max(0.0);
            stats.last_d_loss = t.d_step(&real, dp.as_ref().map(|c| c.config), rng)?;
            if let Some(ctx) = dp.as_mut() {
                ctx.ledger.append(q, ctx.config.noise_multiplier, 1)?;
            }
            stats.d_steps += 1;
            stats.last_g_loss = t.g_step(b, rng)?;
            stats.g_steps += 1;
        }
    }

    let privacy = match dp.as_ref() {
        Some(ctx) => {
            let curve = compose(ctx.ledger, &orders)?;
            Some((current_epsilon(&curve, ctx.config.delta)?, ctx.config.delta))
        }
        None => None,
    };
    let pair = GanPair {
        generator: t.gen,
        discriminator: t.disc,
        class_label,
        task_id,
        privacy,
    };
    Ok((pair, stats))
}

//! Mean-field Gaussian variational classifier.
//!
//! Weights are sampled as `w = μ + softplus(ρ)·ε` and trained on the free
//! energy `nll + KL(q‖p) / (N·T)`, where the negative log-likelihood is the
//! mini-batch mean over real and replayed examples, `N` is the size of the
//! mixed training set and `T` the number of tasks seen so far.
//!
//! The classifier always has [`NUM_CLASSES`] outputs: one head shared by all
//! tasks.

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::loss::{log_likelihoods, softmax, softmax_xent};
use crate::nn::mlp::sigmoid;
use crate::nn::{adam_step, mlp_backward, mlp_forward, mlp_predict, Activation, AdamState, Matrix, MlpParams, RngState};

pub const NUM_CLASSES: usize = 10;

/// `ln(1 + eʳ)`, stable for large `|r|`.
pub fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `s > 0`.
pub fn inv_softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorInit {
    pub mu_std: f64,
    pub sigma: f64,
}

impl Default for PosteriorInit {
    fn default() -> Self {
        Self {
            mu_std: 0.1,
            sigma: 0.05,
        }
    }
}

/// `q_θ(ω)`: independent `N(μ, softplus(ρ)²)` per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldPosterior {
    mu: MlpParams,
    rho: MlpParams,
}

impl MeanFieldPosterior {
    pub fn new(mu: MlpParams, rho: MlpParams) -> Result<Self> {
        if mu.widths() != rho.widths() {
            return Err(Error::InvalidArgument(format!(
                "posterior mean widths {:?} differ from rho widths {:?}",
                mu.widths(),
                rho.widths()
            )));
        }
        if mu.output_width() != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "classifier must have {NUM_CLASSES} outputs, got {}",
                mu.output_width()
            )));
        }
        Ok(Self { mu, rho })
    }

    /// `widths` runs from the input to the last hidden layer; the 10-way head is appended.
    pub fn init(widths: &[usize], init: PosteriorInit, rng: &mut RngState) -> Result<Self> {
        let mut all = widths.to_vec();
        all.push(NUM_CLASSES);
        let mut mu = MlpParams::zeros(&all, Activation::Identity)?;
        for m in mu.matrices_mut() {
            rng.fill_normal(m.as_mut_slice());
            m.scale(init.mu_std);
        }
        let mut rho = MlpParams::zeros(&all, Activation::Identity)?;
        let r0 = inv_softplus(init.sigma);
        for m in rho.matrices_mut() {
            m.map_inplace(|_| r0);
        }
        Self::new(mu, rho)
    }

    pub fn mu(&self) -> &MlpParams {
        &self.mu
    }

    pub fn rho(&self) -> &MlpParams {
        &self.rho
    }

    pub fn sigma(&self) -> MlpParams {
        let mut s = self.rho.clone();
        for m in s.matrices_mut() {
            m.map_inplace(softplus);
        }
        s
    }

    pub fn num_weights(&self) -> usize {
        self.mu.num_params()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.mu.widths()
    }

    /// `[μ…, ρ…]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mu.to_flat();
        v.extend(self.rho.to_flat());
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_weights();
        if flat.len() != 2 * n {
            return Err(Error::Dimension {
                op: "posterior assign_flat",
                left: (2 * n, 1),
                right: (flat.len(), 1),
            });
        }
        self.mu.assign_flat(&flat[..n])?;
        self.rho.assign_flat(&flat[n..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// The same `N(mean, std²)` for every weight.
    Isotropic { mean: f64, std: f64 },
    /// Per-weight means and standard deviations, shaped like the posterior.
    PerWeight { mean: MlpParams, std: MlpParams },
}

impl PriorSpec {
    pub fn standard() -> Self {
        PriorSpec::Isotropic { mean: 0.0, std: 1.0 }
    }

    fn flat(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            PriorSpec::Isotropic { mean, std } => {
                if !(*std > 0.0) {
                    return Err(Error::InvalidArgument(format!("prior std must be > 0, got {std}")));
                }
                Ok((vec![*mean; n], vec![*std; n]))
            }
            PriorSpec::PerWeight { mean, std } => {
                let (m, s) = (mean.to_flat(), std.to_flat());
                if m.len() != n || s.len() != n {
                    return Err(Error::Dimension {
                        op: "prior shape",
                        left: (n, 1),
                        right: (m.len(), s.len()),
                    });
                }
                if s.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidArgument("prior std must be > 0".into()));
                }
                Ok((m, s))
            }
        }
    }
}

/// KL and its gradient with respect to `[μ…, ρ…]`.
fn kl_with_grad(post: &MeanFieldPosterior, prior: &PriorSpec) -> Result<(f64, Vec<f64>)> {
    let n = post.num_weights();
    let (m0, s0) = prior.flat(n)?;
    let (mu, rho) = (post.mu.to_flat(), post.rho.to_flat());
    let mut grad = vec![0.0; 2 * n];
    let mut kl = 0.0;
    for i in 0..n {
        let sigma = softplus(rho[i]);
        let d = mu[i] - m0[i];
        let v0 = s0[i] * s0[i];
        kl += (s0[i] / sigma).ln() + (sigma * sigma + d * d) / (2.0 * v0) - 0.5;
        grad[i] = d / v0;
        grad[n + i] = (-1.0 / sigma + sigma / v0) * sigmoid(rho[i]);
    }
    Ok((kl, grad))
}

/// `KL(q‖p) = Σ ln(σ₀/σ) + (σ² + (μ−μ₀)²)/(2σ₀²) − ½`.
pub fn analytic_kl(post: &MeanFieldPosterior, prior: &PriorSpec) -> Result<f64> {
    kl_with_grad(post, prior).map(|(kl, _)| kl)
}

/// One standard-normal draw per weight, in flat order.
pub fn sample_noise(post: &MeanFieldPosterior, rng: &mut RngState) -> Vec<f64> {
    let mut eps = vec![0.0; post.num_weights()];
    rng.fill_normal(&mut eps);
    eps
}

/// `w = μ + softplus(ρ)·ε` for a given noise vector.
pub fn weights_from_noise(post: &MeanFieldPosterior, eps: &[f64]) -> Result<MlpParams> {
    let (mu, rho) = (post.mu.to_flat(), post.rho.to_flat());
    if eps.len() != mu.len() {
        return Err(Error::Dimension {
            op: "weights_from_noise",
            left: (mu.len(), 1),
            right: (eps.len(), 1),
        });
    }
    let w: Vec<f64> = mu
        .iter()
        .zip(&rho)
        .zip(eps)
        .map(|((m, r), e)| m + softplus(*r) * e)
        .collect();
    post.mu.with_flat(&w)
}

pub fn sample_weights(post: &MeanFieldPosterior, rng: &mut RngState) -> MlpParams {
    let eps = sample_noise(post, rng);
    weights_from_noise(post, &eps).expect("noise length matches posterior")
}

/// `(1/S) Σ_s mean_batch log p(y | ω_s, x)`.
pub fn mc_log_likelihood(post: &MeanFieldPosterior, batch: &LabeledSet, samples: usize, rng: &mut RngState) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("mc_log_likelihood"));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one weight sample".into()));
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let w = sample_weights(post, rng);
        let logits = mlp_predict(&w, batch.x())?;
        let ll = log_likelihoods(&logits, batch.y())?;
        total += ll.iter().sum::<f64>() / batch.len() as f64;
    }
    Ok(total / samples as f64)
}

/// How strongly the KL term is weighted: `1 / (dataset_size · tasks_seen)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlWeight {
    pub dataset_size: usize,
    pub tasks_seen: usize,
}

impl KlWeight {
    pub fn scale(&self) -> Result<f64> {
        if self.dataset_size == 0 || self.tasks_seen == 0 {
            return Err(Error::InvalidArgument(format!(
                "KL weight needs N ≥ 1 and T ≥ 1, got N={} T={}",
                self.dataset_size, self.tasks_seen
            )));
        }
        Ok(1.0 / (self.dataset_size as f64 * self.tasks_seen as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyTerms {
    pub nll: f64,
    pub kl: f64,
    pub scale: f64,
    pub total: f64,
}

impl FreeEnergyTerms {
    fn new(nll: f64, kl: f64, scale: f64) -> Self {
        Self {
            nll,
            kl,
            scale,
            total: nll + scale * kl,
        }
    }
}

/// Free energy and its gradient with respect to `[μ…, ρ…]`, using the given
/// noise vectors (one per weight sample) for the reparameterization.
pub fn free_energy_grad(
    post: &MeanFieldPosterior,
    prior: &PriorSpec,
    batch: &LabeledSet,
    weight: KlWeight,
    noise: &[Vec<f64>],
) -> Result<(FreeEnergyTerms, Vec<f64>)> {
    free_energy_grad_with_logits(post, prior, batch, weight, noise).map(|(t, g, _)| (t, g))
}

/// As [`free_energy_grad`], also returning the logits of the first weight sample.
fn free_energy_grad_with_logits(
    post: &MeanFieldPosterior,
    prior: &PriorSpec,
    batch: &LabeledSet,
    weight: KlWeight,
    noise: &[Vec<f64>],
) -> Result<(FreeEnergyTerms, Vec<f64>, Matrix)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("free_energy"));
    }
    if noise.is_empty() {
        return Err(Error::InvalidArgument("need at least one weight sample".into()));
    }
    let scale = weight.scale()?;
    let n = post.num_weights();
    let rho = post.rho.to_flat();
    let dsigma: Vec<f64> = rho.iter().map(|&r| sigmoid(r)).collect();
    let s_inv = 1.0 / noise.len() as f64;
    let (kl, kl_grad) = kl_with_grad(post, prior)?;
    let mut grad = vec![0.0; 2 * n];
    let mut nll = 0.0;
    let mut first_logits = None;
    for eps in noise {
        let w = weights_from_noise(post, eps)?;
        let (logits, cache) = mlp_forward(&w, batch.x())?;
        let (loss, dlogits) = softmax_xent(&logits, batch.y())?;
        nll += loss * s_inv;
        let gw = mlp_backward(&w, &cache, &dlogits)?.to_flat();
        for i in 0..n {
            grad[i] += gw[i] * s_inv;
            grad[n + i] += gw[i] * eps[i] * dsigma[i] * s_inv;
        }
        first_logits.get_or_insert(logits);
    }
    for (g, k) in grad.iter_mut().zip(&kl_grad) {
        *g += scale * k;
    }
    let logits = first_logits.expect("at least one sample");
    Ok((FreeEnergyTerms::new(nll, kl, scale), grad, logits))
}

/// Free energy estimated with `samples` fresh weight draws.
pub fn free_energy(
    post: &MeanFieldPosterior,
    prior: &PriorSpec,
    batch: &LabeledSet,
    weight: KlWeight,
    samples: usize,
    rng: &mut RngState,
) -> Result<FreeEnergyTerms> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("free_energy"));
    }
    let scale = weight.scale()?;
    let nll = -mc_log_likelihood(post, batch, samples, rng)?;
    Ok(FreeEnergyTerms::new(nll, analytic_kl(post, prior)?, scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub lr: f64,
    /// Weight samples per step.
    pub samples: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_nll: f64,
    pub kl: f64,
    /// Accuracy of the sampled networks on the batches they were trained on.
    pub accuracy: f64,
    pub steps: usize,
}

/// One pass over `data` in shuffled mini-batches, one Adam step per batch.
pub fn train_epoch(
    post: &mut MeanFieldPosterior,
    prior: &PriorSpec,
    data: &LabeledSet,
    hyper: TrainHyper,
    weight: KlWeight,
    adam: &mut AdamState,
    rng: &mut RngState,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("train_epoch"));
    }
    if hyper.batch_size == 0 || hyper.samples == 0 {
        return Err(Error::InvalidArgument("batch size and sample count must be positive".into()));
    }
    let order = rng.permutation(data.len());
    let mut flat = post.to_flat();
    let (mut nll_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    let mut kl = 0.0;
    for idx in order.chunks(hyper.batch_size) {
        let batch = data.select(idx);
        let noise: Vec<Vec<f64>> = (0..hyper.samples).map(|_| sample_noise(post, rng)).collect();
        let (terms, grad, logits) = free_energy_grad_with_logits(post, prior, &batch, weight, &noise)?;
        let pred = logits.argmax_rows();
        correct += pred.iter().zip(batch.y()).filter(|(p, y)| p == y).count();
        nll_sum += terms.nll * batch.len() as f64;
        kl = terms.kl;
        adam_step(&mut flat, &grad, adam, hyper.lr)?;
        post.assign_flat(&flat)?;
        steps += 1;
    }
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("train_epoch"));
    }
    Ok(EpochStats {
        mean_nll: nll_sum / data.len() as f64,
        kl,
        accuracy: correct as f64 / data.len() as f64,
        steps,
    })
}

/// Posterior predictive: mean of softmax outputs over `samples` weight draws.
pub fn predict(post: &MeanFieldPosterior, x: &Matrix, samples: usize, rng: &mut RngState) -> Result<Matrix> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one weight sample".into()));
    }
    let mut acc = Matrix::zeros(x.rows(), NUM_CLASSES);
    for _ in 0..samples {
        let w = sample_weights(post, rng);
        acc.add_assign(&softmax(&mlp_predict(&w, x)?))?;
    }
    acc.scale(1.0 / samples as f64);
    Ok(acc)
}

/// Snapshot of the current posterior as the next prior (`μ₀ = μ`, `σ₀ = softplus(ρ)`).
pub fn vcl_prior_update(post: &MeanFieldPosterior) -> PriorSpec {
    PriorSpec::PerWeight {
        mean: post.mu.clone(),
        std: post.sigma(),
    }
}

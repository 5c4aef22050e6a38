//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Each noisy step contributes `RDP(α)` at every integer order; steps compose
//! by addition and the total converts to `(ε, δ)` by
//! `ε = min_α RDP(α) + ln(1/δ)/(α − 1)`.

use super::ledger::PrivacyLedger;
use crate::error::{Error, Result};

/// Upper end of the noise-multiplier search in [`calibrate_sigma`].
pub const MAX_SIGMA: f64 = 1e6;

/// `{2, …, 64} ∪ {128, 256}`.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    orders: Vec<u32>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn zeros(orders: &[u32]) -> Self {
        Self {
            orders: orders.to_vec(),
            values: vec![0.0; orders.len()],
        }
    }

    pub fn new(orders: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} orders but {} values",
                orders.len(),
                values.len()
            )));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) || orders.first().is_some_and(|&a| a < 2) {
            return Err(Error::InvalidArgument("orders must be ascending and ≥ 2".into()));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidArgument("RDP values must be non-negative".into()));
        }
        Ok(Self { orders, values })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, order: u32) -> Option<f64> {
        self.orders.iter().position(|&a| a == order).map(|i| self.values[i])
    }

    /// Pointwise sum; both curves must share an order grid.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::InvalidArgument("RDP curves use different orders".into()));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    /// Curve of `count` repetitions of one mechanism.
    pub fn scaled(&self, count: u64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().map(|v| count as f64 * v).collect(),
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of one step of the Gaussian mechanism (noise multiplier `sigma`) on a
/// batch sampled with rate `q`, at integer order `alpha`.
///
/// For `q < 1` this is `(1/(α−1)) · ln Σ_k C(α,k) (1−q)^{α−k} q^k e^{k(k−1)/(2σ²)}`,
/// summed in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::InvalidArgument(format!("RDP order must be ≥ 2, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise multiplier must be > 0, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate must be in (0, 1], got {q}")));
    }
    let a = alpha as f64;
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let mut ln_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            ln_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        let term = ln_binom + (a - kf) * ln_1mq + kf * ln_q + kf * (kf - 1.0) / (2.0 * sigma * sigma);
        acc = log_add_exp(acc, term);
    }
    // the k = 0 and k = 1 terms alone sum to ≥ 1 in linear space, so acc ≥ 0 up to rounding
    Ok((acc / (a - 1.0)).max(0.0))
}

/// RDP curve of one step; a zero noise multiplier yields an infinite curve.
pub fn step_curve(q: f64, sigma: f64, orders: &[u32]) -> Result<RdpCurve> {
    let values = if sigma == 0.0 {
        vec![f64::INFINITY; orders.len()]
    } else {
        orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

/// `RDP(α) = Σ_entries count · rdp_subsampled_gaussian(q, σ, α)`.
pub fn compose(ledger: &PrivacyLedger, orders: &[u32]) -> Result<RdpCurve> {
    let mut total = RdpCurve::zeros(orders);
    let mut last: Option<(f64, f64, RdpCurve)> = None;
    for e in ledger.entries() {
        let curve = match &last {
            Some((q, s, c)) if *q == e.q && *s == e.sigma => c.clone(),
            _ => {
                let c = step_curve(e.q, e.sigma, orders)?;
                last = Some((e.q, e.sigma, c.clone()));
                c
            }
        };
        for (t, v) in total.values.iter_mut().zip(&curve.values) {
            *t += e.count as f64 * v;
        }
    }
    Ok(total)
}

/// Converts an RDP curve to `(ε, argmin order)` at the given `δ`.
///
/// A curve that is zero at every order certifies identical output
/// distributions, so it reports `ε = 0` at the largest order.
pub fn to_eps_delta(curve: &RdpCurve, delta: f64) -> Result<(f64, u32)> {
    if curve.orders.is_empty() {
        return Err(Error::InvalidArgument("empty RDP curve".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
    }
    if curve.values.iter().all(|&v| v == 0.0) {
        return Ok((0.0, *curve.orders.last().unwrap()));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, *curve.orders.last().unwrap());
    for (&a, &v) in curve.orders.iter().zip(&curve.values) {
        let eps = v + log_inv_delta / (a as f64 - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// ε after `steps` identical steps at `(q, σ)`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<(f64, u32)> {
    let curve = step_curve(q, sigma, orders)?.scaled(steps);
    to_eps_delta(&curve, delta)
}

/// Smallest noise multiplier (to 1e-4 relative) for which `steps` steps at
/// rate `q` stay within `(target_eps, delta)`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_eps > 0.0) {
        return Err(Error::InvalidArgument(format!("target epsilon must be > 0, got {target_eps}")));
    }
    let orders = default_orders();
    let eps = |s: f64| epsilon_for(q, s, steps, delta, &orders).map(|(e, _)| e);
    if steps == 0 {
        return Ok(0.0);
    }
    let infeasible = || Error::InfeasibleBudget {
        target: target_eps,
        delta,
        max_sigma: MAX_SIGMA,
    };
    let mut hi = 1.0;
    while eps(hi)? > target_eps {
        hi *= 2.0;
        if hi > MAX_SIGMA {
            if eps(MAX_SIGMA)? > target_eps {
                return Err(infeasible());
            }
            hi = MAX_SIGMA;
            break;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-4 * hi {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

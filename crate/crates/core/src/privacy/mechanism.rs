//! Per-example clipping and Gaussian noising of gradients.

use super::ClipMode;
use crate::nn::{PerExampleGrads, RngState};

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clip_slice(v: &mut [f64], bound: f64) {
    let norm = l2_norm(v);
    // bound / 0 is +inf, so zero gradients keep factor 1
    let factor = (bound / norm).min(1.0);
    if factor < 1.0 {
        v.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Scales each example's gradient to norm at most `clip_norm`.
///
/// With [`ClipMode::PerLayer`] each of the `L` layer blocks is clipped to
/// `clip_norm / √L`, which keeps the whole vector within `clip_norm`.
pub fn clip(mut grads: PerExampleGrads, clip_norm: f64, mode: ClipMode) -> PerExampleGrads {
    let ranges = grads.layer_ranges().to_vec();
    for i in 0..grads.batch_size() {
        let g = grads.example_mut(i);
        match mode {
            ClipMode::Global => clip_slice(g, clip_norm),
            ClipMode::PerLayer => {
                let bound = clip_norm / (ranges.len() as f64).sqrt();
                for r in &ranges {
                    clip_slice(&mut g[r.clone()], bound);
                }
            }
        }
    }
    grads
}

/// `(Σᵢ gᵢ + N(0, σ²C²·I)) / batch`. No noise is drawn when `sigma == 0`.
pub fn privatize(clipped: &PerExampleGrads, clip_norm: f64, sigma: f64, rng: &mut RngState) -> Vec<f64> {
    let mut sum = clipped.sum();
    if sigma > 0.0 {
        let std = sigma * clip_norm;
        for v in sum.iter_mut() {
            *v += std * rng.normal();
        }
    }
    let n = clipped.batch_size() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    sum
}

pub fn example_norm(grads: &PerExampleGrads, i: usize) -> f64 {
    l2_norm(grads.example(i))
}

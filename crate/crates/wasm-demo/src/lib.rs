//! wasm-bindgen exports for `www/index.html`. Each export is a thin wrapper
//! over a plain function so the logic can be tested natively.

use dpvger::nn::{Matrix, PerExampleGrads, RngState};
use dpvger::privacy::{calibrate_sigma, clip, default_orders, epsilon_for, privatize, ClipMode};
use dpvger::Result;
use wasm_bindgen::prelude::*;

/// `points` evenly spaced step counts in `1..=max_steps` and the ε spent
/// after each, interleaved as `[steps, ε, steps, ε, ...]`.
pub fn epsilon_curve_points(q: f64, sigma: f64, delta: f64, max_steps: u64, points: usize) -> Result<Vec<f64>> {
    let orders = default_orders();
    let points = points.max(1) as u64;
    let mut out = Vec::with_capacity(2 * points as usize);
    let mut last = 0;
    for i in 1..=points {
        let steps = (max_steps * i / points).max(1);
        if steps == last {
            continue;
        }
        last = steps;
        let (eps, _) = epsilon_for(q, sigma, steps, delta, &orders)?;
        out.push(steps as f64);
        out.push(eps);
    }
    Ok(out)
}

/// Clips each 2-D point to norm `clip_norm` and returns the clipped points
/// followed by the privatized mean, flattened as `[x0, y0, ..., mx, my]`.
pub fn clip_and_noise_points(points: &[f64], clip_norm: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let n = points.len() / 2;
    let grads = Matrix::from_vec(n, 2, points[..2 * n].to_vec())?;
    let clipped = clip(PerExampleGrads::new(grads, vec![0..2])?, clip_norm, ClipMode::Global);
    let mut out: Vec<f64> = (0..n).flat_map(|i| clipped.example(i).to_vec()).collect();
    if n > 0 {
        out.extend(privatize(&clipped, clip_norm, sigma, &mut RngState::new(seed)));
    }
    Ok(out)
}

fn js(e: dpvger::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn epsilon_curve(q: f64, sigma: f64, delta: f64, max_steps: u32, points: u32) -> std::result::Result<Vec<f64>, JsError> {
    epsilon_curve_points(q, sigma, delta, max_steps as u64, points as usize).map_err(js)
}

#[wasm_bindgen]
pub fn calibrate(target_eps: f64, delta: f64, q: f64, steps: u32) -> std::result::Result<f64, JsError> {
    calibrate_sigma(target_eps, delta, q, steps as u64).map_err(js)
}

#[wasm_bindgen]
pub fn clip_and_noise(points: &[f64], clip_norm: f64, sigma: f64, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    clip_and_noise_points(points, clip_norm, sigma, seed as u64).map_err(js)
}

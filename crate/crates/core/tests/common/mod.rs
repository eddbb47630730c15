//! Independent oracles shared by the integration tests. Nothing here calls
//! the code path it is used to check.
#![allow(dead_code)]

use diffusion_core::denoiser_net::{loss_and_grad, DenoiserParams, TrainItem, Weighting};
use diffusion_core::Schedule;

/// Central finite differences of the batch loss with step `h`.
pub fn fd_gradient(params: &DenoiserParams, batch: &[TrainItem], s: &Schedule, weighting: Weighting, h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.num_params())
        .map(|i| {
            let orig = p.flat()[i];
            p.flat_mut()[i] = orig + h;
            let up = loss_and_grad(&p, batch, s, weighting).unwrap().loss;
            p.flat_mut()[i] = orig - h;
            let down = loss_and_grad(&p, batch, s, weighting).unwrap().loss;
            p.flat_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Posterior moments of `x_{t-1}` by direct Bayes on a uniform grid:
/// prior `N(sqrt(ab_prev) x0, 1 - ab_prev)`, likelihood
/// `N(x_t; sqrt(alpha_t) x_{t-1}, beta_t)`.
pub fn grid_posterior(beta_t: f64, ab_prev: f64, x_t: f64, x0: f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let prior_m = ab_prev.sqrt() * x0;
    let prior_v = 1.0 - ab_prev;
    let a = (1.0 - beta_t).sqrt();
    let dx = (hi - lo) / (n - 1) as f64;
    let logw: Vec<f64> = (0..n)
        .map(|i| {
            let x = lo + i as f64 * dx;
            -(x - prior_m).powi(2) / (2.0 * prior_v) - (x_t - a * x).powi(2) / (2.0 * beta_t)
        })
        .collect();
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean = w.iter().enumerate().map(|(i, wi)| wi * (lo + i as f64 * dx)).sum::<f64>() / z;
    let var = w
        .iter()
        .enumerate()
        .map(|(i, wi)| wi * (lo + i as f64 * dx - mean).powi(2))
        .sum::<f64>()
        / z;
    (mean, var)
}

mod common;

use common::grid_posterior;
use diffusion_core::denoiser_net::{mu_theta, NoisePredictor};
use diffusion_core::gaussian_analytics::{elbo_report, posterior};
use diffusion_core::{NoiseRng, Schedule, SigmaMode, Tensor};

/// Random linear schedule, step and endpoints.
fn random_case(rng: &mut NoiseRng) -> (Schedule, usize, f64, f64) {
    let steps = 2 + rng.below(199) as usize;
    let start = 1e-4 + 0.05 * rng.uniform();
    let end = start + (0.5 - start) * rng.uniform();
    let s = Schedule::linear(steps, start, end, SigmaMode::PosteriorBeta).unwrap();
    let t = 2 + rng.below(steps as u64 - 1) as usize;
    (s, t, 2.0 * rng.uniform() - 1.0, 3.0 * rng.standard_normal())
}

#[test]
fn posterior_matches_grid_bayes() {
    let mut rng = NoiseRng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (s, t, x0, xt) = random_case(&mut rng);
        let beta = s.beta(t);
        let ab_prev = s.alpha_bar(t - 1);
        let (pm, ps) = ((ab_prev.sqrt() * x0), (1.0 - ab_prev).sqrt());
        let (lm, ls) = (xt / (1.0 - beta).sqrt(), (beta / (1.0 - beta)).sqrt());
        let lo = (pm - 12.0 * ps).min(lm - 12.0 * ls);
        let hi = (pm + 12.0 * ps).max(lm + 12.0 * ls);
        let n = (((hi - lo) / (ps.min(ls) / 40.0)) as usize).clamp(2001, 4_000_001);
        let (gm, gv) = grid_posterior(beta, ab_prev, xt, x0, lo, hi, n);
        let post = posterior(&Tensor::scalar(xt), &Tensor::scalar(x0), t, &s).unwrap();
        let err = (post.mean.data()[0] - gm).abs().max((post.var.at(0) - gv).abs());
        worst = worst.max(err);
        assert!(err < 1e-6, "t = {t}, x0 = {x0}, x_t = {xt}: error {err:e}");
    }
    println!("worst posterior error {worst:.2e}");
}

/// `log p_theta(x0)` for a 1-D model with `p(x_T) = N(0, 1)`, Gaussian
/// reverse kernels of variance `sigma_t^2` and reconstruction variance
/// `beta_1`, by propagating the density over a grid.
fn grid_log_likelihood(
    model: &dyn NoisePredictor,
    s: &Schedule,
    x0: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> f64 {
    let dx = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    let normal = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let mut dens: Vec<f64> = grid.iter().map(|&x| normal(x, 0.0, 1.0)).collect();
    let means = |t: usize| -> Vec<f64> {
        grid.iter()
            .map(|&x| mu_theta(model, &Tensor::scalar(x), t, s, None).unwrap().data()[0])
            .collect()
    };
    for t in (2..=s.steps()).rev() {
        let mu = means(t);
        let v = s.sigma_sq(t);
        dens = grid
            .iter()
            .map(|&y| (0..n).map(|j| dens[j] * normal(y, mu[j], v)).sum::<f64>() * dx)
            .collect();
    }
    let mu = means(1);
    let p: f64 = (0..n).map(|j| dens[j] * normal(x0, mu[j], s.beta(1))).sum::<f64>() * dx;
    p.ln()
}

#[test]
fn elbo_bounds_the_exact_log_likelihood() {
    let s = Schedule::linear(3, 0.1, 0.4, SigmaMode::Beta).unwrap();
    let zero = |x: &Tensor, _: usize, _: Option<usize>| Tensor::zeros(x.shape());
    let linear = |x: &Tensor, t: usize, _: Option<usize>| x.scale(0.2 + 0.1 * t as f64);
    let models: [(&str, &dyn NoisePredictor); 2] = [("zero", &zero), ("linear", &linear)];
    let mut rng = NoiseRng::new(5);
    for (name, model) in models {
        for x0 in [-0.8, 0.0, 0.35, 1.0] {
            let log_p = grid_log_likelihood(model, &s, x0, -12.0, 12.0, 3001);
            let r = elbo_report(&Tensor::scalar(x0), model, &s, &mut rng, 20_000, None).unwrap();
            println!("{name} x0 = {x0}: ELBO {:.5} ± {:.5}, log p {log_p:.5}", r.total, r.total_std_err);
            assert!(r.total <= log_p + 4.0 * r.total_std_err, "{name} x0 = {x0}");
            assert!(log_p.is_finite());
        }
    }
}

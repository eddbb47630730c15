//! Ancestral sampling of the learned reverse chain.
//!
//! At t = 1 the noise term is dropped and the step returns its mean; an
//! optional clamp to `[-1, 1]` maps the result back to the data range.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser_net::{mu_theta, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::schedule::{Schedule, SigmaMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinalDecode {
    None,
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "stride")]
pub enum Record {
    #[default]
    Final,
    All,
    /// States at multiples of the stride, plus T and 0.
    Stride(usize),
}

impl Record {
    fn keeps(&self, t: usize, steps: usize) -> bool {
        match *self {
            Record::Final => false,
            Record::All => true,
            Record::Stride(k) => t == 0 || t == steps || t % k.max(1) == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRunConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub sigma_mode: SigmaMode,
    pub record: Record,
    pub final_decode: FinalDecode,
}

impl Default for SampleRunConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
            sigma_mode: SigmaMode::PosteriorBeta,
            record: Record::Final,
            final_decode: FinalDecode::Clamp,
        }
    }
}

/// `mu + sigma_t z`, or `mu` alone at t = 1.
fn add_step_noise(mu: Tensor, t: usize, s: &Schedule, z: &Tensor) -> Tensor {
    if t == 1 {
        return mu;
    }
    mu.lincomb(1.0, z, s.sigma_sq(t).sqrt())
}

/// `x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) z_theta(x_t, t)) / sqrt(alpha_t) + sigma_t z`
/// with a given `z`.
pub fn reverse_step_with_noise<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    t: usize,
    s: &Schedule,
    z: &Tensor,
    cond: Option<usize>,
) -> Result<Tensor> {
    z.ensure_shape(x_t.shape())?;
    let mu = mu_theta(model, x_t, t, s, cond)?;
    Ok(add_step_noise(mu, t, s, z))
}

/// One reverse step with fresh noise from `rng`. No noise is drawn at t = 1.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    t: usize,
    s: &Schedule,
    rng: &mut NoiseRng,
    cond: Option<usize>,
) -> Result<Tensor> {
    s.check_step(t, 1)?;
    let mu = mu_theta(model, x_t, t, s, cond)?;
    if t == 1 {
        return Ok(mu);
    }
    let z = rng.normal_like(x_t.shape());
    Ok(add_step_noise(mu, t, s, &z))
}

/// `x_{t-1} = mu + sigma_t z` for a mean from any predictor.
pub fn reverse_step_direct(mu: &Tensor, t: usize, s: &Schedule, rng: &mut NoiseRng) -> Result<Tensor> {
    s.check_step(t, 1)?;
    if t == 1 {
        return Ok(mu.clone());
    }
    let z = rng.normal_like(mu.shape());
    Ok(add_step_noise(mu.clone(), t, s, &z))
}

/// As [`reverse_step_direct`] with a given `z`.
pub fn reverse_step_direct_with_noise(mu: &Tensor, t: usize, s: &Schedule, z: &Tensor) -> Result<Tensor> {
    s.check_step(t, 1)?;
    z.ensure_shape(mu.shape())?;
    Ok(add_step_noise(mu.clone(), t, s, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub samples: Vec<Tensor>,
    /// Per sample, `(t, x_t)` in descending t, when recording was requested.
    pub intermediates: Option<Vec<Vec<(usize, Tensor)>>>,
}

impl SampleRun {
    /// CSV `sample_id,t,component_index,value`, or without the `t` column when
    /// no intermediates were recorded.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match &self.intermediates {
            None => {
                writeln!(w, "sample_id,component_index,value")?;
                for (i, x) in self.samples.iter().enumerate() {
                    for (k, v) in x.data().iter().enumerate() {
                        writeln!(w, "{i},{k},{v:?}")?;
                    }
                }
            }
            Some(paths) => {
                writeln!(w, "sample_id,t,component_index,value")?;
                for (i, path) in paths.iter().enumerate() {
                    for (t, x) in path {
                        for (k, v) in x.data().iter().enumerate() {
                            writeln!(w, "{i},{t},{k},{v:?}")?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws `x_T ~ N(0, I)` and runs the reverse chain down to `x_0`.
///
/// Sample `i` uses stream `i` of `cfg.seed`; samples run in parallel.
/// The reverse variance follows `cfg.sigma_mode`, not the schedule's own.
pub fn generate<P: NoisePredictor + ?Sized>(
    model: &P,
    s: &Schedule,
    cfg: &SampleRunConfig,
    shape: &[usize],
    cond: Option<usize>,
) -> Result<SampleRun> {
    if cfg.n_samples == 0 {
        return Err(Error::domain("n_samples", "must be at least 1"));
    }
    let s = s.with_sigma_mode(cfg.sigma_mode);
    let steps = s.steps();
    let runs: Vec<Result<(Tensor, Vec<(usize, Tensor)>)>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = NoiseRng::stream(cfg.seed, i as u64);
            let mut x = rng.normal_like(shape);
            let mut path = Vec::new();
            if cfg.record.keeps(steps, steps) {
                path.push((steps, x.clone()));
            }
            for t in (1..=steps).rev() {
                x = reverse_step(model, &x, t, &s, &mut rng, cond)?;
                if !x.is_finite() {
                    return Err(Error::NonFinite { t });
                }
                if t == 1 && cfg.final_decode == FinalDecode::Clamp {
                    x = x.map(|v| v.clamp(-1.0, 1.0));
                }
                if cfg.record.keeps(t - 1, steps) {
                    path.push((t - 1, x.clone()));
                }
            }
            Ok((x, path))
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut paths = Vec::with_capacity(cfg.n_samples);
    for r in runs {
        let (x, path) = r?;
        samples.push(x);
        paths.push(path);
    }
    let intermediates = (cfg.record != Record::Final).then_some(paths);
    Ok(SampleRun { samples, intermediates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser_net::{DenoiserConfig, DenoiserParams};
    use crate::forward_process::sample_marginal;
    use crate::gaussian_analytics::posterior_mean_coefs;
    use crate::stats::mean_var;

    fn two_step() -> Schedule {
        Schedule::linear(2, 0.1, 0.2, SigmaMode::Beta).unwrap()
    }

    fn zero(x: &Tensor, _: usize, _: Option<usize>) -> Tensor {
        Tensor::zeros(x.shape())
    }

    #[test]
    fn zero_model_zero_noise_rescales() {
        let s = two_step();
        let x = Tensor::vector(vec![0.5, -1.0]);
        let out = reverse_step_with_noise(&zero, &x, 2, &s, &Tensor::zeros(&[2]), None).unwrap();
        assert_eq!(out, x.scale(1.0 / s.alpha(2).sqrt()));
    }

    #[test]
    fn hand_evaluated_step() {
        // (1 - 0.2 * 0.2 / sqrt(0.28)) / sqrt(0.8) + sqrt(0.2) * 0.1 at 50 digits
        let s = two_step();
        let pinned = |x: &Tensor, _: usize, _: Option<usize>| Tensor::filled(x.shape(), 0.2);
        let out = reverse_step_with_noise(&pinned, &Tensor::scalar(1.0), 2, &s, &Tensor::scalar(0.1), None).unwrap();
        assert!((out.data()[0] - 1.0782399228270390).abs() < 1e-14);
    }

    #[test]
    fn last_step_is_noise_free() {
        let s = two_step();
        let x = Tensor::scalar(0.3);
        let a = reverse_step(&zero, &x, 1, &s, &mut NoiseRng::new(1), None).unwrap();
        let b = reverse_step(&zero, &x, 1, &s, &mut NoiseRng::new(2), None).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&zero, &x, 3, &s, &mut NoiseRng::new(2), None).is_err());
    }

    #[test]
    fn direct_recursion_examples() {
        let s = Schedule::linear(5, 0.1, 0.3, SigmaMode::Beta).unwrap();
        let mu = Tensor::vector(vec![0.2, -0.4]);
        let z = Tensor::vector(vec![1.5, 0.5]);
        let out = reverse_step_direct_with_noise(&mu, 3, &s, &z).unwrap();
        let sd = s.beta(3).sqrt();
        assert_eq!(out.data(), &[0.2 + sd * 1.5, -0.4 + sd * 0.5]);
        assert_eq!(reverse_step_direct_with_noise(&mu, 1, &s, &z).unwrap(), mu);
    }

    #[test]
    fn recursions_agree_bitwise() {
        let s = Schedule::linear(30, 1e-3, 0.2, SigmaMode::Beta).unwrap();
        let p = DenoiserParams::init(DenoiserConfig::toy(2, 30), 3).unwrap();
        let mut rng = NoiseRng::new(5);
        for t in 1..=30 {
            let x = rng.normal_like(&[2]);
            let a = reverse_step(&p, &x, t, &s, &mut NoiseRng::new(t as u64), None).unwrap();
            let mu = mu_theta(&p, &x, t, &s, None).unwrap();
            let b = reverse_step_direct(&mu, t, &s, &mut NoiseRng::new(t as u64)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn variance_identity() {
        let s = Schedule::linear(100, 1e-4, 0.1, SigmaMode::PosteriorBeta).unwrap();
        for t in 2..=100 {
            let (c, _) = posterior_mean_coefs(&s, t);
            let lhs = c * c * (1.0 - s.alpha_bar(t)) + s.sigma_sq(t);
            assert!((lhs - (1.0 - s.alpha_bar(t - 1))).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_step_preserves_marginal() {
        let s = Schedule::linear(50, 1e-3, 0.1, SigmaMode::PosteriorBeta).unwrap();
        let x0 = Tensor::scalar(0.8);
        let t = 20;
        let sc = s.clone();
        let x0c = x0.clone();
        let oracle = move |xt: &Tensor, t: usize, _: Option<usize>| {
            let ab = sc.alpha_bar(t);
            xt.lincomb(1.0 / (1.0 - ab).sqrt(), &x0c, -(ab / (1.0 - ab)).sqrt())
        };
        let mut rng = NoiseRng::new(8);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let (xt, _) = sample_marginal(&x0, t, &s, &mut rng).unwrap();
                reverse_step(&oracle, &xt, t, &s, &mut rng, None).unwrap().data()[0]
            })
            .collect();
        let (m, v) = mean_var(&xs);
        let ev = 1.0 - s.alpha_bar(t - 1);
        let em = s.alpha_bar(t - 1).sqrt() * 0.8;
        assert!((m - em).abs() < 4.0 * (ev / n as f64).sqrt());
        assert!((v - ev).abs() < 4.0 * ev * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn generate_records_and_is_deterministic() {
        let s = Schedule::linear(20, 1e-3, 0.2, SigmaMode::PosteriorBeta).unwrap();
        let p = DenoiserParams::init(DenoiserConfig::toy(1, 20), 3).unwrap();
        let cfg = SampleRunConfig {
            n_samples: 5,
            seed: 4,
            record: Record::All,
            ..SampleRunConfig::default()
        };
        let a = generate(&p, &s, &cfg, &[1], None).unwrap();
        let b = generate(&p, &s, &cfg, &[1], None).unwrap();
        assert_eq!(a, b);
        let paths = a.intermediates.as_ref().unwrap();
        assert_eq!(paths.len(), 5);
        for path in paths {
            assert_eq!(path.len(), 21);
            assert_eq!(path[0].0, 20);
            assert_eq!(path[20].0, 0);
            assert!(path.iter().all(|(_, x)| x.shape() == [1]));
        }
        for x in &a.samples {
            assert!(x.data()[0].abs() <= 1.0);
        }
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,t,component_index,value\n0,20,0,"));

        let plain = generate(&p, &s, &SampleRunConfig { record: Record::Final, ..cfg }, &[1], None).unwrap();
        assert!(plain.intermediates.is_none());
        assert_eq!(plain.samples, a.samples);
        let strided = generate(&p, &s, &SampleRunConfig { record: Record::Stride(8), ..cfg }, &[1], None).unwrap();
        let ts: Vec<usize> = strided.intermediates.unwrap()[0].iter().map(|(t, _)| *t).collect();
        assert_eq!(ts, vec![20, 16, 8, 0]);
    }
}

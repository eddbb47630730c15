//! Closed-form Gaussian quantities of the noising chain and the evidence
//! lower bound assembled from them.

use std::io::Write;

use crate::denoiser_net::{likelihood_variance, mu_theta, NoisePredictor};
use crate::error::{Error, Result};
use crate::forward_process::sample_marginal;
use crate::rng::NoiseRng;
use crate::schedule::Schedule;
use crate::stats::mean_stderr;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Variance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl Variance {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Variance::Isotropic(v) => *v,
            Variance::Diagonal(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Tensor,
    pub var: Variance,
}

impl GaussianDiag {
    pub fn isotropic(mean: Tensor, var: f64) -> Self {
        Self {
            mean,
            var: Variance::Isotropic(var),
        }
    }

    pub fn log_density(&self, x: &Tensor) -> f64 {
        self.mean
            .data()
            .iter()
            .zip(x.data())
            .enumerate()
            .map(|(i, (m, v))| {
                let s2 = self.var.at(i);
                -0.5 * ((std::f64::consts::TAU * s2).ln() + (v - m).powi(2) / s2)
            })
            .sum()
    }
}

/// Coefficients `(c_xt, c_x0)` of the posterior mean
/// `c_xt * x_t + c_x0 * x_0` at step `t`.
pub fn posterior_mean_coefs(s: &Schedule, t: usize) -> (f64, f64) {
    let denom = 1.0 - s.alpha_bar(t);
    (
        s.alpha(t).sqrt() * (1.0 - s.alpha_bar(t - 1)) / denom,
        s.beta(t) * s.alpha_bar(t - 1).sqrt() / denom,
    )
}

/// `p(x_{t-1} | x_t, x_0)`. At t = 1 the variance is exactly 0 and the
/// mean is `x_0`.
pub fn posterior(x_t: &Tensor, x0: &Tensor, t: usize, s: &Schedule) -> Result<GaussianDiag> {
    s.check_step(t, 1)?;
    x_t.ensure_shape(x0.shape())?;
    let (a, b) = posterior_mean_coefs(s, t);
    Ok(GaussianDiag::isotropic(x_t.lincomb(a, x0, b), s.posterior_variance(t)))
}

/// Parameter-dependent part of `KL(p || q)` for equal covariances,
/// `sum_i (mu_p - mu_q)_i^2 / (2 var_i)`. The additive constant is taken as 0;
/// for equal covariances it is exactly 0.
pub fn gaussian_kl_equal_cov(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    q.mean.ensure_shape(p.mean.shape())?;
    let mut kl = 0.0;
    for (i, (a, b)) in p.mean.data().iter().zip(q.mean.data()).enumerate() {
        let (vp, vq) = (p.var.at(i), q.var.at(i));
        if vp != vq {
            return Err(Error::VarianceMismatch { p: vp, q: vq });
        }
        if vp <= 0.0 {
            return Err(Error::domain("var", format!("{vp} is not positive")));
        }
        kl += (a - b).powi(2) / (2.0 * vp);
    }
    Ok(kl)
}

/// Full `KL(p || q)` between diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    q.mean.ensure_shape(p.mean.shape())?;
    let mut kl = 0.0;
    for (i, (a, b)) in p.mean.data().iter().zip(q.mean.data()).enumerate() {
        let (vp, vq) = (p.var.at(i), q.var.at(i));
        if vq <= 0.0 || vp < 0.0 {
            return Err(Error::domain("var", format!("({vp}, {vq}) not admissible")));
        }
        let log_ratio = if vp == 0.0 { f64::INFINITY } else { (vq / vp).ln() };
        kl += 0.5 * (vp / vq - 1.0 + log_ratio + (a - b).powi(2) / vq);
    }
    Ok(kl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Monte-Carlo evidence lower bound for one datum,
/// `total = reconstruction - sum(kl_terms) - prior`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    /// `E[log p_theta(x_0 | x_1)]` under a Gaussian likelihood.
    pub reconstruction: Estimate,
    /// `kl_terms[i]` is the term for `t = i + 2`.
    pub kl_terms: Vec<Estimate>,
    /// `KL(p(x_T | x_0) || N(0, I))`, exact.
    pub prior: f64,
    pub total: f64,
    /// Terms are estimated from independent draws, so errors add in quadrature.
    pub total_std_err: f64,
}

impl ElboReport {
    /// CSV `term,t,value,std_err`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "term,t,value,std_err")?;
        let r = self.reconstruction;
        writeln!(w, "reconstruction,1,{:?},{:?}", r.value, r.std_err)?;
        for (i, k) in self.kl_terms.iter().enumerate() {
            writeln!(w, "kl,{},{:?},{:?}", i + 2, k.value, k.std_err)?;
        }
        writeln!(w, "prior,{},{:?},0.0", self.kl_terms.len() + 1, self.prior)?;
        writeln!(w, "total,,{:?},{:?}", self.total, self.total_std_err)
    }
}

/// Closed form of `KL(N(sqrt(ab_T) x0, (1 - ab_T) I) || N(0, I))`.
pub fn prior_kl(x0: &Tensor, s: &Schedule) -> f64 {
    let ab = s.alpha_bar(s.steps());
    let v = 1.0 - ab;
    x0.data()
        .iter()
        .map(|x| 0.5 * (v + ab * x * x - 1.0 - v.ln()))
        .sum()
}

/// Estimates the bound with `n_mc` draws of `x_t ~ p(x_t | x_0)` per term.
///
/// The model's reverse variance is `sigma_t^2` from the schedule; where it is
/// zero (t = 1 under the posterior variance) `beta_t` is used instead.
pub fn elbo_report<P: NoisePredictor + ?Sized>(
    x0: &Tensor,
    model: &P,
    s: &Schedule,
    rng: &mut NoiseRng,
    n_mc: usize,
    cond: Option<usize>,
) -> Result<ElboReport> {
    if n_mc == 0 {
        return Err(Error::domain("n_mc", "must be at least 1"));
    }
    let mut draws = Vec::with_capacity(n_mc);
    let rec_var = likelihood_variance(s, 1);
    for _ in 0..n_mc {
        let (x1, _) = sample_marginal(x0, 1, s, rng)?;
        let mu = mu_theta(model, &x1, 1, s, cond)?;
        draws.push(GaussianDiag::isotropic(mu, rec_var).log_density(x0));
    }
    let (value, std_err) = mean_stderr(&draws);
    let reconstruction = Estimate { value, std_err };

    let mut kl_terms = Vec::with_capacity(s.steps().saturating_sub(1));
    for t in 2..=s.steps() {
        draws.clear();
        let model_var = likelihood_variance(s, t);
        for _ in 0..n_mc {
            let (xt, _) = sample_marginal(x0, t, s, rng)?;
            let post = posterior(&xt, x0, t, s)?;
            let model_step = GaussianDiag::isotropic(mu_theta(model, &xt, t, s, cond)?, model_var);
            draws.push(gaussian_kl(&post, &model_step)?);
        }
        let (value, std_err) = mean_stderr(&draws);
        kl_terms.push(Estimate { value, std_err });
    }
    let prior = prior_kl(x0, s);
    let total = reconstruction.value - kl_terms.iter().map(|k| k.value).sum::<f64>() - prior;
    let total_std_err = (reconstruction.std_err.powi(2) + kl_terms.iter().map(|k| k.std_err.powi(2)).sum::<f64>()).sqrt();
    Ok(ElboReport {
        reconstruction,
        kl_terms,
        prior,
        total,
        total_std_err,
    })
}

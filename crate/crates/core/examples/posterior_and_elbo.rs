//! Forward posteriors and the evidence lower bound for a single datum, with
//! a zero predictor and with the exact noise oracle.
//!
//!     cargo run --release --example posterior_and_elbo

use diffusion_core::forward_process::sample_marginal;
use diffusion_core::gaussian_analytics::{elbo_report, posterior, posterior_mean_coefs};
use diffusion_core::{NoiseRng, Schedule, SigmaMode, Tensor};

fn main() -> diffusion_core::Result<()> {
    let s = Schedule::linear(50, 1e-3, 0.3, SigmaMode::PosteriorBeta)?;
    let x0 = Tensor::scalar(0.6);
    let mut rng = NoiseRng::new(1);

    for t in [2, 10, 25, 50] {
        let (xt, _) = sample_marginal(&x0, t, &s, &mut rng)?;
        let post = posterior(&xt, &x0, t, &s)?;
        let (cx0, cxt) = posterior_mean_coefs(&s, t);
        println!(
            "t = {t:>2}: x_t = {:+.4}, mean = {cx0:.4} x0 + {cxt:.4} x_t = {:+.4}, var = {:.5}",
            xt.data()[0],
            post.mean.data()[0],
            post.var.at(0)
        );
    }

    let zero = |x: &Tensor, _: usize, _: Option<usize>| Tensor::zeros(x.shape());
    let elbo_zero = elbo_report(&x0, &zero, &s, &mut rng, 400, None)?;

    // x_t is scaled x0 plus noise, so the noise is recoverable exactly
    let oracle = |x: &Tensor, t: usize, _: Option<usize>| {
        let ab = s.alpha_bar(t);
        x.lincomb(1.0 / (1.0 - ab).sqrt(), &x0, -ab.sqrt() / (1.0 - ab).sqrt())
    };
    let elbo_oracle = elbo_report(&x0, &oracle, &s, &mut rng, 400, None)?;

    for (name, r) in [("zero predictor", &elbo_zero), ("noise oracle", &elbo_oracle)] {
        let kl: f64 = r.kl_terms.iter().map(|k| k.value).sum();
        println!(
            "{name:>14}: reconstruction {:+.4}  sum KL {kl:.4}  prior {:.2e}  ELBO {:+.4} ± {:.4}",
            r.reconstruction.value, r.prior, r.total, r.total_std_err
        );
    }
    let mut csv = Vec::new();
    elbo_zero.write_csv(&mut csv)?;
    println!("first rows of the per-term CSV:");
    for line in String::from_utf8_lossy(&csv).lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}

//! Forward noising of a two-mode distribution: the closed-form marginal
//! against step-by-step simulation, and the drift to N(0, 1).
//!
//!     cargo run --release --example forward_limit

use diffusion_core::datasets::MixtureSpec;
use diffusion_core::forward_process::{marginal_params, simulate_many};
use diffusion_core::stats::{mean_var, Histogram};
use diffusion_core::{Schedule, SigmaMode, Tensor};

fn main() -> diffusion_core::Result<()> {
    let s = Schedule::linear(1000, 0.0004, 0.06, SigmaMode::PosteriorBeta)?;
    println!("alpha_bar_T = {:.3e}, SDE gap = {:.2e}", s.alpha_bar(s.steps()), s.sde_consistency_gap());

    let x0s: Vec<Tensor> = MixtureSpec::default().sample(2000, 1).into_iter().map(|e| e.x).collect();
    let trajs = simulate_many(&x0s, &s, 42, 250);
    for t in [0, 250, 500, 750, 1000] {
        let xs: Vec<f64> = trajs.iter().map(|tr| tr.state_at(t).unwrap().data()[0]).collect();
        let (m, v) = mean_var(&xs);
        // closed-form moments of the mixture pushed through q(x_t | x_0)
        let (mut cm, mut cv2) = (0.0, 0.0);
        for x0 in &x0s {
            let (mu, var) = marginal_params(x0, t, &s)?;
            cm += mu.data()[0];
            cv2 += mu.data()[0].powi(2) + var;
        }
        let n = x0s.len() as f64;
        let (cm, cv) = (cm / n, cv2 / n - (cm / n).powi(2));
        println!("t = {t:>4}: simulated mean {m:+.4} var {v:.4} | closed form mean {cm:+.4} var {cv:.4}");
        let h = Histogram::new(&xs, -3.0, 3.0, 24);
        let line: String = h
            .counts
            .iter()
            .map(|&c| [' ', '.', ':', '*', '#'][((c as f64 / n * 60.0) as usize).min(4)])
            .collect();
        println!("         [{line}]");
    }
    Ok(())
}

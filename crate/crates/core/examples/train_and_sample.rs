//! Trains the noise predictor on a 1-D two-mode mixture and compares the
//! generated samples with the data.
//!
//!     cargo run --release --example train_and_sample -- [steps]

use std::time::Instant;

use diffusion_core::datasets::{first_components, unlabeled, MixtureSpec};
use diffusion_core::denoiser_net::{DenoiserConfig, DenoiserParams};
use diffusion_core::sampler::{generate, SampleRunConfig};
use diffusion_core::stats::{wasserstein_1d, Histogram};
use diffusion_core::trainer::{evaluate, train, TrainConfig};
use diffusion_core::{Schedule, SigmaMode};

fn main() -> diffusion_core::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let schedule = Schedule::linear(1000, 0.0004, 0.06, SigmaMode::PosteriorBeta)?;
    let spec = MixtureSpec::default();
    let data = unlabeled(&spec.sample(4000, 1));
    let held_out = unlabeled(&spec.sample(500, 2));

    let init = DenoiserParams::init(DenoiserConfig::toy(1, schedule.steps()), 3)?;
    let baseline = evaluate(&init, &held_out, &schedule, 8, 7)?;
    let cfg = TrainConfig {
        steps,
        eval_every: (steps / 10).max(1),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (params, log) = train(&data, Some(&held_out), &schedule, init, &cfg)?;
    println!("trained {steps} steps in {:.1?}", start.elapsed());
    for row in log.rows.iter().filter(|r| r.eval_metric.is_some()) {
        println!("  step {:>6}  held-out loss {:.4}", row.step, row.eval_metric.unwrap());
    }
    println!("untrained held-out loss {baseline:.4}");

    let start = Instant::now();
    let run = generate(&params, &schedule, &SampleRunConfig { seed: 11, ..SampleRunConfig::default() }, &[1], None)?;
    let generated: Vec<f64> = run.samples.iter().map(|x| x.data()[0]).collect();
    println!("sampled {} in {:.1?}", generated.len(), start.elapsed());
    let reference = first_components(&data);
    println!("W1(generated, data) = {:.4}", wasserstein_1d(&generated, &reference));

    let hd = Histogram::new(&reference, -1.0, 1.0, 20);
    let hg = Histogram::new(&generated, -1.0, 1.0, 20);
    for k in 0..20 {
        let (lo, _) = hd.bin_edges(k);
        let bar = |c: u64, n: usize| "#".repeat((c as f64 / n as f64 * 200.0) as usize);
        println!("{lo:>5.2} data {:<30} gen {}", bar(hd.counts[k], reference.len()), bar(hg.counts[k], generated.len()));
    }
    Ok(())
}

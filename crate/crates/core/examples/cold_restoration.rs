//! Cold diffusion on a toy dataset: trains an L1 restoration network against
//! a fixed-noise or blur degradation, then compares one-step restoration
//! with the iterative restore/re-degrade loop on held-out data.
//!
//!     cargo run --release --example cold_restoration -- [noise|blur] [steps]

use diffusion_core::cold_diffusion::{
    degrade, restore_iterative, restore_one_step, sample_limit_pool, train_restoration, DegradationOp,
};
use diffusion_core::datasets::{bumps, unlabeled, MixtureSpec};
use diffusion_core::denoiser_net::{DenoiserConfig, DenoiserParams};
use diffusion_core::trainer::TrainConfig;
use diffusion_core::{NoiseRng, Schedule, SigmaMode};

fn main() -> diffusion_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = args.next().unwrap_or_else(|| "noise".into());
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(6000);
    let severity = 20;

    let spec = MixtureSpec::default();
    let train_set = unlabeled(&spec.sample(2000, 1));
    let held_out = unlabeled(&spec.sample(400, 2));
    let op = match kind.as_str() {
        // blur needs spatial extent, so it runs on 16-sample bump signals
        "blur" => return blur_demo(steps),
        _ => {
            let s = Schedule::linear(severity, 0.01, 0.3, SigmaMode::Beta)?;
            DegradationOp::fixed_noise(s, NoiseRng::new(5).normal_like(&[1]))
        }
    };
    let init = DenoiserParams::init(DenoiserConfig::toy(1, severity), 3)?;
    let cfg = TrainConfig { steps, eval_every: steps, ..TrainConfig::default() };
    let (model, log) = train_restoration(&train_set, &op, init, &cfg)?;
    println!("final training L1 {:.4}", log.rows.last().unwrap().loss);

    let (mut one, mut iter) = (0.0, 0.0);
    for ex in &held_out {
        let xt = degrade(&op, &ex.x, severity)?;
        one += restore_one_step(&model, &xt, severity)?.sub(&ex.x).l1();
        iter += restore_iterative(&model, &op, &xt, severity)?.sub(&ex.x).l1();
    }
    let n = held_out.len() as f64;
    println!("held-out mean L1: one-step {:.5}, iterative {:.5}", one / n, iter / n);

    let mut rng = NoiseRng::new(9);
    let fresh: Vec<f64> = (0..10)
        .map(|_| {
            let x = sample_limit_pool(&op, &train_set, &mut rng).unwrap();
            restore_iterative(&model, &op, &x, severity).unwrap().data()[0]
        })
        .collect();
    println!("restored from the noise pool: {fresh:.3?}");
    Ok(())
}

fn blur_demo(steps: u64) -> diffusion_core::Result<()> {
    let severity = 10;
    let width = 16;
    let train_set = bumps(1000, width, 1);
    let held_out = bumps(200, width, 2);
    let op = DegradationOp::blur(severity, 0.5, 1.5)?;
    let init = DenoiserParams::init(DenoiserConfig::toy(width, severity), 3)?;
    let cfg = TrainConfig { steps, eval_every: steps, ..TrainConfig::default() };
    let (model, log) = train_restoration(&train_set, &op, init, &cfg)?;
    println!("final training L1 {:.4}", log.rows.last().unwrap().loss);
    let (mut one, mut iter) = (0.0, 0.0);
    for ex in &held_out {
        let xt = degrade(&op, &ex.x, severity)?;
        one += restore_one_step(&model, &xt, severity)?.sub(&ex.x).l1();
        iter += restore_iterative(&model, &op, &xt, severity)?.sub(&ex.x).l1();
    }
    let n = held_out.len() as f64;
    println!("held-out mean L1 (per signal): one-step {:.4}, iterative {:.4}", one / n, iter / n);
    Ok(())
}

//! Class-conditioned diffusion in a compressed space: 4-sample signals are
//! averaged pairwise into 2 latents, the denoiser learns one embedding per
//! class, and samples are decoded back to 4 samples.
//!
//!     cargo run --release --example latent_conditioning

use diffusion_core::denoiser_net::{DenoiserConfig, DenoiserParams};
use diffusion_core::latent_conditioning::{generate_conditioned, train_latent, Codec, ConditionVocab};
use diffusion_core::sampler::SampleRunConfig;
use diffusion_core::stats::mean_stderr;
use diffusion_core::trainer::{Example, TrainConfig};
use diffusion_core::{NoiseRng, Schedule, SigmaMode, Tensor};

fn main() -> diffusion_core::Result<()> {
    // "rise" goes low -> high, "fall" high -> low; pairs of samples are near-equal
    let mut rng = NoiseRng::new(1);
    let data: Vec<Example> = (0..3000)
        .map(|i| {
            let label = i % 2;
            let (a, b) = if label == 0 { (-0.6, 0.6) } else { (0.6, -0.6) };
            let jitter = |rng: &mut NoiseRng| 0.1 * rng.standard_normal();
            let (u, v) = (a + jitter(&mut rng), b + jitter(&mut rng));
            Example::labeled(Tensor::vector(vec![u, u + 0.02 * rng.standard_normal(), v, v]), label)
        })
        .collect();

    let codec = Codec::block_average(4, 1)?;
    let s = Schedule::linear(100, 1e-3, 0.15, SigmaMode::PosteriorBeta)?;
    let init = DenoiserParams::init(DenoiserConfig::toy(codec.latent_dim(), s.steps()).with_condition(2, 8), 2)?;
    let vocab = ConditionVocab::from_params(&init, &["rise", "fall"])?;
    let cfg = TrainConfig { steps: 6000, eval_every: 6000, ..TrainConfig::default() };
    let (model, log) = train_latent(&data, &codec, &s, Some(&vocab), init, &cfg)?;
    println!("trained; final loss {:.4}", log.rows.last().unwrap().loss);

    let scfg = SampleRunConfig { n_samples: 500, seed: 3, ..SampleRunConfig::default() };
    for name in ["rise", "fall"] {
        let label = model.vocab.as_ref().unwrap().id_of(name).unwrap();
        let xs = generate_conditioned(&model, &s, &scfg, Some(label))?;
        let first: Vec<f64> = xs.iter().map(|x| x.data()[0]).collect();
        let last: Vec<f64> = xs.iter().map(|x| x.data()[3]).collect();
        let (m0, e0) = mean_stderr(&first);
        let (m3, e3) = mean_stderr(&last);
        println!("{name}: x[0] = {m0:+.3} ± {e0:.3}, x[3] = {m3:+.3} ± {e3:.3}, e.g. {:.2?}", xs[0].data());
    }

    let mut text = Vec::new();
    model.vocab.as_ref().unwrap().write_text(&mut text)?;
    println!("trained vocabulary:\n{}", String::from_utf8_lossy(&text));
    Ok(())
}

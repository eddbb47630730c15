mod common;

use common::{fd_gradient, max_relative_error};
use diffusion_core::denoiser_net::{loss_and_grad, DenoiserConfig, DenoiserParams, TimeEmbedding, TrainItem, Weighting};
use diffusion_core::{NoiseRng, Schedule, SigmaMode, Tensor};

fn batch(data_dim: usize, steps: usize, labels: Option<usize>, n: usize, seed: u64) -> Vec<TrainItem> {
    let mut rng = NoiseRng::new(seed);
    (0..n)
        .map(|i| TrainItem {
            x0: Tensor::vector((0..data_dim).map(|_| 2.0 * rng.uniform() - 1.0).collect()),
            t: 1 + rng.below(steps as u64) as usize,
            z: Tensor::vector(rng.normal_vec(data_dim)),
            cond: labels.map(|l| i % l),
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let steps = 50;
    let s = Schedule::linear(steps, 1e-3, 0.1, SigmaMode::Beta).unwrap();
    let cfgs = [
        DenoiserConfig { data_dim: 1, hidden: vec![], time: TimeEmbedding::Sinusoidal { width: 2 }, steps, condition: None },
        DenoiserConfig { data_dim: 1, hidden: vec![8], time: TimeEmbedding::Sinusoidal { width: 4 }, steps, condition: None },
        DenoiserConfig { data_dim: 2, hidden: vec![6, 5, 4], time: TimeEmbedding::Learned { width: 3 }, steps, condition: None },
        DenoiserConfig { data_dim: 3, hidden: vec![7, 7], time: TimeEmbedding::Sinusoidal { width: 6 }, steps, condition: None }
            .with_condition(3, 2),
        DenoiserConfig { data_dim: 2, hidden: vec![5], time: TimeEmbedding::Learned { width: 2 }, steps, condition: None }
            .with_condition(2, 3),
    ];
    for (k, cfg) in cfgs.into_iter().enumerate() {
        let labels = cfg.condition.map(|c| c.labels);
        let params = DenoiserParams::init(cfg.clone(), k as u64).unwrap();
        let items = batch(cfg.data_dim, steps, labels, 7, 100 + k as u64);
        for w in [Weighting::Unweighted, Weighting::Weighted] {
            let g = loss_and_grad(&params, &items, &s, w).unwrap();
            let fd = fd_gradient(&params, &items, &s, w, 1e-5);
            let err = max_relative_error(&g.grad, &fd, 1e-4);
            println!("arch {k} {w:?}: max rel err {err:.3e}");
            assert!(err < 1e-5, "arch {k} {w:?}: {err}");
        }
    }
}

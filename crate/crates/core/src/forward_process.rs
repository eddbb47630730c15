//! The noising chain: stepwise simulation and the closed-form marginal.

use std::io::Write;

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::NoiseRng;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// `sqrt(1 - beta) * x_prev + sqrt(beta) * z`.
///
/// Takes the raw beta so boundary values (beta = 1) can be exercised outside
/// a validated schedule.
pub fn forward_affine(x_prev: &Tensor, beta: f64, z: &Tensor) -> Tensor {
    x_prev.lincomb((1.0 - beta).sqrt(), z, beta.sqrt())
}

/// One step of the chain, `x_{t-1} -> x_t`.
pub fn forward_step(x_prev: &Tensor, t: usize, s: &Schedule, rng: &mut NoiseRng) -> Result<Tensor> {
    s.check_step(t, 1)?;
    let z = rng.normal_like(x_prev.shape());
    Ok(forward_affine(x_prev, s.beta(t), &z))
}

/// Mean and isotropic variance of `x_t | x_0`.
pub fn marginal_params(x0: &Tensor, t: usize, s: &Schedule) -> Result<(Tensor, f64)> {
    s.check_step(t, 0)?;
    if t == 0 {
        return Ok((x0.clone(), 0.0));
    }
    let ab = s.alpha_bar(t);
    Ok((x0.scale(ab.sqrt()), 1.0 - ab))
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * z` for a given `z`.
pub fn marginal_with_noise(x0: &Tensor, t: usize, s: &Schedule, z: &Tensor) -> Result<Tensor> {
    s.check_step(t, 0)?;
    z.ensure_shape(x0.shape())?;
    let ab = s.alpha_bar(t);
    Ok(x0.lincomb(ab.sqrt(), z, (1.0 - ab).sqrt()))
}

/// Draws `x_t ~ p(x_t | x_0)` in one shot and returns the noise that produced it.
pub fn sample_marginal(x0: &Tensor, t: usize, s: &Schedule, rng: &mut NoiseRng) -> Result<(Tensor, Tensor)> {
    s.check_step(t, 1)?;
    let z = rng.normal_like(x0.shape());
    let xt = marginal_with_noise(x0, t, s, &z)?;
    Ok((xt, z))
}

/// Noise variance accumulated by propagating each step's injection through
/// the remaining contractions: `sum_{s<=t} beta_s * prod_{s<u<=t} alpha_u`.
///
/// Computed from the step recursion only, never from `alpha_bar`.
pub fn accumulated_noise_variance(s: &Schedule, t: usize) -> f64 {
    let mut var = 0.0;
    for step in 1..=t {
        var = s.alpha(step) * var + s.beta(step);
    }
    var
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule_fingerprint: String,
    pub seed: u64,
    pub stream: u64,
    /// Recorded step indices, ascending, always containing 0 and T.
    pub times: Vec<usize>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn initial(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trajectory holds x0")
    }

    pub fn state_at(&self, t: usize) -> Option<&Tensor> {
        self.times.binary_search(&t).ok().map(|i| &self.states[i])
    }
}

/// Full chain x_0..x_T with every state recorded.
pub fn simulate_trajectory(x0: &Tensor, s: &Schedule, seed: u64, stream: u64) -> Trajectory {
    simulate_trajectory_strided(x0, s, seed, stream, 1)
}

/// Full chain, recording states at multiples of `stride` plus T.
pub fn simulate_trajectory_strided(x0: &Tensor, s: &Schedule, seed: u64, stream: u64, stride: usize) -> Trajectory {
    let stride = stride.max(1);
    let steps = s.steps();
    simulate_trajectory_where(x0, s, seed, stream, |t| t % stride == 0 || t == steps)
}

/// Full chain, recording `x0` and every state whose step satisfies `keep`.
pub fn simulate_trajectory_where(x0: &Tensor, s: &Schedule, seed: u64, stream: u64, keep: impl Fn(usize) -> bool) -> Trajectory {
    let mut rng = NoiseRng::stream(seed, stream);
    let mut times = vec![0];
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    for t in 1..=s.steps() {
        let z = rng.normal_like(x.shape());
        x = forward_affine(&x, s.beta(t), &z);
        if keep(t) {
            times.push(t);
            states.push(x.clone());
        }
    }
    Trajectory {
        schedule_fingerprint: s.fingerprint(),
        seed,
        stream,
        times,
        states,
    }
}

/// One trajectory per starting point; trajectory `i` uses stream `i`.
pub fn simulate_many(x0s: &[Tensor], s: &Schedule, seed: u64, stride: usize) -> Vec<Trajectory> {
    x0s.par_iter()
        .enumerate()
        .map(|(i, x0)| simulate_trajectory_strided(x0, s, seed, i as u64, stride))
        .collect()
}

/// CSV `traj_id,t,component_index,value`.
pub fn write_trajectories_csv<W: Write>(trajs: &[Trajectory], mut w: W) -> std::io::Result<()> {
    writeln!(w, "traj_id,t,component_index,value")?;
    for (id, tr) in trajs.iter().enumerate() {
        for (t, state) in tr.times.iter().zip(&tr.states) {
            for (k, v) in state.data().iter().enumerate() {
                writeln!(w, "{id},{t},{k},{v:?}")?;
            }
        }
    }
    Ok(())
}

//! Stochastic-gradient training of the noise predictor.
//!
//! Step `k` draws all of its randomness from stream `k` of the run seed, so a
//! run resumed from a checkpoint continues exactly where it stopped.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{loss_and_grad, Checkpoint, DenoiserParams, GradientBundle, NoisePredictor, TrainItem, Weighting};
use crate::error::{Error, Result};
use crate::forward_process::marginal_with_noise;
use crate::rng::NoiseRng;
use crate::schedule::Schedule;
use crate::stats::mean_stderr;
use crate::tensor::Tensor;

/// Loss above this counts as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// One training datum with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Tensor,
    pub label: Option<usize>,
}

impl Example {
    pub fn new(x: Tensor) -> Self {
        Self { x, label: None }
    }

    pub fn labeled(x: Tensor, label: usize) -> Self {
        Self { x, label: Some(label) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adam with bias correction.
    #[default]
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weighting: Weighting,
    pub seed: u64,
    pub eval_every: u64,
    /// Draws per held-out datum when evaluating.
    pub eval_n_mc: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoments,
            weighting: Weighting::Unweighted,
            seed: 0,
            eval_every: 1000,
            eval_n_mc: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning_rate", "must be positive"));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(Error::domain("eval_every", "must lie in 1..=steps"));
        }
        if self.eval_n_mc == 0 {
            return Err(Error::domain("eval_n_mc", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// CSV `step,loss,grad_norm,eval_metric`; missing evaluations are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,grad_norm,eval_metric")?;
        for r in &self.rows {
            match r.eval_metric {
                Some(e) => writeln!(w, "{},{:?},{:?},{:?}", r.step, r.loss, r.grad_norm, e)?,
                None => writeln!(w, "{},{:?},{:?},", r.step, r.loss, r.grad_norm)?,
            }
        }
        Ok(())
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_metric)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state and step counter around a set of parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: DenoiserParams,
    cfg: TrainConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Trainer {
    pub fn new(params: DenoiserParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = params.num_params();
        Ok(Self {
            params,
            cfg,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, s: &Schedule, cfg: TrainConfig) -> Result<Self> {
        if ck.schedule_fingerprint != s.fingerprint() {
            return Err(Error::ScheduleMismatch {
                checkpoint: ck.schedule_fingerprint,
                run: s.fingerprint(),
            });
        }
        let mut tr = Self::new(ck.params, cfg)?;
        tr.step = ck.step;
        let n = tr.params.num_params();
        if let (Some(m), Some(v)) = (ck.extra.iter().find(|e| e.0 == "adam_m"), ck.extra.iter().find(|e| e.0 == "adam_v")) {
            if m.1.len() != n || v.1.len() != n {
                return Err(Error::format("checkpoint", "optimizer state length mismatch"));
            }
            tr.m = m.1.clone();
            tr.v = v.1.clone();
        }
        Ok(tr)
    }

    pub fn checkpoint(&self, s: &Schedule) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone(), s, self.step);
        ck.extra.push(("adam_m".into(), self.m.clone()));
        ck.extra.push(("adam_v".into(), self.v.clone()));
        ck.meta = serde_json::json!({ "train_config": self.cfg });
        ck
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Runs one update with the gradient returned by `objective`, which gets
    /// this step's random stream.
    pub fn step_with<F>(&mut self, objective: F) -> Result<LogRow>
    where
        F: FnOnce(&DenoiserParams, &mut NoiseRng) -> Result<GradientBundle>,
    {
        let mut rng = NoiseRng::stream(self.cfg.seed, self.step);
        let g = objective(&self.params, &mut rng)?;
        let next = self.step + 1;
        if !g.loss.is_finite() || g.loss > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged {
                step: next,
                loss: g.loss,
            });
        }
        let lr = self.cfg.learning_rate;
        let theta = self.params.flat_mut();
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, d) in theta.iter_mut().zip(&g.grad) {
                    *p -= lr * d;
                }
            }
            Optimizer::AdaptiveMoments => {
                let c1 = 1.0 - ADAM_BETA1.powi(next as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(next as i32);
                for i in 0..theta.len() {
                    let d = g.grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * d;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * d * d;
                    theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: next,
                loss: f64::NAN,
            });
        }
        self.step = next;
        Ok(LogRow {
            step: next,
            loss: g.loss,
            grad_norm: g.norm(),
            eval_metric: None,
        })
    }

    /// One noise-matching update on a fresh random batch.
    pub fn step(&mut self, dataset: &[Example], s: &Schedule) -> Result<LogRow> {
        let (bs, weighting) = (self.cfg.batch_size, self.cfg.weighting);
        self.step_with(|p, rng| {
            let batch = draw_batch(dataset, s, bs, rng)?;
            loss_and_grad(p, &batch, s, weighting)
        })
    }
}

/// `batch_size` items: datum uniform over the dataset, t uniform over
/// `1..=T`, fresh standard-normal noise.
pub fn draw_batch(dataset: &[Example], s: &Schedule, batch_size: usize, rng: &mut NoiseRng) -> Result<Vec<TrainItem>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok((0..batch_size)
        .map(|_| {
            let ex = &dataset[rng.below(dataset.len() as u64) as usize];
            let t = 1 + rng.below(s.steps() as u64) as usize;
            let z = rng.normal_like(ex.x.shape());
            TrainItem {
                x0: ex.x.clone(),
                t,
                z,
                cond: ex.label,
            }
        })
        .collect())
}

fn check_uniform_shape(dataset: &[Example]) -> Result<()> {
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    for ex in dataset {
        ex.x.ensure_shape(first.x.shape())?;
    }
    Ok(())
}

/// Trains from `init` for `cfg.steps` steps. Every `eval_every` steps the
/// held-out loss (or the training loss when no held-out set is given) is
/// recorded with a fixed evaluation seed.
pub fn train(
    dataset: &[Example],
    held_out: Option<&[Example]>,
    s: &Schedule,
    init: DenoiserParams,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainLog)> {
    check_uniform_shape(dataset)?;
    let mut trainer = Trainer::new(init, cfg.clone())?;
    let mut log = TrainLog::default();
    let eval_set = held_out.unwrap_or(dataset);
    while trainer.step_count() < cfg.steps {
        let mut row = trainer.step(dataset, s)?;
        if row.step % cfg.eval_every == 0 {
            row.eval_metric = Some(evaluate(trainer.params(), eval_set, s, cfg.eval_n_mc, eval_seed(cfg.seed))?);
        }
        log.rows.push(row);
    }
    Ok((trainer.into_params(), log))
}

/// Seed used for every evaluation of a run, distinct from its training streams.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Monte-Carlo unweighted noise-matching loss on held-out data.
pub fn evaluate<P: NoisePredictor + ?Sized>(model: &P, held_out: &[Example], s: &Schedule, n_mc: usize, seed: u64) -> Result<f64> {
    Ok(evaluate_with_stderr(model, held_out, s, n_mc, seed)?.0)
}

/// As [`evaluate`], also returning the standard error of the mean.
pub fn evaluate_with_stderr<P: NoisePredictor + ?Sized>(
    model: &P,
    held_out: &[Example],
    s: &Schedule,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if held_out.is_empty() {
        return Err(Error::Empty("held-out set"));
    }
    if n_mc == 0 {
        return Err(Error::domain("n_mc", "must be positive"));
    }
    let mut rng = NoiseRng::new(seed);
    let mut losses = Vec::with_capacity(held_out.len() * n_mc);
    for ex in held_out {
        for _ in 0..n_mc {
            let t = 1 + rng.below(s.steps() as u64) as usize;
            let z = rng.normal_like(ex.x.shape());
            let xt = marginal_with_noise(&ex.x, t, s, &z)?;
            let zh = model.predict_noise(&xt, t, ex.label)?;
            losses.push(zh.sub(&z).norm_sq());
        }
    }
    Ok(mean_stderr(&losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser_net::DenoiserConfig;
    use crate::schedule::SigmaMode;

    fn schedule() -> Schedule {
        Schedule::linear(50, 1e-3, 0.2, SigmaMode::PosteriorBeta).unwrap()
    }

    fn small_cfg(steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: vec![16, 16],
            ..DenoiserConfig::toy(1, steps)
        }
    }

    fn quick(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            eval_every: steps,
            eval_n_mc: 4,
            learning_rate: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn bimodal(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = NoiseRng::new(seed);
        (0..n)
            .map(|_| {
                let c = if rng.uniform() < 0.5 { -0.6 } else { 0.6 };
                Example::new(Tensor::scalar(c + 0.1 * rng.standard_normal()))
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { eval_every: 0, ..quick(10) }.validate().is_err());
        assert!(TrainConfig { eval_every: 11, ..quick(10) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..quick(10) }.validate().is_err());
        assert!(quick(10).validate().is_ok());
    }

    #[test]
    fn deterministic_log() {
        let s = schedule();
        let data = bimodal(64, 1);
        let init = DenoiserParams::init(small_cfg(50), 3).unwrap();
        let a = train(&data, None, &s, init.clone(), &quick(30)).unwrap();
        let b = train(&data, None, &s, init, &quick(30)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        let mut buf = Vec::new();
        a.1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,grad_norm,eval_metric\n1,"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn trained_beats_untrained_on_held_out() {
        let s = schedule();
        let data = bimodal(256, 2);
        let held = bimodal(64, 3);
        let init = DenoiserParams::init(small_cfg(50), 4).unwrap();
        let before = evaluate(&init, &held, &s, 16, 99).unwrap();
        let (p, log) = train(&data, Some(&held), &s, init, &quick(1500)).unwrap();
        let after = evaluate(&p, &held, &s, 16, 99).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(log.last_eval(), Some(evaluate(&p, &held, &s, 4, eval_seed(5)).unwrap()));
    }

    #[test]
    fn zero_dataset_sanity() {
        // x0 = 0 makes x_t = sqrt(1 - ab_t) z, so z is recoverable and the
        // loss falls well below its starting value
        let s = schedule();
        let data = vec![Example::new(Tensor::scalar(0.0))];
        let init = DenoiserParams::init(small_cfg(50), 6).unwrap();
        let before = evaluate(&init, &data, &s, 256, 1).unwrap();
        let (p, _) = train(&data, None, &s, init, &quick(800)).unwrap();
        let after = evaluate(&p, &data, &s, 256, 1).unwrap();
        assert!(after < 0.5 * before, "{after} vs {before}");
    }

    #[test]
    fn oracle_scores_zero() {
        let s = schedule();
        let x0 = Tensor::scalar(0.4);
        let x0c = x0.clone();
        let sc = s.clone();
        let oracle = move |xt: &Tensor, t: usize, _: Option<usize>| {
            let ab = sc.alpha_bar(t);
            xt.lincomb(1.0 / (1.0 - ab).sqrt(), &x0c, -(ab / (1.0 - ab)).sqrt())
        };
        let e = evaluate(&oracle, &[Example::new(x0)], &s, 200, 3).unwrap();
        assert!(e < 1e-20, "{e}");
    }

    #[test]
    fn stderr_scales_with_inverse_root_n() {
        let s = schedule();
        let p = DenoiserParams::init(small_cfg(50), 8).unwrap();
        let data = bimodal(32, 9);
        let (_, se1) = evaluate_with_stderr(&p, &data, &s, 64, 11).unwrap();
        let (_, se4) = evaluate_with_stderr(&p, &data, &s, 256, 12).unwrap();
        let ratio = se4 / se1;
        assert!((ratio - 0.5).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn full_batch_sgd_is_monotone() {
        let s = schedule();
        let data = bimodal(32, 4);
        let batch = draw_batch(&data, &s, 32, &mut NoiseRng::new(1)).unwrap();
        let init = DenoiserParams::init(small_cfg(50), 2).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-3,
            ..quick(100)
        };
        let mut tr = Trainer::new(init, cfg).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let row = tr.step_with(|p, _| loss_and_grad(p, &batch, &s, Weighting::Unweighted)).unwrap();
            assert!(row.loss <= prev, "{} > {prev}", row.loss);
            prev = row.loss;
        }
    }

    #[test]
    fn timestep_histogram_is_uniform() {
        let s = Schedule::linear(10, 1e-3, 0.2, SigmaMode::Beta).unwrap();
        let data = bimodal(4, 5);
        let mut rng = NoiseRng::new(77);
        let n = 100_000;
        let mut counts = [0f64; 10];
        for item in draw_batch(&data, &s, n, &mut rng).unwrap() {
            counts[item.t - 1] += 1.0;
        }
        let p = 0.1;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c - n as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn divergence_guard_trips() {
        let s = schedule();
        let data = bimodal(32, 6);
        let init = DenoiserParams::init(small_cfg(50), 2).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e3,
            ..quick(200)
        };
        match train(&data, None, &s, init, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step <= 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn resume_continues_bit_identically() {
        let s = schedule();
        let data = bimodal(64, 7);
        let init = DenoiserParams::init(small_cfg(50), 1).unwrap();
        let cfg = quick(40);
        let mut full = Trainer::new(init.clone(), cfg.clone()).unwrap();
        for _ in 0..40 {
            full.step(&data, &s).unwrap();
        }
        let mut half = Trainer::new(init, cfg.clone()).unwrap();
        for _ in 0..20 {
            half.step(&data, &s).unwrap();
        }
        let mut buf = Vec::new();
        half.checkpoint(&s).write_to(&mut buf).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::read_from(buf.as_slice()).unwrap(), &s, cfg.clone()).unwrap();
        assert_eq!(resumed.step_count(), 20);
        for _ in 0..20 {
            resumed.step(&data, &s).unwrap();
        }
        assert_eq!(resumed.params(), full.params());

        let other = Schedule::linear(50, 1e-3, 0.21, SigmaMode::PosteriorBeta).unwrap();
        let ck = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert!(matches!(Trainer::resume(ck, &other, cfg), Err(Error::ScheduleMismatch { .. })));
    }

    #[test]
    fn empty_dataset_rejected() {
        let init = DenoiserParams::init(small_cfg(50), 1).unwrap();
        assert!(train(&[], None, &schedule(), init, &quick(5)).is_err());
    }
}

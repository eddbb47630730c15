//! Generalized degradation and restoration.
//!
//! A [`DegradationOp`] maps a clean datum and a severity `t` to a corrupted
//! one, with `t = 0` the identity. A restoration network is trained with an
//! L1 loss to recover the clean datum from any severity, and
//! [`restore_iterative`] alternates restoration and re-degradation from
//! severity T down to 1.

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{Checkpoint, DenoiserParams, GradientBundle};
use crate::error::{Error, Result};
use crate::forward_process::marginal_with_noise;
use crate::rng::NoiseRng;
use crate::schedule::{Schedule, SigmaMode};
use crate::tensor::Tensor;
use crate::trainer::{Example, LogRow, TrainConfig, TrainLog, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOp {
    /// `D(x, t) = sqrt(ab_t) x + sqrt(1 - ab_t) z` with one frozen `z`.
    FixedNoise { schedule: Schedule, z: Tensor },
    /// `D(x, t) = G_t(...G_1(x))`: repeated Gaussian blurs whose standard
    /// deviation (in samples) grows linearly from `width_start` at step 1 to
    /// `width_end` at step T, applied separably along every axis.
    Blur { steps: usize, width_start: f64, width_end: f64 },
}

/// Serializable description of a [`DegradationOp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationRecord {
    FixedNoise { betas: Vec<f64>, z_shape: Vec<usize>, z: Vec<f64> },
    Blur { steps: usize, width_start: f64, width_end: f64 },
}

impl DegradationOp {
    pub fn fixed_noise(schedule: Schedule, z: Tensor) -> Self {
        DegradationOp::FixedNoise { schedule, z }
    }

    pub fn blur(steps: usize, width_start: f64, width_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("steps", "must be at least 1"));
        }
        if !(width_start > 0.0 && width_end >= width_start) {
            return Err(Error::domain("width_start", "need 0 < width_start <= width_end"));
        }
        Ok(DegradationOp::Blur {
            steps,
            width_start,
            width_end,
        })
    }

    pub fn steps(&self) -> usize {
        match self {
            DegradationOp::FixedNoise { schedule, .. } => schedule.steps(),
            DegradationOp::Blur { steps, .. } => *steps,
        }
    }

    pub fn record(&self) -> DegradationRecord {
        match self {
            DegradationOp::FixedNoise { schedule, z } => DegradationRecord::FixedNoise {
                betas: schedule.betas().to_vec(),
                z_shape: z.shape().to_vec(),
                z: z.data().to_vec(),
            },
            DegradationOp::Blur {
                steps,
                width_start,
                width_end,
            } => DegradationRecord::Blur {
                steps: *steps,
                width_start: *width_start,
                width_end: *width_end,
            },
        }
    }

    pub fn from_record(r: &DegradationRecord) -> Result<Self> {
        match r {
            DegradationRecord::FixedNoise { betas, z_shape, z } => Ok(Self::fixed_noise(
                Schedule::from_betas(betas.clone(), SigmaMode::Beta)?,
                Tensor::new(z_shape.clone(), z.clone())?,
            )),
            DegradationRecord::Blur {
                steps,
                width_start,
                width_end,
            } => Self::blur(*steps, *width_start, *width_end),
        }
    }

    fn blur_width(&self, s: usize) -> f64 {
        match *self {
            DegradationOp::Blur {
                steps,
                width_start,
                width_end,
            } => {
                if steps == 1 {
                    width_start
                } else {
                    width_start + (s - 1) as f64 * (width_end - width_start) / (steps - 1) as f64
                }
            }
            DegradationOp::FixedNoise { .. } => unreachable!(),
        }
    }
}

/// Discrete Gaussian taps `k(j) ~ exp(-j^2 / (2 w^2))` for `|j| <= ceil(3w)`.
pub fn gaussian_kernel(width: f64) -> Vec<f64> {
    let r = (3.0 * width).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|j| (-(j * j) as f64 / (2.0 * width * width)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|k| k / total).collect()
}

/// Blurs one line by scattering each input sample over its in-range
/// neighbours, with the taps renormalized over the in-range part. Total mass
/// is preserved.
fn blur_line(line: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = line.len() as i64;
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; line.len()];
    for (i, &v) in line.iter().enumerate() {
        let i = i as i64;
        let lo = (-r).max(-i);
        let hi = r.min(n - 1 - i);
        let norm: f64 = (lo..=hi).map(|j| kernel[(j + r) as usize]).sum();
        for j in lo..=hi {
            out[(i + j) as usize] += v * kernel[(j + r) as usize] / norm;
        }
    }
    out
}

/// Applies `blur_line` along every axis of a row-major tensor.
fn blur_separable(x: &Tensor, kernel: &[f64]) -> Tensor {
    let shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len < 2 {
            continue;
        }
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * len * stride + inner;
                let line: Vec<f64> = (0..len).map(|k| data[base + k * stride]).collect();
                for (k, v) in blur_line(&line, kernel).into_iter().enumerate() {
                    data[base + k * stride] = v;
                }
            }
        }
    }
    x.with_data(data)
}

/// `D(x, t)`; deterministic, and `D(x, 0) = x` exactly.
pub fn degrade(op: &DegradationOp, x: &Tensor, t: usize) -> Result<Tensor> {
    if t > op.steps() {
        return Err(Error::StepOutOfRange {
            t,
            min: 0,
            max: op.steps(),
        });
    }
    if t == 0 {
        return Ok(x.clone());
    }
    match op {
        DegradationOp::FixedNoise { schedule, z } => marginal_with_noise(x, t, schedule, z),
        DegradationOp::Blur { .. } => {
            let mut y = x.clone();
            for s in 1..=t {
                y = blur_separable(&y, &gaussian_kernel(op.blur_width(s)));
            }
            Ok(y)
        }
    }
}

/// Anything that estimates the clean datum from a severity-t input.
pub trait Restorer: Sync {
    fn restore(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> Restorer for F
where
    F: Fn(&Tensor, usize) -> Tensor + Sync,
{
    fn restore(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self(x, t))
    }
}

/// Trained restoration network `R_theta(x, t)`, with the operator it was
/// trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationModel {
    pub params: DenoiserParams,
    pub op: DegradationOp,
}

impl Restorer for RestorationModel {
    fn restore(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.params.forward(x, t, None)
    }
}

impl RestorationModel {
    /// Checkpoint tagged with the operator: its schedule fingerprint for
    /// fixed noise, a digest of the blur parameters otherwise. The operator
    /// itself travels in the metadata.
    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        let fingerprint = match &self.op {
            DegradationOp::FixedNoise { schedule, .. } => schedule.fingerprint(),
            DegradationOp::Blur {
                steps,
                width_start,
                width_end,
            } => format!("blur-{steps}-{width_start:?}-{width_end:?}"),
        };
        Checkpoint {
            params: self.params.clone(),
            schedule_fingerprint: fingerprint,
            step,
            extra: Vec::new(),
            meta: serde_json::json!({ "degradation": self.op.record() }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let record: DegradationRecord = serde_json::from_value(ck.meta["degradation"].clone())
            .map_err(|e| Error::format("checkpoint", format!("no degradation record: {e}")))?;
        let op = DegradationOp::from_record(&record)?;
        if ck.params.config().steps != op.steps() {
            return Err(Error::format("checkpoint", "network and operator disagree on T"));
        }
        Ok(Self { params: ck.params, op })
    }
}

/// Mean over `(x, t)` pairs of `|R_theta(D(x, t), t) - x|_1` and its gradient.
/// The subgradient of `|r|` at `r = 0` is taken as 0.
pub fn l1_loss_and_grad(params: &DenoiserParams, op: &DegradationOp, batch: &[(Tensor, usize)]) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for (x, t) in batch {
        let xt = degrade(op, x, *t)?;
        let mut dout = vec![0.0; x.len()];
        let out = params.forward(&xt, *t, None)?;
        for ((d, o), target) in dout.iter_mut().zip(out.data()).zip(x.data()) {
            let r = o - target;
            loss += r.abs();
            *d = if r > 0.0 {
                scale
            } else if r < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        params.vjp(&xt, *t, None, &dout, &mut grad)?;
    }
    Ok(GradientBundle {
        grad,
        loss: loss * scale,
    })
}

/// Batch of `(x, t)` with x uniform over the dataset and t uniform over `0..=T`.
pub fn draw_restoration_batch(dataset: &[Example], steps: usize, batch_size: usize, rng: &mut NoiseRng) -> Vec<(Tensor, usize)> {
    (0..batch_size)
        .map(|_| {
            let ex = &dataset[rng.below(dataset.len() as u64) as usize];
            let t = rng.below(steps as u64 + 1) as usize;
            (ex.x.clone(), t)
        })
        .collect()
}

/// Minimizes `E_{x,t} |R_theta(D(x, t), t) - x|_1` from `init`.
pub fn train_restoration(
    dataset: &[Example],
    op: &DegradationOp,
    init: DenoiserParams,
    cfg: &TrainConfig,
) -> Result<(RestorationModel, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if init.config().steps != op.steps() {
        return Err(Error::domain("steps", "network and operator disagree on T"));
    }
    let mut trainer = Trainer::new(init, cfg.clone())?;
    let mut log = TrainLog::default();
    let steps = op.steps();
    while trainer.step_count() < cfg.steps {
        let mut row: LogRow = trainer.step_with(|p, rng| {
            let batch = draw_restoration_batch(dataset, steps, cfg.batch_size, rng);
            l1_loss_and_grad(p, op, &batch)
        })?;
        if row.step % cfg.eval_every == 0 {
            let model = RestorationModel {
                params: trainer.params().clone(),
                op: op.clone(),
            };
            row.eval_metric = Some(mean_one_step_l1(&model, op, dataset)?);
        }
        log.rows.push(row);
    }
    Ok((
        RestorationModel {
            params: trainer.into_params(),
            op: op.clone(),
        },
        log,
    ))
}

fn mean_one_step_l1(model: &RestorationModel, op: &DegradationOp, data: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        let xt = degrade(op, &ex.x, op.steps())?;
        total += restore_one_step(model, &xt, op.steps())?.sub(&ex.x).l1();
    }
    Ok(total / data.len() as f64)
}

/// For t = T..1: `x0_hat = R(x_t, t)`, `x_{t-1} = D(x0_hat, t - 1)`; returns
/// the last `x0_hat`, or the input unchanged when T = 0.
pub fn restore_iterative<R: Restorer + ?Sized>(model: &R, op: &DegradationOp, x_t: &Tensor, from: usize) -> Result<Tensor> {
    if from > op.steps() {
        return Err(Error::StepOutOfRange {
            t: from,
            min: 0,
            max: op.steps(),
        });
    }
    let mut x = x_t.clone();
    let mut x0_hat = x_t.clone();
    for t in (1..=from).rev() {
        x0_hat = model.restore(&x, t)?;
        if !x0_hat.is_finite() {
            return Err(Error::NonFinite { t });
        }
        x = degrade(op, &x0_hat, t - 1)?;
    }
    Ok(x0_hat)
}

/// `R(x_t, t)` in one shot.
pub fn restore_one_step<R: Restorer + ?Sized>(model: &R, x_t: &Tensor, t: usize) -> Result<Tensor> {
    model.restore(x_t, t)
}

/// A draw from the severity-T distribution: N(0, I) for fixed noise, the
/// severity-T blur of a random dataset element for blur.
pub fn sample_limit_pool(op: &DegradationOp, dataset: &[Example], rng: &mut NoiseRng) -> Result<Tensor> {
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    match op {
        DegradationOp::FixedNoise { .. } => Ok(rng.normal_like(first.x.shape())),
        DegradationOp::Blur { .. } => {
            let ex = &dataset[rng.below(dataset.len() as u64) as usize];
            degrade(op, &ex.x, op.steps())
        }
    }
}

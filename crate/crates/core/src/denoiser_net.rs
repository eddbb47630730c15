//! Fully-connected noise predictor `z_theta(x_t, t[, label])` with
//! hand-derived gradients.
//!
//! The network input is the concatenation `[x_t, time features, label
//! embedding]`. Hidden layers use SiLU, the output layer is affine. All
//! trainable values live in one flat vector with the layout
//!
//! ```text
//! for each layer l: W_l (out x in, row-major), b_l (out)
//! learned time table ((T + 1) x width)          if TimeEmbedding::Learned
//! label table (labels x dim)                    if conditioning is enabled
//! ```
//!
//! Gradients share that layout.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEmbedding {
    /// `[sin(t w_i)..., cos(t w_i)...]` with `w_i = 10000^(-i / (width/2))`.
    Sinusoidal { width: usize },
    /// One trainable vector per step `0..=T`.
    Learned { width: usize },
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match *self {
            TimeEmbedding::Sinusoidal { width } | TimeEmbedding::Learned { width } => width,
        }
    }
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding::Sinusoidal { width: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub labels: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub time: TimeEmbedding,
    /// Largest step index the network accepts.
    pub steps: usize,
    #[serde(default)]
    pub condition: Option<ConditionSpec>,
}

impl DenoiserConfig {
    /// Three hidden layers of width 64, sinusoidal time features.
    pub fn toy(data_dim: usize, steps: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![64, 64, 64],
            time: TimeEmbedding::default(),
            steps,
            condition: None,
        }
    }

    pub fn with_condition(mut self, labels: usize, dim: usize) -> Self {
        self.condition = Some(ConditionSpec { labels, dim });
        self
    }

    fn input_width(&self) -> usize {
        self.data_dim + self.time.width() + self.condition.map_or(0, |c| c.dim)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::domain("data_dim", "must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::domain("hidden", "layer widths must be positive"));
        }
        match self.time {
            TimeEmbedding::Sinusoidal { width } if width == 0 || width % 2 != 0 => {
                return Err(Error::domain("time.width", "sinusoidal width must be even and positive"))
            }
            TimeEmbedding::Learned { width } if width == 0 => {
                return Err(Error::domain("time.width", "must be positive"))
            }
            _ => {}
        }
        if let Some(c) = self.condition {
            if c.labels == 0 || c.dim == 0 {
                return Err(Error::domain("condition", "labels and dim must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerSlots>,
    time_table: Option<usize>,
    cond_table: Option<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let sizes = cfg.layer_sizes();
        let mut off = 0;
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(LayerSlots {
                w: off,
                b: off + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        let time_table = match cfg.time {
            TimeEmbedding::Learned { width } => {
                let at = off;
                off += (cfg.steps + 1) * width;
                Some(at)
            }
            TimeEmbedding::Sinusoidal { .. } => None,
        };
        let cond_table = cfg.condition.map(|c| {
            let at = off;
            off += c.labels * c.dim;
            at
        });
        Self {
            layers,
            time_table,
            cond_table,
            total: off,
        }
    }
}

/// Anything that predicts the injected noise from `(x_t, t, label)`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize, Option<usize>) -> Tensor + Sync,
{
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor> {
        Ok(self(x_t, t, cond))
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: Layout,
    theta: Vec<f64>,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.theta == other.theta
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

struct Activations {
    // input to each layer; acts[0] is the network input
    acts: Vec<Vec<f64>>,
    // pre-activation of each hidden layer
    pre: Vec<Vec<f64>>,
}

impl DenoiserParams {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`, embedding tables
    /// uniform in `+-1`.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = NoiseRng::new(seed);
        let mut theta = vec![0.0; layout.total];
        for l in &layout.layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut theta[l.w..l.b + l.fan_out] {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        let tables_start = layout.time_table.or(layout.cond_table).unwrap_or(layout.total);
        for v in &mut theta[tables_start..] {
            *v = 2.0 * rng.uniform() - 1.0;
        }
        Ok(Self { config, layout, theta })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let theta = vec![0.0; layout.total];
        Ok(Self { config, layout, theta })
    }

    pub fn from_flat(config: DenoiserConfig, theta: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if theta.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: vec![layout.total],
                got: vec![theta.len()],
            });
        }
        Ok(Self { config, layout, theta })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.config.layer_sizes()
    }

    pub fn flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Mutable view of layer `l` as `(weights, biases)`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.layout.layers[l];
        let (w, rest) = self.theta[s.w..].split_at_mut(s.fan_in * s.fan_out);
        (w, &mut rest[..s.fan_out])
    }

    /// Offset of the label embedding table within the flat vector.
    pub fn label_table_offset(&self) -> Option<usize> {
        self.layout.cond_table
    }

    /// Learned embedding of `label`, if conditioning is enabled.
    pub fn label_embedding(&self, label: usize) -> Option<&[f64]> {
        let c = self.config.condition?;
        let at = self.layout.cond_table? + label * c.dim;
        (label < c.labels).then(|| &self.theta[at..at + c.dim])
    }

    fn check_inputs(&self, x_len: usize, t: usize, cond: Option<usize>) -> Result<()> {
        if x_len != self.config.data_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.data_dim],
                got: vec![x_len],
            });
        }
        if t > self.config.steps {
            return Err(Error::StepOutOfRange {
                t,
                min: 0,
                max: self.config.steps,
            });
        }
        match (self.config.condition, cond) {
            (Some(c), Some(label)) if label >= c.labels => Err(Error::UnknownLabel(label)),
            (Some(_), None) => Err(Error::Conditioning("network is conditioned, no label given")),
            (None, Some(_)) => Err(Error::Conditioning("network is unconditioned, label given")),
            _ => Ok(()),
        }
    }

    fn input_vector(&self, x: &[f64], t: usize, cond: Option<usize>) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.layout.layers[0].fan_in);
        input.extend_from_slice(x);
        match self.config.time {
            TimeEmbedding::Sinusoidal { width } => {
                let half = width / 2;
                let tf = t as f64;
                let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
                let (sins, coss): (Vec<f64>, Vec<f64>) = freqs.map(|f| (tf * f).sin_cos()).unzip();
                input.extend(sins);
                input.extend(coss);
            }
            TimeEmbedding::Learned { width } => {
                let at = self.layout.time_table.expect("learned table") + t * width;
                input.extend_from_slice(&self.theta[at..at + width]);
            }
        }
        if let (Some(c), Some(label)) = (self.config.condition, cond) {
            let at = self.layout.cond_table.expect("label table") + label * c.dim;
            input.extend_from_slice(&self.theta[at..at + c.dim]);
        }
        input
    }

    fn forward_cached(&self, x: &[f64], t: usize, cond: Option<usize>) -> (Vec<f64>, Activations) {
        let n_layers = self.layout.layers.len();
        let mut acts = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut a = self.input_vector(x, t, cond);
        for (li, l) in self.layout.layers.iter().enumerate() {
            let w = &self.theta[l.w..l.b];
            let b = &self.theta[l.b..l.b + l.fan_out];
            let z: Vec<f64> = (0..l.fan_out)
                .map(|o| {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    b[o] + row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            acts.push(a);
            if li + 1 == n_layers {
                return (z, Activations { acts, pre });
            }
            a = z.iter().map(|&v| silu(v)).collect();
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates `d(out . dout)/d theta` into `grad`.
    fn backward(&self, cache: &Activations, dout: &[f64], t: usize, cond: Option<usize>, grad: &mut [f64]) {
        let mut delta = dout.to_vec();
        for (li, l) in self.layout.layers.iter().enumerate().rev() {
            let a = &cache.acts[li];
            let w = &self.theta[l.w..l.b];
            for o in 0..l.fan_out {
                let d = delta[o];
                grad[l.b + o] += d;
                if d != 0.0 {
                    let g = &mut grad[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    for (gi, ai) in g.iter_mut().zip(a) {
                        *gi += d * ai;
                    }
                }
            }
            let mut da = vec![0.0; l.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (dai, wi) in da.iter_mut().zip(&w[o * l.fan_in..(o + 1) * l.fan_in]) {
                        *dai += d * wi;
                    }
                }
            }
            if li > 0 {
                delta = da
                    .iter()
                    .zip(&cache.pre[li - 1])
                    .map(|(g, &z)| g * silu_grad(z))
                    .collect();
            } else {
                self.backward_into_tables(&da, t, cond, grad);
            }
        }
    }

    fn backward_into_tables(&self, d_input: &[f64], t: usize, cond: Option<usize>, grad: &mut [f64]) {
        let mut off = self.config.data_dim;
        let tw = self.config.time.width();
        if let Some(at) = self.layout.time_table {
            let row = at + t * tw;
            for (g, d) in grad[row..row + tw].iter_mut().zip(&d_input[off..off + tw]) {
                *g += d;
            }
        }
        off += tw;
        if let (Some(c), Some(label), Some(at)) = (self.config.condition, cond, self.layout.cond_table) {
            let row = at + label * c.dim;
            for (g, d) in grad[row..row + c.dim].iter_mut().zip(&d_input[off..off + c.dim]) {
                *g += d;
            }
        }
    }

    /// Raw network output for a flat input vector.
    pub fn forward(&self, x: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor> {
        self.check_inputs(x.len(), t, cond)?;
        let (out, _) = self.forward_cached(x.data(), t, cond);
        Ok(x.with_data(out))
    }

    /// Gradient of `sum_i out_i * dout_i` with respect to all parameters,
    /// plus the output itself.
    pub fn vjp(&self, x: &Tensor, t: usize, cond: Option<usize>, dout: &[f64], grad: &mut [f64]) -> Result<Tensor> {
        self.check_inputs(x.len(), t, cond)?;
        let (out, cache) = self.forward_cached(x.data(), t, cond);
        self.backward(&cache, dout, t, cond, grad);
        Ok(x.with_data(out))
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<usize>) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * z_hat) / sqrt(alpha_t)`.
pub fn mean_from_noise(x_t: &Tensor, z_hat: &Tensor, t: usize, s: &Schedule) -> Tensor {
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    x_t.lincomb(inv, z_hat, -coef * inv)
}

/// Reverse-step mean implied by a noise predictor.
pub fn mu_theta<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    t: usize,
    s: &Schedule,
    cond: Option<usize>,
) -> Result<Tensor> {
    s.check_step(t, 1)?;
    let z_hat = model.predict_noise(x_t, t, cond)?;
    Ok(mean_from_noise(x_t, &z_hat, t, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Per-step weight `beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t))`.
    Weighted,
    #[default]
    Unweighted,
}

/// Weight of step `t` in the noise-matching loss.
///
/// Where the reverse variance is zero (t = 1 under the posterior variance),
/// `beta_t` stands in, matching the Gaussian reconstruction likelihood.
pub fn loss_weight(s: &Schedule, t: usize, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Unweighted => 1.0,
        Weighting::Weighted => {
            let b = s.beta(t);
            b * b / (2.0 * likelihood_variance(s, t) * s.alpha(t) * (1.0 - s.alpha_bar(t)))
        }
    }
}

/// Reverse-step variance used inside likelihoods: `sigma_t^2`, or `beta_t`
/// when `sigma_t^2` is zero.
pub fn likelihood_variance(s: &Schedule, t: usize) -> f64 {
    let v = s.sigma_sq(t);
    if v > 0.0 {
        v
    } else {
        s.beta(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: Tensor,
    pub t: usize,
    pub z: Tensor,
    pub cond: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Same layout as [`DenoiserParams::flat`].
    pub grad: Vec<f64>,
    pub loss: f64,
}

impl GradientBundle {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

const SHARD: usize = 16;

/// Mean over the batch of `w_t * |z - z_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) z, t)|^2`
/// and its exact gradient.
///
/// Shards of 16 items are evaluated in parallel and summed in shard order,
/// so the result does not depend on the thread count.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &[TrainItem],
    s: &Schedule,
    weighting: Weighting,
) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let shards: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut grad = vec![0.0; params.num_params()];
            let mut loss = 0.0;
            for item in chunk {
                s.check_step(item.t, 1)?;
                item.z.ensure_shape(item.x0.shape())?;
                let xt = crate::forward_process::marginal_with_noise(&item.x0, item.t, s, &item.z)?;
                let w = loss_weight(s, item.t, weighting);
                params.check_inputs(xt.len(), item.t, item.cond)?;
                let (out, cache) = params.forward_cached(xt.data(), item.t, item.cond);
                let mut dout = Vec::with_capacity(out.len());
                for (o, z) in out.iter().zip(item.z.data()) {
                    let r = o - z;
                    loss += w * r * r;
                    dout.push(2.0 * w * r * scale);
                }
                params.backward(&cache, &dout, item.t, item.cond, &mut grad);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for shard in shards {
        let (l, g) = shard?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(GradientBundle {
        grad,
        loss: loss * scale,
    })
}

const MAGIC: &[u8; 8] = b"DDPMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    layer_sizes: Vec<usize>,
    schedule_fingerprint: String,
    step: u64,
    arrays: Vec<(String, usize)>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Network weights plus whatever a run needs to resume.
///
/// On disk: the 8 magic bytes `DDPMCKPT`, a little-endian `u32` version, a
/// little-endian `u64` byte length followed by a UTF-8 JSON header (config,
/// layer sizes, schedule fingerprint, step counter, array names and lengths,
/// free-form metadata), then every array in header order as little-endian
/// IEEE-754 `f64`. The first array is always `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule_fingerprint: String,
    pub step: u64,
    /// Additional named arrays, e.g. optimizer moments.
    pub extra: Vec<(String, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, schedule: &Schedule, step: u64) -> Self {
        Self {
            params,
            schedule_fingerprint: schedule.fingerprint(),
            step,
            extra: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut arrays = vec![("theta".to_string(), self.params.num_params())];
        arrays.extend(self.extra.iter().map(|(n, v)| (n.clone(), v.len())));
        let header = CheckpointHeader {
            config: self.params.config.clone(),
            layer_sizes: self.params.layer_sizes(),
            schedule_fingerprint: self.schedule_fingerprint.clone(),
            step: self.step,
            arrays,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(8 * self.params.num_params());
        for v in self.params.flat().iter().chain(self.extra.iter().flat_map(|(_, v)| v)) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if header.layer_sizes != header.config.layer_sizes() {
            return Err(Error::format("checkpoint", "layer sizes disagree with config"));
        }
        let mut arrays = Vec::new();
        for (name, n) in &header.arrays {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let vals = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>();
            arrays.push((name.clone(), vals));
        }
        let mut arrays = arrays.into_iter();
        let theta = match arrays.next() {
            Some((name, v)) if name == "theta" => v,
            _ => return Err(Error::format("checkpoint", "first array must be theta")),
        };
        Ok(Self {
            params: DenoiserParams::from_flat(header.config, theta)?,
            schedule_fingerprint: header.schedule_fingerprint,
            step: header.step,
            extra: arrays.collect(),
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::SigmaMode;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            hidden: vec![5, 4],
            time: TimeEmbedding::Sinusoidal { width: 4 },
            steps: 10,
            condition: None,
        }
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut p = DenoiserParams::zeros(small_cfg()).unwrap();
        let x = Tensor::vector(vec![0.3, -0.1]);
        assert_eq!(p.forward(&x, 3, None).unwrap().data(), &[0.0, 0.0]);
        let last = p.layer_sizes().len() - 2;
        p.layer_mut(last).1.copy_from_slice(&[0.5, -2.0]);
        assert_eq!(p.forward(&x, 7, None).unwrap().data(), &[0.5, -2.0]);
    }

    #[test]
    fn deterministic_output() {
        let p = DenoiserParams::init(small_cfg(), 5).unwrap();
        let x = Tensor::vector(vec![0.3, -0.1]);
        assert_eq!(p.forward(&x, 2, None).unwrap(), p.forward(&x, 2, None).unwrap());
        assert_eq!(p, DenoiserParams::init(small_cfg(), 5).unwrap());
    }

    #[test]
    fn single_layer_hand_value() {
        // one affine layer on [x, sin(t), cos(t)] with t = 0 -> [x, 0, 1]
        let cfg = DenoiserConfig {
            data_dim: 1,
            hidden: vec![],
            time: TimeEmbedding::Sinusoidal { width: 2 },
            steps: 5,
            condition: None,
        };
        let p = DenoiserParams::from_flat(cfg, vec![2.0, 0.7, -0.5, 0.1]).unwrap();
        let out = p.forward(&Tensor::scalar(0.25), 0, None).unwrap();
        // 2 * 0.25 + 0.7 * 0 - 0.5 * 1 + 0.1
        assert!((out.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        let p = DenoiserParams::init(small_cfg(), 1).unwrap();
        assert!(matches!(
            p.forward(&Tensor::scalar(0.0), 1, None),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            p.forward(&Tensor::zeros(&[2]), 11, None),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(p.forward(&Tensor::zeros(&[2]), 1, Some(0)).is_err());
        let pc = DenoiserParams::init(small_cfg().with_condition(2, 3), 1).unwrap();
        assert!(matches!(pc.forward(&Tensor::zeros(&[2]), 1, Some(2)), Err(Error::UnknownLabel(2))));
        assert!(pc.forward(&Tensor::zeros(&[2]), 1, None).is_err());
    }

    #[test]
    fn conditioning_changes_output_only_when_wired() {
        let pc = DenoiserParams::init(small_cfg().with_condition(3, 2), 4).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4]);
        let a = pc.forward(&x, 5, Some(0)).unwrap();
        let b = pc.forward(&x, 5, Some(1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(pc.label_embedding(1).unwrap().len(), 2);
        assert!(pc.label_embedding(3).is_none());
    }

    #[test]
    fn mu_theta_examples() {
        let s = Schedule::linear(2, 0.1, 0.2, SigmaMode::Beta).unwrap();
        let zero = |x: &Tensor, _: usize, _: Option<usize>| Tensor::zeros(x.shape());
        let x = Tensor::scalar(1.0);
        let mu = mu_theta(&zero, &x, 2, &s, None).unwrap();
        assert!((mu.data()[0] - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        let pinned = |x: &Tensor, _: usize, _: Option<usize>| Tensor::filled(x.shape(), 0.2);
        let mu = mu_theta(&pinned, &x, 2, &s, None).unwrap();
        // (1 - 0.2 * 0.2 / sqrt(0.28)) / sqrt(0.8), evaluated at 50 digits
        assert!((mu.data()[0] - 1.0335185632770432).abs() < 1e-14);
        assert!(mu_theta(&zero, &x, 0, &s, None).is_err());
    }

    #[test]
    fn weighted_loss_weights_are_finite_and_positive() {
        for mode in [SigmaMode::Beta, SigmaMode::PosteriorBeta] {
            let s = Schedule::linear(1000, 0.0004, 0.06, mode).unwrap();
            for t in 1..=1000 {
                let w = loss_weight(&s, t, Weighting::Weighted);
                assert!(w.is_finite() && w > 0.0, "t={t} w={w}");
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // single affine layer, zero weights, bias equal to the pinned noise
        let cfg = DenoiserConfig {
            data_dim: 1,
            hidden: vec![],
            time: TimeEmbedding::Sinusoidal { width: 2 },
            steps: 4,
            condition: None,
        };
        let p = DenoiserParams::from_flat(cfg, vec![0.0, 0.0, 0.0, 0.35]).unwrap();
        let s = Schedule::linear(4, 0.1, 0.3, SigmaMode::Beta).unwrap();
        let batch: Vec<TrainItem> = (1..=4)
            .map(|t| TrainItem {
                x0: Tensor::scalar(0.1 * t as f64),
                t,
                z: Tensor::scalar(0.35),
                cond: None,
            })
            .collect();
        let g = loss_and_grad(&p, &batch, &s, Weighting::Weighted).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_gradient_by_hand() {
        // out = w1 x + w2 sin(t) + w3 cos(t) + b; loss = (out - z)^2
        let cfg = DenoiserConfig {
            data_dim: 1,
            hidden: vec![],
            time: TimeEmbedding::Sinusoidal { width: 2 },
            steps: 3,
            condition: None,
        };
        let theta = vec![0.4, -0.3, 0.2, 0.05];
        let p = DenoiserParams::from_flat(cfg, theta.clone()).unwrap();
        let s = Schedule::linear(3, 0.1, 0.3, SigmaMode::Beta).unwrap();
        let (x0, z, t) = (0.6, -0.8, 2usize);
        let ab = s.alpha_bar(t);
        let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * z;
        let feats = [xt, (t as f64).sin(), (t as f64).cos(), 1.0];
        let out: f64 = theta.iter().zip(&feats).map(|(a, b)| a * b).sum();
        let r = out - z;
        let item = TrainItem {
            x0: Tensor::scalar(x0),
            t,
            z: Tensor::scalar(z),
            cond: None,
        };
        let g = loss_and_grad(&p, &[item], &s, Weighting::Unweighted).unwrap();
        assert!((g.loss - r * r).abs() < 1e-14);
        for (gi, fi) in g.grad.iter().zip(&feats) {
            assert!((gi - 2.0 * r * fi).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_and_bad_step_rejected() {
        let p = DenoiserParams::init(small_cfg(), 1).unwrap();
        let s = Schedule::linear(10, 0.01, 0.1, SigmaMode::Beta).unwrap();
        assert!(matches!(loss_and_grad(&p, &[], &s, Weighting::Unweighted), Err(Error::Empty(_))));
        let item = TrainItem {
            x0: Tensor::zeros(&[2]),
            t: 0,
            z: Tensor::zeros(&[2]),
            cond: None,
        };
        assert!(loss_and_grad(&p, &[item], &s, Weighting::Unweighted).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DenoiserParams::init(small_cfg().with_condition(2, 3), 9).unwrap();
        let s = Schedule::linear(10, 0.01, 0.1, SigmaMode::Beta).unwrap();
        let mut ck = Checkpoint::new(p, &s, 77);
        ck.extra.push(("adam_m".into(), vec![1.0, -2.5]));
        ck.meta = serde_json::json!({"note": "x"});
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DDPMCKPT");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.extra("adam_m"), Some(&[1.0, -2.5][..]));
        buf[0] = b'X';
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }
}

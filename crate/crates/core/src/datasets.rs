//! Toy datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::tensor::Tensor;
use crate::trainer::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// 1-D Gaussian mixture, values clamped to `[-1, 1]`. Each example is labeled
/// with the index of the component that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
}

impl Default for MixtureSpec {
    /// Two well-separated modes, as a stand-in for a bimodal data density.
    fn default() -> Self {
        Self {
            components: vec![
                Component {
                    weight: 0.5,
                    mean: -0.5,
                    std: 0.15,
                },
                Component {
                    weight: 0.5,
                    mean: 0.5,
                    std: 0.15,
                },
            ],
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        for c in &self.components {
            if !(c.weight > 0.0) || !(c.std >= 0.0) || !c.mean.is_finite() {
                return Err(Error::domain("components", format!("invalid component {c:?}")));
            }
        }
        Ok(())
    }

    pub fn sample_one(&self, rng: &mut NoiseRng) -> (f64, usize) {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.uniform() * total;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            if u < c.weight {
                k = i;
                break;
            }
            u -= c.weight;
        }
        let c = self.components[k];
        ((c.mean + c.std * rng.standard_normal()).clamp(-1.0, 1.0), k)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = NoiseRng::new(seed);
        (0..n)
            .map(|_| {
                let (x, k) = self.sample_one(&mut rng);
                Example::labeled(Tensor::scalar(x), k)
            })
            .collect()
    }
}

/// Smooth single-bump signals `h exp(-(i - c)^2 / 2)` on `width` samples,
/// centre and height drawn uniformly.
pub fn bumps(n: usize, width: usize, seed: u64) -> Vec<Example> {
    let mut rng = NoiseRng::new(seed);
    (0..n)
        .map(|_| {
            let c = 2.0 + (width as f64 - 5.0) * rng.uniform();
            let h = 0.5 + 0.5 * rng.uniform();
            Example::new(Tensor::vector(
                (0..width).map(|i| h * (-((i as f64 - c).powi(2)) / 2.0).exp()).collect(),
            ))
        })
        .collect()
}

/// `count` distinct ids below `2^dim`, drawn from `pattern_seed`.
pub fn pattern_ids(dim: usize, count: usize, pattern_seed: u64) -> Result<Vec<u64>> {
    if dim == 0 || dim > 20 || count == 0 || count > 1 << dim {
        return Err(Error::domain("patterns", format!("{count} distinct patterns of {dim} pixels")));
    }
    let mut rng = NoiseRng::new(pattern_seed);
    let mut ids: Vec<u64> = Vec::with_capacity(count);
    while ids.len() < count {
        let id = rng.below(1 << dim);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

/// `n` draws from the patterns of [`pattern_ids`] as ±1 pixels (bit `b` of
/// the id is pixel `b`), each pixel jittered by `N(0, noise^2)`. Labels
/// index the pattern.
pub fn patterns(n: usize, dim: usize, count: usize, noise: f64, pattern_seed: u64, seed: u64) -> Result<Vec<Example>> {
    let ids = pattern_ids(dim, count, pattern_seed)?;
    if !(noise >= 0.0) {
        return Err(Error::domain("noise", "must be non-negative"));
    }
    let mut rng = NoiseRng::new(seed);
    Ok((0..n)
        .map(|_| {
            let k = rng.below(count as u64) as usize;
            let x = (0..dim)
                .map(|b| if ids[k] >> b & 1 == 1 { 1.0 } else { -1.0 } + noise * rng.standard_normal())
                .collect();
            Example::labeled(Tensor::vector(x), k)
        })
        .collect())
}

/// Dataset choice for configured runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Mixture { components: Vec<Component> },
    Bumps { width: usize },
    Patterns {
        dim: usize,
        count: usize,
        noise: f64,
        #[serde(default)]
        pattern_seed: u64,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Mixture {
            components: MixtureSpec::default().components,
        }
    }
}

impl DataSpec {
    pub fn dim(&self) -> usize {
        match *self {
            DataSpec::Mixture { .. } => 1,
            DataSpec::Bumps { width } => width,
            DataSpec::Patterns { dim, .. } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Mixture { components } => MixtureSpec {
                components: components.clone(),
            }
            .validate(),
            DataSpec::Bumps { width } if *width < 6 => Err(Error::domain("width", "must be at least 6")),
            DataSpec::Bumps { .. } => Ok(()),
            DataSpec::Patterns {
                dim,
                count,
                noise,
                pattern_seed,
            } => patterns(0, *dim, *count, *noise, *pattern_seed, 0).map(|_| ()),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        self.validate()?;
        match self {
            DataSpec::Mixture { components } => Ok(MixtureSpec {
                components: components.clone(),
            }
            .sample(n, seed)),
            DataSpec::Bumps { width } => Ok(bumps(n, *width, seed)),
            DataSpec::Patterns {
                dim,
                count,
                noise,
                pattern_seed,
            } => patterns(n, *dim, *count, *noise, *pattern_seed, seed),
        }
    }
}

/// Drops labels.
pub fn unlabeled(data: &[Example]) -> Vec<Example> {
    data.iter().map(|e| Example::new(e.x.clone())).collect()
}

/// First component of every example.
pub fn first_components(data: &[Example]) -> Vec<f64> {
    data.iter().map(|e| e.x.data()[0]).collect()
}

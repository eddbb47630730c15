//! Diffusion in a fixed linear latent space, with label-conditioned denoising.
//!
//! The label embedding table of the denoiser doubles as the condition
//! vocabulary: [`ConditionVocab`] is a named, serializable view of it.

use std::io::{BufRead, Write};

use crate::denoiser_net::DenoiserParams;
use crate::error::{Error, Result};
use crate::sampler::{generate, SampleRunConfig};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::trainer::{train, Example, TrainConfig, TrainLog};

/// Linear encoder/decoder pair. Matrices are dense row-major:
/// `encode` is `latent_dim x data_dim`, `decode` is `data_dim x latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    data_dim: usize,
    latent_dim: usize,
    encode: Vec<f64>,
    decode: Vec<f64>,
}

/// `out[r] = sum_c m[r, c] v[c]`, skipping structural zeros so that 0/1
/// matrices reproduce their input bit-for-bit.
fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let mut acc: Option<f64> = None;
            for (c, &a) in m[r * cols..(r + 1) * cols].iter().enumerate() {
                if a != 0.0 {
                    let term = a * v[c];
                    acc = Some(acc.map_or(term, |s| s + term));
                }
            }
            acc.unwrap_or(0.0)
        })
        .collect()
}

impl Codec {
    /// Averages consecutive blocks of `2^m` entries; decoding duplicates each
    /// latent entry over its block.
    pub fn block_average(data_dim: usize, m: u32) -> Result<Self> {
        let block = 1usize
            .checked_shl(m)
            .filter(|&b| b <= data_dim)
            .ok_or_else(|| Error::domain("m", format!("2^{m} exceeds data_dim {data_dim}")))?;
        if data_dim % block != 0 {
            return Err(Error::domain("data_dim", format!("{data_dim} is not divisible by 2^{m}")));
        }
        let latent_dim = data_dim / block;
        let w = 1.0 / block as f64;
        let mut encode = vec![0.0; latent_dim * data_dim];
        let mut decode = vec![0.0; data_dim * latent_dim];
        for j in 0..latent_dim {
            for k in 0..block {
                let i = j * block + k;
                encode[j * data_dim + i] = w;
                decode[i * latent_dim + j] = 1.0;
            }
        }
        Ok(Self {
            data_dim,
            latent_dim,
            encode,
            decode,
        })
    }

    /// Degenerate codec: `m = 0`.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::block_average(dim, 0)
    }

    /// Arbitrary pair; rejects matrices that violate `E D E = E` beyond
    /// rounding.
    pub fn from_matrices(data_dim: usize, latent_dim: usize, encode: Vec<f64>, decode: Vec<f64>) -> Result<Self> {
        if latent_dim == 0 || latent_dim > data_dim {
            return Err(Error::domain("latent_dim", format!("{latent_dim} not in 1..={data_dim}")));
        }
        if encode.len() != latent_dim * data_dim || decode.len() != data_dim * latent_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![latent_dim, data_dim],
                got: vec![encode.len(), decode.len()],
            });
        }
        let codec = Self {
            data_dim,
            latent_dim,
            encode,
            decode,
        };
        for i in 0..data_dim {
            let mut e = vec![0.0; data_dim];
            e[i] = 1.0;
            let y = matvec(&codec.encode, latent_dim, data_dim, &e);
            let yy = matvec(&codec.encode, latent_dim, data_dim, &matvec(&codec.decode, data_dim, latent_dim, &y));
            let err = y.iter().zip(&yy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let scale = y.iter().map(|a| a.abs()).fold(1.0, f64::max);
            if err > 1e-12 * scale {
                return Err(Error::domain("codec", "decode followed by encode is not a projection"));
            }
        }
        Ok(codec)
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_len(self.data_dim)?;
        Ok(Tensor::vector(matvec(&self.encode, self.latent_dim, self.data_dim, x.data())))
    }

    /// Output has shape `[data_dim]`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        y.ensure_len(self.latent_dim)?;
        Ok(Tensor::vector(matvec(&self.decode, self.data_dim, self.latent_dim, y.data())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub id: usize,
    pub name: String,
    pub embedding: Vec<f64>,
}

/// Label ids `0..n` in order, each with a distinct name and an embedding of
/// common width.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVocab {
    entries: Vec<VocabEntry>,
}

impl ConditionVocab {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self> {
        let dim = entries.first().ok_or(Error::Empty("vocabulary"))?.embedding.len();
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::format("vocabulary", format!("label ids must be 0..n in order, found {} at {i}", e.id)));
            }
            if e.embedding.len() != dim {
                return Err(Error::format("vocabulary", format!("label {i} has embedding width {}", e.embedding.len())));
            }
            if e.name.is_empty() || e.name.contains([',', '\n']) {
                return Err(Error::format("vocabulary", format!("label {i} has an invalid name {:?}", e.name)));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::format("vocabulary", format!("duplicate label name {:?}", e.name)));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("vocabulary", format!("label {i} has a non-finite embedding")));
            }
        }
        Ok(Self { entries })
    }

    /// Reads the embedding table of `params`, naming labels in order.
    pub fn from_params(params: &DenoiserParams, names: &[&str]) -> Result<Self> {
        let spec = params.config().condition.ok_or(Error::Conditioning("denoiser has no label table"))?;
        if names.len() != spec.labels {
            return Err(Error::domain("names", format!("{} names for {} labels", names.len(), spec.labels)));
        }
        let entries = names
            .iter()
            .enumerate()
            .map(|(id, name)| VocabEntry {
                id,
                name: name.to_string(),
                embedding: params.label_embedding(id).expect("label within table").to_vec(),
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn check(&self, label: usize) -> Result<()> {
        if label < self.entries.len() {
            Ok(())
        } else {
            Err(Error::UnknownLabel(label))
        }
    }

    /// Copies the embeddings into the label table of `params`.
    pub fn install(&self, params: &mut DenoiserParams) -> Result<()> {
        let spec = params.config().condition.ok_or(Error::Conditioning("denoiser has no label table"))?;
        if spec.labels != self.len() || spec.dim != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![spec.labels, spec.dim],
                got: vec![self.len(), self.dim()],
            });
        }
        let start = params.label_table_offset().expect("conditioned params have a table");
        let table = &mut params.flat_mut()[start..start + spec.labels * spec.dim];
        for (row, e) in table.chunks_mut(spec.dim).zip(&self.entries) {
            row.copy_from_slice(&e.embedding);
        }
        Ok(())
    }

    /// One line per label: `label_id,label_name,embedding...`.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            write!(w, "{},{}", e.id, e.name)?;
            for v in &e.embedding {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: bad label id", n + 1)))?;
            let name = fields
                .next()
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: missing name", n + 1)))?
                .to_string();
            let embedding = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format("vocabulary", format!("line {}: {e}", n + 1)))?;
            entries.push(VocabEntry { id, name, embedding });
        }
        Self::new(entries)
    }
}

/// Denoiser operating on codec latents, with its codec and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub params: DenoiserParams,
    pub codec: Codec,
    pub vocab: Option<ConditionVocab>,
}

pub fn encode_dataset(dataset: &[Example], codec: &Codec) -> Result<Vec<Example>> {
    dataset
        .iter()
        .map(|e| {
            Ok(Example {
                x: codec.encode(&e.x)?,
                label: e.label,
            })
        })
        .collect()
}

/// Trains the noise predictor on encoded data. With a vocabulary, its
/// embeddings seed the label table of `init` and every label must belong to
/// it; the returned vocabulary carries the trained embeddings.
pub fn train_latent(
    dataset: &[Example],
    codec: &Codec,
    s: &Schedule,
    vocab: Option<&ConditionVocab>,
    mut init: DenoiserParams,
    cfg: &TrainConfig,
) -> Result<(LatentModel, TrainLog)> {
    if init.config().data_dim != codec.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![codec.latent_dim()],
            got: vec![init.config().data_dim],
        });
    }
    if let Some(v) = vocab {
        v.install(&mut init)?;
        for e in dataset {
            v.check(e.label.ok_or(Error::Conditioning("unlabeled example with a vocabulary"))?)?;
        }
    }
    let latents = encode_dataset(dataset, codec)?;
    let (params, log) = train(&latents, None, s, init, cfg)?;
    let vocab = match vocab {
        Some(v) => {
            let names: Vec<&str> = v.entries.iter().map(|e| e.name.as_str()).collect();
            Some(ConditionVocab::from_params(&params, &names)?)
        }
        None => None,
    };
    Ok((
        LatentModel {
            params,
            codec: codec.clone(),
            vocab,
        },
        log,
    ))
}

/// Runs the reverse chain in latent space with `label` as condition and
/// decodes each final latent.
pub fn generate_conditioned(model: &LatentModel, s: &Schedule, cfg: &SampleRunConfig, label: Option<usize>) -> Result<Vec<Tensor>> {
    match (&model.vocab, label) {
        (Some(v), Some(l)) => v.check(l)?,
        (Some(_), None) => return Err(Error::Conditioning("conditioned model needs a label")),
        (None, Some(l)) => return Err(Error::UnknownLabel(l)),
        (None, None) => {}
    }
    let run = generate(&model.params, s, cfg, &[model.codec.latent_dim()], label)?;
    run.samples.iter().map(|y| model.codec.decode(y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Component, MixtureSpec};
    use crate::denoiser_net::DenoiserConfig;
    use crate::schedule::SigmaMode;
    use crate::stats::mean_stderr;
    use proptest::prelude::*;

    #[test]
    fn pair_average() {
        let c = Codec::block_average(4, 1).unwrap();
        let y = c.encode(&Tensor::vector(vec![1.0, 1.0, 3.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
        assert_eq!(c.decode(&y).unwrap().data(), &[1.0, 1.0, 3.0, 3.0]);
        assert_eq!(c.encode(&Tensor::zeros(&[4])).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(c.decode(&Tensor::zeros(&[2])).unwrap().data(), &[0.0; 4]);
        assert!(c.encode(&Tensor::zeros(&[3])).is_err());
        assert!(Codec::block_average(6, 2).is_err());
        assert!(Codec::block_average(2, 2).is_err());
    }

    #[test]
    fn constants_survive_round_trip() {
        let c = Codec::block_average(8, 3).unwrap();
        let x = Tensor::filled(&[8], -0.375);
        assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn rejects_non_projection() {
        // E = [1, 1], D = [1; 1] gives E D E = 2 E
        assert!(Codec::from_matrices(2, 1, vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Codec::from_matrices(2, 1, vec![0.5, 0.5], vec![1.0, 1.0]).is_ok());
    }

    proptest! {
        #[test]
        fn encode_decode_encode(xs in proptest::collection::vec(-3.0f64..3.0, 8), m in 0u32..=3) {
            let c = Codec::block_average(8, m).unwrap();
            let x = Tensor::vector(xs);
            let y = c.encode(&x).unwrap();
            let yy = c.encode(&c.decode(&y).unwrap()).unwrap();
            for (a, b) in y.data().iter().zip(yy.data()) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1.0));
            }
        }

        #[test]
        fn residual_matches_block_means(xs in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let c = Codec::block_average(8, 2).unwrap();
            let x = Tensor::vector(xs.clone());
            let r = x.sub(&c.decode(&c.encode(&x).unwrap()).unwrap()).norm_sq();
            let mut oracle = 0.0;
            for block in xs.chunks(4) {
                let m = block.iter().sum::<f64>() / 4.0;
                oracle += block.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            prop_assert!((r - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn vocab_text_round_trip() {
        let cfg = DenoiserConfig::toy(1, 10).with_condition(3, 4);
        let p = DenoiserParams::init(cfg, 2).unwrap();
        let v = ConditionVocab::from_params(&p, &["low", "mid", "high"]).unwrap();
        let mut buf = Vec::new();
        v.write_text(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("0,low,"));
        assert_eq!(ConditionVocab::read_text(&buf[..]).unwrap(), v);
        assert_eq!(v.id_of("high"), Some(2));
        assert!(ConditionVocab::read_text(&b"1,a,0.0\n"[..]).is_err());
        assert!(ConditionVocab::read_text(&b"0,a,0.0\n1,a,1.0\n"[..]).is_err());
        assert!(ConditionVocab::read_text(&b"0,a,0.0\n1,b,1.0,2.0\n"[..]).is_err());
    }

    fn schedule() -> Schedule {
        Schedule::linear(40, 1e-3, 0.25, SigmaMode::PosteriorBeta).unwrap()
    }

    fn short_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 300,
            batch_size: 32,
            eval_every: 100,
            eval_n_mc: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identity_codec_reduces_to_plain_pipeline() {
        let s = schedule();
        let data = MixtureSpec::default().sample(200, 5);
        let cfg = DenoiserConfig::toy(1, s.steps()).with_condition(2, 3);
        let init = DenoiserParams::init(cfg, 8).unwrap();
        let vocab = ConditionVocab::from_params(&init, &["a", "b"]).unwrap();
        let codec = Codec::identity(1).unwrap();
        let (latent, llog) = train_latent(&data, &codec, &s, Some(&vocab), init.clone(), &short_cfg(3)).unwrap();
        let (plain, plog) = train(&data, None, &s, init, &short_cfg(3)).unwrap();
        assert_eq!(latent.params, plain);
        assert_eq!(llog, plog);

        let scfg = SampleRunConfig {
            n_samples: 20,
            seed: 4,
            ..SampleRunConfig::default()
        };
        let a = generate_conditioned(&latent, &s, &scfg, Some(1)).unwrap();
        let b = generate(&plain, &s, &scfg, &[1], Some(1)).unwrap().samples;
        assert_eq!(a, b);
        assert_eq!(a, generate_conditioned(&latent, &s, &scfg, Some(1)).unwrap());
    }

    #[test]
    fn label_errors() {
        let s = schedule();
        let mut data = MixtureSpec::default().sample(20, 5);
        data[3].label = Some(7);
        let init = DenoiserParams::init(DenoiserConfig::toy(1, s.steps()).with_condition(2, 3), 8).unwrap();
        let vocab = ConditionVocab::from_params(&init, &["a", "b"]).unwrap();
        let codec = Codec::identity(1).unwrap();
        assert!(matches!(
            train_latent(&data, &codec, &s, Some(&vocab), init.clone(), &short_cfg(0)),
            Err(Error::UnknownLabel(7))
        ));
        let model = LatentModel {
            params: init,
            codec,
            vocab: Some(vocab),
        };
        let scfg = SampleRunConfig {
            n_samples: 2,
            ..SampleRunConfig::default()
        };
        assert!(matches!(generate_conditioned(&model, &s, &scfg, Some(2)), Err(Error::UnknownLabel(2))));
        assert!(generate_conditioned(&model, &s, &scfg, None).is_err());
    }

    #[test]
    fn conditioning_separates_classes() {
        let s = schedule();
        let spec = MixtureSpec {
            components: vec![
                Component {
                    weight: 0.5,
                    mean: -0.7,
                    std: 0.1,
                },
                Component {
                    weight: 0.5,
                    mean: 0.7,
                    std: 0.1,
                },
            ],
        };
        // two-pixel signals [x, x + jitter], compressed to one latent
        let mut rng = crate::NoiseRng::new(9);
        let data: Vec<Example> = spec
            .sample(1000, 6)
            .into_iter()
            .map(|e| {
                let x = e.x.data()[0];
                Example::labeled(Tensor::vector(vec![x, x + 0.02 * rng.standard_normal()]), e.label.unwrap())
            })
            .collect();
        let codec = Codec::block_average(2, 1).unwrap();
        let init = DenoiserParams::init(DenoiserConfig::toy(1, s.steps()).with_condition(2, 4), 1).unwrap();
        let vocab = ConditionVocab::from_params(&init, &["A", "B"]).unwrap();
        let cfg = TrainConfig {
            steps: 3000,
            eval_every: 3000,
            ..short_cfg(2)
        };
        let (model, _) = train_latent(&data, &codec, &s, Some(&vocab), init, &cfg).unwrap();
        let scfg = SampleRunConfig {
            n_samples: 400,
            seed: 1,
            ..SampleRunConfig::default()
        };
        for (label, sign) in [(0, -1.0), (1, 1.0)] {
            let xs = generate_conditioned(&model, &s, &scfg, Some(label)).unwrap();
            assert!(xs.iter().all(|x| x.len() == 2 && x.data()[0] == x.data()[1]));
            let firsts: Vec<f64> = xs.iter().map(|x| x.data()[0]).collect();
            let (m, se) = mean_stderr(&firsts);
            assert!(sign * m > 4.0 * se, "label {label}: mean {m}, se {se}");
        }
    }
}

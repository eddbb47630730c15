//! Config-driven experiment commands behind the `diffusion` binary.
//!
//! Each command reads a TOML config, fills in defaults, resolves relative
//! paths against the config's directory and writes the result as
//! `resolved_config.toml` beside its outputs. Running a command again from
//! that file reproduces every output byte for byte. All files are written to
//! a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cold_diffusion::{degrade, restore_iterative, restore_one_step, train_restoration, DegradationOp, RestorationModel};
use crate::datasets::{unlabeled, DataSpec};
use crate::denoiser_net::{Checkpoint, ConditionSpec, DenoiserConfig, DenoiserParams, TimeEmbedding};
use crate::error::{Error, Result};
use crate::forward_process::{simulate_trajectory_where, write_trajectories_csv, Trajectory};
use crate::novelty_metrics::{
    bridge_from_sampler, model_realism, novelty_rates, novelty_score, novelty_score_exhaustive, Classifier, ItemId, Matcher,
    ModelOutputSet, Population, Quantizer, Rate, Universe,
};
use crate::rng::NoiseRng;
use crate::sampler::{generate, SampleRunConfig};
use crate::schedule::{Schedule, SigmaMode};
use crate::stats::{mean_var, Histogram};
use crate::tensor::Tensor;
use crate::trainer::{eval_seed, evaluate, TrainConfig, TrainLog, Trainer};

/// Environment variable supplying the seed when a config omits `seed`.
pub const SEED_ENV: &str = "DIFFUSION_SEED";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    ForwardSim,
    Train,
    Sample,
    Cold,
    Metrics,
}

/// 2 for configuration problems, 3 for numeric failures, 4 for missing or
/// unreadable artifacts.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::VarianceMismatch { .. } => 3,
        Error::MissingArtifact(_) | Error::Io(_) => 4,
        _ => 2,
    }
}

/// Files written and short human-readable findings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Reads `config` and runs `cmd` into `out`, taking the default seed from
/// [`SEED_ENV`].
pub fn run(cmd: Command, config: &Path, out: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(config).map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let default_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?),
        Err(_) => None,
    };
    run_text(cmd, &text, &base, out, default_seed)
}

/// As [`run`], with the config given as text and relative paths resolved
/// against `base`.
pub fn run_text(cmd: Command, text: &str, base: &Path, out: &Path, default_seed: Option<u64>) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let mut ctx = Ctx {
        out: out.to_path_buf(),
        summary: RunSummary::default(),
    };
    let seed_of = |s: Option<u64>| s.or(default_seed).unwrap_or(0);
    match cmd {
        Command::ForwardSim => {
            let mut cfg: ForwardSimConfig = parse(text)?;
            cfg.seed = Some(seed_of(cfg.seed));
            cmd_forward_sim(&cfg, &mut ctx)?;
        }
        Command::Train => {
            let mut cfg: TrainCmdConfig = parse(text)?;
            cfg.seed = Some(seed_of(cfg.seed));
            cfg.train.seed = cfg.seed.unwrap();
            cfg.resume_from = cfg.resume_from.map(|p| absolute(base, &p));
            cmd_train(&cfg, &mut ctx)?;
        }
        Command::Sample => {
            let mut cfg: SampleCmdConfig = parse(text)?;
            cfg.seed = Some(seed_of(cfg.seed));
            cfg.sample.seed = cfg.seed.unwrap();
            cfg.checkpoint = absolute(base, &cfg.checkpoint);
            cmd_sample(&cfg, &mut ctx)?;
        }
        Command::Cold => {
            let mut cfg: ColdCmdConfig = parse(text)?;
            cfg.seed = Some(seed_of(cfg.seed));
            cfg.train.seed = cfg.seed.unwrap();
            cfg.model = cfg.model.map(|p| absolute(base, &p));
            if cfg.severities.is_empty() {
                cfg.severities = vec![0, cfg.degradation.steps()];
            }
            cmd_cold(&cfg, &mut ctx)?;
        }
        Command::Metrics => {
            let mut cfg: MetricsCmdConfig = parse(text)?;
            cfg.seed = Some(seed_of(cfg.seed));
            cfg.universe.file = cfg.universe.file.map(|p| absolute(base, &p));
            cfg.observers.file = cfg.observers.file.map(|p| absolute(base, &p));
            if let OutputsConfig::File { path } | OutputsConfig::Samples { path, .. } = &mut cfg.outputs {
                *path = absolute(base, path);
            }
            cmd_metrics(&cfg, &mut ctx)?;
        }
    }
    Ok(ctx.summary)
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    fs::canonicalize(&joined).unwrap_or(joined)
}

struct Ctx {
    out: PathBuf,
    summary: RunSummary,
}

impl Ctx {
    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.out.join(name);
        write_atomic(&path, f)?;
        self.summary.files.push(path);
        Ok(())
    }

    fn write_resolved<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
        self.write(RESOLVED_CONFIG, |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn note(&mut self, s: String) {
        self.summary.notes.push(s);
    }
}

/// Writes through `f` into a sibling temporary file, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Checkpoint::read_from(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 4e-4,
            beta_end: 0.06,
            sigma_mode: SigmaMode::PosteriorBeta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 80,
            lo: -4.0,
            hi: 4.0,
        }
    }
}

impl HistogramConfig {
    fn build(&self, values: &[f64]) -> Result<Histogram> {
        if self.bins == 0 || !(self.hi > self.lo) {
            return Err(Error::domain("histogram", "need bins > 0 and hi > lo"));
        }
        Ok(Histogram::new(values, self.lo, self.hi, self.bins))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub time: TimeEmbedding,
    pub condition: Option<ConditionSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            time: TimeEmbedding::default(),
            condition: None,
        }
    }
}

impl NetworkConfig {
    fn build(&self, data_dim: usize, steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            data_dim,
            hidden: self.hidden.clone(),
            time: self.time,
            steps,
            condition: self.condition,
        }
    }
}

fn values(xs: &[Tensor]) -> Vec<f64> {
    xs.iter().flat_map(|x| x.data().iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSimConfig {
    pub seed: Option<u64>,
    pub schedule: ScheduleConfig,
    pub data: DataSpec,
    pub n_trajectories: usize,
    /// Trajectory CSV keeps every `stride`-th step, the panel steps and T.
    pub stride: usize,
    pub histogram: HistogramConfig,
}

impl Default for ForwardSimConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schedule: ScheduleConfig::default(),
            data: DataSpec::default(),
            n_trajectories: 2000,
            stride: 10,
            histogram: HistogramConfig::default(),
        }
    }
}

/// Histogram panels: 0, T/4, T/2 and T, deduplicated.
pub fn panel_steps(steps: usize) -> Vec<usize> {
    let mut ts = vec![0, steps / 4, steps / 2, steps];
    ts.dedup();
    ts
}

fn cmd_forward_sim(cfg: &ForwardSimConfig, ctx: &mut Ctx) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let s = cfg.schedule.build()?;
    if cfg.n_trajectories == 0 {
        return Err(Error::domain("n_trajectories", "must be positive"));
    }
    if cfg.stride == 0 {
        return Err(Error::domain("stride", "must be positive"));
    }
    cfg.histogram.build(&[])?;
    ctx.write_resolved(cfg)?;
    let x0s: Vec<Tensor> = cfg.data.sample(cfg.n_trajectories, seed)?.into_iter().map(|e| e.x).collect();
    let panels = panel_steps(s.steps());
    let keep = |t: usize| t % cfg.stride == 0 || t == s.steps() || panels.contains(&t);
    use rayon::prelude::*;
    let trajs: Vec<Trajectory> = x0s
        .par_iter()
        .enumerate()
        .map(|(i, x0)| simulate_trajectory_where(x0, &s, seed, i as u64, keep))
        .collect();

    ctx.write("schedule.csv", |w| Ok(w.write_all(s.to_table().as_bytes())?))?;
    ctx.write("trajectories.csv", |w| Ok(write_trajectories_csv(&trajs, w)?))?;
    let mut moments = Vec::new();
    for &t in &panels {
        let states: Vec<Tensor> = trajs.iter().map(|tr| tr.state_at(t).expect("panel kept").clone()).collect();
        let vs = values(&states);
        let hist = cfg.histogram.build(&vs)?;
        ctx.write(&format!("hist_t{t}.csv"), |w| Ok(hist.write_csv(w)?))?;
        let (m, v) = mean_var(&vs);
        moments.push((t, m, v));
    }
    ctx.write("moments.csv", |w| {
        writeln!(w, "t,mean,var")?;
        for (t, m, v) in &moments {
            writeln!(w, "{t},{m:?},{v:?}")?;
        }
        Ok(())
    })?;
    let (_, m, v) = moments.last().expect("at least one panel");
    ctx.note(format!("t = {}: mean {m:.4}, variance {v:.4}", s.steps()));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    /// Master seed; also replaces `train.seed`.
    pub seed: Option<u64>,
    pub schedule: ScheduleConfig,
    pub data: DataSpec,
    pub n_train: usize,
    pub n_held_out: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schedule: ScheduleConfig::default(),
            data: DataSpec::default(),
            n_train: 4000,
            n_held_out: 500,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            resume_from: None,
        }
    }
}

fn labeled_or_not(data: Vec<crate::trainer::Example>, net: &NetworkConfig) -> Vec<crate::trainer::Example> {
    if net.condition.is_some() {
        data
    } else {
        unlabeled(&data)
    }
}

fn cmd_train(cfg: &TrainCmdConfig, ctx: &mut Ctx) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let s = cfg.schedule.build()?;
    cfg.train.validate()?;
    if cfg.n_train == 0 {
        return Err(Error::domain("n_train", "must be positive"));
    }
    let train_set = labeled_or_not(cfg.data.sample(cfg.n_train, seed)?, &cfg.network);
    let held_out = labeled_or_not(cfg.data.sample(cfg.n_held_out, seed.wrapping_add(1))?, &cfg.network);
    let eval_set = if held_out.is_empty() { &train_set } else { &held_out };
    let net = cfg.network.build(cfg.data.dim(), s.steps());

    let mut trainer = match &cfg.resume_from {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if ck.params.config() != &net {
                return Err(Error::Config(format!("checkpoint {} has a different network", path.display())));
            }
            Trainer::resume(ck, &s, cfg.train.clone())?
        }
        None => Trainer::new(DenoiserParams::init(net, seed.wrapping_add(2))?, cfg.train.clone())?,
    };
    ctx.write_resolved(cfg)?;
    ctx.write("schedule.csv", |w| Ok(w.write_all(s.to_table().as_bytes())?))?;

    let mut log = TrainLog::default();
    let start = trainer.step_count();
    while trainer.step_count() < cfg.train.steps {
        let mut row = trainer.step(&train_set, &s)?;
        let last = row.step == cfg.train.steps;
        if row.step % cfg.train.eval_every == 0 || last {
            row.eval_metric = Some(evaluate(trainer.params(), eval_set, &s, cfg.train.eval_n_mc, eval_seed(seed))?);
            let ck = trainer.checkpoint(&s);
            ctx.write(&format!("ckpt_{}.bin", row.step), |w| ck.write_to(w))?;
        }
        log.rows.push(row);
    }
    ctx.write("log.csv", |w| Ok(log.write_csv(w)?))?;
    match log.last_eval() {
        Some(e) => ctx.note(format!("steps {start}..{}: final held-out loss {e:.5}", trainer.step_count())),
        None => ctx.note(format!("checkpoint already at step {start}; nothing to do")),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCmdConfig {
    /// Master seed; also replaces `sample.seed`.
    pub seed: Option<u64>,
    pub schedule: ScheduleConfig,
    pub checkpoint: PathBuf,
    pub sample: SampleRunConfig,
    pub label: Option<usize>,
    pub histogram: HistogramConfig,
}

impl Default for SampleCmdConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schedule: ScheduleConfig::default(),
            checkpoint: PathBuf::new(),
            sample: SampleRunConfig::default(),
            label: None,
            histogram: HistogramConfig {
                bins: 80,
                lo: -1.5,
                hi: 1.5,
            },
        }
    }
}

fn cmd_sample(cfg: &SampleCmdConfig, ctx: &mut Ctx) -> Result<()> {
    let s = cfg.schedule.build()?;
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(Error::Config("missing field `checkpoint`".into()));
    }
    cfg.histogram.build(&[])?;
    let ck = read_checkpoint(&cfg.checkpoint)?;
    if ck.schedule_fingerprint != s.fingerprint() {
        return Err(Error::ScheduleMismatch {
            checkpoint: ck.schedule_fingerprint,
            run: s.fingerprint(),
        });
    }
    ctx.write_resolved(cfg)?;
    let params = ck.params;
    let run = generate(&params, &s, &cfg.sample, &[params.config().data_dim], cfg.label)?;
    ctx.write("samples.csv", |w| Ok(run.write_csv(w)?))?;
    let firsts: Vec<f64> = run.samples.iter().map(|x| x.data()[0]).collect();
    let hist = cfg.histogram.build(&firsts)?;
    ctx.write("histogram.csv", |w| Ok(hist.write_csv(w)?))?;
    let (m, v) = mean_var(&firsts);
    ctx.note(format!("{} samples; component 0 mean {m:.4}, variance {v:.4}", run.samples.len()));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationConfig {
    /// One standard-normal `z`, drawn from the run seed, shared by all data.
    FixedNoise { steps: usize, beta_start: f64, beta_end: f64 },
    Blur { steps: usize, width_start: f64, width_end: f64 },
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig::FixedNoise {
            steps: 20,
            beta_start: 0.01,
            beta_end: 0.3,
        }
    }
}

impl DegradationConfig {
    pub fn steps(&self) -> usize {
        match *self {
            DegradationConfig::FixedNoise { steps, .. } | DegradationConfig::Blur { steps, .. } => steps,
        }
    }

    pub fn build(&self, dim: usize, seed: u64) -> Result<DegradationOp> {
        match *self {
            DegradationConfig::FixedNoise {
                steps,
                beta_start,
                beta_end,
            } => {
                let s = Schedule::linear(steps, beta_start, beta_end, SigmaMode::Beta)?;
                Ok(DegradationOp::fixed_noise(s, NoiseRng::new(seed).normal_like(&[dim])))
            }
            DegradationConfig::Blur {
                steps,
                width_start,
                width_end,
            } => DegradationOp::blur(steps, width_start, width_end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColdCmdConfig {
    pub seed: Option<u64>,
    pub degradation: DegradationConfig,
    pub data: DataSpec,
    pub n_train: usize,
    pub n_held_out: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Restoration checkpoint to evaluate instead of training a new one.
    pub model: Option<PathBuf>,
    /// Severities evaluated on the held-out pool; empty means `[0, T]`.
    pub severities: Vec<usize>,
}

impl Default for ColdCmdConfig {
    fn default() -> Self {
        Self {
            seed: None,
            degradation: DegradationConfig::default(),
            data: DataSpec::default(),
            n_train: 2000,
            n_held_out: 400,
            network: NetworkConfig::default(),
            train: TrainConfig {
                steps: 6000,
                ..TrainConfig::default()
            },
            model: None,
            severities: Vec::new(),
        }
    }
}

fn cmd_cold(cfg: &ColdCmdConfig, ctx: &mut Ctx) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let dim = cfg.data.dim();
    if cfg.n_held_out == 0 {
        return Err(Error::domain("n_held_out", "must be positive"));
    }
    let model = match &cfg.model {
        Some(path) => {
            let m = RestorationModel::from_checkpoint(read_checkpoint(path)?)?;
            if m.params.config().data_dim != dim {
                return Err(Error::Config(format!("model {} expects dimension {}", path.display(), m.params.config().data_dim)));
            }
            ctx.write_resolved(cfg)?;
            m
        }
        None => {
            cfg.train.validate()?;
            let op = cfg.degradation.build(dim, seed.wrapping_add(3))?;
            let train_set = unlabeled(&cfg.data.sample(cfg.n_train, seed)?);
            let init = DenoiserParams::init(cfg.network.build(dim, op.steps()), seed.wrapping_add(2))?;
            ctx.write_resolved(cfg)?;
            let (m, log) = train_restoration(&train_set, &op, init, &cfg.train)?;
            ctx.write("log.csv", |w| Ok(log.write_csv(w)?))?;
            let ck = m.checkpoint(cfg.train.steps);
            ctx.write("restorer.bin", |w| ck.write_to(w))?;
            m
        }
    };
    let op = &model.op;
    if let Some(&bad) = cfg.severities.iter().find(|&&t| t > op.steps()) {
        return Err(Error::StepOutOfRange {
            t: bad,
            min: 0,
            max: op.steps(),
        });
    }
    let held_out = unlabeled(&cfg.data.sample(cfg.n_held_out, seed.wrapping_add(1))?);
    let mut rows = Vec::new();
    for &t in &cfg.severities {
        for (i, ex) in held_out.iter().enumerate() {
            let xt = degrade(op, &ex.x, t)?;
            let one = restore_one_step(&model, &xt, t)?.sub(&ex.x).l1();
            let iter = restore_iterative(&model, op, &xt, t)?.sub(&ex.x).l1();
            rows.push((i, t, one, iter));
        }
    }
    ctx.write("report.csv", |w| {
        writeln!(w, "input_id,t,one_step_l1,iterative_l1")?;
        for (i, t, a, b) in &rows {
            writeln!(w, "{i},{t},{a:?},{b:?}")?;
        }
        Ok(())
    })?;
    let n = held_out.len() as f64;
    let means: Vec<(usize, f64, f64)> = cfg
        .severities
        .iter()
        .map(|&t| {
            let (a, b) = rows
                .iter()
                .filter(|r| r.1 == t)
                .fold((0.0, 0.0), |(a, b), r| (a + r.2, b + r.3));
            (t, a / n, b / n)
        })
        .collect();
    ctx.write("summary.csv", |w| {
        writeln!(w, "t,mean_one_step_l1,mean_iterative_l1")?;
        for (t, a, b) in &means {
            writeln!(w, "{t},{a:?},{b:?}")?;
        }
        Ok(())
    })?;
    for (t, a, b) in means {
        ctx.note(format!("t = {t}: mean L1 one-step {a:.5}, iterative {b:.5}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    /// Everything is class 0.
    #[default]
    Single,
    /// Class = value of the middle pixel.
    CenterPixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub rows: usize,
    pub cols: usize,
    /// `item_id,bits` file; overrides the grid.
    pub file: Option<PathBuf>,
    pub classes: ClassRule,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            file: None,
            classes: ClassRule::Single,
        }
    }
}

impl UniverseConfig {
    fn build(&self) -> Result<Universe> {
        let u = match &self.file {
            Some(p) => Universe::read_text(BufReader::new(File::open(p).map_err(|_| Error::MissingArtifact(p.clone()))?))?,
            None => Universe::binary_grid(self.rows, self.cols)?,
        };
        Ok(match self.classes {
            ClassRule::Single => u.with_classes(|_| 0),
            ClassRule::CenterPixel => u.with_classes(|b| usize::from(b[b.len() / 2])),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserversConfig {
    /// `observer_id,memory_item_ids...` file; otherwise synthetic memories.
    pub file: Option<PathBuf>,
    pub count: usize,
    pub memory_size: usize,
    pub matcher: Matcher,
    /// Observer `k` accepts, for every class, the items with at least
    /// `classifier_thresholds[k % len]` set bits.
    pub classifier_thresholds: Vec<usize>,
}

impl Default for ObserversConfig {
    fn default() -> Self {
        Self {
            file: None,
            count: 5,
            memory_size: 40,
            matcher: Matcher::Exact,
            classifier_thresholds: vec![3, 4, 5, 6],
        }
    }
}

impl ObserversConfig {
    fn build(&self, u: &Universe, seed: u64) -> Result<Population> {
        let mut pop = match &self.file {
            Some(p) => Population::read_text(
                BufReader::new(File::open(p).map_err(|_| Error::MissingArtifact(p.clone()))?),
                u,
                self.matcher,
            )?,
            None => Population::synthetic(u, self.count, self.memory_size, self.matcher, seed)?,
        };
        if self.classifier_thresholds.is_empty() {
            return Err(Error::domain("classifier_thresholds", "must not be empty"));
        }
        let classes = u.class_ids();
        for (k, o) in pop.observers.iter_mut().enumerate() {
            let c = Classifier::MinOnes {
                k: self.classifier_thresholds[k % self.classifier_thresholds.len()],
            };
            for &class in &classes {
                o.classifiers.insert(class, c.clone());
            }
        }
        Ok(pop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputsConfig {
    /// `count` draws: outside the universe with probability
    /// `outside_fraction`, else a uniform item.
    Synthetic { count: usize, outside_fraction: f64 },
    /// One item id per line, or `outside`.
    File { path: PathBuf },
    /// A `samples.csv` from the `sample` command, quantized onto the grid.
    Samples {
        path: PathBuf,
        #[serde(default)]
        quantizer: Quantizer,
    },
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig::Synthetic {
            count: 300,
            outside_fraction: 0.1,
        }
    }
}

impl OutputsConfig {
    fn build(&self, u: &Universe, seed: u64) -> Result<ModelOutputSet> {
        match self {
            OutputsConfig::Synthetic { count, outside_fraction } => {
                if !(0.0..=1.0).contains(outside_fraction) {
                    return Err(Error::domain("outside_fraction", "must lie in [0, 1]"));
                }
                let ids: Vec<ItemId> = u.ids().collect();
                let mut rng = NoiseRng::new(seed);
                let mut out = ModelOutputSet::default();
                for _ in 0..*count {
                    if rng.uniform() < *outside_fraction {
                        out.outside += 1;
                    } else {
                        out.inside.push(ids[rng.below(ids.len() as u64) as usize]);
                    }
                }
                Ok(out)
            }
            OutputsConfig::File { path } => {
                let file = File::open(path).map_err(|_| Error::MissingArtifact(path.clone()))?;
                let mut out = ModelOutputSet::default();
                for (n, line) in BufReader::new(file).lines().enumerate() {
                    let line = line?;
                    match line.trim() {
                        "" => {}
                        "outside" => out.outside += 1,
                        id => match id.parse::<ItemId>() {
                            Ok(i) if u.contains(i) => out.inside.push(i),
                            Ok(_) => out.outside += 1,
                            Err(e) => return Err(Error::format("model outputs", format!("line {}: {e}", n + 1))),
                        },
                    }
                }
                Ok(out)
            }
            OutputsConfig::Samples { path, quantizer } => {
                let file = File::open(path).map_err(|_| Error::MissingArtifact(path.clone()))?;
                Ok(bridge_from_sampler(&read_samples_csv(BufReader::new(file))?, u, quantizer))
            }
        }
    }
}

/// Final samples from a `samples.csv`, with or without a `t` column (only
/// `t = 0` rows are kept when present).
pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Vec<Tensor>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Empty("samples file"))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(id_col), Some(ci_col), Some(v_col)) = (find("sample_id"), find("component_index"), find("value")) else {
        return Err(Error::format("samples file", format!("unexpected header {header:?}")));
    };
    let t_col = find("t");
    let mut by_id: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = |what: &str| Error::format("samples file", format!("line {}: bad {what}", n + 2));
        let get = |i: usize| f.get(i).copied().ok_or_else(|| bad("column count"));
        if let Some(tc) = t_col {
            if get(tc)? != "0" {
                continue;
            }
        }
        let id: usize = get(id_col)?.parse().map_err(|_| bad("sample_id"))?;
        let ci: usize = get(ci_col)?.parse().map_err(|_| bad("component_index"))?;
        let v: f64 = get(v_col)?.parse().map_err(|_| bad("value"))?;
        by_id.entry(id).or_default().insert(ci, v);
    }
    by_id
        .into_values()
        .map(|comps| {
            let n = comps.len();
            if comps.keys().copied().ne(0..n) {
                return Err(Error::format("samples file", "component indices are not contiguous"));
            }
            Tensor::new(vec![n], comps.into_values().collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsCmdConfig {
    pub seed: Option<u64>,
    pub universe: UniverseConfig,
    pub observers: ObserversConfig,
    pub outputs: OutputsConfig,
    /// Class used for realism.
    pub class: usize,
}

impl Default for MetricsCmdConfig {
    fn default() -> Self {
        Self {
            seed: None,
            universe: UniverseConfig::default(),
            observers: ObserversConfig::default(),
            outputs: OutputsConfig::default(),
            class: 0,
        }
    }
}

fn fmt_rate(r: Rate) -> (String, String) {
    match r {
        Some(q) => (format!("{:?}", *q.numer() as f64 / *q.denom() as f64), format!("{}/{}", q.numer(), q.denom())),
        None => ("undefined".into(), "undefined".into()),
    }
}

fn brute_rate(num: usize, den: usize) -> Rate {
    (den != 0).then(|| Ratio::new(num as u64, den as u64))
}

fn cmd_metrics(cfg: &MetricsCmdConfig, ctx: &mut Ctx) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let u = cfg.universe.build()?;
    let obs = cfg.observers.build(&u, seed)?;
    let outputs = cfg.outputs.build(&u, seed.wrapping_add(1))?;
    if !u.class_ids().contains(&cfg.class) {
        return Err(Error::UnknownLabel(cfg.class));
    }
    ctx.write_resolved(cfg)?;
    let report = novelty_rates(&u, &obs, &outputs)?;

    // independent recount: full-universe scans, no set algebra
    let mut nus = Vec::with_capacity(u.len());
    for x in u.ids() {
        nus.push((x, novelty_score(&u, &obs, x)?, novelty_score_exhaustive(&u, &obs, x)?));
    }
    let new_items = nus.iter().filter(|r| r.2 == 0.0).count();
    let mut realistic = 0;
    let mut new_generated = 0;
    for &(x, _, nu) in &nus {
        if outputs.inside.contains(&x) {
            realistic += 1;
            if nu == 0.0 {
                new_generated += 1;
            }
        }
    }
    let n = u.len();
    let brute_n_m = brute_rate(new_generated, realistic);
    let brute_n_mo = brute_rate(new_generated, new_items);
    let mut votes = 0usize;
    for &x in &outputs.inside {
        let bits = u.bits(x)?;
        for o in &obs.observers {
            if o.classifiers.get(&cfg.class).is_some_and(|c| c.accepts(x, bits)) {
                votes += 1;
            }
        }
    }
    let brute_realism = votes as f64 / (obs.len() * outputs.total()) as f64;
    let realism = if outputs.total() == 0 || obs.is_empty() {
        None
    } else {
        Some(model_realism(&u, &obs, &outputs, cfg.class)?)
    };

    let mut rows: Vec<(&str, (String, String), String)> = Vec::new();
    let count = |v: usize| (v.to_string(), v.to_string());
    rows.push(("universe_size", count(report.universe_size), n.to_string()));
    rows.push(("new_items", count(report.new_items), new_items.to_string()));
    rows.push(("realistic_generated", count(report.realistic_generated), realistic.to_string()));
    rows.push(("new_generated", count(report.new_generated), new_generated.to_string()));
    rows.push(("outside_generated", count(outputs.outside), outputs.outside.to_string()));
    rows.push(("N_IO", fmt_rate(report.intrinsic_novelty), fmt_rate(brute_rate(new_items, n)).1));
    rows.push(("C_M", fmt_rate(report.completeness), fmt_rate(brute_rate(realistic, n)).1));
    rows.push(("N_M", fmt_rate(report.relative_novelty), fmt_rate(brute_n_m).1));
    rows.push(("N_MO", fmt_rate(report.absolute_novelty), fmt_rate(brute_n_mo).1));
    let rm = match realism {
        Some(r) => (format!("{r:?}"), format!("{votes}/{}", obs.len() * outputs.total())),
        None => ("undefined".into(), "undefined".into()),
    };
    let rm_brute = if realism.is_some() { format!("{brute_realism:?}") } else { "undefined".into() };
    rows.push(("R_M", rm, rm_brute));
    ctx.write("metrics.csv", |w| {
        writeln!(w, "metric,value,exact,brute_force")?;
        for (name, (v, e), b) in &rows {
            writeln!(w, "{name},{v},{e},{b}")?;
        }
        Ok(())
    })?;
    ctx.write("items.csv", |w| {
        writeln!(w, "item_id,nu,nu_brute_force,new")?;
        for (x, a, b) in &nus {
            writeln!(w, "{x},{a:?},{b:?},{}", u8::from(*a == 0.0))?;
        }
        Ok(())
    })?;
    let agree = nus.iter().all(|r| r.1 == r.2) && report.new_items == new_items && report.relative_novelty == brute_n_m;
    ctx.note(format!(
        "N_IO {} C_M {} N_M {} N_MO {} R_M {}; relation {}; brute force {}",
        fmt_rate(report.intrinsic_novelty).1,
        fmt_rate(report.completeness).1,
        fmt_rate(report.relative_novelty).1,
        fmt_rate(report.absolute_novelty).1,
        rows.last().map(|r| r.1 .0.clone()).unwrap_or_default(),
        if report.relation_holds() { "holds" } else { "not evaluable" },
        if agree { "agrees" } else { "DISAGREES" },
    ));
    Ok(())
}

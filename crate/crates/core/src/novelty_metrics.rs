//! Observer-based novelty and realism over small, fully enumerable universes.
//!
//! Counts are kept as integers and every rate is an exact [`Ratio`]; a rate
//! whose denominator is empty is `None` rather than an error.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

pub use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::tensor::Tensor;

pub type ItemId = u64;

/// Exact rate, `None` when undefined.
pub type Rate = Option<Ratio<u64>>;

fn rate(num: usize, den: usize) -> Rate {
    (den > 0).then(|| Ratio::new(num as u64, den as u64))
}

/// Finite set of items, each a fixed-width bit pattern, with an optional
/// class map.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    width: usize,
    items: BTreeMap<ItemId, Vec<bool>>,
    by_bits: BTreeMap<Vec<bool>, ItemId>,
    classes: BTreeMap<ItemId, usize>,
}

impl Universe {
    pub fn new(items: Vec<(ItemId, Vec<bool>)>) -> Result<Self> {
        let width = items.first().ok_or(Error::Empty("universe"))?.1.len();
        let mut map = BTreeMap::new();
        let mut by_bits = BTreeMap::new();
        for (id, bits) in items {
            if bits.len() != width {
                return Err(Error::format("universe", format!("item {id} has {} bits, expected {width}", bits.len())));
            }
            if map.contains_key(&id) {
                return Err(Error::format("universe", format!("duplicate item id {id}")));
            }
            if let Some(other) = by_bits.insert(bits.clone(), id) {
                return Err(Error::format("universe", format!("items {other} and {id} share a bit pattern")));
            }
            map.insert(id, bits);
        }
        Ok(Self {
            width,
            items: map,
            by_bits,
            classes: BTreeMap::new(),
        })
    }

    /// All binary images of `rows x cols`; item id is the row-major bit
    /// pattern read as an integer, pixel `k` being bit `k`.
    pub fn binary_grid(rows: usize, cols: usize) -> Result<Self> {
        let n = rows * cols;
        if n == 0 || n > 20 {
            return Err(Error::domain("grid", format!("{rows}x{cols} must have 1..=20 pixels")));
        }
        Self::new((0..1u64 << n).map(|id| (id, (0..n).map(|k| id >> k & 1 == 1).collect())).collect())
    }

    /// Assigns every item the class `f(bits)`.
    pub fn with_classes(mut self, f: impl Fn(&[bool]) -> usize) -> Self {
        self.classes = self.items.iter().map(|(&id, b)| (id, f(b))).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.items.contains_key(&id)
    }

    /// Ids in increasing order.
    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.keys().copied()
    }

    pub fn bits(&self, id: ItemId) -> Result<&[bool]> {
        self.items.get(&id).map(Vec::as_slice).ok_or(Error::UnknownItem(id))
    }

    pub fn id_of(&self, bits: &[bool]) -> Option<ItemId> {
        self.by_bits.get(bits).copied()
    }

    pub fn class_of(&self, id: ItemId) -> Option<usize> {
        self.classes.get(&id).copied()
    }

    /// Distinct class ids in increasing order.
    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.values().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sub-universe `I_c`.
    pub fn restrict_to_class(&self, class: usize) -> Result<Self> {
        let items = self
            .items
            .iter()
            .filter(|(id, _)| self.classes.get(id) == Some(&class))
            .map(|(&id, b)| (id, b.clone()))
            .collect::<Vec<_>>();
        if items.is_empty() {
            return Err(Error::Empty("class"));
        }
        let mut u = Self::new(items)?;
        u.classes = u.items.keys().map(|&id| (id, class)).collect();
        Ok(u)
    }

    /// Lines `item_id,bits` with bits written as `0`/`1` characters.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, bits) in &self.items {
            let s: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(w, "{id},{s}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::format("universe", format!("line {}: expected `item_id,bits`", n + 1));
            let (id, bits) = line.split_once(',').ok_or_else(bad)?;
            let id = id.trim().parse().map_err(|_| bad())?;
            let bits = bits
                .trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(bad()),
                })
                .collect::<Result<Vec<_>>>()?;
            items.push((id, bits));
        }
        Self::new(items)
    }
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Similarity `M_o(x, i)`. Both variants are symmetric with `M(i, i) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Exact,
    /// `max(0, 1 - d / (radius + 1))` for Hamming distance `d`.
    Hamming { radius: usize },
}

impl Matcher {
    pub fn similarity(&self, a: &[bool], b: &[bool]) -> f64 {
        match *self {
            Matcher::Exact => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
            Matcher::Hamming { radius } => {
                let d = hamming(a, b);
                if d > radius {
                    0.0
                } else {
                    1.0 - d as f64 / (radius + 1) as f64
                }
            }
        }
    }
}

/// Boolean class membership judgement `C_{c,o}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    AcceptAll,
    RejectAll,
    Members { items: BTreeSet<ItemId> },
    /// Accepts items with at least `k` set bits.
    MinOnes { k: usize },
}

impl Classifier {
    pub fn accepts(&self, id: ItemId, bits: &[bool]) -> bool {
        match self {
            Classifier::AcceptAll => true,
            Classifier::RejectAll => false,
            Classifier::Members { items } => items.contains(&id),
            Classifier::MinOnes { k } => bits.iter().filter(|&&b| b).count() >= *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub id: String,
    /// `I_o`: items the observer recalls having seen.
    pub memory: BTreeSet<ItemId>,
    pub matcher: Matcher,
    /// Classifier per class id; a missing class is rejected.
    pub classifiers: BTreeMap<usize, Classifier>,
}

impl Observer {
    pub fn new(id: impl Into<String>, memory: impl IntoIterator<Item = ItemId>, matcher: Matcher) -> Self {
        Self {
            id: id.into(),
            memory: memory.into_iter().collect(),
            matcher,
            classifiers: BTreeMap::new(),
        }
    }

    pub fn with_classifier(mut self, class: usize, c: Classifier) -> Self {
        self.classifiers.insert(class, c);
        self
    }

    pub fn classifies(&self, class: usize, id: ItemId, bits: &[bool]) -> bool {
        self.classifiers.get(&class).is_some_and(|c| c.accepts(id, bits))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Population {
    pub observers: Vec<Observer>,
}

impl Population {
    pub fn new(observers: Vec<Observer>) -> Self {
        Self { observers }
    }

    pub fn len(&self) -> usize {
        self.observers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observers.is_empty()
    }

    /// Every memory item must belong to `u`.
    pub fn validate(&self, u: &Universe) -> Result<()> {
        for o in &self.observers {
            if let Some(&bad) = o.memory.iter().find(|&&i| !u.contains(i)) {
                return Err(Error::UnknownItem(bad));
            }
        }
        Ok(())
    }

    /// `n` observers, each remembering `memory_size` distinct items drawn
    /// uniformly from `u`.
    pub fn synthetic(u: &Universe, n: usize, memory_size: usize, matcher: Matcher, seed: u64) -> Result<Self> {
        if memory_size > u.len() {
            return Err(Error::domain("memory_size", format!("{memory_size} exceeds universe size {}", u.len())));
        }
        let ids: Vec<ItemId> = u.ids().collect();
        let observers = (0..n)
            .map(|k| {
                let mut rng = NoiseRng::stream(seed, k as u64);
                let mut memory = BTreeSet::new();
                while memory.len() < memory_size {
                    memory.insert(ids[rng.below(ids.len() as u64) as usize]);
                }
                Observer::new(format!("o{k}"), memory, matcher)
            })
            .collect();
        Ok(Self { observers })
    }

    /// Lines `observer_id,memory_item_ids...`; matchers are assigned by the
    /// caller and classifiers left empty.
    pub fn read_text<R: BufRead>(r: R, u: &Universe, matcher: Matcher) -> Result<Self> {
        let mut observers: Vec<Observer> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let id = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| {
                Error::format("observers", format!("line {}: missing observer id", n + 1))
            })?;
            if observers.iter().any(|o| o.id == id) {
                return Err(Error::format("observers", format!("duplicate observer {id}")));
            }
            let memory = fields
                .filter(|f| !f.is_empty())
                .map(|f| {
                    f.parse::<ItemId>()
                        .map_err(|e| Error::format("observers", format!("line {}: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            observers.push(Observer::new(id, memory, matcher));
        }
        let p = Self { observers };
        p.validate(u)?;
        Ok(p)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for o in &self.observers {
            write!(w, "{}", o.id)?;
            for i in &o.memory {
                write!(w, ",{i}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Generated items: the realistic part `Ĩ_M` as a multiset of universe ids,
/// and the number of outputs falling outside the universe (`Î_M`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelOutputSet {
    pub inside: Vec<ItemId>,
    pub outside: usize,
}

impl ModelOutputSet {
    /// Splits ids into known and unknown items.
    pub fn partition(u: &Universe, ids: impl IntoIterator<Item = ItemId>) -> Self {
        let mut out = Self::default();
        for id in ids {
            if u.contains(id) {
                out.inside.push(id);
            } else {
                out.outside += 1;
            }
        }
        out
    }

    pub fn total(&self) -> usize {
        self.inside.len() + self.outside
    }

    /// Distinct realistic items.
    pub fn distinct_inside(&self) -> BTreeSet<ItemId> {
        self.inside.iter().copied().collect()
    }
}

/// `nu_O(x)`, summing over each observer's memory.
pub fn novelty_score(u: &Universe, obs: &Population, x: ItemId) -> Result<f64> {
    let bx = u.bits(x)?;
    let mut nu = 0.0;
    for o in &obs.observers {
        for &i in &o.memory {
            nu += o.matcher.similarity(bx, u.bits(i)?);
        }
    }
    Ok(nu)
}

/// `nu_O(x)` by scanning the whole universe for remembered items.
pub fn novelty_score_exhaustive(u: &Universe, obs: &Population, x: ItemId) -> Result<f64> {
    let bx = u.bits(x)?;
    let mut nu = 0.0;
    for o in &obs.observers {
        for (i, bi) in &u.items {
            if o.memory.contains(i) {
                nu += o.matcher.similarity(bx, bi);
            }
        }
    }
    Ok(nu)
}

/// `J_O`: items no observer matches to anything remembered.
pub fn new_set(u: &Universe, obs: &Population) -> Result<BTreeSet<ItemId>> {
    obs.validate(u)?;
    let ids: Vec<ItemId> = u.ids().collect();
    let scores = ids
        .par_iter()
        .map(|&x| novelty_score(u, obs, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(ids.into_iter().zip(scores).filter(|&(_, nu)| nu == 0.0).map(|(x, _)| x).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyReport {
    /// `|I|`
    pub universe_size: usize,
    /// `|J_O|`
    pub new_items: usize,
    /// `|Ĩ_M|`, distinct
    pub realistic_generated: usize,
    /// `|I_N| = |Ĩ_M ∩ J_O|`
    pub new_generated: usize,
    pub intrinsic_novelty: Rate,
    pub completeness: Rate,
    pub relative_novelty: Rate,
    /// `C_M N_M / N_{I,O}`
    pub absolute_novelty: Rate,
    /// `|I_N| / |J_O|`, computed directly.
    pub absolute_novelty_direct: Rate,
}

impl NoveltyReport {
    /// Both sides of the relation are defined and equal.
    pub fn relation_holds(&self) -> bool {
        self.absolute_novelty.is_some() && self.absolute_novelty == self.absolute_novelty_direct
    }
}

pub fn novelty_rates(u: &Universe, obs: &Population, outputs: &ModelOutputSet) -> Result<NoveltyReport> {
    if let Some(&bad) = outputs.inside.iter().find(|&&i| !u.contains(i)) {
        return Err(Error::UnknownItem(bad));
    }
    let j_o = new_set(u, obs)?;
    let realistic = outputs.distinct_inside();
    let new_generated = realistic.intersection(&j_o).count();
    let n_io = rate(j_o.len(), u.len());
    let c_m = rate(realistic.len(), u.len());
    let n_m = rate(new_generated, realistic.len());
    let absolute = match (c_m, n_m, n_io) {
        (Some(c), Some(n), Some(i)) if *i.numer() != 0 => Some(c * n / i),
        _ => None,
    };
    Ok(NoveltyReport {
        universe_size: u.len(),
        new_items: j_o.len(),
        realistic_generated: realistic.len(),
        new_generated,
        intrinsic_novelty: n_io,
        completeness: c_m,
        relative_novelty: n_m,
        absolute_novelty: absolute,
        absolute_novelty_direct: rate(new_generated, j_o.len()),
    })
}

/// `rho(x)`: share of observers placing `x` in class `class`. Items outside
/// the universe (`None`) score zero.
pub fn realism(u: &Universe, obs: &Population, x: Option<ItemId>, class: usize) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::Empty("observer population"));
    }
    let Some(x) = x else { return Ok(0.0) };
    let bits = u.bits(x)?;
    let votes = obs.observers.iter().filter(|o| o.classifies(class, x, bits)).count();
    Ok(votes as f64 / obs.len() as f64)
}

/// `x ∈ I_c` iff some observer accepts it.
pub fn in_class(u: &Universe, obs: &Population, x: ItemId, class: usize) -> Result<bool> {
    Ok(realism(u, obs, Some(x), class)? > 0.0)
}

/// `R_M`: mean of `rho` over every generated output, outside ones included.
pub fn model_realism(u: &Universe, obs: &Population, outputs: &ModelOutputSet, class: usize) -> Result<f64> {
    if outputs.total() == 0 {
        return Err(Error::Empty("model outputs"));
    }
    let mut sum = 0.0;
    for &x in &outputs.inside {
        sum += realism(u, obs, Some(x), class)?;
    }
    Ok(sum / outputs.total() as f64)
}

/// Unweighted mean of `R_M` over `classes`.
pub fn mean_class_realism(u: &Universe, obs: &Population, outputs: &ModelOutputSet, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    let mut sum = 0.0;
    for &c in classes {
        sum += model_realism(u, obs, outputs, c)?;
    }
    Ok(sum / classes.len() as f64)
}

/// Novelty report per class, each restricted to `I_c` and the outputs that
/// fall in it.
pub fn novelty_rates_by_class(u: &Universe, obs: &Population, outputs: &ModelOutputSet) -> Result<Vec<(usize, NoveltyReport)>> {
    u.class_ids()
        .into_iter()
        .map(|c| {
            let uc = u.restrict_to_class(c)?;
            let restricted = Population::new(
                obs.observers
                    .iter()
                    .map(|o| Observer {
                        memory: o.memory.iter().copied().filter(|&i| uc.contains(i)).collect(),
                        ..o.clone()
                    })
                    .collect(),
            );
            let oc = ModelOutputSet {
                inside: outputs.inside.iter().copied().filter(|&i| uc.contains(i)).collect(),
                outside: 0,
            };
            Ok((c, novelty_rates(&uc, &restricted, &oc)?))
        })
        .collect()
}

/// Unweighted mean over the defined rates; `None` if none is defined.
pub fn mean_defined(rates: impl IntoIterator<Item = Rate>) -> Rate {
    let defined: Vec<Ratio<u64>> = rates.into_iter().flatten().collect();
    if defined.is_empty() {
        return None;
    }
    let n = defined.len() as u64;
    Some(defined.into_iter().fold(Ratio::from_integer(0), |a, b| a + b) / n)
}

/// Maps continuous samples to universe items: each component must lie within
/// `tolerance` of `lo` or `hi`, read as bit 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub lo: f64,
    pub hi: f64,
    pub tolerance: f64,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            tolerance: 0.5,
        }
    }
}

impl Quantizer {
    pub fn bits(&self, x: &Tensor) -> Option<Vec<bool>> {
        x.data()
            .iter()
            .map(|&v| {
                if (v - self.hi).abs() <= self.tolerance {
                    Some(true)
                } else if (v - self.lo).abs() <= self.tolerance {
                    Some(false)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Item of `x`, or `None` when off-grid or not in `u`.
    pub fn item(&self, x: &Tensor, u: &Universe) -> Option<ItemId> {
        if x.len() != u.width() {
            return None;
        }
        self.bits(x).and_then(|b| u.id_of(&b))
    }

    pub fn encode(&self, bits: &[bool]) -> Tensor {
        Tensor::vector(bits.iter().map(|&b| if b { self.hi } else { self.lo }).collect())
    }
}

pub fn bridge_from_sampler(generated: &[Tensor], u: &Universe, q: &Quantizer) -> ModelOutputSet {
    let mut out = ModelOutputSet::default();
    for x in generated {
        match q.item(x, u) {
            Some(id) => out.inside.push(id),
            None => out.outside += 1,
        }
    }
    out
}

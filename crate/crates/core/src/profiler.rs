//! Neuron importance: exact ablation, its one-backward-pass first-order
//! estimate, and set aggregation.
//!
//! A "neuron" is one output channel of one tracked component. Exact
//! importance zeroes the channel at every position and measures the absolute
//! loss change. The first-order estimate takes the Taylor expansion of the
//! same intervention and keeps only the linear term, |sum over positions of
//! (dL/dh) * h|, so every channel's estimate falls out of a single backward
//! pass. Set importance is the sum of member importances, computed with
//! exact float summation so that any partition of a set totals to exactly
//! the same value as the set itself.
//!
//! The machinery is generic over an [`ImportanceTarget`] so that the two
//! definitions can be pinned against each other on a synthetic target whose
//! loss is exactly linear in the activations ([`LinearSurface`]), where the
//! Taylor estimate has zero remainder.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{
    loss_and_backward, loss_opts, Component, ForwardHook, ForwardOpts, HookPoint, ModelConfig,
    NeuronRef, Parameters, ScaleChannel, ZeroChannels,
};
use crate::tokenizer::Tokenizer;

/// Exact floating-point accumulator: the running sum is tracked as a list of
/// non-overlapping partials whose mathematical sum is exact, and [`value`]
/// rounds it once. Totals are therefore independent of the order and
/// grouping in which values arrive.
///
/// [`value`]: ExactSum::value
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    parts: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> ExactSum {
        ExactSum::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.parts.len() {
            let mut y = self.parts[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.parts[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.parts.truncate(i);
        self.parts.push(x);
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.add(v);
        }
    }

    /// Fold another accumulator in; exact, like `add`.
    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.parts {
            self.add(p);
        }
    }

    /// The exact sum rounded to the nearest f64 (ties to even).
    pub fn value(&self) -> f64 {
        let p = &self.parts;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Halfway cases: nudge toward the remaining partials' sign.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Exact sum of an iterator, rounded once.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    acc.extend(values);
    acc.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    Exact,
    FirstOrder,
}

/// Where the absolute value lands in the first-order estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsConvention {
    /// |sum over positions|: the Taylor estimate of the whole-sequence loss
    /// change. Default.
    SumThenAbs,
    /// sum over positions of |per-position product|.
    PerPosition,
}

/// One tracked component's activation and loss gradient, both [T x width].
#[derive(Debug, Clone)]
pub struct ComponentTrace {
    pub activation: Array,
    pub gradient: Array,
}

/// Anything whose loss can be probed through forward hooks and whose tracked
/// activations come with gradients. The model is the real implementation;
/// [`LinearSurface`] is the analytic oracle.
pub trait ImportanceTarget: Sync {
    fn n_layers(&self) -> usize;
    fn width(&self, comp: Component) -> usize;
    /// Loss, with an optional intervention applied at its hook points.
    fn loss_with(&self, hook: Option<&dyn ForwardHook>) -> Result<f64>;
    /// Loss plus (activation, gradient) per (layer, component); inner Vec is
    /// ordered like [`Component::ALL`].
    fn traces(&self) -> Result<(f64, Vec<Vec<ComponentTrace>>)>;
}

/// A real model evaluated on one token sequence.
pub struct ModelTarget<'a> {
    pub params: &'a Parameters,
    pub cfg: &'a ModelConfig,
    pub tokens: Vec<u32>,
}

impl ImportanceTarget for ModelTarget<'_> {
    fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    fn width(&self, comp: Component) -> usize {
        comp.width(self.cfg)
    }

    fn loss_with(&self, hook: Option<&dyn ForwardHook>) -> Result<f64> {
        loss_opts(
            self.params,
            self.cfg,
            &self.tokens,
            &ForwardOpts {
                pos_offset: 0,
                hook,
            },
        )
    }

    fn traces(&self) -> Result<(f64, Vec<Vec<ComponentTrace>>)> {
        let out = loss_and_backward(self.params, self.cfg, &self.tokens)?;
        let layers = (0..self.cfg.n_layers)
            .map(|l| {
                Component::ALL
                    .iter()
                    .map(|&c| ComponentTrace {
                        activation: out.cache.component(l, c).clone(),
                        gradient: out.act_grads.component(l, c).clone(),
                    })
                    .collect()
            })
            .collect();
        Ok((out.loss, layers))
    }
}

/// Synthetic target whose loss is exactly linear in every tracked
/// activation: L = sum over (layer, comp, channel, position) of w * h.
/// The first-order remainder is identically zero here, so exact ablation
/// and the Taylor estimate must agree channel for channel.
pub struct LinearSurface {
    /// `weights[layer][comp][channel]`, comp ordered like [`Component::ALL`].
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `activations[layer][comp]`: [T x width].
    pub activations: Vec<Vec<Array>>,
}

impl LinearSurface {
    fn loss_of(&self, acts: &[Vec<Array>]) -> f64 {
        let mut loss = 0.0;
        for (lw, la) in self.weights.iter().zip(acts) {
            for (cw, ca) in lw.iter().zip(la) {
                for t in 0..ca.rows() {
                    for (ch, w) in cw.iter().enumerate() {
                        loss += w * ca.get2(t, ch);
                    }
                }
            }
        }
        loss
    }
}

impl ImportanceTarget for LinearSurface {
    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    fn width(&self, comp: Component) -> usize {
        self.weights
            .first()
            .map(|l| l[comp.index()].len())
            .unwrap_or(0)
    }

    fn loss_with(&self, hook: Option<&dyn ForwardHook>) -> Result<f64> {
        match hook {
            None => Ok(self.loss_of(&self.activations)),
            Some(h) => {
                let mut acts = self.activations.clone();
                for (l, layer) in acts.iter_mut().enumerate() {
                    for (ci, a) in layer.iter_mut().enumerate() {
                        h.apply(
                            HookPoint::Comp {
                                layer: l,
                                comp: Component::ALL[ci],
                            },
                            a,
                        );
                    }
                }
                Ok(self.loss_of(&acts))
            }
        }
    }

    fn traces(&self) -> Result<(f64, Vec<Vec<ComponentTrace>>)> {
        let layers = self
            .weights
            .iter()
            .zip(&self.activations)
            .map(|(lw, la)| {
                lw.iter()
                    .zip(la)
                    .map(|(cw, ca)| {
                        let mut gradient = Array::zeros(ca.shape());
                        for t in 0..ca.rows() {
                            gradient.row_mut(t).copy_from_slice(cw);
                        }
                        ComponentTrace {
                            activation: ca.clone(),
                            gradient,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok((self.loss_of(&self.activations), layers))
    }
}

fn check_neuron(target: &dyn ImportanceTarget, neuron: NeuronRef) -> Result<()> {
    if neuron.layer >= target.n_layers() {
        return Err(Error::IndexOutOfRange {
            what: "neuron layer",
            index: neuron.layer,
            size: target.n_layers(),
        });
    }
    let width = target.width(neuron.comp);
    if neuron.channel >= width {
        return Err(Error::IndexOutOfRange {
            what: "neuron channel",
            index: neuron.channel,
            size: width,
        });
    }
    Ok(())
}

/// Exact importance of one channel: |loss with the channel zeroed at every
/// position - baseline loss|.
pub fn importance_exact(target: &dyn ImportanceTarget, neuron: NeuronRef) -> Result<f64> {
    check_neuron(target, neuron)?;
    let base = target.loss_with(None)?;
    let targets = [neuron];
    let hook = ZeroChannels { targets: &targets };
    let ablated = target.loss_with(Some(&hook))?;
    Ok((ablated - base).abs())
}

/// Per-neuron importance for every tracked channel. Method and convention
/// are recorded so downstream reports can say what they aggregated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceMap {
    pub method: ImportanceMethod,
    pub convention: AbsConvention,
    /// How many sentences were averaged into the values.
    pub sentences: usize,
    /// `values[layer][comp][channel]`, comp ordered like [`Component::ALL`];
    /// every entry is >= 0.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ImportanceMap {
    pub fn get(&self, neuron: NeuronRef) -> f64 {
        self.values[neuron.layer][neuron.comp.index()][neuron.channel]
    }

    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    /// Set importance per (layer, component): exact sums of the channels.
    pub fn layer_component_totals(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|layer| layer.iter().map(|ch| exact_sum(ch.iter().copied())).collect())
            .collect()
    }

    /// Set importance per layer: exact sum over all 8 components.
    pub fn layer_totals(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|layer| exact_sum(layer.iter().flatten().copied()))
            .collect()
    }

    pub fn total(&self) -> f64 {
        exact_sum(self.values.iter().flatten().flatten().copied())
    }
}

const EXACT_MAP_NEURON_LIMIT: usize = 100_000;

fn neuron_count(target: &dyn ImportanceTarget) -> usize {
    target.n_layers()
        * Component::ALL
            .iter()
            .map(|&c| target.width(c))
            .sum::<usize>()
}

/// Exact importance of every channel: one ablated forward per neuron, so
/// only permitted on small scopes.
pub fn importance_exact_map(target: &dyn ImportanceTarget) -> Result<ImportanceMap> {
    let n = neuron_count(target);
    if n > EXACT_MAP_NEURON_LIMIT {
        return Err(Error::InvalidInput(format!(
            "exact map over {n} neurons exceeds the {EXACT_MAP_NEURON_LIMIT} limit; \
             use the first-order method"
        )));
    }
    let base = target.loss_with(None)?;
    let mut values = Vec::with_capacity(target.n_layers());
    for layer in 0..target.n_layers() {
        let mut comps = Vec::with_capacity(8);
        for comp in Component::ALL {
            let width = target.width(comp);
            let mut chans = Vec::with_capacity(width);
            for channel in 0..width {
                let targets = [NeuronRef {
                    layer,
                    comp,
                    channel,
                }];
                let hook = ZeroChannels { targets: &targets };
                chans.push((target.loss_with(Some(&hook))? - base).abs());
            }
            comps.push(chans);
        }
        values.push(comps);
    }
    Ok(ImportanceMap {
        method: ImportanceMethod::Exact,
        convention: AbsConvention::SumThenAbs,
        sentences: 1,
        values,
    })
}

/// First-order importance of every channel from one backward pass.
pub fn importance_first_order(
    target: &dyn ImportanceTarget,
    convention: AbsConvention,
) -> Result<ImportanceMap> {
    let (_, layers) = target.traces()?;
    let values = layers
        .iter()
        .map(|comps| {
            comps
                .iter()
                .map(|trace| {
                    let width = trace.activation.cols();
                    (0..width)
                        .map(|ch| match convention {
                            AbsConvention::SumThenAbs => {
                                let mut s = 0.0;
                                for t in 0..trace.activation.rows() {
                                    s += trace.gradient.get2(t, ch) * trace.activation.get2(t, ch);
                                }
                                s.abs()
                            }
                            AbsConvention::PerPosition => {
                                let mut s = 0.0;
                                for t in 0..trace.activation.rows() {
                                    s += (trace.gradient.get2(t, ch)
                                        * trace.activation.get2(t, ch))
                                    .abs();
                                }
                                s
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ImportanceMap {
        method: ImportanceMethod::FirstOrder,
        convention,
        sentences: 1,
        values,
    })
}

/// Central-difference check of the identity behind the first-order estimate:
/// scaling one channel by (1 - t) changes the loss at rate
/// -sum over positions of (dL/dh) * h at t = 0.
#[derive(Debug, Clone)]
pub struct TaylorCheck {
    pub analytic: f64,
    pub numeric: f64,
    /// |analytic - numeric| / max(1, |analytic|, |numeric|).
    pub rel_err: f64,
}

pub fn taylor_consistency(
    target: &dyn ImportanceTarget,
    neuron: NeuronRef,
    t_step: f64,
) -> Result<TaylorCheck> {
    check_neuron(target, neuron)?;
    if !(t_step > 0.0 && t_step <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "taylor step {t_step} outside (0, 1]"
        )));
    }
    let (_, layers) = target.traces()?;
    let trace = &layers[neuron.layer][neuron.comp.index()];
    let mut analytic = 0.0;
    for t in 0..trace.activation.rows() {
        analytic -= trace.gradient.get2(t, neuron.channel) * trace.activation.get2(t, neuron.channel);
    }

    let probe = |t: f64| {
        let hook = ScaleChannel {
            target: neuron,
            factor: 1.0 - t,
        };
        target.loss_with(Some(&hook))
    };
    let numeric = (probe(t_step)? - probe(-t_step)?) / (2.0 * t_step);
    let rel_err = (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs());
    Ok(TaylorCheck {
        analytic,
        numeric,
        rel_err,
    })
}

/// Named, disjoint sets of neurons to aggregate over.
#[derive(Debug, Clone)]
pub struct ComponentPartition {
    pub sets: Vec<(String, Vec<NeuronRef>)>,
}

impl ComponentPartition {
    /// One set per (layer, component): the default reporting granularity.
    pub fn per_layer_component(target: &dyn ImportanceTarget) -> ComponentPartition {
        let mut sets = Vec::new();
        for layer in 0..target.n_layers() {
            for comp in Component::ALL {
                let members = (0..target.width(comp))
                    .map(|channel| NeuronRef {
                        layer,
                        comp,
                        channel,
                    })
                    .collect();
                sets.push((format!("layer{layer}.{}", comp.name()), members));
            }
        }
        ComponentPartition { sets }
    }

    /// One set per layer.
    pub fn per_layer(target: &dyn ImportanceTarget) -> ComponentPartition {
        let mut sets = Vec::new();
        for layer in 0..target.n_layers() {
            let mut members = Vec::new();
            for comp in Component::ALL {
                for channel in 0..target.width(comp) {
                    members.push(NeuronRef {
                        layer,
                        comp,
                        channel,
                    });
                }
            }
            sets.push((format!("layer{layer}"), members));
        }
        ComponentPartition { sets }
    }
}

/// Set importance: exact sum of the members' values.
pub fn aggregate_set(map: &ImportanceMap, set: &[NeuronRef]) -> Result<f64> {
    let mut acc = ExactSum::new();
    for &n in set {
        if n.layer >= map.values.len()
            || n.channel >= map.values[n.layer][n.comp.index()].len()
        {
            return Err(Error::IndexOutOfRange {
                what: "partition member",
                index: n.channel,
                size: map
                    .values
                    .get(n.layer)
                    .map(|l| l[n.comp.index()].len())
                    .unwrap_or(0),
            });
        }
        acc.add(map.get(n));
    }
    Ok(acc.value())
}

/// Importance of every named set in a partition.
pub fn aggregate(map: &ImportanceMap, partition: &ComponentPartition) -> Result<Vec<(String, f64)>> {
    partition
        .sets
        .iter()
        .map(|(name, set)| Ok((name.clone(), aggregate_set(map, set)?)))
        .collect()
}

/// Importance of the union of several sets. The parts are accumulated
/// exactly and merged before the single rounding, so any partition of a
/// set totals bit-identically to [`aggregate_set`] over the whole set.
pub fn aggregate_union(map: &ImportanceMap, sets: &[&[NeuronRef]]) -> Result<f64> {
    let mut whole = ExactSum::new();
    for set in sets {
        let mut part = ExactSum::new();
        for &n in *set {
            if n.layer >= map.values.len()
                || n.channel >= map.values[n.layer][n.comp.index()].len()
            {
                return Err(Error::IndexOutOfRange {
                    what: "partition member",
                    index: n.channel,
                    size: map
                        .values
                        .get(n.layer)
                        .map(|l| l[n.comp.index()].len())
                        .unwrap_or(0),
                });
            }
            part.add(map.get(n));
        }
        whole.merge(&part);
    }
    Ok(whole.value())
}

fn mean_of_maps(maps: Vec<ImportanceMap>) -> Result<ImportanceMap> {
    let n = maps.len();
    if n == 0 {
        return Err(Error::InvalidInput("no sentences to average".into()));
    }
    let mut mean = maps[0].clone();
    for map in &maps[1..] {
        if map.values.len() != mean.values.len() {
            return Err(Error::InvalidInput("importance maps differ in shape".into()));
        }
        for (ml, ol) in mean.values.iter_mut().zip(&map.values) {
            for (mc, oc) in ml.iter_mut().zip(ol) {
                for (mv, ov) in mc.iter_mut().zip(oc) {
                    *mv += ov;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    for l in &mut mean.values {
        for c in l {
            for v in c {
                *v *= inv;
            }
        }
    }
    mean.sentences = n;
    Ok(mean)
}

/// Mean first-order map over several targets (typically sentences). Targets
/// are evaluated possibly in parallel; the average is taken in target order,
/// so results do not depend on the worker count.
pub fn mean_first_order(
    targets: &[&dyn ImportanceTarget],
    convention: AbsConvention,
) -> Result<ImportanceMap> {
    let maps = targets
        .par_iter()
        .map(|t| importance_first_order(*t, convention))
        .collect::<Result<Vec<_>>>()?;
    mean_of_maps(maps)
}

/// Mean exact map over several targets; same size limits as
/// [`importance_exact_map`].
pub fn mean_exact_map(targets: &[&dyn ImportanceTarget]) -> Result<ImportanceMap> {
    let maps = targets
        .par_iter()
        .map(|t| importance_exact_map(*t))
        .collect::<Result<Vec<_>>>()?;
    mean_of_maps(maps)
}

/// Per-language importance over a parallel corpus: each language's sentences
/// are encoded, profiled sentence by sentence, and averaged. Returns maps in
/// the corpus's language order.
pub fn profile_languages(
    params: &Parameters,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    parallel: &ParallelCorpus,
    method: ImportanceMethod,
    convention: AbsConvention,
) -> Result<Vec<(String, ImportanceMap)>> {
    if parallel.n_rows() == 0 {
        return Err(Error::InvalidInput("parallel corpus has no rows".into()));
    }
    if tok.vocab_size() > cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} exceeds model vocab {}",
            tok.vocab_size(),
            cfg.vocab_size
        )));
    }
    let mut out = Vec::with_capacity(parallel.languages().len());
    for lang in parallel.languages() {
        let sentences = encode_column(tok, cfg, parallel.column(lang)?)?;
        if sentences.is_empty() {
            return Err(Error::InvalidInput(format!(
                "language {lang} has no sentence of at least 2 tokens"
            )));
        }
        let targets: Vec<ModelTarget> = sentences
            .into_iter()
            .map(|tokens| ModelTarget {
                params,
                cfg,
                tokens,
            })
            .collect();
        let refs: Vec<&dyn ImportanceTarget> =
            targets.iter().map(|t| t as &dyn ImportanceTarget).collect();
        let map = match method {
            ImportanceMethod::FirstOrder => mean_first_order(&refs, convention)?,
            ImportanceMethod::Exact => mean_exact_map(&refs)?,
        };
        out.push((lang.clone(), map));
    }
    Ok(out)
}

/// Model targets over the first `rows` rows of every language column, for
/// validation runs that compare the two importance definitions.
pub fn corpus_targets<'a>(
    params: &'a Parameters,
    cfg: &'a ModelConfig,
    tok: &Tokenizer,
    parallel: &ParallelCorpus,
    rows: usize,
) -> Result<Vec<ModelTarget<'a>>> {
    if tok.vocab_size() > cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} exceeds model vocab {}",
            tok.vocab_size(),
            cfg.vocab_size
        )));
    }
    let sub = parallel.take_rows(rows);
    let mut targets = Vec::new();
    for lang in sub.languages() {
        for tokens in encode_column(tok, cfg, sub.column(lang)?)? {
            targets.push(ModelTarget {
                params,
                cfg,
                tokens,
            });
        }
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput(
            "no sentence of at least 2 tokens to validate on".into(),
        ));
    }
    Ok(targets)
}

/// Sentences longer than the context window are truncated; sentences that
/// encode to fewer than 2 tokens are skipped (no next-token loss exists).
fn encode_column(tok: &Tokenizer, cfg: &ModelConfig, column: Vec<&str>) -> Result<Vec<Vec<u32>>> {
    Ok(column
        .into_iter()
        .map(|text| {
            let mut ids = tok.encode(text.as_bytes());
            ids.truncate(cfg.context_len);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect())
}

/// Spearman rank correlation with averaged tied ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman needs at least two observations".into(),
        ));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::InvalidInput(
            "spearman undefined: one side has constant ranks".into(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // 1-based ranks, ties share the average of their span.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Exact-vs-first-order agreement on a random neuron sample.
#[derive(Debug, Clone, Serialize)]
pub struct RankAgreement {
    pub spearman: f64,
    pub sampled: usize,
}

/// Sample `sample` distinct neurons (seeded), compute both importance
/// definitions averaged over the targets, and report their Spearman rank
/// correlation. Neuron evaluations fan out in parallel; ordering is fixed.
pub fn rank_agreement(
    targets: &[&dyn ImportanceTarget],
    convention: AbsConvention,
    sample: usize,
    seed: u64,
) -> Result<RankAgreement> {
    use rand::SeedableRng;
    if targets.is_empty() {
        return Err(Error::InvalidInput("no targets to validate on".into()));
    }
    let shape = targets[0];
    let mut all = Vec::new();
    for layer in 0..shape.n_layers() {
        for comp in Component::ALL {
            for channel in 0..shape.width(comp) {
                all.push(NeuronRef {
                    layer,
                    comp,
                    channel,
                });
            }
        }
    }
    let k = sample.min(all.len());
    if k < 2 {
        return Err(Error::InvalidInput("need at least 2 sampled neurons".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<NeuronRef> = rand::seq::index::sample(&mut rng, all.len(), k)
        .into_iter()
        .map(|i| all[i])
        .collect();

    let first_order = mean_first_order(targets, convention)?;
    let bases = targets
        .iter()
        .map(|t| t.loss_with(None))
        .collect::<Result<Vec<_>>>()?;
    let exact: Vec<f64> = chosen
        .par_iter()
        .map(|&neuron| {
            let mut acc = 0.0;
            for (t, base) in targets.iter().zip(&bases) {
                let hooked = [neuron];
                let hook = ZeroChannels { targets: &hooked };
                acc += (t.loss_with(Some(&hook))? - base).abs();
            }
            Ok(acc / targets.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let estimated: Vec<f64> = chosen.iter().map(|&n| first_order.get(n)).collect();

    Ok(RankAgreement {
        spearman: spearman(&exact, &estimated)?,
        sampled: k,
    })
}

/// CSV of (layer, component) aggregates: one row per layer, one column
/// per component in [`Component::ALL`] order.
pub fn write_importance_csv(map: &ImportanceMap, w: &mut dyn Write) -> std::io::Result<()> {
    write!(w, "layer")?;
    for comp in Component::ALL {
        write!(w, ",{}", comp.name())?;
    }
    writeln!(w)?;
    for (layer, totals) in map.layer_component_totals().iter().enumerate() {
        write!(w, "{layer}")?;
        for v in totals {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 40,
            context_len: 10,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// One layer, one channel per component, T=1: small enough to check by hand.
    fn pocket_surface() -> LinearSurface {
        // Channels of the up-projection component carry w=(1,-2), h=(3,1);
        // everything else is zero-weighted.
        let mut weights = vec![vec![vec![0.0]; 8]];
        let mut activations = vec![Component::ALL
            .iter()
            .map(|_| Array::zeros(&[1, 1]))
            .collect::<Vec<_>>()];
        weights[0][Component::UpProj.index()] = vec![1.0, -2.0];
        activations[0][Component::UpProj.index()] =
            Array::from_vec(vec![3.0, 1.0], &[1, 2]).unwrap();
        LinearSurface {
            weights,
            activations,
        }
    }

    #[test]
    fn linear_oracle_pocket_values() {
        let surface = pocket_surface();
        let n0 = NeuronRef {
            layer: 0,
            comp: Component::UpProj,
            channel: 0,
        };
        let n1 = NeuronRef {
            layer: 0,
            comp: Component::UpProj,
            channel: 1,
        };
        assert_eq!(importance_exact(&surface, n0).unwrap(), 3.0);
        assert_eq!(importance_exact(&surface, n1).unwrap(), 2.0);
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        assert_eq!(map.get(n0), 3.0);
        assert_eq!(map.get(n1), 2.0);
    }

    #[test]
    fn linear_oracle_agrees_on_every_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 5;
        let widths = [4usize, 4, 4, 4, 4, 4, 9, 4];
        let weights: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                widths
                    .iter()
                    .map(|&w| (0..w).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let activations: Vec<Vec<Array>> = (0..3)
            .map(|_| {
                widths
                    .iter()
                    .map(|&w| {
                        let data = (0..t_len * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                        Array::from_vec(data, &[t_len, w]).unwrap()
                    })
                    .collect()
            })
            .collect();
        let surface = LinearSurface {
            weights,
            activations,
        };
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        for layer in 0..3 {
            for comp in Component::ALL {
                for channel in 0..surface.width(comp) {
                    let n = NeuronRef {
                        layer,
                        comp,
                        channel,
                    };
                    let exact = importance_exact(&surface, n).unwrap();
                    let est = map.get(n);
                    let rel = (exact - est).abs() / 1.0_f64.max(exact.abs());
                    assert!(rel < 1e-10, "{n:?}: exact {exact}, first-order {est}");
                }
            }
        }
    }

    #[test]
    fn zero_activation_channel_scores_zero() {
        let mut surface = pocket_surface();
        surface.activations[0][Component::UpProj.index()].data_mut()[1] = 0.0;
        let n1 = NeuronRef {
            layer: 0,
            comp: Component::UpProj,
            channel: 1,
        };
        assert_eq!(importance_exact(&surface, n1).unwrap(), 0.0);
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        assert_eq!(map.get(n1), 0.0);
    }

    #[test]
    fn conventions_differ_on_sign_flips() {
        // One channel, two positions with cancelling contributions.
        let mut weights = vec![vec![vec![0.0]; 8]];
        weights[0][Component::DownProj.index()] = vec![1.0];
        let mut activations = vec![Component::ALL
            .iter()
            .map(|_| Array::zeros(&[2, 1]))
            .collect::<Vec<_>>()];
        activations[0][Component::DownProj.index()] =
            Array::from_vec(vec![1.0, -1.0], &[2, 1]).unwrap();
        let surface = LinearSurface {
            weights,
            activations,
        };
        let n = NeuronRef {
            layer: 0,
            comp: Component::DownProj,
            channel: 0,
        };
        let summed = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        let per_pos = importance_first_order(&surface, AbsConvention::PerPosition).unwrap();
        assert_eq!(summed.get(n), 0.0);
        assert_eq!(per_pos.get(n), 2.0);
    }

    #[test]
    fn exact_sum_classic_cases() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(std::iter::repeat(0.1).take(10)), 1.0);
        assert_eq!(exact_sum([]), 0.0);
        // Order independence on a hard case (magnitudes kept below the
        // overflow threshold: partials must stay finite).
        let forward = exact_sum([1e300, -1e300, 1e-8, 1e300, -1e300]);
        let shuffled = exact_sum([1e-8, 1e300, 1e300, -1e300, -1e300]);
        assert_eq!(forward.to_bits(), shuffled.to_bits());
        assert_eq!(forward, 1e-8);
    }

    #[test]
    fn exact_sum_is_grouping_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..200)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-20..20)))
            .collect();
        let whole = exact_sum(values.iter().copied());
        for trial in 0..50 {
            let mut order: Vec<usize> = (0..values.len()).collect();
            use rand::seq::SliceRandom;
            let mut trial_rng = ChaCha8Rng::seed_from_u64(trial);
            order.shuffle(&mut trial_rng);
            // Random grouping: accumulate each group exactly, then merge.
            let cut = trial_rng.random_range(1..values.len());
            let mut left = ExactSum::new();
            let mut right = ExactSum::new();
            for (i, &idx) in order.iter().enumerate() {
                if i < cut {
                    left.add(values[idx]);
                } else {
                    right.add(values[idx]);
                }
            }
            left.merge(&right);
            assert_eq!(left.value().to_bits(), whole.to_bits(), "trial {trial}");
        }
    }

    #[test]
    fn aggregation_pocket_cases() {
        let surface = pocket_surface();
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        let set = vec![
            NeuronRef {
                layer: 0,
                comp: Component::UpProj,
                channel: 0,
            },
            NeuronRef {
                layer: 0,
                comp: Component::UpProj,
                channel: 1,
            },
        ];
        assert_eq!(aggregate_set(&map, &set).unwrap(), 5.0);
        assert_eq!(aggregate_set(&map, &[]).unwrap(), 0.0);

        let partition = ComponentPartition::per_layer_component(&surface);
        let per_set = aggregate(&map, &partition).unwrap();
        let total: f64 = exact_sum(per_set.iter().map(|(_, v)| *v));
        assert_eq!(total, map.total());
        let by_layer = aggregate(&map, &ComponentPartition::per_layer(&surface)).unwrap();
        assert_eq!(by_layer[0].1, map.layer_totals()[0]);
    }

    #[test]
    fn aggregate_rejects_out_of_range() {
        let surface = pocket_surface();
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        let bad = NeuronRef {
            layer: 0,
            comp: Component::UpProj,
            channel: 99,
        };
        assert!(aggregate_set(&map, &[bad]).is_err());
    }

    #[test]
    fn model_target_maps_are_deterministic_and_nonnegative() {
        let cfg = micro_cfg();
        let params = Parameters::init(&cfg, 31);
        let target = ModelTarget {
            params: &params,
            cfg: &cfg,
            tokens: vec![1, 5, 9, 2, 7, 3],
        };
        let a = importance_first_order(&target, AbsConvention::SumThenAbs).unwrap();
        let b = importance_first_order(&target, AbsConvention::SumThenAbs).unwrap();
        assert_eq!(a, b);
        assert!(a
            .values
            .iter()
            .flatten()
            .flatten()
            .all(|&v| v >= 0.0 && v.is_finite()));

        let n = NeuronRef {
            layer: 1,
            comp: Component::OProj,
            channel: 3,
        };
        let e1 = importance_exact(&target, n).unwrap();
        let e2 = importance_exact(&target, n).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
    }

    #[test]
    fn taylor_identity_on_the_model() {
        let cfg = micro_cfg();
        let params = Parameters::init(&cfg, 32);
        let target = ModelTarget {
            params: &params,
            cfg: &cfg,
            tokens: vec![4, 11, 30, 8, 2, 19, 6],
        };
        for (layer, comp, channel) in [
            (0, Component::UpProj, 7),
            (1, Component::OProj, 2),
            (0, Component::PreAttnNorm, 5),
            (1, Component::DownProj, 0),
            (1, Component::KProj, 1),
        ] {
            let neuron = NeuronRef {
                layer,
                comp,
                channel,
            };
            let check = taylor_consistency(&target, neuron, 1e-5).unwrap();
            assert!(
                check.rel_err < 1e-6,
                "{neuron:?}: analytic {}, numeric {}, rel {}",
                check.analytic,
                check.numeric,
                check.rel_err
            );
        }
    }

    #[test]
    fn taylor_error_shrinks_quadratically() {
        // On a curved loss the central-difference error is O(t^2).
        let cfg = micro_cfg();
        let params = Parameters::init(&cfg, 33);
        let target = ModelTarget {
            params: &params,
            cfg: &cfg,
            tokens: vec![3, 9, 27, 14, 1],
        };
        let neuron = NeuronRef {
            layer: 0,
            comp: Component::DownProj,
            channel: 4,
        };
        let coarse = taylor_consistency(&target, neuron, 1e-2).unwrap();
        let fine = taylor_consistency(&target, neuron, 5e-3).unwrap();
        let err_c = (coarse.numeric - coarse.analytic).abs();
        let err_f = (fine.numeric - fine.analytic).abs();
        // Halving the step should cut the error by about 4; allow slack.
        assert!(
            err_f < err_c / 2.5,
            "step halved: error {err_c} -> {err_f} (expected about /4)"
        );
    }

    #[test]
    fn exact_map_guard_rejects_large_scopes() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 99_968,
            vocab_size: 40,
            context_len: 10,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        };
        let params = Parameters::zeros(&cfg);
        let target = ModelTarget {
            params: &params,
            cfg: &cfg,
            tokens: vec![1, 2],
        };
        assert!(matches!(
            importance_exact_map(&target),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn profile_languages_over_synth_parallel() {
        let cfg = ModelConfig {
            vocab_size: 300,
            ..micro_cfg()
        };
        let params = Parameters::init(&cfg, 40);
        let tok = Tokenizer::byte_level();
        let parallel = crate::corpus::synth::parallel(&["en", "de", "ru"], 4, 77).unwrap();
        let maps = profile_languages(
            &params,
            &cfg,
            &tok,
            &parallel,
            ImportanceMethod::FirstOrder,
            AbsConvention::SumThenAbs,
        )
        .unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].0, "en");
        for (_, map) in &maps {
            assert_eq!(map.sentences, 4);
            assert_eq!(map.n_layers(), cfg.n_layers);
            assert!(map.values.iter().flatten().flatten().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_columns_give_identical_maps() {
        let cfg = ModelConfig {
            vocab_size: 300,
            ..micro_cfg()
        };
        let params = Parameters::init(&cfg, 41);
        let tok = Tokenizer::byte_level();
        let rows: Vec<Vec<String>> = (0..3)
            .map(|i| {
                let s = format!("same text {i}");
                vec![s.clone(), s]
            })
            .collect();
        let parallel =
            ParallelCorpus::new(vec!["en".into(), "de".into()], rows).unwrap();
        let maps = profile_languages(
            &params,
            &cfg,
            &tok,
            &parallel,
            ImportanceMethod::FirstOrder,
            AbsConvention::SumThenAbs,
        )
        .unwrap();
        assert_eq!(maps[0].1, maps[1].1);
    }

    #[test]
    fn profile_is_worker_invariant() {
        let cfg = ModelConfig {
            vocab_size: 300,
            ..micro_cfg()
        };
        let params = Parameters::init(&cfg, 42);
        let tok = Tokenizer::byte_level();
        let parallel = crate::corpus::synth::parallel(&["en", "vi"], 6, 5).unwrap();
        let run = || {
            profile_languages(
                &params,
                &cfg,
                &tok,
                &parallel,
                ImportanceMethod::FirstOrder,
                AbsConvention::SumThenAbs,
            )
            .unwrap()
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(run);
        let b = pool4.install(run);
        assert_eq!(a, b);
    }

    #[test]
    fn exact_and_first_order_profiles_share_shape() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 300,
            context_len: 8,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        };
        let params = Parameters::init(&cfg, 43);
        let tok = Tokenizer::byte_level();
        let parallel = crate::corpus::synth::parallel(&["en"], 2, 3).unwrap();
        for method in [ImportanceMethod::Exact, ImportanceMethod::FirstOrder] {
            let maps = profile_languages(
                &params,
                &cfg,
                &tok,
                &parallel,
                method,
                AbsConvention::SumThenAbs,
            )
            .unwrap();
            assert_eq!(maps[0].1.method, method);
            for (ci, comp) in Component::ALL.iter().enumerate() {
                assert_eq!(maps[0].1.values[0][ci].len(), comp.width(&cfg));
            }
        }
    }

    #[test]
    fn spearman_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [9.0, 7.0, 5.0, 3.0];
        assert!((spearman(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down).unwrap() + 1.0).abs() < 1e-12);
        // Ties: (1, 1, 2) vs monotone partner.
        let tied = [1.0, 1.0, 2.0];
        let other = [5.0, 6.0, 7.0];
        let rho = spearman(&tied, &other).unwrap();
        assert!(rho > 0.5 && rho < 1.0, "{rho}");
        assert!(spearman(&[1.0, 1.0], &[2.0, 3.0]).is_err(), "constant side");
    }

    #[test]
    fn rank_agreement_reports_in_range() {
        let cfg = micro_cfg();
        let params = Parameters::init(&cfg, 50);
        let targets = [
            ModelTarget {
                params: &params,
                cfg: &cfg,
                tokens: vec![1, 8, 3, 22, 7],
            },
            ModelTarget {
                params: &params,
                cfg: &cfg,
                tokens: vec![5, 5, 30, 2],
            },
        ];
        let refs: Vec<&dyn ImportanceTarget> =
            targets.iter().map(|t| t as &dyn ImportanceTarget).collect();
        let report = rank_agreement(&refs, AbsConvention::SumThenAbs, 40, 7).unwrap();
        assert_eq!(report.sampled, 40);
        assert!((-1.0..=1.0).contains(&report.spearman));
        let again = rank_agreement(&refs, AbsConvention::SumThenAbs, 40, 7).unwrap();
        assert_eq!(report.spearman.to_bits(), again.spearman.to_bits());
    }

    #[test]
    fn csv_layout_matches_component_order() {
        let surface = pocket_surface();
        let map = importance_first_order(&surface, AbsConvention::SumThenAbs).unwrap();
        let mut buf = Vec::new();
        write_importance_csv(&map, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,pre_attn_norm,q_proj,k_proj,v_proj,o_proj,pre_mlp_norm,up_proj,down_proj"
        );
        // up_proj total is 3 + 2 = 5, everything else 0.
        assert_eq!(lines.next().unwrap(), "0,0,0,0,0,0,0,5,0");
    }
}

//! Conditional oracles and the tabular model families every diagnostic
//! consumes.
//!
//! A [`ConditionalOracle`] answers one kind of query: the log-probability of
//! each token at an unresolved position given the currently visible tokens.
//! Everything else in the crate is built from that query alone.
//!
//! Three tabular families implement it:
//!
//! * [`TabularJointModel`] — an explicit strictly positive joint whose
//!   conditionals are obtained by exact marginalization (Bayes-compatible).
//! * [`PerturbedConditionalModel`] — the Bayes conditionals of a joint with
//!   seeded Gaussian logit offsets per (position, visible context).
//! * [`LogitTable`] — free logits per (position, visible context), used for
//!   trained oracles and for logit-shift experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Error, Result};
use crate::math::{log_softmax, log_sum_exp};

/// Maximum number of positions a tabular model may have.
pub const MAX_POSITIONS: usize = 6;
/// Maximum vocabulary size of a tabular model.
pub const MAX_VOCAB: usize = 8;
/// Per-state floor on the log-mass of a tabular joint.
pub const LOG_MASS_FLOOR: f64 = -50.0;

/// Token alphabet `0..size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary(usize);

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(dimension(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Self(size))
    }

    #[inline]
    pub fn size(self) -> usize {
        self.0
    }

    pub fn tokens(self) -> std::ops::Range<usize> {
        0..self.0
    }
}

/// Visible tokens for every position of a sequence; `None` marks a position
/// that is still masked.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(Vec<Option<usize>>);

impl Assignment {
    pub fn masked(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn from_tokens(tokens: &[usize]) -> Self {
        Self(tokens.iter().copied().map(Some).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Option<usize> {
        self.0.get(i).copied().flatten()
    }

    #[inline]
    pub fn is_visible(&self, i: usize) -> bool {
        self.get(i).is_some()
    }

    pub fn set(&mut self, i: usize, token: usize) {
        self.0[i] = Some(token);
    }

    pub fn unset(&mut self, i: usize) {
        self.0[i] = None;
    }

    /// Copy of `self` with position `i` revealed as `token`.
    pub fn with(&self, i: usize, token: usize) -> Self {
        let mut out = self.clone();
        out.set(i, token);
        out
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn visible_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter_map(|(i, t)| t.map(|_| i))
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, t)| if t.is_none() { Some(i) } else { None })
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            match t {
                Some(t) => write!(f, "{t}")?,
                None => write!(f, "_")?,
            }
        }
        Ok(())
    }
}

/// Observed tokens `x_S`, the unresolved block `B`, and an opaque time label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialContext {
    #[serde(default)]
    pub observed: BTreeMap<usize, usize>,
    pub block: Vec<usize>,
    #[serde(default)]
    pub time: f64,
}

impl PartialContext {
    pub fn new(observed: BTreeMap<usize, usize>, block: Vec<usize>) -> Result<Self> {
        let ctx = Self { observed, block, time: 0.0 };
        ctx.check_structure()?;
        Ok(ctx)
    }

    /// Empty observation set with the whole sequence as the block.
    pub fn full_block(positions: usize) -> Self {
        Self { observed: BTreeMap::new(), block: (0..positions).collect(), time: 0.0 }
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    fn check_structure(&self) -> Result<()> {
        if self.block.is_empty() {
            return Err(contract("block must be non-empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &b in &self.block {
            if !seen.insert(b) {
                return Err(contract(format!("block position {b} listed twice")));
            }
            if self.observed.contains_key(&b) {
                return Err(contract(format!("position {b} is both observed and in the block")));
            }
        }
        if !(self.time >= 0.0) {
            return Err(contract("time label must be non-negative"));
        }
        Ok(())
    }

    /// Checks disjointness and that every index/token fits the given model.
    pub fn validate(&self, vocab: Vocabulary, positions: usize) -> Result<()> {
        self.check_structure()?;
        for (&i, &t) in &self.observed {
            if i >= positions {
                return Err(dimension(format!("observed position {i} ≥ {positions}")));
            }
            if t >= vocab.size() {
                return Err(dimension(format!("observed token {t} ≥ vocabulary size {}", vocab.size())));
            }
        }
        if let Some(&b) = self.block.iter().find(|&&b| b >= positions) {
            return Err(dimension(format!("block position {b} ≥ {positions}")));
        }
        Ok(())
    }

    /// Visible assignment with only `x_S` revealed.
    pub fn visible(&self, positions: usize) -> Assignment {
        let mut a = Assignment::masked(positions);
        for (&i, &t) in &self.observed {
            a.set(i, t);
        }
        a
    }

    /// Visible assignment with `x_S` plus `tokens[k]` at `block[k]` revealed.
    pub fn visible_with_block(&self, positions: usize, tokens: &[usize]) -> Assignment {
        let mut a = self.visible(positions);
        for (&i, &t) in self.block.iter().zip(tokens) {
            a.set(i, t);
        }
        a
    }
}

/// The model interface: local conditionals `log q(x_i = a | visible)`.
///
/// Implementations are immutable and safe to query from many threads.
pub trait ConditionalOracle: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    /// Sequence length `L`.
    fn positions(&self) -> usize;

    /// Log-probabilities (nats) of every token at `i`. Position `i` must be
    /// masked in `visible`.
    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>>;

    fn log_conditional(&self, i: usize, token: usize, visible: &Assignment) -> Result<f64> {
        if token >= self.vocab().size() {
            return Err(dimension(format!("token {token} ≥ vocabulary size {}", self.vocab().size())));
        }
        Ok(self.log_conditionals(i, visible)?[token])
    }
}

impl<T: ConditionalOracle + ?Sized> ConditionalOracle for &T {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
    fn positions(&self) -> usize {
        (**self).positions()
    }
    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        (**self).log_conditionals(i, visible)
    }
}

impl<T: ConditionalOracle + ?Sized> ConditionalOracle for Box<T> {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
    fn positions(&self) -> usize {
        (**self).positions()
    }
    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        (**self).log_conditionals(i, visible)
    }
}

impl<T: ConditionalOracle + ?Sized> ConditionalOracle for Arc<T> {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
    fn positions(&self) -> usize {
        (**self).positions()
    }
    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        (**self).log_conditionals(i, visible)
    }
}

/// Validates a conditional query against model dimensions.
pub(crate) fn check_query(vocab: Vocabulary, positions: usize, i: usize, visible: &Assignment) -> Result<()> {
    if visible.len() != positions {
        return Err(dimension(format!(
            "context has {} positions, model has {positions}",
            visible.len()
        )));
    }
    if i >= positions {
        return Err(dimension(format!("position {i} ≥ {positions}")));
    }
    if visible.is_visible(i) {
        return Err(contract(format!("position {i} is already observed")));
    }
    if let Some(t) = visible.as_slice().iter().flatten().find(|&&t| t >= vocab.size()) {
        return Err(dimension(format!("token {t} ≥ vocabulary size {}", vocab.size())));
    }
    Ok(())
}

pub(crate) fn check_caps(vocab: usize, positions: usize) -> Result<()> {
    if positions == 0 || positions > MAX_POSITIONS {
        return Err(crate::error::cap(format!("positions must be in 1..={MAX_POSITIONS}, got {positions}")));
    }
    if vocab > MAX_VOCAB {
        return Err(crate::error::cap(format!("vocabulary size must be ≤ {MAX_VOCAB}, got {vocab}")));
    }
    Vocabulary::new(vocab)?;
    Ok(())
}

/// Maps (position `i`, visible tokens on every other position) to a dense
/// index. Each other position contributes a digit in base `|V| + 1`, with 0
/// meaning masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextIndexer {
    vocab: usize,
    positions: usize,
}

impl ContextIndexer {
    pub fn new(vocab: Vocabulary, positions: usize) -> Self {
        Self { vocab: vocab.size(), positions }
    }

    /// Number of visible contexts per position.
    pub fn contexts_per_position(&self) -> usize {
        (self.vocab + 1).pow(self.positions as u32 - 1)
    }

    pub fn index(&self, i: usize, visible: &Assignment) -> usize {
        let mut idx = 0;
        for k in (0..self.positions).filter(|&k| k != i) {
            let digit = visible.get(k).map_or(0, |t| t + 1);
            idx = idx * (self.vocab + 1) + digit;
        }
        idx
    }

    pub fn decode(&self, i: usize, mut idx: usize) -> Assignment {
        let mut out = Assignment::masked(self.positions);
        for k in (0..self.positions).filter(|&k| k != i).rev() {
            let digit = idx % (self.vocab + 1);
            idx /= self.vocab + 1;
            if digit > 0 {
                out.set(k, digit - 1);
            }
        }
        out
    }
}

/// Exact joint `p(x_1..x_m)` over `V^m` states, stored as log-mass in
/// row-major order (last position varies fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularJointModel {
    vocab: Vocabulary,
    positions: usize,
    log_mass: Vec<f64>,
}

impl TabularJointModel {
    /// Builds a joint from unnormalized log-mass. The table is normalized,
    /// floored at [`LOG_MASS_FLOOR`] per state, and renormalized.
    pub fn new(vocab_size: usize, positions: usize, log_mass: Vec<f64>) -> Result<Self> {
        check_caps(vocab_size, positions)?;
        let expected = vocab_size.pow(positions as u32);
        if log_mass.len() != expected {
            return Err(dimension(format!(
                "log_mass has {} entries, expected {vocab_size}^{positions} = {expected}",
                log_mass.len()
            )));
        }
        if log_mass.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(contract("log_mass entries must be finite or -inf"));
        }
        let lse = log_sum_exp(&log_mass);
        if !lse.is_finite() {
            return Err(contract("joint has zero total mass"));
        }
        let floored: Vec<f64> = log_mass.iter().map(|l| (l - lse).max(LOG_MASS_FLOOR)).collect();
        let lse = log_sum_exp(&floored);
        let log_mass = floored.into_iter().map(|l| l - lse).collect();
        Ok(Self { vocab: Vocabulary::new(vocab_size)?, positions, log_mass })
    }

    pub fn from_probs(vocab_size: usize, positions: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(contract("probabilities must be finite and non-negative"));
        }
        Self::new(vocab_size, positions, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn uniform(vocab_size: usize, positions: usize) -> Result<Self> {
        Self::new(vocab_size, positions, vec![0.0; vocab_size.pow(positions as u32)])
    }

    pub fn log_mass(&self) -> &[f64] {
        &self.log_mass
    }

    pub fn num_states(&self) -> usize {
        self.log_mass.len()
    }

    /// Flat row-major index of a full assignment.
    pub fn state_index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab.size() + t)
    }

    pub fn state_tokens(&self, mut idx: usize) -> Vec<usize> {
        let v = self.vocab.size();
        let mut out = vec![0; self.positions];
        for k in (0..self.positions).rev() {
            out[k] = idx % v;
            idx /= v;
        }
        out
    }

    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        self.log_mass[self.state_index(tokens)]
    }

    fn stride(&self, k: usize) -> usize {
        self.vocab.size().pow((self.positions - 1 - k) as u32)
    }

    /// Flat offsets of every completion of the masked positions in `free`.
    fn completion_offsets(&self, free: &[usize]) -> Vec<usize> {
        let mut offsets = vec![0usize];
        for &k in free {
            let s = self.stride(k);
            offsets = offsets
                .iter()
                .flat_map(|&o| (0..self.vocab.size()).map(move |t| o + t * s))
                .collect();
        }
        offsets
    }

    fn base_index(&self, visible: &Assignment) -> usize {
        visible
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, t)| t.map_or(0, |t| t * self.stride(k)))
            .sum()
    }

    fn check_assignment(&self, visible: &Assignment) -> Result<()> {
        if visible.len() != self.positions {
            return Err(dimension(format!(
                "context has {} positions, model has {}",
                visible.len(),
                self.positions
            )));
        }
        if let Some(t) = visible.as_slice().iter().flatten().find(|&&t| t >= self.vocab.size()) {
            return Err(dimension(format!("token {t} ≥ vocabulary size {}", self.vocab.size())));
        }
        Ok(())
    }

    /// `log Σ p(x)` over all full assignments consistent with `visible`.
    pub fn marginal_log_mass(&self, visible: &Assignment) -> Result<f64> {
        self.check_assignment(visible)?;
        let free: Vec<usize> = visible.masked_positions().collect();
        let base = self.base_index(visible);
        let terms: Vec<f64> = self
            .completion_offsets(&free)
            .into_iter()
            .map(|o| self.log_mass[base + o])
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Exact Bayes conditional `log p(x_i = a | visible)` by marginalization.
    pub fn bayes_conditional(&self, i: usize, a: usize, visible: &Assignment) -> Result<f64> {
        self.log_conditional(i, a, visible)
    }

    /// Exact conditional joint of the block given the observed tokens,
    /// marginalizing every position outside `S ∪ B`.
    pub fn block_distribution(&self, ctx: &PartialContext) -> Result<BlockDistribution> {
        ctx.validate(self.vocab, self.positions)?;
        let v = self.vocab.size();
        let visible = ctx.visible(self.positions);
        let outside: Vec<usize> = visible
            .masked_positions()
            .filter(|k| !ctx.block.contains(k))
            .collect();
        let outside_offsets = self.completion_offsets(&outside);
        let base = self.base_index(&visible);
        let block_strides: Vec<usize> = ctx.block.iter().map(|&k| self.stride(k)).collect();
        let n_block = v.pow(ctx.block.len() as u32);

        let mut log_probs = Vec::with_capacity(n_block);
        let mut tokens = vec![0usize; ctx.block.len()];
        let mut terms = Vec::with_capacity(outside_offsets.len());
        for flat in 0..n_block {
            decode_row_major(flat, v, &mut tokens);
            let offset: usize = tokens.iter().zip(&block_strides).map(|(t, s)| t * s).sum();
            terms.clear();
            terms.extend(outside_offsets.iter().map(|o| self.log_mass[base + offset + o]));
            log_probs.push(log_sum_exp(&terms));
        }
        let lse = log_sum_exp(&log_probs);
        log_probs.iter_mut().for_each(|l| *l -= lse);
        Ok(BlockDistribution { block: ctx.block.clone(), vocab: self.vocab, log_probs })
    }
}

impl ConditionalOracle for TabularJointModel {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn positions(&self) -> usize {
        self.positions
    }

    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        check_query(self.vocab, self.positions, i, visible)?;
        let free: Vec<usize> = visible.masked_positions().filter(|&k| k != i).collect();
        let offsets = self.completion_offsets(&free);
        let base = self.base_index(visible);
        let stride = self.stride(i);
        let mut per_token = Vec::with_capacity(self.vocab.size());
        let mut terms = Vec::with_capacity(offsets.len());
        for a in self.vocab.tokens() {
            terms.clear();
            terms.extend(offsets.iter().map(|o| self.log_mass[base + a * stride + o]));
            per_token.push(log_sum_exp(&terms));
        }
        let norm = log_sum_exp(&per_token);
        Ok(per_token.into_iter().map(|l| l - norm).collect())
    }
}

/// Writes the base-`v` digits of `flat` into `out` (first digit most significant).
pub(crate) fn decode_row_major(mut flat: usize, v: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = flat % v;
        flat /= v;
    }
}

/// `p(x_B | x_S)` over `V^|B|` block assignments, row-major in block order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDistribution {
    pub block: Vec<usize>,
    pub vocab: Vocabulary,
    pub log_probs: Vec<f64>,
}

impl BlockDistribution {
    /// Block tokens of flat assignment `flat`.
    pub fn tokens(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.block.len()];
        decode_row_major(flat, self.vocab.size(), &mut out);
        out
    }

    pub fn flat_index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab.size() + t)
    }

    /// Log-marginal of the block coordinates listed (by index into `block`).
    pub fn marginal(&self, coords: &[usize]) -> Vec<f64> {
        let v = self.vocab.size();
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); v.pow(coords.len() as u32)];
        let mut tokens = vec![0; self.block.len()];
        for (flat, &lp) in self.log_probs.iter().enumerate() {
            decode_row_major(flat, v, &mut tokens);
            let key = coords.iter().fold(0, |acc, &c| acc * v + tokens[c]);
            buckets[key].push(lp);
        }
        buckets.iter().map(|b| log_sum_exp(b)).collect()
    }
}

/// Perturbation parameters for [`PerturbedConditionalModel`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub delta: f64,
    pub seed: u64,
}

/// Bayes conditionals of a joint with seeded Gaussian logit offsets, scaled
/// by `delta`, added per (position, visible context).
#[derive(Clone, Debug)]
pub struct PerturbedConditionalModel {
    base: TabularJointModel,
    perturbation: Perturbation,
    indexer: ContextIndexer,
    offsets: Vec<f64>,
}

impl PerturbedConditionalModel {
    pub fn new(base: TabularJointModel, delta: f64, seed: u64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(contract(format!("perturbation delta must be finite and ≥ 0, got {delta}")));
        }
        let indexer = ContextIndexer::new(base.vocab, base.positions);
        let n = base.positions * indexer.contexts_per_position() * base.vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self { base, perturbation: Perturbation { delta, seed }, indexer, offsets })
    }

    pub fn base(&self) -> &TabularJointModel {
        &self.base
    }

    pub fn delta(&self) -> f64 {
        self.perturbation.delta
    }

    pub fn seed(&self) -> u64 {
        self.perturbation.seed
    }

    pub fn perturbation(&self) -> Perturbation {
        self.perturbation
    }

    /// `log softmax(bayes logits + delta · offsets)` evaluated at `a`.
    pub fn perturbed_conditional(&self, i: usize, a: usize, visible: &Assignment) -> Result<f64> {
        self.log_conditional(i, a, visible)
    }
}

impl ConditionalOracle for PerturbedConditionalModel {
    fn vocab(&self) -> Vocabulary {
        self.base.vocab
    }

    fn positions(&self) -> usize {
        self.base.positions
    }

    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        let bayes = self.base.log_conditionals(i, visible)?;
        if self.perturbation.delta == 0.0 {
            return Ok(bayes);
        }
        let v = self.base.vocab.size();
        let start = (i * self.indexer.contexts_per_position() + self.indexer.index(i, visible)) * v;
        let shifted: Vec<f64> = bayes
            .iter()
            .zip(&self.offsets[start..start + v])
            .map(|(l, o)| l + self.perturbation.delta * o)
            .collect();
        Ok(log_softmax(&shifted))
    }
}

/// Raw logits `ℓ_i(a | visible)` for every position and visible context.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable {
    vocab: Vocabulary,
    positions: usize,
    indexer: ContextIndexer,
    logits: Vec<f64>,
}

/// Additive logit shifts, `shifts[i][context_index]`.
pub type LogitShifts = Vec<Vec<f64>>;

impl LogitTable {
    /// All-zero logits (uniform conditionals everywhere).
    pub fn zeros(vocab_size: usize, positions: usize) -> Result<Self> {
        check_caps(vocab_size, positions)?;
        let vocab = Vocabulary::new(vocab_size)?;
        let indexer = ContextIndexer::new(vocab, positions);
        let n = positions * indexer.contexts_per_position() * vocab_size;
        Ok(Self { vocab, positions, indexer, logits: vec![0.0; n] })
    }

    pub fn from_flat(vocab_size: usize, positions: usize, logits: Vec<f64>) -> Result<Self> {
        let mut table = Self::zeros(vocab_size, positions)?;
        if logits.len() != table.logits.len() {
            return Err(dimension(format!(
                "logit table has {} entries, expected {}",
                logits.len(),
                table.logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(contract("logits must be finite"));
        }
        table.logits = logits;
        Ok(table)
    }

    /// Tabulates any oracle's log-conditionals as logits.
    pub fn from_oracle<O: ConditionalOracle + ?Sized>(oracle: &O) -> Result<Self> {
        let mut table = Self::zeros(oracle.vocab().size(), oracle.positions())?;
        for i in 0..table.positions {
            for c in 0..table.indexer.contexts_per_position() {
                let visible = table.indexer.decode(i, c);
                let lp = oracle.log_conditionals(i, &visible)?;
                table.row_mut(i, c).copy_from_slice(&lp);
            }
        }
        Ok(table)
    }

    pub fn indexer(&self) -> ContextIndexer {
        self.indexer
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn contexts_per_position(&self) -> usize {
        self.indexer.contexts_per_position()
    }

    pub(crate) fn row_start(&self, i: usize, ctx: usize) -> usize {
        (i * self.indexer.contexts_per_position() + ctx) * self.vocab.size()
    }

    pub fn row(&self, i: usize, ctx: usize) -> &[f64] {
        let s = self.row_start(i, ctx);
        &self.logits[s..s + self.vocab.size()]
    }

    pub fn row_mut(&mut self, i: usize, ctx: usize) -> &mut [f64] {
        let s = self.row_start(i, ctx);
        let v = self.vocab.size();
        &mut self.logits[s..s + v]
    }

    /// Adds `shifts[i][c]` to every logit of row `(i, c)`. The induced
    /// conditionals are unchanged.
    pub fn apply_logit_shift(&self, shifts: &LogitShifts) -> Result<LogitTable> {
        if shifts.len() != self.positions
            || shifts.iter().any(|s| s.len() != self.contexts_per_position())
        {
            return Err(dimension("shift table must be positions × contexts_per_position"));
        }
        if shifts.iter().flatten().any(|c| !c.is_finite()) {
            return Err(contract("logit shifts must be finite"));
        }
        let mut out = self.clone();
        for (i, row_shifts) in shifts.iter().enumerate() {
            for (c, &shift) in row_shifts.iter().enumerate() {
                out.row_mut(i, c).iter_mut().for_each(|l| *l += shift);
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`LogitTable::apply_logit_shift`].
pub fn apply_logit_shift(table: &LogitTable, shifts: &LogitShifts) -> Result<LogitTable> {
    table.apply_logit_shift(shifts)
}

impl ConditionalOracle for LogitTable {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn positions(&self) -> usize {
        self.positions
    }

    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        check_query(self.vocab, self.positions, i, visible)?;
        Ok(log_softmax(self.row(i, self.indexer.index(i, visible))))
    }
}

/// On-disk model description. `log_mass` is row-major with the last position
/// varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub vocab_size: usize,
    pub positions: usize,
    pub log_mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_table: Option<Vec<f64>>,
}

/// A loaded model: the reference joint plus the oracle under diagnosis.
#[derive(Clone, Debug)]
pub enum Model {
    Bayes(TabularJointModel),
    Perturbed(PerturbedConditionalModel),
    Trained { joint: TabularJointModel, table: LogitTable },
}

impl Model {
    pub fn joint(&self) -> &TabularJointModel {
        match self {
            Model::Bayes(j) => j,
            Model::Perturbed(p) => p.base(),
            Model::Trained { joint, .. } => joint,
        }
    }

    pub fn oracle(&self) -> &dyn ConditionalOracle {
        match self {
            Model::Bayes(j) => j,
            Model::Perturbed(p) => p,
            Model::Trained { table, .. } => table,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Bayes(_) => "bayes",
            Model::Perturbed(_) => "perturbed",
            Model::Trained { .. } => "trained",
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let joint = TabularJointModel::new(file.vocab_size, file.positions, file.log_mass)?;
        match (file.perturbation, file.logit_table) {
            (Some(_), Some(_)) => Err(Error::Config(
                "model file may carry a perturbation or a logit table, not both".into(),
            )),
            (Some(p), None) => Ok(Model::Perturbed(PerturbedConditionalModel::new(joint, p.delta, p.seed)?)),
            (None, Some(logits)) => {
                let table = LogitTable::from_flat(file.vocab_size, file.positions, logits)?;
                Ok(Model::Trained { joint, table })
            }
            (None, None) => Ok(Model::Bayes(joint)),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let joint = self.joint();
        ModelFile {
            vocab_size: joint.vocab.size(),
            positions: joint.positions,
            log_mass: joint.log_mass.clone(),
            perturbation: match self {
                Model::Perturbed(p) => Some(p.perturbation()),
                _ => None,
            },
            logit_table: match self {
                Model::Trained { table, .. } => Some(table.logits.clone()),
                _ => None,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_2x2() -> TabularJointModel {
        TabularJointModel::from_probs(2, 2, &[0.4, 0.1, 0.2, 0.3]).unwrap()
    }

    #[test]
    fn uniform_bit_marginal_is_half() {
        let joint = TabularJointModel::uniform(2, 2).unwrap();
        let lp = joint.bayes_conditional(0, 0, &Assignment::masked(2)).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_marginalized_two_by_two() {
        // p(x2=0 | x1=0) = 0.4 / (0.4 + 0.1)
        let joint = table_2x2();
        let mut visible = Assignment::masked(2);
        visible.set(0, 0);
        let lp = joint.bayes_conditional(1, 0, &visible).unwrap();
        assert!((lp - 0.8f64.ln()).abs() < 1e-12);
        visible.unset(0);
        // p(x2=0) = 0.6
        let lp = joint.bayes_conditional(1, 0, &visible).unwrap();
        assert!((lp - 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn query_on_observed_position_is_rejected() {
        let joint = table_2x2();
        let visible = Assignment::from_tokens(&[0, 1]);
        assert!(matches!(joint.bayes_conditional(0, 0, &visible), Err(Error::Contract(_))));
        assert!(matches!(
            joint.bayes_conditional(0, 0, &Assignment::masked(3)),
            Err(Error::Dimension(_))
        ));
        let mut bad = Assignment::masked(2);
        bad.set(1, 5);
        assert!(matches!(joint.bayes_conditional(0, 0, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn caps_are_enforced() {
        assert!(matches!(TabularJointModel::uniform(9, 2), Err(Error::Cap(_))));
        assert!(matches!(TabularJointModel::uniform(2, 7), Err(Error::Cap(_))));
        assert!(matches!(TabularJointModel::uniform(1, 2), Err(Error::Dimension(_))));
        assert!(TabularJointModel::uniform(8, 6).is_ok());
    }

    #[test]
    fn zero_mass_states_are_floored() {
        let joint = TabularJointModel::from_probs(2, 1, &[1.0, 0.0]).unwrap();
        assert!(joint.log_mass().iter().all(|l| l.is_finite()));
        assert!((log_sum_exp(joint.log_mass())).abs() < 1e-12);
        assert!(joint.log_mass()[1] < -49.0);
    }

    #[test]
    fn context_indexer_round_trips() {
        let ix = ContextIndexer::new(Vocabulary::new(3).unwrap(), 4);
        assert_eq!(ix.contexts_per_position(), 64);
        for i in 0..4 {
            for c in 0..64 {
                let a = ix.decode(i, c);
                assert!(!a.is_visible(i));
                assert_eq!(ix.index(i, &a), c);
            }
        }
    }

    #[test]
    fn zero_delta_reproduces_bayes_bitwise() {
        let joint = table_2x2();
        let model = PerturbedConditionalModel::new(joint.clone(), 0.0, 7).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let visible = ContextIndexer::new(joint.vocab(), 2).decode(i, c);
                assert_eq!(
                    model.log_conditionals(i, &visible).unwrap(),
                    joint.log_conditionals(i, &visible).unwrap()
                );
            }
        }
    }

    #[test]
    fn perturbed_conditionals_are_normalized_and_deterministic() {
        let joint = table_2x2();
        let a = PerturbedConditionalModel::new(joint.clone(), 0.5, 11).unwrap();
        let b = PerturbedConditionalModel::new(joint, 0.5, 11).unwrap();
        let visible = Assignment::masked(2);
        let lp = a.log_conditionals(1, &visible).unwrap();
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(lp, b.log_conditionals(1, &visible).unwrap());
        assert!(PerturbedConditionalModel::new(table_2x2(), -0.1, 0).is_err());
    }

    #[test]
    fn logit_shift_leaves_conditionals_unchanged() {
        let table = LogitTable::from_oracle(&table_2x2()).unwrap();
        let mut shifts = vec![vec![0.0; table.contexts_per_position()]; 2];
        assert_eq!(table.apply_logit_shift(&shifts).unwrap(), table);
        shifts[1][2] = 3.7;
        let shifted = table.apply_logit_shift(&shifts).unwrap();
        let visible = table.indexer().decode(1, 2);
        let before = table.log_conditionals(1, &visible).unwrap();
        let after = shifted.log_conditionals(1, &visible).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
        shifts[0][0] = f64::INFINITY;
        assert!(matches!(table.apply_logit_shift(&shifts), Err(Error::Contract(_))));
    }

    #[test]
    fn model_file_round_trip_preserves_kind() {
        let joint = table_2x2();
        let model = Model::Perturbed(PerturbedConditionalModel::new(joint, 0.25, 3).unwrap());
        let json = serde_json::to_string(&model.to_file()).unwrap();
        let back = Model::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.kind(), "perturbed");
        let visible = Assignment::masked(2);
        assert_eq!(
            back.oracle().log_conditionals(0, &visible).unwrap(),
            model.oracle().log_conditionals(0, &visible).unwrap()
        );
    }

    #[test]
    fn context_validation() {
        let ctx = PartialContext::new(BTreeMap::from([(0, 1)]), vec![0, 1]);
        assert!(matches!(ctx, Err(Error::Contract(_))));
        let ctx = PartialContext::new(BTreeMap::new(), vec![]);
        assert!(ctx.is_err());
        let ctx = PartialContext::new(BTreeMap::from([(0, 4)]), vec![1]).unwrap();
        assert!(matches!(ctx.validate(Vocabulary::new(2).unwrap(), 2), Err(Error::Dimension(_))));
    }
}

//! Order-induced pseudo-joints and local order curl.
//!
//! For a block `B` and an order `π` of it, the pseudo-joint is the sequential
//! product `Q^π(x_B | x_S) = Π_m q(x_{π_m} | x_S, x_{π_<m})`. It is a proper
//! distribution for every order, but different orders only agree when the
//! conditionals are compatible. Local curl is the log-ratio of the two
//! two-step pseudo-joints on a pair of positions; everything in this module
//! is built from it.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cap, contract, Result};
use crate::math::{log_sum_exp, Estimate};
use crate::model::{decode_row_major, Assignment, ConditionalOracle, PartialContext};

/// Default `ε` of the normalized curl.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Default tolerance (nats) of the exact order-consistency check.
pub const DEFAULT_CONSISTENCY_TOL: f64 = 1e-8;
/// Largest block the permutation enumeration accepts.
pub const MAX_CONSISTENCY_BLOCK: usize = 5;
/// Largest number of block assignments the permutation enumeration accepts.
pub const MAX_CONSISTENCY_ASSIGNMENTS: usize = 32_768;

/// One pseudo-joint: a context plus an order of its block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoJointSpec {
    pub context: PartialContext,
    pub order: Vec<usize>,
}

impl PseudoJointSpec {
    pub fn new(context: PartialContext, order: Vec<usize>) -> Result<Self> {
        check_permutation(&context.block, &order)?;
        Ok(Self { context, order })
    }

    /// The block's own coordinate order.
    pub fn identity(context: PartialContext) -> Self {
        let order = context.block.clone();
        Self { context, order }
    }
}

pub(crate) fn check_permutation(block: &[usize], order: &[usize]) -> Result<()> {
    let mut a = block.to_vec();
    let mut b = order.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(contract(format!("order {order:?} is not a permutation of block {block:?}")));
    }
    Ok(())
}

fn check_block_assignment<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    assignment: &[usize],
) -> Result<()> {
    if assignment.len() != ctx.block.len() {
        return Err(contract(format!(
            "assignment has {} tokens, block has {} positions",
            assignment.len(),
            ctx.block.len()
        )));
    }
    if let Some(t) = assignment.iter().find(|&&t| t >= oracle.vocab().size()) {
        return Err(crate::error::dimension(format!("token {t} out of vocabulary")));
    }
    Ok(())
}

/// `log Q^π(x_B | x_S)` for `assignment` given in block order.
pub fn pseudo_joint_log_prob<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    spec: &PseudoJointSpec,
    assignment: &[usize],
) -> Result<f64> {
    let ctx = &spec.context;
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_permutation(&ctx.block, &spec.order)?;
    check_block_assignment(oracle, ctx, assignment)?;
    let mut visible = ctx.visible(oracle.positions());
    let mut total = 0.0;
    for &pos in &spec.order {
        let k = ctx.block.iter().position(|&b| b == pos).expect("checked permutation");
        total += oracle.log_conditional(pos, assignment[k], &visible)?;
        visible.set(pos, assignment[k]);
    }
    Ok(total)
}

/// `log Q^π` for every block assignment, row-major in block order.
///
/// Walks the order's prefix tree so each prefix context is queried once.
pub fn pseudo_joint_table<O: ConditionalOracle + ?Sized>(oracle: &O, spec: &PseudoJointSpec) -> Result<Vec<f64>> {
    let ctx = &spec.context;
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_permutation(&ctx.block, &spec.order)?;
    let v = oracle.vocab().size();
    let n = checked_block_states(v, ctx.block.len())?;
    let strides: Vec<usize> = spec
        .order
        .iter()
        .map(|pos| {
            let k = ctx.block.iter().position(|b| b == pos).unwrap();
            v.pow((ctx.block.len() - 1 - k) as u32)
        })
        .collect();
    let mut out = vec![0.0; n];
    let mut visible = ctx.visible(oracle.positions());
    fill_table(oracle, &spec.order, &strides, 0, 0, 0.0, &mut visible, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn fill_table<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    order: &[usize],
    strides: &[usize],
    depth: usize,
    flat: usize,
    acc: f64,
    visible: &mut Assignment,
    out: &mut [f64],
) -> Result<()> {
    if depth == order.len() {
        out[flat] = acc;
        return Ok(());
    }
    let pos = order[depth];
    let lp = oracle.log_conditionals(pos, visible)?;
    for (t, l) in lp.iter().enumerate() {
        visible.set(pos, t);
        fill_table(oracle, order, strides, depth + 1, flat + t * strides[depth], acc + l, visible, out)?;
    }
    visible.unset(pos);
    Ok(())
}

fn checked_block_states(v: usize, len: usize) -> Result<usize> {
    v.checked_pow(len as u32)
        .filter(|&n| n <= crate::model::MAX_VOCAB.pow(crate::model::MAX_POSITIONS as u32))
        .ok_or_else(|| cap(format!("{v}^{len} block assignments exceed the enumeration cap")))
}

/// One evaluated elementary square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurlSample {
    pub i: usize,
    pub j: usize,
    pub a: usize,
    pub b: usize,
    /// Visible tokens `x_S` the square is anchored at.
    pub context: Assignment,
    /// `[log q(a|S), log q(b|S,a), log q(b|S), log q(a|S,b)]`.
    pub log_terms: [f64; 4],
    /// Four-term curl (nats).
    pub value: f64,
    /// `log Q^{i→j}(a,b) − log Q^{j→i}(a,b)`.
    pub pseudo_joint_ratio: f64,
    /// Normalized curl at [`DEFAULT_EPSILON`].
    pub normalized_value: f64,
}

impl CurlSample {
    fn from_terms(i: usize, j: usize, a: usize, b: usize, context: Assignment, t: [f64; 4]) -> Self {
        let value = t[0] + t[1] - t[2] - t[3];
        let pseudo_joint_ratio = (t[0] + t[1]) - (t[2] + t[3]);
        let normalized_value = normalize(value, &t, DEFAULT_EPSILON);
        Self { i, j, a, b, context, log_terms: t, value, pseudo_joint_ratio, normalized_value }
    }
}

fn normalize(value: f64, terms: &[f64; 4], epsilon: f64) -> f64 {
    value.abs() / (terms.iter().map(|t| t.abs()).sum::<f64>() + epsilon)
}

/// All four-term curls of one position pair at one visible context.
#[derive(Clone, Debug)]
pub struct PairCurls {
    pub i: usize,
    pub j: usize,
    pub log_qi: Vec<f64>,
    pub log_qj: Vec<f64>,
    /// `log_qj_given_i[a][b] = log q(x_j=b | S, x_i=a)`.
    pub log_qj_given_i: Vec<Vec<f64>>,
    /// `log_qi_given_j[b][a] = log q(x_i=a | S, x_j=b)`.
    pub log_qi_given_j: Vec<Vec<f64>>,
}

impl PairCurls {
    pub fn compute<O: ConditionalOracle + ?Sized>(oracle: &O, visible: &Assignment, i: usize, j: usize) -> Result<Self> {
        if i == j {
            return Err(contract("curl needs two distinct positions"));
        }
        if visible.is_visible(j) {
            return Err(contract(format!("position {j} is already observed")));
        }
        let log_qi = oracle.log_conditionals(i, visible)?;
        let log_qj = oracle.log_conditionals(j, visible)?;
        let v = oracle.vocab().size();
        let mut log_qj_given_i = Vec::with_capacity(v);
        let mut log_qi_given_j = Vec::with_capacity(v);
        for t in 0..v {
            log_qj_given_i.push(oracle.log_conditionals(j, &visible.with(i, t))?);
            log_qi_given_j.push(oracle.log_conditionals(i, &visible.with(j, t))?);
        }
        Ok(Self { i, j, log_qi, log_qj, log_qj_given_i, log_qi_given_j })
    }

    pub fn terms(&self, a: usize, b: usize) -> [f64; 4] {
        [self.log_qi[a], self.log_qj_given_i[a][b], self.log_qj[b], self.log_qi_given_j[b][a]]
    }

    pub fn curl(&self, a: usize, b: usize) -> f64 {
        let t = self.terms(a, b);
        t[0] + t[1] - t[2] - t[3]
    }

    pub fn sample(&self, visible: &Assignment, a: usize, b: usize) -> CurlSample {
        CurlSample::from_terms(self.i, self.j, a, b, visible.clone(), self.terms(a, b))
    }

    /// `log Q^{i→j}(a, b)`.
    pub fn log_q_forward(&self, a: usize, b: usize) -> f64 {
        self.log_qi[a] + self.log_qj_given_i[a][b]
    }

    /// `log Q^{j→i}(a, b)`.
    pub fn log_q_backward(&self, a: usize, b: usize) -> f64 {
        self.log_qj[b] + self.log_qi_given_j[b][a]
    }

    /// Exact `KL(Q^{i→j} ‖ Q^{j→i})`.
    pub fn swap_kl(&self) -> f64 {
        let v = self.log_qi.len();
        let mut kl = 0.0;
        for a in 0..v {
            for b in 0..v {
                let f = self.log_q_forward(a, b);
                kl += f.exp() * (f - self.log_q_backward(a, b));
            }
        }
        kl.max(0.0)
    }
}

/// Four-term curl at an arbitrary visible assignment.
pub fn curl_at<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    visible: &Assignment,
    i: usize,
    j: usize,
    a: usize,
    b: usize,
) -> Result<CurlSample> {
    if i == j {
        return Err(contract("curl needs two distinct positions"));
    }
    if visible.is_visible(j) {
        return Err(contract(format!("position {j} is already observed")));
    }
    let t = [
        oracle.log_conditional(i, a, visible)?,
        oracle.log_conditional(j, b, &visible.with(i, a))?,
        oracle.log_conditional(j, b, visible)?,
        oracle.log_conditional(i, a, &visible.with(j, b))?,
    ];
    Ok(CurlSample::from_terms(i, j, a, b, visible.clone(), t))
}

fn check_pair_in_block(ctx: &PartialContext, i: usize, j: usize) -> Result<()> {
    if i == j {
        return Err(contract("curl needs two distinct positions"));
    }
    for p in [i, j] {
        if !ctx.block.contains(&p) {
            return Err(contract(format!("position {p} is not in the block")));
        }
    }
    Ok(())
}

/// Local order curl `C_ij^{a,b}(x_S)` for two block positions.
pub fn curl_local<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    i: usize,
    j: usize,
    a: usize,
    b: usize,
) -> Result<CurlSample> {
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_pair_in_block(ctx, i, j)?;
    curl_at(oracle, &ctx.visible(oracle.positions()), i, j, a, b)
}

/// `|C| / (Σ |log q| over the four terms + ε)`.
pub fn curl_normalized(sample: &CurlSample, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(normalize(sample.value, &sample.log_terms, epsilon))
}

/// How (i, j, a, b) tuples are chosen for aggregate curl statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingPlan {
    /// Every unordered block pair and every token pair.
    Exhaustive,
    /// Uniform draws of (pair, a, b).
    MonteCarlo { seed: u64, samples: usize },
    /// A single tuple.
    Single { i: usize, j: usize, a: usize, b: usize },
}

fn block_pairs(ctx: &PartialContext) -> Vec<(usize, usize)> {
    let mut block = ctx.block.clone();
    block.sort_unstable();
    block.iter().copied().tuple_combinations().collect()
}

/// Visits the curl samples selected by `plan`.
fn for_each_planned<O, F>(oracle: &O, ctx: &PartialContext, plan: &SamplingPlan, mut visit: F) -> Result<()>
where
    O: ConditionalOracle + ?Sized,
    F: FnMut(CurlSample),
{
    ctx.validate(oracle.vocab(), oracle.positions())?;
    let pairs = block_pairs(ctx);
    if pairs.is_empty() {
        return Err(contract("block has fewer than two positions"));
    }
    let visible = ctx.visible(oracle.positions());
    let v = oracle.vocab().size();
    match *plan {
        SamplingPlan::Exhaustive => {
            for &(i, j) in &pairs {
                let pc = PairCurls::compute(oracle, &visible, i, j)?;
                for a in 0..v {
                    for b in 0..v {
                        visit(pc.sample(&visible, a, b));
                    }
                }
            }
        }
        SamplingPlan::MonteCarlo { seed, samples } => {
            if samples == 0 {
                return Err(contract("Monte Carlo plan needs at least one sample"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cache: Vec<Option<PairCurls>> = vec![None; pairs.len()];
            for _ in 0..samples {
                let k = rng.random_range(0..pairs.len());
                let a = rng.random_range(0..v);
                let b = rng.random_range(0..v);
                let (i, j) = pairs[k];
                let pc = match &mut cache[k] {
                    Some(pc) => pc,
                    slot => slot.insert(PairCurls::compute(oracle, &visible, i, j)?),
                };
                visit(pc.sample(&visible, a, b));
            }
        }
        SamplingPlan::Single { i, j, a, b } => {
            check_pair_in_block(ctx, i, j)?;
            visit(curl_at(oracle, &visible, i, j, a, b)?);
        }
    }
    Ok(())
}

/// Every curl sample `plan` selects, in visiting order.
pub fn planned_samples<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    plan: &SamplingPlan,
) -> Result<Vec<CurlSample>> {
    let mut out = Vec::new();
    for_each_planned(oracle, ctx, plan, |s| out.push(s))?;
    Ok(out)
}

/// Mean absolute curl under `plan`.
pub fn ecirc_abs<O: ConditionalOracle + ?Sized>(oracle: &O, ctx: &PartialContext, plan: &SamplingPlan) -> Result<Estimate> {
    let mut values = Vec::new();
    for_each_planned(oracle, ctx, plan, |s| values.push(s.value.abs()))?;
    Ok(summarize(plan, &values))
}

/// Mean squared normalized curl under `plan`.
pub fn ecirc_penalty<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    plan: &SamplingPlan,
    epsilon: f64,
) -> Result<Estimate> {
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut values = Vec::new();
    for_each_planned(oracle, ctx, plan, |s| values.push(normalize(s.value, &s.log_terms, epsilon).powi(2)))?;
    Ok(summarize(plan, &values))
}

fn summarize(plan: &SamplingPlan, values: &[f64]) -> Estimate {
    match plan {
        SamplingPlan::MonteCarlo { .. } => Estimate::from_samples(values),
        _ => Estimate::exact(values.iter().sum::<f64>() / values.len() as f64, values.len()),
    }
}

/// Exact or sampled order-swap KL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KlMode {
    Exact,
    MonteCarlo { seed: u64, samples: usize },
}

/// `KL(Q^{i→j} ‖ Q^{j→i})` on a block pair.
///
/// The Monte Carlo mode averages curl over draws from `Q^{i→j}`.
pub fn order_swap_kl<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    i: usize,
    j: usize,
    mode: KlMode,
) -> Result<Estimate> {
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_pair_in_block(ctx, i, j)?;
    let visible = ctx.visible(oracle.positions());
    let pc = PairCurls::compute(oracle, &visible, i, j)?;
    match mode {
        KlMode::Exact => {
            let v = oracle.vocab().size();
            Ok(Estimate::exact(pc.swap_kl(), v * v))
        }
        KlMode::MonteCarlo { seed, samples } => {
            if samples == 0 {
                return Err(contract("Monte Carlo mode needs at least one sample"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..samples)
                .map(|_| {
                    let a = sample_log_categorical(&pc.log_qi, &mut rng);
                    let b = sample_log_categorical(&pc.log_qj_given_i[a], &mut rng);
                    pc.curl(a, b)
                })
                .collect();
            Ok(Estimate::from_samples(&values))
        }
    }
}

/// Inverse-CDF draw from log-probabilities.
pub(crate) fn sample_log_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    inverse_cdf(log_probs, u)
}

pub(crate) fn inverse_cdf(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return k;
        }
    }
    log_probs.len() - 1
}

/// A path of adjacent transpositions from `start`. Step `k` swaps the
/// entries at (0-based) slots `k` and `k + 1` of the current order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPath {
    pub start: Vec<usize>,
    pub steps: Vec<usize>,
}

impl SwapPath {
    pub fn new(start: Vec<usize>, steps: Vec<usize>) -> Result<Self> {
        let path = Self { start, steps };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.start.len();
        if let Some(&k) = self.steps.iter().find(|&&k| k + 1 >= n) {
            return Err(contract(format!("swap slot {k} out of range for an order of length {n}")));
        }
        Ok(())
    }

    /// Orders visited along the path, `start` first.
    pub fn orders(&self) -> Vec<Vec<usize>> {
        let mut cur = self.start.clone();
        let mut out = vec![cur.clone()];
        for &k in &self.steps {
            cur.swap(k, k + 1);
            out.push(cur.clone());
        }
        out
    }

    pub fn end(&self) -> Vec<usize> {
        let mut cur = self.start.clone();
        for &k in &self.steps {
            cur.swap(k, k + 1);
        }
        cur
    }

    /// Bubble-sort path from `start` to `end`.
    pub fn bubble(start: &[usize], end: &[usize]) -> Result<Self> {
        check_permutation(start, end)?;
        let target: std::collections::HashMap<usize, usize> = end.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        let mut cur: Vec<usize> = start.to_vec();
        let mut steps = Vec::new();
        let n = cur.len();
        for pass in 0..n {
            for k in 0..n.saturating_sub(1 + pass) {
                if target[&cur[k]] > target[&cur[k + 1]] {
                    cur.swap(k, k + 1);
                    steps.push(k);
                }
            }
        }
        Ok(Self { start: start.to_vec(), steps })
    }
}

/// One curl term of an adjacent-swap decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapTerm {
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub a: usize,
    pub b: usize,
    /// Block positions resolved before the swapped pair.
    pub prefix: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapDecomposition {
    pub terms: Vec<SwapTerm>,
    pub sum: f64,
    /// `log Q^start − log Q^end`, computed directly.
    pub log_gap: f64,
    /// `log_gap − sum`.
    pub residual: f64,
}

/// Expresses `log Q^π − log Q^π'` as the curls met along `path`.
pub fn swap_decomposition<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    path: &SwapPath,
    assignment: &[usize],
) -> Result<SwapDecomposition> {
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_permutation(&ctx.block, &path.start)?;
    path.validate()?;
    check_block_assignment(oracle, ctx, assignment)?;
    let token_of = |pos: usize| assignment[ctx.block.iter().position(|&b| b == pos).unwrap()];

    let mut terms = Vec::with_capacity(path.steps.len());
    let mut cur = path.start.clone();
    for (r, &k) in path.steps.iter().enumerate() {
        let (i, j) = (cur[k], cur[k + 1]);
        let mut visible = ctx.visible(oracle.positions());
        for &p in &cur[..k] {
            visible.set(p, token_of(p));
        }
        let (a, b) = (token_of(i), token_of(j));
        let sample = curl_at(oracle, &visible, i, j, a, b)?;
        terms.push(SwapTerm { step: r, i, j, a, b, prefix: cur[..k].to_vec(), value: sample.value });
        cur.swap(k, k + 1);
    }
    let sum: f64 = terms.iter().map(|t| t.value).sum();
    let start = PseudoJointSpec { context: ctx.clone(), order: path.start.clone() };
    let end = PseudoJointSpec { context: ctx.clone(), order: cur };
    let log_gap = pseudo_joint_log_prob(oracle, &start, assignment)? - pseudo_joint_log_prob(oracle, &end, assignment)?;
    Ok(SwapDecomposition { terms, sum, log_gap, residual: log_gap - sum })
}

/// Where the permutation enumeration found its first gap above tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderGapWitness {
    /// Block assignment in block order.
    pub assignment: Vec<usize>,
    pub order_high: Vec<usize>,
    pub order_low: Vec<usize>,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    pub tolerance: f64,
    /// Max over assignments and order pairs of `|log Q^π − log Q^π'|`.
    pub max_order_gap: f64,
    /// Max `|curl|` over all reachable elementary squares.
    pub max_square_curl: f64,
    /// Whether the two enumerations give the same verdict.
    pub verdicts_agree: bool,
    pub orders_checked: usize,
    pub squares_checked: usize,
    pub gap_witness: Option<OrderGapWitness>,
    pub witness: Option<CurlSample>,
}

/// Decides exact order consistency on the block twice: by enumerating every
/// order and assignment, and by enumerating every reachable square.
pub fn order_consistency_check<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    tol: f64,
) -> Result<ConsistencyReport> {
    ctx.validate(oracle.vocab(), oracle.positions())?;
    if !(tol > 0.0) {
        return Err(contract("tolerance must be positive"));
    }
    let v = oracle.vocab().size();
    let nb = ctx.block.len();
    if nb > MAX_CONSISTENCY_BLOCK {
        return Err(cap(format!("block of {nb} positions exceeds the permutation cap of {MAX_CONSISTENCY_BLOCK}")));
    }
    let n_assign = v.pow(nb as u32);
    if n_assign > MAX_CONSISTENCY_ASSIGNMENTS {
        return Err(cap(format!("{v}^{nb} block assignments exceed the cap of {MAX_CONSISTENCY_ASSIGNMENTS}")));
    }

    // Permutation enumeration.
    let mut block = ctx.block.clone();
    block.sort_unstable();
    let mut hi = vec![f64::NEG_INFINITY; n_assign];
    let mut lo = vec![f64::INFINITY; n_assign];
    let mut hi_order = vec![0usize; n_assign];
    let mut lo_order = vec![0usize; n_assign];
    let orders: Vec<Vec<usize>> = block.iter().copied().permutations(nb).collect();
    for (k, order) in orders.iter().enumerate() {
        let spec = PseudoJointSpec { context: ctx.clone(), order: order.clone() };
        for (x, lq) in pseudo_joint_table(oracle, &spec)?.into_iter().enumerate() {
            if lq > hi[x] {
                hi[x] = lq;
                hi_order[x] = k;
            }
            if lq < lo[x] {
                lo[x] = lq;
                lo_order[x] = k;
            }
        }
    }
    let mut max_order_gap = 0.0f64;
    let mut gap_witness = None;
    for x in 0..n_assign {
        let gap = hi[x] - lo[x];
        max_order_gap = max_order_gap.max(gap);
        if gap_witness.is_none() && gap >= tol {
            let mut assignment = vec![0; nb];
            decode_row_major(x, v, &mut assignment);
            gap_witness = Some(OrderGapWitness {
                assignment,
                order_high: orders[hi_order[x]].clone(),
                order_low: orders[lo_order[x]].clone(),
                gap,
            });
        }
    }

    // Reachable squares: A ⊆ B by increasing size, lexicographic x_A.
    let mut max_square_curl = 0.0f64;
    let mut witness = None;
    let mut squares = 0usize;
    let base = ctx.visible(oracle.positions());
    for size in 0..=nb.saturating_sub(2) {
        for revealed in block.iter().copied().combinations(size) {
            let rest: Vec<usize> = block.iter().copied().filter(|p| !revealed.contains(p)).collect();
            let mut tokens = vec![0; size];
            for flat in 0..v.pow(size as u32) {
                decode_row_major(flat, v, &mut tokens);
                let mut visible = base.clone();
                for (&p, &t) in revealed.iter().zip(&tokens) {
                    visible.set(p, t);
                }
                for (i, j) in rest.iter().copied().tuple_combinations() {
                    let pc = PairCurls::compute(oracle, &visible, i, j)?;
                    for a in 0..v {
                        for b in 0..v {
                            squares += 1;
                            let c = pc.curl(a, b).abs();
                            max_square_curl = max_square_curl.max(c);
                            if witness.is_none() && c >= tol {
                                witness = Some(pc.sample(&visible, a, b));
                            }
                        }
                    }
                }
            }
        }
    }

    let orders_consistent = max_order_gap < tol;
    let squares_consistent = max_square_curl < tol;
    Ok(ConsistencyReport {
        consistent: orders_consistent && squares_consistent,
        tolerance: tol,
        max_order_gap,
        max_square_curl,
        verdicts_agree: orders_consistent == squares_consistent,
        orders_checked: orders.len(),
        squares_checked: squares,
        gap_witness,
        witness,
    })
}

/// Per-pair order-swap KL on a context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairKl {
    pub i: usize,
    pub j: usize,
    pub kl: Estimate,
}

/// Aggregate curl statistics of one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurlScanStats {
    pub ecirc_abs: Estimate,
    pub ecirc_norm: Estimate,
    pub max_curl: f64,
    /// `exhaustive`, `uniform` or `single`: how tuples were selected.
    pub selection: String,
    pub order_swap_kl: Vec<PairKl>,
    /// The largest-|curl| sample seen (first one on ties).
    pub witness: Option<CurlSample>,
}

/// Curl summary of a context: mean absolute and normalized curl, the largest
/// square, and the exact order-swap KL of every block pair.
pub fn curl_scan<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    ctx: &PartialContext,
    plan: &SamplingPlan,
    epsilon: f64,
) -> Result<CurlScanStats> {
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut abs = Vec::new();
    let mut norm = Vec::new();
    let mut witness: Option<CurlSample> = None;
    for_each_planned(oracle, ctx, plan, |s| {
        abs.push(s.value.abs());
        norm.push(normalize(s.value, &s.log_terms, epsilon));
        if witness.as_ref().is_none_or(|w| s.value.abs() > w.value.abs()) {
            witness = Some(s);
        }
    })?;
    let visible = ctx.visible(oracle.positions());
    let mut order_swap_kl = Vec::new();
    for (i, j) in block_pairs(ctx) {
        let pc = PairCurls::compute(oracle, &visible, i, j)?;
        let v = oracle.vocab().size();
        order_swap_kl.push(PairKl { i, j, kl: Estimate::exact(pc.swap_kl(), v * v) });
    }
    Ok(CurlScanStats {
        ecirc_abs: summarize(plan, &abs),
        ecirc_norm: summarize(plan, &norm),
        max_curl: abs.iter().copied().fold(0.0, f64::max),
        selection: match plan {
            SamplingPlan::Exhaustive => "exhaustive",
            SamplingPlan::MonteCarlo { .. } => "uniform",
            SamplingPlan::Single { .. } => "single",
        }
        .to_string(),
        order_swap_kl,
        witness,
    })
}

/// Sum over the pseudo-joint table; 1 for any oracle and order.
pub fn pseudo_joint_total_mass<O: ConditionalOracle + ?Sized>(oracle: &O, spec: &PseudoJointSpec) -> Result<f64> {
    Ok(log_sum_exp(&pseudo_joint_table(oracle, spec)?).exp())
}

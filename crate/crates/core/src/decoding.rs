//! Commit-style decoding: update operators, operator commutators, block
//! schedulers and the parallelism stress harness.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependence::total_correlation;
use crate::error::{cap, contract, Error, Result};
use crate::math::{argmax, spearman, Estimate};
use crate::model::{decode_row_major, Assignment, ConditionalOracle, PartialContext, TabularJointModel};
use crate::order_error::local_estimation_error;
use crate::pseudo_joint::{ecirc_abs, inverse_cdf, PairCurls, SamplingPlan};

/// Largest predictive object (in joint states) the commutator enumerates.
pub const MAX_PREDICTIVE_STATES: usize = 1 << 18;

/// Local update rule `U_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UpdateOperator {
    /// Commit the most probable token (lowest id on ties).
    ArgmaxCommit,
    /// Commit a draw from the conditional, keyed by (seed, position).
    SampleCommit,
    /// Commit the argmax only if its probability is at least `tau`.
    ThresholdCommit { tau: f64 },
}

impl UpdateOperator {
    pub fn validate(&self) -> Result<()> {
        if let UpdateOperator::ThresholdCommit { tau } = *self {
            if !(0.0..=1.0).contains(&tau) {
                return Err(contract(format!("threshold must lie in [0, 1], got {tau}")));
            }
        }
        Ok(())
    }

    /// Token to commit given the conditional and the position's uniform draw.
    pub fn choose(&self, log_probs: &[f64], u: f64) -> Option<usize> {
        match *self {
            UpdateOperator::ArgmaxCommit => Some(argmax(log_probs)),
            UpdateOperator::SampleCommit => Some(inverse_cdf(log_probs, u)),
            UpdateOperator::ThresholdCommit { tau } => {
                let best = argmax(log_probs);
                (log_probs[best].exp() >= tau).then_some(best)
            }
        }
    }
}

/// The uniform variate position `position` consumes under `seed`. The same
/// position gets the same draw on every path.
pub fn position_uniform(seed: u64, position: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng.random()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub position: usize,
    pub token: usize,
    pub operator: UpdateOperator,
    pub round: usize,
}

/// A partially decoded sequence. Committed positions move from the block to
/// the observed set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeState {
    pub context: PartialContext,
    pub positions: usize,
    pub seed: u64,
    pub trajectory: Vec<Commit>,
}

impl DecodeState {
    pub fn new<O: ConditionalOracle + ?Sized>(oracle: &O, context: PartialContext, seed: u64) -> Result<Self> {
        context.validate(oracle.vocab(), oracle.positions())?;
        Ok(Self { context, positions: oracle.positions(), seed, trajectory: Vec::new() })
    }

    pub fn visible(&self) -> Assignment {
        self.context.visible(self.positions)
    }

    pub fn unresolved(&self) -> &[usize] {
        &self.context.block
    }

    pub fn is_done(&self) -> bool {
        self.context.block.is_empty()
    }

    fn commit(&mut self, position: usize, token: usize, operator: UpdateOperator, round: usize) {
        self.context.block.retain(|&p| p != position);
        self.context.observed.insert(position, token);
        self.trajectory.push(Commit { position, token, operator, round });
    }

    /// Tokens at `positions` (all must be committed or observed).
    pub fn tokens_at(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|p| self.context.observed[p]).collect()
    }
}

/// Applies `U_position` to a copy of `state`. A threshold no-op returns the
/// state unchanged.
pub fn apply_update<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    state: &DecodeState,
    operator: UpdateOperator,
    position: usize,
) -> Result<DecodeState> {
    operator.validate()?;
    if !state.context.block.contains(&position) {
        return Err(contract(format!("position {position} is not an unresolved block position")));
    }
    let lp = oracle.log_conditionals(position, &state.visible())?;
    let mut next = state.clone();
    if let Some(token) = operator.choose(&lp, position_uniform(state.seed, position)) {
        let round = state.trajectory.last().map_or(0, |c| c.round + 1);
        next.commit(position, token, operator, round);
    }
    Ok(next)
}

/// Divergence between post-update predictive objects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    #[default]
    SqrtJs,
}

/// Product of per-coordinate conditionals over the compared coordinates.
/// Coordinates already committed on this path are point masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveObject {
    pub committed: Vec<(usize, usize)>,
    pub coordinates: Vec<usize>,
    /// `marginals[k][a] = P(x_{coordinates[k]} = a)`.
    pub marginals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommutatorReport {
    pub i: usize,
    pub j: usize,
    pub divergence: Divergence,
    pub value: f64,
    /// `U_j U_i z`.
    pub path_ij: PredictiveObject,
    /// `U_i U_j z`.
    pub path_ji: PredictiveObject,
}

fn predictive_object<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    start: &DecodeState,
    state: &DecodeState,
    coords: &[usize],
) -> Result<PredictiveObject> {
    let visible = state.visible();
    let v = oracle.vocab().size();
    let mut marginals = Vec::with_capacity(coords.len());
    for &c in coords {
        match visible.get(c) {
            Some(t) => {
                let mut m = vec![0.0; v];
                m[t] = 1.0;
                marginals.push(m);
            }
            None => marginals.push(oracle.log_conditionals(c, &visible)?.iter().map(|l| l.exp()).collect()),
        }
    }
    let committed = state
        .trajectory
        .iter()
        .skip(start.trajectory.len())
        .map(|c| (c.position, c.token))
        .collect();
    Ok(PredictiveObject { committed, coordinates: coords.to_vec(), marginals })
}

/// Jensen-Shannon divergence (nats) of two product distributions, by exact
/// enumeration of the joint states.
pub fn product_js(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(contract("product distributions must share a non-empty coordinate set"));
    }
    let v = p[0].len();
    let n = v
        .checked_pow(p.len() as u32)
        .filter(|&n| n <= MAX_PREDICTIVE_STATES)
        .ok_or_else(|| cap("predictive object too large to enumerate"))?;
    let mut tokens = vec![0; p.len()];
    let mut js = 0.0;
    for flat in 0..n {
        decode_row_major(flat, v, &mut tokens);
        let pp: f64 = tokens.iter().enumerate().map(|(k, &t)| p[k][t]).product();
        let qq: f64 = tokens.iter().enumerate().map(|(k, &t)| q[k][t]).product();
        let m = 0.5 * (pp + qq);
        if pp > 0.0 {
            js += 0.5 * pp * (pp / m).ln();
        }
        if qq > 0.0 {
            js += 0.5 * qq * (qq / m).ln();
        }
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// `D(P(·|U_j U_i z), P(·|U_i U_j z))` with `D = √JS`.
///
/// The predictive object covers every block coordinate left unresolved on
/// either path; a coordinate committed on only one path enters that path's
/// product as a point mass.
pub fn commutator<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    state: &DecodeState,
    operator: UpdateOperator,
    i: usize,
    j: usize,
    divergence: Divergence,
) -> Result<CommutatorReport> {
    if i == j {
        return Err(contract("commutator needs two distinct positions"));
    }
    let z_ij = apply_update(oracle, &apply_update(oracle, state, operator, i)?, operator, j)?;
    let z_ji = apply_update(oracle, &apply_update(oracle, state, operator, j)?, operator, i)?;
    let coords: Vec<usize> = state
        .unresolved()
        .iter()
        .copied()
        .filter(|p| z_ij.unresolved().contains(p) || z_ji.unresolved().contains(p))
        .sorted()
        .collect();
    if coords.is_empty() {
        return Err(Error::DegenerateComparison { i, j });
    }
    let path_ij = predictive_object(oracle, state, &z_ij, &coords)?;
    let path_ji = predictive_object(oracle, state, &z_ji, &coords)?;
    let value = match divergence {
        Divergence::SqrtJs => product_js(&path_ij.marginals, &path_ji.marginals)?.sqrt(),
    };
    Ok(CommutatorReport { i, j, divergence, value, path_ij, path_ji })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictScore {
    pub value: f64,
    pub pairs: Vec<(usize, usize, f64)>,
    /// Pairs whose commits exhaust the state's unresolved set.
    pub excluded: Vec<(usize, usize)>,
}

/// `Σ_{i<j ∈ B} Comm_ij` over a candidate block.
pub fn conflict_score<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    state: &DecodeState,
    operator: UpdateOperator,
    block: &[usize],
) -> Result<ConflictScore> {
    if block.len() < 2 {
        return Err(contract("conflict score needs at least two positions"));
    }
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for (i, j) in block.iter().copied().sorted().tuple_combinations() {
        match commutator(oracle, state, operator, i, j, Divergence::SqrtJs) {
            Ok(r) => pairs.push((i, j, r.value)),
            Err(Error::DegenerateComparison { .. }) => excluded.push((i, j)),
            Err(e) => return Err(e),
        }
    }
    Ok(ConflictScore { value: pairs.iter().map(|p| p.2).sum(), pairs, excluded })
}

/// Mutual information between `x_i` and `x_j` under the oracle's two-step
/// pseudo-joint `Q^{i→j}`.
pub fn oracle_pair_mi<O: ConditionalOracle + ?Sized>(oracle: &O, visible: &Assignment, i: usize, j: usize) -> Result<f64> {
    let pc = PairCurls::compute(oracle, visible, i, j)?;
    let v = oracle.vocab().size();
    let mut qj = vec![0.0; v];
    for a in 0..v {
        for (b, slot) in qj.iter_mut().enumerate() {
            *slot += pc.log_q_forward(a, b).exp();
        }
    }
    let mut mi = 0.0;
    for a in 0..v {
        for (b, &qjb) in qj.iter().enumerate() {
            let l = pc.log_q_forward(a, b);
            mi += l.exp() * (l - pc.log_qi[a] - qjb.ln());
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSearch {
    /// Windows of consecutive unresolved positions.
    #[default]
    Contiguous,
    /// Every subset of the right size (falls back to contiguous above 8).
    AllSubsets,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Scheduler {
    LeftToRight,
    Random {
        seed: u64,
    },
    Confidence,
    ConflictAware {
        #[serde(default = "default_weight")]
        lambda_confidence: f64,
        #[serde(default = "default_weight")]
        lambda_conflict: f64,
        #[serde(default = "default_weight")]
        lambda_dependence: f64,
        #[serde(default)]
        search: BlockSearch,
    },
}

impl Scheduler {
    pub fn conflict_aware() -> Self {
        Scheduler::ConflictAware {
            lambda_confidence: 1.0,
            lambda_conflict: 1.0,
            lambda_dependence: 1.0,
            search: BlockSearch::Contiguous,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scheduler::LeftToRight => "left-to-right",
            Scheduler::Random { .. } => "random",
            Scheduler::Confidence => "confidence",
            Scheduler::ConflictAware { .. } => "conflict-aware",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub selected: Vec<usize>,
    pub committed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub state: DecodeState,
    pub rounds: Vec<Round>,
}

fn max_prob<O: ConditionalOracle + ?Sized>(oracle: &O, visible: &Assignment, p: usize) -> Result<f64> {
    Ok(oracle.log_conditionals(p, visible)?.into_iter().fold(f64::NEG_INFINITY, f64::max).exp())
}

fn select_block<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    state: &DecodeState,
    scheduler: &Scheduler,
    operator: UpdateOperator,
    width: usize,
    random_order: &[usize],
) -> Result<Vec<usize>> {
    let unresolved: Vec<usize> = state.unresolved().iter().copied().sorted().collect();
    let k = width.min(unresolved.len());
    let visible = state.visible();
    match *scheduler {
        Scheduler::LeftToRight => Ok(unresolved[..k].to_vec()),
        Scheduler::Random { .. } => Ok(random_order
            .iter()
            .copied()
            .filter(|p| unresolved.contains(p))
            .take(k)
            .collect()),
        Scheduler::Confidence => {
            let mut scored = unresolved
                .iter()
                .map(|&p| Ok((p, max_prob(oracle, &visible, p)?)))
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            Ok(scored.into_iter().take(k).map(|(p, _)| p).collect())
        }
        Scheduler::ConflictAware { lambda_confidence, lambda_conflict, lambda_dependence, search } => {
            let candidates: Vec<Vec<usize>> = match search {
                BlockSearch::AllSubsets if unresolved.len() <= 8 => {
                    unresolved.iter().copied().combinations(k).collect()
                }
                _ => unresolved.windows(k).map(<[usize]>::to_vec).collect(),
            };
            let mut best: Option<(f64, Vec<usize>)> = None;
            for block in candidates {
                let confidence = block
                    .iter()
                    .map(|&p| max_prob(oracle, &visible, p))
                    .sum::<Result<f64>>()?
                    / block.len() as f64;
                let (conflict, dependence) = if block.len() >= 2 {
                    let conflict = conflict_score(oracle, state, operator, &block)?.value;
                    let dependence = block
                        .iter()
                        .copied()
                        .tuple_combinations()
                        .map(|(i, j)| oracle_pair_mi(oracle, &visible, i, j))
                        .sum::<Result<f64>>()?;
                    (conflict, dependence)
                } else {
                    (0.0, 0.0)
                };
                let score = -lambda_confidence * confidence + lambda_conflict * conflict + lambda_dependence * dependence;
                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                    best = Some((score, block));
                }
            }
            Ok(best.map(|(_, b)| b).unwrap_or_default())
        }
    }
}

/// Decodes every unresolved position, `width` per round.
///
/// All commits of a round use the conditionals at the start of the round.
/// If a threshold operator commits nothing in a round, the most confident
/// selected position is committed by argmax so decoding always progresses.
pub fn run_scheduler<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    initial: &DecodeState,
    scheduler: &Scheduler,
    operator: UpdateOperator,
    width: usize,
) -> Result<DecodeOutcome> {
    if width == 0 {
        return Err(contract("parallelism width must be at least 1"));
    }
    operator.validate()?;
    let random_order = match *scheduler {
        Scheduler::Random { seed } => {
            let mut order: Vec<usize> = initial.unresolved().iter().copied().sorted().collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ initial.seed.rotate_left(17)));
            order
        }
        _ => Vec::new(),
    };
    let mut state = initial.clone();
    let mut rounds = Vec::new();
    while !state.is_done() {
        let selected = select_block(oracle, &state, scheduler, operator, width, &random_order)?;
        let visible = state.visible();
        let mut picks = Vec::with_capacity(selected.len());
        for &p in &selected {
            let lp = oracle.log_conditionals(p, &visible)?;
            picks.push((p, operator.choose(&lp, position_uniform(state.seed, p)), lp));
        }
        if picks.iter().all(|(_, t, _)| t.is_none()) {
            let (p, _, lp) = picks
                .iter()
                .max_by(|x, y| {
                    let mx = x.2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let my = y.2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    mx.total_cmp(&my).then(y.0.cmp(&x.0))
                })
                .expect("non-empty selection")
                .clone();
            picks = vec![(p, Some(argmax(&lp)), lp)];
        }
        let round = rounds.len();
        let mut committed = Vec::new();
        for (p, token, _) in picks {
            if let Some(t) = token {
                state.commit(p, t, operator, round);
                committed.push(p);
            }
        }
        rounds.push(Round { selected, committed });
    }
    Ok(DecodeOutcome { state, rounds })
}

/// SplitMix64 mixing, used to derive independent per-run seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressConfig {
    pub operator: UpdateOperator,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub context_id: usize,
    pub scheduler: String,
    pub width: usize,
    /// Mean `−log p(x_B | x_S)` of decoded outputs.
    pub nll: f64,
    pub nll_std_err: f64,
    /// `nll − nll at width 1` for the same scheduler and context.
    pub degradation: f64,
    pub ecirc_abs: f64,
    pub tc: f64,
    pub mean_eps: f64,
    pub conflict: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorCorrelation {
    pub predictor: String,
    /// Spearman correlation with degradation over rows of width > 1;
    /// `None` when undefined (constant inputs or fewer than two rows).
    pub spearman: Option<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub runs: usize,
    pub seed: u64,
    pub rows: Vec<StressRow>,
    pub correlations: Vec<PredictorCorrelation>,
}

struct ContextPredictors {
    ecirc_abs: f64,
    tc: f64,
    mean_eps: f64,
    conflict: f64,
}

fn context_predictors<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
    operator: UpdateOperator,
    seed: u64,
) -> Result<ContextPredictors> {
    let visible = ctx.visible(oracle.positions());
    let ecirc = if ctx.block.len() >= 2 { ecirc_abs(oracle, ctx, &SamplingPlan::Exhaustive)?.mean } else { 0.0 };
    let eps: f64 = ctx
        .block
        .iter()
        .map(|&i| local_estimation_error(oracle, joint, &visible, i))
        .sum::<Result<f64>>()?;
    let conflict = if ctx.block.len() >= 2 {
        let state = DecodeState::new(oracle, ctx.clone(), seed)?;
        conflict_score(oracle, &state, operator, &ctx.block)?.value
    } else {
        0.0
    };
    Ok(ContextPredictors {
        ecirc_abs: ecirc,
        tc: total_correlation(joint, ctx)?,
        mean_eps: eps / ctx.block.len() as f64,
        conflict,
    })
}

/// Mean NLL under the true joint of decoded outputs, over `runs` seeded runs.
#[allow(clippy::too_many_arguments)]
pub fn decoded_nll<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
    scheduler: &Scheduler,
    operator: UpdateOperator,
    width: usize,
    runs: usize,
    seed: u64,
) -> Result<Estimate> {
    let dist = joint.block_distribution(ctx)?;
    let nlls = (0..runs)
        .into_par_iter()
        .map(|r| {
            let state = DecodeState::new(oracle, ctx.clone(), derive_seed(seed, &[r as u64]))?;
            let out = run_scheduler(oracle, &state, scheduler, operator, width)?;
            let tokens = out.state.tokens_at(&ctx.block);
            Ok(-dist.log_probs[dist.flat_index(&tokens)])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&nlls))
}

/// Decodes every (context, scheduler, width) cell and relates degradation to
/// the curl, TC, local-error and conflict predictors of each context.
type Predictor = (&'static str, fn(&StressRow) -> f64);

pub fn stress_test<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    contexts: &[PartialContext],
    widths: &[usize],
    schedulers: &[Scheduler],
    config: &StressConfig,
) -> Result<StressReport> {
    if config.runs == 0 {
        return Err(contract("stress test needs at least one run per cell"));
    }
    let mut rows = Vec::new();
    for (cid, ctx) in contexts.iter().enumerate() {
        ctx.validate(oracle.vocab(), oracle.positions())?;
        if let Some(&w) = widths.iter().find(|&&w| w == 0 || w > ctx.block.len()) {
            return Err(contract(format!("width {w} outside 1..={} for context {cid}", ctx.block.len())));
        }
        let ctx_seed = derive_seed(config.seed, &[cid as u64]);
        let predictors = context_predictors(oracle, joint, ctx, config.operator, ctx_seed)?;
        for scheduler in schedulers {
            let nll_at = |w: usize| decoded_nll(oracle, joint, ctx, scheduler, config.operator, w, config.runs, ctx_seed);
            let base = nll_at(1)?;
            let baseline = base.mean;
            for &w in widths {
                let nll = if w == 1 { base } else { nll_at(w)? };
                rows.push(StressRow {
                    context_id: cid,
                    scheduler: scheduler.label().to_string(),
                    width: w,
                    nll: nll.mean,
                    nll_std_err: nll.std_err,
                    degradation: nll.mean - baseline,
                    ecirc_abs: predictors.ecirc_abs,
                    tc: predictors.tc,
                    mean_eps: predictors.mean_eps,
                    conflict: predictors.conflict,
                });
            }
        }
    }
    let parallel: Vec<&StressRow> = rows.iter().filter(|r| r.width > 1).collect();
    let degradation: Vec<f64> = parallel.iter().map(|r| r.degradation).collect();
    let predictors: [Predictor; 4] = [
        ("ecirc_abs", |r| r.ecirc_abs),
        ("tc", |r| r.tc),
        ("mean_eps", |r| r.mean_eps),
        ("conflict", |r| r.conflict),
    ];
    let correlations = predictors
        .iter()
        .map(|(name, f)| {
            let xs: Vec<f64> = parallel.iter().map(|r| f(r)).collect();
            PredictorCorrelation { predictor: name.to_string(), spearman: spearman(&xs, &degradation), rows: xs.len() }
        })
        .collect();
    Ok(StressReport { runs: config.runs, seed: config.seed, rows, correlations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogitTable;

    fn single_position(p0: f64) -> TabularJointModel {
        TabularJointModel::from_probs(2, 2, &[p0 * 0.5, p0 * 0.5, (1.0 - p0) * 0.5, (1.0 - p0) * 0.5]).unwrap()
    }

    #[test]
    fn argmax_and_threshold_on_a_seventy_thirty_conditional() {
        let lp = [0.7f64.ln(), 0.3f64.ln()];
        assert_eq!(UpdateOperator::ArgmaxCommit.choose(&lp, 0.99), Some(0));
        assert_eq!(UpdateOperator::ThresholdCommit { tau: 0.9 }.choose(&lp, 0.0), None);
        assert_eq!(UpdateOperator::ThresholdCommit { tau: 0.7 }.choose(&lp, 0.0), Some(0));
        assert_eq!(UpdateOperator::SampleCommit.choose(&lp, 0.69), Some(0));
        assert_eq!(UpdateOperator::SampleCommit.choose(&lp, 0.71), Some(1));
    }

    #[test]
    fn threshold_no_op_leaves_state_untouched() {
        let joint = single_position(0.7);
        let state = DecodeState::new(&joint, PartialContext::full_block(2), 1).unwrap();
        let next = apply_update(&joint, &state, UpdateOperator::ThresholdCommit { tau: 0.9 }, 0).unwrap();
        assert_eq!(next, state);
        let next = apply_update(&joint, &state, UpdateOperator::ArgmaxCommit, 0).unwrap();
        assert_eq!(next.context.observed[&0], 0);
        assert!(apply_update(&joint, &next, UpdateOperator::ArgmaxCommit, 0).is_err());
    }

    #[test]
    fn sample_commit_is_deterministic_per_seed() {
        let joint = TabularJointModel::uniform(4, 2).unwrap();
        let state = DecodeState::new(&joint, PartialContext::full_block(2), 99).unwrap();
        let a = apply_update(&joint, &state, UpdateOperator::SampleCommit, 1).unwrap();
        let b = apply_update(&joint, &state, UpdateOperator::SampleCommit, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhausted_block_is_a_degenerate_comparison() {
        let joint = TabularJointModel::uniform(2, 2).unwrap();
        let state = DecodeState::new(&joint, PartialContext::full_block(2), 0).unwrap();
        let err = commutator(&joint, &state, UpdateOperator::ArgmaxCommit, 0, 1, Divergence::SqrtJs);
        assert!(matches!(err, Err(Error::DegenerateComparison { i: 0, j: 1 })));
        let c = conflict_score(&joint, &state, UpdateOperator::ArgmaxCommit, &[0, 1]).unwrap();
        assert_eq!(c.excluded, vec![(0, 1)]);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn js_of_disjoint_point_masses_is_ln2() {
        let p = vec![vec![1.0, 0.0]];
        let q = vec![vec![0.0, 1.0]];
        assert!((product_js(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(product_js(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn left_to_right_commits_in_index_order() {
        let oracle = LogitTable::zeros(3, 4).unwrap();
        let ctx = PartialContext::new(Default::default(), vec![3, 0, 2, 1]).unwrap();
        let state = DecodeState::new(&oracle, ctx, 5).unwrap();
        let out = run_scheduler(&oracle, &state, &Scheduler::LeftToRight, UpdateOperator::SampleCommit, 1).unwrap();
        let order: Vec<usize> = out.state.trajectory.iter().map(|c| c.position).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert!(run_scheduler(&oracle, &state, &Scheduler::LeftToRight, UpdateOperator::SampleCommit, 0).is_err());
    }

    #[test]
    fn confidence_picks_the_sharpest_position() {
        let joint = TabularJointModel::from_probs(2, 2, &[0.45, 0.45, 0.05, 0.05]).unwrap();
        let state = DecodeState::new(&joint, PartialContext::full_block(2), 0).unwrap();
        let out = run_scheduler(&joint, &state, &Scheduler::Confidence, UpdateOperator::ArgmaxCommit, 1).unwrap();
        assert_eq!(out.rounds[0].selected, vec![0]);
    }

    #[test]
    fn threshold_scheduler_still_terminates() {
        let oracle = LogitTable::zeros(2, 3).unwrap();
        let state = DecodeState::new(&oracle, PartialContext::full_block(3), 0).unwrap();
        let out = run_scheduler(&oracle, &state, &Scheduler::LeftToRight, UpdateOperator::ThresholdCommit { tau: 0.99 }, 2)
            .unwrap();
        assert!(out.state.is_done());
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}

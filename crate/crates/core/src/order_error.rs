//! Order-specific cross-entropy and its per-step KL decomposition.
//!
//! For an order `π` the expected negative log pseudo-joint under the data
//! splits into the block's conditional entropy plus `KL(p ‖ Q^π)`, and that
//! KL in turn is the sum over steps of the expected local estimation error
//! `ε_{π_m}(C)` at the contexts the order induces.

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::math::{entropy_from_log, kl_from_log, log_softmax};
use crate::model::{decode_row_major, ConditionalOracle, PartialContext, TabularJointModel};
use crate::pseudo_joint::{check_permutation, pseudo_joint_table, PseudoJointSpec};

/// Tolerance of the cross-entropy and chain identities.
pub const ORDER_IDENTITY_TOL: f64 = 1e-10;
/// Largest number of candidate orders [`rank_orders`] accepts.
pub const MAX_CANDIDATE_ORDERS: usize = 120;

/// Context type of one decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratum {
    /// Conditioning set is exactly the block positions before the target.
    PrefixLike,
    RandomMask,
    /// Oracle conditional entropy above the median step (overlaps the others).
    HighEntropy,
}

impl Stratum {
    pub fn label(self) -> &'static str {
        match self {
            Stratum::PrefixLike => "prefix-like",
            Stratum::RandomMask => "random-mask",
            Stratum::HighEntropy => "high-entropy",
        }
    }
}

/// One step of an order: which position is resolved given which block
/// positions, with its expected local error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub position: usize,
    pub conditioning: Vec<usize>,
    /// `E_p[ε_position(x_S, x_conditioning)]`.
    pub kl: f64,
    /// `E_p[H(q(·|context))]`.
    pub oracle_entropy: f64,
    pub prefix_like: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderErrorProfile {
    pub order: Vec<usize>,
    pub cross_entropy: f64,
    pub conditional_entropy: f64,
    /// `KL(p ‖ Q^π)` computed directly from the pseudo-joint.
    pub kl_total: f64,
    pub per_step_kl: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Mean per-step KL by stratum label.
    pub context_strata: BTreeMap<String, f64>,
}

/// `KL(p(X_i|C) ‖ q(X_i|C))` at one visible context `C`.
pub fn local_estimation_error<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    visible: &crate::model::Assignment,
    i: usize,
) -> Result<f64> {
    let p = joint.log_conditionals(i, visible)?;
    let q = oracle.log_conditionals(i, visible)?;
    Ok(kl_from_log(&p, &q).max(0.0))
}

fn is_prefix_like(block: &[usize], position: usize, conditioning: &[usize]) -> bool {
    let mut expected: Vec<usize> = block.iter().copied().filter(|&b| b < position).collect();
    let mut got = conditioning.to_vec();
    expected.sort_unstable();
    got.sort_unstable();
    expected == got
}

/// Exact order profile: cross-entropy, conditional entropy, `KL(p ‖ Q^π)`,
/// and the per-step expected local errors. Fails if either identity is off
/// by more than [`ORDER_IDENTITY_TOL`].
pub fn order_cross_entropy<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
    order: &[usize],
) -> Result<OrderErrorProfile> {
    ctx.validate(oracle.vocab(), oracle.positions())?;
    check_permutation(&ctx.block, order)?;
    let dist = joint.block_distribution(ctx)?;
    let spec = PseudoJointSpec { context: ctx.clone(), order: order.to_vec() };
    let log_q = pseudo_joint_table(oracle, &spec)?;

    let mut cross_entropy = 0.0;
    let mut kl_total = 0.0;
    for (lp, lq) in dist.log_probs.iter().zip(&log_q) {
        cross_entropy -= lp.exp() * lq;
        kl_total += lp.exp() * (lp - lq);
    }
    let conditional_entropy = entropy_from_log(&dist.log_probs);

    let v = oracle.vocab().size();
    let slot = |pos: usize| ctx.block.iter().position(|&b| b == pos).unwrap();
    let mut steps = Vec::with_capacity(order.len());
    for (m, &pos) in order.iter().enumerate() {
        let prefix = &order[..m];
        let coords: Vec<usize> = prefix.iter().map(|&p| slot(p)).collect();
        let mut with_target = coords.clone();
        with_target.push(slot(pos));
        let prefix_marginal = dist.marginal(&coords);
        let joint_marginal = dist.marginal(&with_target);
        let mut tokens = vec![0; m];
        let (mut kl, mut oracle_entropy) = (0.0, 0.0);
        for (flat, &lw) in prefix_marginal.iter().enumerate() {
            decode_row_major(flat, v, &mut tokens);
            let mut visible = ctx.visible(oracle.positions());
            for (&p, &t) in prefix.iter().zip(&tokens) {
                visible.set(p, t);
            }
            let p_cond = log_softmax(&joint_marginal[flat * v..(flat + 1) * v]);
            let q_cond = oracle.log_conditionals(pos, &visible)?;
            let w = lw.exp();
            kl += w * kl_from_log(&p_cond, &q_cond);
            oracle_entropy += w * entropy_from_log(&q_cond);
        }
        steps.push(StepRecord {
            position: pos,
            conditioning: prefix.to_vec(),
            kl: kl.max(0.0),
            oracle_entropy,
            prefix_like: is_prefix_like(&ctx.block, pos, prefix),
        });
    }
    let per_step_kl: Vec<f64> = steps.iter().map(|s| s.kl).collect();

    let chain: f64 = per_step_kl.iter().sum();
    if (cross_entropy - conditional_entropy - kl_total).abs() > ORDER_IDENTITY_TOL {
        return Err(Error::Numerical(format!(
            "cross-entropy {cross_entropy} ≠ entropy {conditional_entropy} + KL {kl_total}"
        )));
    }
    if (kl_total - chain).abs() > ORDER_IDENTITY_TOL {
        return Err(Error::Numerical(format!("KL {kl_total} ≠ Σ per-step KL {chain}")));
    }

    let context_strata = strata_means(std::slice::from_ref(&steps))
        .into_iter()
        .filter_map(|row| row.mean_kl.map(|m| (row.stratum.label().to_string(), m)))
        .collect();
    Ok(OrderErrorProfile {
        order: order.to_vec(),
        cross_entropy,
        conditional_entropy,
        kl_total: kl_total.max(0.0),
        per_step_kl,
        steps,
        context_strata,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedOrder {
    pub rank: usize,
    pub order: Vec<usize>,
    pub kl_total: f64,
    pub cross_entropy: f64,
}

/// Resolution at which `kl_total` values count as tied.
const RANK_RESOLUTION: f64 = 1e-12;

/// Profiles each candidate (all orders when `None`) and sorts ascending by
/// `kl_total`, ties broken lexicographically by order.
pub fn rank_orders<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
    candidates: Option<&[Vec<usize>]>,
) -> Result<Vec<RankedOrder>> {
    let candidates: Vec<Vec<usize>> = match candidates {
        Some(c) => c.to_vec(),
        None => {
            if ctx.block.len() > 5 {
                return Err(crate::error::cap("enumerating all orders needs |B| ≤ 5"));
            }
            let mut block = ctx.block.clone();
            block.sort_unstable();
            block.iter().copied().permutations(block.len()).collect()
        }
    };
    if candidates.is_empty() {
        return Err(contract("no candidate orders"));
    }
    if candidates.len() > MAX_CANDIDATE_ORDERS {
        return Err(crate::error::cap(format!(
            "{} candidate orders exceed the cap of {MAX_CANDIDATE_ORDERS}",
            candidates.len()
        )));
    }
    let mut ranked = candidates
        .iter()
        .map(|order| {
            let p = order_cross_entropy(oracle, joint, ctx, order)?;
            Ok(RankedOrder { rank: 0, order: p.order, kl_total: p.kl_total, cross_entropy: p.cross_entropy })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|x, y| {
        let kx = (x.kl_total / RANK_RESOLUTION).round();
        let ky = (y.kl_total / RANK_RESOLUTION).round();
        kx.total_cmp(&ky).then_with(|| x.order.cmp(&y.order))
    });
    for (k, r) in ranked.iter_mut().enumerate() {
        r.rank = k + 1;
    }
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub stratum: Stratum,
    pub count: usize,
    /// `None` when the stratum is empty.
    pub mean_kl: Option<f64>,
}

fn strata_means(step_sets: &[Vec<StepRecord>]) -> Vec<StratumRow> {
    let all: Vec<&StepRecord> = step_sets.iter().flatten().collect();
    let mut entropies: Vec<f64> = all.iter().map(|s| s.oracle_entropy).collect();
    entropies.sort_by(f64::total_cmp);
    let median = match entropies.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => entropies[n / 2],
        n => 0.5 * (entropies[n / 2 - 1] + entropies[n / 2]),
    };
    let row = |stratum: Stratum, pick: &dyn Fn(&StepRecord) -> bool| {
        let kls: Vec<f64> = all.iter().filter(|s| pick(s)).map(|s| s.kl).collect();
        StratumRow {
            stratum,
            count: kls.len(),
            mean_kl: if kls.is_empty() { None } else { Some(kls.iter().sum::<f64>() / kls.len() as f64) },
        }
    };
    vec![
        row(Stratum::PrefixLike, &|s| s.prefix_like),
        row(Stratum::RandomMask, &|s| !s.prefix_like),
        row(Stratum::HighEntropy, &|s| s.oracle_entropy > median),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataReport {
    pub total_steps: usize,
    pub rows: Vec<StratumRow>,
}

impl StrataReport {
    pub fn mean(&self, stratum: Stratum) -> Option<f64> {
        self.rows.iter().find(|r| r.stratum == stratum).and_then(|r| r.mean_kl)
    }
}

/// Mean per-step KL by stratum over every step of the given profiles.
/// Prefix-like and random-mask partition the steps; high-entropy overlaps.
pub fn stratify_contexts(profiles: &[OrderErrorProfile]) -> StrataReport {
    let steps: Vec<Vec<StepRecord>> = profiles.iter().map(|p| p.steps.clone()).collect();
    StrataReport { total_steps: steps.iter().map(Vec::len).sum(), rows: strata_means(&steps) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Assignment, LogitTable};

    #[test]
    fn uniform_oracle_against_point_mass_costs_log_v() {
        let mut probs = vec![0.0; 4];
        probs[2] = 1.0;
        let joint = TabularJointModel::from_probs(4, 1, &probs).unwrap();
        let uniform = LogitTable::zeros(4, 1).unwrap();
        let eps = local_estimation_error(&uniform, &joint, &Assignment::masked(1), 0).unwrap();
        assert!((eps - 4f64.ln()).abs() < 1e-9);
        assert!(local_estimation_error(&joint, &joint, &Assignment::masked(1), 0).unwrap() < 1e-15);
    }

    #[test]
    fn prefix_like_classification() {
        assert!(is_prefix_like(&[1, 2, 3], 3, &[2, 1]));
        assert!(is_prefix_like(&[1, 2, 3], 1, &[]));
        assert!(!is_prefix_like(&[1, 2, 3], 2, &[3]));
        assert!(!is_prefix_like(&[1, 2, 3], 3, &[]));
    }

    #[test]
    fn bayes_orders_tie_and_sort_lexicographically() {
        let joint = TabularJointModel::new(2, 3, (0..8).map(|k| (k as f64 * 1.3).cos()).collect()).unwrap();
        let ctx = PartialContext::full_block(3);
        let ranked = rank_orders(&joint, &joint, &ctx, None).unwrap();
        assert_eq!(ranked.len(), 6);
        for w in ranked.windows(2) {
            assert!(w[0].order < w[1].order);
        }
        assert!(ranked.iter().all(|r| r.kl_total < 1e-12));
        assert!(rank_orders(&joint, &joint, &ctx, Some(&[])).is_err());
    }

    #[test]
    fn strata_partition_steps() {
        let joint = TabularJointModel::new(2, 3, (0..8).map(|k| (k as f64 * 0.7).sin()).collect()).unwrap();
        let oracle = LogitTable::zeros(2, 3).unwrap();
        let ctx = PartialContext::full_block(3);
        let profiles: Vec<_> = [[0, 1, 2], [2, 1, 0], [1, 0, 2]]
            .iter()
            .map(|o| order_cross_entropy(&oracle, &joint, &ctx, o).unwrap())
            .collect();
        let report = stratify_contexts(&profiles);
        let prefix = report.rows.iter().find(|r| r.stratum == Stratum::PrefixLike).unwrap();
        let random = report.rows.iter().find(|r| r.stratum == Stratum::RandomMask).unwrap();
        assert_eq!(prefix.count + random.count, report.total_steps);
        assert_eq!(report.total_steps, 9);
    }

    #[test]
    fn empty_stratum_is_absent() {
        let joint = TabularJointModel::uniform(2, 2).unwrap();
        let ctx = PartialContext::full_block(2);
        let p = order_cross_entropy(&joint, &joint, &ctx, &[0, 1]).unwrap();
        assert!(!p.context_strata.contains_key("random-mask"));
        assert_eq!(p.context_strata["prefix-like"], 0.0);
    }
}

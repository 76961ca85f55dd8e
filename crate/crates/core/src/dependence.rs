//! Conditional total correlation, the independent-parallel gap and pairwise
//! conditional mutual information, all by exact enumeration over a
//! reference joint.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{entropy_from_log, kl_from_log};
use crate::model::{ConditionalOracle, PartialContext, TabularJointModel};

/// Agreement required between the KL and entropy forms of TC.
pub const TC_IDENTITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCmi {
    pub i: usize,
    pub j: usize,
    pub cmi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub tc: f64,
    pub sum_marginal_entropies: f64,
    pub joint_entropy: f64,
    /// `KL(p(x_B|x_S) ‖ Π_i q(x_i|x_S))` for the oracle under diagnosis.
    pub independent_parallel_kl: f64,
    pub pairwise_cmi: Vec<PairCmi>,
    pub sum_pairwise_cmi: f64,
}

/// Both forms of the conditional total correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalCorrelation {
    pub kl_form: f64,
    pub entropy_form: f64,
    pub sum_marginal_entropies: f64,
    pub joint_entropy: f64,
}

/// `TC(X_B | X_S)` computed as a KL and as an entropy difference.
pub fn total_correlation_forms(joint: &TabularJointModel, ctx: &PartialContext) -> Result<TotalCorrelation> {
    let dist = joint.block_distribution(ctx)?;
    let marginals: Vec<Vec<f64>> = (0..dist.block.len()).map(|k| dist.marginal(&[k])).collect();
    let mut kl_form = 0.0;
    for (flat, &lp) in dist.log_probs.iter().enumerate() {
        let product: f64 = dist.tokens(flat).iter().enumerate().map(|(k, &t)| marginals[k][t]).sum();
        kl_form += lp.exp() * (lp - product);
    }
    let sum_marginal_entropies: f64 = marginals.iter().map(|m| entropy_from_log(m)).sum();
    let joint_entropy = entropy_from_log(&dist.log_probs);
    Ok(TotalCorrelation {
        kl_form,
        entropy_form: sum_marginal_entropies - joint_entropy,
        sum_marginal_entropies,
        joint_entropy,
    })
}

/// Conditional total correlation (nats), KL form. Fails if the entropy form
/// disagrees by more than [`TC_IDENTITY_TOL`].
pub fn total_correlation(joint: &TabularJointModel, ctx: &PartialContext) -> Result<f64> {
    let tc = total_correlation_forms(joint, ctx)?;
    if (tc.kl_form - tc.entropy_form).abs() > TC_IDENTITY_TOL {
        return Err(Error::Numerical(format!(
            "TC forms disagree: KL {} vs entropy {}",
            tc.kl_form, tc.entropy_form
        )));
    }
    Ok(tc.kl_form.max(0.0))
}

/// `KL(p(x_B|x_S) ‖ Π_{i∈B} q(x_i|x_S))` with `p` from the joint and `q`
/// from the oracle.
pub fn independent_parallel_gap<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
) -> Result<f64> {
    let dist = joint.block_distribution(ctx)?;
    let visible = ctx.visible(oracle.positions());
    let q: Vec<Vec<f64>> = ctx
        .block
        .iter()
        .map(|&i| oracle.log_conditionals(i, &visible))
        .collect::<Result<_>>()?;
    let mut kl = 0.0;
    for (flat, &lp) in dist.log_probs.iter().enumerate() {
        let lq: f64 = dist.tokens(flat).iter().enumerate().map(|(k, &t)| q[k][t]).sum();
        if !lq.is_finite() {
            return Err(Error::Numerical("oracle assigns zero mass where p > 0".into()));
        }
        kl += lp.exp() * (lp - lq);
    }
    Ok(kl.max(0.0))
}

/// `I(X_i; X_j | X_S)` for every unordered pair of block positions.
pub fn pairwise_cmi(joint: &TabularJointModel, ctx: &PartialContext) -> Result<Vec<PairCmi>> {
    let dist = joint.block_distribution(ctx)?;
    let mut order: Vec<usize> = (0..dist.block.len()).collect();
    order.sort_by_key(|&k| dist.block[k]);
    let mut out = Vec::new();
    for (ki, kj) in order.into_iter().tuple_combinations() {
        let pair = dist.marginal(&[ki, kj]);
        let mi = dist.marginal(&[ki]);
        let mj = dist.marginal(&[kj]);
        let v = dist.vocab.size();
        let product: Vec<f64> = (0..v * v).map(|f| mi[f / v] + mj[f % v]).collect();
        out.push(PairCmi { i: dist.block[ki], j: dist.block[kj], cmi: kl_from_log(&pair, &product).max(0.0) });
    }
    Ok(out)
}

/// Full dependence section for one context.
pub fn dependence_report<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    ctx: &PartialContext,
) -> Result<DependenceReport> {
    let forms = total_correlation_forms(joint, ctx)?;
    let tc = total_correlation(joint, ctx)?;
    let pairwise = pairwise_cmi(joint, ctx)?;
    Ok(DependenceReport {
        tc,
        sum_marginal_entropies: forms.sum_marginal_entropies,
        joint_entropy: forms.joint_entropy,
        independent_parallel_kl: independent_parallel_gap(oracle, joint, ctx)?,
        sum_pairwise_cmi: pairwise.iter().map(|p| p.cmi).sum(),
        pairwise_cmi: pairwise,
    })
}

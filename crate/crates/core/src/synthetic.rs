//! Controlled model zoo: synthetic joints with tunable dependence, and a
//! tabular trainer whose mask-pattern coverage and curl penalty control how
//! compatible the learned conditionals are.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::math::{log_softmax, log_sum_exp};
use crate::model::{
    check_caps, decode_row_major, Assignment, ConditionalOracle, LogitTable, PartialContext, TabularJointModel,
    Vocabulary,
};
use crate::pseudo_joint::{ecirc_abs, SamplingPlan, DEFAULT_EPSILON};

fn default_components() -> usize {
    3
}

/// Dependence structure of a synthetic joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    /// First-order Markov chain; `beta = 0` gives independent positions.
    Chain { beta: f64 },
    /// Mixture of i.i.d. components; invariant under position permutations.
    Exchangeable {
        #[serde(default = "default_components")]
        components: usize,
    },
    /// Copy/independent mixture with copy weight `1 − 2^-level`; TC grows
    /// with `level`.
    TcLadder { level: u32 },
    /// Explicit log-mass table, row-major.
    CustomTable { log_mass: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub family: Family,
    pub positions: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Builds the joint a task spec describes. Identical specs give bit-identical
/// joints.
pub fn generate_joint(spec: &SyntheticTaskSpec) -> Result<TabularJointModel> {
    let (v, m) = (spec.vocab_size, spec.positions);
    check_caps(v, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = v.pow(m as u32);
    let mut tokens = vec![0; m];
    let log_mass: Vec<f64> = match &spec.family {
        Family::Chain { beta } => {
            if !beta.is_finite() || *beta < 0.0 {
                return Err(contract(format!("chain coupling must be finite and ≥ 0, got {beta}")));
            }
            let init = log_softmax(&normal_vec(&mut rng, v, 0.5));
            let noise = normal_vec(&mut rng, v * v, 1.0);
            let transition: Vec<Vec<f64>> = (0..v)
                .map(|a| {
                    let logits: Vec<f64> = (0..v)
                        .map(|b| beta * (2.0 * f64::from(u8::from(a == b)) + noise[a * v + b]))
                        .collect();
                    log_softmax(&logits)
                })
                .collect();
            (0..n)
                .map(|flat| {
                    decode_row_major(flat, v, &mut tokens);
                    init[tokens[0]] + tokens.windows(2).map(|w| transition[w[0]][w[1]]).sum::<f64>()
                })
                .collect()
        }
        Family::Exchangeable { components } => {
            if *components == 0 {
                return Err(contract("exchangeable family needs at least one component"));
            }
            let weights = log_softmax(&normal_vec(&mut rng, *components, 1.0));
            let thetas: Vec<Vec<f64>> = (0..*components).map(|_| log_softmax(&normal_vec(&mut rng, v, 1.5))).collect();
            (0..n)
                .map(|flat| {
                    decode_row_major(flat, v, &mut tokens);
                    // Depends on the assignment only through token counts.
                    let mut counts = vec![0.0f64; v];
                    tokens.iter().for_each(|&t| counts[t] += 1.0);
                    let per_component: Vec<f64> = weights
                        .iter()
                        .zip(&thetas)
                        .map(|(w, th)| w + counts.iter().zip(th).map(|(c, l)| c * l).sum::<f64>())
                        .collect();
                    log_sum_exp(&per_component)
                })
                .collect()
        }
        Family::TcLadder { level } => {
            let copy = 1.0 - 0.5f64.powi(*level as i32);
            let base = log_softmax(&normal_vec(&mut rng, v, 0.5));
            (0..n)
                .map(|flat| {
                    decode_row_major(flat, v, &mut tokens);
                    let independent = (1.0 - copy).ln() + tokens.iter().map(|&t| base[t]).sum::<f64>();
                    if copy > 0.0 && tokens.iter().all(|&t| t == tokens[0]) {
                        log_sum_exp(&[independent, copy.ln() + base[tokens[0]]])
                    } else {
                        independent
                    }
                })
                .collect()
        }
        Family::CustomTable { log_mass } => log_mass.clone(),
    };
    TabularJointModel::new(v, m, log_mass)
}

/// Which (position, visible set) patterns the denoising loss sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Coverage {
    /// Position `i` is only trained with `{0, …, i−1}` visible.
    PrefixOnly,
    /// Every subset of the other positions.
    AllMasks,
    /// Each all-masks pattern kept independently with probability `rho`.
    Fraction { rho: f64 },
}

fn default_steps() -> usize {
    5_000
}
fn default_lr() -> f64 {
    20.0
}
fn default_ecirc_samples() -> usize {
    64
}
fn default_grad_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub coverage: Coverage,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Weight `γ` of the squared normalized-curl penalty.
    #[serde(default)]
    pub ecirc_weight: f64,
    #[serde(default = "default_ecirc_samples")]
    pub ecirc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the gradient norm falls below this.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
}

impl TrainConfig {
    pub fn new(coverage: Coverage) -> Self {
        Self {
            coverage,
            steps: default_steps(),
            learning_rate: default_lr(),
            ecirc_weight: 0.0,
            ecirc_samples: default_ecirc_samples(),
            seed: 0,
            grad_tol: default_grad_tol(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(contract("learning rate must be positive"));
        }
        if !(self.ecirc_weight >= 0.0) || !self.ecirc_weight.is_finite() {
            return Err(contract("ecirc weight must be finite and ≥ 0"));
        }
        if self.ecirc_weight > 0.0 && self.ecirc_samples == 0 {
            return Err(contract("ecirc penalty needs at least one sample per step"));
        }
        if let Coverage::Fraction { rho } = self.coverage {
            if !(0.0..=1.0).contains(&rho) {
                return Err(contract(format!("coverage fraction must lie in [0, 1], got {rho}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Total objective per step.
    pub loss: Vec<f64>,
    pub denoising_loss: Vec<f64>,
    /// Sampled `L_ecirc` per step (0 when the penalty is off).
    pub ecirc: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub converged: bool,
}

/// A logit table fitted by [`train_tabular`].
#[derive(Clone, Debug)]
pub struct TrainedTabularOracle {
    pub table: LogitTable,
    pub history: TrainingHistory,
    pub config: TrainConfig,
}

impl ConditionalOracle for TrainedTabularOracle {
    fn vocab(&self) -> Vocabulary {
        self.table.vocab()
    }
    fn positions(&self) -> usize {
        self.table.positions()
    }
    fn log_conditionals(&self, i: usize, visible: &Assignment) -> Result<Vec<f64>> {
        self.table.log_conditionals(i, visible)
    }
}

/// Visible-set patterns `(i, A)` under a coverage rule.
pub fn covered_patterns(positions: usize, coverage: &Coverage, seed: u64) -> Vec<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..positions {
        match coverage {
            Coverage::PrefixOnly => out.push((i, (0..i).collect())),
            Coverage::AllMasks | Coverage::Fraction { .. } => {
                let others: Vec<usize> = (0..positions).filter(|&k| k != i).collect();
                for size in 0..=others.len() {
                    for a in others.iter().copied().combinations(size) {
                        let keep = match coverage {
                            Coverage::Fraction { rho } => rng.random::<f64>() < *rho,
                            _ => true,
                        };
                        if keep {
                            out.push((i, a));
                        }
                    }
                }
            }
        }
    }
    out
}

struct Target {
    row: usize,
    weight: f64,
    probs: Vec<f64>,
}

fn denoising_targets(joint: &TabularJointModel, table: &LogitTable, patterns: &[(usize, Vec<usize>)]) -> Result<Vec<Target>> {
    let v = joint.vocab().size();
    let m = joint.positions();
    let mut targets = Vec::new();
    let scale = 1.0 / patterns.len().max(1) as f64;
    for (i, visible_set) in patterns {
        let mut tokens = vec![0; visible_set.len()];
        for flat in 0..v.pow(visible_set.len() as u32) {
            decode_row_major(flat, v, &mut tokens);
            let mut visible = Assignment::masked(m);
            for (&p, &t) in visible_set.iter().zip(&tokens) {
                visible.set(p, t);
            }
            let weight = joint.marginal_log_mass(&visible)?.exp() * scale;
            let probs = joint.log_conditionals(*i, &visible)?.iter().map(|l| l.exp()).collect();
            let row = table.row_start(*i, table.indexer().index(*i, &visible));
            targets.push(Target { row, weight, probs });
        }
    }
    Ok(targets)
}

/// Cumulative state probabilities for inverse-CDF sampling from the joint.
fn state_cdf(joint: &TabularJointModel) -> Vec<f64> {
    let mut acc = 0.0;
    joint
        .log_mass()
        .iter()
        .map(|l| {
            acc += l.exp();
            acc
        })
        .collect()
}

/// Adds `γ/n · ∇ C̃²` for one sampled square to `grad`; returns `C̃²`.
#[allow(clippy::too_many_arguments)]
fn penalty_square(
    table: &LogitTable,
    visible: &Assignment,
    i: usize,
    j: usize,
    a: usize,
    b: usize,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let ix = table.indexer();
    let v = table.vocab().size();
    // (row, token, sign of the term in C)
    let rows = [
        (table.row_start(i, ix.index(i, visible)), a, 1.0),
        (table.row_start(j, ix.index(j, &visible.with(i, a))), b, 1.0),
        (table.row_start(j, ix.index(j, visible)), b, -1.0),
        (table.row_start(i, ix.index(i, &visible.with(j, b))), a, -1.0),
    ];
    let logits = table.as_flat();
    let lps: Vec<Vec<f64>> = rows.iter().map(|&(r, _, _)| log_softmax(&logits[r..r + v])).collect();
    let terms: Vec<f64> = rows.iter().zip(&lps).map(|(&(_, t, _), lp)| lp[t]).collect();
    let curl: f64 = rows.iter().zip(&terms).map(|(&(_, _, s), l)| s * l).sum();
    let denom = -terms.iter().sum::<f64>() + DEFAULT_EPSILON;
    let value = curl * curl / (denom * denom);
    for ((&(r, t, s), lp), _) in rows.iter().zip(&lps).zip(&terms) {
        // d(C²/D²)/d log q = 2C s / D² + 2C² / D³   (dD/d log q = −1)
        let d_term = 2.0 * curl * s / (denom * denom) + 2.0 * curl * curl / (denom * denom * denom);
        for (k, l) in lp.iter().enumerate() {
            let d_logit = f64::from(u8::from(k == t)) - l.exp();
            grad[r + k] += scale * d_term * d_logit;
        }
    }
    value
}

/// Full-batch gradient descent on the covered denoising cross-entropy plus
/// `γ · L_ecirc` estimated from sampled squares each step.
pub fn train_tabular(joint: &TabularJointModel, config: &TrainConfig) -> Result<TrainedTabularOracle> {
    config.validate()?;
    let m = joint.positions();
    let v = joint.vocab().size();
    let mut table = LogitTable::zeros(v, m)?;
    let patterns = covered_patterns(m, &config.coverage, config.seed);
    let targets = denoising_targets(joint, &table, &patterns)?;
    let cdf = state_cdf(joint);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_EC1C);
    let mut history = TrainingHistory::default();
    let mut grad = vec![0.0; table.as_flat().len()];
    let mut tokens = vec![0; m];
    let mut order: Vec<usize> = (0..m).collect();

    for step in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let logits = table.as_flat();
        let mut ce = 0.0;
        for t in &targets {
            let lp = log_softmax(&logits[t.row..t.row + v]);
            for (k, (&p, l)) in t.probs.iter().zip(&lp).enumerate() {
                ce -= t.weight * p * l;
                grad[t.row + k] += t.weight * (l.exp() - p);
            }
        }

        let mut penalty = 0.0;
        if config.ecirc_weight > 0.0 && m >= 2 {
            let scale = config.ecirc_weight / config.ecirc_samples as f64;
            for _ in 0..config.ecirc_samples {
                let u: f64 = rng.random();
                let state = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                decode_row_major(state, v, &mut tokens);
                order.shuffle(&mut rng);
                let revealed = rng.random_range(0..=m - 2);
                let mut visible = Assignment::masked(m);
                for &p in &order[..revealed] {
                    visible.set(p, tokens[p]);
                }
                let (i, j) = (order[revealed], order[revealed + 1]);
                let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
                penalty += penalty_square(&table, &visible, i, j, a, b, scale, &mut grad);
            }
            penalty /= config.ecirc_samples as f64;
        }

        let loss = ce + config.ecirc_weight * penalty;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        history.loss.push(loss);
        history.denoising_loss.push(ce);
        history.ecirc.push(penalty);
        history.grad_norm.push(grad_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                reason: "objective became non-finite".into(),
                history: Box::new(history),
            });
        }
        if grad_norm < config.grad_tol {
            history.converged = true;
            break;
        }
        table
            .as_flat_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(l, g)| *l -= config.learning_rate * g);
    }
    Ok(TrainedTabularOracle { table, history, config: config.clone() })
}

/// Which visible sets a context-averaged statistic ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    All,
    /// `{0, …, k−1}` for some `k`.
    PrefixLike,
    RandomMask,
}

/// Visible sets `A` leaving at least two masked positions.
pub fn context_patterns(positions: usize, kind: PatternKind) -> Vec<Vec<usize>> {
    let all = (0..positions).collect::<Vec<_>>();
    (0..=positions.saturating_sub(2))
        .flat_map(|size| all.iter().copied().combinations(size))
        .filter(|a| {
            let prefix = a.iter().enumerate().all(|(k, &p)| k == p);
            match kind {
                PatternKind::All => true,
                PatternKind::PrefixLike => prefix,
                PatternKind::RandomMask => !prefix,
            }
        })
        .collect()
}

/// Exhaustive ECircAbs averaged over contexts: `p(x_A)`-weighted within each
/// visible set `A`, then uniformly over the sets.
pub fn mean_ecirc_over_patterns<O: ConditionalOracle + ?Sized>(
    oracle: &O,
    joint: &TabularJointModel,
    patterns: &[Vec<usize>],
) -> Result<f64> {
    if patterns.is_empty() {
        return Err(contract("no context patterns"));
    }
    let m = oracle.positions();
    let v = oracle.vocab().size();
    let mut total = 0.0;
    for a in patterns {
        let block: Vec<usize> = (0..m).filter(|p| !a.contains(p)).collect();
        let mut tokens = vec![0; a.len()];
        let mut acc = 0.0;
        for flat in 0..v.pow(a.len() as u32) {
            decode_row_major(flat, v, &mut tokens);
            let ctx = PartialContext { observed: a.iter().copied().zip(tokens.iter().copied()).collect(), block: block.clone(), time: 0.0 };
            let w = joint.marginal_log_mass(&ctx.visible(m))?.exp();
            acc += w * ecirc_abs(oracle, &ctx, &SamplingPlan::Exhaustive)?.mean;
        }
        total += acc;
    }
    Ok(total / patterns.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence::total_correlation;

    fn spec(family: Family, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec { family, positions: 3, vocab_size: 3, seed }
    }

    #[test]
    fn chain_without_coupling_is_independent() {
        let joint = generate_joint(&spec(Family::Chain { beta: 0.0 }, 4)).unwrap();
        assert!(total_correlation(&joint, &PartialContext::full_block(3)).unwrap() < 1e-10);
        let coupled = generate_joint(&spec(Family::Chain { beta: 1.5 }, 4)).unwrap();
        assert!(total_correlation(&coupled, &PartialContext::full_block(3)).unwrap() > 1e-3);
        assert!(generate_joint(&spec(Family::Chain { beta: f64::NAN }, 4)).is_err());
        assert!(generate_joint(&spec(Family::Chain { beta: -1.0 }, 4)).is_err());
    }

    #[test]
    fn exchangeable_joint_is_exactly_permutation_invariant() {
        let s = SyntheticTaskSpec { family: Family::Exchangeable { components: 3 }, positions: 4, vocab_size: 3, seed: 9 };
        let joint = generate_joint(&s).unwrap();
        for flat in 0..joint.num_states() {
            let tokens = joint.state_tokens(flat);
            for perm in (0..4).permutations(4) {
                let permuted: Vec<usize> = perm.iter().map(|&k| tokens[k]).collect();
                assert_eq!(joint.log_prob(&permuted), joint.log_prob(&tokens));
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec(Family::Exchangeable { components: 3 }, 21);
        assert_eq!(generate_joint(&s).unwrap(), generate_joint(&s).unwrap());
    }

    #[test]
    fn prefix_coverage_patterns() {
        let p = covered_patterns(3, &Coverage::PrefixOnly, 0);
        assert_eq!(p, vec![(0, vec![]), (1, vec![0]), (2, vec![0, 1])]);
        assert_eq!(covered_patterns(3, &Coverage::AllMasks, 0).len(), 12);
        assert!(covered_patterns(3, &Coverage::Fraction { rho: 0.0 }, 0).is_empty());
    }

    #[test]
    fn pattern_kinds_partition() {
        let all = context_patterns(4, PatternKind::All);
        let prefix = context_patterns(4, PatternKind::PrefixLike);
        let random = context_patterns(4, PatternKind::RandomMask);
        assert_eq!(prefix, vec![vec![], vec![0], vec![0, 1]]);
        assert_eq!(all.len(), prefix.len() + random.len());
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let joint = generate_joint(&spec(Family::Chain { beta: 1.0 }, 2)).unwrap();
        let mut table = LogitTable::from_oracle(&joint).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        table.as_flat_mut().iter_mut().for_each(|l| *l += 0.5 * rng.random::<f64>());
        let mut visible = Assignment::masked(3);
        visible.set(1, 2);
        let mut grad = vec![0.0; table.as_flat().len()];
        penalty_square(&table, &visible, 0, 2, 1, 0, 1.0, &mut grad);
        let h = 1e-6;
        let mut scratch = vec![0.0; grad.len()];
        for (k, &g) in grad.iter().enumerate().filter(|(_, g)| g.abs() > 0.0) {
            let mut plus = table.clone();
            plus.as_flat_mut()[k] += h;
            let mut minus = table.clone();
            minus.as_flat_mut()[k] -= h;
            let fp = penalty_square(&plus, &visible, 0, 2, 1, 0, 1.0, &mut scratch);
            let fm = penalty_square(&minus, &visible, 0, 2, 1, 0, 1.0, &mut scratch);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "entry {k}: analytic {g}, numeric {fd}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let joint = generate_joint(&spec(Family::Chain { beta: 1.0 }, 2)).unwrap();
        let mut c = TrainConfig::new(Coverage::AllMasks);
        c.learning_rate = 0.0;
        assert!(train_tabular(&joint, &c).is_err());
        let mut c = TrainConfig::new(Coverage::Fraction { rho: 1.5 });
        c.steps = 1;
        assert!(train_tabular(&joint, &c).is_err());
    }

    #[test]
    fn diverging_training_reports_history() {
        let joint = generate_joint(&spec(Family::Chain { beta: 1.0 }, 2)).unwrap();
        let mut c = TrainConfig::new(Coverage::AllMasks);
        c.learning_rate = 1e308;
        c.ecirc_weight = 1e308;
        c.steps = 50;
        match train_tabular(&joint, &c) {
            Err(Error::Training { history, .. }) => assert!(!history.loss.is_empty()),
            other => panic!("expected training failure, got {other:?}"),
        }
    }
}

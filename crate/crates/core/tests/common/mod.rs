#![allow(dead_code)]

use std::collections::BTreeMap;

use curlgauge::{ConditionalOracle, PartialContext, PerturbedConditionalModel, TabularJointModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian log-masses with the given scale.
pub fn random_joint(rng: &mut ChaCha8Rng, vocab: usize, positions: usize, scale: f64) -> TabularJointModel {
    let n = vocab.pow(positions as u32);
    let log_mass = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    TabularJointModel::new(vocab, positions, log_mass).unwrap()
}

pub enum Oracle {
    Bayes(TabularJointModel),
    Perturbed(PerturbedConditionalModel),
}

impl Oracle {
    pub fn get(&self) -> &dyn ConditionalOracle {
        match self {
            Oracle::Bayes(j) => j,
            Oracle::Perturbed(p) => p,
        }
    }

    pub fn joint(&self) -> &TabularJointModel {
        match self {
            Oracle::Bayes(j) => j,
            Oracle::Perturbed(p) => p.base(),
        }
    }

    pub fn is_bayes(&self) -> bool {
        matches!(self, Oracle::Bayes(_))
    }
}

/// Bayes or perturbed (`delta` in `delta_range`) with equal odds.
pub fn random_oracle(rng: &mut ChaCha8Rng, vocab: usize, positions: usize, delta_range: (f64, f64)) -> Oracle {
    let joint = random_joint(rng, vocab, positions, 1.5);
    if rng.random::<bool>() {
        Oracle::Bayes(joint)
    } else {
        let delta = rng.random_range(delta_range.0..=delta_range.1);
        Oracle::Perturbed(PerturbedConditionalModel::new(joint, delta, rng.random()).unwrap())
    }
}

/// A context whose block has `block_len` random positions; the rest are
/// observed with random tokens.
pub fn random_context(rng: &mut ChaCha8Rng, vocab: usize, positions: usize, block_len: usize) -> PartialContext {
    let mut order: Vec<usize> = (0..positions).collect();
    order.shuffle(rng);
    let mut block = order[..block_len].to_vec();
    block.sort_unstable();
    let observed: BTreeMap<usize, usize> = order[block_len..].iter().map(|&p| (p, rng.random_range(0..vocab))).collect();
    PartialContext::new(observed, block).unwrap()
}

pub fn shuffled(rng: &mut ChaCha8Rng, xs: &[usize]) -> Vec<usize> {
    let mut v = xs.to_vec();
    v.shuffle(rng);
    v
}

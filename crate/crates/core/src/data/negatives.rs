use std::collections::HashSet;

use rand::seq::index::sample;

use super::ItemId;
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};

/// A ranking target and the sampled negatives it competes against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCandidates {
    pub target: ItemId,
    pub negatives: Vec<ItemId>,
}

impl EvalCandidates {
    /// Target first, then negatives.
    pub fn all(&self) -> Vec<ItemId> {
        let mut v = Vec::with_capacity(self.negatives.len() + 1);
        v.push(self.target);
        v.extend_from_slice(&self.negatives);
        v
    }
}

/// Draws `count` distinct items the user never interacted with, uniformly
/// without replacement. Deterministic per `(seed, user)`.
pub fn sample_negatives(
    user: &str,
    interacted: &[ItemId],
    target: ItemId,
    item_count: usize,
    count: usize,
    seed: u64,
) -> Result<EvalCandidates> {
    let seen: HashSet<ItemId> = interacted.iter().copied().chain(std::iter::once(target)).collect();
    let pool: Vec<ItemId> = (1..=item_count).filter(|i| !seen.contains(i)).collect();
    if pool.len() < count {
        return Err(Error::PoolTooSmall { available: pool.len(), needed: count });
    }
    let mut rng = rng_for(seed, &[hash_str(user)]);
    let negatives = sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    Ok(EvalCandidates { target, negatives })
}

//! Synthetic interaction data from a known Markov chain over items, with
//! optional replacement noise whose positions are recorded.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};

/// Item transition structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transitions {
    /// Item `i` is always followed by `i + 1` (wrapping).
    Ring,
    /// Items form consecutive blocks of `block_size`; the next item is
    /// uniform within the current block with probability `in_block`,
    /// otherwise uniform over the other items.
    BlockMarkov { block_size: usize, in_block: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub item_count: usize,
    pub transitions: Transitions,
    /// Sequence lengths are uniform in `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position is replaced by a uniform random item.
    pub noise: f64,
    pub users: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn ring(users: usize, seed: u64) -> Self {
        SynthSpec { item_count: 120, transitions: Transitions::Ring, min_len: 8, max_len: 20, noise: 0.0, users, seed }
    }

    pub fn block_markov(users: usize, noise: f64, seed: u64) -> Self {
        SynthSpec {
            transitions: Transitions::BlockMarkov { block_size: 8, in_block: 0.9 },
            noise,
            ..Self::ring(users, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_count < 120 {
            return Err(Error::Config(format!("item count {} below 120", self.item_count)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if let Transitions::BlockMarkov { block_size, in_block } = self.transitions {
            if block_size == 0 || block_size >= self.item_count || self.item_count % block_size != 0 {
                return Err(Error::Config(format!("block size {block_size} must divide {} items", self.item_count)));
            }
            if !(0.0..=1.0).contains(&in_block) {
                return Err(Error::Config(format!("in-block probability {in_block} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Probability of moving from item `from` to item `to` (1-based ids).
    pub fn transition_probability(&self, from: usize, to: usize) -> f64 {
        let n = self.item_count;
        match self.transitions {
            Transitions::Ring => f64::from(u8::from(to == from % n + 1)),
            Transitions::BlockMarkov { block_size, in_block } => {
                if (from - 1) / block_size == (to - 1) / block_size {
                    in_block / block_size as f64
                } else {
                    (1.0 - in_block) / (n - block_size) as f64
                }
            }
        }
    }

    fn next(&self, from: usize, rng: &mut impl Rng) -> usize {
        let n = self.item_count;
        match self.transitions {
            Transitions::Ring => from % n + 1,
            Transitions::BlockMarkov { block_size, in_block } => {
                let block = (from - 1) / block_size;
                if rng.gen_bool(in_block) {
                    block * block_size + rng.gen_range(1..=block_size)
                } else {
                    let j = rng.gen_range(1..=n - block_size);
                    if j > block * block_size {
                        j + block_size
                    } else {
                        j
                    }
                }
            }
        }
    }
}

/// Generated interactions plus the `(user, timestamp)` of every noised
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub noise: Vec<(String, usize)>,
}

pub fn user_token(u: usize) -> String {
    format!("u{u:06}")
}

/// Zero-padded so lexicographic order equals numeric order.
pub fn item_token(i: usize, item_count: usize) -> String {
    let width = item_count.to_string().len();
    format!("i{i:0width$}")
}

/// Walks the chain once per user. Timestamps are `1..=len` per user.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let lens = Uniform::new_inclusive(spec.min_len, spec.max_len);
    let mut interactions = Vec::new();
    let mut noise = Vec::new();
    for u in 0..spec.users {
        let user = user_token(u);
        let mut rng = rng_for(spec.seed, &[hash_str(&user)]);
        let len = lens.sample(&mut rng);
        let mut item = rng.gen_range(1..=spec.item_count);
        for t in 1..=len {
            if t > 1 {
                item = spec.next(item, &mut rng);
            }
            let observed = if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                noise.push((user.clone(), t));
                rng.gen_range(1..=spec.item_count)
            } else {
                item
            };
            interactions.push(Interaction::new(&user, &item_token(observed, spec.item_count), t as i64));
        }
    }
    Ok(SynthData { interactions, noise })
}

impl SynthData {
    pub fn interactions_text(&self) -> String {
        let mut s = String::new();
        for i in &self.interactions {
            let _ = writeln!(s, "{} {} {}", i.user, i.item, i.timestamp);
        }
        s
    }

    pub fn truth_text(&self) -> String {
        let mut s = String::new();
        for (u, t) in &self.noise {
            let _ = writeln!(s, "{u} {t}");
        }
        s
    }

    /// Writes the interaction file and the noise sidecar.
    pub fn write(&self, interactions: &Path, truth: &Path) -> Result<()> {
        std::fs::write(interactions, self.interactions_text()).map_err(|e| Error::io(interactions, e))?;
        std::fs::write(truth, self.truth_text()).map_err(|e| Error::io(truth, e))
    }
}

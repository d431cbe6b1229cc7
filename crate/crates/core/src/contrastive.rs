//! Sequence representations and the two contrastive objectives: in-batch
//! InfoNCE between paired views and a two-way triplet preference.

use std::str::FromStr;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{Scalar, Tape, Var};
use crate::recommender::rec_hidden;

/// Which hidden vector summarizes a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Pooling::Last),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling `{s}` (expected last|mean)"))),
        }
    }
}

/// Full forward (encoder then recommender) pooled to a `[1, e]` row.
pub fn sequence_repr(model: &Model, tape: &mut Tape, ids: &[ItemId], pooling: Pooling, train: bool) -> Result<Var> {
    let h = rec_hidden(model, tape, ids, train)?;
    let last = h.last_real().ok_or_else(|| Error::InvalidShape("sequence has no real items".into()))?;
    match pooling {
        Pooling::Last => tape.slice_rows(h.states, last, 1),
        Pooling::Mean => {
            let real: Vec<usize> = (0..h.len()).filter(|&t| !h.pad[t]).collect();
            let rows = tape.gather_rows(h.states, &real)?;
            let n = real.len() as Scalar;
            let ones = tape.constant(crate::numkernel::Tensor::full(vec![1, real.len()], 1.0 / n)?);
            tape.matmul(ones, rows)
        }
    }
}

/// Settings shared by both contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Anchor both views (true) or only the first one.
    pub symmetric: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { temperature: 1.0, symmetric: true }
    }
}

/// InfoNCE over paired views. For anchor `a1[u]` the positive is `a2[u]`
/// and the negatives are the other `2N - 2` views in the batch. Mean over
/// anchors.
pub fn cl_loss(tape: &mut Tape, a1: &[Var], a2: &[Var], cfg: &ContrastConfig) -> Result<Var> {
    let n = a1.len();
    if n < 2 || a2.len() != n {
        return Err(Error::Config(format!("contrastive batch needs N >= 2 paired views, got {} and {}", n, a2.len())));
    }
    if cfg.temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let views: Vec<Var> = a1.iter().chain(a2).copied().collect();
    let z = tape.concat_rows(&views)?;
    let sims = tape.matmul_nt(z, z)?;
    let sims = tape.scale(sims, (1.0 / cfg.temperature) as Scalar);
    let anchors = if cfg.symmetric { 2 * n } else { n };
    let sims = if anchors == 2 * n { sims } else { tape.slice_rows(sims, 0, n)? };
    let mut allowed = vec![true; anchors * 2 * n];
    let mut targets = Vec::with_capacity(anchors);
    for r in 0..anchors {
        allowed[r * 2 * n + r] = false;
        targets.push((r + n) % (2 * n));
    }
    let total = tape.cross_entropy_masked(sims, &targets, &allowed)?;
    Ok(tape.scale(total, 1.0 / anchors as Scalar))
}

/// Two-way softmax preferring `sim(raw, a1)` over `sim(raw, a2)`, averaged
/// over the batch.
pub fn triplet_loss(tape: &mut Tape, raw: &[Var], a1: &[Var], a2: &[Var], cfg: &ContrastConfig) -> Result<Var> {
    let n = raw.len();
    if n == 0 || a1.len() != n || a2.len() != n {
        return Err(Error::Config(format!("triplet batch sizes differ: {} / {} / {}", n, a1.len(), a2.len())));
    }
    let r = tape.concat_rows(raw)?;
    let p = tape.concat_rows(a1)?;
    let q = tape.concat_rows(a2)?;
    let sp = tape.row_dot(r, p)?;
    let sq = tape.row_dot(r, q)?;
    let logits = tape.concat_cols(&[sp, sq])?;
    let logits = tape.scale(logits, (1.0 / cfg.temperature) as Scalar);
    let total = tape.cross_entropy(logits, &vec![0; n])?;
    Ok(tape.scale(total, 1.0 / n as Scalar))
}

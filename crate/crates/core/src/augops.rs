//! Random sequence augmentations (mask, crop, reorder) and the random
//! keep/delete/insert corruption used to train the augmenter.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Ratios for the three random augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    /// Fraction of positions masked, in (0, 1).
    pub gamma: f64,
    /// Fraction of the sequence kept by a crop, in (0, 1].
    pub eta: f64,
    /// Fraction of the sequence shuffled by a reorder, in (0, 1].
    pub beta_r: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { gamma: 0.5, eta: 0.6, beta_r: 0.5 }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0 && self.gamma < 1.0 && self.eta > 0.0 && self.eta <= 1.0 && self.beta_r > 0.0 && self.beta_r <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation ratios out of range: {self:?}")))
        }
    }
}

/// `max(1, floor(ratio * len))`, capped at `len`.
fn span(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).floor() as usize).clamp(1, len.max(1))
}

/// Replaces `max(1, floor(gamma * len))` distinct positions with `mask_id`.
pub fn mask_augment(seq: &[ItemId], gamma: f64, mask_id: ItemId, seed: u64) -> Vec<ItemId> {
    let mut out = seq.to_vec();
    if seq.is_empty() {
        return out;
    }
    let mut rng = rng_for(seed, &[1]);
    for pos in sample(&mut rng, seq.len(), span(gamma, seq.len())) {
        out[pos] = mask_id;
    }
    out
}

/// A contiguous window of length `max(1, floor(eta * len))` at a uniform start.
pub fn crop_augment(seq: &[ItemId], eta: f64, seed: u64) -> Vec<ItemId> {
    if seq.is_empty() {
        return Vec::new();
    }
    let len = span(eta, seq.len());
    let start = rng_for(seed, &[2]).gen_range(0..=seq.len() - len);
    seq[start..start + len].to_vec()
}

/// Shuffles a contiguous window of length `max(1, floor(beta_r * len))` in place.
pub fn reorder_augment(seq: &[ItemId], beta_r: f64, seed: u64) -> Vec<ItemId> {
    let mut out = seq.to_vec();
    if seq.is_empty() {
        return out;
    }
    let len = span(beta_r, seq.len());
    let mut rng = rng_for(seed, &[3]);
    let start = rng.gen_range(0..=seq.len() - len);
    out[start..start + len].shuffle(&mut rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugKind {
    Mask,
    Crop,
    Reorder,
}

/// Picks one of mask/crop/reorder uniformly and applies it.
pub fn random_augment(seq: &[ItemId], cfg: &AugConfig, mask_id: ItemId, seed: u64) -> (AugKind, Vec<ItemId>) {
    let kind = match rng_for(seed, &[4]).gen_range(0..3) {
        0 => AugKind::Mask,
        1 => AugKind::Crop,
        _ => AugKind::Reorder,
    };
    let out = match kind {
        AugKind::Mask => mask_augment(seq, cfg.gamma, mask_id, seed),
        AugKind::Crop => crop_augment(seq, cfg.eta, seed),
        AugKind::Reorder => reorder_augment(seq, cfg.beta_r, seed),
    };
    (kind, out)
}

/// Per-position edit operation. The discriminant is the class index used by
/// the augmenter's operation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    Keep = 0,
    Delete = 1,
    Insert = 2,
}

impl EditOp {
    pub const ALL: [EditOp; 3] = [EditOp::Keep, EditOp::Delete, EditOp::Insert];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> EditOp {
        Self::ALL[i]
    }
}

/// An edit to apply at one position. Insert runs are in reverse order
/// (nearest-to-anchor first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    Keep,
    Delete,
    Insert(Vec<ItemId>),
}

/// Applies per-position edits. An inserted run is placed, in forward order,
/// directly before its anchor item; `tail` is a run appended after the last
/// position.
pub fn apply_edits(seq: &[ItemId], edits: &[Edit], tail: Option<&[ItemId]>) -> Vec<ItemId> {
    debug_assert_eq!(seq.len(), edits.len());
    let mut out = Vec::with_capacity(seq.len() + 8);
    for (&item, edit) in seq.iter().zip(edits) {
        match edit {
            Edit::Keep => out.push(item),
            Edit::Delete => {}
            Edit::Insert(run) => {
                out.extend(run.iter().rev());
                out.push(item);
            }
        }
    }
    if let Some(run) = tail {
        out.extend(run.iter().rev());
    }
    out
}

/// Probabilities for the random corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub p_keep: f64,
    pub p_delete: f64,
    pub p_insert: f64,
    /// Longest inserted run, and longest run of consecutive deletions.
    pub max_insert_run: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { p_keep: 0.4, p_delete: 0.5, p_insert: 0.1, max_insert_run: 5 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_keep, self.p_delete, self.p_insert];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("keep/delete/insert probabilities must sum to 1: {ps:?}")));
        }
        if !(1..=5).contains(&self.max_insert_run) {
            return Err(Error::Config(format!("max insert run must be in 1..=5, got {}", self.max_insert_run)));
        }
        Ok(())
    }
}

/// A corrupted sequence together with the edits that restore the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionRecord {
    /// The corrupted sequence.
    pub modified: Vec<ItemId>,
    /// Restoration label per position of `modified`.
    pub labels: Vec<EditOp>,
    /// For `Insert` positions, the deleted run in reverse order; empty otherwise.
    pub insert_targets: Vec<Vec<ItemId>>,
    /// Deleted run at the end of the original sequence, in reverse order,
    /// restored through a synthetic end-of-sequence slot.
    pub tail: Option<Vec<ItemId>>,
    /// The operation drawn for each original item.
    pub drawn: Vec<EditOp>,
}

impl CorruptionRecord {
    pub fn edits(&self) -> Vec<Edit> {
        self.labels
            .iter()
            .zip(&self.insert_targets)
            .map(|(l, t)| match l {
                EditOp::Keep => Edit::Keep,
                EditOp::Delete => Edit::Delete,
                EditOp::Insert => Edit::Insert(t.clone()),
            })
            .collect()
    }

    /// Replays the restoration labels over the corrupted sequence.
    pub fn restore(&self) -> Vec<ItemId> {
        apply_edits(&self.modified, &self.edits(), self.tail.as_deref())
    }
}

/// Randomly keeps, deletes, or prefixes with inserted noise each item of
/// `seq`, and records how to undo it.
///
/// Runs of consecutive deletions stop at `max_insert_run` (the next draw
/// becomes a keep) so every deleted run can be restored by one insertion.
/// If every item is deleted, one uniformly chosen item is kept.
pub fn corrupt_sequence(seq: &[ItemId], cfg: &CorruptionConfig, item_count: usize, seed: u64) -> CorruptionRecord {
    let mut rng = rng_for(seed, &[5]);
    let mut drawn = Vec::with_capacity(seq.len());
    let mut run = 0;
    for _ in seq {
        let u: f64 = rng.gen();
        let mut op = if u < cfg.p_keep {
            EditOp::Keep
        } else if u < cfg.p_keep + cfg.p_delete {
            EditOp::Delete
        } else {
            EditOp::Insert
        };
        if op == EditOp::Delete && run >= cfg.max_insert_run {
            op = EditOp::Keep;
        }
        run = if op == EditOp::Delete { run + 1 } else { 0 };
        drawn.push(op);
    }
    if !seq.is_empty() && drawn.iter().all(|o| *o == EditOp::Delete) {
        let keep = rng.gen_range(0..seq.len());
        drawn[keep] = EditOp::Keep;
    }

    let mut modified = Vec::with_capacity(seq.len() * 2);
    let mut labels = Vec::with_capacity(seq.len() * 2);
    let mut insert_targets = Vec::with_capacity(seq.len() * 2);
    let mut pending: Vec<ItemId> = Vec::new();
    for (&item, op) in seq.iter().zip(&drawn) {
        if *op == EditOp::Delete {
            pending.push(item);
            continue;
        }
        if *op == EditOp::Insert {
            let k = rng.gen_range(1..=cfg.max_insert_run);
            for _ in 0..k {
                modified.push(rng.gen_range(1..=item_count));
                labels.push(EditOp::Delete);
                insert_targets.push(Vec::new());
            }
        }
        modified.push(item);
        if pending.is_empty() {
            labels.push(EditOp::Keep);
            insert_targets.push(Vec::new());
        } else {
            labels.push(EditOp::Insert);
            insert_targets.push(pending.drain(..).rev().collect());
        }
    }
    let tail = (!pending.is_empty()).then(|| pending.into_iter().rev().collect());
    CorruptionRecord { modified, labels, insert_targets, tail, drawn }
}

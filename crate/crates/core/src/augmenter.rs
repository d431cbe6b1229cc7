//! Learnable sequence augmenter: per-position keep/delete/insert prediction
//! on top of the shared encoder, plus a small reverse generator that
//! produces inserted runs last item first.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::augops::{apply_edits, CorruptionRecord, Edit, EditOp};
use crate::data::ItemId;
use crate::encoder::{encode, init_weight, BlockParams, HiddenStates, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::rng_for;

/// Operation projection, stop row and reverse-generator weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmenterParams {
    /// `[3, e]`, rows ordered keep, delete, insert.
    pub w_op: ParamId,
    /// Output row for the end-of-run symbol.
    pub stop: ParamId,
    /// Generator positions: anchor plus up to `max_insert` items.
    pub gen_pos: ParamId,
    pub gen_blocks: Vec<BlockParams>,
}

impl AugmenterParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let e = cfg.emb_dim;
        Ok(AugmenterParams {
            w_op: init_weight(store, "aug.w_op".into(), &[3, e], seed)?,
            stop: init_weight(store, "aug.stop".into(), &[1, e], seed)?,
            gen_pos: init_weight(store, "aug.gen_pos".into(), &[cfg.max_insert + 1, e], seed)?,
            gen_blocks: (0..cfg.layers)
                .map(|l| BlockParams::register(store, &format!("aug.gen{l}"), e, seed))
                .collect::<Result<_>>()?,
        })
    }
}

/// Column of the stop symbol in generator logits, which are laid out as
/// the item table rows followed by the stop row.
pub fn stop_class(cfg: &ModelConfig) -> usize {
    cfg.table_rows()
}

fn generator_allowed(cfg: &ModelConfig, rows: usize) -> Vec<bool> {
    let width = cfg.table_rows() + 1;
    let mut row = vec![true; width];
    row[crate::data::PAD] = false;
    row[cfg.mask_id()] = false;
    row.iter().copied().cycle().take(width * rows).collect()
}

/// Raw operation logits `W h_t`, shape `[len, 3]`.
pub fn op_logits(model: &Model, tape: &mut Tape, h: &HiddenStates) -> Result<Var> {
    let w = tape.param(&model.store, model.aug.w_op);
    tape.matmul_nt(h.states, w)
}

/// Per-position keep/delete/insert probabilities.
pub fn predict_ops(model: &Model, tape: &mut Tape, h: &HiddenStates) -> Result<Var> {
    let logits = op_logits(model, tape, h)?;
    Ok(tape.softmax(logits))
}

/// Generator logits for an anchor row and a reverse-order prefix of the
/// run. Row `j` scores the `(j+1)`-th inserted item; shape
/// `[prefix.len() + 1, table_rows + 1]`.
fn generator_logits(model: &Model, tape: &mut Tape, anchor: Var, prefix: &[ItemId], train: bool) -> Result<Var> {
    let cfg = &model.cfg;
    if prefix.len() > cfg.max_insert {
        return Err(Error::SequenceTooLong { len: prefix.len(), max: cfg.max_insert });
    }
    let table = tape.param(&model.store, model.enc.item_emb);
    let mut parts = vec![anchor];
    if !prefix.is_empty() {
        parts.push(tape.embedding_lookup(table, prefix)?);
    }
    let x = tape.concat_rows(&parts)?;
    let pos_table = tape.param(&model.store, model.aug.gen_pos);
    let positions: Vec<usize> = (0..=prefix.len()).collect();
    let pos = tape.embedding_lookup(pos_table, &positions)?;
    let h0 = tape.add(x, pos)?;
    let h0 = tape.dropout(h0, cfg.dropout, train)?;
    let input = HiddenStates { states: h0, pad: vec![false; prefix.len() + 1] };
    let hc = crate::encoder::transformer_forward(tape, &model.store, &model.aug.gen_blocks, &input, cfg, train)?;
    let item_logits = tape.matmul_nt(hc.states, table)?;
    let stop = tape.param(&model.store, model.aug.stop);
    let stop_logits = tape.matmul_nt(hc.states, stop)?;
    tape.concat_cols(&[item_logits, stop_logits])
}

/// Distribution of the next inserted item given the anchor state and the
/// items generated so far. Entry `i - 1` is item `i`; the last entry is the
/// stop symbol.
pub fn insertion_distribution(model: &Model, anchor: &[Scalar], prefix: &[ItemId]) -> Result<Vec<Scalar>> {
    let mut tape = Tape::inference();
    let a = tape.constant(Tensor::matrix(1, anchor.len(), anchor.to_vec())?);
    let logits = generator_logits(model, &mut tape, a, prefix, false)?;
    let last = tape.slice_rows(logits, prefix.len(), 1)?;
    let allowed = generator_allowed(&model.cfg, 1);
    let probs = tape.softmax_masked(last, &allowed)?;
    let p = tape.value(probs).data();
    let n = model.cfg.item_count;
    let mut out = p[1..=n].to_vec();
    out.push(p[stop_class(&model.cfg)]);
    Ok(out)
}

/// How discrete choices are made when generating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Sample { seed: u64 },
}

fn choose(probs: &[Scalar], decoding: Decoding, keys: &[u64]) -> usize {
    match decoding {
        Decoding::Greedy => argmax(probs),
        Decoding::Sample { seed } => {
            let mut rng = rng_for(seed, keys);
            match WeightedIndex::new(probs.iter().map(|&p| p.max(0.0) as f64)) {
                Ok(dist) => dist.sample(&mut rng),
                Err(_) => rng.gen_range(0..probs.len()),
            }
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Generates an inserted run for one anchor state, in reverse order. Stops
/// at the stop symbol or after `max_insert` items.
pub fn reverse_generate(model: &Model, anchor: &[Scalar], decoding: Decoding, key: u64) -> Result<Vec<ItemId>> {
    let mut run = Vec::new();
    while run.len() < model.cfg.max_insert {
        let probs = insertion_distribution(model, anchor, &run)?;
        let c = choose(&probs, decoding, &[0x6765_6e, key, run.len() as u64]);
        if c == model.cfg.item_count {
            break;
        }
        run.push(c + 1);
    }
    Ok(run)
}

/// Restoration loss of one record: operation cross-entropy over every
/// position plus teacher-forced generator cross-entropy for every insertion
/// run, each run terminated by a stop target.
///
/// A trailing deleted run is scored through an extra mask-token slot
/// labelled insert. Records longer than the encoder limit keep their most
/// recent positions.
pub fn record_loss(model: &Model, tape: &mut Tape, record: &CorruptionRecord, train: bool) -> Result<Var> {
    let cfg = &model.cfg;
    let mut ids = record.modified.clone();
    let mut labels: Vec<usize> = record.labels.iter().map(|l| l.index()).collect();
    let mut targets: Vec<&[ItemId]> = record.insert_targets.iter().map(Vec::as_slice).collect();
    if let Some(tail) = &record.tail {
        ids.push(cfg.mask_id());
        labels.push(EditOp::Insert.index());
        targets.push(tail);
    }
    let skip = ids.len().saturating_sub(cfg.max_aug_len);
    let (ids, labels, targets) = (&ids[skip..], &labels[skip..], &targets[skip..]);

    let h = encode(tape, &model.store, &model.enc, ids, cfg, train)?;
    let logits = op_logits(model, tape, &h)?;
    let mut terms = vec![tape.cross_entropy(logits, labels)?];
    for (t, run) in targets.iter().enumerate() {
        if labels[t] != EditOp::Insert.index() {
            continue;
        }
        let anchor = tape.slice_rows(h.states, t, 1)?;
        let gen = generator_logits(model, tape, anchor, run, train)?;
        let mut tgt = run.to_vec();
        tgt.push(stop_class(cfg));
        let allowed = generator_allowed(cfg, tgt.len());
        terms.push(tape.cross_entropy_masked(gen, &tgt, &allowed)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    Ok(tape.sum(stacked))
}

/// Batch-mean restoration loss.
pub fn augmenter_loss(model: &Model, tape: &mut Tape, records: &[CorruptionRecord], train: bool) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::Config("empty augmenter batch".into()));
    }
    let per: Vec<Var> = records.iter().map(|r| record_loss(model, tape, r, train)).collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&per)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / records.len() as Scalar))
}

/// Held-out restoration quality of the augmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RestorationStats {
    pub op_correct: usize,
    pub op_total: usize,
    /// Teacher-forced inserted items predicted top-1 (stop targets excluded).
    pub insert_correct: usize,
    pub insert_total: usize,
}

impl RestorationStats {
    pub fn op_accuracy(&self) -> f64 {
        self.op_correct as f64 / self.op_total.max(1) as f64
    }

    pub fn insert_accuracy(&self) -> f64 {
        self.insert_correct as f64 / self.insert_total.max(1) as f64
    }
}

/// Argmax operation accuracy over every labelled position and top-1
/// accuracy of teacher-forced insertion targets, in evaluation mode.
pub fn restoration_stats(model: &Model, records: &[CorruptionRecord]) -> Result<RestorationStats> {
    let cfg = &model.cfg;
    let mut stats = RestorationStats::default();
    for record in records {
        let mut ids = record.modified.clone();
        let mut labels = record.labels.clone();
        let mut targets: Vec<&[ItemId]> = record.insert_targets.iter().map(Vec::as_slice).collect();
        if let Some(tail) = &record.tail {
            ids.push(cfg.mask_id());
            labels.push(EditOp::Insert);
            targets.push(tail);
        }
        let skip = ids.len().saturating_sub(cfg.max_aug_len);
        let mut tape = Tape::inference();
        let h = encode(&mut tape, &model.store, &model.enc, &ids[skip..], cfg, false)?;
        let logits = op_logits(model, &mut tape, &h)?;
        for (t, (label, run)) in labels[skip..].iter().zip(&targets[skip..]).enumerate() {
            stats.op_total += 1;
            if argmax(tape.value(logits).row(t)) == label.index() {
                stats.op_correct += 1;
            }
            if *label != EditOp::Insert {
                continue;
            }
            let anchor = tape.slice_rows(h.states, t, 1)?;
            let gen = generator_logits(model, &mut tape, anchor, run, false)?;
            let allowed = generator_allowed(cfg, 1);
            for (j, &target) in run.iter().enumerate() {
                let row: Vec<Scalar> = tape
                    .value(gen)
                    .row(j)
                    .iter()
                    .zip(&allowed)
                    .map(|(&x, &ok)| if ok { x } else { Scalar::NEG_INFINITY })
                    .collect();
                stats.insert_total += 1;
                if argmax(&row) == target {
                    stats.insert_correct += 1;
                }
            }
        }
    }
    Ok(stats)
}

/// Chooses one edit per position of a sequence.
pub trait EditPolicy {
    fn edits(&mut self, seq: &[ItemId]) -> Result<Vec<Edit>>;
}

impl<F: FnMut(&[ItemId]) -> Result<Vec<Edit>>> EditPolicy for F {
    fn edits(&mut self, seq: &[ItemId]) -> Result<Vec<Edit>> {
        self(seq)
    }
}

/// The trained augmenter as an edit policy.
pub struct LearnedPolicy<'m> {
    pub model: &'m Model,
    pub decoding: Decoding,
}

impl EditPolicy for LearnedPolicy<'_> {
    fn edits(&mut self, seq: &[ItemId]) -> Result<Vec<Edit>> {
        let model = self.model;
        let mut tape = Tape::inference();
        let h = encode(&mut tape, &model.store, &model.enc, seq, &model.cfg, false)?;
        let probs = predict_ops(model, &mut tape, &h)?;
        let probs = tape.value(probs).clone();
        let states = tape.value(h.states).clone();
        (0..seq.len())
            .map(|t| {
                let key = t as u64;
                Ok(match EditOp::from_index(choose(probs.row(t), self.decoding, &[0x6f70, key])) {
                    EditOp::Keep => Edit::Keep,
                    EditOp::Delete => Edit::Delete,
                    EditOp::Insert => Edit::Insert(reverse_generate(model, states.row(t), self.decoding, key)?),
                })
            })
            .collect()
    }
}

/// Applies the policy's edits to `seq` (its most recent `max_len` items if
/// longer), keeps the most recent `max_len` tokens of the result, and keeps
/// the last item if everything was deleted.
pub fn generate_augmented(seq: &[ItemId], policy: &mut dyn EditPolicy, max_len: usize) -> Result<Vec<ItemId>> {
    let seq = &seq[seq.len().saturating_sub(max_len)..];
    if seq.is_empty() {
        return Err(Error::InvalidShape("cannot augment an empty sequence".into()));
    }
    let edits = policy.edits(seq)?;
    if edits.len() != seq.len() {
        return Err(Error::InvalidShape(format!("{} edits for {} positions", edits.len(), seq.len())));
    }
    let mut out = apply_edits(seq, &edits, None);
    if out.is_empty() {
        out.push(*seq.last().expect("non-empty"));
    }
    let skip = out.len().saturating_sub(max_len);
    Ok(out.split_off(skip))
}

/// The learned augmentation of one sequence.
pub fn augment_sequence(model: &Model, seq: &[ItemId], decoding: Decoding) -> Result<Vec<ItemId>> {
    let mut policy = LearnedPolicy { model, decoding };
    generate_augmented(seq, &mut policy, model.cfg.max_aug_len)
}

//! Next-item recommender on top of the shared encoder, and the joint
//! training objective that combines it with the contrastive losses.

use std::fmt;
use std::str::FromStr;

use crate::augmenter::{augment_sequence, augmenter_loss, Decoding};
use crate::augops::{corrupt_sequence, random_augment, AugConfig, CorruptionConfig};
use crate::contrastive::{cl_loss, sequence_repr, triplet_loss, ContrastConfig, Pooling};
use crate::data::{ItemId, PAD};
use crate::encoder::{encode, transformer_forward, BlockParams, HiddenStates, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{adam_step, AdamState, ParamStore, Scalar, Tape, Var};
use crate::rng::{derive_seed, hash_str};

/// The recommender's own block stack; it reads the encoder output and
/// scores items against the shared item table.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommenderParams {
    pub blocks: Vec<BlockParams>,
}

impl RecommenderParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| BlockParams::register(store, &format!("rec.block{l}"), cfg.emb_dim, seed))
            .collect::<Result<_>>()?;
        Ok(RecommenderParams { blocks })
    }
}

/// Recommender blocks over encoder states.
pub fn rec_forward(model: &Model, tape: &mut Tape, h_e: &HiddenStates, train: bool) -> Result<HiddenStates> {
    transformer_forward(tape, &model.store, &model.rec.blocks, h_e, &model.cfg, train)
}

/// Encoder followed by recommender blocks.
pub fn rec_hidden(model: &Model, tape: &mut Tape, ids: &[ItemId], train: bool) -> Result<HiddenStates> {
    let h = encode(tape, &model.store, &model.enc, ids, &model.cfg, train)?;
    rec_forward(model, tape, &h, train)
}

/// Logit mask admitting real items only.
fn item_mask(cfg: &ModelConfig, rows: usize) -> Vec<bool> {
    let mut row = vec![true; cfg.table_rows()];
    row[PAD] = false;
    row[cfg.mask_id()] = false;
    row.iter().copied().cycle().take(row.len() * rows).collect()
}

/// Scores of every table row for hidden row(s) `h`: `[rows, |I| + 2]`.
fn table_logits(model: &Model, tape: &mut Tape, h: Var) -> Result<Var> {
    let table = tape.param(&model.store, model.enc.item_emb);
    tape.matmul_nt(h, table)
}

fn last_row(tape: &mut Tape, h: &HiddenStates) -> Result<Var> {
    let t = h.last_real().ok_or_else(|| Error::InvalidShape("sequence has no real items".into()))?;
    tape.slice_rows(h.states, t, 1)
}

/// Probability of each item at the last position of `masked` (whose last
/// real slot holds the mask token). Entry `i - 1` is item `i`.
pub fn next_item_distribution(model: &Model, masked: &[ItemId]) -> Result<Vec<Scalar>> {
    let mut tape = Tape::inference();
    let h = rec_hidden(model, &mut tape, masked, false)?;
    let row = last_row(&mut tape, &h)?;
    let logits = table_logits(model, &mut tape, row)?;
    let probs = tape.softmax_masked(logits, &item_mask(&model.cfg, 1))?;
    Ok(tape.value(probs).data()[1..=model.cfg.item_count].to_vec())
}

/// Inference input: the history (its most recent part if needed) followed
/// by the mask token.
pub fn inference_input(cfg: &ModelConfig, history: &[ItemId]) -> Vec<ItemId> {
    let keep = cfg.max_aug_len - 1;
    let mut ids = history[history.len().saturating_sub(keep)..].to_vec();
    ids.push(cfg.mask_id());
    ids
}

/// Unnormalized score of every item (entry `i - 1` is item `i`) for the
/// position after `history`.
pub fn score_items(model: &Model, history: &[ItemId]) -> Result<Vec<Scalar>> {
    let mut tape = Tape::inference();
    let h = rec_hidden(model, &mut tape, &inference_input(&model.cfg, history), false)?;
    let row = last_row(&mut tape, &h)?;
    let logits = table_logits(model, &mut tape, row)?;
    Ok(tape.value(logits).data()[1..=model.cfg.item_count].to_vec())
}

/// Candidates ordered by descending score, ties by ascending id, cut to `k`.
/// `scores[j]` belongs to `candidates[j]`.
pub fn rank_candidates(candidates: &[ItemId], scores: &[Scalar], k: usize) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    order.into_iter().take(k).map(|j| candidates[j]).collect()
}

/// Top-`k` items after `history`, among `candidates` or the whole catalog.
pub fn recommend_topk(model: &Model, history: &[ItemId], candidates: Option<&[ItemId]>, k: usize) -> Result<Vec<ItemId>> {
    let all = score_items(model, history)?;
    let catalog: Vec<ItemId>;
    let cands = match candidates {
        Some(c) => c,
        None => {
            catalog = (1..=model.cfg.item_count).collect();
            &catalog
        }
    };
    let mut scores = Vec::with_capacity(cands.len());
    for &c in cands {
        if c == PAD || c > model.cfg.item_count {
            return Err(Error::InvalidId { id: c, rows: model.cfg.item_count + 1 });
        }
        scores.push(all[c - 1]);
    }
    Ok(rank_candidates(cands, &scores, k))
}

/// Training example from a prefix: context plus mask token as input, the
/// prefix's last item as target. `None` for prefixes shorter than two.
pub fn training_example(cfg: &ModelConfig, prefix: &[ItemId]) -> Option<(Vec<ItemId>, ItemId)> {
    let (&target, context) = prefix.split_last()?;
    if context.is_empty() {
        return None;
    }
    Some((inference_input(cfg, context), target))
}

/// Cross-entropy of the masked last position of each row, and that
/// position's hidden row.
fn masked_rec_terms(model: &Model, tape: &mut Tape, input: &[ItemId], target: ItemId, train: bool) -> Result<(Var, Var)> {
    let h = rec_hidden(model, tape, input, train)?;
    let row = last_row(tape, &h)?;
    let logits = table_logits(model, tape, row)?;
    let ce = tape.cross_entropy_masked(logits, &[target], &item_mask(&model.cfg, 1))?;
    // The context's last real position sees exactly the context.
    let ctx_row = match h.pad.iter().rposition(|p| !p).and_then(|t| t.checked_sub(1)) {
        Some(t) if !h.pad[t] => tape.slice_rows(h.states, t, 1)?,
        _ => row,
    };
    Ok((ce, ctx_row))
}

/// Batch-mean next-item cross-entropy over train prefixes.
pub fn rec_loss(model: &Model, tape: &mut Tape, prefixes: &[Vec<ItemId>], train: bool) -> Result<Var> {
    let mut terms = Vec::new();
    for p in prefixes {
        if let Some((input, target)) = training_example(&model.cfg, p) {
            terms.push(masked_rec_terms(model, tape, &input, target, train)?.0);
        }
    }
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Config("batch has no usable training rows".into()));
    }
    let stacked = tape.concat_rows(terms)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / terms.len() as Scalar))
}

/// How the two augmented views are produced and which losses apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Learned view plus random view, with the triplet term.
    #[default]
    Full,
    /// Two random views, no augmenter and no triplet term.
    Base,
    /// Like `Full` without the triplet term.
    WoTri,
    /// Both views sampled from the augmenter.
    DuoAug,
    /// Trained like `Full`; test histories are augmented before scoring.
    TestAug,
    /// Like `Full` with the restoration loss added and the augmenter trainable.
    CoTrain,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Full, Mode::Base, Mode::WoTri, Mode::DuoAug, Mode::TestAug, Mode::CoTrain];

    /// Whether this mode needs a trained augmenter before the recommender phase.
    pub fn needs_augmenter(self) -> bool {
        !matches!(self, Mode::Base | Mode::CoTrain)
    }

    pub fn uses_triplet(self) -> bool {
        !matches!(self, Mode::Base | Mode::WoTri)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Base => "base",
            Mode::WoTri => "wo_tri",
            Mode::DuoAug => "duoaug",
            Mode::TestAug => "testaug",
            Mode::CoTrain => "cotrain",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected full|base|wo_tri|duoaug|testaug|cotrain)")))
    }
}

/// Weights and view settings of the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub alpha: f64,
    pub beta: f64,
    pub contrast: ContrastConfig,
    pub pooling: Pooling,
    pub aug: AugConfig,
    pub corruption: CorruptionConfig,
    /// Whether the shared encoder keeps training in this phase.
    pub train_encoder: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            alpha: 0.1,
            beta: 0.005,
            contrast: ContrastConfig::default(),
            pooling: Pooling::Last,
            aug: AugConfig::default(),
            corruption: CorruptionConfig::default(),
            train_encoder: true,
        }
    }
}

/// Loss terms of one joint step; unused terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub cl: f64,
    pub tri: f64,
    pub aug: f64,
}

/// The two augmented views of a context under `mode`.
pub fn make_views(model: &Model, context: &[ItemId], cfg: &JointConfig, mode: Mode, seed: u64) -> Result<(Vec<ItemId>, Vec<ItemId>)> {
    let mask = model.cfg.mask_id();
    let random = |tag: u64| random_augment(context, &cfg.aug, mask, derive_seed(seed, &[tag])).1;
    Ok(match mode {
        Mode::Base => (random(1), random(2)),
        Mode::DuoAug => (
            augment_sequence(model, context, Decoding::Sample { seed: derive_seed(seed, &[3]) })?,
            augment_sequence(model, context, Decoding::Sample { seed: derive_seed(seed, &[4]) })?,
        ),
        Mode::Full | Mode::WoTri | Mode::TestAug | Mode::CoTrain => {
            (augment_sequence(model, context, Decoding::Greedy)?, random(2))
        }
    })
}

/// Joint objective `L_rec + alpha * L_cl + beta * L_tri` on a batch of
/// train prefixes (plus the restoration loss in co-training). `seed`
/// keys the random views and corruptions of this step.
pub fn joint_loss(
    model: &Model,
    tape: &mut Tape,
    users: &[&str],
    prefixes: &[Vec<ItemId>],
    cfg: &JointConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Var, LossParts)> {
    let beta = if mode.uses_triplet() { cfg.beta } else { 0.0 };
    let mut rec_terms = Vec::new();
    let mut raw = Vec::new();
    let mut contexts = Vec::new();
    for (u, p) in users.iter().zip(prefixes) {
        if let Some((input, target)) = training_example(&model.cfg, p) {
            let (ce, ctx_row) = masked_rec_terms(model, tape, &input, target, true)?;
            rec_terms.push(ce);
            raw.push(ctx_row);
            contexts.push((*u, &p[..p.len() - 1]));
        }
    }
    let rec = mean_of(tape, &rec_terms)?;
    let mut parts = LossParts { rec: tape.value(rec).item() as f64, ..Default::default() };
    let mut total = rec;

    if (cfg.alpha != 0.0 && contexts.len() >= 2) || beta != 0.0 {
        let mut a1 = Vec::new();
        let mut a2 = Vec::new();
        for (u, ctx) in &contexts {
            let (v1, v2) = make_views(model, ctx, cfg, mode, derive_seed(seed, &[hash_str(u)]))?;
            a1.push(sequence_repr(model, tape, &v1, cfg.pooling, true)?);
            a2.push(sequence_repr(model, tape, &v2, cfg.pooling, true)?);
        }
        if cfg.alpha != 0.0 && contexts.len() >= 2 {
            let cl = cl_loss(tape, &a1, &a2, &cfg.contrast)?;
            parts.cl = tape.value(cl).item() as f64;
            let w = tape.scale(cl, cfg.alpha as Scalar);
            total = tape.add(total, w)?;
        }
        if beta != 0.0 {
            let tri = triplet_loss(tape, &raw, &a1, &a2, &cfg.contrast)?;
            parts.tri = tape.value(tri).item() as f64;
            let w = tape.scale(tri, beta as Scalar);
            total = tape.add(total, w)?;
        }
    }
    if mode == Mode::CoTrain {
        let records: Vec<_> = users
            .iter()
            .zip(prefixes)
            .filter(|(_, p)| !p.is_empty())
            .map(|(u, p)| {
                corrupt_sequence(p, &cfg.corruption, model.cfg.item_count, derive_seed(seed, &[0x636f, hash_str(u)]))
            })
            .collect();
        let aug = augmenter_loss(model, tape, &records, true)?;
        parts.aug = tape.value(aug).item() as f64;
        total = tape.add(total, aug)?;
    }
    parts.total = tape.value(total).item() as f64;
    Ok((total, parts))
}

/// Parameters updated in the recommender phase under `mode`.
pub fn phase_two_params(model: &Model, mode: Mode, train_encoder: bool) -> Vec<crate::numkernel::ParamId> {
    let mut ids = model.recommender_params();
    if train_encoder || mode == Mode::CoTrain {
        ids.extend(model.encoder_params());
    }
    if mode == Mode::CoTrain {
        ids.extend(model.augmenter_params());
    }
    ids.sort_by_key(|p| p.index());
    ids
}

/// One optimizer step on the joint objective. `adam` must track
/// `phase_two_params(model, mode, cfg.train_encoder)`.
pub fn joint_step(
    model: &mut Model,
    adam: &mut AdamState,
    users: &[&str],
    prefixes: &[Vec<ItemId>],
    cfg: &JointConfig,
    mode: Mode,
    seed: u64,
) -> Result<LossParts> {
    let mut tape = Tape::new(seed);
    let trainable = phase_two_params(model, mode, cfg.train_encoder);
    let frozen: Vec<_> = model.store.ids().filter(|id| !trainable.contains(id)).collect();
    tape.freeze(frozen);
    let (loss, parts) = joint_loss(model, &mut tape, users, prefixes, cfg, mode, seed)?;
    tape.backward(loss)?;
    model.store.accumulate_grads(&tape);
    model.store.ensure_grads(&trainable);
    adam_step(&mut model.store, adam)?;
    Ok(parts)
}

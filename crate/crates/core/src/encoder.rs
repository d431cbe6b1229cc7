//! Shared Transformer encoder: item + position embeddings followed by
//! causal self-attention blocks. The block stack is reused by the
//! recommender and by the augmenter's reverse generator.

use crate::data::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numkernel::{xavier_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::derive_seed;

/// Architecture hyperparameters shared by every component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub item_count: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Longest sequence any component may encode.
    pub max_aug_len: usize,
    /// Longest run the reverse generator may insert at one position.
    pub max_insert: usize,
    /// Whether attention is restricted to earlier positions.
    pub causal: bool,
}

impl ModelConfig {
    pub fn new(item_count: usize) -> Self {
        ModelConfig {
            item_count,
            emb_dim: 64,
            layers: 1,
            heads: 1,
            dropout: 0.5,
            max_aug_len: 60,
            max_insert: 5,
            causal: true,
        }
    }

    pub fn mask_id(&self) -> ItemId {
        self.item_count + 1
    }

    /// Rows in the item table: padding, items, mask.
    pub fn table_rows(&self) -> usize {
        self.item_count + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_count == 0 || self.emb_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.emb_dim % self.heads != 0 {
            return Err(Error::Config(format!("embedding size {} not divisible by {} heads", self.emb_dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(1..=5).contains(&self.max_insert) {
            return Err(Error::Config(format!("max insert run {} outside 1..=5", self.max_insert)));
        }
        Ok(())
    }
}

/// Weights of one post-norm Transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub(crate) fn init_weight(store: &mut ParamStore, name: String, shape: &[usize], seed: u64) -> Result<ParamId> {
    let t = xavier_init(shape, derive_seed(seed, &[crate::rng::hash_str(&name)]))?;
    store.insert(name, t)
}

fn init_const(store: &mut ParamStore, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
    store.insert(name, Tensor::full(shape.to_vec(), value as _)?)
}

impl BlockParams {
    pub fn register(store: &mut ParamStore, prefix: &str, e: usize, seed: u64) -> Result<Self> {
        let f = 4 * e;
        let w = |s: &mut ParamStore, n: &str, shape: &[usize]| init_weight(s, format!("{prefix}.{n}"), shape, seed);
        let c = |s: &mut ParamStore, n: &str, shape: &[usize], v: f64| init_const(s, format!("{prefix}.{n}"), shape, v);
        Ok(BlockParams {
            wq: w(store, "wq", &[e, e])?,
            bq: c(store, "bq", &[e], 0.0)?,
            wk: w(store, "wk", &[e, e])?,
            bk: c(store, "bk", &[e], 0.0)?,
            wv: w(store, "wv", &[e, e])?,
            bv: c(store, "bv", &[e], 0.0)?,
            wo: w(store, "wo", &[e, e])?,
            bo: c(store, "bo", &[e], 0.0)?,
            ln1_g: c(store, "ln1_g", &[e], 1.0)?,
            ln1_b: c(store, "ln1_b", &[e], 0.0)?,
            w1: w(store, "w1", &[e, f])?,
            b1: c(store, "b1", &[f], 0.0)?,
            w2: w(store, "w2", &[f, e])?,
            b2: c(store, "b2", &[e], 0.0)?,
            ln2_g: c(store, "ln2_g", &[e], 1.0)?,
            ln2_b: c(store, "ln2_b", &[e], 0.0)?,
        })
    }

    /// Attention output projection and FFN output layer; zeroing these
    /// reduces the block to its residual path.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.wo, self.bo, self.w2, self.b2]
    }

    fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    /// Self-attention and position-wise FFN, each followed by residual add
    /// and layer norm. `allowed[q * n + k]` says whether query `q` may
    /// attend to key `k`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        allowed: &[bool],
        cfg: &ModelConfig,
        train: bool,
    ) -> Result<Var> {
        let e = cfg.emb_dim;
        let dh = e / cfg.heads;
        let q = Self::linear(tape, store, x, self.wq, self.bq)?;
        let k = Self::linear(tape, store, x, self.wk, self.bk)?;
        let v = Self::linear(tape, store, x, self.wv, self.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale as _);
            let attn = tape.softmax_masked(scores, allowed)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn_out = Self::linear(tape, store, ctx, self.wo, self.bo)?;
        let attn_out = tape.dropout(attn_out, cfg.dropout, train)?;
        let res1 = tape.add(x, attn_out)?;
        let (g1, b1) = (tape.param(store, self.ln1_g), tape.param(store, self.ln1_b));
        let x1 = tape.layer_norm(res1, g1, b1)?;
        let hidden = Self::linear(tape, store, x1, self.w1, self.b1)?;
        let hidden = tape.relu(hidden);
        let ffn = Self::linear(tape, store, hidden, self.w2, self.b2)?;
        let ffn = tape.dropout(ffn, cfg.dropout, train)?;
        let res2 = tape.add(x1, ffn)?;
        let (g2, b2) = (tape.param(store, self.ln2_g), tape.param(store, self.ln2_b));
        tape.layer_norm(res2, g2, b2)
    }
}

/// Attention mask for a sequence: keys at padding positions are never
/// visible, and with `causal` a query only sees keys at or before it.
pub fn attention_mask(pad: &[bool], causal: bool) -> Vec<bool> {
    let n = pad.len();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = !pad[k] && (!causal || k <= q);
        }
    }
    allowed
}

/// Item table, position table, and block stack of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let e = cfg.emb_dim;
        let item_emb = init_weight(store, "enc.item_emb".into(), &[cfg.table_rows(), e], seed)?;
        let pos_emb = init_weight(store, "enc.pos_emb".into(), &[cfg.max_aug_len, e], seed)?;
        let blocks = (0..cfg.layers)
            .map(|l| BlockParams::register(store, &format!("enc.block{l}"), e, seed))
            .collect::<Result<_>>()?;
        Ok(EncoderParams { item_emb, pos_emb, blocks })
    }
}

/// Hidden states of one sequence and which rows are padding.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub states: Var,
    pub pad: Vec<bool>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    /// Index of the last non-padding row.
    pub fn last_real(&self) -> Option<usize> {
        self.pad.iter().rposition(|p| !p)
    }
}

/// `H0[t] = E[ids[t]] + P[pos(t)]` where `pos` counts only non-padding
/// tokens, followed by dropout in training.
pub fn embed_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    ids: &[ItemId],
    cfg: &ModelConfig,
    train: bool,
) -> Result<HiddenStates> {
    if ids.len() > cfg.max_aug_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_aug_len });
    }
    if ids.is_empty() {
        return Err(Error::InvalidShape("cannot embed an empty sequence".into()));
    }
    let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mut positions = Vec::with_capacity(ids.len());
    let mut next = 0;
    for &p in &pad {
        positions.push(next);
        if !p {
            next += 1;
        }
    }
    let table = tape.param(store, enc.item_emb);
    let items = tape.embedding_lookup(table, ids)?;
    let pos_table = tape.param(store, enc.pos_emb);
    let pos = tape.embedding_lookup(pos_table, &positions)?;
    let h0 = tape.add(items, pos)?;
    let h0 = tape.dropout(h0, cfg.dropout, train)?;
    Ok(HiddenStates { states: h0, pad })
}

/// Runs `blocks` over `input`.
pub fn transformer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    input: &HiddenStates,
    cfg: &ModelConfig,
    train: bool,
) -> Result<HiddenStates> {
    let allowed = attention_mask(&input.pad, cfg.causal);
    let mut x = input.states;
    for block in blocks {
        x = block.forward(tape, store, x, &allowed, cfg, train)?;
    }
    Ok(HiddenStates { states: x, pad: input.pad.clone() })
}

/// Embedding followed by the encoder blocks: `H_e` for `ids`.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    ids: &[ItemId],
    cfg: &ModelConfig,
    train: bool,
) -> Result<HiddenStates> {
    let h0 = embed_sequence(tape, store, enc, ids, cfg, train)?;
    transformer_forward(tape, store, &enc.blocks, &h0, cfg, train)
}

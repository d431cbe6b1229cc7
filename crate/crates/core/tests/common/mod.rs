#![allow(dead_code)]

pub mod oracles;

use std::collections::HashMap;

use seqaug::data::{build_sequences, five_core_filter, leave_one_out_split, ItemId, SplitDataset, Vocabulary};
use seqaug::encoder::ModelConfig;
use seqaug::model::Model;
use seqaug::numkernel::{ParamId, Scalar, Tape, Var};
use seqaug::synthgen::{generate, item_token, SynthData, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// e=8, L=1, |I|=20.
pub fn toy_model(seed: u64, dropout: f64) -> Model {
    let mut cfg = ModelConfig::new(20);
    cfg.emb_dim = 8;
    cfg.dropout = dropout;
    Model::new(cfg, seed).unwrap()
}

pub fn random_seq(rng: &mut ChaCha8Rng, items: usize, min: usize, max: usize) -> Vec<ItemId> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(1..=items)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-tensor directional derivative check: for every parameter the loss
/// touches, compares `g . v` against a central difference along a random
/// direction `v` (step 1e-6, retried at 1e-7). Returns `(name, relative error)` pairs.
pub fn directional_grad_check(
    model: &Model,
    tape_seed: u64,
    dir_seed: u64,
    loss: &dyn Fn(&Model, &mut Tape) -> Var,
) -> Vec<(String, f64)> {
    let mut tape = Tape::new(tape_seed);
    let l = loss(model, &mut tape);
    tape.backward(l).unwrap();
    let grads: HashMap<ParamId, Vec<Scalar>> = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    let loss_scale = (tape.value(l).item() as f64).abs().max(1.0);
    let eval = |m: &Model| {
        let mut t = Tape::new(tape_seed);
        let v = loss(m, &mut t);
        t.value(v).item() as f64
    };
    let mut r = rng(dir_seed);
    let mut ids: Vec<_> = grads.keys().copied().collect();
    ids.sort_by_key(|p| p.index());
    let mut out = Vec::new();
    for id in ids {
        let g = &grads[&id];
        let dir: Vec<f64> = (0..g.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let analytic: f64 = g.iter().zip(&dir).map(|(a, d)| *a as f64 * d).sum();
        let base = model.store.get(id).data().to_vec();
        let central = |h: f64| {
            let shifted = |step: f64| {
                let mut m = model.clone();
                let data = base.iter().zip(&dir).map(|(x, d)| (*x as f64 + step * d) as Scalar).collect();
                m.store.set_data(id, data).unwrap();
                eval(&m)
            };
            (shifted(h) - shifted(-h)) / (2.0 * h)
        };
        let rel = |fd: f64| {
            let diff = (analytic - fd).abs();
            // Rounding noise of the difference quotient grows with |L| / h.
            if diff <= 1e-8 * loss_scale {
                0.0
            } else {
                diff / analytic.abs().max(fd.abs())
            }
        };
        // A relu kink inside the stencil spoils one step size but not both.
        let mut err = rel(central(1e-6));
        if err > 1e-4 {
            err = err.min(rel(central(1e-7)));
        }
        out.push((model.store.name(id).to_string(), err));
    }
    out
}

/// Synthetic dataset through the standard preprocessing pipeline.
pub fn synth_split(spec: &SynthSpec) -> (SynthData, SplitDataset) {
    let data = generate(spec).unwrap();
    let filtered = five_core_filter(data.interactions.clone());
    let vocab = Vocabulary::from_tokens((1..=spec.item_count).map(|i| item_token(i, spec.item_count)).collect());
    let seqs = build_sequences(&filtered, &vocab, 50);
    let split = leave_one_out_split(&seqs, spec.item_count);
    (data, split)
}

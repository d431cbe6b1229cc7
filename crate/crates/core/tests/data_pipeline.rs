//! Filtering, splitting, negative sampling and preprocessing.

mod common;

use std::collections::HashSet;

use common::oracles::five_core;
use common::{rng, synth_split};
use rand::Rng;
use seqaug::data::{
    five_core_filter, leave_one_out_split, read_sequences, sample_negatives, DatasetStats, Interaction, ItemSequence,
};
use seqaug::eval::NEGATIVES;
use seqaug::pipeline::{preprocess, TimeWindow, ITEMS_FILE, SEQUENCES_FILE, STATS_FILE};
use seqaug::synthgen::SynthSpec;

fn random_graph(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Interaction> {
    let users = r.gen_range(3..40);
    let items = r.gen_range(3..40);
    let density = r.gen_range(0.05..0.6);
    let mut out = Vec::new();
    for u in 0..users {
        for i in 0..items {
            // Occasional repeat interactions count separately.
            let n = if r.gen_bool(density) { 1 + usize::from(r.gen_bool(0.1)) } else { 0 };
            for _ in 0..n {
                out.push(Interaction::new(&format!("u{u}"), &format!("i{i}"), r.gen_range(0..1000)));
            }
        }
    }
    out
}

#[test]
fn five_core_matches_oracle_and_is_idempotent() {
    let mut r = rng(30);
    let mut nonempty = 0;
    for graph in 0..100 {
        let raw = random_graph(&mut r);
        let once = five_core_filter(raw.clone());
        assert_eq!(once, five_core(&raw), "graph {graph}");
        assert_eq!(five_core_filter(once.clone()), once, "graph {graph}");
        nonempty += usize::from(!once.is_empty());
    }
    // The sample covers both collapsing and surviving graphs.
    assert!((10..90).contains(&nonempty), "{nonempty}");
}

#[test]
fn leave_one_out_partitions_each_sequence() {
    let mut r = rng(31);
    let seqs: Vec<ItemSequence> = (0..300)
        .map(|u| ItemSequence { user: format!("u{u}"), items: common::random_seq(&mut r, 50, 1, 20) })
        .collect();
    let split = leave_one_out_split(&seqs, 50);
    let long: Vec<&ItemSequence> = seqs.iter().filter(|s| s.items.len() >= 3).collect();
    assert_eq!(split.len(), long.len());
    for (s, u) in long.iter().zip(&split.users) {
        assert_eq!(u.user, s.user);
        assert_eq!(u.full(), s.items);
        assert_eq!(u.train.len() + 2, s.items.len());
        assert_eq!(u.test, *s.items.last().unwrap());
        assert_eq!(u.valid, s.items[s.items.len() - 2]);
        assert_eq!(u.valid_history(), &s.items[..s.items.len() - 2]);
        assert_eq!(u.test_history(), &s.items[..s.items.len() - 1]);
    }
}

#[test]
fn negatives_are_disjoint_for_every_synthetic_user() {
    let (_, split) = synth_split(&SynthSpec::block_markov(500, 0.1, 3));
    assert!(split.len() > 400);
    for u in &split.users {
        let full = u.full();
        let seen: HashSet<_> = full.iter().collect();
        for (seed, target) in [(1, u.test), (2, u.valid)] {
            let c = sample_negatives(&u.user, &full, target, split.item_count, NEGATIVES, seed).unwrap();
            let negs: HashSet<_> = c.negatives.iter().collect();
            assert_eq!(negs.len(), NEGATIVES);
            assert!(c.negatives.iter().all(|n| !seen.contains(n) && (1..=split.item_count).contains(n)));
            assert_eq!(c.all()[0], target);
        }
    }
}

#[test]
fn density_of_half_filled_grid() {
    let seqs: Vec<ItemSequence> =
        (0..10).map(|u| ItemSequence { user: format!("u{u}"), items: (1..=5).collect() }).collect();
    let stats = DatasetStats::compute(&seqs, 10);
    assert_eq!((stats.users, stats.items, stats.records), (10, 10, 50));
    assert_eq!(stats.density, 0.5);
    assert_eq!(stats.avg_length, 5.0);
}

#[test]
fn preprocessing_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = seqaug::synthgen::generate(&SynthSpec::ring(200, 4)).unwrap();
    let raw = dir.path().join("raw.txt");
    data.write(&raw, &dir.path().join("truth.txt")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = preprocess(&raw, &a, TimeWindow::default(), 50).unwrap();
    let sb = preprocess(&raw, &b, TimeWindow::default(), 50).unwrap();
    assert_eq!(sa, sb);
    for f in [SEQUENCES_FILE, ITEMS_FILE, STATS_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (seqs, items) = read_sequences(a.join(SEQUENCES_FILE)).unwrap();
    assert_eq!((seqs.len(), items), (sa.users, sa.items));

    // A window that drops the first timestamps shortens every sequence.
    let w = dir.path().join("w");
    let sw = preprocess(&raw, &w, TimeWindow { since: Some(3), until: None }, 50).unwrap();
    assert_eq!(sw.records, sa.records - 2 * sa.users);
}

//! Naive reference implementations used as test oracles.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use seqaug::augops::{CorruptionRecord, EditOp};
use seqaug::data::{Interaction, ItemId};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// InfoNCE written as the double loop over anchors and candidates.
pub fn info_nce(a1: &[Vec<f64>], a2: &[Vec<f64>]) -> f64 {
    let n = a1.len();
    let views: Vec<&Vec<f64>> = a1.iter().chain(a2).collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = (i + n) % (2 * n);
        let num = dot(views[i], views[pos]).exp();
        let mut den = num;
        for j in 0..2 * n {
            if j != i && j != pos {
                den += dot(views[i], views[j]).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / (2 * n) as f64
}

/// HR, MRR and NDCG at `k` from a full sort of the candidate list, with the
/// target as the only relevant item. Ties are broken by ascending id.
pub fn ranked_metrics(cands: &[ItemId], scores: &[f64], target: ItemId, k: usize) -> (f64, f64, f64) {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(cands[a].cmp(&cands[b])));
    let (mut hr, mut mrr, mut dcg) = (0.0, 0.0, 0.0);
    for (pos, &j) in order.iter().take(k).enumerate() {
        if cands[j] == target {
            hr = 1.0;
            mrr = 1.0 / (pos + 1) as f64;
            dcg = 1.0 / ((pos + 2) as f64).log2();
        }
    }
    (hr, mrr, dcg)
}

/// Five-core by alternately stripping users and items until a full pass
/// removes nothing.
pub fn five_core(interactions: &[Interaction]) -> Vec<Interaction> {
    let mut alive: BTreeSet<usize> = (0..interactions.len()).collect();
    loop {
        let mut changed = false;
        for by_user in [true, false] {
            let mut count: HashMap<&str, usize> = HashMap::new();
            for &i in &alive {
                let it = &interactions[i];
                *count.entry(if by_user { &it.user } else { &it.item }).or_default() += 1;
            }
            let before = alive.len();
            alive.retain(|&i| {
                let it = &interactions[i];
                count[if by_user { it.user.as_str() } else { it.item.as_str() }] >= 5
            });
            changed |= alive.len() != before;
        }
        if !changed {
            return alive.into_iter().map(|i| interactions[i].clone()).collect();
        }
    }
}

/// Most frequent successor and predecessor of every item, counted over
/// clean sequences.
pub struct Bigrams {
    next: BTreeMap<ItemId, ItemId>,
    prev: BTreeMap<ItemId, ItemId>,
}

impl Bigrams {
    pub fn count<'a>(seqs: impl IntoIterator<Item = &'a Vec<ItemId>>) -> Self {
        let mut fwd: BTreeMap<ItemId, BTreeMap<ItemId, usize>> = BTreeMap::new();
        let mut bwd: BTreeMap<ItemId, BTreeMap<ItemId, usize>> = BTreeMap::new();
        for s in seqs {
            for w in s.windows(2) {
                *fwd.entry(w[0]).or_default().entry(w[1]).or_default() += 1;
                *bwd.entry(w[1]).or_default().entry(w[0]).or_default() += 1;
            }
        }
        let top = |m: BTreeMap<ItemId, BTreeMap<ItemId, usize>>| {
            m.into_iter().map(|(k, c)| (k, c.into_iter().max_by_key(|&(i, n)| (n, std::cmp::Reverse(i))).unwrap().0)).collect()
        };
        Bigrams { next: top(fwd), prev: top(bwd) }
    }

    /// Restoration accuracy of a left-to-right rule: an item that follows
    /// the last trusted item is kept, one reachable within `max_run` steps
    /// gets the gap inserted, anything else is deleted. Insertion targets
    /// are predicted teacher-forced as the predecessor of the previous
    /// token. Returns `(op correct, op total, insert correct, insert total)`.
    pub fn restore_accuracy(&self, records: &[CorruptionRecord], max_run: usize) -> (usize, usize, usize, usize) {
        let (mut oc, mut ot, mut ic, mut it) = (0, 0, 0, 0);
        for r in records {
            let mut trusted: Option<ItemId> = None;
            for (t, &item) in r.modified.iter().enumerate() {
                let guess = match trusted {
                    None => EditOp::Keep,
                    Some(p) => {
                        let mut cur = p;
                        let mut op = EditOp::Delete;
                        for step in 0..=max_run {
                            match self.next.get(&cur) {
                                Some(&n) if n == item => {
                                    op = if step == 0 { EditOp::Keep } else { EditOp::Insert };
                                    break;
                                }
                                Some(&n) => cur = n,
                                None => break,
                            }
                        }
                        op
                    }
                };
                ot += 1;
                oc += usize::from(guess == r.labels[t]);
                if guess != EditOp::Delete {
                    trusted = Some(item);
                }
                if r.labels[t] == EditOp::Insert {
                    let mut last = item;
                    for &target in &r.insert_targets[t] {
                        it += 1;
                        ic += usize::from(self.prev.get(&last) == Some(&target));
                        last = target;
                    }
                }
            }
            if let Some(tail) = &r.tail {
                // End-of-sequence slot: always a restoration point.
                ot += 1;
                oc += 1;
                let mut guess = trusted.and_then(|p| self.next.get(&p).copied());
                for &target in tail {
                    it += 1;
                    ic += usize::from(guess == Some(target));
                    guess = self.prev.get(&target).copied();
                }
            }
        }
        (oc, ot, ic, it)
    }
}

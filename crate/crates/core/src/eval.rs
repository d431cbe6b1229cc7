//! Sampled top-K evaluation (target plus uniformly drawn negatives),
//! metric reports, and the noisy-test-set simulation.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::augmenter::{augment_sequence, Decoding};
use crate::data::{sample_negatives, ItemId, ItemSequence, SplitDataset, UserSplit};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::Scalar;
use crate::recommender::score_items;
use crate::rng::{derive_seed, hash_str, rng_for};

/// Cutoffs reported for every metric.
pub const CUTOFFS: [usize; 3] = [5, 10, 20];
/// Negatives sampled per evaluated user.
pub const NEGATIVES: usize = 99;

/// 1-based rank of `target` by descending score; equal scores are ordered
/// by ascending item id.
pub fn rank_of_target(candidates: &[ItemId], scores: &[Scalar], target: ItemId) -> Result<usize> {
    let j = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::Protocol(format!("target {target} is not among the candidates")))?;
    let s = scores[j];
    let ahead = candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &x)| x > s || (x == s && c < target))
        .count();
    Ok(ahead + 1)
}

/// `(hit, reciprocal rank, ndcg)` at cutoff `k` for one relevant item.
pub fn user_metrics(rank: usize, k: usize) -> (f64, f64, f64) {
    if rank == 0 || rank > k {
        return (0.0, 0.0, 0.0);
    }
    let r = rank as f64;
    (1.0, 1.0 / r, 1.0 / (r + 1.0).log2())
}

/// Mean HR, MRR and NDCG at each cutoff in `CUTOFFS`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub hr: [f64; 3],
    pub mrr: [f64; 3],
    pub ndcg: [f64; 3],
    /// Users that contributed to the means.
    pub users: usize,
    /// Users skipped because too few negatives were available.
    pub excluded: usize,
}

impl MetricReport {
    /// Averages per-user ranks, accumulating in the given order.
    pub fn from_ranks(ranks: &[usize], excluded: usize) -> Self {
        let mut r = MetricReport { hr: [0.0; 3], mrr: [0.0; 3], ndcg: [0.0; 3], users: ranks.len(), excluded };
        for &rank in ranks {
            for (c, &k) in CUTOFFS.iter().enumerate() {
                let (h, m, n) = user_metrics(rank, k);
                r.hr[c] += h;
                r.mrr[c] += m;
                r.ndcg[c] += n;
            }
        }
        if !ranks.is_empty() {
            let n = ranks.len() as f64;
            for c in 0..3 {
                r.hr[c] /= n;
                r.mrr[c] /= n;
                r.ndcg[c] /= n;
            }
        }
        r
    }

    /// Named values in report order: HR, MRR, NDCG at each cutoff.
    pub fn values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(9);
        for (name, vals) in [("HR", &self.hr), ("MRR", &self.mrr), ("NDCG", &self.ndcg)] {
            for (c, &k) in CUTOFFS.iter().enumerate() {
                out.push((format!("{name}@{k}"), vals[c]));
            }
        }
        out
    }

    /// Total of the nine metric values.
    pub fn sum(&self) -> f64 {
        self.values().iter().map(|(_, v)| v).sum()
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|c| self.hr[c])
    }

    /// One `metric=value` line per metric, then `Sum`, `users`, `excluded`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.values() {
            s.push_str(&format!("{name}={v}\n"));
        }
        s.push_str(&format!("Sum={}\nusers={}\nexcluded={}\n", self.sum(), self.users, self.excluded));
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.values().into_iter().map(|(n, _)| n).collect();
        for n in &names {
            write!(f, "{n:>9}")?;
        }
        writeln!(f, "{:>9}", "Sum")?;
        for (_, v) in self.values() {
            write!(f, "{v:>9.4}")?;
        }
        writeln!(f, "{:>9.4}", self.sum())?;
        write!(f, "users={} excluded={}", self.users, self.excluded)
    }
}

/// Which held-out item is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Second-to-last item; history is the train prefix.
    Valid,
    /// Last item; history includes the validation item.
    Test,
}

impl EvalSplit {
    fn tag(self) -> u64 {
        match self {
            EvalSplit::Valid => 0x7661_6c69,
            EvalSplit::Test => 0x7465_7374,
        }
    }

    fn case(self, u: &UserSplit) -> (Vec<ItemId>, ItemId) {
        match self {
            EvalSplit::Valid => (u.valid_history().to_vec(), u.valid),
            EvalSplit::Test => (u.test_history(), u.test),
        }
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected valid|test)"))),
        }
    }
}

/// Scores candidate items for a user given their history.
pub trait Scorer {
    fn score(&self, user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<Scalar>>;
}

/// Scores with the trained recommender. With `augment_history` the history
/// is first rewritten by the augmenter.
pub struct ModelScorer<'m> {
    pub model: &'m Model,
    pub augment_history: bool,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, _user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<Scalar>> {
        let all = if self.augment_history && !history.is_empty() {
            score_items(self.model, &augment_sequence(self.model, history, Decoding::Greedy)?)?
        } else {
            score_items(self.model, history)?
        };
        Ok(candidates.iter().map(|&c| all[c - 1]).collect())
    }
}

/// Ranks each user's held-out item among `NEGATIVES` sampled items and
/// averages the metrics. Users are processed in ascending id order, so the
/// report does not depend on the order of `data.users`.
pub fn evaluate(data: &SplitDataset, split: EvalSplit, scorer: &dyn Scorer, seed: u64) -> Result<MetricReport> {
    let mut users: Vec<&UserSplit> = data.users.iter().collect();
    users.sort_by(|a, b| a.user.cmp(&b.user));
    let neg_seed = derive_seed(seed, &[split.tag()]);
    let mut ranks = Vec::with_capacity(users.len());
    let mut excluded = 0;
    for u in users {
        let (history, target) = split.case(u);
        let cands = match sample_negatives(&u.user, &u.full(), target, data.item_count, NEGATIVES, neg_seed) {
            Ok(c) => c.all(),
            Err(Error::PoolTooSmall { .. }) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let scores = scorer.score(&u.user, &history, &cands)?;
        ranks.push(rank_of_target(&cands, &scores, target)?);
    }
    if excluded > 0 {
        log::warn!("{excluded} users excluded: fewer than {NEGATIVES} uninteracted items");
    }
    Ok(MetricReport::from_ranks(&ranks, excluded))
}

/// Relative change of the noisy-test Sum against the clean one.
pub fn dist(sum_noisy: f64, sum_raw: f64) -> Result<f64> {
    if sum_raw <= 0.0 || !sum_raw.is_finite() {
        return Err(Error::Domain(format!("reference sum must be positive, got {sum_raw}")));
    }
    Ok((sum_noisy - sum_raw) / sum_raw)
}

/// Relative weights of keep, delete and insert in the test-set simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisySimConfig {
    pub ratio: [f64; 3],
    pub seed: u64,
}

impl Default for NoisySimConfig {
    fn default() -> Self {
        NoisySimConfig { ratio: [4.0, 3.0, 3.0], seed: 0 }
    }
}

/// How often each operation was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    pub keep: usize,
    pub delete: usize,
    pub insert: usize,
}

impl OpCounts {
    pub fn total(&self) -> usize {
        self.keep + self.delete + self.insert
    }
}

/// Keeps, deletes, or prefixes with one uniformly drawn item each element
/// of every sequence except the last. If every earlier element is deleted,
/// the element before the last is kept.
pub fn simulate_noisy_testset(
    sequences: &[ItemSequence],
    cfg: &NoisySimConfig,
    item_count: usize,
) -> Result<(Vec<ItemSequence>, OpCounts)> {
    if cfg.ratio.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) || cfg.ratio.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid noise ratio {:?}", cfg.ratio)));
    }
    let dist = WeightedIndex::new(cfg.ratio).map_err(|e| Error::Config(e.to_string()))?;
    let mut counts = OpCounts::default();
    let mut out = Vec::with_capacity(sequences.len());
    for s in sequences {
        let mut rng = rng_for(cfg.seed, &[0x6e6f_6973, hash_str(&s.user)]);
        let Some((&last, body)) = s.items.split_last() else {
            out.push(s.clone());
            continue;
        };
        let mut items = Vec::with_capacity(s.items.len() + 4);
        let mut kept_any = false;
        for &item in body {
            match dist.sample(&mut rng) {
                0 => {
                    counts.keep += 1;
                    items.push(item);
                    kept_any = true;
                }
                1 => counts.delete += 1,
                _ => {
                    counts.insert += 1;
                    items.push(rng.gen_range(1..=item_count));
                    items.push(item);
                    kept_any = true;
                }
            }
        }
        if !kept_any {
            if let Some(&prev) = body.last() {
                items.push(prev);
            }
        }
        items.push(last);
        out.push(ItemSequence { user: s.user.clone(), items });
    }
    Ok((out, counts))
}

/// Leave-one-out view of noisy full sequences: the last item is the test
/// target, the one before it the validation item.
pub fn noisy_split(sequences: &[ItemSequence], item_count: usize) -> SplitDataset {
    let users = sequences
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            UserSplit { user: s.user.clone(), train: s.items[..n - 2].to_vec(), valid: s.items[n - 2], test: s.items[n - 1] }
        })
        .collect();
    SplitDataset { users, item_count }
}

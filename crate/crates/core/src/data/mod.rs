//! Interaction-log ingestion and the leave-one-out preprocessing pipeline.

mod batch;
mod filter;
mod negatives;
mod seqfile;
mod split;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub use batch::{make_batches, SequenceBatch};
pub use filter::five_core_filter;
pub use negatives::{sample_negatives, EvalCandidates};
pub use seqfile::{read_sequences, write_sequences, SEQFILE_HEADER};
pub use split::{leave_one_out_split, SplitDataset, UserSplit};

/// Dense item id. `0` is padding, items occupy `1..=item_count`, and
/// `item_count + 1` is the mask token.
pub type ItemId = usize;

pub const PAD: ItemId = 0;

/// Longest raw sequence kept per user; older interactions are dropped.
pub const MAX_SEQ_LEN: usize = 50;

/// Minimum interactions per user and per item after filtering.
pub const CORE: usize = 5;

/// One line of an interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: &str, item: &str, timestamp: i64) -> Self {
        Interaction { user: user.to_string(), item: item.to_string(), timestamp }
    }
}

/// Reads `user item timestamp` triples, one per line, separated by tabs or
/// spaces. Blank lines are skipped.
pub fn parse_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions_str(&text, &path.display().to_string())
}

pub fn parse_interactions_str(text: &str, origin: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.to_string(), line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected `user item timestamp`, found {} field(s)", fields.len())));
        }
        let timestamp = fields[2]
            .parse::<i64>()
            .map_err(|_| err(format!("timestamp `{}` is not an integer", fields[2])))?;
        out.push(Interaction::new(fields[0], fields[1], timestamp));
    }
    Ok(out)
}

/// Bidirectional map between item tokens and dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl Vocabulary {
    /// Assigns ids `1..=n` to the distinct item tokens in sorted order.
    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        let mut tokens: Vec<String> = interactions.iter().map(|i| i.item.clone()).collect();
        tokens.sort();
        tokens.dedup();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        Vocabulary { tokens, index }
    }

    /// Vocabulary whose tokens are just the decimal ids `1..=n`.
    pub fn anonymous(item_count: usize) -> Self {
        Self::from_tokens((1..=item_count).map(|i| i.to_string()).collect())
    }

    pub fn item_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask(&self) -> ItemId {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> Option<ItemId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: ItemId) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.tokens.get(i)).map(String::as_str)
    }
}

/// One user's chronologically ordered items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSequence {
    pub user: String,
    pub items: Vec<ItemId>,
}

/// Groups interactions per user, orders each user's items by timestamp
/// (file order breaks ties) and keeps the `max_len` most recent. Users are
/// returned sorted by id; unknown item tokens are skipped.
pub fn build_sequences(interactions: &[Interaction], vocab: &Vocabulary, max_len: usize) -> Vec<ItemSequence> {
    let mut per_user: HashMap<&str, Vec<(i64, usize, ItemId)>> = HashMap::new();
    for (order, it) in interactions.iter().enumerate() {
        if let Some(id) = vocab.id(&it.item) {
            per_user.entry(it.user.as_str()).or_default().push((it.timestamp, order, id));
        }
    }
    let mut users: Vec<&str> = per_user.keys().copied().collect();
    users.sort_unstable();
    users
        .into_iter()
        .map(|u| {
            let mut rows = per_user.remove(u).unwrap();
            rows.sort_by_key(|&(ts, order, _)| (ts, order));
            let skip = rows.len().saturating_sub(max_len);
            ItemSequence { user: u.to_string(), items: rows[skip..].iter().map(|r| r.2).collect() }
        })
        .collect()
}

/// Dataset summary in the usual users/items/records/length/density form.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl DatasetStats {
    pub fn compute(sequences: &[ItemSequence], item_count: usize) -> Self {
        let users = sequences.len();
        let records: usize = sequences.iter().map(|s| s.items.len()).sum();
        let avg_length = if users == 0 { 0.0 } else { records as f64 / users as f64 };
        let cells = users * item_count;
        let density = if cells == 0 { 0.0 } else { records as f64 / cells as f64 };
        DatasetStats { users, items: item_count, records, avg_length, density }
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Users {} / Items {} / Records {} / Avg. length {:.2} / Density {:.4}%",
            self.users,
            self.items,
            self.records,
            self.avg_length,
            self.density * 100.0
        )
    }
}

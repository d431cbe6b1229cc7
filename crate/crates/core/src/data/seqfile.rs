//! Processed-sequence files: a `#seqrec-v1` header line, an optional
//! `#items=N` line, then `user_id: id id id ...` per user.

use std::fmt::Write as _;
use std::path::Path;

use super::{ItemId, ItemSequence};
use crate::error::{Error, Result};

pub const SEQFILE_HEADER: &str = "#seqrec-v1";

pub fn format_sequences(sequences: &[ItemSequence], item_count: usize) -> String {
    let mut out = String::new();
    out.push_str(SEQFILE_HEADER);
    out.push('\n');
    let _ = writeln!(out, "#items={item_count}");
    for s in sequences {
        out.push_str(&s.user);
        out.push(':');
        for id in &s.items {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
    }
    out
}

pub fn write_sequences(path: impl AsRef<Path>, sequences: &[ItemSequence], item_count: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_sequences(sequences, item_count)).map_err(|e| Error::io(path, e))
}

/// Returns the sequences and the item count (from `#items=`, or the largest
/// id seen when that line is absent).
pub fn read_sequences(path: impl AsRef<Path>) -> Result<(Vec<ItemSequence>, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequences(&text, &path.display().to_string())
}

pub fn parse_sequences(text: &str, origin: &str) -> Result<(Vec<ItemSequence>, usize)> {
    let err = |line: usize, msg: &str| Error::Parse { path: origin.to_string(), line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SEQFILE_HEADER => {}
        _ => return Err(err(1, "missing `#seqrec-v1` header")),
    }
    let mut declared = None;
    let mut max_id = 0;
    let mut seqs = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(v) = meta.strip_prefix("items=") {
                declared = Some(v.trim().parse::<usize>().map_err(|_| err(n + 1, "bad item count"))?);
            }
            continue;
        }
        let (user, rest) = line.split_once(':').ok_or_else(|| err(n + 1, "expected `user: ids`"))?;
        let items = rest
            .split_whitespace()
            .map(|t| t.parse::<ItemId>().ok().filter(|&id| id > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| err(n + 1, "item ids must be positive integers"))?;
        max_id = max_id.max(items.iter().copied().max().unwrap_or(0));
        seqs.push(ItemSequence { user: user.trim().to_string(), items });
    }
    let item_count = declared.unwrap_or(max_id);
    if max_id > item_count {
        return Err(err(2, "item id exceeds declared item count"));
    }
    Ok((seqs, item_count))
}

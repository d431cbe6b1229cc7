use rand::seq::SliceRandom;

use super::{ItemId, SplitDataset, PAD};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Training prefixes of a group of users, right-aligned and left-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    /// Indices into `SplitDataset::users`.
    pub users: Vec<usize>,
    /// One row per user, all of length `width`.
    pub ids: Vec<Vec<ItemId>>,
    pub width: usize,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Row `r` with its padding removed.
    pub fn row(&self, r: usize) -> &[ItemId] {
        let row = &self.ids[r];
        let start = row.iter().position(|&i| i != PAD).unwrap_or(row.len());
        &row[start..]
    }
}

/// Shuffles users with `seed` and groups them into batches of `batch_size`.
/// A trailing batch of one user is merged into the previous batch so every
/// batch has an in-batch negative.
pub fn make_batches(data: &SplitDataset, batch_size: usize, seed: u64) -> Result<Vec<SequenceBatch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x6261_7463]));
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    Ok(groups
        .into_iter()
        .map(|users| {
            let width = users.iter().map(|&u| data.users[u].train.len()).max().unwrap_or(0);
            let ids = users
                .iter()
                .map(|&u| {
                    let train = &data.users[u].train;
                    let mut row = vec![PAD; width - train.len()];
                    row.extend_from_slice(train);
                    row
                })
                .collect();
            SequenceBatch { users, ids, width }
        })
        .collect())
}

use log::warn;

use super::{ItemId, ItemSequence};

/// Leave-one-out split of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
}

impl UserSplit {
    /// Every item of the user in order: train prefix, validation, test.
    pub fn full(&self) -> Vec<ItemId> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v.push(self.test);
        v
    }

    /// History used to predict the validation item.
    pub fn valid_history(&self) -> &[ItemId] {
        &self.train
    }

    /// History used to predict the test item (includes the validation item).
    pub fn test_history(&self) -> Vec<ItemId> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub item_count: usize,
}

impl SplitDataset {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Last item is the test target, second to last the validation target, the
/// rest is the training prefix. Sequences shorter than three are skipped.
pub fn leave_one_out_split(sequences: &[ItemSequence], item_count: usize) -> SplitDataset {
    let mut users = Vec::with_capacity(sequences.len());
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            warn!("user {} has {} item(s); excluded from the split", s.user, n);
            continue;
        }
        users.push(UserSplit {
            user: s.user.clone(),
            train: s.items[..n - 2].to_vec(),
            valid: s.items[n - 2],
            test: s.items[n - 1],
        });
    }
    SplitDataset { users, item_count }
}

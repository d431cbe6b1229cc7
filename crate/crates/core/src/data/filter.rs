use std::collections::HashMap;

use super::{Interaction, CORE};

/// Repeatedly drops users and items with fewer than five interactions until
/// nothing changes. Input order of the survivors is preserved.
pub fn five_core_filter(interactions: Vec<Interaction>) -> Vec<Interaction> {
    let mut current = interactions;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for it in &current {
            *users.entry(it.user.as_str()).or_default() += 1;
            *items.entry(it.item.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|it| users[it.user.as_str()] >= CORE && items[it.item.as_str()] >= CORE)
            .collect();
        if keep.iter().all(|k| *k) {
            return current;
        }
        current = current.into_iter().zip(keep).filter_map(|(it, k)| k.then_some(it)).collect();
    }
}

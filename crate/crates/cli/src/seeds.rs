//! Per-task seeds derived from the master seed.

use sha2::{Digest, Sha256};

/// Stable 64-bit hash of `(master, stage, index)`. The stage name is length
/// prefixed so that no two distinct triples share an input.
pub fn child_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_inputs_give_distinct_seeds() {
        let a = child_seed(1, "pool", 0);
        assert_eq!(a, child_seed(1, "pool", 0));
        assert_ne!(a, child_seed(2, "pool", 0));
        assert_ne!(a, child_seed(1, "pool", 1));
        assert_ne!(a, child_seed(1, "train", 0));
        assert_ne!(child_seed(0, "ab", 0), child_seed(0, "a", 0));
    }
}

//! Seed derivation.
//!
//! Every random stream in a federation is derived from the master seed and the
//! coordinates of the job that consumes it (round, node, model), never from
//! scheduling order. That keeps node-level parallelism from perturbing results.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x6a09_e667_f3bc_c908, |acc, &w| mix64(acc ^ mix64(w)))
}

/// FNV-1a over bytes, finalized with [`mix64`].
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

pub fn hash_str(s: &str) -> u64 {
    hash_bytes(s.as_bytes())
}

/// Seed of node `node_id`'s work in round `round`.
pub fn round_seed(master: u64, round: u32, node_id: u32) -> u64 {
    master ^ hash_words(&[u64::from(round), u64::from(node_id)])
}

/// Seed for training roster config `label` on node `node_id`.
pub fn roster_seed(node_seed: u64, node_id: u32, label: &str) -> u64 {
    node_seed ^ hash_words(&[u64::from(node_id), hash_str(label)])
}

//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by a root seed plus a list of
//! labels (speaker id, utterance index, purpose tag). Derivation is a plain
//! FNV-1a fold finished with a SplitMix64 avalanche, so identical labels give
//! identical streams on every platform and run.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a label path.
pub fn derive(root: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    for label in labels {
        h = fnv1a(h, label.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    splitmix(h)
}

/// Derives a child seed from `root` and a label path ending in an index.
pub fn derive_indexed(root: u64, labels: &[&str], index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    for label in labels {
        h = fnv1a(h, label.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    h = fnv1a(h, &index.to_le_bytes());
    splitmix(h)
}

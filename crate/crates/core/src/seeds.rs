//! Stable derivation of child seeds from a master seed.
//!
//! `derive_seed(master, label, index)` hashes the little-endian bytes of
//! `master`, the UTF-8 bytes of `label`, and the little-endian bytes of
//! `index` with 64-bit FNV-1a, then applies the SplitMix64 finalizer. The
//! mapping is fixed and must not change between versions: result files
//! are only reproducible while it holds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    let h = fnv1a(h, label.as_bytes());
    let h = fnv1a(h, &index.to_le_bytes());
    splitmix64(h)
}

/// The generator used for every random stream in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    rng(derive_seed(master, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_values() {
        // Frozen outputs: changing these breaks reproducibility of stored results.
        assert_eq!(derive_seed(0, "", 0), splitmix64(fnv1a(fnv1a(fnv1a(FNV_OFFSET, &[0; 8]), b""), &[0; 8])));
        let a = derive_seed(7, "init", 0);
        assert_eq!(a, derive_seed(7, "init", 0));
        assert_ne!(a, derive_seed(7, "init", 1));
        assert_ne!(a, derive_seed(7, "data", 0));
        assert_ne!(a, derive_seed(8, "init", 0));
    }

    #[test]
    fn fnv_reference_vector() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c.
        assert_eq!(fnv1a(FNV_OFFSET, b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}

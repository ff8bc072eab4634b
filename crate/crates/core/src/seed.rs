//! Derivation of independent RNG seeds from one run seed.

use rand::SeedableRng;

use crate::autodiff::DropoutRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with a purpose tag and an index path into a new seed.
pub fn derive(base: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn rng(base: u64, tag: &str, path: &[u64]) -> DropoutRng {
    DropoutRng::seed_from_u64(derive(base, tag, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_by_tag_and_path() {
        let a = derive(7, "shuffle", &[1]);
        assert_eq!(a, derive(7, "shuffle", &[1]));
        assert_ne!(a, derive(7, "shuffle", &[2]));
        assert_ne!(a, derive(7, "dropout", &[1]));
        assert_ne!(a, derive(8, "shuffle", &[1]));
        assert_ne!(derive(0, "x", &[1, 2]), derive(0, "x", &[2, 1]));
    }
}

//! Seed derivation for nested deterministic randomness.
//!
//! Training stages hold one run seed; every prompt, step, and shuffle gets
//! its own child seed via [`derive`] so work items stay independent of
//! execution order (a requirement for the parallel build to match the
//! sequential one bit for bit).

/// One round of the splitmix64 output function.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of indices into a child seed. Order-sensitive:
/// `derive(&[s, 1, 2]) != derive(&[s, 2, 1])`.
pub fn derive(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        let s = 42;
        assert_ne!(derive(&[s, 1, 2]), derive(&[s, 2, 1]));
    }

    #[test]
    fn derive_separates_nearby_indices() {
        let base = derive(&[7, 0]);
        for i in 1..100u64 {
            assert_ne!(derive(&[7, i]), base);
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First three outputs of the splitmix64 stream seeded with 0,
        // cross-checked against the published reference implementation.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(splitmix64(0x9e3779b97f4a7c15), 0x6e789e6aa1b965f4);
        assert_eq!(splitmix64(0x9e3779b97f4a7c15u64.wrapping_mul(2)), 0x06c45d188009454f);
    }
}

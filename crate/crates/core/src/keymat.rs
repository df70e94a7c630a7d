//! Key material: subkey derivation, the ring permutation, the per-position
//! keystream and the keyed self-check digest.
//!
//! Everything here is built on the splitmix64 finalizer and is bit-exact, so
//! independent implementations agree on rings, keystreams and digests.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function applied to `x + GOLDEN_GAMMA`.
#[inline]
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// splitmix64 generator. The first output for seed `s` is `mix64(s)`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.state);
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        out
    }
}

impl Iterator for SplitMix64 {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.next_u64())
    }
}

/// Master secret plus the three subkeys derived from it.
///
/// `Debug` prints only the fingerprint so the master never ends up in logs.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct WatermarkKey {
    master: u64,
    pub perm_key: u64,
    pub ks_key: u64,
    pub digest_key: u64,
}

impl WatermarkKey {
    pub fn new(master: u64) -> Self {
        derive_subkeys(master)
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Public identifier of the key, safe to write into reports.
    pub fn fingerprint(&self) -> u64 {
        mix64(self.master)
    }
}

impl std::fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "WatermarkKey({:016x})", self.fingerprint())
    }
}

pub fn derive_subkeys(master: u64) -> WatermarkKey {
    let mut stream = SplitMix64::new(master);
    WatermarkKey {
        master,
        perm_key: stream.next_u64(),
        ks_key: stream.next_u64(),
        digest_key: stream.next_u64(),
    }
}

/// Keyed cyclic order over a layer's storage indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingPermutation {
    /// `order[t]` is the storage index at ring position `t`.
    order: Vec<usize>,
    /// `position[p]` is the ring position of storage index `p`.
    position: Vec<usize>,
}

impl RingPermutation {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    #[inline]
    pub fn at(&self, ring_pos: usize) -> usize {
        self.order[ring_pos]
    }

    #[inline]
    pub fn position_of(&self, storage_index: usize) -> usize {
        self.position[storage_index]
    }

    #[inline]
    pub fn prev_pos(&self, t: usize) -> usize {
        if t == 0 {
            self.order.len() - 1
        } else {
            t - 1
        }
    }

    #[inline]
    pub fn next_pos(&self, t: usize) -> usize {
        if t + 1 == self.order.len() {
            0
        } else {
            t + 1
        }
    }
}

/// Fisher–Yates shuffle of `0..n` driven by a splitmix64 stream seeded with
/// `mix64(perm_key ^ layer_index)`. `next() % (i + 1)` carries a modulo bias
/// of order `n / 2^64`, which is accepted and part of the format.
pub fn permutation(n: usize, perm_key: u64, layer_index: usize) -> Result<RingPermutation> {
    if n == 0 {
        return Err(Error::EmptyLayer);
    }
    let mut stream = SplitMix64::new(mix64(perm_key ^ layer_index as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (stream.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut position = vec![0; n];
    for (t, &p) in order.iter().enumerate() {
        position[p] = t;
    }
    Ok(RingPermutation { order, position })
}

#[inline]
pub fn keystream11(ks_key: u64, layer_index: usize, ring_pos: usize) -> u16 {
    (mix64(ks_key ^ ((layer_index as u64) << 32) ^ ring_pos as u64) & 0x7FF) as u16
}

/// Keyed 9-bit self-check over a word's top 23 bits, bound to its layer and
/// storage index.
#[inline]
pub fn digest9(digest_key: u64, layer_index: usize, storage_index: usize, prefix23: u32) -> u16 {
    debug_assert!(prefix23 < 1 << 23);
    let h = mix64(
        digest_key
            ^ ((layer_index as u64) << 48)
            ^ ((storage_index as u64) << 24)
            ^ prefix23 as u64,
    );
    (h % 512) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    // Frozen from an independent Python splitmix64 implementation.
    const SEED0_STREAM: [u64; 3] = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F];
    const SEED1234_STREAM: [u64; 3] = [0xBB0CF61B2F181CDB, 0x97C7A1364DF06524, 0x33BEFAE49BC025DA];

    #[test]
    fn stream_reference_vectors() {
        let got: Vec<u64> = SplitMix64::new(0).take(3).collect();
        assert_eq!(got, SEED0_STREAM);
        assert_eq!(mix64(0), 0xE220A8397B1DCDAF);
    }

    #[test]
    fn mix64_no_collisions_in_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let inputs: HashSet<u64> = (0..1_000_000).map(|_| rng.gen()).collect();
        let outputs: HashSet<u64> = inputs.iter().map(|&x| mix64(x)).collect();
        assert_eq!(outputs.len(), inputs.len());
    }

    #[test]
    fn subkey_derivation() {
        let k = derive_subkeys(0);
        assert_eq!(k.perm_key, 0xE220A8397B1DCDAF);
        assert_eq!(k.ks_key, SEED0_STREAM[1]);
        assert_eq!(k.digest_key, SEED0_STREAM[2]);

        let k = derive_subkeys(1234);
        assert_eq!([k.perm_key, k.ks_key, k.digest_key], SEED1234_STREAM);
        assert_eq!(derive_subkeys(1234), k);
    }

    #[test]
    fn debug_hides_master() {
        let k = WatermarkKey::new(0xDEAD_BEEF);
        let s = format!("{k:?}");
        assert!(!s.contains("deadbeef") && !s.contains("3735928559"));
        assert!(s.contains(&format!("{:016x}", k.fingerprint())));
    }

    #[test]
    fn permutation_examples() {
        assert!(matches!(permutation(0, 1, 0), Err(Error::EmptyLayer)));
        for key in [0, 1, u64::MAX] {
            assert_eq!(permutation(1, key, 3).unwrap().order(), &[0]);
        }
        assert_eq!(permutation(4, 0, 0).unwrap().order(), &[0, 1, 2, 3]);
        assert_eq!(
            permutation(8, 0xDEAD_BEEF, 1).unwrap().order(),
            &[6, 3, 0, 2, 4, 5, 1, 7]
        );
        let mut sorted = permutation(1000, 99, 2).unwrap().order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_inverse_is_consistent() {
        let ring = permutation(257, 5, 1).unwrap();
        for t in 0..ring.len() {
            assert_eq!(ring.position_of(ring.at(t)), t);
        }
        assert_eq!(ring.prev_pos(0), 256);
        assert_eq!(ring.next_pos(256), 0);
    }

    #[test]
    fn layers_get_distinct_rings() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let key: u64 = rng.gen();
            let a = permutation(16, key, 0).unwrap();
            let b = permutation(16, key, 1).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn keystream_examples() {
        assert_eq!(keystream11(0, 0, 0), 1455);
        assert_eq!(keystream11(5, 2, 7), 383);
        assert_eq!(keystream11(5, 2, 7), keystream11(5, 2, 7));
    }

    #[test]
    fn keystream_bit_balance() {
        let n = 100_000;
        let mut counts = [0u32; 11];
        for pos in 0..n {
            let v = keystream11(0xABCD, 4, pos);
            for (b, c) in counts.iter_mut().enumerate() {
                *c += ((v >> b) & 1) as u32;
            }
        }
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.5).abs() < 0.02, "bit frequency {frac}");
        }
    }

    #[test]
    fn digest_examples() {
        assert_eq!(digest9(0, 0, 0, 0), 431);
        assert_eq!(digest9(9, 1, 3, 0x12345), 20);
        assert_eq!(digest9(9, 1, 3, 0x12345), digest9(9, 1, 3, 0x12345));
    }

    #[test]
    fn digest_single_bit_sensitivity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let trials = 100_000;
        let mut changed = 0;
        for _ in 0..trials {
            let prefix = rng.gen::<u32>() & 0x7F_FFFF;
            let bit = rng.gen_range(0..23);
            let key: u64 = rng.gen();
            let idx = rng.gen_range(0..1_000_000);
            if digest9(key, 2, idx, prefix) != digest9(key, 2, idx, prefix ^ (1 << bit)) {
                changed += 1;
            }
        }
        assert!(changed as f64 / trials as f64 >= 0.995, "{changed}");
    }

    #[test]
    fn digest_sensitive_to_every_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let trials = 20_000;
        let mut unchanged = [0u32; 4];
        for _ in 0..trials {
            let key: u64 = rng.gen();
            let layer = rng.gen_range(0..64);
            let idx = rng.gen_range(0..1 << 20);
            let prefix = rng.gen::<u32>() & 0x7F_FFFF;
            let base = digest9(key, layer, idx, prefix);
            let variants = [
                digest9(key ^ (1 << rng.gen_range(0..64)), layer, idx, prefix),
                digest9(key, layer + 1, idx, prefix),
                digest9(key, layer, idx + 1, prefix),
                digest9(key, layer, idx, prefix ^ (1 << rng.gen_range(0..23))),
            ];
            for (u, v) in unchanged.iter_mut().zip(variants) {
                *u += (v == base) as u32;
            }
        }
        for u in unchanged {
            assert!((u as f64 / trials as f64) <= 1.0 / 256.0, "{u}");
        }
    }

    #[test]
    fn digest_uniformity_chi_square() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let samples = 1_000_000;
        let mut bins = [0u32; 512];
        for _ in 0..samples {
            let prefix = rng.gen::<u32>() & 0x7F_FFFF;
            bins[digest9(0x5EED, 0, 17, prefix) as usize] += 1;
        }
        let expected = samples as f64 / 512.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 511 degrees of freedom; 0.999 quantile is about 614.
        assert!(chi2 < 614.0, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn permutation_is_a_permutation(n in 1usize..500, key in any::<u64>(), layer in 0usize..32) {
            let ring = permutation(n, key, layer).unwrap();
            let mut sorted = ring.order().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(ring, permutation(n, key, layer).unwrap());
        }
    }
}

//! Tamper simulators. Each returns the modified tensor together with the
//! ground truth: exactly the storage indices whose word changed and the
//! words they held before.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{info_of, with_digest, with_mutual, INFO_MASK};
use crate::error::{Error, Result};
use crate::keymat::{mix64, WatermarkKey};
use crate::tensor::{LayerTensor, Model};
use crate::wmcore::LayerChecker;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerTruth {
    /// Sorted, unique storage indices.
    pub indices: Vec<usize>,
    /// Words at `indices` before the attack.
    pub originals: Vec<u32>,
}

impl LayerTruth {
    fn diff(before: &[u32], after: &[u32]) -> LayerTruth {
        let mut truth = LayerTruth::default();
        for (i, (a, b)) in before.iter().zip(after).enumerate() {
            if a != b {
                truth.indices.push(i);
                truth.originals.push(*a);
            }
        }
        truth
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperedLayer {
    pub layer_index: usize,
    pub name: String,
    #[serde(flatten)]
    pub truth: LayerTruth,
}

/// Ground truth for a model-level attack.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TamperTruth {
    pub layers: Vec<TamperedLayer>,
}

impl TamperTruth {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.truth.len()).sum()
    }

    pub fn layer(&self, layer_index: usize) -> Option<&LayerTruth> {
        self.layers.iter().find(|l| l.layer_index == layer_index).map(|l| &l.truth)
    }
}

fn tamper_count(rate: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("attack rate must lie in [0, 1], got {rate}")));
    }
    // the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    Ok(((rate * n as f64 + 1e-9).floor() as usize).min(n))
}

/// Replaces `floor(rate * n)` uniformly chosen parameters with values drawn
/// uniformly from the layer's current `[min, max]`.
pub fn random_value_attack(layer: &LayerTensor, rate: f64, seed: u64) -> Result<(LayerTensor, LayerTruth)> {
    let count = tamper_count(rate, layer.len())?;
    let mut out = layer.clone();
    if count == 0 {
        return Ok((out, LayerTruth::default()));
    }
    let values = layer.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attacked layer range"));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, layer.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        if lo == hi {
            out.words[i] = lo.to_bits();
            continue;
        }
        // redraw until the word actually changes; bounded in case the range
        // holds only a handful of representable values
        for _ in 0..64 {
            let u: f64 = rng.gen();
            let v = (lo as f64 + u * (hi as f64 - lo as f64)) as f32;
            let w = v.clamp(lo, hi).to_bits();
            out.words[i] = w;
            if w != layer.words[i] {
                break;
            }
        }
    }
    let truth = LayerTruth::diff(&layer.words, &out.words);
    Ok((out, truth))
}

/// Flips `n_bits` distinct (parameter, bit) pairs.
pub fn bit_flip_attack(layer: &LayerTensor, n_bits: usize, seed: u64) -> Result<(LayerTensor, LayerTruth)> {
    let capacity = layer.len() * 32;
    if n_bits == 0 || n_bits > capacity {
        return Err(Error::Config(format!("bit flips must lie in 1..={capacity}, got {n_bits}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = layer.clone();
    for slot in sample(&mut rng, capacity, n_bits) {
        out.words[slot / 32] ^= 1 << (slot % 32);
    }
    let truth = LayerTruth::diff(&layer.words, &out.words);
    Ok((out, truth))
}

/// Sets the `k` least significant bits of every word to `value`.
pub fn lsb_constant_attack(layer: &LayerTensor, k: u32, value: u8) -> Result<(LayerTensor, LayerTruth)> {
    if !(1..=32).contains(&k) || value > 1 {
        return Err(Error::Config(format!("lsb attack needs 1 <= k <= 32 and a 0/1 value, got {k}, {value}")));
    }
    let mask = if k == 32 { u32::MAX } else { (1u32 << k) - 1 };
    let mut out = layer.clone();
    for w in &mut out.words {
        *w = if value == 1 { *w | mask } else { *w & !mask };
    }
    let truth = LayerTruth::diff(&layer.words, &out.words);
    Ok((out, truth))
}

/// Keyless forgery against the full layout: changes one parameter's info
/// bits, then rewrites its mutual and digest fields, and the mutual and
/// digest fields of its ring successor, as computed under `attacker_key`.
/// With the true key the result verifies clean.
pub fn forge_attack(
    layer: &LayerTensor,
    layer_index: usize,
    tampered_index: usize,
    attacker_key: &WatermarkKey,
    seed: u64,
) -> Result<(LayerTensor, LayerTruth)> {
    if tampered_index >= layer.len() {
        return Err(Error::Config(format!(
            "forge index {tampered_index} out of range for {} parameters",
            layer.len()
        )));
    }
    let view = LayerChecker::new(attacker_key, layer_index, layer.len())?;
    let mut out = layer.clone();
    let old_info = info_of(layer.words[tampered_index]) as u32;
    let delta = 1 + (mix64(seed) % INFO_MASK as u64) as u32;
    let new_info = (old_info ^ delta) & INFO_MASK;
    let w = &mut out.words[tampered_index];
    *w = (new_info << 21) | (*w & ((1 << 21) - 1));

    let t = view.ring().position_of(tampered_index);
    for pos in [t, view.ring().next_pos(t)] {
        let p = view.ring().at(pos);
        let m = view.expected_mutual(&out.words, pos);
        out.words[p] = with_mutual(out.words[p], m);
        out.words[p] = with_digest(out.words[p], view.expected_digest(p, out.words[p]));
    }
    let truth = LayerTruth::diff(&layer.words, &out.words);
    Ok((out, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackKind {
    RandomValue { rate: f64 },
    BitFlip { bits: usize },
    LsbConstant { k: u32, value: u8 },
    Forge { index: usize, attacker_key: WatermarkKey },
}

/// Which float32 tensors an attack touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    First,
    All,
    Index(usize),
}

/// Applies `kind` to the selected layers. With several layers, layer `i`
/// uses seed `mix64(seed ^ i)`.
pub fn attack_model(
    model: &Model,
    kind: &AttackKind,
    selection: LayerSelection,
    seed: u64,
) -> Result<(Model, TamperTruth)> {
    let targets: Vec<usize> = match selection {
        LayerSelection::First => model.first_float_layer().into_iter().collect(),
        LayerSelection::All => model.float_layers().map(|(i, _)| i).collect(),
        LayerSelection::Index(i) => {
            if model.layer(i).is_none() {
                return Err(Error::Config(format!("no float32 tensor at index {i}")));
            }
            vec![i]
        }
    };
    if targets.is_empty() {
        return Err(Error::Config("model has no float32 tensor to attack".into()));
    }
    let mut out = model.clone();
    let mut truth = TamperTruth::default();
    for &i in &targets {
        let layer_seed = if targets.len() == 1 { seed } else { mix64(seed ^ i as u64) };
        let layer = out.layer(i).expect("target is float32");
        let (attacked, t) = match kind {
            AttackKind::RandomValue { rate } => random_value_attack(layer, *rate, layer_seed),
            AttackKind::BitFlip { bits } => bit_flip_attack(layer, *bits, layer_seed),
            AttackKind::LsbConstant { k, value } => lsb_constant_attack(layer, *k, *value),
            AttackKind::Forge { index, attacker_key } => {
                forge_attack(layer, i, *index, attacker_key, layer_seed)
            }
        }
        .map_err(|e| e.in_layer(&layer.name))?;
        let name = attacked.name.clone();
        *out.layer_mut(i).expect("target is float32") = attacked;
        truth.layers.push(TamperedLayer { layer_index: i, name, truth: t });
    }
    Ok((out, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::digest_of;
    use crate::wmcore::{embed_layer, verify_layer, ParamStatus};

    fn marked(n: usize, seed: u64, key: &WatermarkKey) -> LayerTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        embed_layer(&LayerTensor::from_f32("w", vec![n], &values).unwrap(), key, 0, None).unwrap()
    }

    fn assert_truth_is_diff(before: &LayerTensor, after: &LayerTensor, truth: &LayerTruth) {
        assert_eq!(truth, &LayerTruth::diff(&before.words, &after.words));
        for (i, o) in truth.indices.iter().zip(&truth.originals) {
            assert_eq!(before.words[*i], *o);
        }
    }

    #[test]
    fn random_value_rate_zero_is_noop() {
        let key = WatermarkKey::new(1);
        let layer = marked(100, 1, &key);
        let (out, truth) = random_value_attack(&layer, 0.0, 5).unwrap();
        assert_eq!(out, layer);
        assert!(truth.is_empty());
    }

    #[test]
    fn random_value_constant_layer() {
        let layer = LayerTensor::from_f32("c", vec![10], &[0.75; 10]).unwrap();
        let (out, truth) = random_value_attack(&layer, 1.0, 5).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.75));
        assert!(truth.is_empty());
    }

    #[test]
    fn random_value_counts_and_range() {
        let key = WatermarkKey::new(2);
        let layer = marked(100_000, 2, &key);
        let (out, truth) = random_value_attack(&layer, 0.1, 9).unwrap();
        assert_eq!(truth.len(), 10_000);
        assert_truth_is_diff(&layer, &out, &truth);
        let vals = layer.values();
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &i in &truth.indices {
            let v = out.value(i);
            assert!(v >= lo && v <= hi);
        }
        assert_eq!(random_value_attack(&layer, 0.1, 9).unwrap().0, out);
    }

    #[test]
    fn random_value_rejects_bad_inputs() {
        let layer = LayerTensor::from_f32("c", vec![3], &[0.0, f32::NAN, 1.0]).unwrap();
        assert!(random_value_attack(&layer, 0.5, 1).is_err());
        let layer = LayerTensor::from_f32("c", vec![3], &[0.0, 2.0, 1.0]).unwrap();
        assert!(random_value_attack(&layer, 1.5, 1).is_err());
        assert!(random_value_attack(&layer, -0.1, 1).is_err());
    }

    #[test]
    fn single_bit_flip() {
        let key = WatermarkKey::new(3);
        let layer = marked(64, 3, &key);
        let (out, truth) = bit_flip_attack(&layer, 1, 4).unwrap();
        assert_eq!(truth.len(), 1);
        let i = truth.indices[0];
        assert_eq!((out.words[i] ^ layer.words[i]).count_ones(), 1);
        assert_truth_is_diff(&layer, &out, &truth);
        assert!(bit_flip_attack(&layer, 0, 4).is_err());
        assert!(bit_flip_attack(&layer, 64 * 32 + 1, 4).is_err());
    }

    #[test]
    fn all_bits_flipped_once() {
        let layer = LayerTensor::vector("x", vec![0x1234_5678, 0]);
        let (out, _) = bit_flip_attack(&layer, 64, 1).unwrap();
        assert_eq!(out.words, vec![!0x1234_5678, u32::MAX]);
    }

    #[test]
    fn bit_flips_are_detected() {
        let key = WatermarkKey::new(4);
        let layer = marked(10_000, 4, &key);
        let (out, truth) = bit_flip_attack(&layer, 100, 6).unwrap();
        let s = verify_layer(&out, &key, 0).unwrap();
        let flagged = truth.indices.iter().filter(|&&i| !s[i].is_intact()).count();
        assert!(flagged as f64 >= 0.99 * truth.len() as f64, "{flagged}/{}", truth.len());
    }

    #[test]
    fn lsb_constant_behaviour() {
        let key = WatermarkKey::new(5);
        let layer = marked(1000, 5, &key);
        for value in [0u8, 1] {
            let (once, truth) = lsb_constant_attack(&layer, 9, value).unwrap();
            assert_truth_is_diff(&layer, &once, &truth);
            let (twice, _) = lsb_constant_attack(&once, 9, value).unwrap();
            assert_eq!(once, twice);
            let s = verify_layer(&once, &key, 0).unwrap();
            for (i, st) in s.iter().enumerate() {
                if digest_of(once.words[i]) != digest_of(layer.words[i]) {
                    assert_eq!(*st, ParamStatus::SelfFail);
                }
            }
        }
        let (all, _) = lsb_constant_attack(&layer, 32, 1).unwrap();
        assert!(all.words.iter().all(|&w| w == u32::MAX));
        let (none, _) = lsb_constant_attack(&layer, 32, 0).unwrap();
        assert!(none.words.iter().all(|&w| w == 0));
        assert!(lsb_constant_attack(&layer, 0, 1).is_err());
        assert!(lsb_constant_attack(&layer, 33, 1).is_err());
    }

    #[test]
    fn forge_with_true_key_verifies_clean() {
        let key = WatermarkKey::new(6);
        let layer = marked(500, 6, &key);
        let (out, truth) = forge_attack(&layer, 0, 42, &key, 1).unwrap();
        assert!(truth.contains(42));
        assert_ne!(info_of(out.words[42]), info_of(layer.words[42]));
        assert!(verify_layer(&out, &key, 0).unwrap().iter().all(|s| s.is_intact()));
    }

    #[test]
    fn forge_with_wrong_key_breaks_successor_link() {
        let key = WatermarkKey::new(7);
        let layer = marked(500, 7, &key);
        let attacker = WatermarkKey::new(8);
        let (out, truth) = forge_attack(&layer, 0, 42, &attacker, 1).unwrap();
        assert_truth_is_diff(&layer, &out, &truth);
        let checker = LayerChecker::new(&key, 0, 500).unwrap();
        let t = checker.ring().position_of(42);
        assert!(!checker.link_ok(&out.words, checker.ring().next_pos(t)));
        assert!(!verify_layer(&out, &key, 0).unwrap()[42].is_intact());
    }

    #[test]
    fn model_attack_selection() {
        let key = WatermarkKey::new(9);
        let model = Model::from_layers(vec![marked(50, 1, &key), marked(40, 2, &key)]);
        let kind = AttackKind::RandomValue { rate: 0.2 };
        let (out, truth) = attack_model(&model, &kind, LayerSelection::First, 3).unwrap();
        assert_eq!(truth.layers.len(), 1);
        assert_eq!(truth.total(), 10);
        assert_eq!(out.layer(1), model.layer(1));
        let (_, truth) = attack_model(&model, &kind, LayerSelection::All, 3).unwrap();
        assert_eq!(truth.total(), 18);
        assert!(attack_model(&model, &kind, LayerSelection::Index(7), 3).is_err());
    }
}

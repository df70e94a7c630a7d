//! Gradient-sign training of the adaptive bit `b11`.
//!
//! For each tensor, `alpha` times: take gradients on a training batch, pick
//! the `floor(beta * n)` parameters with the largest gradient magnitude, set
//! their `b11` so the value moves against the gradient, re-finalize the
//! tensor's check fields and keep the candidate only if accuracy on the
//! evaluation split strictly improves.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitcodec::{adaptive_of, word_to_float};
use crate::error::{Error, Result};
use crate::keymat::{mix64, WatermarkKey};
use crate::tensor::LayerTensor;
use crate::toynet::{Dataset, Split, ToyModel};
use crate::wmcore::{embed_layer, verify_layer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    /// Iterations per tensor.
    pub alpha: usize,
    /// Fraction of each tensor's parameters considered per iteration.
    pub beta: f64,
    pub eval_split: Split,
    /// Training rows per gradient batch; 0 uses the whole train split.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { alpha: 5, beta: 0.5, eval_split: Split::Validation, batch_size: 256, seed: 0 }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// `b11` value for every parameter of each watermarked tensor, keyed by
/// layer index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdaptivePlan {
    layers: BTreeMap<usize, Vec<u8>>,
}

impl AdaptivePlan {
    pub fn get(&self, layer_index: usize) -> Option<&[u8]> {
        self.layers.get(&layer_index).map(Vec::as_slice)
    }

    pub fn insert(&mut self, layer_index: usize, bits: Vec<u8>) {
        self.layers.insert(layer_index, bits);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[u8])> {
        self.layers.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Reads the current `b11` bits out of a tensor.
    pub fn bits_of(layer: &LayerTensor) -> Vec<u8> {
        layer.words.iter().map(|&w| adaptive_of(w)).collect()
    }
}

/// `b11` that moves `value` against `grad`: `Some(0)` shrinks the magnitude,
/// `Some(1)` grows it. `None` when either input is zero.
pub fn adaptive_bit(value: f32, grad: f64) -> Result<Option<u8>> {
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("adaptive bit input"));
    }
    if value == 0.0 || grad == 0.0 {
        return Ok(None);
    }
    let same_sign = (value > 0.0) == (grad > 0.0);
    Ok(Some(if same_sign { 0 } else { 1 }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub tensor: usize,
    pub iteration: usize,
    pub acc_before: f64,
    pub acc_candidate: f64,
    /// Parameters whose `b11` differs in the candidate.
    pub flipped: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub model: ToyModel,
    pub plan: AdaptivePlan,
    pub trace: Vec<TraceEntry>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

/// Runs the adaptive pass on a model whose tensors already carry the
/// watermark under `key` (tensor `k` at layer index `k`).
pub fn adaptive_pass(
    model: &ToyModel,
    key: &WatermarkKey,
    cfg: &AdaptiveConfig,
    data: &Dataset,
) -> Result<AdaptiveOutcome> {
    cfg.validate()?;
    let eval = data.split(cfg.eval_split);
    if eval.is_empty() {
        return Err(Error::EmptySplit(cfg.eval_split.name()));
    }
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    for k in 0..model.n_tensors() {
        let statuses = verify_layer(&model.to_layer_tensor(k), key, k)?;
        if !statuses.iter().all(|s| s.is_intact()) {
            return Err(Error::Config(format!(
                "tensor `{}` does not carry a valid watermark for this key",
                ToyModel::tensor_name(k)
            )));
        }
    }

    let mut model = model.clone();
    let initial_accuracy = model.accuracy(eval)?;
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed));

    for k in 0..model.n_tensors() {
        let n = model.tensor(k).len();
        let take = ((cfg.beta * n as f64).floor() as usize).min(n);
        for iteration in 0..cfg.alpha {
            let batch = if cfg.batch_size == 0 || cfg.batch_size >= data.train.len() {
                data.train.clone()
            } else {
                data.train.subset(&sample(&mut rng, data.train.len(), cfg.batch_size).into_vec())
            };
            let grads = model.gradients(&batch)?;
            if grads.tensor(k).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            let acc_before = model.accuracy(eval)?;

            let current = model.to_layer_tensor(k);
            let mut plan = AdaptivePlan::bits_of(&current);
            let g = grads.tensor(k);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            let mut flipped = 0;
            for &i in &order[..take] {
                if let Some(bit) = adaptive_bit(word_to_float(current.words[i]), g[i])? {
                    flipped += (plan[i] != bit) as usize;
                    plan[i] = bit;
                }
            }

            if flipped == 0 {
                trace.push(TraceEntry {
                    tensor: k,
                    iteration,
                    acc_before,
                    acc_candidate: acc_before,
                    flipped,
                    accepted: false,
                });
                continue;
            }
            let candidate_tensor = embed_layer(&current, key, k, Some(&plan))?;
            let mut candidate = model.clone();
            for (dst, &w) in candidate.tensor_mut(k).iter_mut().zip(&candidate_tensor.words) {
                *dst = word_to_float(w);
            }
            let acc_candidate = candidate.accuracy(eval)?;
            let accepted = acc_candidate > acc_before;
            if accepted {
                model = candidate;
            }
            trace.push(TraceEntry { tensor: k, iteration, acc_before, acc_candidate, flipped, accepted });
        }
    }

    let mut plan = AdaptivePlan::default();
    for k in 0..model.n_tensors() {
        plan.insert(k, AdaptivePlan::bits_of(&model.to_layer_tensor(k)));
    }
    let final_accuracy = model.accuracy(eval)?;
    Ok(AdaptiveOutcome { model, plan, trace, initial_accuracy, final_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::{float_to_word, info_of};
    use crate::toynet::{gen_blobs, train};
    use crate::wmcore::{embed_model, verify_model};
    use proptest::prelude::*;

    #[test]
    fn sign_table() {
        assert_eq!(adaptive_bit(2.0, 0.5).unwrap(), Some(0));
        assert_eq!(adaptive_bit(-1.0, 0.1).unwrap(), Some(1));
        assert_eq!(adaptive_bit(3.0, -0.2).unwrap(), Some(1));
        assert_eq!(adaptive_bit(-3.0, -0.2).unwrap(), Some(0));
        assert_eq!(adaptive_bit(0.0, 0.3).unwrap(), None);
        assert_eq!(adaptive_bit(1.0, 0.0).unwrap(), None);
        assert!(adaptive_bit(f32::NAN, 1.0).is_err());
        assert!(adaptive_bit(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn chosen_bit_moves_value_against_gradient() {
        // b11 = 1 grows the magnitude; check the loss-reducing direction
        for (v, g) in [(1.3f32, 0.5), (1.3, -0.5), (-1.3, 0.5), (-1.3, -0.5)] {
            let bit = adaptive_bit(v, g).unwrap().unwrap();
            let w = crate::bitcodec::set_adaptive(float_to_word(v), bit);
            let other = crate::bitcodec::set_adaptive(float_to_word(v), 1 - bit);
            let step = word_to_float(w) - word_to_float(other);
            assert!((step as f64) * g < 0.0, "{v} {g}");
        }
    }

    proptest! {
        #[test]
        fn negated_gradient_flips_decision(v in -1e3f32..1e3, g in -1e3f64..1e3) {
            prop_assume!(v != 0.0 && g != 0.0);
            let a = adaptive_bit(v, g).unwrap().unwrap();
            let b = adaptive_bit(v, -g).unwrap().unwrap();
            prop_assert_eq!(a, 1 - b);
        }
    }

    fn watermarked_toy(key: &WatermarkKey) -> (ToyModel, Dataset) {
        let data = gen_blobs(3, 150, 3, 4, 2.0, 0.8).unwrap();
        let clean = train(&ToyModel::random(&[4, 12, 8, 3], 1).unwrap(), &data, 10, 0.05, 2).unwrap();
        let marked = embed_model(&clean.to_model(), key, None).unwrap();
        (ToyModel::from_model(&marked).unwrap(), data)
    }

    #[test]
    fn beta_zero_leaves_model_unchanged() {
        let key = WatermarkKey::new(4);
        let (model, data) = watermarked_toy(&key);
        let cfg = AdaptiveConfig { beta: 0.0, ..AdaptiveConfig::default() };
        let out = adaptive_pass(&model, &key, &cfg, &data).unwrap();
        assert_eq!(out.model, model);
        assert!(out.trace.iter().all(|t| !t.accepted));
    }

    #[test]
    fn pass_is_monotone_and_keeps_watermark() {
        let key = WatermarkKey::new(5);
        let (model, data) = watermarked_toy(&key);
        let cfg = AdaptiveConfig { alpha: 3, beta: 0.5, ..AdaptiveConfig::default() };
        let out = adaptive_pass(&model, &key, &cfg, &data).unwrap();
        assert!(out.final_accuracy >= out.initial_accuracy);
        let mut best = out.initial_accuracy;
        for t in &out.trace {
            assert!(t.acc_before >= best - 1e-12);
            if t.accepted {
                assert!(t.acc_candidate > t.acc_before);
                best = t.acc_candidate;
            }
        }
        let container = out.model.to_model();
        assert!(verify_model(&container, &key).unwrap().is_intact());
        for k in 0..model.n_tensors() {
            for (a, b) in model.tensor(k).iter().zip(out.model.tensor(k)) {
                assert_eq!(info_of(float_to_word(*a)), info_of(float_to_word(*b)));
            }
            assert_eq!(out.plan.get(k).unwrap(), AdaptivePlan::bits_of(&container.entries[k].as_float32().unwrap().clone()));
        }
        // re-embedding the clean bits with the plan reproduces the output
        let again = embed_model(&model.to_model(), &key, Some(&out.plan)).unwrap();
        assert_eq!(again, container);
    }

    #[test]
    fn rejects_unwatermarked_input_and_bad_config() {
        let key = WatermarkKey::new(6);
        let (model, data) = watermarked_toy(&key);
        let other = WatermarkKey::new(7);
        assert!(adaptive_pass(&model, &other, &AdaptiveConfig::default(), &data).is_err());
        let bad = AdaptiveConfig { alpha: 0, ..AdaptiveConfig::default() };
        assert!(matches!(adaptive_pass(&model, &key, &bad, &data), Err(Error::Config(_))));
        let bad = AdaptiveConfig { beta: 1.5, ..AdaptiveConfig::default() };
        assert!(matches!(adaptive_pass(&model, &key, &bad, &data), Err(Error::Config(_))));
        let mut empty = data.clone();
        empty.validation.inputs.clear();
        empty.validation.labels.clear();
        assert!(matches!(
            adaptive_pass(&model, &key, &AdaptiveConfig::default(), &empty),
            Err(Error::EmptySplit("validation"))
        ));
    }
}

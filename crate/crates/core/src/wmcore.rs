//! Embedding, verification and recovery of the self-mutual-check watermark.
//!
//! Each float32 tensor is watermarked on its own. Its parameters are arranged
//! on a keyed ring; every parameter keeps its 11 info bits, stores
//! `info(prev) ^ info(self) ^ keystream(t)` in its mutual field and a keyed
//! digest of its top 23 bits in its last 9 bits.
//!
//! Verification checks each parameter's digest (self check) and each ring
//! link (mutual check). A failed digest localizes tampering to one
//! parameter; the successor's mutual field then still carries the tampered
//! parameter's original info bits, which is what recovery reads back.

use serde::Serialize;

use crate::adaptive::AdaptivePlan;
use crate::bitcodec::{
    digest_of, info_of, mutual_of, prefix23, set_adaptive, with_digest, with_mutual, INFO_MASK,
};
use crate::error::{Error, Result};
use crate::keymat::{digest9, keystream11, permutation, RingPermutation, WatermarkKey};
use crate::tensor::{LayerTensor, Model, TensorEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ParamStatus {
    Intact,
    SelfFail,
    MutualSuspect,
}

impl ParamStatus {
    pub fn is_intact(self) -> bool {
        self == ParamStatus::Intact
    }
}

/// Ring and key material for one layer, reusable across many checks of
/// tensors of the same length.
#[derive(Debug, Clone)]
pub struct LayerChecker {
    key: WatermarkKey,
    layer_index: usize,
    ring: RingPermutation,
}

impl LayerChecker {
    pub fn new(key: &WatermarkKey, layer_index: usize, n: usize) -> Result<Self> {
        Ok(LayerChecker {
            key: *key,
            layer_index,
            ring: permutation(n, key.perm_key, layer_index)?,
        })
    }

    pub fn ring(&self) -> &RingPermutation {
        &self.ring
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    #[inline]
    pub fn keystream(&self, ring_pos: usize) -> u16 {
        keystream11(self.key.ks_key, self.layer_index, ring_pos)
    }

    #[inline]
    pub fn expected_digest(&self, storage_index: usize, word: u32) -> u16 {
        digest9(self.key.digest_key, self.layer_index, storage_index, prefix23(word))
    }

    /// Mutual field that ring position `t` should carry.
    #[inline]
    pub fn expected_mutual(&self, words: &[u32], t: usize) -> u16 {
        let p = self.ring.at(t);
        let prev = self.ring.at(self.ring.prev_pos(t));
        (info_of(words[prev]) ^ info_of(words[p]) ^ self.keystream(t)) & INFO_MASK as u16
    }

    #[inline]
    pub fn self_ok(&self, words: &[u32], storage_index: usize) -> bool {
        digest_of(words[storage_index]) == self.expected_digest(storage_index, words[storage_index])
    }

    /// Mutual check on the link ending at ring position `t`.
    #[inline]
    pub fn link_ok(&self, words: &[u32], t: usize) -> bool {
        mutual_of(words[self.ring.at(t)]) == self.expected_mutual(words, t)
    }

    /// Rewrites the mutual and digest fields of every word from its info and
    /// adaptive bits.
    pub fn finalize(&self, words: &mut [u32]) -> Result<()> {
        self.check_len(words.len())?;
        let mutuals: Vec<u16> = (0..words.len()).map(|t| self.expected_mutual(words, t)).collect();
        for (t, m) in mutuals.into_iter().enumerate() {
            let p = self.ring.at(t);
            words[p] = with_mutual(words[p], m);
        }
        for (p, w) in words.iter_mut().enumerate() {
            *w = with_digest(*w, self.expected_digest(p, *w));
        }
        Ok(())
    }

    /// Status of every parameter, indexed by storage index.
    pub fn statuses(&self, words: &[u32]) -> Result<Vec<ParamStatus>> {
        self.check_len(words.len())?;
        let n = words.len();
        let self_ok: Vec<bool> = (0..n).map(|p| self.self_ok(words, p)).collect();
        let links: Vec<bool> = (0..n).map(|t| self.link_ok(words, t)).collect();
        Ok((0..n)
            .map(|p| {
                let t = self.ring.position_of(p);
                let next = self.ring.next_pos(t);
                classify(
                    self_ok[p],
                    links[t],
                    self_ok[self.ring.at(self.ring.prev_pos(t))],
                    links[next],
                    self_ok[self.ring.at(next)],
                )
            })
            .collect())
    }

    /// Status of a single parameter, computed from its ring neighbourhood
    /// only. Agrees with [`LayerChecker::statuses`].
    pub fn status_of(&self, words: &[u32], storage_index: usize) -> ParamStatus {
        let t = self.ring.position_of(storage_index);
        let prev = self.ring.prev_pos(t);
        let next = self.ring.next_pos(t);
        classify(
            self.self_ok(words, storage_index),
            self.link_ok(words, t),
            self.self_ok(words, self.ring.at(prev)),
            self.link_ok(words, next),
            self.self_ok(words, self.ring.at(next)),
        )
    }

    /// Whether the parameter at ring position `t` may serve as a recovery
    /// source for its predecessor: its digest holds and no mutual check
    /// touching it disagrees with a self-clean neighbour.
    fn usable_source(&self, words: &[u32], statuses: &[ParamStatus], t: usize) -> bool {
        let p = self.ring.at(t);
        if statuses[p] == ParamStatus::SelfFail {
            return false;
        }
        let prev = self.ring.at(self.ring.prev_pos(t));
        let next_t = self.ring.next_pos(t);
        let next = self.ring.at(next_t);
        let own_conflict = !self.link_ok(words, t) && statuses[prev] != ParamStatus::SelfFail;
        let next_conflict = !self.link_ok(words, next_t) && statuses[next] != ParamStatus::SelfFail;
        !(own_conflict || next_conflict)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.ring.len() {
            return Err(Error::LengthMismatch { expected: self.ring.len(), actual: n });
        }
        Ok(())
    }
}

/// Status of a parameter from its own digest result and the two ring links
/// that involve it.
///
/// A failing link only counts against the parameter when the other endpoint
/// is self-clean. A self-clean parameter with no passing link at all (both
/// neighbours fail their digests and both links fail) has nothing vouching
/// for it and is reported as suspect.
fn classify(
    self_ok: bool,
    own_link: bool,
    prev_self_ok: bool,
    next_link: bool,
    next_self_ok: bool,
) -> ParamStatus {
    if !self_ok {
        return ParamStatus::SelfFail;
    }
    let conflict = (!own_link && prev_self_ok) || (!next_link && next_self_ok);
    if conflict || !(own_link || next_link) {
        ParamStatus::MutualSuspect
    } else {
        ParamStatus::Intact
    }
}

pub fn embed_layer(
    layer: &LayerTensor,
    key: &WatermarkKey,
    layer_index: usize,
    adaptive_plan: Option<&[u8]>,
) -> Result<LayerTensor> {
    if layer.is_empty() {
        return Err(Error::EmptyLayer);
    }
    if let Some(plan) = adaptive_plan {
        if plan.len() != layer.len() {
            return Err(Error::LengthMismatch { expected: layer.len(), actual: plan.len() });
        }
    }
    let checker = LayerChecker::new(key, layer_index, layer.len())?;
    let mut words: Vec<u32> = layer
        .words
        .iter()
        .enumerate()
        .map(|(i, &w)| set_adaptive(w, adaptive_plan.map_or(0, |plan| plan[i])))
        .collect();
    checker.finalize(&mut words)?;
    Ok(LayerTensor { name: layer.name.clone(), shape: layer.shape.clone(), words })
}

pub fn verify_layer(layer: &LayerTensor, key: &WatermarkKey, layer_index: usize) -> Result<Vec<ParamStatus>> {
    if layer.is_empty() {
        return Err(Error::EmptyLayer);
    }
    LayerChecker::new(key, layer_index, layer.len())?.statuses(&layer.words)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryStats {
    pub restored_exact: usize,
    pub zeroed: usize,
    pub untouched: usize,
}

impl std::ops::AddAssign for RecoveryStats {
    fn add_assign(&mut self, rhs: Self) {
        self.restored_exact += rhs.restored_exact;
        self.zeroed += rhs.zeroed;
        self.untouched += rhs.untouched;
    }
}

/// What recovery did to each self-failing parameter of one layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerRecovery {
    /// Storage indices whose info bits were rebuilt from their ring successor.
    pub restored: Vec<usize>,
    /// Storage indices replaced by the zero placeholder.
    pub zeroed: Vec<usize>,
    pub untouched: usize,
}

impl LayerRecovery {
    pub fn stats(&self) -> RecoveryStats {
        RecoveryStats {
            restored_exact: self.restored.len(),
            zeroed: self.zeroed.len(),
            untouched: self.untouched,
        }
    }
}

pub fn recover_layer(
    layer: &LayerTensor,
    key: &WatermarkKey,
    layer_index: usize,
    statuses: &[ParamStatus],
) -> Result<(LayerTensor, LayerRecovery)> {
    if layer.is_empty() {
        return Err(Error::EmptyLayer);
    }
    if statuses.len() != layer.len() {
        return Err(Error::LengthMismatch { expected: layer.len(), actual: statuses.len() });
    }
    let mut out = layer.clone();
    let mut rec = LayerRecovery::default();
    let checker = LayerChecker::new(key, layer_index, layer.len())?;
    let words = &layer.words;
    for (p, status) in statuses.iter().enumerate() {
        if *status != ParamStatus::SelfFail {
            continue;
        }
        let t = checker.ring.position_of(p);
        let next_t = checker.ring.next_pos(t);
        let s = checker.ring.at(next_t);
        if s != p && checker.usable_source(words, statuses, next_t) {
            let info =
                (mutual_of(words[s]) ^ info_of(words[s]) ^ checker.keystream(next_t)) as u32 & INFO_MASK;
            out.words[p] = info << 21;
            rec.restored.push(p);
        } else {
            out.words[p] = 0;
            rec.zeroed.push(p);
        }
    }
    rec.untouched = layer.len() - rec.restored.len() - rec.zeroed.len();
    // Repaired words carry b11 = 0; everything else keeps its adaptive bit.
    checker.finalize(&mut out.words)?;
    Ok((out, rec))
}

/// Per-layer verification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerReport {
    pub name: String,
    pub layer_index: usize,
    /// Indexed by storage index.
    pub statuses: Vec<ParamStatus>,
}

impl LayerReport {
    pub fn indices_with(&self, status: ParamStatus) -> Vec<usize> {
        self.statuses
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == status)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, status: ParamStatus) -> usize {
        self.statuses.iter().filter(|s| **s == status).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerificationReport {
    pub layers: Vec<LayerReport>,
    /// Names of tensors that carry no watermark (non-float32).
    pub unprotected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ReportSummary {
    pub total_parameters: usize,
    pub intact: usize,
    pub self_fail: usize,
    pub mutual_suspect: usize,
}

impl VerificationReport {
    pub fn summary(&self) -> ReportSummary {
        let mut s = ReportSummary::default();
        for layer in &self.layers {
            s.total_parameters += layer.statuses.len();
            s.intact += layer.count(ParamStatus::Intact);
            s.self_fail += layer.count(ParamStatus::SelfFail);
            s.mutual_suspect += layer.count(ParamStatus::MutualSuspect);
        }
        s
    }

    pub fn is_intact(&self) -> bool {
        self.layers.iter().all(|l| l.statuses.iter().all(|s| s.is_intact()))
    }

    pub fn layer(&self, layer_index: usize) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }
}

pub fn embed_model(model: &Model, key: &WatermarkKey, plan: Option<&AdaptivePlan>) -> Result<Model> {
    let mut out = model.clone();
    for (i, entry) in out.entries.iter_mut().enumerate() {
        if let TensorEntry::Float32(t) = entry {
            let bits = plan.and_then(|p| p.get(i));
            *t = embed_layer(t, key, i, bits).map_err(|e| e.in_layer(&t.name))?;
        }
    }
    Ok(out)
}

pub fn verify_model(model: &Model, key: &WatermarkKey) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    for (i, entry) in model.entries.iter().enumerate() {
        match entry {
            TensorEntry::Float32(t) => {
                let statuses = verify_layer(t, key, i).map_err(|e| e.in_layer(&t.name))?;
                report.layers.push(LayerReport { name: t.name.clone(), layer_index: i, statuses });
            }
            TensorEntry::Opaque(t) => report.unprotected.push(t.name.clone()),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelRecovery {
    /// `(layer_index, outcome)` per float32 tensor.
    pub layers: Vec<(usize, LayerRecovery)>,
}

impl ModelRecovery {
    pub fn stats(&self) -> RecoveryStats {
        let mut total = RecoveryStats::default();
        for (_, l) in &self.layers {
            total += l.stats();
        }
        total
    }

    pub fn layer(&self, layer_index: usize) -> Option<&LayerRecovery> {
        self.layers.iter().find(|(i, _)| *i == layer_index).map(|(_, l)| l)
    }
}

pub fn recover_model(
    model: &Model,
    key: &WatermarkKey,
    report: &VerificationReport,
) -> Result<(Model, ModelRecovery)> {
    let mut out = model.clone();
    let mut recovery = ModelRecovery::default();
    for (i, entry) in out.entries.iter_mut().enumerate() {
        let TensorEntry::Float32(t) = entry else { continue };
        let layer_report = report.layer(i).ok_or_else(|| {
            Error::Config(format!("report has no entry for layer {i}")).in_layer(&t.name)
        })?;
        let (recovered, rec) =
            recover_layer(t, key, i, &layer_report.statuses).map_err(|e| e.in_layer(&t.name))?;
        *t = recovered;
        recovery.layers.push((i, rec));
    }
    Ok((out, recovery))
}

//! Attack / verify / recover sweeps over tamper rates.

use crate::attacks::{attack_model, AttackKind, LayerSelection, TamperTruth};
use crate::bitcodec::info_of;
use crate::error::{Error, Result};
use crate::keymat::{mix64, WatermarkKey};
use crate::store::SweepRow;
use crate::tensor::Model;
use crate::toynet::{Dataset, Split, ToyModel};
use crate::wmcore::{recover_model, verify_model, ModelRecovery, VerificationReport};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub selection: LayerSelection,
    pub eval_split: Split,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rates: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5],
            trials: 10,
            seed: 1234,
            selection: LayerSelection::First,
            eval_split: Split::Test,
        }
    }
}

/// Seed for trial `trial` of a sweep started from `base`.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    mix64(base ^ trial as u64)
}

/// Detection and recovery measured against the attack's ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialMetrics {
    pub tampered: usize,
    pub detection_recall: f64,
    pub false_positive_rate: f64,
    pub restored_exact_frac: f64,
    pub zeroed_frac: f64,
    pub acc_attacked: f64,
    pub acc_recovered: f64,
}

pub struct TrialOutcome {
    pub attacked: Model,
    pub truth: TamperTruth,
    pub report: VerificationReport,
    pub recovered: Model,
    pub recovery: ModelRecovery,
    pub metrics: TrialMetrics,
}

/// Scores a verification report and a recovery against ground truth.
pub fn score(
    original: &Model,
    truth: &TamperTruth,
    report: &VerificationReport,
    recovered: &Model,
    recovery: &ModelRecovery,
) -> TrialMetrics {
    let total = original.float_parameter_count();
    let tampered = truth.total();
    let mut detected = 0;
    let mut false_pos = 0;
    let mut exact = 0;
    let mut zeroed = 0;
    for layer in &report.layers {
        let t = truth.layer(layer.layer_index);
        let is_tampered = |i: usize| t.is_some_and(|t| t.contains(i));
        for (i, s) in layer.statuses.iter().enumerate() {
            match (s.is_intact(), is_tampered(i)) {
                (false, true) => detected += 1,
                (false, false) => false_pos += 1,
                _ => {}
            }
        }
        let (Some(t), Some(rec)) = (t, recovery.layer(layer.layer_index)) else { continue };
        let before = original.layer(layer.layer_index).expect("reported layer exists");
        let after = recovered.layer(layer.layer_index).expect("reported layer exists");
        for &i in &rec.restored {
            if t.contains(i) && info_of(after.words[i]) == info_of(before.words[i]) {
                exact += 1;
            }
        }
        zeroed += rec.zeroed.iter().filter(|&&i| t.contains(i)).count();
    }
    let frac = |k: usize, of: usize, empty: f64| if of == 0 { empty } else { k as f64 / of as f64 };
    TrialMetrics {
        tampered,
        detection_recall: frac(detected, tampered, 1.0),
        false_positive_rate: frac(false_pos, total - tampered, 0.0),
        restored_exact_frac: frac(exact, tampered, 1.0),
        zeroed_frac: frac(zeroed, tampered, 0.0),
        acc_attacked: f64::NAN,
        acc_recovered: f64::NAN,
    }
}

/// One random-value attack trial on a watermarked model. Accuracy fields are
/// filled only when `eval` is given (the model must then be a toy model).
pub fn run_trial(
    marked: &Model,
    key: &WatermarkKey,
    rate: f64,
    selection: LayerSelection,
    seed: u64,
    eval: Option<(&Dataset, Split)>,
) -> Result<TrialOutcome> {
    let (attacked, truth) = attack_model(marked, &AttackKind::RandomValue { rate }, selection, seed)?;
    let report = verify_model(&attacked, key)?;
    let (recovered, recovery) = recover_model(&attacked, key, &report)?;
    let mut metrics = score(marked, &truth, &report, &recovered, &recovery);
    if let Some((data, split)) = eval {
        metrics.acc_attacked = ToyModel::from_model(&attacked)?.accuracy_on(data, split)?;
        metrics.acc_recovered = ToyModel::from_model(&recovered)?.accuracy_on(data, split)?;
    }
    Ok(TrialOutcome { attacked, truth, report, recovered, recovery, metrics })
}

/// Runs `cfg.trials` trials per rate and averages them into sweep rows.
/// `clean` supplies the `acc_clean` column; missing accuracies are NaN.
pub fn sweep(
    marked: &Model,
    key: &WatermarkKey,
    data: Option<&Dataset>,
    clean: Option<&Model>,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if cfg.trials == 0 {
        return Err(Error::Config("a sweep needs at least one trial".into()));
    }
    let eval = data.map(|d| (d, cfg.eval_split));
    let accuracy = |m: &Model| -> Result<f64> {
        match eval {
            Some((d, split)) => ToyModel::from_model(m)?.accuracy_on(d, split),
            None => Ok(f64::NAN),
        }
    };
    let acc_clean = match clean {
        Some(m) => accuracy(m)?,
        None => f64::NAN,
    };
    let acc_watermarked = accuracy(marked)?;

    // Accuracies are averaged as correct-prediction counts so identical
    // trials reproduce the single-trial value exactly.
    let eval_len = eval.map_or(0, |(d, split)| d.split(split).len()) as f64;
    let correct = |acc: f64| (acc * eval_len).round();
    let mut rows = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let mut sum = TrialMetrics::default();
        for trial in 0..cfg.trials {
            let m = run_trial(marked, key, rate, cfg.selection, trial_seed(cfg.seed, trial), eval)?.metrics;
            sum.detection_recall += m.detection_recall;
            sum.false_positive_rate += m.false_positive_rate;
            sum.restored_exact_frac += m.restored_exact_frac;
            sum.zeroed_frac += m.zeroed_frac;
            sum.acc_attacked += correct(m.acc_attacked);
            sum.acc_recovered += correct(m.acc_recovered);
        }
        let k = cfg.trials as f64;
        rows.push(SweepRow {
            rate,
            trials: cfg.trials,
            detection_recall: sum.detection_recall / k,
            false_positive_rate: sum.false_positive_rate / k,
            restored_exact_frac: sum.restored_exact_frac / k,
            zeroed_frac: sum.zeroed_frac / k,
            acc_clean,
            acc_watermarked,
            acc_attacked: sum.acc_attacked / (k * eval_len),
            acc_recovered: sum.acc_recovered / (k * eval_len),
        });
    }
    Ok(rows)
}

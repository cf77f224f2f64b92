//! Mini-batch training, stratified folds, threshold selection, metrics and
//! length-stratified reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineKind, RecordBaseline};
use crate::data::{Cohort, LengthBucket, PatientRecord};
use crate::model::{pretrain_input_nets, Branch, Dropout, Model, ModelConfig, PretrainConfig};
use crate::nn::ParamVector;
use crate::rng::{substream, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Patients per mini-batch; the batch loss is summed over patients.
    pub batch_size: usize,
    pub l2: f64,
    pub k_folds: usize,
    /// Share of each training split held out for threshold selection.
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            epochs: 100,
            batch_size: 20,
            l2: 0.01,
            k_folds: 4,
            validation_fraction: 0.2,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0) {
            return Err(Error::Config("lr and l2 must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Share of patients used for fitting in each fold.
    pub fn train_fraction(&self) -> f64 {
        1.0 - 1.0 / self.k_folds as f64
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2: self.l2,
            seed: self.seed,
        }
    }
}

/// `θ ← θ − lr·g`, leaving entries of ablated branches untouched.
pub fn sgd_step(model: &mut Model, grads: &ParamVector, lr: f64) -> Result<()> {
    let mut theta = ParamVector::flatten(model);
    if !theta.same_layout(grads) {
        return Err(Error::dim("gradient layout", theta.len(), grads.len()));
    }
    let frozen = model.frozen_mask(&theta);
    for ((v, g), f) in theta.values.iter_mut().zip(&grads.values).zip(frozen) {
        if !f {
            *v -= lr * g;
        }
    }
    theta.unflatten_into(model)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn step(&mut self, model: &mut Model, grads: &ParamVector, lr: f64, (b1, b2, eps): (f64, f64, f64)) -> Result<()> {
        let mut theta = ParamVector::flatten(model);
        if !theta.same_layout(grads) {
            return Err(Error::dim("gradient layout", theta.len(), grads.len()));
        }
        let frozen = model.frozen_mask(&theta);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for k in 0..theta.len() {
            if frozen[k] {
                continue;
            }
            let g = grads.values[k];
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
            theta.values[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps);
        }
        theta.unflatten_into(model)
    }
}

/// Per-epoch mean loss; entry 0 is measured before any update.
pub type LossHistory = Vec<f64>;

/// Trains in place over shuffled patient batches. Each history entry is the
/// mean over the epoch's mini-batches of the batch objective (summed
/// per-patient cross-entropy plus the L2 term).
pub fn train(model: &mut Model, records: &[&PatientRecord], cfg: &TrainConfig) -> Result<LossHistory> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let shuffle = &mut substream(cfg.seed, "shuffle", 0);
    let dropout = &mut substream(cfg.seed, "dropout", 0);
    let probe = &mut substream(cfg.seed, "dropout", 1);

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let penalty = model.weight_penalty(cfg.l2);
    let mut initial = 0.0;
    let mut batches = 0usize;
    for chunk in records.chunks(cfg.batch_size) {
        initial += model.loss(chunk, Dropout::Sample(probe), 0.0)? + penalty;
        batches += 1;
    }
    history.push(initial / batches as f64);
    log::debug!("epoch 0 loss {:.5}", history[0]);

    let n_params = ParamVector::flatten(model).len();
    let mut adam = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut order: Vec<&PatientRecord> = records.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = model
                .loss_and_gradient(batch, Dropout::Sample(dropout), cfg.l2)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            total += loss;
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(model, &grads, cfg.lr)?,
                Optimizer::Adam { beta1, beta2, eps } => adam.step(model, &grads, cfg.lr, (beta1, beta2, eps))?,
            }
        }
        let epoch_loss = total / batches as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {epoch_loss} at epoch {epoch}")));
        }
        log::debug!("epoch {epoch} loss {epoch_loss:.5}");
        history.push(epoch_loss);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn buckets_of(records: &[PatientRecord], indices: &[usize]) -> [Vec<usize>; 4] {
    let mut buckets: [Vec<usize>; 4] = Default::default();
    for &i in indices {
        buckets[records[i].bucket().index()].push(i);
    }
    buckets
}

/// Length-stratified k-fold partition: each bucket is shuffled and dealt
/// round-robin, the dealing position carrying over between buckets.
pub fn kfold_split(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if cohort.records.len() < k {
        return Err(Error::Validation(format!(
            "{} patients cannot fill {k} folds",
            cohort.records.len()
        )));
    }
    let rng = &mut substream(seed, "folds", 0);
    let all: Vec<usize> = (0..cohort.records.len()).collect();
    let mut tests = vec![Vec::new(); k];
    let mut next = 0;
    for (bucket, mut members) in LengthBucket::ALL.iter().zip(buckets_of(&cohort.records, &all)) {
        if !members.is_empty() && members.len() < k {
            log::warn!("length bucket {bucket} has {} patients for {k} folds", members.len());
        }
        members.shuffle(rng);
        for i in members {
            tests[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = all.iter().copied().filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Stratified split of `indices` into `(fit, validation)`.
pub fn stratified_holdout(
    records: &[PatientRecord],
    indices: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for mut members in buckets_of(records, indices) {
        members.shuffle(rng);
        let n_val = (members.len() as f64 * fraction).round() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(pairs: &[(f64, u8)], alpha: f64) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for &(p, y) in pairs {
            match (p >= alpha, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// Names of ratios that were 0/0 and reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_metrics(pairs: &[(f64, u8)], alpha: f64) -> Metrics {
    let c = Confusion::at(pairs, alpha);
    let mut undefined = Vec::new();
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    let accuracy = ratio(c.tp + c.tn, pairs.len(), "accuracy", &mut undefined);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Metrics {
        recall,
        precision,
        accuracy,
        f1,
        undefined,
    }
}

/// Area under the ROC curve with tied scores stepped together; `None` when a
/// class is absent.
pub fn auc(pairs: &[(f64, u8)]) -> Option<f64> {
    let positives = pairs.iter().filter(|(_, y)| *y == 1).count() as u128;
    let negatives = pairs.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, u8)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // twice the area, in units of one TP × one FP
    let mut doubled: u128 = 0;
    let mut tp: u128 = 0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        let (mut group_tp, mut group_fp) = (0u128, 0u128);
        while end < sorted.len() && sorted[end].0 == sorted[start].0 {
            if sorted[end].1 == 1 {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            end += 1;
        }
        doubled += group_fp * (2 * tp + group_tp);
        tp += group_tp;
        start = end;
    }
    Some(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub alpha: f64,
    pub f1: f64,
    /// Validation labels had a single class; `alpha` is the 0.5 fallback.
    pub fallback: bool,
}

/// F1-maximizing threshold on the grid `0.01, 0.02, …, 0.99`; ties go to the smallest.
pub fn select_threshold(pairs: &[(f64, u8)]) -> Result<ThresholdChoice> {
    if pairs.is_empty() {
        return Err(Error::Validation("no validation predictions for threshold selection".into()));
    }
    let positives = pairs.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == pairs.len() {
        log::warn!("validation labels contain a single class; using threshold 0.5");
        return Ok(ThresholdChoice {
            alpha: 0.5,
            f1: confusion_metrics(pairs, 0.5).f1,
            fallback: true,
        });
    }
    let mut best = ThresholdChoice {
        alpha: 0.01,
        f1: f64::NEG_INFINITY,
        fallback: false,
    };
    for k in 1..100 {
        let alpha = k as f64 / 100.0;
        let f1 = confusion_metrics(pairs, alpha).f1;
        if f1 > best.f1 {
            best = ThresholdChoice { alpha, f1, fallback: false };
        }
    }
    Ok(best)
}

/// Which model a report row evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum ModelFamily {
    Sequential {
        model: ModelConfig,
        #[serde(default)]
        ablate: Vec<Branch>,
        #[serde(default)]
        pretrain: Option<PretrainConfig>,
    },
    Baseline { kind: BaselineKind },
}

impl ModelFamily {
    pub fn attention(window: usize) -> Self {
        ModelFamily::Sequential {
            model: ModelConfig { attention: window, ..ModelConfig::default() },
            ablate: Vec::new(),
            pretrain: Some(PretrainConfig::default()),
        }
    }

    /// Row label used in reports.
    pub fn label(&self) -> String {
        match self {
            ModelFamily::Sequential { model, ablate, .. } => {
                let mut label = if model.attention == 0 {
                    "no_attention".to_string()
                } else {
                    format!("attention_l{}", model.attention)
                };
                for b in ablate {
                    label.push_str(match b {
                        Branch::Clinician => "_patient_only",
                        Branch::Patient => "_clinician_only",
                    });
                }
                label
            }
            ModelFamily::Baseline { kind: BaselineKind::LogReg } => "logreg".into(),
            ModelFamily::Baseline { kind: BaselineKind::Ffnn } => "ffnn".into(),
        }
    }
}

/// A fitted model of any family, scoring whole records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitted {
    Sequential(Model),
    Baseline(RecordBaseline),
}

impl Fitted {
    pub fn predict(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        match self {
            Fitted::Sequential(m) => m.predict(record),
            Fitted::Baseline(b) => b.predict(record),
        }
    }
}

/// Fits one model of `family` on `records`; returns the model and its loss
/// history (empty for baselines).
pub fn fit_family(
    family: &ModelFamily,
    cohort: &Cohort,
    records: &[&PatientRecord],
    cfg: &TrainConfig,
) -> Result<(Fitted, LossHistory)> {
    match family {
        ModelFamily::Sequential { model, ablate, pretrain } => {
            let model_cfg = model.normalized_for(&cohort.header);
            let mut net = Model::new(model_cfg, cohort.k_c(), cohort.k_p(), cfg.seed)?;
            for branch in ablate {
                net.ablate(*branch);
            }
            if let Some(p) = pretrain {
                let subset = Cohort {
                    header: cohort.header.clone(),
                    records: records.iter().map(|r| (*r).clone()).collect(),
                };
                pretrain_input_nets(&mut net, &subset, p, cfg.seed)?;
            }
            let history = train(&mut net, records, cfg)?;
            Ok((Fitted::Sequential(net), history))
        }
        ModelFamily::Baseline { kind } => {
            let age = (
                cohort.header.age_mean.unwrap_or(ModelConfig::default().age_mean),
                cohort.header.age_std.unwrap_or(ModelConfig::default().age_std),
            );
            let b = RecordBaseline::train(*kind, records, cohort.k_p(), age, &cfg.baseline())?;
            Ok((Fitted::Baseline(b), Vec::new()))
        }
    }
}

/// Bucket labels in report order.
pub const REPORT_COLUMNS: [&str; 5] = ["1", "2", "3", "4+", "all"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub visits: usize,
    pub metrics: Metrics,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub threshold: ThresholdChoice,
    pub history: LossHistory,
    /// Keyed by [`REPORT_COLUMNS`]; absent when the bucket has no test visits.
    pub buckets: BTreeMap<String, BucketMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
    pub folds: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            folds: values.len(),
        })
    }

    /// `mean±std` scaled by 100 with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub const METRIC_NAMES: [&str; 5] = ["recall", "precision", "accuracy", "auc", "f1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub folds: Vec<FoldResult>,
    /// `summary[metric][column]`; a missing column means no fold had data.
    pub summary: BTreeMap<String, BTreeMap<String, Summary>>,
}

impl EvalReport {
    fn from_folds(model: String, folds: Vec<FoldResult>) -> Self {
        let mut summary = BTreeMap::new();
        for metric in METRIC_NAMES {
            let mut row = BTreeMap::new();
            for column in REPORT_COLUMNS {
                let values: Vec<f64> = folds
                    .iter()
                    .filter_map(|f| f.buckets.get(column))
                    .filter_map(|b| match metric {
                        "recall" => Some(b.metrics.recall),
                        "precision" => Some(b.metrics.precision),
                        "accuracy" => Some(b.metrics.accuracy),
                        "f1" => Some(b.metrics.f1),
                        _ => b.auc,
                    })
                    .collect();
                if let Some(s) = Summary::of(&values) {
                    row.insert(column.to_string(), s);
                }
            }
            summary.insert(metric.to_string(), row);
        }
        Self { model, folds, summary }
    }

    pub fn get(&self, metric: &str, column: &str) -> Option<&Summary> {
        self.summary.get(metric)?.get(column)
    }
}

fn score(fitted: &Fitted, records: &[&PatientRecord]) -> Result<Vec<Vec<(f64, u8)>>> {
    records
        .iter()
        .map(|r| Ok(fitted.predict(r)?.into_iter().zip(r.labels()).collect()))
        .collect()
}

fn bucket_metrics(pairs: &[(f64, u8)], alpha: f64) -> BucketMetrics {
    BucketMetrics {
        visits: pairs.len(),
        metrics: confusion_metrics(pairs, alpha),
        auc: auc(pairs),
    }
}

/// Trains on one fold's training split, picks the threshold on a stratified
/// inner validation split and scores the held-out patients.
pub fn run_fold(family: &ModelFamily, cohort: &Cohort, fold: &Fold, index: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    let fold_cfg = TrainConfig {
        seed: substream(cfg.seed, "fold", index as u64).next_u64(),
        ..cfg.clone()
    };
    let split_rng = &mut substream(cfg.seed, "holdout", index as u64);
    let (fit, val) = stratified_holdout(&cohort.records, &fold.train, cfg.validation_fraction, split_rng);
    let fit_records: Vec<&PatientRecord> = fit.iter().map(|&i| &cohort.records[i]).collect();
    let val_records: Vec<&PatientRecord> = val.iter().map(|&i| &cohort.records[i]).collect();
    let test_records: Vec<&PatientRecord> = fold.test.iter().map(|&i| &cohort.records[i]).collect();

    let (fitted, history) = fit_family(family, cohort, &fit_records, &fold_cfg)?;
    let val_pairs: Vec<(f64, u8)> = score(&fitted, &val_records)?.into_iter().flatten().collect();
    let threshold = select_threshold(&val_pairs)?;

    let test_scores = score(&fitted, &test_records)?;
    let mut by_bucket: [Vec<(f64, u8)>; 4] = Default::default();
    for (record, pairs) in test_records.iter().zip(&test_scores) {
        by_bucket[record.bucket().index()].extend_from_slice(pairs);
    }
    let mut buckets = BTreeMap::new();
    for (bucket, pairs) in LengthBucket::ALL.iter().zip(&by_bucket) {
        if !pairs.is_empty() {
            buckets.insert(bucket.label().to_string(), bucket_metrics(pairs, threshold.alpha));
        }
    }
    let all: Vec<(f64, u8)> = by_bucket.concat();
    buckets.insert("all".to_string(), bucket_metrics(&all, threshold.alpha));
    Ok(FoldResult {
        threshold,
        history,
        buckets,
    })
}

/// Cross-validated report for one model family. With `parallel`, folds run on
/// separate threads; results are identical either way.
pub fn stratified_report(family: &ModelFamily, cohort: &Cohort, cfg: &TrainConfig, parallel: bool) -> Result<EvalReport> {
    cfg.validate()?;
    cohort.validate()?;
    let folds = kfold_split(cohort, cfg.k_folds, cfg.seed)?;
    let results: Vec<FoldResult> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = folds
                .iter()
                .enumerate()
                .map(|(k, fold)| scope.spawn(move || run_fold(family, cohort, fold, k, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        folds
            .iter()
            .enumerate()
            .map(|(k, fold)| run_fold(family, cohort, fold, k, cfg))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport::from_folds(family.label(), results))
}

/// Table-shaped CSV: one row per (model, metric), one column per bucket.
pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["model", "metric"];
    header.extend(REPORT_COLUMNS);
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for report in reports {
        for metric in METRIC_NAMES {
            let mut row = vec![report.model.clone(), metric.to_string()];
            for column in REPORT_COLUMNS {
                row.push(report.get(metric, column).map_or_else(|| "-".to_string(), Summary::cell));
            }
            writer.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(reports: &[EvalReport], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, reports)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_history_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(["epoch", "loss"]).map_err(|e| csv_error(path, e))?;
    for (epoch, loss) in history.iter().enumerate() {
        writer
            .write_record([epoch.to_string(), loss.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClinicianVisit, CohortHeader, StaticInfo};
    use crate::synth::{generate_cohort, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn record_with_visits(id: usize, n: usize) -> PatientRecord {
        PatientRecord {
            id: format!("p{id}"),
            static_info: StaticInfo { sex: 0, age: 40.0 },
            visits: (0..n)
                .map(|i| ClinicianVisit { t: i as f64, x: vec![0.0, 0.0], y: (i % 2) as u8 })
                .collect(),
            answers: Vec::new(),
        }
    }

    fn cohort_of(lengths: &[usize]) -> Cohort {
        Cohort {
            header: CohortHeader::new(2, 1),
            records: lengths.iter().enumerate().map(|(i, &n)| record_with_visits(i, n)).collect(),
        }
    }

    /// Mann–Whitney U: P(score_pos > score_neg) + ½·P(tie).
    fn mann_whitney(pairs: &[(f64, u8)]) -> f64 {
        let pos: Vec<f64> = pairs.iter().filter(|p| p.1 == 1).map(|p| p.0).collect();
        let neg: Vec<f64> = pairs.iter().filter(|p| p.1 == 0).map(|p| p.0).collect();
        let mut u = 0.0;
        for p in &pos {
            for n in &neg {
                u += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        u / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn sgd_step_examples() {
        let mut model = Model::new(ModelConfig::default(), 3, 2, 0).unwrap();
        let before = model.clone();
        let zero = ParamVector::flatten(&model).zeros_like();
        sgd_step(&mut model, &zero, 0.005).unwrap();
        assert_eq!(model, before);

        let mut grads = zero.clone();
        grads.values.iter_mut().for_each(|g| *g = 2.0);
        let mut theta = ParamVector::flatten(&model);
        theta.values.iter_mut().for_each(|v| *v = 1.0);
        theta.unflatten_into(&mut model).unwrap();
        sgd_step(&mut model, &grads, 0.005).unwrap();
        assert!(ParamVector::flatten(&model).values.iter().all(|v| *v == 0.99));
    }

    #[test]
    fn sgd_skips_frozen_entries() {
        let mut model = Model::new(ModelConfig::default(), 3, 2, 0).unwrap();
        model.ablate(Branch::Patient);
        let mut grads = ParamVector::flatten(&model).zeros_like();
        grads.values.iter_mut().for_each(|g| *g = 1.0);
        sgd_step(&mut model, &grads, 0.1).unwrap();
        let flat = ParamVector::flatten(&model);
        for e in &flat.entries {
            if Branch::Patient.owns(&e.name) {
                assert!(flat.values[e.range()].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn plain_descent_minimizes_a_quadratic_bowl() {
        // ½θ² has gradient θ
        let mut theta = 1.0f64;
        let mut steps = 0;
        while theta.abs() >= 1e-3 && steps < 2000 {
            theta -= 0.005 * theta;
            steps += 1;
        }
        assert!(theta.abs() < 1e-3, "{theta} after {steps}");
    }

    #[test]
    fn folds_are_balanced_partitions() {
        let cohort = cohort_of(&[1, 1, 2, 2, 3, 3, 4, 5]);
        let folds = kfold_split(&cohort, 2, 1).unwrap();
        for fold in &folds {
            let counts = buckets_of(&cohort.records, &fold.test).map(|b| b.len());
            assert_eq!(counts, [1, 1, 1, 1]);
        }
        let mut union: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        union.sort_unstable();
        assert_eq!(union, (0..8).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 8);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
        assert!(kfold_split(&cohort, 1, 0).is_err());
    }

    #[test]
    fn folds_of_a_generated_cohort_are_stratified() {
        let cohort = generate_cohort(&SynthConfig { n_patients: 1000, ..Default::default() }).unwrap().cohort;
        let folds = kfold_split(&cohort, 4, 7).unwrap();
        for b in 0..4 {
            let counts: Vec<usize> = folds.iter().map(|f| buckets_of(&cohort.records, &f.test)[b].len()).collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
        }
    }

    #[test]
    fn threshold_examples() {
        let separated = [(0.1, 0), (0.9, 1), (0.1, 0), (0.9, 1)];
        assert_eq!(select_threshold(&separated).unwrap().alpha, 0.11);
        assert_eq!(select_threshold(&[(0.8, 1), (0.2, 0)]).unwrap().alpha, 0.21);
        let one_class = select_threshold(&[(0.3, 0), (0.6, 0)]).unwrap();
        assert!(one_class.fallback && one_class.alpha == 0.5);
        assert!(select_threshold(&[]).is_err());
    }

    #[test]
    fn threshold_matches_brute_force_grid() {
        let mut rng = substream(3, "thr", 0);
        for _ in 0..20 {
            let pairs: Vec<(f64, u8)> = (0..60)
                .map(|_| (rng.random::<f64>(), u8::from(rng.random::<f64>() < 0.3)))
                .collect();
            let mut best = (0.0, -1.0);
            for k in 1..100 {
                let alpha = k as f64 / 100.0;
                let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
                for &(p, y) in &pairs {
                    match (p >= alpha, y) {
                        (true, 1) => tp += 1.0,
                        (true, _) => fp += 1.0,
                        (false, 1) => fn_ += 1.0,
                        _ => {}
                    }
                }
                let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
                if f1 > best.1 + 1e-12 {
                    best = (alpha, f1);
                }
            }
            assert_eq!(select_threshold(&pairs).unwrap().alpha, best.0);
        }
    }

    #[test]
    fn confusion_examples() {
        let perfect = [(0.9, 1), (0.1, 0)];
        let m = confusion_metrics(&perfect, 0.5);
        assert_eq!((m.recall, m.precision, m.accuracy, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = confusion_metrics(&[(0.1, 1), (0.2, 0)], 0.5);
        assert_eq!(m.recall, 0.0);
        assert!(m.undefined.contains(&"precision".to_string()));

        // TP=2, FP=1, FN=1, TN=6
        let mut pairs = vec![(0.9, 1), (0.9, 1), (0.9, 0), (0.1, 1)];
        pairs.extend(std::iter::repeat_n((0.1, 0), 6));
        let m = confusion_metrics(&pairs, 0.5);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)]), Some(1.0));
        assert_eq!(auc(&[(0.5, 1), (0.5, 0), (0.5, 0), (0.5, 1)]), Some(0.5));
        assert_eq!(auc(&[(0.5, 1)]), None);
        let mut rng = substream(4, "auc", 0);
        let pairs: Vec<(f64, u8)> = (0..200)
            .map(|_| ((rng.random::<f64>() * 20.0).round() / 20.0, u8::from(rng.random::<bool>())))
            .collect();
        assert!((auc(&pairs).unwrap() - mann_whitney(&pairs)).abs() < 1e-10);
    }

    #[test]
    fn summary_uses_population_std() {
        let s = Summary::of(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.cell(), "25.00±43.30");
        assert!(Summary::of(&[]).is_none());
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(scores in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60), alpha in 0.01f64..0.99) {
            let m = confusion_metrics(&scores, alpha);
            for v in [m.recall, m.precision, m.accuracy, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-12);
            }
            if let Some(a) = auc(&scores) {
                prop_assert!((0.0..=1.0).contains(&a));
                let transformed: Vec<(f64, u8)> = scores.iter().map(|(s, y)| ((3.0 * s).exp() - 7.0, *y)).collect();
                prop_assert!((auc(&transformed).unwrap() - a).abs() < 1e-12);
            }
        }
    }

    fn tiny_cohort(n: usize, seed: u64) -> Cohort {
        generate_cohort(&SynthConfig {
            n_patients: n,
            k_c: 6,
            k_p: 4,
            signal_c: 2,
            signal_p: 2,
            seed,
            ..Default::default()
        })
        .unwrap()
        .cohort
    }

    fn small_family() -> ModelFamily {
        ModelFamily::Sequential {
            model: ModelConfig { embed_hidden: 4, embed_width: 5, ..ModelConfig::default() },
            ablate: Vec::new(),
            pretrain: None,
        }
    }

    #[test]
    fn zero_lr_or_epochs_keep_parameters() {
        let cohort = tiny_cohort(30, 1);
        let records: Vec<&PatientRecord> = cohort.records.iter().collect();
        let fresh = Model::new(ModelConfig::default(), 6, 4, 2).unwrap();
        let mut model = fresh.clone();
        let history = train(&mut model, &records, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!((model == fresh, history.len()), (true, 1));
        let history = train(&mut model, &records, &TrainConfig { lr: 0.0, epochs: 3, ..Default::default() }).unwrap();
        assert_eq!(model, fresh);
        assert_eq!(history.len(), 4);
    }

    #[test]
    fn training_is_bit_reproducible_and_freezes_ablated_branch() {
        let cohort = tiny_cohort(30, 2);
        let records: Vec<&PatientRecord> = cohort.records.iter().collect();
        let cfg = TrainConfig { epochs: 3, seed: 5, ..Default::default() };
        let mut a = Model::new(ModelConfig::default(), 6, 4, 3).unwrap();
        a.ablate(Branch::Clinician);
        let frozen_before: Vec<f64> = {
            let flat = ParamVector::flatten(&a);
            flat.entries.iter().filter(|e| Branch::Clinician.owns(&e.name)).flat_map(|e| flat.values[e.range()].to_vec()).collect()
        };
        let mut b = a.clone();
        let ha = train(&mut a, &records, &cfg).unwrap();
        let hb = train(&mut b, &records, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ha.iter().zip(&hb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let flat = ParamVector::flatten(&a);
        let frozen_after: Vec<f64> = flat.entries.iter().filter(|e| Branch::Clinician.owns(&e.name)).flat_map(|e| flat.values[e.range()].to_vec()).collect();
        assert_eq!(frozen_before, frozen_after);
    }

    #[test]
    fn adam_option_trains() {
        let cohort = tiny_cohort(30, 3);
        let records: Vec<&PatientRecord> = cohort.records.iter().collect();
        let cfg = TrainConfig {
            epochs: 5,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            ..Default::default()
        };
        let mut model = Model::new(ModelConfig::default(), 6, 4, 1).unwrap();
        let history = train(&mut model, &records, &cfg).unwrap();
        assert!(history.last().unwrap() < &history[0]);
    }

    #[test]
    fn report_of_length_one_cohort_fills_bucket_one_and_all() {
        let mut cohort = tiny_cohort(40, 4);
        for r in &mut cohort.records {
            r.visits.truncate(1);
        }
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let report = stratified_report(&small_family(), &cohort, &cfg, false).unwrap();
        for fold in &report.folds {
            let keys: Vec<&String> = fold.buckets.keys().collect();
            assert_eq!(keys, ["1", "all"]);
        }
        assert!(report.get("recall", "2").is_none());
    }

    #[test]
    fn reports_are_deterministic_and_parallel_safe() {
        let cohort = tiny_cohort(40, 5);
        let cfg = TrainConfig { epochs: 2, seed: 3, ..Default::default() };
        let a = stratified_report(&small_family(), &cohort, &cfg, false).unwrap();
        let b = stratified_report(&small_family(), &cohort, &cfg, true).unwrap();
        assert_eq!(a, b);
        let baseline = ModelFamily::Baseline { kind: BaselineKind::LogReg };
        let c = stratified_report(&baseline, &cohort, &cfg, false).unwrap();
        assert_eq!(c.model, "logreg");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&[a, c], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "model,metric,1,2,3,4+,all");
        assert_eq!(lines.count(), 10);
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_history_csv(&[0.5, 0.25], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,loss\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn family_labels() {
        assert_eq!(ModelFamily::attention(1).label(), "attention_l1");
        assert_eq!(ModelFamily::attention(0).label(), "no_attention");
        let clinician_only = ModelFamily::Sequential {
            model: ModelConfig::default(),
            ablate: vec![Branch::Patient],
            pretrain: None,
        };
        assert_eq!(clinician_only.label(), "attention_l1_clinician_only");
    }
}

//! Non-sequential baselines over stacked per-visit features
//! `[x_c ; most recent x_p (or zeros) ; sex ; age]`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::nn::{l2_penalty, sigmoid, Activation, DenseLayer, ParamKind, ParamVector, Params, ParamsMut};
use crate::rng::{substream, Rng};
use crate::{Error, Result};

const MAX_LR_HALVINGS: usize = 5;

/// One feature vector per visit; the patient slot is zero when no answer precedes the visit.
pub fn stack_features(record: &PatientRecord, k_p: usize, age_mean: f64, age_std: f64) -> Vec<Vec<f64>> {
    let age = (record.static_info.age - age_mean) / age_std;
    record
        .visits
        .iter()
        .zip(record.alignment())
        .map(|(visit, j)| {
            let mut v = visit.x.clone();
            match j {
                Some(j) => v.extend_from_slice(&record.answers[j].x),
                None => v.extend(std::iter::repeat_n(0.0, k_p)),
            }
            v.push(f64::from(record.static_info.sex));
            v.push(age);
            v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    LogReg,
    /// Two tanh layers (10, 20) and a sigmoid unit.
    Ffnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            epochs: 100,
            batch_size: 20,
            l2: 0.01,
            seed: 0,
        }
    }
}

/// Stack of dense layers ending in a single logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub layers: Vec<DenseLayer>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, input: usize, rng: &mut Rng) -> Self {
        let layers = match kind {
            BaselineKind::LogReg => vec![DenseLayer::zeros(input, 1, Activation::Linear)],
            BaselineKind::Ffnn => vec![
                DenseLayer::glorot(input, 10, Activation::Tanh, rng),
                DenseLayer::glorot(10, 20, Activation::Tanh, rng),
                DenseLayer::glorot(20, 1, Activation::Linear, rng),
            ],
        };
        Self { kind, layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for layer in &self.layers {
            let next = layer.forward_unchecked(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(Error::dim("baseline input", self.input_width(), x.len()));
        }
        Ok(sigmoid(self.activations(x).last().expect("logit")[0]))
    }

    fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    /// Summed cross-entropy over `samples` plus `l2·Σw²`.
    pub fn loss(&self, samples: &[(&[f64], u8)], l2: f64) -> f64 {
        let data: f64 = samples
            .iter()
            .map(|(x, y)| {
                let logit = self.activations(x).last().expect("logit")[0];
                // log(1 + e^z) − y·z, stable for large |z|
                logit.max(0.0) + (-logit.abs()).exp().ln_1p() - f64::from(*y) * logit
            })
            .sum();
        data + l2_penalty(&ParamVector::flatten(self), |_| true, l2).0
    }

    pub fn gradient(&self, samples: &[(&[f64], u8)], l2: f64) -> ParamVector {
        let mut grads = self.zeros_like();
        for (x, y) in samples {
            let acts = self.activations(x);
            let mut d = vec![sigmoid(acts.last().expect("logit")[0]) - f64::from(*y)];
            for (k, layer) in self.layers.iter().enumerate().rev() {
                d = layer.backward_acc(&acts[k], &acts[k + 1], &d, &mut grads.layers[k]);
            }
        }
        let mut flat = ParamVector::flatten(&grads);
        let (_, penalty) = l2_penalty(&ParamVector::flatten(self), |_| true, l2);
        flat.values.iter_mut().zip(&penalty.values).for_each(|(g, p)| *g += p);
        flat
    }

    fn step(&mut self, grad: &ParamVector, lr: f64) {
        let mut k = 0;
        self.visit_mut("", &mut |_, _, values| {
            for v in values.iter_mut() {
                *v -= lr * grad.values[k];
                k += 1;
            }
        });
    }
}

impl Params for Baseline {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&crate::nn::params_join(prefix, &format!("layer{k}")), f);
        }
    }
}

impl ParamsMut for Baseline {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&crate::nn::params_join(prefix, &format!("layer{k}")), f);
        }
    }
}

fn fit(kind: BaselineKind, samples: &[(&[f64], u8)], cfg: &BaselineConfig) -> Result<Baseline> {
    let width = samples
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::Validation("no training samples".into()))?;
    if let Some((x, _)) = samples.iter().find(|(x, _)| x.len() != width) {
        return Err(Error::dim("baseline sample width", width, x.len()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut lr = cfg.lr;
    'attempt: for attempt in 0..=MAX_LR_HALVINGS {
        let init = &mut substream(cfg.seed, "baseline-init", 0);
        let shuffle = &mut substream(cfg.seed, "baseline-shuffle", 0);
        let mut model = Baseline::new(kind, width, init);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.epochs {
            order.shuffle(shuffle);
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&k| samples[k]));
                let grad = model.gradient(&batch, cfg.l2);
                if grad.values.iter().any(|g| !g.is_finite()) {
                    log::warn!("baseline diverged at lr {lr} (attempt {attempt}); halving");
                    lr *= 0.5;
                    continue 'attempt;
                }
                model.step(&grad, lr);
            }
        }
        if model.loss(samples, cfg.l2).is_finite() {
            return Ok(model);
        }
        lr *= 0.5;
    }
    Err(Error::Numeric(format!(
        "baseline training diverged after {MAX_LR_HALVINGS} learning-rate halvings"
    )))
}

pub fn logreg_train(samples: &[(&[f64], u8)], cfg: &BaselineConfig) -> Result<Baseline> {
    fit(BaselineKind::LogReg, samples, cfg)
}

pub fn ffnn_train(samples: &[(&[f64], u8)], cfg: &BaselineConfig) -> Result<Baseline> {
    fit(BaselineKind::Ffnn, samples, cfg)
}

/// A baseline bundled with the normalization needed to score whole records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordBaseline {
    pub model: Baseline,
    pub k_p: usize,
    pub age_mean: f64,
    pub age_std: f64,
}

impl RecordBaseline {
    pub fn train(
        kind: BaselineKind,
        records: &[&PatientRecord],
        k_p: usize,
        age: (f64, f64),
        cfg: &BaselineConfig,
    ) -> Result<Self> {
        let rows: Vec<(Vec<f64>, u8)> = records
            .iter()
            .flat_map(|r| stack_features(r, k_p, age.0, age.1).into_iter().zip(r.labels()))
            .collect();
        let samples: Vec<(&[f64], u8)> = rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        Ok(Self {
            model: fit(kind, &samples, cfg)?,
            k_p,
            age_mean: age.0,
            age_std: age.1,
        })
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        stack_features(record, self.k_p, self.age_mean, self.age_std)
            .iter()
            .map(|x| self.model.predict(x))
            .collect()
    }
}

//! Browser bindings: cohort generation, a short training run and a t-SNE demo.
//!
//! Each exported function returns a JSON string; errors become JS exceptions.

use dualseq::interpret::{tsne, TsneConfig};
use dualseq::model::{pretrain_input_nets, Model, ModelConfig, PretrainConfig};
use dualseq::rng::substream;
use dualseq::synth::{generate_cohort, SynthConfig};
use dualseq::train::{auc, train, TrainConfig};
use dualseq::Result;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Feature widths kept small so the demo trains in seconds.
fn demo_synth(n_patients: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_patients,
        k_c: 12,
        k_p: 6,
        signal_c: 3,
        signal_p: 2,
        seed,
        ..SynthConfig::default()
    }
}

#[derive(Debug, Serialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub visits: usize,
    pub answers: usize,
    pub positive_rate: f64,
    /// Patients per clinician-length bucket `1, 2, 3, 4+`.
    pub buckets: [usize; 4],
    pub visit_lengths: Vec<usize>,
}

pub fn cohort_summary(n_patients: usize, seed: u64) -> Result<CohortSummary> {
    let cohort = generate_cohort(&demo_synth(n_patients, seed))?.cohort;
    let mut buckets = [0; 4];
    for r in &cohort.records {
        buckets[r.bucket().index()] += 1;
    }
    let labels: Vec<u8> = cohort.records.iter().flat_map(|r| r.labels()).collect();
    Ok(CohortSummary {
        patients: cohort.records.len(),
        visits: cohort.n_visits(),
        answers: cohort.records.iter().map(|r| r.answers.len()).sum(),
        positive_rate: labels.iter().map(|y| f64::from(*y)).sum::<f64>() / labels.len() as f64,
        buckets,
        visit_lengths: cohort.records.iter().map(|r| r.visits.len()).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct TrainingRun {
    pub history: Vec<f64>,
    pub train_auc: Option<f64>,
}

pub fn training_run(n_patients: usize, epochs: usize, attention: usize, seed: u64) -> Result<TrainingRun> {
    let cohort = generate_cohort(&demo_synth(n_patients, seed))?.cohort;
    let config = ModelConfig {
        attention,
        ..ModelConfig::default()
    }
    .normalized_for(&cohort.header);
    let mut model = Model::new(config, cohort.k_c(), cohort.k_p(), seed)?;
    let pretrain = PretrainConfig {
        epochs: 5,
        ..PretrainConfig::default()
    };
    pretrain_input_nets(&mut model, &cohort, &pretrain, seed)?;
    let records: Vec<_> = cohort.records.iter().collect();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &records, &cfg)?;
    let mut pairs = Vec::new();
    for r in &cohort.records {
        pairs.extend(model.predict(r)?.into_iter().zip(r.labels()));
    }
    Ok(TrainingRun {
        history,
        train_auc: auc(&pairs),
    })
}

#[derive(Debug, Serialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub kl: Vec<f64>,
    pub perplexity: f64,
}

/// Two Gaussian clouds in 10 dimensions, `gap` apart on every axis, embedded in 2-D.
pub fn two_cloud_embedding(n_each: usize, gap: f64, perplexity: f64, iters: usize, seed: u64) -> Result<Embedding> {
    let mut rng = substream(seed, "web-clouds", 0);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(2 * n_each);
    let mut labels = Vec::with_capacity(2 * n_each);
    for cluster in 0..2u8 {
        for _ in 0..n_each {
            let offset = f64::from(cluster) * gap;
            points.push((0..10).map(|_| offset + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect());
            labels.push(cluster);
        }
    }
    let cfg = TsneConfig {
        perplexity,
        iters,
        seed,
        ..TsneConfig::default()
    };
    let out = tsne(&points, &cfg)?;
    Ok(Embedding {
        coords: out.coords,
        labels,
        kl: out.kl_history,
        perplexity: out.perplexity,
    })
}

fn to_js<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsValue> {
    let value = value.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = cohortSummary)]
pub fn cohort_summary_js(n_patients: usize, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(cohort_summary(n_patients, seed))
}

#[wasm_bindgen(js_name = trainingRun)]
pub fn training_run_js(n_patients: usize, epochs: usize, attention: usize, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(training_run(n_patients, epochs, attention, seed))
}

#[wasm_bindgen(js_name = twoCloudEmbedding)]
pub fn two_cloud_embedding_js(
    n_each: usize,
    gap: f64,
    perplexity: f64,
    iters: usize,
    seed: u64,
) -> std::result::Result<String, JsValue> {
    to_js(two_cloud_embedding(n_each, gap, perplexity, iters, seed))
}

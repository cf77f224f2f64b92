//! The assembled dual-sequence classifier.
//!
//! Per subject: both event streams are embedded by two-layer tanh nets, the
//! elapsed-time channel `ln(1 + Δt)` is appended, and each stream runs through
//! its own recurrent cell. The clinician cell starts from a learned initial
//! state; the patient cell starts from zero. At visit `i` the classifier sees
//! `[o_c_i ; o*_{j*} ; sex ; age]`, where `j*` is the most recent answer and
//! `o*` is the attention-transformed patient output (or the raw output when
//! attention is disabled, or zeros when no answer precedes the visit).

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{window_memory, AttentionBlock, AttentionCache};
use crate::data::{validate_record, Cohort, CohortHeader, PatientRecord};
use crate::nn::{
    dropout_mask, l2_penalty, sigmoid, Activation, DenseLayer, ParamKind, ParamVector, Params,
    ParamsMut,
};
use crate::recurrent::{InitialStateCache, InitialStateNet, RnnCell, RnnTrace};
use crate::rng::{substream, Rng};
use crate::{Error, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` inside the loss.
pub const PROB_CLIP: f64 = 1e-7;

const CHECKPOINT_FORMAT: &str = "dualseq-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Clinician,
    Patient,
}

impl Branch {
    /// Parameter-name prefixes owned by the branch.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Branch::Clinician => &["input_c", "cell_c", "init"],
            Branch::Patient => &["input_p", "cell_p", "attn"],
        }
    }

    pub fn owns(self, param_name: &str) -> bool {
        self.prefixes()
            .iter()
            .any(|p| param_name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinician" => Ok(Branch::Clinician),
            "patient" => Ok(Branch::Patient),
            other => Err(Error::Config(format!(
                "unknown branch '{other}', expected 'clinician' or 'patient'"
            ))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Clinician => "clinician",
            Branch::Patient => "patient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_hidden: usize,
    pub embed_width: usize,
    pub hidden_c: usize,
    pub out_c: usize,
    pub hidden_p: usize,
    pub out_p: usize,
    pub init_hidden: usize,
    pub classifier_hidden: usize,
    /// Attention window `L`; 0 feeds the raw patient output to the classifier.
    pub attention: usize,
    pub dropout: f64,
    /// Append `ln(1 + Δt)` to every embedded event.
    pub time_channel: bool,
    pub age_mean: f64,
    pub age_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_hidden: 10,
            embed_width: 20,
            hidden_c: 10,
            out_c: 10,
            hidden_p: 5,
            out_p: 5,
            init_hidden: 10,
            classifier_hidden: 10,
            attention: 1,
            dropout: 0.6,
            time_channel: true,
            age_mean: 43.32,
            age_std: 12.6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("embed_hidden", self.embed_hidden),
            ("embed_width", self.embed_width),
            ("hidden_c", self.hidden_c),
            ("out_c", self.out_c),
            ("hidden_p", self.hidden_p),
            ("out_p", self.out_p),
            ("init_hidden", self.init_hidden),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("model width {name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.age_std > 0.0) || !self.age_mean.is_finite() {
            return Err(Error::Config("age normalization needs finite mean and positive std".into()));
        }
        Ok(())
    }

    /// Takes the age normalization carried by a cohort header, if any.
    pub fn normalized_for(&self, header: &CohortHeader) -> Self {
        let mut cfg = self.clone();
        if let (Some(mean), Some(std)) = (header.age_mean, header.age_std) {
            cfg.age_mean = mean;
            cfg.age_std = std;
        }
        cfg
    }

    pub fn rnn_input_width(&self) -> usize {
        self.embed_width + usize::from(self.time_channel)
    }

    pub fn merged_width(&self) -> usize {
        self.out_c + self.out_p + 2
    }
}

/// Two tanh layers reducing one event's raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNet {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
struct EmbedCache {
    hidden: Vec<f64>,
    embedded: Vec<f64>,
}

impl InputNet {
    pub fn glorot(input: usize, hidden: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            layer1: DenseLayer::glorot(input, hidden, Activation::Tanh, rng),
            layer2: DenseLayer::glorot(hidden, width, Activation::Tanh, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer1.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layer2.output_width()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.layer1.forward(x)?;
        self.layer2.forward(&hidden)
    }

    fn forward_cached(&self, x: &[f64]) -> EmbedCache {
        let hidden = self.layer1.forward_unchecked(x);
        let embedded = self.layer2.forward_unchecked(&hidden);
        EmbedCache { hidden, embedded }
    }

    fn backward_acc(&self, x: &[f64], cache: &EmbedCache, d_embedded: &[f64], grads: &mut InputNet) {
        let d_hidden = self
            .layer2
            .backward_acc(&cache.hidden, &cache.embedded, d_embedded, &mut grads.layer2);
        self.layer1
            .backward_acc(x, &cache.hidden, &d_hidden, &mut grads.layer1);
    }
}

impl Params for InputNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        self.layer1.visit(&join(prefix, "layer1"), f);
        self.layer2.visit(&join(prefix, "layer2"), f);
    }
}

impl ParamsMut for InputNet {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        self.layer1.visit_mut(&join(prefix, "layer1"), f);
        self.layer2.visit_mut(&join(prefix, "layer2"), f);
    }
}

/// Hidden tanh layer followed by a single logit; the sigmoid is applied by
/// the caller so the loss gradient can be taken with respect to the logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub hidden: DenseLayer,
    pub readout: DenseLayer,
}

impl Classifier {
    pub fn glorot(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: DenseLayer::glorot(input, hidden, Activation::Tanh, rng),
            readout: DenseLayer::glorot(hidden, 1, Activation::Linear, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            readout: self.readout.zeros_like(),
        }
    }

    pub fn predict(&self, merged: &[f64]) -> Result<f64> {
        let h = self.hidden.forward(merged)?;
        Ok(sigmoid(self.readout.forward(&h)?[0]))
    }
}

impl Params for Classifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.readout.visit(&join(prefix, "readout"), f);
    }
}

impl ParamsMut for Classifier {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.readout.visit_mut(&join(prefix, "readout"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub input_c: InputNet,
    pub input_p: InputNet,
    pub cell_c: RnnCell,
    pub cell_p: RnnCell,
    pub init: InitialStateNet,
    pub attn: Option<AttentionBlock>,
    pub classifier: Classifier,
    #[serde(default)]
    pub ablated: BTreeSet<Branch>,
}

/// How dropout masks on the merged vector are obtained.
pub enum Dropout<'a> {
    Off,
    Sample(&'a mut Rng),
    /// One mask per record, one scale vector per visit.
    Fixed(&'a [Vec<Vec<f64>>]),
}

/// Forward intermediates of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTrace {
    /// `ŷ_i` per visit.
    pub probs: Vec<f64>,
    /// Merged classifier inputs before dropout.
    pub merged: Vec<Vec<f64>>,
    alignment: Vec<Option<usize>>,
    visit_embed: Vec<EmbedCache>,
    answer_embed: Vec<EmbedCache>,
    c_in: Vec<Vec<f64>>,
    p_in: Vec<Vec<f64>>,
    init: Option<InitialStateCache>,
    trace_c: RnnTrace,
    trace_p: RnnTrace,
    attention: Vec<Option<AttentionCache>>,
    masks: Option<Vec<Vec<f64>>>,
    classifier_in: Vec<Vec<f64>>,
    classifier_hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn log_gaps<'a>(times: impl Iterator<Item = &'a f64>) -> Vec<f64> {
    let mut prev: Option<f64> = None;
    times
        .map(|&t| {
            let gap = prev.map_or(0.0, |p| (t - p).max(0.0));
            prev = Some(t);
            gap.ln_1p()
        })
        .collect()
}

/// Mean clipped cross-entropy of one record: `−(1/T) Σ [y ln ŷ + (1−y) ln(1−ŷ)]`.
pub fn record_cross_entropy(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

impl Model {
    /// Randomly initialized model; every tensor is drawn from the `init`
    /// substream of `seed` in a fixed order.
    pub fn new(config: ModelConfig, k_c: usize, k_p: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if k_c == 0 || k_p == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        let rng = &mut substream(seed, "init", 0);
        let rnn_in = config.rnn_input_width();
        let input_c = InputNet::glorot(k_c, config.embed_hidden, config.embed_width, rng);
        let input_p = InputNet::glorot(k_p, config.embed_hidden, config.embed_width, rng);
        let cell_c = RnnCell::glorot(rnn_in, config.hidden_c, config.out_c, rng);
        let cell_p = RnnCell::glorot(rnn_in, config.hidden_p, config.out_p, rng);
        let init = InitialStateNet::glorot(config.embed_width, config.init_hidden, config.hidden_c, rng);
        let attn = (config.attention > 0).then(|| AttentionBlock::glorot(config.out_p, config.attention, rng));
        let classifier = Classifier::glorot(config.merged_width(), config.classifier_hidden, rng);
        Ok(Self {
            config,
            input_c,
            input_p,
            cell_c,
            cell_p,
            init,
            attn,
            classifier,
            ablated: BTreeSet::new(),
        })
    }

    pub fn k_c(&self) -> usize {
        self.input_c.input_width()
    }

    pub fn k_p(&self) -> usize {
        self.input_p.input_width()
    }

    /// Same layout, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            input_c: self.input_c.zeros_like(),
            input_p: self.input_p.zeros_like(),
            cell_c: self.cell_c.zeros_like(),
            cell_p: self.cell_p.zeros_like(),
            init: self.init.zeros_like(),
            attn: self.attn.as_ref().map(AttentionBlock::zeros_like),
            classifier: self.classifier.zeros_like(),
            ablated: self.ablated.clone(),
        }
    }

    /// Checks that all component widths agree with each other and the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let rnn_in = cfg.rnn_input_width();
        let checks = [
            ("clinician input net", cfg.embed_width, self.input_c.output_width()),
            ("patient input net", cfg.embed_width, self.input_p.output_width()),
            ("clinician cell input", rnn_in, self.cell_c.input_width()),
            ("patient cell input", rnn_in, self.cell_p.input_width()),
            ("clinician cell output", cfg.out_c, self.cell_c.output_width()),
            ("patient cell output", cfg.out_p, self.cell_p.output_width()),
            ("initial-state output", self.cell_c.hidden_width(), self.init.output_width()),
            ("initial-state input", cfg.embed_width + 2, self.init.layer1.input_width()),
            ("classifier input", cfg.merged_width(), self.classifier.hidden.input_width()),
            ("classifier readout", 1, self.classifier.readout.output_width()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(Error::dim(context, expected, got));
            }
        }
        self.cell_c.validate()?;
        self.cell_p.validate()?;
        match (&self.attn, cfg.attention) {
            (None, 0) => {}
            (Some(block), l) if block.window == l => {
                block.validate()?;
                if block.width() != cfg.out_p {
                    return Err(Error::dim("attention width", cfg.out_p, block.width()));
                }
            }
            _ => {
                return Err(Error::Config(
                    "attention block does not match the configured window".into(),
                ))
            }
        }
        Ok(())
    }

    /// Replaces the input nets, e.g. with pretrained ones.
    pub fn with_input_nets(mut self, input_c: InputNet, input_p: InputNet) -> Result<Self> {
        self.input_c = input_c;
        self.input_p = input_p;
        self.validate()?;
        for branch in self.ablated.clone() {
            self.zero_branch(branch);
        }
        Ok(self)
    }

    fn zero_branch(&mut self, branch: Branch) {
        self.visit_mut("", &mut |name, _, values| {
            if branch.owns(name) {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    /// Zeroes and freezes one branch; its slot in the merged vector becomes zeros.
    pub fn ablate(&mut self, branch: Branch) {
        self.zero_branch(branch);
        self.ablated.insert(branch);
    }

    pub fn is_ablated(&self, branch: Branch) -> bool {
        self.ablated.contains(&branch)
    }

    /// `true` for every flat entry that must not be updated.
    pub fn frozen_mask(&self, layout: &ParamVector) -> Vec<bool> {
        layout.mask(|e| self.ablated.iter().any(|b| b.owns(&e.name)))
    }

    fn static_features(&self, record: &PatientRecord) -> [f64; 2] {
        [
            f64::from(record.static_info.sex),
            (record.static_info.age - self.config.age_mean) / self.config.age_std,
        ]
    }

    fn check_record(&self, record: &PatientRecord) -> Result<()> {
        let problems = validate_record(record, self.k_c(), self.k_p());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("record {}: {}", record.id, problems.join("; "))))
        }
    }

    /// Dropout masks for every visit of `record`.
    pub fn sample_masks(&self, record: &PatientRecord, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let width = self.config.merged_width();
        record
            .visits
            .iter()
            .map(|_| dropout_mask(width, self.config.dropout, rng))
            .collect()
    }

    /// Forward pass with caches. With `training`, dropout masks are drawn from `rng`.
    pub fn forward_record(&self, record: &PatientRecord, training: bool, rng: &mut Rng) -> Result<RecordTrace> {
        self.check_record(record)?;
        let masks = if training {
            Some(self.sample_masks(record, rng)?)
        } else {
            None
        };
        self.forward_cached(record, masks)
    }

    /// Inference probabilities, one per visit.
    pub fn predict(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        self.check_record(record)?;
        Ok(self.forward_cached(record, None)?.probs)
    }

    fn forward_cached(&self, record: &PatientRecord, masks: Option<Vec<Vec<f64>>>) -> Result<RecordTrace> {
        let cfg = &self.config;
        let n_visits = record.visits.len();
        if let Some(m) = &masks {
            if m.len() != n_visits || m.iter().any(|v| v.len() != cfg.merged_width()) {
                return Err(Error::dim("dropout masks", n_visits, m.len()));
            }
        }
        let alignment = record.alignment();
        let statics = self.static_features(record);

        // clinician stream
        let clinician_on = !self.is_ablated(Branch::Clinician);
        let (visit_embed, c_in, init, trace_c) = if clinician_on {
            let embed: Vec<EmbedCache> = record
                .visits
                .iter()
                .map(|v| self.input_c.forward_cached(&v.x))
                .collect();
            let c_in = self.rnn_inputs(&embed, log_gaps(record.visits.iter().map(|v| &v.t)));
            let init = self.init.forward_cached(&embed[0].embedded, statics);
            let trace = self.cell_c.forward_unchecked(&c_in, &init.h0);
            (embed, c_in, Some(init), trace)
        } else {
            (Vec::new(), Vec::new(), None, RnnTrace::default())
        };

        // patient stream, truncated after the last answer any visit can see
        let patient_on = !self.is_ablated(Branch::Patient);
        let used = alignment.iter().flatten().max().map_or(0, |j| j + 1);
        let (answer_embed, p_in, trace_p) = if patient_on && used > 0 {
            let answers = &record.answers[..used];
            let embed: Vec<EmbedCache> = answers
                .iter()
                .map(|a| self.input_p.forward_cached(&a.x))
                .collect();
            let p_in = self.rnn_inputs(&embed, log_gaps(answers.iter().map(|a| &a.t)));
            let trace = self.cell_p.forward_unchecked(&p_in, &vec![0.0; cfg.hidden_p]);
            (embed, p_in, trace)
        } else {
            (Vec::new(), Vec::new(), RnnTrace::default())
        };

        let mut attention: Vec<Option<AttentionCache>> = vec![None; trace_p.outputs.len()];
        if let Some(block) = &self.attn {
            for &j in alignment.iter().flatten() {
                if j < attention.len() && attention[j].is_none() {
                    let memory = window_memory(&trace_p.outputs, j, block.window);
                    attention[j] = Some(block.forward_unchecked(memory, &trace_p.outputs[j]));
                }
            }
        }

        let mut trace = RecordTrace {
            probs: Vec::with_capacity(n_visits),
            merged: Vec::with_capacity(n_visits),
            alignment,
            visit_embed,
            answer_embed,
            c_in,
            p_in,
            init,
            trace_c,
            trace_p,
            attention,
            masks,
            classifier_in: Vec::with_capacity(n_visits),
            classifier_hidden: Vec::with_capacity(n_visits),
            logits: Vec::with_capacity(n_visits),
        };
        for i in 0..n_visits {
            let mut merged = Vec::with_capacity(cfg.merged_width());
            if clinician_on {
                merged.extend_from_slice(&trace.trace_c.outputs[i]);
            } else {
                merged.extend(std::iter::repeat_n(0.0, cfg.out_c));
            }
            match trace.alignment[i] {
                Some(j) if patient_on => match &trace.attention.get(j) {
                    Some(Some(cache)) => merged.extend_from_slice(&cache.o_star),
                    _ => merged.extend_from_slice(&trace.trace_p.outputs[j]),
                },
                _ => merged.extend(std::iter::repeat_n(0.0, cfg.out_p)),
            }
            merged.extend_from_slice(&statics);
            let input: Vec<f64> = match &trace.masks {
                Some(m) => merged.iter().zip(&m[i]).map(|(v, s)| v * s).collect(),
                None => merged.clone(),
            };
            let hidden = self.classifier.hidden.forward_unchecked(&input);
            let logit = self.classifier.readout.forward_unchecked(&hidden)[0];
            if !logit.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite logit at visit {i} of record {}",
                    record.id
                )));
            }
            trace.probs.push(sigmoid(logit));
            trace.merged.push(merged);
            trace.classifier_in.push(input);
            trace.classifier_hidden.push(hidden);
            trace.logits.push(logit);
        }
        Ok(trace)
    }

    fn rnn_inputs(&self, embed: &[EmbedCache], gaps: Vec<f64>) -> Vec<Vec<f64>> {
        embed
            .iter()
            .zip(gaps)
            .map(|(e, gap)| {
                let mut v = e.embedded.clone();
                if self.config.time_channel {
                    v.push(gap);
                }
                v
            })
            .collect()
    }

    /// Accumulates parameter gradients of `Σ_i d_logits[i]·logit_i` into `grads`.
    fn backward_record(&self, record: &PatientRecord, trace: &RecordTrace, d_logits: &[f64], grads: &mut Model) {
        let cfg = &self.config;
        let n_visits = record.visits.len();
        let clinician_on = !self.is_ablated(Branch::Clinician);
        let patient_on = !self.is_ablated(Branch::Patient);
        let n_used = trace.trace_p.outputs.len();
        let mut d_out_c = vec![vec![0.0; cfg.out_c]; trace.trace_c.outputs.len()];
        let mut d_out_p = vec![vec![0.0; cfg.out_p]; n_used];
        let mut d_o_star = vec![vec![0.0; cfg.out_p]; n_used];

        for i in 0..n_visits {
            let d_logit = d_logits[i];
            if d_logit == 0.0 {
                continue;
            }
            let d_hidden = self.classifier.readout.backward_acc(
                &trace.classifier_hidden[i],
                &[trace.logits[i]],
                &[d_logit],
                &mut grads.classifier.readout,
            );
            let mut d_in = self.classifier.hidden.backward_acc(
                &trace.classifier_in[i],
                &trace.classifier_hidden[i],
                &d_hidden,
                &mut grads.classifier.hidden,
            );
            if let Some(m) = &trace.masks {
                d_in.iter_mut().zip(&m[i]).for_each(|(d, s)| *d *= s);
            }
            if clinician_on {
                add_into(&mut d_out_c[i], &d_in[..cfg.out_c]);
            }
            if let (true, Some(j)) = (patient_on, trace.alignment[i]) {
                let d_slot = &d_in[cfg.out_c..cfg.out_c + cfg.out_p];
                if self.attn.is_some() {
                    add_into(&mut d_o_star[j], d_slot);
                } else {
                    add_into(&mut d_out_p[j], d_slot);
                }
            }
        }

        if patient_on && n_used > 0 {
            if let (Some(block), Some(g_attn)) = (&self.attn, grads.attn.as_mut()) {
                for j in (0..n_used).rev() {
                    let Some(cache) = &trace.attention[j] else { continue };
                    let (d_memory, d_o) =
                        block.backward_acc(cache, &trace.trace_p.outputs[j], &d_o_star[j], g_attn);
                    add_into(&mut d_out_p[j], &d_o);
                    let window = block.window;
                    for c in 0..window {
                        if j + c >= window {
                            let src = j + c - window;
                            for (row, d) in d_out_p[src].iter_mut().enumerate() {
                                *d += d_memory.get(row, c);
                            }
                        }
                    }
                }
            }
            let h0 = vec![0.0; cfg.hidden_p];
            let (d_p_in, _) =
                self.cell_p
                    .backward_acc(&trace.p_in, &h0, &trace.trace_p, &d_out_p, None, &mut grads.cell_p);
            for (j, d) in d_p_in.iter().enumerate() {
                self.input_p.backward_acc(
                    &record.answers[j].x,
                    &trace.answer_embed[j],
                    &d[..cfg.embed_width],
                    &mut grads.input_p,
                );
            }
        }

        if clinician_on {
            let init = trace.init.as_ref().expect("clinician stream was computed");
            let (d_c_in, d_h0) =
                self.cell_c
                    .backward_acc(&trace.c_in, &init.h0, &trace.trace_c, &d_out_c, None, &mut grads.cell_c);
            let d_first = self.init.backward_acc(init, &d_h0, &mut grads.init);
            for (i, d) in d_c_in.iter().enumerate() {
                let mut d_embed = d[..cfg.embed_width].to_vec();
                if i == 0 {
                    add_into(&mut d_embed, &d_first);
                }
                self.input_c
                    .backward_acc(&record.visits[i].x, &trace.visit_embed[i], &d_embed, &mut grads.input_c);
            }
        }
    }

    fn traces(&self, batch: &[&PatientRecord], dropout: Dropout<'_>) -> Result<Vec<RecordTrace>> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        for record in batch {
            self.check_record(record)?;
        }
        match dropout {
            Dropout::Off => batch.iter().map(|r| self.forward_cached(r, None)).collect(),
            Dropout::Sample(rng) => batch
                .iter()
                .map(|r| {
                    let masks = self.sample_masks(r, rng)?;
                    self.forward_cached(r, Some(masks))
                })
                .collect(),
            Dropout::Fixed(masks) => {
                if masks.len() != batch.len() {
                    return Err(Error::dim("dropout mask sets", batch.len(), masks.len()));
                }
                batch
                    .iter()
                    .zip(masks)
                    .map(|(r, m)| self.forward_cached(r, Some(m.clone())))
                    .collect()
            }
        }
    }

    fn penalty(&self, l2: f64) -> (f64, ParamVector) {
        l2_penalty(&ParamVector::flatten(self), |_| true, l2)
    }

    /// `l2·Σw²` over all weight tensors.
    pub fn weight_penalty(&self, l2: f64) -> f64 {
        self.penalty(l2).0
    }

    /// Summed per-record mean cross-entropy plus `l2·Σw²`.
    pub fn loss(&self, batch: &[&PatientRecord], dropout: Dropout<'_>, l2: f64) -> Result<f64> {
        let traces = self.traces(batch, dropout)?;
        let data: f64 = batch
            .iter()
            .zip(&traces)
            .map(|(r, t)| record_cross_entropy(&t.probs, &r.labels()))
            .sum();
        Ok(data + self.penalty(l2).0)
    }

    /// Loss and its exact gradient as a flat vector in [`ParamVector::flatten`] order.
    pub fn loss_and_gradient(
        &self,
        batch: &[&PatientRecord],
        dropout: Dropout<'_>,
        l2: f64,
    ) -> Result<(f64, ParamVector)> {
        let traces = self.traces(batch, dropout)?;
        let mut grads = self.zeros_like();
        let mut data = 0.0;
        for (record, trace) in batch.iter().zip(&traces) {
            let labels = record.labels();
            data += record_cross_entropy(&trace.probs, &labels);
            let n = labels.len() as f64;
            let d_logits: Vec<f64> = trace
                .probs
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| {
                    if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                        0.0
                    } else {
                        (p - f64::from(y)) / n
                    }
                })
                .collect();
            self.backward_record(record, trace, &d_logits, &mut grads);
        }
        let (penalty, penalty_grad) = self.penalty(l2);
        let mut grad = ParamVector::flatten(&grads);
        grad.values
            .iter_mut()
            .zip(&penalty_grad.values)
            .for_each(|(g, p)| *g += p);
        let frozen = self.frozen_mask(&grad);
        grad.values
            .iter_mut()
            .zip(frozen)
            .filter(|(_, f)| *f)
            .for_each(|(g, _)| *g = 0.0);
        let loss = data + penalty;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            format: &'a str,
            version: u32,
            model: &'a Model,
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(
            &mut out,
            &Checkpoint {
                format: CHECKPOINT_FORMAT,
                version: CHECKPOINT_VERSION,
                model: self,
            },
        )?;
        out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Checkpoint {
            format: String,
            version: u32,
            model: Model,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        use crate::nn::params_join as join;
        self.input_c.visit(&join(prefix, "input_c"), f);
        self.input_p.visit(&join(prefix, "input_p"), f);
        self.cell_c.visit(&join(prefix, "cell_c"), f);
        self.cell_p.visit(&join(prefix, "cell_p"), f);
        self.init.visit(&join(prefix, "init"), f);
        if let Some(attn) = &self.attn {
            attn.visit(&join(prefix, "attn"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

impl ParamsMut for Model {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64])) {
        use crate::nn::params_join as join;
        self.input_c.visit_mut(&join(prefix, "input_c"), f);
        self.input_p.visit_mut(&join(prefix, "input_p"), f);
        self.cell_c.visit_mut(&join(prefix, "cell_c"), f);
        self.cell_p.visit_mut(&join(prefix, "cell_p"), f);
        self.init.visit_mut(&join(prefix, "init"), f);
        if let Some(attn) = &mut self.attn {
            attn.visit_mut(&join(prefix, "attn"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight penalty `l2·Σw²` added to each batch loss.
    pub l2: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.005,
            batch_size: 1,
            l2: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStats {
    pub final_loss: f64,
    /// Readout accuracy at threshold 0.5 on the training samples.
    pub accuracy: f64,
}

/// Trains `net` with a temporary sigmoid readout on `(x, y)` samples; the
/// readout is discarded.
pub fn pretrain_net(
    net: &mut InputNet,
    samples: &[(&[f64], u8)],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainStats> {
    if samples.is_empty() {
        return Err(Error::Validation("no labelled events to pretrain on".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::Config("pretraining needs batch_size > 0, lr >= 0 and l2 >= 0".into()));
    }
    let mut readout = DenseLayer::glorot(net.output_width(), 1, Activation::Linear, rng);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g_net = net.zeros_like();
            let mut g_out = readout.zeros_like();
            for &k in batch {
                let (x, y) = samples[k];
                let cache = net.forward_cached(x);
                let logit = readout.forward_unchecked(&cache.embedded)[0];
                let d_logit = sigmoid(logit) - f64::from(y);
                let d_embed = readout.backward_acc(&cache.embedded, &[logit], &[d_logit], &mut g_out);
                net.backward_acc(x, &cache, &d_embed, &mut g_net);
            }
            let step = |p: &mut dyn ParamsMut, g: &dyn Params| {
                let grad = ParamVector::flatten(g);
                let mut k = 0;
                p.visit_mut("", &mut |_, kind, values| {
                    let decay = if kind == ParamKind::Weight { 2.0 * cfg.l2 } else { 0.0 };
                    for v in values.iter_mut() {
                        *v -= cfg.lr * (grad.values[k] + decay * *v);
                        k += 1;
                    }
                });
            };
            step(net, &g_net);
            step(&mut readout, &g_out);
        }
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &(x, y) in samples {
        let p = sigmoid(readout.forward_unchecked(&net.forward_cached(x).embedded)[0]);
        loss += record_cross_entropy(&[p], &[y]);
        correct += usize::from(u8::from(p >= 0.5) == y);
    }
    let n = samples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("pretraining diverged".into()));
    }
    Ok(PretrainStats {
        final_loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Pretrains both input nets of `model` in place: visits against their own
/// label, answers against the label of the next visit at or after them.
pub fn pretrain_input_nets(model: &mut Model, cohort: &Cohort, cfg: &PretrainConfig, seed: u64) -> Result<()> {
    let mut visits: Vec<(&[f64], u8)> = Vec::new();
    let mut answers: Vec<(&[f64], u8)> = Vec::new();
    for record in &cohort.records {
        for v in &record.visits {
            visits.push((&v.x, v.y));
        }
        let mut next = 0;
        for a in &record.answers {
            while next < record.visits.len() && record.visits[next].t < a.t {
                next += 1;
            }
            if let Some(v) = record.visits.get(next) {
                answers.push((&a.x, v.y));
            }
        }
    }
    if visits.is_empty() {
        return Err(Error::Validation("cohort has no labelled visits".into()));
    }
    if !model.is_ablated(Branch::Clinician) {
        let stats = pretrain_net(&mut model.input_c, &visits, cfg, &mut substream(seed, "pretrain", 0))?;
        log::info!("clinician input net pretrained: loss {:.4}, accuracy {:.3}", stats.final_loss, stats.accuracy);
    }
    if !model.is_ablated(Branch::Patient) && !answers.is_empty() {
        let stats = pretrain_net(&mut model.input_p, &answers, cfg, &mut substream(seed, "pretrain", 1))?;
        log::info!("patient input net pretrained: loss {:.4}, accuracy {:.3}", stats.final_loss, stats.accuracy);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClinicianVisit, PatientAnswer, StaticInfo};
    use crate::nn::grad_check;
    use crate::synth::{generate_cohort, SynthConfig};
    use rand::Rng as _;

    pub(crate) fn small_config(attention: usize) -> ModelConfig {
        ModelConfig {
            embed_hidden: 3,
            embed_width: 4,
            hidden_c: 3,
            out_c: 3,
            hidden_p: 2,
            out_p: 2,
            init_hidden: 3,
            classifier_hidden: 3,
            attention,
            dropout: 0.3,
            ..ModelConfig::default()
        }
    }

    fn random_record(rng: &mut Rng, id: usize, k_c: usize, k_p: usize, max_c: usize, max_p: usize) -> PatientRecord {
        let n_c = rng.random_range(1..=max_c);
        let n_p = rng.random_range(0..=max_p);
        let mut times = |n: usize| {
            let mut t = 0.0;
            (0..n)
                .map(|_| {
                    t += rng.random_range(0.5..20.0);
                    t
                })
                .collect::<Vec<f64>>()
        };
        let visit_t = times(n_c);
        let answer_t = times(n_p);
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
        let visits = visit_t
            .iter()
            .map(|&t| ClinicianVisit { t, x: draw(k_c), y: 0 })
            .collect::<Vec<_>>();
        let answers = answer_t
            .iter()
            .map(|&t| PatientAnswer { t, x: draw(k_p) })
            .collect();
        let mut record = PatientRecord {
            id: format!("r{id}"),
            static_info: StaticInfo { sex: (id % 2) as u8, age: 30.0 + id as f64 },
            visits,
            answers,
        };
        for v in &mut record.visits {
            v.y = u8::from(rng.random::<f64>() < 0.4);
        }
        record
    }

    fn randomize_biases(model: &mut Model, rng: &mut Rng) {
        model.visit_mut("", &mut |_, kind, values| {
            if kind == ParamKind::Bias {
                values.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        });
    }

    fn check_gradient(model: &Model, batch: &[&PatientRecord], masks: &[Vec<Vec<f64>>], l2: f64) -> f64 {
        let theta = ParamVector::flatten(model);
        let with = |values: &[f64]| {
            let mut m = model.clone();
            ParamVector { values: values.to_vec(), entries: theta.entries.clone() }
                .unflatten_into(&mut m)
                .unwrap();
            m
        };
        let report = grad_check(
            |v| with(v).loss(batch, Dropout::Fixed(masks), l2).unwrap(),
            |v| with(v).loss_and_gradient(batch, Dropout::Fixed(masks), l2).unwrap().1.values,
            &theta.values,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for (seed, attention) in [(1, 1), (2, 3), (3, 0), (4, 3)] {
            let mut rng = substream(seed, "model-grad", 0);
            let mut model = Model::new(small_config(attention), 4, 3, seed).unwrap();
            randomize_biases(&mut model, &mut rng);
            let records: Vec<PatientRecord> = (0..3).map(|i| random_record(&mut rng, i, 4, 3, 3, 5)).collect();
            let batch: Vec<&PatientRecord> = records.iter().collect();
            let masks: Vec<_> = records.iter().map(|r| model.sample_masks(r, &mut rng).unwrap()).collect();
            let err = check_gradient(&model, &batch, &masks, 0.01);
            assert!(err < 1e-4, "seed {seed}, L={attention}: {err}");
        }
    }

    #[test]
    fn single_visit_gradient_matches_finite_differences() {
        let mut rng = substream(7, "model-grad", 1);
        let mut model = Model::new(small_config(1), 4, 3, 7).unwrap();
        randomize_biases(&mut model, &mut rng);
        let mut record = random_record(&mut rng, 0, 4, 3, 1, 3);
        record.visits.truncate(1);
        record.visits[0].t = 100.0;
        let masks = vec![vec![vec![1.0; 7]]];
        assert!(check_gradient(&model, &[&record], &masks, 0.0) < 1e-4);
    }

    #[test]
    fn ablated_branch_has_zero_gradient_and_no_influence() {
        let mut rng = substream(5, "model-ablate", 0);
        let record = random_record(&mut rng, 0, 4, 3, 3, 5);
        for branch in [Branch::Clinician, Branch::Patient] {
            let mut model = Model::new(small_config(2), 4, 3, 5).unwrap();
            model.ablate(branch);
            let (_, grad) = model.loss_and_gradient(&[&record], Dropout::Off, 0.01).unwrap();
            for entry in &grad.entries {
                if branch.owns(&entry.name) {
                    assert!(grad.values[entry.range()].iter().all(|g| *g == 0.0), "{}", entry.name);
                }
            }
            let mut perturbed = record.clone();
            match branch {
                Branch::Patient => perturbed.answers.iter_mut().for_each(|a| a.x.iter_mut().for_each(|v| *v += 3.0)),
                Branch::Clinician => perturbed.visits.iter_mut().for_each(|v| v.x.iter_mut().for_each(|x| *x -= 2.0)),
            }
            assert_eq!(model.predict(&record).unwrap(), model.predict(&perturbed).unwrap());
        }
    }

    #[test]
    fn both_branches_ablated_gives_constant_output() {
        let mut rng = substream(6, "model-ablate", 1);
        let mut model = Model::new(small_config(1), 4, 3, 6).unwrap();
        model.ablate(Branch::Clinician);
        model.ablate(Branch::Patient);
        model.classifier.hidden.bias.iter_mut().for_each(|b| *b = 0.0);
        model.classifier.readout.bias[0] = 0.0;
        let mut probs = Vec::new();
        for i in 0..4 {
            let mut r = random_record(&mut rng, i, 4, 3, 3, 5);
            r.static_info = StaticInfo { sex: 0, age: model.config.age_mean };
            probs.extend(model.predict(&r).unwrap());
        }
        assert!(probs.iter().all(|p| *p == probs[0]));
    }

    #[test]
    fn predictions_are_causal() {
        let mut rng = substream(8, "model-prefix", 0);
        let model = Model::new(small_config(3), 4, 3, 8).unwrap();
        for i in 0..20 {
            let record = random_record(&mut rng, i, 4, 3, 6, 8);
            let full = model.predict(&record).unwrap();
            for m in 1..=record.visits.len() {
                let prefix = model.predict(&record.truncated(m)).unwrap();
                assert_eq!(prefix[..], full[..m]);
            }
        }
    }

    #[test]
    fn missing_answers_use_zero_slot() {
        let mut rng = substream(9, "model-empty", 0);
        let model = Model::new(small_config(1), 4, 3, 9).unwrap();
        let mut record = random_record(&mut rng, 0, 4, 3, 3, 5);
        record.answers.clear();
        let trace = model.forward_record(&record, false, &mut rng).unwrap();
        assert_eq!(trace.probs.len(), record.visits.len());
        for merged in &trace.merged {
            assert_eq!(merged[3..5], [0.0, 0.0]);
        }
        let mut single = record.clone();
        single.visits.truncate(1);
        assert_eq!(model.predict(&single).unwrap().len(), 1);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = substream(10, "model-loss", 0);
        let model = Model::new(small_config(1), 4, 3, 10).unwrap();
        let records: Vec<PatientRecord> = (0..2).map(|i| random_record(&mut rng, i, 4, 3, 4, 5)).collect();
        let batch: Vec<&PatientRecord> = records.iter().collect();
        let mut expected = 0.0;
        for r in &records {
            let probs = model.predict(r).unwrap();
            let mut sum = 0.0;
            for (p, v) in probs.iter().zip(&r.visits) {
                let y = f64::from(v.y);
                sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
            expected += sum / probs.len() as f64;
        }
        let weights: f64 = {
            let flat = ParamVector::flatten(&model);
            flat.entries
                .iter()
                .filter(|e| e.kind == ParamKind::Weight)
                .flat_map(|e| flat.values[e.range()].to_vec())
                .map(|w| w * w)
                .sum()
        };
        let got = model.loss(&batch, Dropout::Off, 0.01).unwrap();
        assert!((got - expected - 0.01 * weights).abs() < 1e-12);
        assert!(model.loss(&[], Dropout::Off, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_edge_cases() {
        assert!((record_cross_entropy(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(record_cross_entropy(&[1.0, 0.0], &[1, 0]) <= 1e-6);
        assert!(record_cross_entropy(&[0.0], &[1]).is_finite());
    }

    #[test]
    fn invalid_record_is_rejected() {
        let model = Model::new(small_config(1), 4, 3, 1).unwrap();
        let mut rng = substream(1, "x", 0);
        let mut record = random_record(&mut rng, 0, 4, 3, 3, 3);
        record.visits[0].x.pop();
        assert!(matches!(model.predict(&record), Err(Error::Validation(_))));
    }

    #[test]
    fn branch_parsing() {
        assert_eq!("patient".parse::<Branch>().unwrap(), Branch::Patient);
        assert!(matches!("both".parse::<Branch>(), Err(Error::Config(_))));
        assert!(Branch::Patient.owns("attn.w_y"));
        assert!(!Branch::Patient.owns("attention.w_y"));
        assert!(!Branch::Clinician.owns("input_p.layer1.weights"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = Model::new(ModelConfig::default(), 6, 5, 3).unwrap();
        model.ablate(Branch::Patient);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let a = ParamVector::flatten(&model);
        let b = ParamVector::flatten(&loaded);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(loaded, model);
        std::fs::write(&path, "{\"format\":\"other\",\"version\":1}").unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn zero_epoch_pretraining_keeps_initialization() {
        let cohort = generate_cohort(&SynthConfig { n_patients: 20, ..SynthConfig::default() }).unwrap().cohort;
        let fresh = Model::new(ModelConfig::default(), 93, 24, 4).unwrap();
        let mut model = fresh.clone();
        pretrain_input_nets(&mut model, &cohort, &PretrainConfig { epochs: 0, ..Default::default() }, 4).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn pretraining_separates_a_separable_source() {
        let mut rng = substream(11, "sep", 0);
        let data: Vec<(Vec<f64>, u8)> = (0..400)
            .map(|_| {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = u8::from(x[0] + 0.5 * x[3] > 0.0);
                (x, y)
            })
            .collect();
        let samples: Vec<(&[f64], u8)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let mut net = InputNet::glorot(5, 10, 20, &mut rng);
        let cfg = PretrainConfig { epochs: 60, lr: 0.05, batch_size: 20, l2: 0.0 };
        let stats = pretrain_net(&mut net, &samples, &cfg, &mut rng).unwrap();
        assert!(stats.accuracy > 0.95, "{stats:?}");
    }
}

//! Synthetic cohorts with a planted labelling rule.
//!
//! A latent risk follows an AR(1) process in continuous time, sampled at every
//! event of a subject. A designated subset of clinician and patient features
//! carries the risk plus noise; the rest is pure noise. A visit is positive when
//!
//! ```text
//! w_c·s_c(x_c) + w_Δ·(s_p(last answer) − s_p(previous answer)) + ε > τ
//! ```
//!
//! where `s_c`, `s_p` average the designated features, both answers are the
//! two most recent at or before the visit, `ε ~ N(0, (noise·|τ|)²)` and `τ` is
//! calibrated by bisection to hit the target positive rate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClinicianVisit, Cohort, CohortHeader, PatientAnswer, PatientRecord, StaticInfo};
use crate::rng::{substream, Rng};
use crate::{Error, Result};

const MAX_BISECTION_STEPS: usize = 60;
const RATE_TOLERANCE: f64 = 0.01;

/// Sequence-length law: `min` with probability `p_min`, otherwise
/// `min + 1 + ⌊X⌋` with `X` log-normal, capped at `max`. `mean` is the target
/// mean of the whole mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMixture {
    pub min: usize,
    pub max: usize,
    pub p_min: f64,
    pub mean: f64,
    pub log_sd: f64,
}

impl LengthMixture {
    fn validate(&self, what: &str) -> Result<()> {
        let tail_mean = self.tail_excess();
        if self.min == 0 || self.max <= self.min {
            return Err(Error::Config(format!("{what}: need 1 <= min < max")));
        }
        if !(0.0..1.0).contains(&self.p_min) || !(self.log_sd > 0.0) {
            return Err(Error::Config(format!("{what}: need p_min in [0,1) and log_sd > 0")));
        }
        if !(tail_mean > 0.0) {
            return Err(Error::Config(format!(
                "{what}: mean {} too small for min {} and p_min {}",
                self.mean, self.min, self.p_min
            )));
        }
        Ok(())
    }

    /// Expected value of `X` needed for the mixture to reach `mean`.
    fn tail_excess(&self) -> f64 {
        let tail_mean = (self.mean - self.p_min * self.min as f64) / (1.0 - self.p_min);
        tail_mean - self.min as f64 - 0.5
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        if rng.random::<f64>() < self.p_min {
            return self.min;
        }
        let mu = self.tail_excess().ln() - 0.5 * self.log_sd * self.log_sd;
        let x: f64 = LogNormal::new(mu, self.log_sd)
            .expect("validated parameters")
            .sample(rng);
        (self.min + 1 + x.floor() as usize).min(self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub k_c: usize,
    pub k_p: usize,
    /// Number of clinician features carrying the latent risk.
    pub signal_c: usize,
    pub signal_p: usize,
    pub visits: LengthMixture,
    pub answers: LengthMixture,
    /// Mean follow-up span in days.
    pub follow_up_days: f64,
    /// Per-day AR(1) coefficient of the latent risk.
    pub rho: f64,
    pub sigma_c: f64,
    pub sigma_p: f64,
    pub w_c: f64,
    pub w_delta: f64,
    /// Label noise scale relative to `|τ|`.
    pub label_noise: f64,
    pub positive_rate: f64,
    /// Fixed threshold; disables calibration when set.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            k_c: 93,
            k_p: 24,
            signal_c: 8,
            signal_p: 6,
            visits: LengthMixture {
                min: 1,
                max: 119,
                p_min: 0.35,
                mean: 7.87,
                log_sd: 1.0,
            },
            answers: LengthMixture {
                min: 3,
                max: 858,
                p_min: 0.1,
                mean: 19.66,
                log_sd: 1.0,
            },
            follow_up_days: 475.0,
            rho: 0.99,
            sigma_c: 1.0,
            sigma_p: 1.0,
            w_c: 1.0,
            w_delta: 2.0,
            label_noise: 0.1,
            positive_rate: 0.15,
            threshold: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be at least 1".into()));
        }
        if self.k_c < 2 || self.k_p < 2 {
            return Err(Error::Config("feature widths must be at least 2".into()));
        }
        if self.signal_c == 0 || self.signal_c > self.k_c || self.signal_p == 0 || self.signal_p > self.k_p {
            return Err(Error::Config("signal subsets must be non-empty and fit the widths".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.sigma_c < 0.0 || self.sigma_p < 0.0 || self.label_noise < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Config("positive_rate must lie in (0, 1)".into()));
        }
        if !(self.follow_up_days > 0.0) {
            return Err(Error::Config("follow_up_days must be positive".into()));
        }
        self.visits.validate("visit lengths")?;
        self.answers.validate("answer lengths")
    }

    /// Indices of signal-carrying clinician features, spread over the width.
    pub fn signal_features_c(&self) -> Vec<usize> {
        spread(self.signal_c, self.k_c)
    }

    pub fn signal_features_p(&self) -> Vec<usize> {
        spread(self.signal_p, self.k_p)
    }
}

fn spread(n: usize, width: usize) -> Vec<usize> {
    (0..n).map(|k| k * width / n).collect()
}

/// Per-record quantities needed to re-derive labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLatents {
    pub id: String,
    pub visit_risk: Vec<f64>,
    pub answer_risk: Vec<f64>,
    /// Standard-normal draw per visit, scaled by `label_noise·|τ|`.
    pub label_noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortLatents {
    pub tau: f64,
    pub signal_c: Vec<usize>,
    pub signal_p: Vec<usize>,
    pub records: Vec<RecordLatents>,
}

impl CohortLatents {
    pub fn get(&self, id: &str) -> Option<&RecordLatents> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub cohort: Cohort,
    pub latents: CohortLatents,
}

fn mean_at(x: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64
}

/// Noise-free part of the label score for every visit of `record`.
pub fn planted_scores(record: &PatientRecord, cfg: &SynthConfig) -> Vec<f64> {
    let sc = cfg.signal_features_c();
    let sp = cfg.signal_features_p();
    record
        .visits
        .iter()
        .zip(record.alignment())
        .map(|(visit, j)| {
            let delta = match j {
                Some(j) if j >= 1 => {
                    mean_at(&record.answers[j].x, &sp) - mean_at(&record.answers[j - 1].x, &sp)
                }
                _ => 0.0,
            };
            cfg.w_c * mean_at(&visit.x, &sc) + cfg.w_delta * delta
        })
        .collect()
}

fn label(score: f64, z: f64, tau: f64, noise: f64) -> u8 {
    u8::from(score + noise * tau.abs() * z > tau)
}

/// Re-derives the labels of `record` from its features and stored latents.
pub fn planted_oracle(record: &PatientRecord, cfg: &SynthConfig, latents: &CohortLatents) -> Result<Vec<u8>> {
    let rec = latents
        .get(&record.id)
        .ok_or_else(|| Error::Validation(format!("no latents stored for record {}", record.id)))?;
    if rec.label_noise.len() != record.visits.len() {
        return Err(Error::dim("stored label noise", record.visits.len(), rec.label_noise.len()));
    }
    Ok(planted_scores(record, cfg)
        .into_iter()
        .zip(&rec.label_noise)
        .map(|(s, z)| label(s, *z, latents.tau, cfg.label_noise))
        .collect())
}

struct Draft {
    record: PatientRecord,
    latents: RecordLatents,
}

fn sorted_uniform(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    t.sort_by(f64::total_cmp);
    for k in 1..t.len() {
        if t[k] <= t[k - 1] {
            t[k] = t[k - 1] + 1e-6;
        }
    }
    t
}

fn draft_patient(cfg: &SynthConfig, index: usize, sc: &[usize], sp: &[usize]) -> Draft {
    let mut rng = substream(cfg.seed, "synth", index as u64);
    let rng = &mut rng;
    let n_visits = cfg.visits.sample(rng);
    let n_answers = cfg.answers.sample(rng);
    let span: f64 = LogNormal::new(cfg.follow_up_days.ln() - 0.125, 0.5)
        .expect("valid")
        .sample(rng);

    let answer_t = sorted_uniform(n_answers, 0.0, span, rng);
    // visits start once two answers exist so most visits see a contrast
    let start = answer_t[1.min(n_answers - 1)];
    let visit_t = sorted_uniform(n_visits, start, span.max(start + 1.0), rng);

    // latent risk on the merged timeline
    let mut events: Vec<(f64, bool, usize)> = visit_t
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, true, i))
        .chain(answer_t.iter().enumerate().map(|(j, &t)| (t, false, j)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut visit_risk = vec![0.0; n_visits];
    let mut answer_risk = vec![0.0; n_answers];
    let mut risk: f64 = rng.sample(StandardNormal);
    let mut last_t = events[0].0;
    for &(t, is_visit, k) in &events {
        let decay = cfg.rho.powf(t - last_t);
        let innovation: f64 = rng.sample(StandardNormal);
        risk = decay * risk + (1.0 - decay * decay).max(0.0).sqrt() * innovation;
        last_t = t;
        if is_visit {
            visit_risk[k] = risk;
        } else {
            answer_risk[k] = risk;
        }
    }

    let features = |width: usize, signal: &[usize], risk: f64, sigma: f64, rng: &mut Rng| {
        let mut x: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        for &i in signal {
            x[i] = risk + sigma * x[i];
        }
        x
    };
    let visits = visit_t
        .iter()
        .zip(&visit_risk)
        .map(|(&t, &r)| ClinicianVisit {
            t,
            x: features(cfg.k_c, sc, r, cfg.sigma_c, rng),
            y: 0,
        })
        .collect();
    let answers = answer_t
        .iter()
        .zip(&answer_risk)
        .map(|(&t, &r)| PatientAnswer {
            t,
            x: features(cfg.k_p, sp, r, cfg.sigma_p, rng),
        })
        .collect();
    let label_noise = (0..n_visits).map(|_| rng.sample(StandardNormal)).collect();
    let sex = u8::from(rng.random::<f64>() < 0.647);
    let age = (43.32 + 12.6 * rng.sample::<f64, _>(StandardNormal)).clamp(18.0, 90.0);
    let id = format!("s{index:05}");
    Draft {
        record: PatientRecord {
            id: id.clone(),
            static_info: StaticInfo { sex, age },
            visits,
            answers,
        },
        latents: RecordLatents {
            id,
            visit_risk,
            answer_risk,
            label_noise,
        },
    }
}

fn positive_rate(scores: &[(f64, f64)], tau: f64, noise: f64) -> f64 {
    let positives = scores.iter().filter(|(s, z)| label(*s, *z, tau, noise) == 1).count();
    positives as f64 / scores.len() as f64
}

fn calibrate_threshold(scores: &[(f64, f64)], cfg: &SynthConfig) -> Result<f64> {
    let target = cfg.positive_rate;
    let bound = scores.iter().map(|(s, _)| s.abs()).fold(1.0, f64::max);
    let (mut lo, mut hi) = (-2.0 * bound, 2.0 * bound);
    while positive_rate(scores, lo, cfg.label_noise) < target && lo > -1e12 {
        lo *= 2.0;
    }
    while positive_rate(scores, hi, cfg.label_noise) > target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let rate = positive_rate(scores, mid, cfg.label_noise);
        if (rate - target).abs() <= RATE_TOLERANCE {
            return Ok(mid);
        }
        if rate > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numeric(format!(
        "positive rate {target} unreachable within {MAX_BISECTION_STEPS} bisection steps"
    )))
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let sc = cfg.signal_features_c();
    let sp = cfg.signal_features_p();
    let mut drafts: Vec<Draft> = (0..cfg.n_patients)
        .map(|i| draft_patient(cfg, i, &sc, &sp))
        .collect();

    let scored: Vec<(f64, f64)> = drafts
        .iter()
        .flat_map(|d| {
            planted_scores(&d.record, cfg)
                .into_iter()
                .zip(d.latents.label_noise.iter().copied())
        })
        .collect();
    let tau = match cfg.threshold {
        Some(tau) => tau,
        None => calibrate_threshold(&scored, cfg)?,
    };
    let mut cursor = scored.iter();
    for draft in &mut drafts {
        for visit in &mut draft.record.visits {
            let (s, z) = cursor.next().expect("one score per visit");
            visit.y = label(*s, *z, tau, cfg.label_noise);
        }
    }

    let ages: Vec<f64> = drafts.iter().map(|d| d.record.static_info.age).collect();
    let age_mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let age_var = ages.iter().map(|a| (a - age_mean).powi(2)).sum::<f64>() / ages.len() as f64;
    let mut header = CohortHeader::new(cfg.k_c, cfg.k_p);
    header.age_mean = Some(age_mean);
    header.age_std = Some(if age_var > 0.0 { age_var.sqrt() } else { 1.0 });

    let (records, latent_records) = drafts.into_iter().map(|d| (d.record, d.latents)).unzip();
    Ok(SynthOutput {
        cohort: Cohort { header, records },
        latents: CohortLatents {
            tau,
            signal_c: sc,
            signal_p: sp,
            records: latent_records,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct LatentsHeader {
    tau: f64,
    signal_c: Vec<usize>,
    signal_p: Vec<usize>,
}

/// Sidecar JSONL: a header with `τ` and the signal subsets, then one line per record.
pub fn write_latents(latents: &CohortLatents, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = LatentsHeader {
        tau: latents.tau,
        signal_c: latents.signal_c.clone(),
        signal_p: latents.signal_p.clone(),
    };
    let mut write = || -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for rec in &latents.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<CohortLatents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header: Option<LatentsHeader> = None;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        };
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(err)?);
        } else if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(err)?);
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty latents file".into(),
    })?;
    Ok(CohortLatents {
        tau: header.tau,
        signal_c: header.signal_c,
        signal_p: header.signal_p,
        records,
    })
}

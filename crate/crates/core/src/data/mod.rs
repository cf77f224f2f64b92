//! Subjects with two asynchronous event sequences, their alignment and
//! length stratification.

mod io;

pub use io::{read_cohort, write_cohort, CohortHeader};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One labelled clinician event. `t` is in days since the subject's first event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicianVisit {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: u8,
}

/// One unlabelled patient event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientAnswer {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticInfo {
    pub sex: u8,
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(flatten)]
    pub static_info: StaticInfo,
    pub visits: Vec<ClinicianVisit>,
    pub answers: Vec<PatientAnswer>,
}

impl PatientRecord {
    pub fn labels(&self) -> Vec<u8> {
        self.visits.iter().map(|v| v.y).collect()
    }

    /// Index of the most recent answer at or before each visit.
    pub fn alignment(&self) -> Vec<Option<usize>> {
        let mut j: Option<usize> = None;
        let mut next = 0;
        self.visits
            .iter()
            .map(|visit| {
                while next < self.answers.len() && self.answers[next].t <= visit.t {
                    j = Some(next);
                    next += 1;
                }
                j
            })
            .collect()
    }

    pub fn bucket(&self) -> LengthBucket {
        LengthBucket::of_len(self.visits.len())
    }

    /// Copy holding the first `m` visits and only the answers available by then.
    pub fn truncated(&self, m: usize) -> PatientRecord {
        let m = m.clamp(1, self.visits.len());
        let horizon = self.visits[m - 1].t;
        PatientRecord {
            id: self.id.clone(),
            static_info: self.static_info,
            visits: self.visits[..m].to_vec(),
            answers: self
                .answers
                .iter()
                .take_while(|a| a.t <= horizon)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub header: CohortHeader,
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn k_c(&self) -> usize {
        self.header.k_c
    }

    pub fn k_p(&self) -> usize {
        self.header.k_p
    }

    pub fn n_visits(&self) -> usize {
        self.records.iter().map(|r| r.visits.len()).sum()
    }

    /// Sub-cohort with the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            header: self.header.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        for (n, record) in self.records.iter().enumerate() {
            let violations = validate_record(record, self.header.k_c, self.header.k_p);
            if !violations.is_empty() {
                return Err(Error::Validation(format!(
                    "record {n} ({}): {}",
                    record.id,
                    violations.join("; ")
                )));
            }
        }
        Ok(())
    }
}

/// Largest `j` with `answers[j].t <= t`, found by binary search.
pub fn most_recent_answer_index(answers: &[PatientAnswer], t: f64) -> Result<Option<usize>> {
    if let Some(k) = answers.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(Error::Validation(format!(
            "answers not time-sorted at index {}",
            k + 1
        )));
    }
    let count = answers.partition_point(|a| a.t <= t);
    Ok(count.checked_sub(1))
}

/// Reporting stratum for clinician-sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LengthBucket {
    One,
    Two,
    Three,
    FourPlus,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 4] = [
        LengthBucket::One,
        LengthBucket::Two,
        LengthBucket::Three,
        LengthBucket::FourPlus,
    ];

    pub fn of_len(len: usize) -> Self {
        match len {
            0 | 1 => LengthBucket::One,
            2 => LengthBucket::Two,
            3 => LengthBucket::Three,
            _ => LengthBucket::FourPlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::One => "1",
            LengthBucket::Two => "2",
            LengthBucket::Three => "3",
            LengthBucket::FourPlus => "4+",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn length_bucket(t_c: usize) -> Result<LengthBucket> {
    if t_c < 1 {
        return Err(Error::Validation(
            "clinician sequence length must be at least 1".into(),
        ));
    }
    Ok(LengthBucket::of_len(t_c))
}

/// Every structural problem with `record`, each prefixed by its field path.
pub fn validate_record(record: &PatientRecord, k_c: usize, k_p: usize) -> Vec<String> {
    let mut violations = Vec::new();
    let s = &record.static_info;
    if s.sex > 1 {
        violations.push(format!("sex: expected 0 or 1, got {}", s.sex));
    }
    if !(s.age.is_finite() && s.age > 0.0) {
        violations.push(format!("age: must be finite and positive, got {}", s.age));
    }
    if record.visits.is_empty() {
        violations.push("visits: at least one visit is required".into());
    }
    if record.visits.windows(2).any(|w| w[1].t <= w[0].t) {
        violations.push("visits not time-sorted".into());
    }
    if record.answers.windows(2).any(|w| w[1].t <= w[0].t) {
        violations.push("answers not time-sorted".into());
    }
    for (i, v) in record.visits.iter().enumerate() {
        if !(v.t.is_finite() && v.t >= 0.0) {
            violations.push(format!("visits[{i}].t: must be finite and non-negative, got {}", v.t));
        }
        if v.x.len() != k_c {
            violations.push(format!(
                "visits[{i}].x: width {} does not match k_c = {k_c}",
                v.x.len()
            ));
        }
        if let Some(k) = v.x.iter().position(|x| !x.is_finite()) {
            violations.push(format!("visits[{i}].x[{k}]: non-finite value"));
        }
        if v.y > 1 {
            violations.push(format!("visits[{i}].y: expected 0 or 1, got {}", v.y));
        }
    }
    for (j, a) in record.answers.iter().enumerate() {
        if !(a.t.is_finite() && a.t >= 0.0) {
            violations.push(format!("answers[{j}].t: must be finite and non-negative, got {}", a.t));
        }
        if a.x.len() != k_p {
            violations.push(format!(
                "answers[{j}].x: width {} does not match k_p = {k_p}",
                a.x.len()
            ));
        }
        if let Some(k) = a.x.iter().position(|x| !x.is_finite()) {
            violations.push(format!("answers[{j}].x[{k}]: non-finite value"));
        }
    }
    violations
}

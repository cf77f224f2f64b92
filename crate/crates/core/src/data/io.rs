use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_record, Cohort, PatientRecord};
use crate::{Error, Result};

/// First line of a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortHeader {
    pub k_c: usize,
    pub k_p: usize,
    pub feature_names_c: Vec<String>,
    pub feature_names_p: Vec<String>,
    /// Age normalisation constants; absent for cohorts without their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_std: Option<f64>,
}

impl CohortHeader {
    pub fn new(k_c: usize, k_p: usize) -> Self {
        Self {
            k_c,
            k_p,
            feature_names_c: (0..k_c).map(|i| format!("c{i:03}")).collect(),
            feature_names_p: (0..k_p).map(|i| format!("p{i:03}")).collect(),
            age_mean: None,
            age_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_names_c.len() != self.k_c {
            return Err(Error::dim("clinician feature names", self.k_c, self.feature_names_c.len()));
        }
        if self.feature_names_p.len() != self.k_p {
            return Err(Error::dim("patient feature names", self.k_p, self.feature_names_p.len()));
        }
        if let Some(std) = self.age_std {
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::Validation(format!("age_std must be positive, got {std}")));
            }
        }
        Ok(())
    }
}

/// Writes the header line followed by one JSON object per record.
pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_lines(cohort, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_lines(cohort: &Cohort, out: &mut impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &cohort.header)?;
    out.write_all(b"\n")?;
    for record in &cohort.records {
        serde_json::to_writer(&mut *out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads and validates a cohort; errors carry the 1-based line number.
pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: CohortHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
        None => return Err(parse_err(1, "empty cohort file".into())),
    };
    header.validate().map_err(|e| parse_err(1, e.to_string()))?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let violations = validate_record(&record, header.k_c, header.k_p);
        if !violations.is_empty() {
            return Err(parse_err(
                lineno,
                format!("record {}: {}", record.id, violations.join("; ")),
            ));
        }
        records.push(record);
    }
    Ok(Cohort { header, records })
}

//! Feature relevance, latent-space export and exact t-SNE.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::model::{Branch, Model};
use crate::rng::substream;
use crate::train::csv_error;
use crate::{Error, Result};

/// How the outgoing weights of one input feature are summarised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Euclidean norm of the feature's weight column.
    #[default]
    L2,
    /// Largest absolute weight in the column.
    AbsMax,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Aggregation::L2),
            "absmax" => Ok(Aggregation::AbsMax),
            other => Err(Error::Config(format!("unknown aggregation `{other}` (expected l2 or absmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub feature: String,
    pub index: usize,
    pub score: f64,
}

/// Ranks the raw input features of `source` by their first-layer weight profile.
///
/// Scores are divided by the largest one, so the top feature scores exactly 1.
/// `names` may be empty, in which case features are named by position.
pub fn feature_relevance(
    model: &Model,
    source: Branch,
    aggregation: Aggregation,
    names: &[String],
) -> Result<Vec<Relevance>> {
    let layer = match source {
        Branch::Clinician => &model.input_c.layer1,
        Branch::Patient => &model.input_p.layer1,
    };
    let w = &layer.weights;
    if !names.is_empty() && names.len() != w.cols() {
        return Err(Error::dim(format!("{source} feature names"), w.cols(), names.len()));
    }
    let raw: Vec<f64> = (0..w.cols())
        .map(|c| {
            let column = (0..w.rows()).map(|r| w.get(r, c));
            match aggregation {
                Aggregation::L2 => column.map(|v| v * v).sum::<f64>().sqrt(),
                Aggregation::AbsMax => column.map(f64::abs).fold(0.0, f64::max),
            }
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric(format!("{source} first-layer weights are not finite")));
    }
    if max == 0.0 {
        return Err(Error::Validation(format!(
            "{source} first-layer weights are all zero; the input net is untrained or ablated"
        )));
    }
    let mut ranked: Vec<Relevance> = raw
        .iter()
        .enumerate()
        .map(|(index, v)| Relevance {
            feature: names.get(index).cloned().unwrap_or_else(|| format!("{source}_{index}")),
            index,
            score: v / max,
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

pub fn write_relevance_csv(ranked: &[Relevance], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(["rank", "score", "feature"]).map_err(|e| csv_error(path, e))?;
    for (rank, r) in ranked.iter().enumerate() {
        writer
            .write_record([(rank + 1).to_string(), r.score.to_string(), r.feature.clone()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// One visit's merged classifier input with its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub id: String,
    pub visit: usize,
    pub vector: Vec<f64>,
    pub label: u8,
    pub prob: f64,
}

/// Merged vectors `[o_c; o*; sex; age]` for every visit, dropout off.
pub fn latent_points(model: &Model, cohort: &Cohort) -> Result<Vec<LatentPoint>> {
    let mut unused = substream(0, "latent", 0);
    let mut points = Vec::with_capacity(cohort.n_visits());
    for record in &cohort.records {
        let trace = model.forward_record(record, false, &mut unused)?;
        for (visit, ((vector, prob), v)) in trace
            .merged
            .into_iter()
            .zip(trace.probs)
            .zip(&record.visits)
            .enumerate()
        {
            points.push(LatentPoint {
                id: record.id.clone(),
                visit,
                vector,
                label: v.y,
                prob,
            });
        }
    }
    Ok(points)
}

/// Writes `id,visit,x,y,label,prob`, one row per point.
pub fn export_embedding(coords: &[[f64; 2]], points: &[LatentPoint], path: &Path) -> Result<()> {
    if coords.len() != points.len() {
        return Err(Error::dim("embedding rows", points.len(), coords.len()));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["id", "visit", "x", "y", "label", "prob"])
        .map_err(|e| csv_error(path, e))?;
    for (xy, p) in coords.iter().zip(points) {
        writer
            .write_record([
                p.id.clone(),
                p.visit.to_string(),
                xy[0].to_string(),
                xy[1].to_string(),
                p.label.to_string(),
                p.prob.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub lr: f64,
    pub iters: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 100.0,
            lr: 10.0,
            iters: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("tsne {name} must be positive, got {v}")))
            }
        };
        positive("perplexity", self.perplexity)?;
        positive("lr", self.lr)?;
        positive("exaggeration", self.exaggeration)?;
        for (name, m) in [("momentum", self.momentum), ("final_momentum", self.final_momentum)] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("tsne {name} must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }
}

/// Row-conditional affinities calibrated to a target perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// `p_{j|i}`, rows sum to one, zero diagonal.
    pub conditional: Vec<Vec<f64>>,
    /// Precision `1/(2σ_i²)` per point.
    pub beta: Vec<f64>,
    /// `|H(P_i) − ln(perplexity)|` per point, in nats.
    pub residual: Vec<f64>,
}

const LOG_BETA_BOUND: f64 = 46.0;
const CALIBRATION_STEPS: usize = 50;
const ENTROPY_TOL: f64 = 1e-5;

fn squared_distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// Entropy (nats) of the Gaussian row at precision `beta`, and the row itself.
fn row_entropy(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let shift = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (p, d)) in row.iter_mut().zip(dist).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        *p = (-beta * (d - shift)).exp();
        sum += *p;
        weighted += *p * (d - shift);
    }
    row.iter_mut().for_each(|p| *p /= sum);
    sum.ln() + beta * weighted / sum
}

fn calibrate_rows(dist: &[Vec<f64>], perplexity: f64) -> Calibration {
    let n = dist.len();
    let target = perplexity.ln();
    let mut conditional = vec![vec![0.0; n]; n];
    let mut beta = vec![0.0; n];
    let mut residual = vec![0.0; n];
    for i in 0..n {
        let (mut lo, mut hi) = (-LOG_BETA_BOUND, LOG_BETA_BOUND);
        let mut log_beta = 0.0;
        let mut h = row_entropy(&dist[i], i, 1.0, &mut conditional[i]);
        for _ in 0..CALIBRATION_STEPS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            // entropy falls as precision grows
            if h > target {
                lo = log_beta;
            } else {
                hi = log_beta;
            }
            log_beta = 0.5 * (lo + hi);
            h = row_entropy(&dist[i], i, log_beta.exp(), &mut conditional[i]);
        }
        beta[i] = log_beta.exp();
        residual[i] = (h - target).abs();
    }
    Calibration {
        conditional,
        beta,
        residual,
    }
}

/// Bisects each point's kernel precision so its conditional entropy equals `ln(perplexity)`.
pub fn calibrate(points: &[Vec<f64>], perplexity: f64) -> Result<Calibration> {
    check_points(points)?;
    Ok(calibrate_rows(&squared_distances(points), perplexity))
}

/// Symmetrised joint affinities `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_probabilities(cal: &Calibration) -> Vec<Vec<f64>> {
    let n = cal.conditional.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = (cal.conditional[i][j] + cal.conditional[j][i]) / (2.0 * n as f64);
        }
    }
    p
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::Validation("t-SNE needs at least one input dimension".into()));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(Error::dim(format!("t-SNE point {i}"), d, p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("t-SNE point {i} is not finite")));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) after every iteration, computed with the unexaggerated `P`.
    pub kl_history: Vec<f64>,
    /// Perplexity actually used.
    pub perplexity: f64,
    pub calibration: Calibration,
}

const MIN_POINTS: usize = 5;
const JITTER: f64 = 1e-10;

/// Exact O(n²) t-SNE into two dimensions.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate()?;
    let n = points.len();
    if n < MIN_POINTS {
        return Err(Error::Validation(format!("t-SNE needs at least {MIN_POINTS} points, got {n}")));
    }
    check_points(points)?;

    let mut perplexity = cfg.perplexity;
    if n as f64 <= 3.0 * perplexity {
        perplexity = (n - 1) as f64 / 3.0;
        log::warn!("perplexity {} too large for {n} points; using {perplexity:.3}", cfg.perplexity);
    }

    let mut dist = squared_distances(points);
    let duplicates = (0..n).any(|i| (i + 1..n).any(|j| dist[i][j] == 0.0));
    if duplicates {
        let mut rng = substream(cfg.seed, "tsne-jitter", 0);
        let noise = Normal::new(0.0, JITTER).expect("valid jitter scale");
        let jittered: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v + noise.sample(&mut rng)).collect())
            .collect();
        dist = squared_distances(&jittered);
    }

    let calibration = calibrate_rows(&dist, perplexity);
    let p = joint_probabilities(&calibration);

    let mut rng = substream(cfg.seed, "tsne-init", 0);
    let init = Normal::new(0.0, 1e-4).expect("valid init scale");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    let mut num = vec![vec![0.0; n]; n];
    let mut kl_history = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let exaggeration = if iter < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if iter < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };

        let z = student_kernel(&y, &mut num);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = (exaggeration * p[i][j] - num[i][j] / z) * num[i][j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for ((yi, vi), gi) in y.iter_mut().zip(&mut velocity).zip(&grad) {
            for k in 0..2 {
                vi[k] = momentum * vi[k] - cfg.lr * gi[k];
                yi[k] += vi[k];
            }
        }
        center(&mut y);

        let z = student_kernel(&y, &mut num);
        let kl = kl_divergence(&p, &num, z);
        if !kl.is_finite() {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {iter}")));
        }
        kl_history.push(kl);
    }

    Ok(TsneResult {
        coords: y,
        kl_history,
        perplexity,
        calibration,
    })
}

/// Fills `num` with `1/(1+‖y_i−y_j‖²)` and returns their off-diagonal sum.
fn student_kernel(y: &[[f64; 2]], num: &mut [Vec<f64>]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        num[i][i] = 0.0;
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i][j] = v;
            num[j][i] = v;
            z += 2.0 * v;
        }
    }
    z
}

fn kl_divergence(p: &[Vec<f64>], num: &[Vec<f64>], z: f64) -> f64 {
    let mut kl = 0.0;
    for (pi, ni) in p.iter().zip(num) {
        for (&pij, &nij) in pi.iter().zip(ni) {
            if pij > 0.0 {
                kl += pij * (pij / (nij / z)).ln();
            }
        }
    }
    kl.max(0.0)
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0] / n, m[1] + v[1] / n]);
    y.iter_mut().for_each(|v| {
        v[0] -= mean[0];
        v[1] -= mean[1];
    });
}

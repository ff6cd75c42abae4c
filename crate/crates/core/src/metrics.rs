//! Offline robustness and calibration metrics over prediction logs.
//!
//! Logs are flat CSV files with header
//! `sample_id,pred,true,confidence[,corruption,severity][,perturbation,sequence,frame][,anomaly]`.
//! Optional columns may be omitted entirely or left empty per row.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(rename = "pred")]
    pub predicted: i64,
    #[serde(rename = "true")]
    pub truth: i64,
    pub confidence: f64,
    #[serde(default)]
    pub corruption: Option<String>,
    #[serde(default)]
    pub severity: Option<u8>,
    #[serde(default)]
    pub perturbation: Option<String>,
    #[serde(default)]
    pub sequence: Option<String>,
    #[serde(default)]
    pub frame: Option<u32>,
    /// Out-of-distribution flag, used only by AUPR.
    #[serde(default)]
    pub anomaly: Option<u8>,
}

impl PredictionRecord {
    pub fn new(sample_id: impl Into<String>, predicted: i64, truth: i64, confidence: f64) -> Self {
        Self {
            sample_id: sample_id.into(),
            predicted,
            truth,
            confidence,
            corruption: None,
            severity: None,
            perturbation: None,
            sequence: None,
            frame: None,
            anomaly: None,
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    records: Vec<PredictionRecord>,
}

impl PredictionLog {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::param("prediction log is empty"));
        }
        for r in &records {
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::param(format!(
                    "record {}: confidence {} outside [0, 1]",
                    r.sample_id, r.confidence
                )));
            }
            if let Some(s) = r.severity {
                if !(1..=5).contains(&s) {
                    return Err(Error::param(format!("record {}: severity {s} outside 1..=5", r.sample_id)));
                }
            }
            if let Some(a) = r.anomaly {
                if a > 1 {
                    return Err(Error::param(format!("record {}: anomaly flag must be 0 or 1", r.sample_id)));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let records = rdr
            .deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::config(format!("log row {}: {e}", i + 1))))
            .collect::<Result<Vec<PredictionRecord>>>()?;
        Self::new(records)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A metric value with an optional per-group breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: &'static str,
    pub value: f64,
    pub groups: BTreeMap<String, f64>,
}

fn error_rate<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> f64 {
    let (mut wrong, mut total) = (0usize, 0usize);
    for r in records {
        total += 1;
        if !r.correct() {
            wrong += 1;
        }
    }
    wrong as f64 / total as f64
}

/// Fraction of misclassified records.
pub fn clean_error(log: &PredictionLog) -> f64 {
    error_rate(&log.records)
}

/// Baseline error rate per `(corruption, severity)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineErrors(pub BTreeMap<(String, u8), f64>);

#[derive(Deserialize)]
struct BaselineErrorRow {
    corruption: String,
    severity: u8,
    error: f64,
}

impl BaselineErrors {
    pub fn insert(&mut self, corruption: impl Into<String>, severity: u8, error: f64) {
        self.0.insert((corruption.into(), severity), error);
    }

    /// CSV with header `corruption,severity,error`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = BaselineErrors::default();
        for (i, row) in rdr.deserialize::<BaselineErrorRow>().enumerate() {
            let row = row.map_err(|e| Error::config(format!("baseline row {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&row.error) {
                return Err(Error::config(format!("baseline error {} outside [0, 1]", row.error)));
            }
            out.insert(row.corruption, row.severity, row.error);
        }
        Ok(out)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }
}

/// Mean corruption error in percent: the mean over corruptions of
/// `sum_s E[c, s] / sum_s E_base[c, s] * 100`. Groups are read from the
/// records' `corruption`/`severity` keys.
pub fn mce(log: &PredictionLog, baseline: &BaselineErrors) -> Result<MetricReport> {
    let mut groups: BTreeMap<(String, u8), Vec<&PredictionRecord>> = BTreeMap::new();
    for r in &log.records {
        match (&r.corruption, r.severity) {
            (Some(c), Some(s)) => groups.entry((c.clone(), s)).or_default().push(r),
            _ => {
                return Err(Error::config(format!(
                    "record {} lacks corruption/severity keys",
                    r.sample_id
                )))
            }
        }
    }
    let mut per_corruption: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for ((c, s), recs) in &groups {
        let base = baseline
            .0
            .get(&(c.clone(), *s))
            .ok_or_else(|| Error::config(format!("no baseline error for ({c}, {s})")))?;
        let acc = per_corruption.entry(c.clone()).or_insert((0.0, 0.0));
        acc.0 += error_rate(recs.iter().copied());
        acc.1 += base;
    }
    let mut out = BTreeMap::new();
    for (c, (err, base)) in per_corruption {
        if !(base > 0.0) {
            return Err(Error::config(format!("baseline errors for {c} sum to zero")));
        }
        out.insert(c, err / base * 100.0);
    }
    let value = out.values().sum::<f64>() / out.len() as f64;
    Ok(MetricReport {
        metric: "mce",
        value,
        groups: out,
    })
}

/// Root-mean-square calibration error with adaptive binning: records are
/// sorted by `(confidence, correct)` and split into `B = ceil(sqrt(N))`
/// contiguous bins of near-equal size (bin `b` holds ranks
/// `ceil(bN/B) .. ceil((b+1)N/B)`). Each bin contributes its squared gap
/// between mean confidence and accuracy, weighted by its share of records.
pub fn rms_calibration(log: &PredictionLog) -> f64 {
    let mut keyed: Vec<(f64, bool)> = log.records.iter().map(|r| (r.confidence, r.correct())).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = keyed.len();
    let bins = (n as f64).sqrt().ceil() as usize;
    let bound = |b: usize| (b * n).div_ceil(bins);
    let mut total = 0.0;
    for b in 0..bins {
        let chunk = &keyed[bound(b)..bound(b + 1)];
        if chunk.is_empty() {
            continue;
        }
        let size = chunk.len() as f64;
        let conf = chunk.iter().map(|r| r.0).sum::<f64>() / size;
        let acc = chunk.iter().filter(|r| r.1).count() as f64 / size;
        total += size / n as f64 * (conf - acc).powi(2);
    }
    total.sqrt()
}

/// Baseline flip rate per perturbation type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineFlipRates(pub BTreeMap<String, f64>);

#[derive(Deserialize)]
struct BaselineFlipRow {
    perturbation: String,
    flip_rate: f64,
}

impl BaselineFlipRates {
    pub fn insert(&mut self, perturbation: impl Into<String>, rate: f64) {
        self.0.insert(perturbation.into(), rate);
    }

    /// CSV with header `perturbation,flip_rate`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = BaselineFlipRates::default();
        for (i, row) in rdr.deserialize::<BaselineFlipRow>().enumerate() {
            let row = row.map_err(|e| Error::config(format!("baseline row {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&row.flip_rate) {
                return Err(Error::config(format!("baseline flip rate {} outside [0, 1]", row.flip_rate)));
            }
            out.insert(row.perturbation, row.flip_rate);
        }
        Ok(out)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }
}

/// Raw flip rate per perturbation: prediction changes between consecutive
/// frames over all transitions of all its sequences.
pub fn flip_rates(log: &PredictionLog) -> Result<BTreeMap<String, f64>> {
    let mut sequences: BTreeMap<(String, String), Vec<(u32, i64)>> = BTreeMap::new();
    for r in &log.records {
        match (&r.perturbation, &r.sequence, r.frame) {
            (Some(p), Some(s), Some(f)) => sequences
                .entry((p.clone(), s.clone()))
                .or_default()
                .push((f, r.predicted)),
            _ => {
                return Err(Error::config(format!(
                    "record {} lacks perturbation/sequence/frame keys",
                    r.sample_id
                )))
            }
        }
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((p, s), mut frames) in sequences {
        frames.sort_by_key(|f| f.0);
        if frames.len() < 2 {
            return Err(Error::param(format!("sequence {s} of {p} has fewer than 2 frames")));
        }
        if frames.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
            return Err(Error::param(format!("sequence {s} of {p} has non-contiguous frames")));
        }
        let flips = frames.windows(2).filter(|w| w[0].1 != w[1].1).count();
        let acc = counts.entry(p).or_insert((0, 0));
        acc.0 += flips;
        acc.1 += frames.len() - 1;
    }
    Ok(counts
        .into_iter()
        .map(|(p, (flips, transitions))| (p, flips as f64 / transitions as f64))
        .collect())
}

/// Mean flip rate in percent: the mean over perturbations of
/// `flip_rate / baseline_flip_rate * 100`.
pub fn mfr(log: &PredictionLog, baseline: &BaselineFlipRates) -> Result<MetricReport> {
    let mut groups = BTreeMap::new();
    for (p, rate) in flip_rates(log)? {
        let base = *baseline
            .0
            .get(&p)
            .ok_or_else(|| Error::config(format!("no baseline flip rate for {p}")))?;
        if !(base > 0.0) {
            return Err(Error::config(format!("baseline flip rate for {p} is zero")));
        }
        groups.insert(p, rate / base * 100.0);
    }
    let value = groups.values().sum::<f64>() / groups.len() as f64;
    Ok(MetricReport {
        metric: "mfr",
        value,
        groups,
    })
}

/// Area under the precision-recall curve with anomalies as the positive
/// class. Scores are thresholded in descending order with ties grouped;
/// the area is `sum_i (R_i - R_{i-1}) * P_i` over distinct thresholds.
pub fn aupr(scores: &[f64], is_anomaly: &[bool]) -> Result<f64> {
    if scores.len() != is_anomaly.len() {
        return Err(Error::param("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::param("scores contain NaN"));
    }
    let positives = is_anomaly.iter().filter(|&&a| a).count();
    if positives == 0 || positives == scores.len() {
        return Err(Error::param("AUPR needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_anomaly[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Anomaly score from class probabilities: the negated maximum softmax
/// probability.
pub fn msp_anomaly_score(probs: &[f64]) -> f64 {
    -probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// AUPR over a log: score = `-confidence`, label = the `anomaly` column.
pub fn aupr_from_log(log: &PredictionLog) -> Result<f64> {
    let mut scores = Vec::with_capacity(log.len());
    let mut labels = Vec::with_capacity(log.len());
    for r in &log.records {
        let flag = r
            .anomaly
            .ok_or_else(|| Error::config(format!("record {} lacks the anomaly column", r.sample_id)))?;
        scores.push(-r.confidence);
        labels.push(flag == 1);
    }
    aupr(&scores, &labels)
}

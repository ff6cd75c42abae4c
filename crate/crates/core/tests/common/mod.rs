//! Shared fixtures and brute-force metric oracles for the integration tests.
//!
//! The oracles walk records one at a time and recompute everything from
//! scratch; they are slow on purpose and share no code with the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ipmix::metrics::{BaselineErrors, BaselineFlipRates, PredictionLog, PredictionRecord};
use ipmix::{encode_png, ImageBuffer, SeededRng};

pub const CORRUPTIONS: [&str; 3] = ["fog", "snow", "blur"];
pub const PERTURBATIONS: [&str; 2] = ["shot", "tilt"];

pub fn random_image(h: usize, w: usize, rng: &mut SeededRng) -> ImageBuffer {
    let data = (0..h * w * 3).map(|_| rng.next_f64()).collect();
    ImageBuffer::new(h, w, data).unwrap()
}

/// Smooth gradient with a little noise; compresses like a photo rather than
/// like white noise.
pub fn photo_like(h: usize, w: usize, rng: &mut SeededRng) -> ImageBuffer {
    let (a, b, c) = (rng.next_f64(), rng.next_f64(), rng.next_f64());
    let mut noise = SeededRng::new(rng.next_u64());
    ImageBuffer::from_fn(h, w, |y, x, ch| {
        let u = y as f64 / h as f64;
        let v = x as f64 / w as f64;
        let n = 0.05 * (noise.next_f64() - 0.5);
        n + match ch {
            0 => a * u + (1.0 - a) * v,
            1 => (b + u * v) * 0.8,
            _ => c * (1.0 - u),
        }
    })
    .unwrap()
}

pub fn write_corpus(dir: &Path, n: usize, h: usize, w: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = SeededRng::new(seed);
    for i in 0..n {
        let img = photo_like(h, w, &mut rng);
        std::fs::write(dir.join(format!("img_{i:03}.png")), encode_png(&img).unwrap()).unwrap();
    }
}

/// Random log of 1..=50 records carrying every optional column. Frames are
/// contiguous per sequence and every sequence has at least two frames.
pub fn random_log(rng: &mut SeededRng) -> PredictionLog {
    let n_seq = 1 + rng.index(5);
    let mut records = Vec::new();
    'outer: for s in 0..n_seq {
        let pert = PERTURBATIONS[rng.index(PERTURBATIONS.len())];
        let frames = 2 + rng.index(9);
        for f in 0..frames {
            if records.len() == 50 {
                break 'outer;
            }
            let truth = rng.index(3) as i64;
            let pred = if rng.bernoulli(0.6) { truth } else { rng.index(3) as i64 };
            // Coarse confidences so ties occur.
            let conf = if rng.bernoulli(0.3) {
                (rng.index(5) as f64) / 4.0
            } else {
                rng.next_f64()
            };
            let mut r = PredictionRecord::new(format!("r{}", records.len()), pred, truth, conf);
            r.corruption = Some(CORRUPTIONS[rng.index(CORRUPTIONS.len())].to_string());
            r.severity = Some(1 + rng.index(5) as u8);
            r.perturbation = Some(pert.to_string());
            r.sequence = Some(format!("seq{s}"));
            r.frame = Some(f as u32);
            r.anomaly = Some(rng.index(2) as u8);
            records.push(r);
        }
    }
    // A truncated final sequence may be left with a single frame.
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.sequence.clone().unwrap()).or_default() += 1;
    }
    records.retain(|r| counts[r.sequence.as_ref().unwrap()] >= 2);
    // Guarantee both anomaly classes.
    records[0].anomaly = Some(1);
    records[1].anomaly = Some(0);
    PredictionLog::new(records).unwrap()
}

pub fn random_baseline_errors(rng: &mut SeededRng) -> BaselineErrors {
    let mut b = BaselineErrors::default();
    for c in CORRUPTIONS {
        for s in 1..=5u8 {
            b.insert(c, s, 0.05 + 0.95 * rng.next_f64());
        }
    }
    b
}

pub fn random_baseline_flips(rng: &mut SeededRng) -> BaselineFlipRates {
    let mut b = BaselineFlipRates::default();
    for p in PERTURBATIONS {
        b.insert(p, 0.05 + 0.95 * rng.next_f64());
    }
    b
}

pub fn oracle_clean_error(records: &[PredictionRecord]) -> f64 {
    let mut wrong = 0usize;
    for r in records {
        if r.predicted != r.truth {
            wrong += 1;
        }
    }
    wrong as f64 / records.len() as f64
}

pub fn oracle_mce(records: &[PredictionRecord], baseline: &BaselineErrors) -> f64 {
    let corruptions: BTreeSet<&str> = records.iter().map(|r| r.corruption.as_deref().unwrap()).collect();
    let mut total = 0.0;
    for c in &corruptions {
        let mut num = 0.0;
        let mut den = 0.0;
        for s in 1..=5u8 {
            let mut n = 0usize;
            let mut wrong = 0usize;
            for r in records {
                if r.corruption.as_deref() == Some(*c) && r.severity == Some(s) {
                    n += 1;
                    if r.predicted != r.truth {
                        wrong += 1;
                    }
                }
            }
            if n > 0 {
                num += wrong as f64 / n as f64;
                den += baseline.0[&(c.to_string(), s)];
            }
        }
        total += num / den * 100.0;
    }
    total / corruptions.len() as f64
}

/// Equal-mass binning over the `(confidence, correct)` ranking: the record
/// at rank `i` falls in the largest bin `b` with `ceil(b*N/B) <= i`. Each
/// record contributes `(mean_conf(bin) - acc(bin))^2 / N`.
pub fn oracle_rms(records: &[PredictionRecord]) -> f64 {
    let n = records.len();
    let bins = {
        let mut b = 1usize;
        while b * b < n {
            b += 1;
        }
        b
    };
    let mut ranked: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.predicted == r.truth)).collect();
    // Insertion sort keeps this independent of the library's sort.
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && (ranked[j - 1].0 > ranked[j].0 || (ranked[j - 1].0 == ranked[j].0 && ranked[j - 1].1 && !ranked[j].1)) {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let bin_of = |i: usize| {
        let mut b = 0;
        for cand in 0..bins {
            if (cand * n).div_ceil(bins) <= i {
                b = cand;
            }
        }
        b
    };
    let mut total = 0.0;
    for i in 0..n {
        let b = bin_of(i);
        let members: Vec<usize> = (0..n).filter(|&j| bin_of(j) == b).collect();
        let conf = members.iter().map(|&j| ranked[j].0).sum::<f64>() / members.len() as f64;
        let acc = members.iter().filter(|&&j| ranked[j].1).count() as f64 / members.len() as f64;
        total += (conf - acc).powi(2) / n as f64;
    }
    total.sqrt()
}

pub fn oracle_mfr(records: &[PredictionRecord], baseline: &BaselineFlipRates) -> f64 {
    let perts: BTreeSet<&str> = records.iter().map(|r| r.perturbation.as_deref().unwrap()).collect();
    let mut total = 0.0;
    for p in &perts {
        let mut flips = 0usize;
        let mut transitions = 0usize;
        for r in records.iter().filter(|r| r.perturbation.as_deref() == Some(*p)) {
            let next = records.iter().find(|q| {
                q.perturbation == r.perturbation && q.sequence == r.sequence && q.frame == Some(r.frame.unwrap() + 1)
            });
            if let Some(q) = next {
                transitions += 1;
                if q.predicted != r.predicted {
                    flips += 1;
                }
            }
        }
        total += flips as f64 / transitions as f64 / baseline.0[*p] * 100.0;
    }
    total / perts.len() as f64
}

/// Enumerates every distinct score as a threshold, highest first, and
/// counts precision and recall of `score >= threshold` directly.
pub fn oracle_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut flagged = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                flagged += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        area += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    area
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

//! Throughput harness: full pipeline against a decode+encode baseline.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{enumerate, sha256_hex, worker_pool, DatasetSource};
use crate::error::{Error, Result};
use crate::image::{decode, encode_png};
use crate::pipeline::Augmenter;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageSeconds {
    pub decode: f64,
    pub augment: f64,
    pub encode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub images_per_sec: f64,
    pub baseline_images_per_sec: f64,
    /// `baseline_images_per_sec / images_per_sec`.
    pub relative_overhead: f64,
    pub images: usize,
    pub wall_seconds: f64,
    /// Summed over workers, full-pipeline phase only.
    pub stages: StageSeconds,
    pub workers: usize,
    pub config_hash: String,
    /// Digest of the encoded outputs of one pass over the corpus, in order.
    pub output_hash: String,
}

struct Timed {
    png: Vec<u8>,
    decode: Duration,
    augment: Duration,
    encode: Duration,
}

fn process(bytes: &[u8], engine: Option<&Augmenter>, seed: u64, index: usize) -> Result<Timed> {
    let t0 = Instant::now();
    let img = decode(bytes)?;
    let t1 = Instant::now();
    let img = match engine {
        Some(e) => e.augment_item(&img, seed, index)?.0,
        None => img,
    };
    let t2 = Instant::now();
    let png = encode_png(&img)?;
    let t3 = Instant::now();
    Ok(Timed {
        png,
        decode: t1 - t0,
        augment: t2 - t1,
        encode: t3 - t2,
    })
}

struct Phase {
    images: usize,
    wall: Duration,
    stages: StageSeconds,
}

fn run_phase(
    pool: &rayon::ThreadPool,
    corpus: &[Vec<u8>],
    engine: Option<&Augmenter>,
    seed: u64,
    duration: Duration,
) -> Result<Phase> {
    let start = Instant::now();
    let mut images = 0;
    let mut stages = StageSeconds::default();
    loop {
        let timed: Vec<Timed> = pool.install(|| {
            corpus
                .par_iter()
                .enumerate()
                .map(|(i, b)| process(b, engine, seed, i))
                .collect::<Result<Vec<_>>>()
        })?;
        images += timed.len();
        for t in &timed {
            stages.decode += t.decode.as_secs_f64();
            stages.augment += t.augment.as_secs_f64();
            stages.encode += t.encode.as_secs_f64();
        }
        if start.elapsed() >= duration {
            break;
        }
    }
    Ok(Phase {
        images,
        wall: start.elapsed(),
        stages,
    })
}

/// Measures steady-state throughput over at least `duration` per phase.
/// The corpus is read into memory first; one warm-up pass is excluded.
pub fn run_bench(src: &Path, engine: &Augmenter, workers: usize, duration: Duration, seed: u64) -> Result<BenchReport> {
    let paths = enumerate(&DatasetSource::images(src, true))?;
    if paths.is_empty() {
        return Err(Error::config(format!("no images found under {}", src.display())));
    }
    let corpus = paths
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<Vec<_>>>()?;
    bench_corpus(&corpus, engine, workers, duration, seed)
}

/// [`run_bench`] over already-loaded encoded images.
pub fn bench_corpus(corpus: &[Vec<u8>], engine: &Augmenter, workers: usize, duration: Duration, seed: u64) -> Result<BenchReport> {
    if corpus.is_empty() {
        return Err(Error::param("bench corpus is empty"));
    }
    let pool = worker_pool(workers)?;

    // warm-up, also yields the output digest
    let warm: Vec<Timed> = pool.install(|| {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, b)| process(b, Some(engine), seed, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut digest = Sha256::new();
    for t in &warm {
        digest.update(sha256_hex(&t.png).as_bytes());
    }

    let baseline = run_phase(&pool, corpus, None, seed, duration)?;
    let full = run_phase(&pool, corpus, Some(engine), seed, duration)?;
    let images_per_sec = full.images as f64 / full.wall.as_secs_f64();
    let baseline_images_per_sec = baseline.images as f64 / baseline.wall.as_secs_f64();
    let config_json = serde_json::to_vec(engine.config()).expect("config serializes");
    Ok(BenchReport {
        images_per_sec,
        baseline_images_per_sec,
        relative_overhead: baseline_images_per_sec / images_per_sec,
        images: full.images,
        wall_seconds: full.wall.as_secs_f64(),
        stages: full.stages,
        workers,
        config_hash: sha256_hex(&config_json),
        output_hash: hex::encode(digest.finalize()),
    })
}

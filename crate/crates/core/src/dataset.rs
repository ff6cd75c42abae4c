//! Dataset enumeration, run configuration and the batch `augment` runner.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fractal::{build_mixing_set, MixingSet};
use crate::image::{decode, encode_png};
use crate::pipeline::{AugmentConfig, Augmenter};
use crate::rng::SeededRng;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "IPMIX_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub root: PathBuf,
    pub recursive: bool,
    /// Lower-case extensions without the dot; empty accepts every file.
    pub extensions: Vec<String>,
}

impl DatasetSource {
    pub fn images(root: impl Into<PathBuf>, recursive: bool) -> Self {
        Self {
            root: root.into(),
            recursive,
            extensions: IMAGE_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn accepts(&self, path: &Path) -> bool {
        if self.extensions.is_empty() {
            return true;
        }
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| self.extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
            .unwrap_or(false)
    }
}

/// Files under `src.root` matching the extension filter, sorted by path.
pub fn enumerate(src: &DatasetSource) -> Result<Vec<PathBuf>> {
    if !src.root.is_dir() {
        return Err(Error::io(
            &src.root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let depth = if src.recursive { usize::MAX } else { 1 };
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(&src.root).min_depth(1).max_depth(depth) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(&src.root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && src.accepts(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();
    Ok(paths)
}

/// Settings for a CLI run, loadable from a TOML file. Command-line flags
/// override file values.
///
/// ```toml
/// seed = 0
/// workers = 4
/// fractals = "mixing_set/"    # optional; generated when absent
/// n_fractals = 200
/// fractal_size = 128
///
/// [augment]
/// k = 3
/// t = 3
/// alpha = 1.0
/// framework = "chain_mixed"   # chain_mixed | linear_mix | mixed_input
/// patch_sizes = [4, 8, 16, 32]
/// scar_enabled = true
/// mix_ops = ["addition", "multiplication", "random_pixel", "random_element"]
/// fractal_prob = 0.5
/// method = "uniform"          # uniform | image_only | p_only
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub fractals: Option<PathBuf>,
    pub n_fractals: usize,
    pub fractal_size: usize,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            fractals: None,
            n_fractals: 200,
            fractal_size: 128,
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Worker count: explicit setting, then [`WORKERS_ENV`], then the
    /// number of available cores.
    pub fn resolved_workers(&self) -> Result<usize> {
        if let Some(n) = self.workers {
            return if n == 0 {
                Err(Error::config("workers must be >= 1"))
            } else {
                Ok(n)
            };
        }
        default_workers()
    }

    /// Loads the configured mixing directory, or generates `n_fractals`
    /// images (half escape-time, half IFS) from the run seed.
    pub fn mixing_set(&self) -> Result<MixingSet> {
        match &self.fractals {
            Some(dir) => MixingSet::load_dir(dir),
            None => {
                let n = self.n_fractals;
                let size = self.fractal_size;
                // separate stream so mixing-set generation never aliases item streams
                let mut rng = SeededRng::new(self.seed ^ 0x6d69_7869_6e67_5345);
                build_mixing_set(n / 2, n - n / 2, None, (size, size), &mut rng)
            }
        }
    }
}

pub fn default_workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{WORKERS_ENV}={v} is not a positive integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a mixing set's entry hashes, in order.
pub fn mixing_set_hash(set: &MixingSet) -> String {
    let mut h = Sha256::new();
    for e in set.entries() {
        h.update(e.spec_hash.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub mixing_set: String,
    pub config: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: String,
    pub output: String,
    pub seed_index: usize,
    pub trace_hash: String,
    pub output_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub images: usize,
    pub manifest: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

fn rel_string(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Output path for an input: same relative directory, `<stem>_ipmix.png`.
pub fn output_relpath(rel_input: &Path) -> PathBuf {
    let stem = rel_input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    rel_input.with_file_name(format!("{stem}_ipmix.png"))
}

/// Augments every image under `input` (recursively, sorted by path) and
/// writes PNGs mirroring the input tree plus a JSON-lines manifest into
/// `output`. Image `i` uses child stream `(seed, i)`. Work proceeds in
/// bounded chunks; files and manifest lines are written in input order.
pub fn run_augment(input: &Path, output: &Path, engine: &Augmenter, seed: u64, workers: usize) -> Result<AugmentSummary> {
    let paths = enumerate(&DatasetSource::images(input, true))?;
    if paths.is_empty() {
        return Err(Error::config(format!("no images found under {}", input.display())));
    }
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let manifest_path = output.join(MANIFEST_NAME);
    let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = std::io::BufWriter::new(file);
    let header = ManifestHeader {
        seed,
        mixing_set: mixing_set_hash(engine.mixing_set()),
        config: engine.config().clone(),
    };
    let write_line = |w: &mut std::io::BufWriter<std::fs::File>, line: String| {
        writeln!(w, "{line}").map_err(|e| Error::io(&manifest_path, e))
    };
    write_line(&mut manifest, serde_json::to_string(&header).expect("header serializes"))?;

    let pool = worker_pool(workers)?;
    let chunk = (workers * 4).max(1);
    for (chunk_idx, batch) in paths.chunks(chunk).enumerate() {
        let base = chunk_idx * chunk;
        let results: Vec<Result<(PathBuf, Vec<u8>, String)>> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(j, path)| {
                    let index = base + j;
                    let wrap = |e: Error| Error::Item {
                        index,
                        source: Box::new(e),
                    };
                    let bytes = std::fs::read(path).map_err(|e| wrap(Error::io(path, e)))?;
                    let img = decode(&bytes).map_err(wrap)?;
                    let (out, trace) = engine.augment_item(&img, seed, index).map_err(wrap)?;
                    let png = encode_png(&out).map_err(wrap)?;
                    Ok((path.clone(), png, trace.hash()))
                })
                .collect()
        });
        for (j, res) in results.into_iter().enumerate() {
            let (path, png, trace_hash) = res?;
            let rel = path.strip_prefix(input).unwrap_or(&path).to_path_buf();
            let rel_out = output_relpath(&rel);
            let dest = output.join(&rel_out);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&dest, &png).map_err(|e| Error::io(&dest, e))?;
            let entry = ManifestEntry {
                input: rel_string(&rel),
                output: rel_string(&rel_out),
                seed_index: base + j,
                trace_hash,
                output_sha256: sha256_hex(&png),
            };
            write_line(&mut manifest, serde_json::to_string(&entry).expect("entry serializes"))?;
        }
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(AugmentSummary {
        images: paths.len(),
        manifest: manifest_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingManifestEntry {
    pub path: String,
    pub source: crate::fractal::SourceTag,
    pub spec_hash: String,
}

/// Writes a mixing set as numbered PNGs (`000000.png`, ...) plus a
/// JSON-lines manifest of `(path, source, spec_hash)`.
pub fn write_mixing_set(set: &MixingSet, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST_NAME);
    let mut lines = String::new();
    for (i, entry) in set.entries().iter().enumerate() {
        let name = format!("{i:06}.png");
        let dest = out.join(&name);
        std::fs::write(&dest, encode_png(&entry.image)?).map_err(|e| Error::io(&dest, e))?;
        let line = MixingManifestEntry {
            path: name,
            source: entry.source,
            spec_hash: entry.spec_hash.clone(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("entry serializes"));
        lines.push('\n');
    }
    std::fs::write(&manifest_path, lines).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

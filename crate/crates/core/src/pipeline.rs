//! The augmentation engine: chain-mixed IPMix plus the Linear-Mix and
//! Mixed-Input framework variants.
//!
//! Every call first samples a complete [`AugmentTrace`] from the random
//! stream (it only needs the image dimensions and the mixing-set size) and
//! then renders the trace. Rendering is a pure function of
//! `(x, mixing set, trace)`, so [`replay`] reproduces any output exactly.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fractal::MixingSet;
use crate::image::ImageBuffer;
use crate::mixer::{mix_patch_in_place, sample_scar_region, sample_square_region, MixOperator, MixRegion};
use crate::ops::{apply_op, apply_op_window, sample_op_from, ImageOp, OpDraw};
use crate::rng::{sample_beta, sample_dirichlet, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    ChainMixed,
    LinearMix,
    MixedInput,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::ChainMixed => "chain_mixed",
            Framework::LinearMix => "linear_mix",
            Framework::MixedInput => "mixed_input",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain_mixed" => Ok(Framework::ChainMixed),
            "linear_mix" => Ok(Framework::LinearMix),
            "mixed_input" => Ok(Framework::MixedInput),
            other => Err(Error::config(format!("unknown framework '{other}'"))),
        }
    }
}

/// Augmentation level of one chain (or one Mixed-Input stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ImageLevel,
    PLevel,
}

/// How a chain picks its method. The draw is consumed in every mode so
/// forcing a method does not shift the rest of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodPolicy {
    Uniform,
    ImageOnly,
    POnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Number of chains.
    pub k: usize,
    /// Maximum depth per chain; each chain draws its depth from `1..=t`.
    pub t: usize,
    /// Concentration of the Dirichlet chain weights and the Beta draws.
    pub alpha: f64,
    pub framework: Framework,
    pub patch_sizes: Vec<usize>,
    /// When set, half of the sub-image patches are scars instead of squares.
    pub scar_enabled: bool,
    pub mix_ops: Vec<MixOperator>,
    pub op_bank: Vec<ImageOp>,
    /// Probability that a P-level step mixes with a fractal rather than an
    /// image-op transformed copy of the input.
    pub fractal_prob: f64,
    pub method: MethodPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k: 3,
            t: 3,
            alpha: 1.0,
            framework: Framework::ChainMixed,
            patch_sizes: vec![4, 8, 16, 32],
            scar_enabled: true,
            mix_ops: MixOperator::DEFAULT_SET.to_vec(),
            op_bank: ImageOp::ALL.to_vec(),
            fractal_prob: 0.5,
            method: MethodPolicy::Uniform,
        }
    }
}

impl AugmentConfig {
    /// Patch sizes used for ImageNet-scale inputs.
    pub const IMAGENET_PATCH_SIZES: [usize; 6] = [4, 8, 16, 32, 64, 256];

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.t < 1 {
            return Err(Error::config("t must be >= 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.mix_ops.is_empty() {
            return Err(Error::config("mix_ops must be nonempty"));
        }
        if self.op_bank.is_empty() {
            return Err(Error::config("op_bank must be nonempty"));
        }
        if self.patch_sizes.is_empty() || self.patch_sizes.contains(&0) {
            return Err(Error::config("patch_sizes must be nonempty and positive"));
        }
        if !(0.0..=1.0).contains(&self.fractal_prob) {
            return Err(Error::config("fractal_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Second input of a P-level step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSource {
    /// Entry of the mixing set, fitted to the input size.
    Fractal { index: usize },
    /// The original input transformed by one image op.
    Augmented { op: OpDraw },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Image { op: OpDraw },
    Mix {
        region: MixRegion,
        operator: MixOperator,
        source: MixSource,
        mask_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub method: Option<Method>,
    pub steps: Vec<Step>,
}

/// Every random choice behind one augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub framework: Framework,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub skip: f64,
    pub chains: Vec<ChainTrace>,
}

impl AugmentTrace {
    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("trace serializes")))
    }
}

fn draw_method(policy: MethodPolicy, rng: &mut SeededRng) -> Method {
    let coin = rng.bernoulli(0.5);
    match policy {
        MethodPolicy::Uniform if coin => Method::PLevel,
        MethodPolicy::Uniform => Method::ImageLevel,
        MethodPolicy::ImageOnly => Method::ImageLevel,
        MethodPolicy::POnly => Method::PLevel,
    }
}

fn draw_depth(t: usize, rng: &mut SeededRng) -> usize {
    1 + rng.index(t)
}

/// One P-level step, drawn in the order: patch size and region, operator,
/// fractal-or-augmented coin, source, mask seed.
fn draw_mix_step(dims: (usize, usize), set_len: usize, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Step> {
    let (h, w) = dims;
    let mut region = sample_square_region(dims, &cfg.patch_sizes, cfg.alpha, rng)?;
    let use_scar = cfg.scar_enabled && rng.bernoulli(0.5);
    if use_scar && !region.is_whole_image(h, w) && h.min(w) >= 8 {
        region = sample_scar_region(dims, cfg.alpha, rng)?;
    }
    let operator = *crate::rng::choose_uniform(&cfg.mix_ops, rng)?;
    let source = if rng.bernoulli(cfg.fractal_prob) {
        MixSource::Fractal {
            index: rng.index(set_len),
        }
    } else {
        MixSource::Augmented {
            op: sample_op_from(&cfg.op_bank, rng)?,
        }
    };
    Ok(Step::Mix {
        region,
        operator,
        source,
        mask_seed: rng.next_u64(),
    })
}

fn draw_step(method: Method, dims: (usize, usize), set_len: usize, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Step> {
    match method {
        Method::ImageLevel => Ok(Step::Image {
            op: sample_op_from(&cfg.op_bank, rng)?,
        }),
        Method::PLevel => draw_mix_step(dims, set_len, cfg, rng),
    }
}

/// Samples the full trace for one augmentation without touching pixels.
pub fn sample_trace(dims: (usize, usize), set_len: usize, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<AugmentTrace> {
    cfg.validate()?;
    if set_len == 0 {
        return Err(Error::config("mixing set is empty"));
    }
    let n_weights = match cfg.framework {
        Framework::MixedInput => 1,
        _ => cfg.k,
    };
    let weights = sample_dirichlet(cfg.alpha, n_weights, rng)?.0;
    let skip = sample_beta(cfg.alpha, rng)?.0;
    let chains = match cfg.framework {
        Framework::ChainMixed | Framework::LinearMix => {
            let p_chains = cfg.k.div_ceil(2);
            (0..cfg.k)
                .map(|i| {
                    let method = if cfg.framework == Framework::ChainMixed {
                        draw_method(cfg.method, rng)
                    } else if i < p_chains {
                        Method::PLevel
                    } else {
                        Method::ImageLevel
                    };
                    let depth = draw_depth(cfg.t, rng);
                    let steps = (0..depth)
                        .map(|_| draw_step(method, dims, set_len, cfg, rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ChainTrace {
                        method: Some(method),
                        steps,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Framework::MixedInput => {
            let depth = draw_depth(cfg.t, rng);
            let steps = (0..depth)
                .map(|_| {
                    let method = draw_method(cfg.method, rng);
                    draw_step(method, dims, set_len, cfg, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            vec![ChainTrace { method: None, steps }]
        }
    };
    Ok(AugmentTrace {
        framework: cfg.framework,
        height: dims.0,
        width: dims.1,
        weights,
        skip,
        chains,
    })
}

fn render_chain(x: &ImageBuffer, set: &MixingSet, chain: &ChainTrace) -> Result<ImageBuffer> {
    let (h, w) = x.dims();
    let (mut cur, rest) = match chain.steps.split_first() {
        Some((Step::Image { op }, rest)) => (apply_op(x, *op), rest),
        _ => (x.clone(), &chain.steps[..]),
    };
    for step in rest {
        match step {
            Step::Image { op } => cur = apply_op(&cur, *op),
            Step::Mix {
                region,
                operator,
                source,
                mask_seed,
            } => {
                region.validate(h, w)?;
                // Only the region of the second input is ever read.
                let patch = match source {
                    MixSource::Fractal { index } => {
                        let entry = set
                            .get(*index)
                            .ok_or_else(|| Error::config(format!("mixing-set index {index} out of range")))?;
                        entry.image.fit_window(h, w, region.y0, region.x0, region.h, region.w)?
                    }
                    MixSource::Augmented { op } => apply_op_window(x, *op, region.y0, region.x0, region.h, region.w)?,
                };
                mix_patch_in_place(&mut cur, &patch, region, *operator, *mask_seed)?;
            }
        }
    }
    Ok(cur)
}

/// Renders a trace against `x`. Bit-identical to the call that produced it.
pub fn replay(x: &ImageBuffer, set: &MixingSet, trace: &AugmentTrace) -> Result<ImageBuffer> {
    if x.dims() != (trace.height, trace.width) {
        return Err(Error::param("trace was sampled for a different image size"));
    }
    if trace.chains.len() != trace.weights.len() {
        return Err(Error::param("trace has mismatched chain and weight counts"));
    }
    let (h, w) = x.dims();
    let mut mixed = vec![0.0; x.data().len()];
    for (chain, &wt) in trace.chains.iter().zip(&trace.weights) {
        let img = render_chain(x, set, chain)?;
        for (acc, v) in mixed.iter_mut().zip(img.data()) {
            *acc += wt * v;
        }
    }
    let m = trace.skip;
    let out = mixed
        .iter()
        .zip(x.data())
        .map(|(&mix, &orig)| m * mix + (1.0 - m) * orig)
        .collect();
    Ok(ImageBuffer::from_raw(h, w, out))
}

fn augment_with(
    framework: Framework,
    x: &ImageBuffer,
    set: &MixingSet,
    cfg: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<(ImageBuffer, AugmentTrace)> {
    if cfg.framework != framework {
        return Err(Error::config(format!(
            "config selects {} but {framework} was requested",
            cfg.framework
        )));
    }
    let trace = sample_trace(x.dims(), set.len(), cfg, rng)?;
    let out = replay(x, set, &trace)?;
    Ok((out, trace))
}

/// Chain-mixed IPMix: `k` chains, each image-level or P-level at random,
/// combined with Dirichlet weights and skip-connected with a Beta weight.
pub fn ipmix_augment(x: &ImageBuffer, set: &MixingSet, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<(ImageBuffer, AugmentTrace)> {
    augment_with(Framework::ChainMixed, x, set, cfg, rng)
}

/// Linear-Mix: the first `ceil(k/2)` chains are P-level, the rest image-level.
pub fn linear_mix_augment(x: &ImageBuffer, set: &MixingSet, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<(ImageBuffer, AugmentTrace)> {
    augment_with(Framework::LinearMix, x, set, cfg, rng)
}

/// Mixed-Input: one sequential chain whose stages each pick a method and
/// consume the previous stage's output.
pub fn mixed_input_augment(x: &ImageBuffer, set: &MixingSet, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<(ImageBuffer, AugmentTrace)> {
    augment_with(Framework::MixedInput, x, set, cfg, rng)
}

/// Shareable engine: a validated config plus its mixing set.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentConfig,
    set: MixingSet,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, set: MixingSet) -> Result<Self> {
        cfg.validate()?;
        if set.is_empty() {
            return Err(Error::config("mixing set is empty"));
        }
        Ok(Self { cfg, set })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn mixing_set(&self) -> &MixingSet {
        &self.set
    }

    pub fn augment(&self, x: &ImageBuffer, rng: &mut SeededRng) -> Result<(ImageBuffer, AugmentTrace)> {
        augment_with(self.cfg.framework, x, &self.set, &self.cfg, rng)
    }

    /// Augments item `index` of a run with its child stream `(run_seed, index)`.
    pub fn augment_item(&self, x: &ImageBuffer, run_seed: u64, index: usize) -> Result<(ImageBuffer, AugmentTrace)> {
        let mut rng = SeededRng::stream(run_seed, index as u64);
        self.augment(x, &mut rng)
    }

    pub fn augment_batch_traced(&self, xs: &[ImageBuffer], run_seed: u64) -> Result<Vec<(ImageBuffer, AugmentTrace)>> {
        if xs.is_empty() {
            return Err(Error::param("batch is empty"));
        }
        xs.par_iter()
            .enumerate()
            .map(|(i, x)| {
                self.augment_item(x, run_seed, i).map_err(|e| Error::Item {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Augments a batch in parallel on the current rayon pool. Item `i` uses
/// child stream `(run_seed, i)`, so the result does not depend on the
/// worker count.
pub fn augment_batch(xs: &[ImageBuffer], set: &MixingSet, cfg: &AugmentConfig, run_seed: u64) -> Result<Vec<ImageBuffer>> {
    let engine = Augmenter::new(cfg.clone(), set.clone())?;
    Ok(engine
        .augment_batch_traced(xs, run_seed)?
        .into_iter()
        .map(|(img, _)| img)
        .collect())
}

/// [`augment_batch`] on a dedicated pool of `workers` threads.
pub fn augment_batch_with_workers(
    xs: &[ImageBuffer],
    set: &MixingSet,
    cfg: &AugmentConfig,
    run_seed: u64,
    workers: usize,
) -> Result<Vec<ImageBuffer>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| augment_batch(xs, set, cfg, run_seed))
}

/// Sequential reference for [`augment_batch`].
pub fn augment_batch_sequential(xs: &[ImageBuffer], set: &MixingSet, cfg: &AugmentConfig, run_seed: u64) -> Result<Vec<ImageBuffer>> {
    let engine = Augmenter::new(cfg.clone(), set.clone())?;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            engine
                .augment_item(x, run_seed, i)
                .map(|(img, _)| img)
                .map_err(|e| Error::Item {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Tiles `rows x cols` augmentations of `x` into one image for inspection.
/// The top-left cell is the unaugmented input; cell `i` uses child stream
/// `(seed, i)`.
pub fn preview_grid(x: &ImageBuffer, engine: &Augmenter, rows: usize, cols: usize, seed: u64) -> Result<ImageBuffer> {
    if rows == 0 || cols == 0 {
        return Err(Error::param("preview grid needs at least one row and column"));
    }
    let (h, w) = x.dims();
    let cells = (0..rows * cols)
        .map(|i| {
            if i == 0 {
                Ok(x.clone())
            } else {
                engine.augment_item(x, seed, i).map(|r| r.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBuffer::from_fn(rows * h, cols * w, |y, xx, c| cells[(y / h) * cols + xx / w].get(y % h, xx % w, c))
}

//! Deterministic random streams and the distributions the augmentation
//! pipeline draws from.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`). The
//! 64-bit run seed is expanded into the 256-bit ChaCha key with the PCG32
//! expansion used by `SeedableRng::seed_from_u64`, and child streams for
//! `(seed, index)` share that key but select ChaCha stream `index + 1`
//! (stream 0 belongs to the root). ChaCha streams with the same key never
//! overlap, so child sequences are independent by construction.
//!
//! Gamma-based draws (Dirichlet, Beta) use rejection sampling internally.
//! To keep the parent stream's consumption fixed, each Gamma variate takes
//! exactly one `u64` from the parent and runs its rejection loop on a
//! scratch ChaCha8 generator seeded from that value.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seedable, single-owner random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for work item `index` under run seed `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index.wrapping_add(1));
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi]`; returns `lo` when the interval is degenerate.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.next_f64();
        if hi <= lo {
            lo
        } else {
            lo + u * (hi - lo)
        }
    }

    /// Uniform index in `0..n`. Always consumes one value, even for `n == 1`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() on empty range");
        let u = self.inner.next_u64();
        // Lemire's widening multiply; bias is below 2^-64 * n.
        ((u as u128 * n as u128) >> 64) as usize
    }

    /// True with probability `p` (clamped to `[0, 1]`).
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Convex chain weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainWeights(pub Vec<f64>);

impl ChainWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Skip-connection weight in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipWeight(pub f64);

fn gamma_draw(shape: f64, rng: &mut SeededRng) -> f64 {
    let mut scratch = ChaCha8Rng::seed_from_u64(rng.next_u64());
    // shape > 0 is validated by callers
    let dist = Gamma::new(shape, 1.0).expect("valid gamma shape");
    dist.sample(&mut scratch)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must be positive, got {alpha}")))
    }
}

/// Symmetric Dirichlet(alpha, ..., alpha) over `k` components, sampled as
/// normalized Gamma(alpha, 1) variates. Consumes exactly `k` parent values.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut SeededRng) -> Result<ChainWeights> {
    check_alpha(alpha)?;
    if k == 0 {
        return Err(Error::param("dirichlet needs k >= 1"));
    }
    let gammas: Vec<f64> = (0..k).map(|_| gamma_draw(alpha, rng)).collect();
    if k == 1 {
        return Ok(ChainWeights(vec![1.0]));
    }
    let total: f64 = gammas.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // every variate underflowed; fall back to the simplex barycenter
        return Ok(ChainWeights(vec![1.0 / k as f64; k]));
    }
    Ok(ChainWeights(gammas.into_iter().map(|g| g / total).collect()))
}

/// Symmetric Beta(alpha, alpha) as `X / (X + Y)` with two Gamma variates.
pub fn sample_beta(alpha: f64, rng: &mut SeededRng) -> Result<SkipWeight> {
    check_alpha(alpha)?;
    let x = gamma_draw(alpha, rng);
    let y = gamma_draw(alpha, rng);
    let total = x + y;
    if !(total > 0.0) || !total.is_finite() {
        return Ok(SkipWeight(0.5));
    }
    Ok(SkipWeight((x / total).clamp(0.0, 1.0)))
}

/// Uniform pick from a nonempty slice.
pub fn choose_uniform<'a, T>(items: &'a [T], rng: &mut SeededRng) -> Result<&'a T> {
    if items.is_empty() {
        return Err(Error::param("cannot choose from an empty list"));
    }
    Ok(&items[rng.index(items.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_single_component() {
        let mut rng = SeededRng::new(0);
        assert_eq!(sample_dirichlet(1.0, 1, &mut rng).unwrap().0, vec![1.0]);
    }

    #[test]
    fn dirichlet_on_simplex() {
        let mut rng = SeededRng::new(7);
        let w = sample_dirichlet(1.0, 3, &mut rng).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.0.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_consumes_fixed_number_of_values() {
        for alpha in [0.1, 1.0, 7.5] {
            let mut a = SeededRng::new(3);
            let mut b = SeededRng::new(3);
            sample_dirichlet(alpha, 4, &mut a).unwrap();
            for _ in 0..4 {
                b.next_u64();
            }
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(sample_dirichlet(0.0, 3, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_dirichlet(-1.0, 3, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_dirichlet(1.0, 0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_beta(0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_beta(f64::NAN, &mut rng), Err(Error::Parameter(_))));
        let empty: [u8; 0] = [];
        assert!(matches!(choose_uniform(&empty, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dirichlet_mean_is_one_over_k() {
        let mut rng = SeededRng::new(11);
        let n = 10_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let w = sample_dirichlet(1.0, 3, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(w.0) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / n as f64 - 1.0 / 3.0).abs() < 0.01, "{}", a / n as f64);
        }
    }

    #[test]
    fn beta_moments() {
        let mut rng = SeededRng::new(5);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(1.0, &mut rng).unwrap().0).collect();
        assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        // Beta(1,1) is Uniform(0,1): variance 1/12
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn choose_uniform_frequencies() {
        let mut rng = SeededRng::new(9);
        assert_eq!(*choose_uniform(&["only"], &mut rng).unwrap(), "only");
        let items = [0usize, 1];
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| *choose_uniform(&items, &mut rng).unwrap() == 1)
            .count();
        // binomial(10^4, 0.5): sd = 0.005, tolerance is 4 sd
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let items = ["a", "b", "c"];
        let mut c = SeededRng::new(1);
        let mut d = SeededRng::new(1);
        assert_eq!(choose_uniform(&items, &mut c).unwrap(), choose_uniform(&items, &mut d).unwrap());
    }

    #[test]
    fn child_streams_diverge() {
        let mut differing = 0;
        let mut seeds = SeededRng::new(2024);
        for _ in 0..1000 {
            let seed = seeds.next_u64();
            let mut a = SeededRng::stream(seed, 3);
            let mut b = SeededRng::stream(seed, 4);
            let sa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
            let sb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
            if sa != sb {
                differing += 1;
            }
        }
        assert!(differing >= 990);
    }

    #[test]
    fn child_stream_differs_from_root() {
        let mut root = SeededRng::new(5);
        let mut child = SeededRng::stream(5, 0);
        assert_ne!(root.next_u64(), child.next_u64());
    }
}

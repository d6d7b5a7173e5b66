//! Unbiased Rand-K sparsification and its variance algebra.
//!
//! `RandK` keeps `K` of `d` coordinates chosen uniformly without replacement
//! and rescales them by `d / K`, which makes it an unbiased compressor with
//! variance parameter `omega = d / K - 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rand-K compressor on `R^d`. `omega` is always derived from `(d, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct CompressorSpec {
    dim: usize,
    keep: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    dim: usize,
    keep: usize,
}

impl TryFrom<RawSpec> for CompressorSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        CompressorSpec::new(raw.dim, raw.keep)
    }
}

impl From<CompressorSpec> for RawSpec {
    fn from(s: CompressorSpec) -> Self {
        RawSpec {
            dim: s.dim,
            keep: s.keep,
        }
    }
}

impl CompressorSpec {
    pub fn new(dim: usize, keep: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("compressor dimension must be positive"));
        }
        if keep == 0 || keep > dim {
            return Err(Error::contract(format!(
                "keep count {keep} outside [1, {dim}]"
            )));
        }
        Ok(Self { dim, keep })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(dim, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn is_identity(&self) -> bool {
        self.keep == self.dim
    }

    pub fn omega(&self) -> f64 {
        omega_of(self)
    }

    /// Multiplier `d / K` applied to the kept coordinates.
    pub fn scale(&self) -> f64 {
        self.dim as f64 / self.keep as f64
    }

    /// Draws the kept index set, in selection order.
    pub fn sample_support<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.keep);
        self.sample_support_into(rng, &mut out);
        out
    }

    /// Partial Fisher-Yates over `[0, d)`; `out` is cleared first.
    ///
    /// The identity compressor consumes no randomness and yields `0..d`.
    pub fn sample_support_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        SupportSampler::new().sample(self, rng, out);
    }
}

/// Reusable scratch for repeated support draws.
///
/// Holds the identity permutation of `[0, d)`; each draw swaps in place and
/// then undoes its swaps, so a draw costs `O(K)` regardless of `d` and the
/// output depends only on the generator, never on earlier draws.
#[derive(Debug, Clone, Default)]
pub struct SupportSampler {
    perm: Vec<usize>,
    swaps: Vec<(usize, usize)>,
}

impl SupportSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, spec: &CompressorSpec, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        let (d, k) = (spec.dim, spec.keep);
        if k == d {
            out.extend(0..d);
            return;
        }
        if self.perm.len() < d {
            let start = self.perm.len();
            self.perm.extend(start..d);
        }
        self.swaps.clear();
        for i in 0..k {
            let j = rng.random_range(i..d);
            self.perm.swap(i, j);
            self.swaps.push((i, j));
            out.push(self.perm[i]);
        }
        for &(i, j) in self.swaps.iter().rev() {
            self.perm.swap(i, j);
        }
    }
}

pub fn omega_of(spec: &CompressorSpec) -> f64 {
    spec.dim as f64 / spec.keep as f64 - 1.0
}

/// One Rand-K draw of `x`.
pub fn compress_rand_k<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.len() != spec.dim {
        return Err(Error::contract(format!(
            "vector length {} does not match compressor dimension {}",
            x.len(),
            spec.dim
        )));
    }
    let mut out = vec![0.0; spec.dim];
    if spec.is_identity() {
        out.copy_from_slice(x);
        return Ok(out);
    }
    let scale = spec.scale();
    for j in spec.sample_support(rng) {
        out[j] = scale * x[j];
    }
    Ok(out)
}

/// `sum_i weights_i * C_i(x)` with independent draws per compressor.
pub fn average_compress<R: Rng + ?Sized>(
    x: &[f64],
    specs: &[CompressorSpec],
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if specs.is_empty() || specs.len() != weights.len() {
        return Err(Error::contract(
            "need one weight per compressor and at least one compressor",
        ));
    }
    check_simplex(weights, 1e-12)?;
    let mut out = vec![0.0; x.len()];
    for (spec, &w) in specs.iter().zip(weights) {
        let c = compress_rand_k(spec, x, rng)?;
        for (o, v) in out.iter_mut().zip(&c) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Variance parameter of a weighted average of compressors sharing `omega`.
pub fn averaged_omega(omega: f64, weights: &[f64]) -> f64 {
    omega * weights.iter().map(|w| w * w).sum::<f64>()
}

pub(crate) fn check_simplex(weights: &[f64], tol: f64) -> Result<()> {
    if weights.iter().any(|w| !(0.0..=1.0 + tol).contains(w)) {
        return Err(Error::contract("weights must lie in [0, 1]"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::contract(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

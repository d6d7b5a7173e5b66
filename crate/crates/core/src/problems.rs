//! Diagonal quadratic objectives with exact and noisy gradient oracles.
//!
//! Every worker holds `f_i(x) = 1/2 x^T (xi_i A) x` where `A` is the block
//! diagonal `diag(1, .., 1, lambda, .., lambda)`. With all `xi_i = 1` this is
//! the homogeneous block quadratic; otherwise the workers differ by a scalar
//! curvature factor. The minimizer is `0` and `f* = 0` in both cases.
//!
//! Noise convention: `sigma` is the per-coordinate standard deviation of the
//! additive Gaussian gradient noise, so the full-vector oracle variance is
//! `d * sigma^2` (see [`NoiseSpec::full_variance`]).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::normal;

const XI_LO: f64 = 0.1;
const XI_HI: f64 = 2.0;
/// Norm of the default starting point `x0 = c * (1, .., 1)`.
pub const DEFAULT_START_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::contract("noise sigma must be finite and >= 0"));
        }
        Ok(Self { sigma })
    }

    pub fn none() -> Self {
        Self { sigma: 0.0 }
    }

    /// `E||grad f(x; xi) - grad f(x)||^2` for a single sample in dimension `d`.
    pub fn full_variance(&self, d: usize) -> f64 {
        d as f64 * self.sigma * self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureConstants {
    pub l: f64,
    pub l_a: f64,
    pub l_b: f64,
    pub l_max: f64,
    pub l_hat_sq: f64,
}

/// Serialized form: enough to rebuild the instance bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub d: usize,
    pub lambda: f64,
    pub scale_std: f64,
    pub seed: u64,
    pub xi: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    d: usize,
    lambda: f64,
    scale_std: f64,
    seed: u64,
    xi: Vec<f64>,
    xi_mean: f64,
    /// Diagonal of the shared base matrix `A`.
    diag: Vec<f64>,
    x0: Vec<f64>,
    constants: StructureConstants,
    delta: f64,
}

fn block_diag(d: usize, lambda: f64) -> Vec<f64> {
    (0..d).map(|j| if j < d / 2 { 1.0 } else { lambda }).collect()
}

fn default_start(d: usize) -> Vec<f64> {
    vec![DEFAULT_START_NORM / (d as f64).sqrt(); d]
}

fn check_shape(d: usize, lambda: f64) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::contract(format!(
            "dimension must be positive and even, got {d}"
        )));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::contract(format!("lambda {lambda} outside (0, 1]")));
    }
    Ok(())
}

/// `f(x) = 1/2 x^T A x`, `A = diag(I_{d/2}, lambda I_{d/2})`, one worker's worth of data.
pub fn make_block_quadratic(d: usize, lambda: f64) -> Result<ProblemInstance> {
    check_shape(d, lambda)?;
    ProblemInstance::build(d, lambda, 0.0, 0, vec![1.0], default_start(d))
}

/// Worker `i` holds `xi_i A`, `xi_i ~ Normal(1, scale_std^2)` truncated to `[0.1, 2]`.
pub fn make_hetero_quadratic<R: Rng + ?Sized>(
    d: usize,
    lambda: f64,
    scale_std: f64,
    n: usize,
    seed: u64,
    rng: &mut R,
) -> Result<ProblemInstance> {
    check_shape(d, lambda)?;
    if n == 0 {
        return Err(Error::contract("need at least one worker"));
    }
    if !(scale_std >= 0.0 && scale_std.is_finite()) {
        return Err(Error::contract("scale_std must be finite and >= 0"));
    }
    let xi = if scale_std == 0.0 {
        vec![1.0; n]
    } else {
        let dist = Normal::new(1.0, scale_std).map_err(|e| Error::contract(e.to_string()))?;
        (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if (XI_LO..=XI_HI).contains(&v) {
                    break v;
                }
            })
            .collect()
    };
    ProblemInstance::build(d, lambda, scale_std, seed, xi, default_start(d))
}

impl ProblemInstance {
    /// Instance with explicit per-worker scales and start point.
    pub fn with_scales(d: usize, lambda: f64, xi: Vec<f64>, x0: Option<Vec<f64>>) -> Result<Self> {
        check_shape(d, lambda)?;
        if xi.is_empty() || xi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::contract("worker scales must be positive and finite"));
        }
        let x0 = x0.unwrap_or_else(|| default_start(d));
        ProblemInstance::build(d, lambda, 0.0, 0, xi, x0)
    }

    fn build(
        d: usize,
        lambda: f64,
        scale_std: f64,
        seed: u64,
        xi: Vec<f64>,
        x0: Vec<f64>,
    ) -> Result<Self> {
        if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("start point must be finite with length d"));
        }
        let diag = block_diag(d, lambda);
        let n = xi.len() as f64;
        let xi_mean = xi.iter().sum::<f64>() / n;
        let a_norm = diag.iter().cloned().fold(0.0, f64::max);
        let homogeneous = xi.iter().all(|&v| v == xi[0]);

        let l = xi_mean * a_norm;
        let l_i_max = xi.iter().cloned().fold(0.0, f64::max) * a_norm;
        let l_hat_sq = xi.iter().map(|v| (v * a_norm).powi(2)).sum::<f64>() / n;
        let (l_a, l_b) = if homogeneous {
            (0.0, l)
        } else {
            let dev = xi
                .iter()
                .map(|v| (v - xi_mean).abs())
                .fold(0.0, f64::max)
                * a_norm;
            // (a + b)^2 <= 2a^2 + 2b^2 splits the averaged gradient difference
            // into the worker-deviation part and the mean-Hessian part.
            (std::f64::consts::SQRT_2 * dev, std::f64::consts::SQRT_2 * l)
        };
        let l_max = l_i_max.max(l_a).max(l_b);

        let mut inst = ProblemInstance {
            d,
            lambda,
            scale_std,
            seed,
            xi,
            xi_mean,
            diag,
            x0,
            constants: StructureConstants {
                l,
                l_a,
                l_b,
                l_max,
                l_hat_sq,
            },
            delta: 0.0,
        };
        inst.delta = inst.f_value(&inst.x0) - inst.f_star();
        let g0 = inst.grad_norm_sq(&inst.x0);
        if g0 > 2.0 * l * inst.delta * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::contract(format!(
                "initial gradient bound violated: {g0} > 2 L Delta = {}",
                2.0 * l * inst.delta
            )));
        }
        Ok(inst)
    }

    pub fn from_record(rec: &InstanceRecord) -> Result<Self> {
        check_shape(rec.d, rec.lambda)?;
        if rec.xi.is_empty() || rec.xi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::contract("worker scales must be positive and finite"));
        }
        Self::build(
            rec.d,
            rec.lambda,
            rec.scale_std,
            rec.seed,
            rec.xi.clone(),
            rec.x0.clone(),
        )
    }

    pub fn record(&self) -> InstanceRecord {
        InstanceRecord {
            d: self.d,
            lambda: self.lambda,
            scale_std: self.scale_std,
            seed: self.seed,
            xi: self.xi.clone(),
            x0: self.x0.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of distinct worker functions. A homogeneous instance has one
    /// and serves any number of simulated workers.
    pub fn worker_functions(&self) -> usize {
        self.xi.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.xi
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn f_star(&self) -> f64 {
        0.0
    }

    pub fn structure_constants(&self) -> StructureConstants {
        self.constants
    }

    /// Curvature of worker `i` along coordinate `j`.
    #[inline]
    pub fn curvature(&self, worker: usize, j: usize) -> f64 {
        self.scale_of(worker) * self.diag[j]
    }

    #[inline]
    fn scale_of(&self, worker: usize) -> f64 {
        if self.xi.len() == 1 {
            self.xi[0]
        } else {
            self.xi[worker]
        }
    }

    fn check_worker(&self, worker: usize) -> Result<()> {
        if self.xi.len() > 1 && worker >= self.xi.len() {
            return Err(Error::contract(format!(
                "worker {worker} out of range for {} workers",
                self.xi.len()
            )));
        }
        Ok(())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::contract(format!(
                "vector length {} does not match dimension {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn f_value(&self, x: &[f64]) -> f64 {
        0.5 * self.xi_mean
            * x.iter()
                .zip(&self.diag)
                .map(|(v, a)| a * v * v)
                .sum::<f64>()
    }

    pub fn f_gap(&self, x: &[f64]) -> f64 {
        self.f_value(x) - self.f_star()
    }

    /// Exact `grad f_i(x) = xi_i A x`.
    pub fn grad(&self, worker: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_worker(worker)?;
        self.check_len(x)?;
        let s = self.scale_of(worker);
        Ok(x.iter().zip(&self.diag).map(|(v, a)| s * a * v).collect())
    }

    /// Exact gradient of the average `f`.
    pub fn full_grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.diag)
            .map(|(v, a)| self.xi_mean * a * v)
            .collect()
    }

    /// `(grad_norm_sq, f_gap, max |x_j|)` in one pass.
    pub fn measure(&self, x: &[f64]) -> (f64, f64, f64) {
        let (mut g2, mut f, mut big) = (0.0, 0.0, 0.0f64);
        for (v, a) in x.iter().zip(&self.diag) {
            let ax = a * v;
            g2 += ax * ax;
            f += ax * v;
            if !(v.abs() <= big) {
                big = if v.is_nan() { f64::INFINITY } else { v.abs() };
            }
        }
        let s = self.xi_mean;
        (s * s * g2, 0.5 * s * f - self.f_star(), big)
    }

    pub fn grad_norm_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.diag)
            .map(|(v, a)| (self.xi_mean * a * v).powi(2))
            .sum()
    }

    /// One noisy sample `grad f_i(x) + N(0, sigma^2 I)`.
    pub fn stoch_grad<R: Rng + ?Sized>(
        &self,
        worker: usize,
        x: &[f64],
        noise: NoiseSpec,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut g = self.grad(worker, x)?;
        if noise.sigma > 0.0 {
            for v in g.iter_mut() {
                *v += noise.sigma * normal(rng);
            }
        }
        Ok(g)
    }

    /// Coordinate `j` of `sum_{r=1..b} grad f_i(x; xi_r)`.
    ///
    /// The sum of `b` independent `N(0, sigma^2)` noise terms is drawn as one
    /// `N(0, b sigma^2)` value; nothing is drawn when `sigma = 0`.
    #[inline]
    pub fn batch_sum_coord<R: Rng + ?Sized>(
        &self,
        worker: usize,
        x_j: f64,
        j: usize,
        batch: u64,
        noise: NoiseSpec,
        rng: &mut R,
    ) -> f64 {
        let exact = batch as f64 * self.curvature(worker, j) * x_j;
        if noise.sigma == 0.0 {
            exact
        } else {
            exact + (batch as f64).sqrt() * noise.sigma * normal(rng)
        }
    }

    /// Coordinate `j` of the minibatch mean `(1/b) sum_r grad f_i(x; xi_r)`.
    #[inline]
    pub fn batch_mean_coord<R: Rng + ?Sized>(
        &self,
        worker: usize,
        x_j: f64,
        j: usize,
        batch: u64,
        noise: NoiseSpec,
        rng: &mut R,
    ) -> f64 {
        let exact = self.curvature(worker, j) * x_j;
        if noise.sigma == 0.0 {
            exact
        } else {
            exact + noise.sigma / (batch as f64).sqrt() * normal(rng)
        }
    }
}

/// Sampled check of the functional `(L_A, L_B)` inequality
/// `||1/n sum_i (grad f_i(x+u_i) - grad f_i(x))||^2 <= L_A^2 mean||u_i||^2 + L_B^2 ||mean u_i||^2`
/// for `n` workers. Returns the worst ratio `lhs / rhs` seen over `trials`.
pub fn functional_inequality_worst_ratio<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let d = inst.dim();
    let c = inst.structure_constants();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let scale: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let x: Vec<f64> = (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let us: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut avg_diff = vec![0.0; d];
        let mut mean_u = vec![0.0; d];
        let mut mean_sq = 0.0;
        for (i, u) in us.iter().enumerate() {
            let xu: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + b).collect();
            let w = if inst.worker_functions() == 1 { 0 } else { i };
            let g1 = inst.grad(w, &xu).expect("valid worker");
            let g0 = inst.grad(w, &x).expect("valid worker");
            for j in 0..d {
                avg_diff[j] += (g1[j] - g0[j]) / n as f64;
                mean_u[j] += u[j] / n as f64;
            }
            mean_sq += u.iter().map(|v| v * v).sum::<f64>() / n as f64;
        }
        let lhs: f64 = avg_diff.iter().map(|v| v * v).sum();
        let rhs = c.l_a * c.l_a * mean_sq + c.l_b * c.l_b * mean_u.iter().map(|v| v * v).sum::<f64>();
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{Role, Streams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_quadratic_reference_constants() {
        let p = make_block_quadratic(300, 0.01).unwrap();
        let c = p.structure_constants();
        assert_eq!((c.l, c.l_a, c.l_b, c.l_max, c.l_hat_sq), (1.0, 0.0, 1.0, 1.0, 1.0));
        let curv: Vec<f64> = (0..300).map(|j| p.curvature(0, j)).collect();
        let cond = curv.iter().cloned().fold(0.0, f64::max) / curv.iter().cloned().fold(f64::MAX, f64::min);
        assert!((cond - 100.0).abs() < 1e-9);
    }

    #[test]
    fn identity_block_quadratic() {
        let p = make_block_quadratic(2, 1.0).unwrap();
        let c = p.structure_constants();
        assert_eq!((c.l, c.l_b), (1.0, 1.0));
        assert_eq!(p.grad_norm_sq(&[3.0, 4.0]), 25.0);
        assert_eq!(p.grad_norm_sq(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn hand_evaluated_value_and_gradient() {
        let p = make_block_quadratic(4, 0.5).unwrap();
        let x = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(p.f_value(&x), 1.5);
        assert_eq!(p.grad(0, &x).unwrap(), vec![1.0, 1.0, 0.5, 0.5]);
        assert_eq!(p.grad(0, &[2.0, 0.0, 0.0, 2.0]).unwrap(), vec![2.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.grad(0, &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(make_block_quadratic(3, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let p = make_block_quadratic(4, 0.5).unwrap();
        assert!(p.grad(0, &[1.0]).is_err());
    }

    #[test]
    fn zero_scale_std_reduces_to_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = make_hetero_quadratic(10, 0.1, 0.0, 7, 3, &mut rng).unwrap();
        assert!(h.scales().iter().all(|&v| v == 1.0));
        let b = make_block_quadratic(10, 0.1).unwrap();
        assert_eq!(h.structure_constants(), b.structure_constants());
        assert_eq!(h.full_grad(b.x0()), b.full_grad(b.x0()));
    }

    #[test]
    fn truncation_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = make_hetero_quadratic(6, 0.5, 0.3, 50, 11, &mut rng).unwrap();
        assert_eq!(h.scales().len(), 50);
        assert!(h.scales().iter().all(|&v| (0.1..=2.0).contains(&v)));
    }

    #[test]
    fn two_worker_constants() {
        let h = ProblemInstance::with_scales(2, 1.0, vec![0.5, 1.5], None).unwrap();
        let c = h.structure_constants();
        assert_eq!(c.l, 1.0);
        assert!((c.l_max - 1.5_f64.max(c.l_b)).abs() < 1e-15);
        assert!((c.l_a - 0.5 * 2f64.sqrt()).abs() < 1e-15);
        assert!((c.l_b - 2f64.sqrt()).abs() < 1e-15);
        let e1 = [1.0, 0.0];
        assert_eq!(h.grad_norm_sq(&e1), 1.0);
        assert_eq!(h.grad(1, &e1).unwrap(), vec![1.5, 0.0]);
    }

    #[test]
    fn unscaled_split_would_violate_similarity() {
        // u_1 = 0, u_2 = 1 on xi = (0.5, 1.5): lhs 0.5625 exceeds the
        // 0.25 * 0.5 + 1 * 0.25 = 0.375 an unscaled split would allow.
        let lhs: f64 = (0.5 * 1.5f64).powi(2);
        assert!(lhs > 0.5f64.powi(2) * 0.5 + 0.25);
        let h = ProblemInstance::with_scales(2, 1.0, vec![0.5, 1.5], Some(vec![1.0, 1.0])).unwrap();
        let c = h.structure_constants();
        assert!(lhs <= c.l_a.powi(2) * 0.5 + c.l_b.powi(2) * 0.25);
    }

    #[test]
    fn single_worker_has_zero_l_a() {
        let h = ProblemInstance::with_scales(4, 0.3, vec![1.7], None).unwrap();
        assert_eq!(h.structure_constants().l_a, 0.0);
    }

    #[test]
    fn stoch_grad_zero_sigma_is_exact() {
        let p = make_block_quadratic(4, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0, -2.0, 3.0, 0.25];
        assert_eq!(
            p.stoch_grad(0, &x, NoiseSpec::none(), &mut rng).unwrap(),
            p.grad(0, &x).unwrap()
        );
    }

    #[test]
    fn stoch_grad_reproducible() {
        let p = make_block_quadratic(2, 1.0).unwrap();
        let noise = NoiseSpec::new(0.5).unwrap();
        let a = p.stoch_grad(0, &[1.0, 1.0], noise, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = p.stoch_grad(0, &[1.0, 1.0], noise, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stoch_grad_variance_and_mean() {
        let p = make_block_quadratic(4, 0.5).unwrap();
        let noise = NoiseSpec::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let x = [0.0; 4];
        let mut total = 0.0;
        let mut mean = [0.0; 4];
        for _ in 0..n {
            let g = p.stoch_grad(0, &x, noise, &mut rng).unwrap();
            total += g.iter().map(|v| v * v).sum::<f64>();
            for j in 0..4 {
                mean[j] += g[j] / n as f64;
            }
        }
        let var = total / n as f64;
        let expect = noise.full_variance(4);
        assert!((var - expect).abs() / expect < 0.03, "{var} vs {expect}");
        let se = 0.3 / (n as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < 4.0 * se));
    }

    #[test]
    fn batch_sum_has_batch_variance() {
        let p = make_block_quadratic(2, 1.0).unwrap();
        let noise = NoiseSpec::new(0.2).unwrap();
        let streams = Streams::new(8);
        let n = 50_000;
        let mut sq = 0.0;
        for k in 0..n {
            let mut r = streams.rng(0, Role::GradNoise, k);
            let v = p.batch_sum_coord(0, 0.0, 1, 16, noise, &mut r);
            sq += v * v;
        }
        let var = sq / n as f64;
        assert!((var - 16.0 * 0.04).abs() / (16.0 * 0.04) < 0.03);
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = make_hetero_quadratic(6, 0.2, 0.4, 5, 2, &mut rng).unwrap();
        let json = serde_json::to_string(&h.record()).unwrap();
        let back: InstanceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(ProblemInstance::from_record(&back).unwrap(), h);
    }

    #[test]
    fn assumption_sampling_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = make_block_quadratic(6, 0.05).unwrap();
        for n in 1..=4 {
            assert!(functional_inequality_worst_ratio(&p, n, 500, &mut rng) <= 1.0 + 1e-9);
        }
        let h = make_hetero_quadratic(6, 0.05, 0.5, 4, 1, &mut rng).unwrap();
        assert!(functional_inequality_worst_ratio(&h, 4, 2000, &mut rng) <= 1.0 + 1e-9);
    }
}

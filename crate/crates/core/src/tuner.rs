//! Hyperparameters prescribed by the convergence theory, plus the
//! equilibrium-time root finder they depend on.
//!
//! All variances here are full-vector: `sigma_sq = E||g - grad f||^2`.

use serde::{Deserialize, Serialize};

use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::methods::{InkheartConfig, M4Config, MethodConfig};
use crate::problems::StructureConstants;
use crate::timemodel::{ClusterProfile, RoundCounts, WorkerProfile};

/// Count used for `floor(t / cost)` when the cost is zero.
pub const DEFAULT_B_MAX: u64 = 10_000;

const BISECT_ITERS: usize = 200;
const BISECT_REL_WIDTH: f64 = 1e-12;
const HI_MARGIN: f64 = 1e-12;
/// Multiplicative constant of the M4 step size.
const M4_GAMMA_C: f64 = 1416.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Closed-form values from the convergence theorems.
    Theorem,
    /// Sweep gamma (and K, eta) and keep the fastest cell.
    #[default]
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub d: usize,
    /// Full-vector variance of a single stochastic gradient.
    pub sigma_sq: f64,
    /// Target on `E||grad f||^2`.
    pub epsilon: f64,
    pub constants: StructureConstants,
    pub b_max: u64,
}

impl TheoryInputs {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::contract("epsilon must be finite and > 0"));
        }
        if self.d == 0 {
            return Err(Error::contract("dimension must be positive"));
        }
        if !(self.sigma_sq >= 0.0 && self.sigma_sq.is_finite()) {
            return Err(Error::contract("sigma_sq must be finite and >= 0"));
        }
        if self.b_max == 0 {
            return Err(Error::contract("b_max must be >= 1"));
        }
        Ok(())
    }
}

/// A resolved configuration together with the quantities it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub config: MethodConfig,
    /// Per-iteration time budget.
    pub t: f64,
    pub s_star: Option<f64>,
    pub omega: f64,
    pub omega_s: f64,
    /// `sum_i beta_i^2 / w_i`, must not exceed 1 (Inkheart only).
    pub weight_sum: Option<f64>,
    /// Adjustments applied on top of the closed-form values.
    pub notes: Vec<String>,
}

/// `max(1, floor(t / cost))`; a zero cost yields `cap`.
fn count_for(t: f64, cost: f64, cap: u64) -> u64 {
    if cost == 0.0 {
        return cap;
    }
    // `as` saturates on overflow.
    ((t / cost).floor() as u64).max(1)
}

fn ratio_or_inf(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    if !s.is_finite() {
        return s;
    }
    s + c
}

/// Per-iteration budget of homogeneous Inkheart with Rand-1 in both directions.
pub fn inkheart_time_budget(w: &WorkerProfile, n: usize, d: usize, sigma_sq: f64, epsilon: f64) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    let omega = df - 1.0;
    let (h, tau, kappa) = (w.h, w.tau, w.kappa);
    [
        h,
        tau,
        kappa,
        16.0 * omega * tau / nf,
        16.0 * sigma_sq * h / (nf * epsilon),
        2.0 * df * kappa / nf.sqrt(),
        (32.0 * df * sigma_sq * h * tau / (nf * epsilon)).sqrt(),
        (8.0 * df.powi(3) * tau * kappa * kappa / nf).cbrt(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Denominator `D_i(s)` of the equilibrium equation for one worker.
#[allow(clippy::too_many_arguments)]
fn equilibrium_term(
    w: &WorkerProfile,
    kappa_max: f64,
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    d: f64,
    s: f64,
) -> f64 {
    let se = sigma_sq / epsilon;
    16.0 * omega * w.tau / s
        + 16.0 * se * w.h / s
        + 32.0 * se * omega * w.h * w.tau / (s * s)
        + 4.0 * d * omega_s * kappa_max * w.kappa / (s * s)
        + 8.0 * d * omega_s * omega * kappa_max * w.kappa * w.tau / (s * s * s)
}

/// `delta(s) = (sum_i 1 / D_i(s))^-1`, strictly decreasing in `s`.
pub fn equilibrium_delta(
    cluster: &ClusterProfile,
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    d: usize,
    s: f64,
) -> f64 {
    let km = cluster.kappa_max();
    let inv = compensated_sum(cluster.workers().iter().map(|w| {
        1.0 / equilibrium_term(w, km, omega, omega_s, sigma_sq, epsilon, d as f64, s)
    }));
    1.0 / inv
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub s_star: f64,
    /// Some worker has no cost at all, so any budget is enough.
    pub free: bool,
}

/// Root of `delta(s) = 1`.
pub fn equilibrium_solve(
    cluster: &ClusterProfile,
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    d: usize,
) -> Result<Equilibrium> {
    if !(epsilon > 0.0) || !(omega >= 0.0) || !(omega_s >= 0.0) || !(sigma_sq >= 0.0) {
        return Err(Error::contract("equilibrium inputs must be nonnegative with epsilon > 0"));
    }
    let delta = |s: f64| equilibrium_delta(cluster, omega, omega_s, sigma_sq, epsilon, d, s);
    // A worker whose D_i vanishes identically contributes 1/0 = inf.
    if delta(1.0) == 0.0 {
        return Ok(Equilibrium {
            s_star: 0.0,
            free: true,
        });
    }
    let mut hi = 1.0f64;
    while delta(hi) >= 1.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::contract("equilibrium bracket overflowed"));
        }
    }
    let mut lo = hi / 2.0;
    while delta(lo) < 1.0 {
        lo /= 2.0;
        if lo == 0.0 {
            return Err(Error::contract("equilibrium bracket underflowed"));
        }
    }
    for _ in 0..BISECT_ITERS {
        if hi - lo <= BISECT_REL_WIDTH * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if delta(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Equilibrium {
        s_star: 0.5 * (lo + hi),
        free: false,
    })
}

/// Coefficients `(a, b, c)` of `a r^3 + b r^2 + c r = 1` in `r = 1/s` for
/// `n` identical workers.
pub fn homogeneous_cubic(
    w: &WorkerProfile,
    n: usize,
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    d: usize,
) -> (f64, f64, f64) {
    let (nf, df, se) = (n as f64, d as f64, sigma_sq / epsilon);
    let c = (16.0 * omega * w.tau + 16.0 * se * w.h) / nf;
    let b = (32.0 * se * omega * w.h * w.tau + 4.0 * df * omega_s * w.kappa * w.kappa) / nf;
    let a = 8.0 * df * omega_s * omega * w.kappa * w.kappa * w.tau / nf;
    (a, b, c)
}

/// Bracket `[x/2, x]` around the positive root of `a x^3 + b x^2 + c x - 1`,
/// with `x = 1 / max{a^(1/3), b^(1/2), c}`.
pub fn cubic_bracket(a: f64, b: f64, c: f64) -> Result<(f64, f64)> {
    if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::contract("cubic coefficients must be finite and > 0"));
    }
    let x = 1.0 / a.cbrt().max(b.sqrt()).max(c);
    // At x the dominant term alone equals 1, so the true g(x) can sit below
    // rounding error; a relative 1e-12 margin keeps the upper end positive.
    Ok((0.5 * x, x * (1.0 + HI_MARGIN)))
}

/// Inverse weights `1 / w_i` of the heterogeneous Inkheart estimator.
pub fn inverse_weights(
    counts: &[RoundCounts],
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    p: f64,
) -> Vec<f64> {
    let se = sigma_sq / epsilon;
    counts
        .iter()
        .map(|c| {
            let (b, m, l) = (c.b as f64, c.m as f64, c.l as f64);
            8.0 * omega / m
                + 8.0 * se * omega / (b * m)
                + 8.0 * se / b
                + omega_s * omega / (p * m * l)
                + omega_s / (p * l)
        })
        .collect()
}

/// Minimizer of `sum beta_i^2 / w_i` over the simplex: `beta_i ∝ w_i`.
pub fn inkheart_weights(
    counts: &[RoundCounts],
    omega: f64,
    omega_s: f64,
    sigma_sq: f64,
    epsilon: f64,
    p: f64,
) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::contract("no workers to weight"));
    }
    if counts.iter().any(|c| c.b == 0 || c.m == 0 || c.l == 0) {
        return Err(Error::contract("round counts must be >= 1"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::contract("p must lie in (0, 1]"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::contract("epsilon must be > 0"));
    }
    let inv = inverse_weights(counts, omega, omega_s, sigma_sq, epsilon, p);
    // Workers with zero inverse weight are infinitely good: share mass among them.
    let free = inv.iter().filter(|&&v| v == 0.0).count();
    if free > 0 {
        let share = 1.0 / free as f64;
        return Ok(inv.iter().map(|&v| if v == 0.0 { share } else { 0.0 }).collect());
    }
    let w: Vec<f64> = inv.iter().map(|v| 1.0 / v).collect();
    let total = compensated_sum(w.iter().copied());
    Ok(w.iter().map(|wi| wi / total).collect())
}

/// `sum_i beta_i^2 inv_w_i`.
pub fn weights_objective(beta: &[f64], inv_w: &[f64]) -> f64 {
    compensated_sum(beta.iter().zip(inv_w).map(|(b, v)| b * b * v))
}

/// Sufficient condition for `1/(2g) - c - (d_1 + .. + d_k) g > 0`:
/// `g <= 1 / (k' max{2c, sqrt(2 d_1), ..})` with `k' = max(k + 1, 2)`.
///
/// With no quadratic terms the multiplier 1 would put `g = 1/(2c)` on the
/// root itself, so the factor 2 is kept.
pub fn gamma_floor_check(gamma: f64, c: f64, quad: &[f64]) -> Result<bool> {
    if !(c > 0.0) || quad.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::contract("gamma check needs c > 0 and d_i > 0"));
    }
    if !(gamma > 0.0) {
        return Ok(false);
    }
    let m = quad.iter().fold(2.0 * c, |acc, &d| acc.max((2.0 * d).sqrt()));
    let k = (quad.len() + 1).max(2) as f64;
    Ok(gamma <= 1.0 / (k * m))
}

fn inkheart_gamma(
    consts: &StructureConstants,
    counts: &[RoundCounts],
    beta: &[f64],
    omega: f64,
    omega_s: f64,
    p: f64,
) -> f64 {
    let mix = compensated_sum(counts.iter().zip(beta).map(|(c, b)| {
        let (m, l) = (c.m as f64, c.l as f64);
        (omega * omega_s / (p * m * l) + omega_s / (p * l)) * b * b
    }));
    let drift = compensated_sum(counts.iter().zip(beta).map(|(c, b)| omega_s * b / c.l as f64)) / p;
    let a = 1.0 / consts.l_max;
    let b = ratio_or_inf(1.0, consts.l_max * mix.sqrt());
    let c = ratio_or_inf(1.0, consts.l_a * drift.sqrt());
    a.min(b).min(c) / 6.0
}

/// Re-derives the stability condition the Inkheart step size must satisfy.
fn inkheart_gamma_valid(
    gamma: f64,
    consts: &StructureConstants,
    counts: &[RoundCounts],
    beta: &[f64],
    omega: f64,
    omega_s: f64,
    p: f64,
) -> Result<bool> {
    let l = consts.l;
    let d1 = compensated_sum(counts.iter().zip(beta).map(|(c, b)| {
        let (m, lc) = (c.m as f64, c.l as f64);
        omega * omega_s * l * l / p * b * b / (lc * m) + consts.l_b.powi(2) / p * omega_s * b * b / lc
    }));
    let d2 = compensated_sum(counts.iter().zip(beta).map(|(c, b)| consts.l_a.powi(2) / p * omega_s * b / c.l as f64));
    let quad: Vec<f64> = [2.0 * d1, 2.0 * d2].into_iter().filter(|&v| v > 0.0).collect();
    if l == 0.0 {
        return Ok(true);
    }
    gamma_floor_check(gamma, l, &quad)
}

struct InkheartParts {
    counts: Vec<RoundCounts>,
    p: f64,
    beta: Vec<f64>,
    weight_sum: f64,
}

fn inkheart_parts(cluster: &ClusterProfile, t: f64, omega: f64, omega_s: f64, inp: &TheoryInputs) -> Result<InkheartParts> {
    let d = inp.d;
    let counts: Vec<RoundCounts> = cluster
        .workers()
        .iter()
        .map(|w| RoundCounts {
            b: count_for(t, w.h, inp.b_max),
            m: count_for(t, w.tau, inp.b_max),
            l: count_for(t, w.kappa, d as u64),
        })
        .collect();
    let km = cluster.kappa_max();
    let l_min = count_for(t, km, d as u64);
    let p = (l_min as f64 / d as f64).min(1.0);
    let beta = inkheart_weights(&counts, omega, omega_s, inp.sigma_sq, inp.epsilon, p)?;
    let inv = inverse_weights(&counts, omega, omega_s, inp.sigma_sq, inp.epsilon, p);
    let weight_sum = weights_objective(&beta, &inv);
    Ok(InkheartParts {
        counts,
        p,
        beta,
        weight_sum,
    })
}

fn finish_inkheart(
    parts: InkheartParts,
    t: f64,
    s_star: Option<f64>,
    omega: f64,
    omega_s: f64,
    inp: &TheoryInputs,
    notes: Vec<String>,
) -> Result<Tuned> {
    if parts.weight_sum > 1.0 + 1e-12 {
        return Err(Error::contract(format!(
            "tuned weights give sum beta^2/w = {} > 1; raise b_max",
            parts.weight_sum
        )));
    }
    let k = &inp.constants;
    let gamma = inkheart_gamma(k, &parts.counts, &parts.beta, omega, omega_s, parts.p);
    if !inkheart_gamma_valid(gamma, k, &parts.counts, &parts.beta, omega, omega_s, parts.p)? {
        return Err(Error::contract("tuned step size fails its stability check"));
    }
    let rand1 = CompressorSpec::new(inp.d, 1)?;
    let cfg = InkheartConfig::new(gamma, parts.counts, parts.beta, parts.p, rand1, rand1)?;
    Ok(Tuned {
        config: MethodConfig::Inkheart(cfg),
        t,
        s_star,
        omega,
        omega_s,
        weight_sum: Some(parts.weight_sum),
        notes,
    })
}

/// Inkheart on `n` identical workers, Rand-1 both ways, closed-form budget.
pub fn inkheart_tune_homog(w: &WorkerProfile, n: usize, inp: &TheoryInputs) -> Result<Tuned> {
    inp.validate()?;
    if n == 0 {
        return Err(Error::contract("need at least one worker"));
    }
    let omega = inp.d as f64 - 1.0;
    let omega_s = omega;
    let cluster = ClusterProfile::homogeneous(n, *w)?;
    let mut notes = Vec::new();
    let mut t = inkheart_time_budget(w, n, inp.d, inp.sigma_sq, inp.epsilon);

    // 8 omega / m <= n must hold alongside the budget-driven m.
    if w.tau > 0.0 {
        let need = (8.0 * omega / n as f64).ceil().max(1.0);
        if (count_for(t, w.tau, inp.b_max) as f64) < need {
            t = t.max(need * w.tau);
            notes.push(format!("t enlarged to {t} so that 8 omega / m <= n"));
        }
    }

    let mut s_star = None;
    let mut parts = inkheart_parts(&cluster, t, omega, omega_s, inp)?;
    if parts.weight_sum > 1.0 {
        let eq = equilibrium_solve(&cluster, omega, omega_s, inp.sigma_sq, inp.epsilon, inp.d)?;
        if eq.s_star > t {
            t = eq.s_star;
            notes.push(format!("t enlarged to the equilibrium time {t} so the weight bound holds"));
            parts = inkheart_parts(&cluster, t, omega, omega_s, inp)?;
        }
        s_star = Some(eq.s_star);
    }
    finish_inkheart(parts, t, s_star, omega, omega_s, inp, notes)
}

/// Heterogeneous Inkheart: `t = max{max_i M_i, s*}`, optimal weights.
pub fn inkheart_tune_heter(cluster: &ClusterProfile, inp: &TheoryInputs) -> Result<Tuned> {
    inp.validate()?;
    let omega = inp.d as f64 - 1.0;
    let omega_s = omega;
    let eq = equilibrium_solve(cluster, omega, omega_s, inp.sigma_sq, inp.epsilon, inp.d)?;
    let m_max = (0..cluster.len()).map(|i| cluster.m_of(i)).fold(0.0, f64::max);
    let mut notes = Vec::new();
    if eq.free {
        notes.push("a worker has zero cost; equilibrium time is 0".to_string());
    }
    let t = m_max.max(eq.s_star);
    if t == 0.0 {
        return Err(Error::contract("all costs are zero; no finite time budget"));
    }
    let parts = inkheart_parts(cluster, t, omega, omega_s, inp)?;
    finish_inkheart(parts, t, Some(eq.s_star), omega, omega_s, inp, notes)
}

/// Homogeneous clusters use the closed-form budget, others the equilibrium.
pub fn inkheart_tune(cluster: &ClusterProfile, inp: &TheoryInputs) -> Result<Tuned> {
    if cluster.is_homogeneous() {
        inkheart_tune_homog(cluster.worker(0), cluster.len(), inp)
    } else {
        inkheart_tune_heter(cluster, inp)
    }
}

/// `9 eta^2 omega sigma^2 / (n p b) + 3 eta sigma^2 / (n b)`.
pub fn m4_noise_lhs(eta: f64, omega: f64, p: f64, sigma_sq: f64, n: usize, b: u64) -> f64 {
    let nb = n as f64 * b as f64;
    9.0 * eta * eta * omega * sigma_sq / (nb * p) + 3.0 * eta * sigma_sq / nb
}

/// Theorem values for M4. A heterogeneous cluster is priced at its slowest
/// `h`, `tau` and `kappa`, matching the M4 round time.
pub fn m4_tune(cluster: &ClusterProfile, inp: &TheoryInputs) -> Result<Tuned> {
    inp.validate()?;
    let n = cluster.len();
    let (nf, df) = (n as f64, inp.d as f64);
    let (h, tau, kappa) = (cluster.h_max(), cluster.tau_max(), cluster.kappa_max());
    let (s2, eps) = (inp.sigma_sq, inp.epsilon);
    let mut notes = Vec::new();
    if !cluster.is_homogeneous() {
        notes.push("heterogeneous cluster priced at max h, tau, kappa".to_string());
    }
    let t = [h, tau, kappa, (df * df * tau * tau * h * s2 / (nf * eps)).cbrt()]
        .into_iter()
        .fold(0.0, f64::max);
    let d = inp.d as u64;
    let k_up = count_for(t, tau, d).min(d) as usize;
    let k_down = count_for(t, kappa, d).min(d) as usize;
    let b = count_for(t, h, inp.b_max);
    let up = CompressorSpec::new(inp.d, k_up)?;
    let down = CompressorSpec::new(inp.d, k_down)?;
    let (omega, omega_s) = (up.omega(), down.omega());
    let p = 1.0 / (omega + 1.0);
    let p_s = 1.0 / (omega_s + 1.0);
    let bn_eps = b as f64 * nf * eps;

    let e1 = ratio_or_inf(bn_eps, omega * (omega + 1.0) * s2).sqrt() / 6.0;
    let e2 = ratio_or_inf(bn_eps, 6.0 * s2);
    let e3 = ratio_or_inf(nf, omega * (omega + 1.0) * omega_s).cbrt();
    let mut eta = e1.min(e2).min(e3).min(1.0);

    if m4_noise_lhs(eta, omega, p, s2, n, b) > eps / 2.0 {
        // Largest eta with A eta^2 + B eta <= eps / 2.
        let nb = nf * b as f64;
        let qa = 9.0 * omega * s2 / (nb * p);
        let qb = 3.0 * s2 / nb;
        eta = eps / (qb + (qb * qb + 2.0 * qa * eps).sqrt());
        notes.push(format!("eta shrunk to {eta} to meet the noise condition"));
    }
    if !(eta > 0.0) {
        return Err(Error::contract("momentum parameter collapsed to zero"));
    }
    let b_init = ((b as f64 / eta) * (1.0 + s2 / (nf * eps))).sqrt().ceil().max(1.0) as u64;
    let k = &inp.constants;
    let radical = omega_s * (omega_s + 1.0) * k.l_a.powi(2)
        + omega_s / nf * (omega_s + 1.0) * k.l_b.powi(2)
        + (omega * (omega + 1.0) / nf + 1.0 / (eta * eta)) * k.l_max.powi(2);
    let gamma = 1.0 / (6.0 * (M4_GAMMA_C * radical).sqrt());
    let cfg = M4Config {
        gamma,
        b,
        p,
        p_s,
        eta,
        b_init,
        up,
        down,
    };
    cfg.validate()?;
    Ok(Tuned {
        config: MethodConfig::M4(cfg),
        t,
        s_star: None,
        omega,
        omega_s,
        weight_sum: None,
        notes,
    })
}

/// `{2^-10, .., 2^3}`.
pub fn default_gamma_grid() -> Vec<f64> {
    (-10..=3).map(|e| 2f64.powi(e)).collect()
}

pub const DEFAULT_KEEP_GRID: [usize; 8] = [1, 3, 10, 30, 50, 100, 200, 300];

/// `{0.1, 0.2, .., 1.0}`.
pub fn default_eta_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Grid-mode Inkheart: one gradient, one message each way, Rand-K both ways,
/// full broadcast with probability `K / d`.
pub fn inkheart_grid_config(gamma: f64, keep: usize, n: usize, d: usize) -> Result<InkheartConfig> {
    let s = CompressorSpec::new(d, keep)?;
    let p = (keep as f64 / d as f64).min(1.0);
    InkheartConfig::uniform(gamma, n, RoundCounts { b: 1, m: 1, l: 1 }, p, s, s)
}

/// Grid-mode M4: batch 1, Rand-K both ways, `p = p_s = K / d`.
pub fn m4_grid_config(gamma: f64, keep: usize, eta: f64, d: usize, b_init: u64) -> Result<M4Config> {
    let s = CompressorSpec::new(d, keep)?;
    let p = (keep as f64 / d as f64).min(1.0);
    let cfg = M4Config {
        gamma,
        b: 1,
        p,
        p_s: p,
        eta,
        b_init,
        up: s,
        down: s,
    };
    cfg.validate()?;
    Ok(cfg)
}

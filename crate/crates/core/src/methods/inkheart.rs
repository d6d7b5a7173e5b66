use serde::{Deserialize, Serialize};

use super::{check_workers, Engine, StepInfo};
use crate::compress::{check_simplex, CompressorSpec, SupportSampler};
use crate::error::{Error, Result};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::streams::{Role, Streams};
use crate::timemodel::{inkheart_iteration_time, ClusterProfile, RoundCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InkheartConfig {
    pub gamma: f64,
    /// Per-worker `(b_i, m_i, l_i)`.
    pub counts: Vec<RoundCounts>,
    /// Aggregation weights on the simplex; `1/n` each in the homogeneous method.
    pub beta: Vec<f64>,
    /// Probability of a full broadcast.
    pub p: f64,
    pub up: CompressorSpec,
    pub down: CompressorSpec,
}

impl InkheartConfig {
    pub fn new(
        gamma: f64,
        counts: Vec<RoundCounts>,
        beta: Vec<f64>,
        p: f64,
        up: CompressorSpec,
        down: CompressorSpec,
    ) -> Result<Self> {
        let c = Self {
            gamma,
            counts,
            beta,
            p,
            up,
            down,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn uniform(
        gamma: f64,
        n: usize,
        counts: RoundCounts,
        p: f64,
        up: CompressorSpec,
        down: CompressorSpec,
    ) -> Result<Self> {
        Self::new(gamma, vec![counts; n], vec![1.0 / n as f64; n], p, up, down)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract("gamma must be finite and >= 0"));
        }
        if self.counts.is_empty() || self.counts.len() != self.beta.len() {
            return Err(Error::contract("need one (b, m, l) triple and one weight per worker"));
        }
        if self.counts.iter().any(|c| c.b == 0 || c.m == 0 || c.l == 0) {
            return Err(Error::contract("b, m and l must all be >= 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::contract(format!("broadcast probability {} outside (0, 1]", self.p)));
        }
        if self.up.dim() != self.down.dim() {
            return Err(Error::contract("uplink and downlink compressors disagree on dimension"));
        }
        check_simplex(&self.beta, 1e-12)
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    fn is_homogeneous(&self) -> bool {
        let n = self.n() as f64;
        self.counts.iter().all(|c| *c == self.counts[0])
            && self.beta.iter().all(|&b| (b - 1.0 / n).abs() <= 1e-15)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InkheartState {
    pub k: u64,
    /// Server iterate.
    pub x: Vec<f64>,
    /// Per-worker local iterates.
    pub locals: Vec<Vec<f64>>,
}

impl InkheartState {
    pub fn new(x0: &[f64], n: usize) -> Self {
        Self {
            k: 0,
            x: x0.to_vec(),
            locals: vec![x0.to_vec(); n],
        }
    }
}

#[derive(Default)]
struct Scratch {
    g: Vec<f64>,
    delta: Vec<f64>,
    dense: Vec<f64>,
    memo: Vec<f64>,
    memo_stamp: Vec<u64>,
    stamp: u64,
    support: Vec<usize>,
    sampler: SupportSampler,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            g: vec![0.0; d],
            delta: vec![0.0; d],
            dense: vec![0.0; d],
            memo: vec![0.0; d],
            memo_stamp: vec![0; d],
            ..Default::default()
        }
    }
}

fn check_dims(state: &InkheartState, inst: &ProblemInstance, cfg: &InkheartConfig) -> Result<()> {
    let d = inst.dim();
    if cfg.up.dim() != d || state.x.len() != d || state.locals.len() != cfg.n() {
        return Err(Error::contract("state, config and instance dimensions disagree"));
    }
    let f = inst.worker_functions();
    if f != 1 && f != cfg.n() {
        return Err(Error::contract("instance worker count does not match the config"));
    }
    Ok(())
}

/// Gradient estimator `g = sum_i beta_i / (b_i m_i) sum_j C_ij(S_i)` at the
/// current state, where `S_i` is worker `i`'s minibatch sum at `x_i`.
///
/// All `m_i` messages compress the same `S_i`; each coordinate of `S_i` is
/// drawn once and memoized for the round.
fn estimate_into(
    state: &InkheartState,
    inst: &ProblemInstance,
    noise: NoiseSpec,
    cfg: &InkheartConfig,
    streams: &Streams,
    s: &mut Scratch,
) {
    s.g.fill(0.0);
    let scale = cfg.up.scale();
    for (i, (rc, &beta)) in cfg.counts.iter().zip(&cfg.beta).enumerate() {
        let coef = beta / ((rc.b * rc.m) as f64);
        let xi = &state.locals[i];
        let mut noise_rng = streams.rng(i as u64, Role::GradNoise, state.k);
        if cfg.up.is_identity() {
            for (c, v) in s.dense.iter_mut().enumerate() {
                *v = inst.batch_sum_coord(i, xi[c], c, rc.b, noise, &mut noise_rng);
            }
            for _ in 0..rc.m {
                for (gc, v) in s.g.iter_mut().zip(&s.dense) {
                    *gc += coef * v;
                }
            }
            continue;
        }
        s.stamp += 1;
        let mut up_rng = streams.rng(i as u64, Role::Uplink, state.k);
        for _ in 0..rc.m {
            s.sampler.sample(&cfg.up, &mut up_rng, &mut s.support);
            for &c in &s.support {
                let v = if s.memo_stamp[c] == s.stamp {
                    s.memo[c]
                } else {
                    let v = inst.batch_sum_coord(i, xi[c], c, rc.b, noise, &mut noise_rng);
                    s.memo[c] = v;
                    s.memo_stamp[c] = s.stamp;
                    v
                };
                s.g[c] += coef * (scale * v);
            }
        }
    }
}

/// One draw of the round-`k` gradient estimator without advancing the state.
pub fn inkheart_estimate(
    state: &InkheartState,
    inst: &ProblemInstance,
    noise: NoiseSpec,
    cfg: &InkheartConfig,
    streams: &Streams,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dims(state, inst, cfg)?;
    let mut s = Scratch::new(inst.dim());
    estimate_into(state, inst, noise, cfg, streams, &mut s);
    Ok(s.g)
}

/// Returns whether the round ended in a full broadcast.
fn advance(
    state: &mut InkheartState,
    inst: &ProblemInstance,
    noise: NoiseSpec,
    cfg: &InkheartConfig,
    streams: &Streams,
    s: &mut Scratch,
) -> bool {
    estimate_into(state, inst, noise, cfg, streams, s);
    for ((xc, dc), gc) in state.x.iter_mut().zip(s.delta.iter_mut()).zip(&s.g) {
        let nx = *xc - cfg.gamma * gc;
        *dc = nx - *xc;
        *xc = nx;
    }
    let full = streams.coin(Role::DownCoin, state.k, cfg.p);
    if full {
        for xi in state.locals.iter_mut() {
            xi.copy_from_slice(&state.x);
        }
    } else {
        let scale = cfg.down.scale();
        for (i, (xi, rc)) in state.locals.iter_mut().zip(&cfg.counts).enumerate() {
            let coef = 1.0 / rc.l as f64;
            if cfg.down.is_identity() {
                for _ in 0..rc.l {
                    for (v, dc) in xi.iter_mut().zip(&s.delta) {
                        *v += coef * dc;
                    }
                }
                continue;
            }
            let mut rng = streams.rng(i as u64, Role::Downlink, state.k);
            for _ in 0..rc.l {
                s.sampler.sample(&cfg.down, &mut rng, &mut s.support);
                for &c in &s.support {
                    xi[c] += coef * (scale * s.delta[c]);
                }
            }
        }
    }
    state.k += 1;
    full
}

fn step_info(cluster: &ClusterProfile, cfg: &InkheartConfig, d: usize, full: bool) -> StepInfo {
    let (ku, kd) = (cfg.up.keep() as u64, cfg.down.keep() as u64);
    StepInfo {
        time: inkheart_iteration_time(cluster, &cfg.counts, full, d, cfg.up.keep(), cfg.down.keep()),
        up_coords: cfg.counts.iter().map(|c| c.m * ku).sum(),
        down_coords: if full {
            (cfg.n() * d) as u64
        } else {
            cfg.counts.iter().map(|c| c.l * kd).sum()
        },
    }
}

/// Heterogeneous-time round: per-worker counts and weights.
pub fn inkheart_heter_step(
    state: &mut InkheartState,
    inst: &ProblemInstance,
    cluster: &ClusterProfile,
    noise: NoiseSpec,
    cfg: &InkheartConfig,
    streams: &Streams,
) -> Result<StepInfo> {
    cfg.validate()?;
    check_dims(state, inst, cfg)?;
    if cluster.len() != cfg.n() {
        return Err(Error::contract("cluster size does not match the config"));
    }
    let mut s = Scratch::new(inst.dim());
    let full = advance(state, inst, noise, cfg, streams, &mut s);
    Ok(step_info(cluster, cfg, inst.dim(), full))
}

/// Homogeneous round: identical counts and uniform weights.
pub fn inkheart_step(
    state: &mut InkheartState,
    inst: &ProblemInstance,
    cluster: &ClusterProfile,
    noise: NoiseSpec,
    cfg: &InkheartConfig,
    streams: &Streams,
) -> Result<StepInfo> {
    if !cfg.is_homogeneous() {
        return Err(Error::contract(
            "homogeneous step needs identical counts and uniform weights",
        ));
    }
    inkheart_heter_step(state, inst, cluster, noise, cfg, streams)
}

pub(super) struct InkheartEngine<'a> {
    inst: &'a ProblemInstance,
    noise: NoiseSpec,
    cfg: InkheartConfig,
    streams: Streams,
    state: InkheartState,
    scratch: Scratch,
    info_full: StepInfo,
    info_partial: StepInfo,
}

impl<'a> InkheartEngine<'a> {
    pub(super) fn new(
        inst: &'a ProblemInstance,
        cluster: &ClusterProfile,
        noise: NoiseSpec,
        cfg: &InkheartConfig,
        streams: Streams,
    ) -> Result<Self> {
        cfg.validate()?;
        check_workers(inst, cluster)?;
        if cluster.len() != cfg.n() {
            return Err(Error::contract("cluster size does not match the config"));
        }
        let state = InkheartState::new(inst.x0(), cfg.n());
        check_dims(&state, inst, cfg)?;
        let d = inst.dim();
        Ok(Self {
            inst,
            noise,
            info_full: step_info(cluster, cfg, d, true),
            info_partial: step_info(cluster, cfg, d, false),
            cfg: cfg.clone(),
            streams,
            state,
            scratch: Scratch::new(d),
        })
    }
}

impl Engine for InkheartEngine<'_> {
    fn server(&self) -> &[f64] {
        &self.state.x
    }

    fn step(&mut self) -> Result<StepInfo> {
        let full = advance(
            &mut self.state,
            self.inst,
            self.noise,
            &self.cfg,
            &self.streams,
            &mut self.scratch,
        );
        Ok(if full { self.info_full } else { self.info_partial })
    }
}

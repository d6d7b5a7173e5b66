//! Event-driven M4 engine.
//!
//! With sparse compressors a round touches only `K` coordinates per worker
//! and direction, but the dense recursion still moves every local iterate
//! and momentum entry. Between touches the shadow `w_i[c]` is constant, so
//! with `r = 1 - eta`, `e = x_i[c] - w_i[c]` and `s` skipped rounds
//!
//! ```text
//! x_i[c] <- w + r^s e
//! v_i[c] <- r^s v + a w (1 - r^s) + eta a e s r^s + noise
//! ```
//!
//! where the noise is one Gaussian with variance
//! `eta sigma_b^2 (1 - r^{2s}) / (2 - eta)`: the exact law of the
//! accumulated per-round minibatch noise. Each `(worker, coordinate)` pair
//! is brought forward only when a message touches it or a shared coin forces
//! a full synchronization, which makes a round cost `O(n K + d)` plus the
//! amortized dense syncs.

use super::m4::{m4_init, m4_step_info, mean_into, M4Config, M4State};
use super::{check_workers, Engine, StepInfo};
use crate::compress::SupportSampler;
use crate::error::{Error, Result};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::streams::{normal, Role, StreamRng, Streams};
use crate::timemodel::ClusterProfile;

pub struct LazyM4<'a> {
    inst: &'a ProblemInstance,
    cluster: ClusterProfile,
    cfg: M4Config,
    streams: Streams,
    sigma_b: f64,
    k: u64,
    x: Vec<f64>,
    g: Vec<f64>,
    delta: Vec<f64>,
    w: Vec<Vec<f64>>,
    xl: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Round index each `(worker, coordinate)` entry of `xl` / `v` is current at.
    last: Vec<Vec<u64>>,
    support: Vec<usize>,
    sampler: SupportSampler,
}

#[derive(Clone, Copy)]
struct Dyn {
    eta: f64,
    r: f64,
    sigma_b: f64,
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn forward(
    xl: &mut f64,
    v: &mut f64,
    w: f64,
    last: &mut u64,
    target: u64,
    a: f64,
    dy: Dyn,
    rng: &mut StreamRng,
) {
    debug_assert!(target >= *last);
    let s = target - *last;
    if s == 0 {
        return;
    }
    *last = target;
    if s == 1 {
        *xl = dy.r * *xl + dy.eta * w;
        let mut grad = a * *xl;
        if dy.sigma_b > 0.0 {
            grad += dy.sigma_b * normal(rng);
        }
        *v = dy.r * *v + dy.eta * grad;
        return;
    }
    let rs = if s > i32::MAX as u64 { 0.0 } else { dy.r.powi(s as i32) };
    let e = *xl - w;
    *xl = w + rs * e;
    let mut nv = rs * *v + a * w * (1.0 - rs) + dy.eta * a * e * s as f64 * rs;
    if dy.sigma_b > 0.0 {
        let var = dy.eta * dy.sigma_b * dy.sigma_b * (1.0 - rs * rs) / (2.0 - dy.eta);
        nv += var.sqrt() * normal(rng);
    }
    *v = nv;
}

impl<'a> LazyM4<'a> {
    pub fn new(
        inst: &'a ProblemInstance,
        cluster: &ClusterProfile,
        noise: NoiseSpec,
        cfg: &M4Config,
        streams: Streams,
    ) -> Result<Self> {
        cfg.validate()?;
        check_workers(inst, cluster)?;
        let d = inst.dim();
        if cfg.up.dim() != d {
            return Err(Error::contract("compressor dimension does not match the instance"));
        }
        let n = cluster.len();
        let M4State { x, g, w, xl, v, .. } = m4_init(inst, n, noise, cfg.b_init, &streams);
        Ok(Self {
            inst,
            cluster: cluster.clone(),
            cfg: *cfg,
            streams,
            sigma_b: noise.sigma / (cfg.b as f64).sqrt(),
            k: 0,
            x,
            g,
            delta: vec![0.0; d],
            w,
            xl,
            v,
            last: vec![vec![0; d]; n],
            support: Vec::new(),
            sampler: SupportSampler::new(),
        })
    }

    fn dynamics(&self) -> Dyn {
        Dyn {
            eta: self.cfg.eta,
            r: 1.0 - self.cfg.eta,
            sigma_b: self.sigma_b,
        }
    }

    fn forward_worker(&mut self, i: usize, target: u64, rng: &mut StreamRng) {
        let dy = self.dynamics();
        let (xl, v, w, last) = (&mut self.xl[i], &mut self.v[i], &self.w[i], &mut self.last[i]);
        for c in 0..xl.len() {
            let a = self.inst.curvature(i, c);
            forward(&mut xl[c], &mut v[c], w[c], &mut last[c], target, a, dy, rng);
        }
    }

    /// Dense snapshot at the current round. Draws from its own stream, so the
    /// run continues exactly as it would have without the snapshot only when
    /// `sigma = 0`.
    pub fn materialize(&mut self) -> M4State {
        for i in 0..self.xl.len() {
            let mut rng = self.streams.rng(i as u64, Role::Aggregate, self.k);
            self.forward_worker(i, self.k, &mut rng);
        }
        M4State {
            k: self.k,
            x: self.x.clone(),
            g: self.g.clone(),
            w: self.w.clone(),
            xl: self.xl.clone(),
            v: self.v.clone(),
        }
    }

    pub fn server(&self) -> &[f64] {
        &self.x
    }

    pub fn round(&mut self) -> StepInfo {
        let k = self.k;
        let n = self.xl.len();
        let d = self.x.len();
        let cfg = self.cfg;
        let dy = self.dynamics();
        let inv_n = 1.0 / n as f64;
        for ((xc, dc), gc) in self.x.iter_mut().zip(self.delta.iter_mut()).zip(&self.g) {
            let nx = *xc - cfg.gamma * gc;
            *dc = nx - *xc;
            *xc = nx;
        }
        let down_full = self.streams.coin(Role::DownCoin, k, cfg.p_s);
        let up_full = self.streams.coin(Role::UpCoin, k, cfg.p);
        let mut rngs: Vec<StreamRng> = (0..n)
            .map(|i| self.streams.rng(i as u64, Role::GradNoise, k))
            .collect();
        if down_full {
            for (i, rng) in rngs.iter_mut().enumerate() {
                self.forward_worker(i, k, rng);
                self.w[i].copy_from_slice(&self.x);
            }
        }
        for (i, rng) in rngs.iter_mut().enumerate() {
            let (xl, v, w, last) = (&mut self.xl[i], &mut self.v[i], &mut self.w[i], &mut self.last[i]);
            if !down_full {
                let scale = cfg.down.scale();
                if cfg.down.is_identity() {
                    self.support.clear();
                    self.support.extend(0..d);
                } else {
                    self.sampler.sample(
                        &cfg.down,
                        &mut self.streams.rng(i as u64, Role::Downlink, k),
                        &mut self.support,
                    );
                }
                for &c in &self.support {
                    let a = self.inst.curvature(i, c);
                    forward(&mut xl[c], &mut v[c], w[c], &mut last[c], k, a, dy, rng);
                    if cfg.down.is_identity() {
                        w[c] += self.delta[c];
                    } else {
                        w[c] += scale * self.delta[c];
                    }
                }
            }
            if !up_full {
                let scale = cfg.up.scale();
                if cfg.up.is_identity() {
                    self.support.clear();
                    self.support.extend(0..d);
                } else {
                    self.sampler.sample(
                        &cfg.up,
                        &mut self.streams.rng(i as u64, Role::Uplink, k),
                        &mut self.support,
                    );
                }
                for &c in &self.support {
                    let a = self.inst.curvature(i, c);
                    forward(&mut xl[c], &mut v[c], w[c], &mut last[c], k, a, dy, rng);
                    let old = v[c];
                    forward(&mut xl[c], &mut v[c], w[c], &mut last[c], k + 1, a, dy, rng);
                    if cfg.up.is_identity() {
                        self.g[c] += inv_n * (v[c] - old);
                    } else {
                        self.g[c] += inv_n * (scale * (v[c] - old));
                    }
                }
            }
        }
        if up_full {
            for (i, rng) in rngs.iter_mut().enumerate() {
                self.forward_worker(i, k + 1, rng);
            }
            mean_into(&self.v, &mut self.g);
        }
        self.k += 1;
        m4_step_info(&self.cluster, &cfg, d, down_full, up_full)
    }
}

impl Engine for LazyM4<'_> {
    fn server(&self) -> &[f64] {
        &self.x
    }

    fn step(&mut self) -> Result<StepInfo> {
        Ok(self.round())
    }
}

use serde::{Deserialize, Serialize};

use super::{check_workers, Engine, StepInfo};
use crate::compress::{CompressorSpec, SupportSampler};
use crate::error::{Error, Result};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::streams::{Role, Streams};
use crate::timemodel::{m4_iteration_time, ClusterProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M4Config {
    pub gamma: f64,
    pub b: u64,
    /// Probability of a full uplink (exact averaging of the `v_i`).
    pub p: f64,
    /// Probability of a full downlink (all shadows reset to `x`).
    pub p_s: f64,
    /// Shared momentum `nu = mu`.
    pub eta: f64,
    pub b_init: u64,
    pub up: CompressorSpec,
    pub down: CompressorSpec,
}

impl M4Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract("gamma must be finite and >= 0"));
        }
        if self.b == 0 || self.b_init == 0 {
            return Err(Error::contract("b and b_init must be >= 1"));
        }
        for (name, v) in [("p", self.p), ("p_s", self.p_s), ("eta", self.eta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::contract(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if self.up.dim() != self.down.dim() {
            return Err(Error::contract("uplink and downlink compressors disagree on dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct M4State {
    pub k: u64,
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    /// Per-worker shadow models.
    pub w: Vec<Vec<f64>>,
    /// Per-worker local iterates.
    pub xl: Vec<Vec<f64>>,
    /// Per-worker momentum estimators.
    pub v: Vec<Vec<f64>>,
}

/// `w_i = x_i = x0`, `v_i` a `b_init`-sample minibatch mean at `x0`, `g = mean v_i`.
pub fn m4_init(
    inst: &ProblemInstance,
    n: usize,
    noise: NoiseSpec,
    b_init: u64,
    streams: &Streams,
) -> M4State {
    let d = inst.dim();
    let x0 = inst.x0();
    let mut v = vec![vec![0.0; d]; n];
    for (i, vi) in v.iter_mut().enumerate() {
        let mut rng = streams.rng(i as u64, Role::Init, 0);
        for (c, vc) in vi.iter_mut().enumerate() {
            *vc = inst.batch_mean_coord(i, x0[c], c, b_init, noise, &mut rng);
        }
    }
    let mut g = vec![0.0; d];
    mean_into(&v, &mut g);
    M4State {
        k: 0,
        x: x0.to_vec(),
        g,
        w: vec![x0.to_vec(); n],
        xl: vec![x0.to_vec(); n],
        v,
    }
}

pub(super) fn mean_into(v: &[Vec<f64>], g: &mut [f64]) {
    let inv = 1.0 / v.len() as f64;
    g.fill(0.0);
    for vi in v {
        for (gc, vc) in g.iter_mut().zip(vi) {
            *gc += vc;
        }
    }
    for gc in g.iter_mut() {
        *gc *= inv;
    }
}

/// Returns `(down_full, up_full)`.
#[allow(clippy::too_many_arguments)]
fn advance(
    st: &mut M4State,
    inst: &ProblemInstance,
    noise: NoiseSpec,
    cfg: &M4Config,
    streams: &Streams,
    delta: &mut Vec<f64>,
    old: &mut Vec<f64>,
    support: &mut Vec<usize>,
    sampler: &mut SupportSampler,
) -> (bool, bool) {
    let d = inst.dim();
    let n = st.v.len();
    let k = st.k;
    delta.resize(d, 0.0);
    old.resize(d, 0.0);
    for ((xc, dc), gc) in st.x.iter_mut().zip(delta.iter_mut()).zip(&st.g) {
        let nx = *xc - cfg.gamma * gc;
        *dc = nx - *xc;
        *xc = nx;
    }
    let down_full = streams.coin(Role::DownCoin, k, cfg.p_s);
    let up_full = streams.coin(Role::UpCoin, k, cfg.p);
    let (eta, keep) = (cfg.eta, 1.0 - cfg.eta);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let wi = &mut st.w[i];
        if down_full {
            wi.copy_from_slice(&st.x);
        } else if cfg.down.is_identity() {
            for (wc, dc) in wi.iter_mut().zip(delta.iter()) {
                *wc += dc;
            }
        } else {
            let scale = cfg.down.scale();
            sampler.sample(&cfg.down, &mut streams.rng(i as u64, Role::Downlink, k), support);
            for &c in support.iter() {
                wi[c] += scale * delta[c];
            }
        }
        let (xi, vi) = (&mut st.xl[i], &mut st.v[i]);
        old.copy_from_slice(vi);
        let mut rng = streams.rng(i as u64, Role::GradNoise, k);
        for c in 0..d {
            xi[c] = keep * xi[c] + eta * wi[c];
            let grad = inst.batch_mean_coord(i, xi[c], c, cfg.b, noise, &mut rng);
            vi[c] = keep * vi[c] + eta * grad;
        }
        if up_full {
            continue;
        }
        if cfg.up.is_identity() {
            for ((gc, vc), oc) in st.g.iter_mut().zip(vi.iter()).zip(old.iter()) {
                *gc += inv_n * (vc - oc);
            }
        } else {
            let scale = cfg.up.scale();
            sampler.sample(&cfg.up, &mut streams.rng(i as u64, Role::Uplink, k), support);
            for &c in support.iter() {
                st.g[c] += inv_n * (scale * (vi[c] - old[c]));
            }
        }
    }
    if up_full {
        mean_into(&st.v, &mut st.g);
    }
    st.k += 1;
    (down_full, up_full)
}

pub(super) fn m4_step_info(
    cluster: &ClusterProfile,
    cfg: &M4Config,
    d: usize,
    down_full: bool,
    up_full: bool,
) -> StepInfo {
    let n = cluster.len() as u64;
    StepInfo {
        time: m4_iteration_time(
            cluster,
            cfg.b,
            cfg.up.keep(),
            cfg.down.keep(),
            down_full,
            up_full,
            d,
        ),
        up_coords: n * if up_full { d } else { cfg.up.keep() } as u64,
        down_coords: n * if down_full { d } else { cfg.down.keep() } as u64,
    }
}

/// One dense round; every worker state is materialized.
pub fn m4_step(
    st: &mut M4State,
    inst: &ProblemInstance,
    cluster: &ClusterProfile,
    noise: NoiseSpec,
    cfg: &M4Config,
    streams: &Streams,
) -> Result<StepInfo> {
    cfg.validate()?;
    if st.v.len() != cluster.len() || st.x.len() != inst.dim() || cfg.up.dim() != inst.dim() {
        return Err(Error::contract("state, config and instance dimensions disagree"));
    }
    let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
    let mut sampler = SupportSampler::new();
    let (df, uf) = advance(st, inst, noise, cfg, streams, &mut a, &mut b, &mut c, &mut sampler);
    Ok(m4_step_info(cluster, cfg, inst.dim(), df, uf))
}

pub(super) struct M4Engine<'a> {
    inst: &'a ProblemInstance,
    cluster: ClusterProfile,
    noise: NoiseSpec,
    cfg: M4Config,
    streams: Streams,
    state: M4State,
    delta: Vec<f64>,
    old: Vec<f64>,
    support: Vec<usize>,
    sampler: SupportSampler,
}

impl<'a> M4Engine<'a> {
    pub(super) fn new(
        inst: &'a ProblemInstance,
        cluster: &ClusterProfile,
        noise: NoiseSpec,
        cfg: &M4Config,
        streams: Streams,
    ) -> Result<Self> {
        cfg.validate()?;
        check_workers(inst, cluster)?;
        if cfg.up.dim() != inst.dim() {
            return Err(Error::contract("compressor dimension does not match the instance"));
        }
        Ok(Self {
            inst,
            cluster: cluster.clone(),
            noise,
            cfg: *cfg,
            state: m4_init(inst, cluster.len(), noise, cfg.b_init, &streams),
            streams,
            delta: Vec::new(),
            old: Vec::new(),
            support: Vec::new(),
            sampler: SupportSampler::new(),
        })
    }
}

impl Engine for M4Engine<'_> {
    fn server(&self) -> &[f64] {
        &self.state.x
    }

    fn step(&mut self) -> Result<StepInfo> {
        let (df, uf) = advance(
            &mut self.state,
            self.inst,
            self.noise,
            &self.cfg,
            &self.streams,
            &mut self.delta,
            &mut self.old,
            &mut self.support,
            &mut self.sampler,
        );
        Ok(m4_step_info(&self.cluster, &self.cfg, self.inst.dim(), df, uf))
    }
}

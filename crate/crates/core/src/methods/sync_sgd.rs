use serde::{Deserialize, Serialize};

use super::{check_workers, Engine, StepInfo};
use crate::error::{Error, Result};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::streams::{Role, Streams};
use crate::timemodel::{sync_sgd_iteration_time, ClusterProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    pub gamma: f64,
    /// Stochastic gradients per worker per round.
    pub b: u64,
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract("gamma must be finite and >= 0"));
        }
        if self.b == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncState {
    pub k: u64,
    pub x: Vec<f64>,
}

impl SyncState {
    pub fn new(x0: &[f64]) -> Self {
        Self { k: 0, x: x0.to_vec() }
    }
}

/// `x <- x - gamma * (1/n) sum_i (1/b) sum_r grad f_i(x; xi_ir)`.
///
/// Worker `i` draws its minibatch noise from the `(i, GradNoise, k)` stream,
/// coordinates in ascending order.
pub fn sync_sgd_step(
    state: &mut SyncState,
    inst: &ProblemInstance,
    n: usize,
    noise: NoiseSpec,
    cfg: &SyncConfig,
    streams: &Streams,
    g: &mut Vec<f64>,
) {
    let d = inst.dim();
    g.clear();
    g.resize(d, 0.0);
    let coef = (1.0 / n as f64) / (cfg.b as f64);
    for i in 0..n {
        let mut rng = streams.rng(i as u64, Role::GradNoise, state.k);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc += coef * inst.batch_sum_coord(i, state.x[c], c, cfg.b, noise, &mut rng);
        }
    }
    for (xc, gc) in state.x.iter_mut().zip(g.iter()) {
        *xc -= cfg.gamma * gc;
    }
    state.k += 1;
}

pub(super) struct SyncEngine<'a> {
    inst: &'a ProblemInstance,
    n: usize,
    noise: NoiseSpec,
    cfg: SyncConfig,
    streams: Streams,
    state: SyncState,
    g: Vec<f64>,
    round_time: f64,
}

impl<'a> SyncEngine<'a> {
    pub(super) fn new(
        inst: &'a ProblemInstance,
        cluster: &ClusterProfile,
        noise: NoiseSpec,
        cfg: &SyncConfig,
        streams: Streams,
    ) -> Result<Self> {
        cfg.validate()?;
        check_workers(inst, cluster)?;
        Ok(Self {
            inst,
            n: cluster.len(),
            noise,
            cfg: *cfg,
            streams,
            state: SyncState::new(inst.x0()),
            g: Vec::with_capacity(inst.dim()),
            round_time: sync_sgd_iteration_time(cluster, cfg.b, inst.dim()),
        })
    }
}

impl Engine for SyncEngine<'_> {
    fn server(&self) -> &[f64] {
        &self.state.x
    }

    fn step(&mut self) -> Result<StepInfo> {
        sync_sgd_step(
            &mut self.state,
            self.inst,
            self.n,
            self.noise,
            &self.cfg,
            &self.streams,
            &mut self.g,
        );
        let dense = (self.n * self.inst.dim()) as u64;
        Ok(StepInfo {
            time: self.round_time,
            up_coords: dense,
            down_coords: dense,
        })
    }
}

//! The optimizers as step engines over explicit state, plus the run driver
//! that couples them with the virtual clock and stopping rules.

mod inkheart;
mod m4;
mod m4_lazy;
mod sync_sgd;
mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use inkheart::{
    inkheart_estimate, inkheart_heter_step, inkheart_step, InkheartConfig, InkheartState,
};
pub use m4::{m4_init, m4_step, M4Config, M4State};
pub use m4_lazy::LazyM4;
pub use sync_sgd::{sync_sgd_step, SyncConfig, SyncState};
pub use trace::{RunStatus, RunTrace, TraceRow, CSV_HEADER};
pub(crate) use trace::fmt_f64;

use crate::error::{Error, Result};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::streams::Streams;
use crate::timemodel::{ClusterProfile, VirtualClock};

/// Any coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    SyncSgd,
    Inkheart,
    M4,
}

impl MethodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodKind::SyncSgd => "sync_sgd",
            MethodKind::Inkheart => "inkheart",
            MethodKind::M4 => "m4",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync_sgd" => Ok(MethodKind::SyncSgd),
            "inkheart" => Ok(MethodKind::Inkheart),
            "m4" => Ok(MethodKind::M4),
            other => Err(Error::contract(format!(
                "unknown method `{other}` (expected sync_sgd, inkheart or m4)"
            ))),
        }
    }
}

/// Resolved hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    SyncSgd(SyncConfig),
    Inkheart(InkheartConfig),
    M4(M4Config),
}

impl MethodConfig {
    pub fn kind(&self) -> MethodKind {
        match self {
            MethodConfig::SyncSgd(_) => MethodKind::SyncSgd,
            MethodConfig::Inkheart(_) => MethodKind::Inkheart,
            MethodConfig::M4(_) => MethodKind::M4,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            MethodConfig::SyncSgd(c) => c.gamma,
            MethodConfig::Inkheart(c) => c.gamma,
            MethodConfig::M4(c) => c.gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stopping {
    #[serde(default)]
    pub grad_norm_sq: Option<f64>,
    #[serde(default)]
    pub f_gap: Option<f64>,
    #[serde(default)]
    pub max_time: Option<f64>,
    #[serde(default)]
    pub max_iters: Option<u64>,
}

impl Stopping {
    pub fn validate(&self) -> Result<()> {
        if self.max_time.is_none() && self.max_iters.is_none() {
            return Err(Error::contract("stopping rule needs max_time or max_iters"));
        }
        for v in [self.grad_norm_sq, self.f_gap, self.max_time].into_iter().flatten() {
            if !(v >= 0.0) {
                return Err(Error::contract("stopping thresholds must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn reached(&self, grad_norm_sq: f64, f_gap: f64) -> bool {
        self.grad_norm_sq.is_some_and(|e| grad_norm_sq <= e) || self.f_gap.is_some_and(|e| f_gap <= e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M4Engine {
    /// Lazy engine whenever a compressor is sparse.
    #[default]
    Auto,
    Eager,
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Keep every `trace_every`-th row (plus the final one).
    pub trace_every: u64,
    /// Abandon the run once virtual time strictly exceeds this bound.
    pub time_bound: Option<f64>,
    pub m4_engine: M4Engine,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            trace_every: 1,
            time_bound: None,
            m4_engine: M4Engine::Auto,
        }
    }
}

/// What one round cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub time: f64,
    pub up_coords: u64,
    pub down_coords: u64,
}

trait Engine {
    fn server(&self) -> &[f64];
    fn step(&mut self) -> Result<StepInfo>;
}

pub(crate) fn check_workers(inst: &ProblemInstance, cluster: &ClusterProfile) -> Result<()> {
    let f = inst.worker_functions();
    if f != 1 && f != cluster.len() {
        return Err(Error::contract(format!(
            "instance has {f} worker functions but the cluster has {} workers",
            cluster.len()
        )));
    }
    Ok(())
}

/// Runs one method to the first satisfied stopping criterion.
pub fn run(
    config: &MethodConfig,
    inst: &ProblemInstance,
    cluster: &ClusterProfile,
    noise: NoiseSpec,
    stopping: &Stopping,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunTrace> {
    stopping.validate()?;
    check_workers(inst, cluster)?;
    if opts.trace_every == 0 {
        return Err(Error::contract("trace_every must be >= 1"));
    }
    let streams = Streams::new(seed);
    match config {
        MethodConfig::SyncSgd(c) => {
            let e = sync_sgd::SyncEngine::new(inst, cluster, noise, c, streams)?;
            drive(MethodKind::SyncSgd, e, inst, 0.0, stopping, opts)
        }
        MethodConfig::Inkheart(c) => {
            let e = inkheart::InkheartEngine::new(inst, cluster, noise, c, streams)?;
            drive(MethodKind::Inkheart, e, inst, 0.0, stopping, opts)
        }
        MethodConfig::M4(c) => {
            let lazy = match opts.m4_engine {
                M4Engine::Auto => !(c.up.is_identity() && c.down.is_identity()),
                M4Engine::Eager => false,
                M4Engine::Lazy => true,
            };
            let warm = crate::timemodel::m4_warm_start_time(cluster, c.b_init);
            if lazy {
                let e = LazyM4::new(inst, cluster, noise, c, streams)?;
                drive(MethodKind::M4, e, inst, warm, stopping, opts)
            } else {
                let e = m4::M4Engine::new(inst, cluster, noise, c, streams)?;
                drive(MethodKind::M4, e, inst, warm, stopping, opts)
            }
        }
    }
}

fn drive<E: Engine>(
    method: MethodKind,
    mut engine: E,
    inst: &ProblemInstance,
    start_time: f64,
    stopping: &Stopping,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let mut clock = VirtualClock::new();
    clock.advance(start_time);
    let mut trace = RunTrace::new(method);
    let (mut up, mut down) = (0u64, 0u64);
    let mut k = 0u64;
    loop {
        let (g2, gap, big) = inst.measure(engine.server());
        if !(big <= DIVERGENCE_LIMIT) || !g2.is_finite() {
            trace.status = RunStatus::Diverged;
            return Err(Error::Diverged {
                iteration: k,
                trace: Box::new(trace),
            });
        }
        let row = TraceRow {
            iter: k,
            time_s: clock.now(),
            grad_norm_sq: g2,
            f_gap: gap,
            up_coords: up,
            down_coords: down,
        };
        let status = if stopping.reached(g2, gap) {
            Some(RunStatus::Reached)
        } else if opts.time_bound.is_some_and(|b| row.time_s > b) {
            Some(RunStatus::Pruned)
        } else if stopping.max_time.is_some_and(|t| row.time_s >= t) {
            Some(RunStatus::TimeBudget)
        } else if stopping.max_iters.is_some_and(|m| k >= m) {
            Some(RunStatus::IterBudget)
        } else {
            None
        };
        if let Some(s) = status {
            trace.rows.push(row);
            trace.status = s;
            return Ok(trace);
        }
        if k.is_multiple_of(opts.trace_every) {
            trace.rows.push(row);
        }
        let info = engine.step()?;
        clock.advance(info.time);
        up += info.up_coords;
        down += info.down_coords;
        k += 1;
    }
}

//! Virtual clock for round-synchronous methods.
//!
//! Each iteration runs three phases one after another: compute, uplink,
//! downlink. Workers act in parallel inside a phase, so a phase lasts as long
//! as its slowest participant. Communication is billed per coordinate only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerProfile {
    /// Seconds per stochastic gradient.
    pub h: f64,
    /// Seconds per uplink coordinate.
    pub tau: f64,
    /// Seconds per downlink coordinate.
    pub kappa: f64,
}

impl WorkerProfile {
    pub fn new(h: f64, tau: f64, kappa: f64) -> Result<Self> {
        let w = Self { h, tau, kappa };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("h", self.h), ("tau", self.tau), ("kappa", self.kappa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// `M_i = max{h_i, tau_i, kappa_i}`.
    pub fn m(&self) -> f64 {
        self.h.max(self.tau).max(self.kappa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<WorkerProfile>", into = "Vec<WorkerProfile>")]
pub struct ClusterProfile {
    workers: Vec<WorkerProfile>,
}

impl TryFrom<Vec<WorkerProfile>> for ClusterProfile {
    type Error = Error;
    fn try_from(v: Vec<WorkerProfile>) -> Result<Self> {
        ClusterProfile::new(v)
    }
}

impl From<ClusterProfile> for Vec<WorkerProfile> {
    fn from(c: ClusterProfile) -> Self {
        c.workers
    }
}

impl ClusterProfile {
    pub fn new(workers: Vec<WorkerProfile>) -> Result<Self> {
        if workers.is_empty() {
            return Err(Error::contract("cluster needs at least one worker"));
        }
        for w in &workers {
            w.validate()?;
        }
        Ok(Self { workers })
    }

    pub fn homogeneous(n: usize, profile: WorkerProfile) -> Result<Self> {
        Self::new(vec![profile; n])
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn workers(&self) -> &[WorkerProfile] {
        &self.workers
    }

    pub fn worker(&self, i: usize) -> &WorkerProfile {
        &self.workers[i]
    }

    pub fn m_of(&self, i: usize) -> f64 {
        self.workers[i].m()
    }

    pub fn kappa_max(&self) -> f64 {
        self.workers.iter().map(|w| w.kappa).fold(0.0, f64::max)
    }

    pub fn tau_max(&self) -> f64 {
        self.workers.iter().map(|w| w.tau).fold(0.0, f64::max)
    }

    pub fn h_max(&self) -> f64 {
        self.workers.iter().map(|w| w.h).fold(0.0, f64::max)
    }

    pub fn is_homogeneous(&self) -> bool {
        self.workers.iter().all(|w| *w == self.workers[0])
    }

    /// Restriction to the given worker indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.workers.len()) {
            return Err(Error::contract("subset index out of range"));
        }
        Self::new(idx.iter().map(|&i| self.workers[i]).collect())
    }
}

/// Per-worker repetition counts of one Inkheart round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub b: u64,
    pub m: u64,
    pub l: u64,
}

/// Seconds for one Inkheart round.
///
/// `keep_up` / `keep_down` are the Rand-K sizes of a single uplink / downlink
/// message. A full broadcast waits for the slowest downlink: `d * kappa_max`.
pub fn inkheart_iteration_time(
    cluster: &ClusterProfile,
    counts: &[RoundCounts],
    broadcast_full: bool,
    d: usize,
    keep_up: usize,
    keep_down: usize,
) -> f64 {
    debug_assert_eq!(counts.len(), cluster.len());
    let up = cluster
        .workers()
        .iter()
        .zip(counts)
        .map(|(w, c)| c.b as f64 * w.h + (c.m * keep_up as u64) as f64 * w.tau)
        .fold(0.0, f64::max);
    let down = if broadcast_full {
        d as f64 * cluster.kappa_max()
    } else {
        cluster
            .workers()
            .iter()
            .zip(counts)
            .map(|(w, c)| (c.l * keep_down as u64) as f64 * w.kappa)
            .fold(0.0, f64::max)
    };
    up + down
}

/// Seconds for one synchronous SGD round: minibatch, dense upload, dense broadcast.
pub fn sync_sgd_iteration_time(cluster: &ClusterProfile, b: u64, d: usize) -> f64 {
    let up = cluster
        .workers()
        .iter()
        .map(|w| b as f64 * w.h + d as f64 * w.tau)
        .fold(0.0, f64::max);
    up + d as f64 * cluster.kappa_max()
}

/// Seconds for one M4 round given the outcome of both shared coins.
pub fn m4_iteration_time(
    cluster: &ClusterProfile,
    b: u64,
    keep_up: usize,
    keep_down: usize,
    down_full: bool,
    up_full: bool,
    d: usize,
) -> f64 {
    let compute = b as f64 * cluster.h_max();
    let down = if down_full { d } else { keep_down } as f64 * cluster.kappa_max();
    let up = if up_full { d } else { keep_up } as f64 * cluster.tau_max();
    compute + down + up
}

/// One-off cost of M4's warm-start minibatch.
pub fn m4_warm_start_time(cluster: &ClusterProfile, b_init: u64) -> f64 {
    b_init as f64 * cluster.h_max()
}

/// Expected Inkheart downlink time `p * d * kappa_max + (1 - p) * max_i l_i kappa_i`.
pub fn expected_broadcast_time(cluster: &ClusterProfile, ls: &[u64], p: f64, d: usize) -> f64 {
    let partial = cluster
        .workers()
        .iter()
        .zip(ls)
        .map(|(w, &l)| l as f64 * w.kappa)
        .fold(0.0, f64::max);
    p * d as f64 * cluster.kappa_max() + (1.0 - p) * partial
}

/// Neumaier-compensated accumulator for virtual time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VirtualClock {
    sum: f64,
    comp: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&mut self, dt: f64) {
        debug_assert!(dt >= 0.0);
        let t = self.sum + dt;
        if self.sum.abs() >= dt.abs() {
            self.comp += (self.sum - t) + dt;
        } else {
            self.comp += (dt - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn now(&self) -> f64 {
        self.sum + self.comp
    }
}

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::{M4Engine, MethodKind, Stopping};
use crate::problems::{make_block_quadratic, make_hetero_quadratic, NoiseSpec, ProblemInstance};
use crate::streams::StreamRng;
use crate::timemodel::{ClusterProfile, WorkerProfile};
use crate::tuner::{default_eta_grid, default_gamma_grid, TuneMode, DEFAULT_B_MAX, DEFAULT_KEEP_GRID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// One shared `diag(I, lambda I)` quadratic.
    BlockQuadratic { d: usize, lambda: f64 },
    /// Worker `i` holds `xi_i` times the block quadratic.
    HeteroQuadratic {
        d: usize,
        lambda: f64,
        scale_std: f64,
        seed: u64,
    },
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::BlockQuadratic { d, .. } | ProblemConfig::HeteroQuadratic { d, .. } => *d,
        }
    }

    pub fn build(&self, n: usize) -> Result<ProblemInstance> {
        match *self {
            ProblemConfig::BlockQuadratic { d, lambda } => make_block_quadratic(d, lambda),
            ProblemConfig::HeteroQuadratic {
                d,
                lambda,
                scale_std,
                seed,
            } => {
                let mut rng = StreamRng::seed_from_u64(seed);
                make_hetero_quadratic(d, lambda, scale_std, n, seed, &mut rng)
            }
        }
    }
}

/// Either `n` identical workers or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<Vec<WorkerProfile>>,
}

impl ClusterConfig {
    pub fn build(&self) -> Result<ClusterProfile> {
        let scalar = [self.n.is_some(), self.h.is_some(), self.tau.is_some(), self.kappa.is_some()];
        match &self.workers {
            Some(ws) => {
                if scalar.iter().any(|&s| s) {
                    return Err(Error::config("cluster", "give either `workers` or `n`, `h`, `tau`, `kappa`, not both"));
                }
                for (i, w) in ws.iter().enumerate() {
                    WorkerProfile::new(w.h, w.tau, w.kappa)
                        .map_err(|e| Error::config(format!("cluster.workers[{i}]"), e.to_string()))?;
                }
                ClusterProfile::new(ws.clone()).map_err(|e| Error::config("cluster.workers", e.to_string()))
            }
            None => {
                let (Some(n), Some(h), Some(tau), Some(kappa)) = (self.n, self.h, self.tau, self.kappa) else {
                    return Err(Error::config("cluster", "homogeneous cluster needs `n`, `h`, `tau` and `kappa`"));
                };
                if n == 0 {
                    return Err(Error::config("cluster.n", "must be >= 1"));
                }
                let w = WorkerProfile::new(h, tau, kappa).map_err(|e| Error::config("cluster", e.to_string()))?;
                ClusterProfile::homogeneous(n, w).map_err(|e| Error::config("cluster", e.to_string()))
            }
        }
    }
}

/// One method to evaluate: a theorem-tuned run or a grid sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: MethodKind,
    /// Output name; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub mode: TuneMode,
    #[serde(default)]
    pub gammas: Option<Vec<f64>>,
    /// Rand-K keep counts (Inkheart, M4).
    #[serde(default)]
    pub keeps: Option<Vec<usize>>,
    /// Momentum values (M4).
    #[serde(default)]
    pub etas: Option<Vec<f64>>,
    /// Minibatch per worker (SyncSGD).
    #[serde(default)]
    pub batch: Option<u64>,
    /// Warm-start minibatch (M4 grid mode).
    #[serde(default)]
    pub b_init: Option<u64>,
}

impl MethodEntry {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.as_str().to_string())
    }

    /// Step sizes in evaluation order; the default grid runs largest first.
    pub fn gamma_grid(&self) -> Vec<f64> {
        self.gammas.clone().unwrap_or_else(|| default_gamma_grid().into_iter().rev().collect())
    }

    /// Keep counts, defaulting to the standard grid restricted to `K <= d`.
    pub fn keep_grid(&self, d: usize) -> Vec<usize> {
        self.keeps
            .clone()
            .unwrap_or_else(|| DEFAULT_KEEP_GRID.iter().copied().filter(|&k| k <= d).collect())
    }

    pub fn eta_grid(&self) -> Vec<f64> {
        self.etas.clone().unwrap_or_else(default_eta_grid)
    }

    fn validate(&self, at: &str, d: usize) -> Result<()> {
        let field = |name: &str| format!("{at}.{name}");
        let reject = |present: bool, name: &str, why: &str| {
            if present {
                Err(Error::config(field(name), why.to_string()))
            } else {
                Ok(())
            }
        };
        if let Some(l) = &self.label {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::config(field("label"), "use ASCII letters, digits, `_` or `-`"));
            }
        }
        match self.mode {
            TuneMode::Theorem => {
                reject(self.method == MethodKind::SyncSgd, "mode", "sync_sgd has no theorem tuning; use grid")?;
                for (present, name) in [
                    (self.gammas.is_some(), "gammas"),
                    (self.keeps.is_some(), "keeps"),
                    (self.etas.is_some(), "etas"),
                    (self.batch.is_some(), "batch"),
                    (self.b_init.is_some(), "b_init"),
                ] {
                    reject(present, name, "not used in theorem mode")?;
                }
            }
            TuneMode::Grid => {
                let gs = self.gamma_grid();
                if gs.is_empty() || gs.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
                    return Err(Error::config(field("gammas"), "need a nonempty list of finite positive values"));
                }
                if has_duplicates(gs.iter().map(|g| g.to_bits())) {
                    return Err(Error::config(field("gammas"), "values must be distinct"));
                }
                let uses_keep = self.method != MethodKind::SyncSgd;
                reject(!uses_keep && self.keeps.is_some(), "keeps", "sync_sgd sends dense vectors")?;
                if uses_keep {
                    let ks = self.keep_grid(d);
                    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > d) {
                        return Err(Error::config(field("keeps"), format!("need a nonempty list within [1, {d}]")));
                    }
                    if has_duplicates(ks.iter().copied()) {
                        return Err(Error::config(field("keeps"), "values must be distinct"));
                    }
                }
                let is_m4 = self.method == MethodKind::M4;
                reject(!is_m4 && self.etas.is_some(), "etas", "only m4 has a momentum parameter")?;
                reject(!is_m4 && self.b_init.is_some(), "b_init", "only m4 has a warm start")?;
                if is_m4 {
                    let es = self.eta_grid();
                    if es.is_empty() || es.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
                        return Err(Error::config(field("etas"), "need a nonempty list within (0, 1]"));
                    }
                    if has_duplicates(es.iter().map(|e| e.to_bits())) {
                        return Err(Error::config(field("etas"), "values must be distinct"));
                    }
                    reject(self.b_init == Some(0), "b_init", "must be >= 1")?;
                }
                let is_sync = self.method == MethodKind::SyncSgd;
                reject(!is_sync && self.batch.is_some(), "batch", "only sync_sgd takes a batch here")?;
                reject(self.batch == Some(0), "batch", "must be >= 1")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutput {
    /// Every (cell, seed) run, including pruned and diverged ones.
    #[default]
    All,
    /// Only the runs of each method's winning cell.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub traces: TraceOutput,
    #[serde(default = "one")]
    pub trace_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            traces: TraceOutput::All,
            trace_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Cells evaluated between updates of the pruning bound.
    #[serde(default = "default_wave")]
    pub wave: usize,
    /// Stop a run once it can no longer beat the best cell so far.
    #[serde(default = "yes")]
    pub prune: bool,
    #[serde(default)]
    pub m4_engine: M4Engine,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            wave: default_wave(),
            prune: true,
            m4_engine: M4Engine::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub cluster: ClusterConfig,
    /// Per-coordinate standard deviation of the gradient noise.
    #[serde(default)]
    pub sigma: f64,
    pub methods: Vec<MethodEntry>,
    pub stopping: Stopping,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "one_usize")]
    pub parallelism: usize,
    /// Count used where a zero cost would make `t / cost` unbounded.
    #[serde(default = "default_b_max")]
    pub b_max: u64,
}

fn has_duplicates<T: Ord>(mut it: impl Iterator<Item = T>) -> bool {
    let mut seen = BTreeSet::new();
    it.any(|v| !seen.insert(v))
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn one() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_wave() -> usize {
    8
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_b_max() -> u64 {
    DEFAULT_B_MAX
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { sigma: self.sigma }
    }

    /// Checks everything a run would trip over, with field paths.
    pub fn validate(&self) -> Result<()> {
        let d = self.problem.dim();
        let cluster = self.cluster.build()?;
        self.problem.build(cluster.len()).map_err(|e| Error::config("problem", e.to_string()))?;
        NoiseSpec::new(self.sigma).map_err(|e| Error::config("sigma", e.to_string()))?;
        self.stopping.validate().map_err(|e| Error::config("stopping", e.to_string()))?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "need at least one method"));
        }
        let mut labels = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let at = format!("methods[{i}]");
            m.validate(&at, d)?;
            if m.mode == TuneMode::Theorem && self.stopping.grad_norm_sq.is_none() {
                return Err(Error::config(
                    "stopping.grad_norm_sq",
                    format!("{at} uses theorem mode, which needs the epsilon target"),
                ));
            }
            if !labels.insert(m.label()) {
                return Err(Error::config(format!("{at}.label"), format!("duplicate label `{}`", m.label())));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.output.trace_every == 0 {
            return Err(Error::config("output.trace_every", "must be >= 1"));
        }
        if self.search.wave == 0 {
            return Err(Error::config("search.wave", "must be >= 1"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism", "must be >= 1"));
        }
        if self.b_max == 0 {
            return Err(Error::config("b_max", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    ExperimentConfig::from_json(&text)
}

//! Cell enumeration and the pruned grid search.
//!
//! Cells are evaluated in fixed waves. Every run in a wave is given the same
//! time bound, derived from the best median of the earlier waves, so the
//! outcome never depends on thread scheduling. A pruned run can only have had
//! a time above the bound, which is too slow to move a winning median, so the
//! winner matches an exhaustive sweep.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, MethodEntry};
use crate::error::{Error, Result};
use crate::methods::{run, M4Engine, MethodConfig, MethodKind, RunOptions, RunStatus, RunTrace, Stopping, SyncConfig};
use crate::problems::{NoiseSpec, ProblemInstance};
use crate::timemodel::ClusterProfile;
use crate::tuner::{inkheart_grid_config, inkheart_tune, m4_grid_config, m4_tune, TheoryInputs, TuneMode, Tuned};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub gamma: f64,
    pub keep: Option<usize>,
    pub eta: Option<f64>,
    pub config: MethodConfig,
}

impl Cell {
    /// Smaller gamma first, then smaller K, then smaller eta.
    fn tie_order(&self, other: &Cell) -> Ordering {
        self.gamma
            .total_cmp(&other.gamma)
            .then(self.keep.cmp(&other.keep))
            .then(self.eta.unwrap_or(0.0).total_cmp(&other.eta.unwrap_or(0.0)))
            .then(self.index.cmp(&other.index))
    }
}

/// Everything a run needs besides its method config and seed.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub inst: ProblemInstance,
    pub cluster: ClusterProfile,
    pub noise: NoiseSpec,
    pub stopping: Stopping,
    pub seeds: Vec<u64>,
    pub trace_every: u64,
    pub m4_engine: M4Engine,
    pub prune: bool,
    pub wave: usize,
    pub parallelism: usize,
    pub b_max: u64,
}

impl RunContext {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let cluster = cfg.cluster.build()?;
        let inst = cfg.problem.build(cluster.len())?;
        Ok(Self {
            inst,
            cluster,
            noise: cfg.noise(),
            stopping: cfg.stopping,
            seeds: cfg.seeds.clone(),
            trace_every: cfg.output.trace_every,
            m4_engine: cfg.search.m4_engine,
            prune: cfg.search.prune,
            wave: cfg.search.wave,
            parallelism: cfg.parallelism,
            b_max: cfg.b_max,
        })
    }

    pub fn theory_inputs(&self) -> Result<TheoryInputs> {
        let epsilon = self
            .stopping
            .grad_norm_sq
            .ok_or_else(|| Error::config("stopping.grad_norm_sq", "theorem tuning needs the epsilon target"))?;
        let d = self.inst.dim();
        Ok(TheoryInputs {
            d,
            sigma_sq: self.noise.full_variance(d),
            epsilon,
            constants: self.inst.structure_constants(),
            b_max: self.b_max,
        })
    }

    /// Theorem-mode parameters for `method`.
    pub fn tune(&self, method: MethodKind) -> Result<Tuned> {
        let inp = self.theory_inputs()?;
        match method {
            MethodKind::Inkheart => inkheart_tune(&self.cluster, &inp),
            MethodKind::M4 => m4_tune(&self.cluster, &inp),
            MethodKind::SyncSgd => Err(Error::config("method", "sync_sgd has no theorem tuning")),
        }
    }
}

/// The cells of one method entry in evaluation order: K outermost, then eta,
/// then gamma, each in listed order. Order never changes the winner, but
/// listing likely winners first lets pruning cut the rest short.
pub fn enumerate_cells(entry: &MethodEntry, ctx: &RunContext) -> Result<Vec<Cell>> {
    let d = ctx.inst.dim();
    let n = ctx.cluster.len();
    if entry.mode == TuneMode::Theorem {
        let tuned = ctx.tune(entry.method)?;
        let gamma = tuned.config.gamma();
        let (keep, eta) = match &tuned.config {
            MethodConfig::Inkheart(c) => (Some(c.up.keep()), None),
            MethodConfig::M4(c) => (Some(c.up.keep()), Some(c.eta)),
            MethodConfig::SyncSgd(_) => (None, None),
        };
        return Ok(vec![Cell {
            index: 0,
            gamma,
            keep,
            eta,
            config: tuned.config,
        }]);
    }
    let gammas = entry.gamma_grid();
    let mut cells = Vec::new();
    let mut push = |gamma: f64, keep: Option<usize>, eta: Option<f64>, config: MethodConfig| {
        cells.push(Cell {
            index: cells.len(),
            gamma,
            keep,
            eta,
            config,
        })
    };
    match entry.method {
        MethodKind::SyncSgd => {
            let b = entry.batch.unwrap_or(1);
            for &gamma in &gammas {
                push(gamma, None, None, MethodConfig::SyncSgd(SyncConfig { gamma, b }));
            }
        }
        MethodKind::Inkheart => {
            for k in entry.keep_grid(d) {
                for &gamma in &gammas {
                    let c = inkheart_grid_config(gamma, k, n, d)?;
                    push(gamma, Some(k), None, MethodConfig::Inkheart(c));
                }
            }
        }
        MethodKind::M4 => {
            let b_init = entry.b_init.unwrap_or(1);
            for k in entry.keep_grid(d) {
                for eta in entry.eta_grid() {
                    for &gamma in &gammas {
                        let c = m4_grid_config(gamma, k, eta, d, b_init)?;
                        push(gamma, Some(k), Some(eta), MethodConfig::M4(c));
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub status: RunStatus,
    /// Virtual seconds to the target; infinite unless reached.
    pub time_s: f64,
    pub final_f_gap: f64,
    pub iters: u64,
    pub time_bound: Option<f64>,
    pub trace: RunTrace,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// One outcome per seed, in configured seed order.
    pub runs: Vec<RunOutcome>,
    pub median_time_s: f64,
    pub median_final_f_gap: f64,
}

impl CellResult {
    pub fn all_diverged(&self) -> bool {
        self.runs.iter().all(|r| r.status == RunStatus::Diverged)
    }

    /// Finite median time first, then (among unfinished cells) smaller final gap,
    /// then the tie order.
    fn better_than(&self, other: &CellResult) -> bool {
        let ord = self.median_time_s.total_cmp(&other.median_time_s).then_with(|| {
            if self.median_time_s.is_finite() {
                Ordering::Equal
            } else {
                self.median_final_f_gap.total_cmp(&other.median_final_f_gap)
            }
        });
        ord.then_with(|| self.cell.tie_order(&other.cell)) == Ordering::Less
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn run_one(ctx: &RunContext, config: &MethodConfig, seed: u64, time_bound: Option<f64>) -> Result<RunOutcome> {
    let opts = RunOptions {
        trace_every: ctx.trace_every,
        time_bound,
        m4_engine: ctx.m4_engine,
    };
    let trace = match run(config, &ctx.inst, &ctx.cluster, ctx.noise, &ctx.stopping, seed, &opts) {
        Ok(t) => t,
        Err(Error::Diverged { trace, .. }) => *trace,
        Err(e) => return Err(e),
    };
    let last = trace.last();
    let final_f_gap = match trace.status {
        RunStatus::Diverged => f64::INFINITY,
        _ => last.map_or(f64::INFINITY, |r| r.f_gap),
    };
    Ok(RunOutcome {
        seed,
        status: trace.status,
        time_s: trace.time_to_threshold().unwrap_or(f64::INFINITY),
        final_f_gap,
        iters: last.map_or(0, |r| r.iter),
        time_bound,
        trace,
    })
}

/// Every evaluated cell plus the winner, if any cell did not fully diverge.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub cells: Vec<CellResult>,
    pub best: Option<usize>,
}

impl SearchOutcome {
    pub fn best(&self) -> Option<&CellResult> {
        self.best.map(|i| &self.cells[i])
    }
}

/// Evaluates `cells` wave by wave. After each wave `on_wave` gets all results
/// so far, the index where the new wave starts and the current winner, which
/// lets callers write or drop traces instead of holding the whole sweep.
pub fn search<F>(cells: Vec<Cell>, ctx: &RunContext, mut on_wave: F) -> Result<SearchOutcome>
where
    F: FnMut(&mut [CellResult], usize, Option<usize>) -> Result<()>,
{
    if cells.is_empty() {
        return Err(Error::contract("grid is empty"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.parallelism)
        .build()
        .map_err(|e| Error::contract(e.to_string()))?;
    let seeds = &ctx.seeds;
    let mut results: Vec<CellResult> = Vec::with_capacity(cells.len());
    let mut best: Option<usize> = None;
    let mut cells = cells.into_iter().peekable();
    while cells.peek().is_some() {
        let wave: Vec<Cell> = cells.by_ref().take(ctx.wave).collect();
        // With an even seed count the median averages two runs, so a single
        // run may take up to twice the incumbent and still matter.
        let bound = best
            .map(|b| results[b].median_time_s)
            .filter(|t| ctx.prune && t.is_finite())
            .map(|t| if seeds.len().is_multiple_of(2) { 2.0 * t } else { t });
        let jobs: Vec<(usize, u64)> = (0..wave.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
        let outcomes: Vec<Result<RunOutcome>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(c, s)| run_one(ctx, &wave[c].config, s, bound))
                .collect()
        });
        let mut outcomes = outcomes.into_iter();
        let start = results.len();
        for cell in wave {
            let runs = outcomes.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?;
            let times: Vec<f64> = runs.iter().map(|r| r.time_s).collect();
            let gaps: Vec<f64> = runs.iter().map(|r| r.final_f_gap).collect();
            let res = CellResult {
                cell,
                median_time_s: median(&times),
                median_final_f_gap: median(&gaps),
                runs,
            };
            if !res.all_diverged() && best.is_none_or(|b| res.better_than(&results[b])) {
                best = Some(results.len());
            }
            results.push(res);
        }
        on_wave(&mut results, start, best)?;
    }
    Ok(SearchOutcome { cells: results, best })
}

/// Best cell of one configured method. Fails when every cell diverged.
pub fn grid_search(cfg: &ExperimentConfig, method: usize) -> Result<CellResult> {
    let entry = cfg
        .methods
        .get(method)
        .ok_or_else(|| Error::contract(format!("no method entry {method}")))?;
    let ctx = RunContext::from_config(cfg)?;
    let cells = enumerate_cells(entry, &ctx)?;
    let out = search(cells, &ctx, |_, _, _| Ok(()))?;
    match out.best {
        Some(b) => Ok(out.cells.into_iter().nth(b).expect("best index in range")),
        None => Err(Error::AllDiverged),
    }
}

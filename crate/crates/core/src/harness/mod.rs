//! Config loading, experiment orchestration and report files.
//!
//! Output layout under the output directory:
//!
//! ```text
//! resolved_config.json
//! cells.csv                              one row per (method, cell, seed)
//! summary.csv                            best cell per method
//! traces/<label>/cell0007_seed3.csv      trace rows
//! traces/<label>/cell0007_seed3.json     everything needed to re-run it
//! ```

mod config;
mod grid;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{
    load_config, ClusterConfig, ExperimentConfig, MethodEntry, OutputConfig, ProblemConfig, SearchConfig,
    TraceOutput,
};
pub use grid::{
    enumerate_cells, grid_search, median, run_one, search, Cell, CellResult, RunContext, RunOutcome,
    SearchOutcome,
};

use crate::error::{Error, Result};
use crate::methods::{fmt_f64, M4Engine, MethodConfig, MethodKind, RunStatus, Stopping};
use crate::problems::{InstanceRecord, NoiseSpec, StructureConstants};
use crate::selection::{select_optimal_subset, Selection, SelectionInputs};
use crate::timemodel::ClusterProfile;

pub const SUMMARY_HEADER: &str = "label,method,cell,gamma,keep,eta,seeds,reached,median_time_s,median_final_f_gap";
pub const CELLS_HEADER: &str = "label,method,cell,gamma,keep,eta,seed,status,time_s,final_f_gap,iters";

/// Per-method outcome of a sweep.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub label: String,
    pub method: MethodKind,
    /// Without trace rows; those live on disk.
    pub cells: Vec<CellResult>,
    pub best: Option<usize>,
}

impl MethodReport {
    pub fn best(&self) -> Option<&CellResult> {
        self.best.map(|i| &self.cells[i])
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub methods: Vec<MethodReport>,
}

impl ExperimentReport {
    /// True when some method had no cell that avoided divergence.
    pub fn any_all_diverged(&self) -> bool {
        self.methods.iter().any(|m| m.best.is_none())
    }

    pub fn method(&self, label: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.label == label)
    }
}

#[derive(Serialize)]
struct TraceMeta<'a> {
    label: &'a str,
    cell: usize,
    seed: u64,
    config: &'a MethodConfig,
    instance: InstanceRecord,
    cluster: &'a ClusterProfile,
    noise: NoiseSpec,
    stopping: &'a Stopping,
    trace_every: u64,
    time_bound: Option<f64>,
    m4_engine: M4Engine,
    constants: StructureConstants,
    status: RunStatus,
    time_to_threshold: Option<f64>,
}

fn trace_stem(dir: &Path, cell: usize, seed: u64) -> PathBuf {
    dir.join(format!("cell{cell:04}_seed{seed}"))
}

fn write_traces(dir: &Path, label: &str, res: &CellResult, ctx: &RunContext) -> Result<()> {
    for r in &res.runs {
        let stem = trace_stem(dir, res.cell.index, r.seed);
        let mut w = BufWriter::new(File::create(stem.with_extension("csv"))?);
        r.trace.write_csv(&mut w)?;
        w.flush()?;
        let meta = TraceMeta {
            label,
            cell: res.cell.index,
            seed: r.seed,
            config: &res.cell.config,
            instance: ctx.inst.record(),
            cluster: &ctx.cluster,
            noise: ctx.noise,
            stopping: &ctx.stopping,
            trace_every: ctx.trace_every,
            time_bound: r.time_bound,
            m4_engine: ctx.m4_engine,
            constants: ctx.inst.structure_constants(),
            status: r.status,
            time_to_threshold: r.time_s.is_finite().then_some(r.time_s),
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(stem.with_extension("json"), text)?;
    }
    Ok(())
}

fn drop_rows(res: &mut CellResult) {
    for r in &mut res.runs {
        r.trace.rows = Vec::new();
    }
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|k| k.to_string()).unwrap_or_default()
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|e| e.to_string()).unwrap_or_default()
}

fn write_cells_csv(path: &Path, methods: &[MethodReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CELLS_HEADER}")?;
    for m in methods {
        for c in &m.cells {
            for r in &c.runs {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    m.label,
                    m.method,
                    c.cell.index,
                    c.cell.gamma,
                    opt_usize(c.cell.keep),
                    opt_f64(c.cell.eta),
                    r.seed,
                    r.status.as_str(),
                    fmt_f64(r.time_s),
                    fmt_f64(r.final_f_gap),
                    r.iters
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv(path: &Path, methods: &[MethodReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for m in methods {
        match m.best() {
            Some(c) => {
                let reached = c.runs.iter().filter(|r| r.status == RunStatus::Reached).count();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    m.label,
                    m.method,
                    c.cell.index,
                    c.cell.gamma,
                    opt_usize(c.cell.keep),
                    opt_f64(c.cell.eta),
                    c.runs.len(),
                    reached,
                    fmt_f64(c.median_time_s),
                    fmt_f64(c.median_final_f_gap)
                )?;
            }
            None => writeln!(w, "{},{},,,,,,0,{},{}", m.label, m.method, fmt_f64(f64::INFINITY), fmt_f64(f64::INFINITY))?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured method and writes the report files. Diverging cells
/// are recorded, never fatal; check [`ExperimentReport::any_all_diverged`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ctx = RunContext::from_config(cfg)?;
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out)?;
    let mut resolved = serde_json::to_string_pretty(cfg)?;
    resolved.push('\n');
    fs::write(out.join("resolved_config.json"), resolved)?;

    let mut reports = Vec::new();
    for entry in &cfg.methods {
        let label = entry.label();
        let dir = out.join("traces").join(&label);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let cells = enumerate_cells(entry, &ctx)?;
        let all = cfg.output.traces == TraceOutput::All;
        let mut kept_best: Option<usize> = None;
        let outcome = search(cells, &ctx, |results, start, best| {
            if all {
                for res in &mut results[start..] {
                    write_traces(&dir, &label, res, &ctx)?;
                    drop_rows(res);
                }
            } else if best != kept_best {
                for (i, res) in results.iter_mut().enumerate() {
                    if Some(i) != best {
                        drop_rows(res);
                    }
                }
                kept_best = best;
            } else {
                for res in &mut results[start..] {
                    drop_rows(res);
                }
            }
            Ok(())
        })?;
        let mut cells = outcome.cells;
        if !all {
            if let Some(b) = outcome.best {
                write_traces(&dir, &label, &cells[b], &ctx)?;
                drop_rows(&mut cells[b]);
            }
        }
        reports.push(MethodReport {
            label,
            method: entry.method,
            cells,
            best: outcome.best,
        });
    }
    write_cells_csv(&out.join("cells.csv"), &reports)?;
    write_summary_csv(&out.join("summary.csv"), &reports)?;
    Ok(ExperimentReport {
        out_dir: out,
        methods: reports,
    })
}

/// Worker selection for a configured cluster, using Rand-1 compressors both
/// ways as in the theorem-mode Inkheart parameters.
pub fn select_workers(cfg: &ExperimentConfig) -> Result<Selection> {
    let ctx = RunContext::from_config(cfg)?;
    let inp = ctx.theory_inputs()?;
    let omega = (inp.d - 1) as f64;
    let sel = SelectionInputs {
        d: inp.d,
        omega,
        omega_s: omega,
        sigma_sq: inp.sigma_sq,
        epsilon: inp.epsilon,
        l_max: inp.constants.l_max,
        l_a: inp.constants.l_a,
    };
    select_optimal_subset(&ctx.cluster, &sel)
}

pub fn write_selection_csv<W: Write>(sel: &Selection, mut w: W) -> Result<()> {
    let join = |s: &[usize]| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(w, "chosen,{}", join(&sel.best.subset))?;
    writeln!(w, "subset,t,s_star,objective")?;
    for c in &sel.candidates {
        writeln!(
            w,
            "{},{},{},{}",
            join(&c.subset),
            fmt_f64(c.t),
            fmt_f64(c.s_star),
            fmt_f64(c.objective)
        )?;
    }
    Ok(())
}

/// Parses a `--method` argument.
pub fn method_kind(name: &str) -> Result<MethodKind> {
    name.parse().map_err(|e: Error| Error::config("--method", e.to_string()))
}

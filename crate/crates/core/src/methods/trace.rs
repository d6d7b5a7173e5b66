use std::io::Write;

use serde::{Deserialize, Serialize};

use super::MethodKind;

pub const CSV_HEADER: &str = "iter,time_s,grad_norm_sq,f_gap,up_coords,down_coords";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub time_s: f64,
    pub grad_norm_sq: f64,
    pub f_gap: f64,
    /// Cumulative uplink coordinates over all workers.
    pub up_coords: u64,
    /// Cumulative downlink coordinates over all workers.
    pub down_coords: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Reached,
    TimeBudget,
    IterBudget,
    /// Stopped early because the run could no longer beat a known time.
    Pruned,
    Diverged,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Reached => "reached",
            RunStatus::TimeBudget => "time_budget",
            RunStatus::IterBudget => "iter_budget",
            RunStatus::Pruned => "pruned",
            RunStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub method: MethodKind,
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
}

/// 17 significant digits, round-trips every f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunTrace {
    pub fn new(method: MethodKind) -> Self {
        Self {
            method,
            rows: Vec::new(),
            status: RunStatus::Running,
        }
    }

    /// Virtual time of the first row that met the target, if any.
    pub fn time_to_threshold(&self) -> Option<f64> {
        (self.status == RunStatus::Reached).then(|| self.rows.last().map(|r| r.time_s)).flatten()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter,
                fmt_f64(r.time_s),
                fmt_f64(r.grad_norm_sq),
                fmt_f64(r.f_gap),
                r.up_coords,
                r.down_coords
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = RunTrace::new(MethodKind::M4);
        t.rows.push(TraceRow {
            iter: 0,
            time_s: 0.1,
            grad_norm_sq: 1.0 / 3.0,
            f_gap: 0.0,
            up_coords: 5,
            down_coords: 7,
        });
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1);
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[5], "7");
    }
}

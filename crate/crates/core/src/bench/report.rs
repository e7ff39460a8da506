use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BenchConfig, Mode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(OutputFormat::Text),
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown output format {other:?} (expected text, csv or json)")),
        }
    }
}

pub const CSV_HEADER: &str = "mode,locales,tasks,ops,elapsed_s,ops_per_s,remote_dispatches,local_ops";

/// Result of one timed phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub locales: usize,
    pub tasks: usize,
    pub ops: u64,
    pub elapsed_s: f64,
    pub ops_per_s: f64,
    pub remote_dispatches: u64,
    /// Operations whose key the issuing locale owned.
    pub local_ops: u64,
    /// Objects handed to the epoch manager so far.
    pub retired: u64,
    pub reclaimed: u64,
    /// Operations issued (or elements visited) per locale.
    pub per_locale_ops: Vec<u64>,
    /// Node-local routine executions per locale during the phase.
    pub per_locale_executed: Vec<u64>,
}

impl BenchReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        mode: Mode,
        cfg: &BenchConfig,
        ops: u64,
        elapsed_s: f64,
        remote_dispatches: u64,
        local_ops: u64,
        per_locale_ops: Vec<u64>,
        per_locale_executed: Vec<u64>,
        (retired, reclaimed): (u64, u64),
    ) -> Self {
        BenchReport {
            mode,
            locales: cfg.locales,
            tasks: cfg.tasks,
            ops,
            elapsed_s,
            ops_per_s: if elapsed_s > 0.0 { ops as f64 / elapsed_s } else { 0.0 },
            remote_dispatches,
            local_ops,
            retired,
            reclaimed,
            per_locale_ops,
            per_locale_executed,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.1},{},{}",
            self.mode,
            self.locales,
            self.tasks,
            self.ops,
            self.elapsed_s,
            self.ops_per_s,
            self.remote_dispatches,
            self.local_ops
        )
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} locales x {} tasks, {} ops in {:.3} s",
            self.mode, self.locales, self.tasks, self.ops, self.elapsed_s
        )?;
        writeln!(f, "  {:.0} operations/sec", self.ops_per_s)?;
        writeln!(
            f,
            "  remote dispatches {}, local ops {}",
            self.remote_dispatches, self.local_ops
        )?;
        write!(f, "  retired {}, reclaimed {}", self.retired, self.reclaimed)
    }
}

/// Renders `reports` in `format`, newline-terminated.
pub fn render(reports: &[BenchReport], format: OutputFormat) -> String {
    match format {
        OutputFormat::Text => reports.iter().map(|r| format!("{r}\n")).collect(),
        OutputFormat::Csv => {
            let mut out = format!("{CSV_HEADER}\n");
            for r in reports {
                out.push_str(&r.csv_row());
                out.push('\n');
            }
            out
        }
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            s
        }
    }
}

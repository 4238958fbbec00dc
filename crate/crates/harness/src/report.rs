//! Results tables: CSV with a fixed column schema and a plain-text table
//! with one row per policy and one column per task.

use std::fmt::Write as _;
use std::path::Path;

use tfdp_core::genmodel::SamplerKind;
use tfdp_core::policy::VariantKind;
use tfdp_core::simenv::TaskName;

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: &str = "task,variant,sampler,trials,successes,success_rate,mean_stages,latency_ms,params";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: TaskName,
    pub variant: VariantKind,
    pub sampler: SamplerKind,
    pub trials: usize,
    pub successes: usize,
    pub mean_stages: f64,
    /// Written as `NA` when absent; wall-clock numbers would make
    /// reruns differ.
    pub latency_ms: Option<f64>,
    pub params: usize,
}

impl ResultRow {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    fn key(&self) -> (TaskName, VariantKind, SamplerKind) {
        (self.task, self.variant, self.sampler)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a row; `(task, variant, sampler)` must be new and the counts
    /// consistent.
    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if row.trials == 0 || row.successes > row.trials {
            return Err(HarnessError::Data(format!("{} successes out of {} trials", row.successes, row.trials)));
        }
        if self.get(row.task, row.variant, row.sampler).is_some() {
            return Err(HarnessError::Data(format!("duplicate row {} {} {}", row.task, row.variant.as_str(), row.sampler)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn get(&self, task: TaskName, variant: VariantKind, sampler: SamplerKind) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.key() == (task, variant, sampler))
    }

    pub fn rate(&self, task: TaskName, variant: VariantKind, sampler: SamplerKind) -> Option<f64> {
        self.get(task, variant, sampler).map(ResultRow::success_rate)
    }

    /// Rows sorted by task, variant and sampler in their declaration order.
    pub fn sorted(&self) -> Vec<&ResultRow> {
        let mut rows: Vec<&ResultRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (task_rank(r.task), r.variant, r.sampler));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.sorted() {
            let latency = r.latency_ms.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.task,
                r.variant.as_str(),
                r.sampler,
                r.trials,
                r.successes,
                r.success_rate(),
                r.mean_stages,
                latency,
                r.params
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(HarnessError::Data(format!("results file must start with {CSV_HEADER:?}")));
        }
        let mut table = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| HarnessError::Data(format!("results line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("column count"));
            }
            let row = ResultRow {
                task: TaskName::parse(f[0]).map_err(|_| bad("task"))?,
                variant: f[1].parse().map_err(|_| bad("variant"))?,
                sampler: f[2].parse().map_err(|_| bad("sampler"))?,
                trials: f[3].parse().map_err(|_| bad("trials"))?,
                successes: f[4].parse().map_err(|_| bad("successes"))?,
                mean_stages: f[6].parse().map_err(|_| bad("mean_stages"))?,
                latency_ms: match f[7] {
                    "NA" => None,
                    v => Some(v.parse().map_err(|_| bad("latency_ms"))?),
                },
                params: f[8].parse().map_err(|_| bad("params"))?,
            };
            let rate: f64 = f[5].parse().map_err(|_| bad("success_rate"))?;
            if rate != row.success_rate() {
                return Err(bad("success_rate"));
            }
            table.push(row)?;
        }
        Ok(table)
    }

    /// Success rates in percent: one row per (variant, sampler) in the
    /// DP, DP-HistAct, TF-DP (trace), TF-DP order, one column per task and
    /// the average over tasks last.
    pub fn to_text(&self, title: &str) -> String {
        let mut tasks: Vec<TaskName> = Vec::new();
        let mut policies: Vec<(VariantKind, SamplerKind)> = Vec::new();
        for r in self.sorted() {
            if !tasks.contains(&r.task) {
                tasks.push(r.task);
            }
            if !policies.contains(&(r.variant, r.sampler)) {
                policies.push((r.variant, r.sampler));
            }
        }
        policies.sort();
        let samplers_differ = policies.iter().any(|p| p.1 != policies[0].1);
        let label = |(v, s): (VariantKind, SamplerKind)| {
            if samplers_differ {
                format!("{} [{}]", v.label(), s)
            } else {
                v.label().to_string()
            }
        };
        let first = policies.iter().map(|&p| label(p).len()).chain([6]).max().unwrap_or(6);
        let widths: Vec<usize> = tasks.iter().map(|t| t.as_str().len().max(7)).collect();
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = write!(s, "{:<first$}", "Method");
        for (t, w) in tasks.iter().zip(&widths) {
            let _ = write!(s, "  {:>w$}", t.as_str());
        }
        let _ = writeln!(s, "  {:>7}", "Average");
        for &p in &policies {
            let _ = write!(s, "{:<first$}", label(p));
            let mut sum = 0.0;
            let mut n = 0;
            for (&t, w) in tasks.iter().zip(&widths) {
                match self.rate(t, p.0, p.1) {
                    Some(r) => {
                        sum += r;
                        n += 1;
                        let _ = write!(s, "  {:>w$}", percent(r));
                    }
                    None => {
                        let _ = write!(s, "  {:>w$}", "-");
                    }
                }
            }
            let avg = if n == 0 { "-".to_string() } else { percent(sum / n as f64) };
            let _ = writeln!(s, "  {avg:>7}");
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str, title: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(HarnessError::file(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(HarnessError::file(&csv))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text(title)).map_err(HarnessError::file(&txt))?;
        Ok(())
    }
}

/// `0.5` → `"50.00"`.
pub fn percent(rate: f64) -> String {
    format!("{:.2}", 100.0 * rate)
}

fn task_rank(t: TaskName) -> usize {
    TaskName::ALL.iter().position(|&x| x == t).unwrap_or(usize::MAX)
}

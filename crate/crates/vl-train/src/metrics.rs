//! Append-only run metrics: one row per step (or evaluation), fixed header.
//!
//! Wall-clock time is tracked in memory for reporting but deliberately kept
//! out of the file so identical (config, seed) runs produce byte-identical
//! metrics files.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, TrainError};

pub const METRICS_HEADER: &str = "step,split,loss_mlm,loss_itm,loss_total,accuracy,lrs";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: &'static str,
    pub loss_mlm: Option<f64>,
    pub loss_itm: Option<f64>,
    pub loss_total: f64,
    pub accuracy: Option<f64>,
    /// (group name, learning rate) pairs at this step.
    pub lrs: Vec<(String, f64)>,
    /// Seconds since run start; not serialized.
    pub wall_secs: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let lrs = self
            .lrs
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.split,
            fmt_opt(self.loss_mlm),
            fmt_opt(self.loss_itm),
            self.loss_total,
            fmt_opt(self.accuracy),
            lrs
        )
    }
}

pub struct MetricsWriter {
    out: Option<std::io::BufWriter<std::fs::File>>,
    path: String,
    last_step: Option<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsWriter {
    /// Writes to `path` when given; always collects rows in memory.
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let (out, path_str) = match path {
            Some(p) => {
                let file = std::fs::File::create(p).map_err(|e| TrainError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                let mut w = std::io::BufWriter::new(file);
                writeln!(w, "{METRICS_HEADER}").map_err(|e| TrainError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                (Some(w), p.display().to_string())
            }
            None => (None, String::new()),
        };
        Ok(MetricsWriter { out, path: path_str, last_step: None, rows: Vec::new() })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if row.split == "train" {
            if let Some(last) = self.last_step {
                if row.step <= last {
                    return Err(TrainError::Config(format!(
                        "metrics steps must strictly increase ({last} then {})",
                        row.step
                    )));
                }
            }
            self.last_step = Some(row.step);
        }
        if let Some(out) = &mut self.out {
            writeln!(out, "{}", row.to_line()).map_err(|e| TrainError::Io {
                path: self.path.clone(),
                source: e,
            })?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<MetricsRow>> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| TrainError::Io { path: self.path.clone(), source: e })?;
        }
        Ok(self.rows)
    }
}

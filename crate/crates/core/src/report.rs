//! CSV files written by a run and the parsers that read them back.
//!
//! Floats use `{:.16e}`, which round-trips every `f64` exactly, so the
//! files of two identical runs compare byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{mean_present, MiouReport};
use crate::pipeline::{IterRow, RunReport};

pub const ROWS_HEADER: &str = "iter,lr,task,kd,hakd,total,distill_grad_norm";

/// Per-iteration loss log.
pub fn rows_csv(rows: &[IterRow]) -> String {
    let mut s = format!("{ROWS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.lr, r.task, r.kd, r.hakd, r.total, r.distill_grad_norm
        );
    }
    s
}

fn bad(what: &str, line: usize) -> Error {
    Error::Format(format!("{what} on line {}", line + 1))
}

pub fn parse_rows_csv(text: &str) -> Result<Vec<IterRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ROWS_HEADER) {
        return Err(Error::Format("loss log header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields", i + 1));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("malformed number", i + 1));
            Ok(IterRow {
                iter: f[0].parse().map_err(|_| bad("malformed iteration", i + 1))?,
                lr: num(1)?,
                task: num(2)?,
                kd: num(3)?,
                hakd: num(4)?,
                total: num(5)?,
                distill_grad_norm: num(6)?,
            })
        })
        .collect()
}

/// `class,iou` with an empty cell for classes that are absent.
pub fn per_class_csv(report: &MiouReport) -> String {
    let mut s = String::from("class,iou\n");
    for (c, v) in report.per_class.iter().enumerate() {
        match v {
            Some(v) => {
                let _ = writeln!(s, "{c},{v:.16e}");
            }
            None => {
                let _ = writeln!(s, "{c},");
            }
        }
    }
    s
}

pub fn parse_per_class_csv(text: &str) -> Result<MiouReport> {
    let mut lines = text.lines();
    if lines.next() != Some("class,iou") {
        return Err(Error::Format("per-class header mismatch".into()));
    }
    let mut per_class = Vec::new();
    for (i, line) in lines.enumerate() {
        let (class, iou) = line.split_once(',').ok_or_else(|| bad("expected 2 fields", i + 1))?;
        if class.parse::<usize>().ok() != Some(per_class.len()) {
            return Err(bad("classes must be listed in order", i + 1));
        }
        per_class.push(if iou.is_empty() {
            None
        } else {
            Some(iou.parse::<f64>().map_err(|_| bad("malformed IoU", i + 1))?)
        });
    }
    Ok(MiouReport {
        miou: mean_present(&per_class),
        per_class,
    })
}

/// Summary of one run: seed, mIoU and per-class IoUs as `key,value` pairs.
pub fn summary_csv(report: &RunReport) -> String {
    let mut s = String::from("key,value\n");
    let _ = writeln!(s, "seed,{}", report.seed);
    let _ = writeln!(s, "iterations,{}", report.rows.len());
    let _ = writeln!(s, "miou,{:.16e}", report.eval.miou);
    for (c, v) in report.eval.per_class.iter().enumerate() {
        match v {
            Some(v) => {
                let _ = writeln!(s, "iou_{c},{v:.16e}");
            }
            None => {
                let _ = writeln!(s, "iou_{c},");
            }
        }
    }
    s
}

/// Writes `run_report.csv` (loss log), `run_summary.csv`, `per_class.csv`
/// and `timing.txt` into `dir`. Wall-clock time lives only in the last
/// one.
pub fn write_run_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run_report.csv"), rows_csv(&report.rows))?;
    std::fs::write(dir.join("run_summary.csv"), summary_csv(report))?;
    std::fs::write(dir.join("per_class.csv"), per_class_csv(&report.eval))?;
    std::fs::write(dir.join("timing.txt"), format!("wall_clock_secs {:.3}\n", report.wall_clock_secs))?;
    Ok(())
}

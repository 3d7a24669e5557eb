//! One-axis configuration sweeps: each value trains and evaluates in its own
//! output directory, and the arms are summarized in a comparison table.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HatError, Result};
use crate::training::{train, TrainOptions};

/// A configuration to run, named by the value it sets.
#[derive(Debug, Clone)]
pub struct SweepArm {
    pub value: String,
    pub config: RunConfig,
}

/// Sets `axis` to each value on top of `base`. Every arm is validated before
/// anything runs; all problems are reported together.
pub fn plan_sweep<S: AsRef<str>>(base: &RunConfig, axis: &str, values: &[S]) -> Result<Vec<SweepArm>> {
    if values.is_empty() {
        return Err(HatError::Config(format!("sweep over {axis}: no values given")));
    }
    let mut arms = Vec::with_capacity(values.len());
    let mut errs = Vec::new();
    for v in values {
        let v = v.as_ref().trim();
        let mut cfg = base.clone();
        if let Err(e) = cfg.set(axis, v) {
            errs.push(format!("{axis}={v}: {e}"));
            continue;
        }
        errs.extend(cfg.validate().into_iter().map(|e| format!("{axis}={v}: {e}")));
        arms.push(SweepArm {
            value: v.to_string(),
            config: cfg,
        });
    }
    if errs.is_empty() {
        Ok(arms)
    } else {
        Err(HatError::Config(errs.join("\n")))
    }
}

/// Directory name of arm `i`, safe on any filesystem.
pub fn arm_dir_name(i: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:02}_{clean}")
}

/// Summary of one trained and evaluated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub num_valid_queries: usize,
    pub config_hash: String,
    pub output_dir: PathBuf,
}

fn run_arm(axis: &str, i: usize, arm: &SweepArm, out_dir: &Path) -> Result<SweepRow> {
    let dir = out_dir.join(arm_dir_name(i, &arm.value));
    log::info!("sweep arm {axis}={} -> {}", arm.value, dir.display());
    let outcome = train(&arm.config, &dir, &TrainOptions::default())?;
    let eval = outcome.eval.as_ref();
    Ok(SweepRow {
        axis: axis.to_string(),
        value: arm.value.clone(),
        epochs: outcome.last_epoch,
        final_loss: outcome.epoch_reports.last().map_or(f64::NAN, |r| r.total),
        map: eval.map(|e| e.map),
        rank1: eval.map(|e| e.rank(1)),
        rank5: eval.map(|e| e.rank(5)),
        rank10: eval.map(|e| e.rank(10)),
        num_valid_queries: eval.map_or(0, |e| e.num_valid_queries),
        config_hash: outcome.config_hash,
        output_dir: dir,
    })
}

/// Runs every arm, `jobs` at a time, each under its own directory of
/// `out_dir`. Rows come back in arm order.
pub fn run_sweep(axis: &str, arms: &[SweepArm], out_dir: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    let jobs = jobs.clamp(1, arms.len().max(1));
    if jobs == 1 {
        return arms
            .iter()
            .enumerate()
            .map(|(i, arm)| run_arm(axis, i, arm, out_dir))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..arms.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(arm) = arms.get(i) else { break };
                let r = run_arm(axis, i, arm, out_dir);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every arm ran"))
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Fixed-width comparison table, one row per arm.
pub fn format_table(rows: &[SweepRow]) -> String {
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let header = [axis, "epochs", "final loss", "mAP (%)", "Rank-1 (%)", "Rank-5 (%)", "Rank-10 (%)"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.value.clone(),
                r.epochs.to_string(),
                format!("{:.4}", r.final_loss),
                pct(r.map),
                pct(r.rank1),
                pct(r.rank5),
                pct(r.rank10),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec()) + "\n";
    out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ");
    out += "\n";
    for row in &body {
        out += &line(row.iter().map(String::as_str).collect());
        out += "\n";
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.source = "synth://4/4/0".into();
        c
    }

    #[test]
    fn empty_values_are_rejected() {
        let none: [&str; 0] = [];
        assert!(matches!(plan_sweep(&base(), "loss.lambda", &none), Err(HatError::Config(_))));
    }

    #[test]
    fn every_bad_arm_is_reported_before_running() {
        let err = plan_sweep(&base(), "backbone.scaling_divisor", &["16", "7", "64"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scaling_divisor=7"));
        assert!(msg.contains("scaling_divisor=64"));
        let arms = plan_sweep(&base(), "loss.lambda", &["0", "0.5"]).unwrap();
        assert_eq!(arms[0].config.loss.lambda, 0.0);
        assert_eq!(arms[1].config.loss.lambda, 0.5);
    }

    #[test]
    fn table_has_a_row_per_arm() {
        let row = |v: &str| SweepRow {
            axis: "loss.lambda".into(),
            value: v.into(),
            epochs: 2,
            final_loss: 1.5,
            map: Some(0.5),
            rank1: Some(1.0),
            rank5: Some(1.0),
            rank10: None,
            num_valid_queries: 4,
            config_hash: "h".into(),
            output_dir: PathBuf::new(),
        };
        let t = format_table(&[row("0"), row("0.5")]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("loss.lambda"));
        assert!(lines[2].contains("50.00") && lines[2].contains("100.00"));
        assert!(lines[3].starts_with("0.5"));
        assert_eq!(arm_dir_name(3, "3,3,6,0"), "03_3_3_6_0");
    }
}

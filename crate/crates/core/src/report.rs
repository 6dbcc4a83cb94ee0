//! Run reports: parameter counts, compression ratio, mAP, loss curves, and
//! the fine-tuning timing comparison.
//!
//! The report is split across two files. `report.json` holds everything that
//! is a pure function of the seed and config — byte-identical across
//! repeated runs. Wall-clock epoch times are inherently run-dependent, so
//! they go to `timing.json` alongside the derived speedup ratio.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{invalid_arg, Error, Result};
use crate::eval::EvalReport;
use crate::pipeline::TrainHistory;

/// Deterministic portion of a run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub params_full: usize,
    pub params_reduced: usize,
    /// params_reduced / params_full (trainable counts).
    pub compression_ratio: f64,
    pub map_full: f64,
    pub map_reduced: f64,
    pub eval_full: EvalReport,
    pub eval_reduced: EvalReport,
    pub train_loss_full: Vec<f64>,
    pub train_loss_reduced: Vec<f64>,
    pub config: RunConfig,
}

/// Wall-clock portion of a run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub epoch_times_full_s: Vec<f64>,
    pub epoch_times_reduced_s: Vec<f64>,
    pub mean_epoch_full_s: f64,
    pub mean_epoch_reduced_s: f64,
    /// mean full epoch time / mean reduced epoch time.
    pub speedup_ratio: f64,
}

pub fn build_report(
    params_full: usize,
    params_reduced: usize,
    eval_full: EvalReport,
    eval_reduced: EvalReport,
    full_history: &TrainHistory,
    reduced_history: &TrainHistory,
    config: RunConfig,
) -> Result<(RunReport, TimingReport)> {
    if params_full == 0 {
        return Err(invalid_arg!("full detector reports zero trainable parameters"));
    }
    let mean = |xs: &[f64]| -> f64 {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let mean_full = mean(&full_history.epoch_times_s);
    let mean_reduced = mean(&reduced_history.epoch_times_s);
    let report = RunReport {
        params_full,
        params_reduced,
        compression_ratio: params_reduced as f64 / params_full as f64,
        map_full: eval_full.mean_ap,
        map_reduced: eval_reduced.mean_ap,
        eval_full,
        eval_reduced,
        train_loss_full: full_history.epoch_losses.clone(),
        train_loss_reduced: reduced_history.epoch_losses.clone(),
        config,
    };
    let timing = TimingReport {
        epoch_times_full_s: full_history.epoch_times_s.clone(),
        epoch_times_reduced_s: reduced_history.epoch_times_s.clone(),
        mean_epoch_full_s: mean_full,
        mean_epoch_reduced_s: mean_reduced,
        speedup_ratio: if mean_reduced > 0.0 { mean_full / mean_reduced } else { f64::NAN },
    };
    Ok((report, timing))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad report: {e}", path.display())))
}

pub fn load_timing(path: &Path) -> Result<TimingReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad timing report: {e}", path.display())))
}

/// Flat key,value CSV covering both report parts.
pub fn write_report_csv(
    report: &RunReport,
    timing: Option<&TimingReport>,
    path: &Path,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "key,value")?;
    writeln!(f, "params_full,{}", report.params_full)?;
    writeln!(f, "params_reduced,{}", report.params_reduced)?;
    writeln!(f, "compression_ratio,{:.6}", report.compression_ratio)?;
    writeln!(f, "map_full,{:.6}", report.map_full)?;
    writeln!(f, "map_reduced,{:.6}", report.map_reduced)?;
    for c in &report.eval_full.per_class {
        match c.ap {
            Some(ap) => writeln!(f, "ap_full_{},{:.6}", c.class_name, ap)?,
            None => writeln!(f, "ap_full_{},absent", c.class_name)?,
        }
    }
    for c in &report.eval_reduced.per_class {
        match c.ap {
            Some(ap) => writeln!(f, "ap_reduced_{},{:.6}", c.class_name, ap)?,
            None => writeln!(f, "ap_reduced_{},absent", c.class_name)?,
        }
    }
    if let Some(t) = timing {
        writeln!(f, "mean_epoch_full_s,{:.6}", t.mean_epoch_full_s)?;
        writeln!(f, "mean_epoch_reduced_s,{:.6}", t.mean_epoch_reduced_s)?;
        writeln!(f, "speedup_ratio,{:.6}", t.speedup_ratio)?;
    }
    Ok(())
}

/// Dump a singular-value spectrum as `index,sigma,cumulative_energy`.
pub fn write_singular_values_csv(singular_values: &[f64], path: &Path) -> Result<()> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "index,sigma,cumulative_energy")?;
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        let energy = if total > 0.0 { acc / total } else { 0.0 };
        writeln!(f, "{i},{s},{energy}")?;
    }
    Ok(())
}

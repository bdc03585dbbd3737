use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::plot::{write_chart, Series};
use super::{cmd_train, ExperimentConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss_p: f64,
    pub final_mean_length: f64,
    pub converged: bool,
}

/// Trains one run per message-loss probability (ascending) under
/// `<out_dir>/loss_<p>` and writes `sweep.csv` plus the chart `sweep_plot.svg`.
pub fn cmd_sweep_loss(cfg: &ExperimentConfig, probs: &[f64]) -> Result<Vec<SweepRow>> {
    if probs.is_empty() {
        return Err(Error::Config(
            "sweep-loss needs at least one probability".into(),
        ));
    }
    let mut probs = probs.to_vec();
    probs.sort_by(f64::total_cmp);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut rows = Vec::with_capacity(probs.len());
    for p in probs {
        let mut run = cfg.clone();
        run.disturbance.loss_p = p;
        run.out_dir = cfg.out_dir.join(format!("loss_{p}"));
        let outcome = cmd_train(&run)?;
        let s = outcome.summary;
        rows.push(SweepRow {
            loss_p: p,
            final_mean_length: s.final_eval.as_ref().map_or(f64::NAN, |e| e.mean_length),
            converged: s.converged.unwrap_or(false),
        });
    }
    let mut csv = String::from("loss_p,final_mean_length,converged\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.loss_p, r.final_mean_length, r.converged);
    }
    let path = cfg.out_dir.join("sweep.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let series = Series {
        label: "final evaluation".into(),
        x: rows.iter().map(|r| r.loss_p).collect(),
        y: rows.iter().map(|r| r.final_mean_length).collect(),
        spread: None,
    };
    write_chart(
        &cfg.out_dir,
        "sweep_plot",
        "Final episode length under message loss",
        "message loss probability",
        "episode length",
        &[series],
    )?;
    Ok(rows)
}

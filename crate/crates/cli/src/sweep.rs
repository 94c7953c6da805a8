//! One-axis sweeps over the confidence threshold or the second curriculum value.

use std::path::PathBuf;

use clap::ValueEnum;
use sha2::{Digest, Sha256};

use stld_core::domain::Pathway;
use stld_core::losses::Curriculum;
use stld_core::selftrain::Strategy;
use stld_core::Real;

use crate::artifacts::{self, mean_std};
use crate::config::ExperimentConfig;
use crate::runner::run_experiment;
use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Threshold,
    Sigma2,
    P2,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Threshold => "threshold",
            Self::Sigma2 => "sigma2",
            Self::P2 => "p2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: Real,
    /// Auto-set third curriculum value (round 3), for curriculum axes.
    pub third: Option<Real>,
    pub run_id: Option<String>,
    pub n_seeds: usize,
    pub mean_final_nme: Option<Real>,
    pub std_final_nme: Option<Real>,
    pub status: &'static str,
    pub note: String,
}

/// Check the axis fits the base config; a mismatch is a validation error.
pub fn check_axis(base: &ExperimentConfig, axis: SweepAxis) -> CliResult<()> {
    let pathway = base.engine.pathway;
    let shrink = matches!(base.strategy, Strategy::Stld { shrink: true, .. });
    let err = |m: &str| Err(CliError::Validation(format!("sweep --axis {}: {m}", axis.name())));
    match axis {
        SweepAxis::Threshold if !matches!(base.strategy, Strategy::ThresholdSelect { .. }) => {
            err("needs strategy.kind = threshold_select")
        }
        SweepAxis::Threshold if pathway != Pathway::Heatmap => err("needs the heatmap pathway (confidence)"),
        SweepAxis::Sigma2 if pathway != Pathway::Heatmap => err("needs engine.pathway = heatmap"),
        SweepAxis::P2 if pathway != Pathway::Coordinate => err("needs engine.pathway = coordinate"),
        SweepAxis::Sigma2 | SweepAxis::P2 if !shrink => err("needs an stld strategy with shrink = true"),
        SweepAxis::Sigma2 | SweepAxis::P2 if base.engine.rounds < 3 => err("needs engine.rounds >= 3"),
        _ => Ok(()),
    }
}

/// Config for one sweep point, or the reason the value is skipped. The flag is
/// set for a degenerate (flat) curriculum.
pub fn point_config(base: &ExperimentConfig, axis: SweepAxis, value: Real) -> Result<(ExperimentConfig, bool), String> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Threshold => {
            cfg.strategy = Strategy::ThresholdSelect { tau: value };
            cfg.validate().map_err(|e| e.to_string())?;
            Ok((cfg, false))
        }
        SweepAxis::Sigma2 | SweepAxis::P2 => {
            let c = &base.engine.curriculum;
            let curr = Curriculum::interpolated(c.kind, value, base.engine.rounds, c.standard, c.lambda_sub);
            curr.check(true).map_err(|e| e.to_string())?;
            let degenerate = curr.is_degenerate();
            cfg.engine.curriculum = curr;
            cfg.validate().map_err(|e| e.to_string())?;
            Ok((cfg, degenerate))
        }
    }
}

pub struct SweepOutcome {
    pub table: PathBuf,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[Real], jobs: usize) -> CliResult<SweepOutcome> {
    base.validate()?;
    check_axis(base, axis)?;
    if values.is_empty() {
        return Err(CliError::Validation("sweep: --values is empty".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        match point_config(base, axis, v) {
            Err(reason) => {
                eprintln!("sweep {} = {v}: skipped ({reason})", axis.name());
                rows.push(SweepRow {
                    value: v,
                    third: None,
                    run_id: None,
                    n_seeds: 0,
                    mean_final_nme: None,
                    std_final_nme: None,
                    status: "skipped",
                    note: reason,
                });
            }
            Ok((cfg, degenerate)) => {
                if degenerate {
                    eprintln!("sweep {} = {v}: degenerate curriculum", axis.name());
                }
                let out = run_experiment(&cfg, jobs)?;
                let finals: Vec<Real> = artifacts::final_rows(&out.rows).iter().map(|r| r.test_nme).collect();
                let (m, s) = mean_std(&finals);
                rows.push(SweepRow {
                    value: v,
                    third: (axis != SweepAxis::Threshold).then(|| cfg.engine.curriculum.values[1]),
                    run_id: Some(out.run_id),
                    n_seeds: finals.len(),
                    mean_final_nme: Some(m),
                    std_final_nme: Some(s),
                    status: "ok",
                    note: if degenerate { "degenerate curriculum".into() } else { String::new() },
                });
            }
        }
    }
    let mut h = Sha256::new();
    h.update(base.run_id());
    h.update(axis.name());
    for v in values {
        h.update(v.to_le_bytes());
    }
    let id = format!("{:x}", h.finalize());
    std::fs::create_dir_all(&base.output_dir)?;
    let table = base.output_dir.join(format!("sweep_{}_{}.csv", axis.name(), &id[..12]));
    let mut w = csv::Writer::from_path(&table)?;
    w.write_record(["axis", "value", "third", "run_id", "n_seeds", "mean_final_nme", "std_final_nme", "status", "note"])?;
    for r in &rows {
        w.write_record([
            axis.name().to_string(),
            r.value.to_string(),
            artifacts::opt(r.third),
            r.run_id.clone().unwrap_or_default(),
            r.n_seeds.to_string(),
            artifacts::opt(r.mean_final_nme),
            artifacts::opt(r.std_final_nme),
            r.status.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(SweepOutcome { table, rows })
}

//! Tidy `series,x,y` plot data from run artifacts and analysis outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;

use stld_core::Real;

use crate::analyze::AnalysisKind;
use crate::artifacts::{self, RunLayout};
use crate::runner::run_id_of;
use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    Rounds,
    Ablation,
    Histogram,
    Forgetting,
    Correlation,
    DensityKl,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rounds => "rounds",
            Self::Ablation => "ablation",
            Self::Histogram => "histogram",
            Self::Forgetting => "forgetting",
            Self::Correlation => "correlation",
            Self::DensityKl => "density_kl",
        }
    }

    /// Analysis that must have produced this kind's input.
    pub fn requires(self) -> Option<AnalysisKind> {
        match self {
            Self::Rounds => None,
            Self::Ablation => Some(AnalysisKind::Ablation),
            Self::Histogram => Some(AnalysisKind::Histogram),
            Self::Forgetting => Some(AnalysisKind::Forgetting),
            Self::Correlation => Some(AnalysisKind::Correlation),
            Self::DensityKl => Some(AnalysisKind::DensityKl),
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        <Self as ValueEnum>::from_str(s, false).map_err(|_| {
            let valid: Vec<&str> = Self::value_variants().iter().map(|k| k.name()).collect();
            CliError::Validation(format!("unknown plot kind {s:?}; valid kinds: {}", valid.join(", ")))
        })
    }
}

type Point = (String, String, Real);

fn mean(xs: &[Real]) -> Real {
    xs.iter().sum::<Real>() / xs.len() as Real
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    Ok(csv::Reader::from_path(path)?.deserialize().collect::<Result<_, _>>()?)
}

pub fn emit_plot_data(run_dir: &Path, kind: PlotKind) -> CliResult<PathBuf> {
    let layout = RunLayout::new(run_dir);
    let run_id = run_id_of(&layout)?;
    let input = match kind.requires() {
        None => layout.rounds(),
        Some(a) => layout.analysis(&run_id, a.file_stem()),
    };
    if !input.exists() {
        return Err(CliError::Validation(match kind.requires() {
            Some(a) => format!(
                "{} not found; run `stld analyze {} {}` first",
                input.display(),
                a.file_stem(),
                run_dir.display()
            ),
            None => format!("{} not found; the run did not complete", input.display()),
        }));
    }
    let points = match kind {
        PlotKind::Rounds => rounds(&input)?,
        PlotKind::Ablation => ablation(&input)?,
        PlotKind::Histogram => histogram(&input)?,
        PlotKind::Forgetting => forgetting(&input)?,
        PlotKind::Correlation => correlation(&input)?,
        PlotKind::DensityKl => density_kl(&input)?,
    };
    let out = layout.plot(&run_id, kind.name());
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["series", "x", "y"])?;
    for (s, x, y) in points {
        w.write_record([s, x, y.to_string()])?;
    }
    w.flush()?;
    Ok(out)
}

fn rounds(path: &Path) -> CliResult<Vec<Point>> {
    let rows = artifacts::read_rounds(path)?;
    let mut nme: BTreeMap<usize, Vec<Real>> = BTreeMap::new();
    let mut noise: BTreeMap<usize, Vec<Real>> = BTreeMap::new();
    for r in &rows {
        nme.entry(r.round).or_default().push(r.test_nme);
        if let Some(n) = r.pseudo_noise_mean {
            noise.entry(r.round).or_default().push(n);
        }
    }
    let mut out: Vec<Point> = nme.iter().map(|(t, v)| ("test_nme".into(), t.to_string(), mean(v))).collect();
    out.extend(noise.iter().map(|(t, v)| ("pseudo_noise".into(), t.to_string(), mean(v))));
    Ok(out)
}

#[derive(Deserialize)]
struct AblationRow {
    strategy: String,
    mean_final_nme: Real,
    std_final_nme: Real,
}

fn ablation(path: &Path) -> CliResult<Vec<Point>> {
    let rows: Vec<AblationRow> = read_table(path)?;
    let mut out: Vec<Point> = rows.iter().map(|r| ("mean_final_nme".into(), r.strategy.clone(), r.mean_final_nme)).collect();
    out.extend(rows.iter().map(|r| ("std_final_nme".into(), r.strategy.clone(), r.std_final_nme)));
    Ok(out)
}

#[derive(Deserialize)]
struct HistRow {
    dx_lo: Real,
    dx_hi: Real,
    dy_lo: Real,
    dy_hi: Real,
    count: u64,
}

fn histogram(path: &Path) -> CliResult<Vec<Point>> {
    let rows: Vec<HistRow> = read_table(path)?;
    Ok(rows
        .iter()
        .map(|r| {
            let cy = 0.5 * (r.dy_lo + r.dy_hi);
            let cx = 0.5 * (r.dx_lo + r.dx_hi);
            (format!("dy={cy}"), cx.to_string(), r.count as Real)
        })
        .collect())
}

#[derive(Deserialize)]
struct ForgetRow {
    bin: usize,
    mean_noise: Option<Real>,
    delta: Option<Real>,
    delta_comparator: Option<Real>,
}

fn forgetting(path: &Path) -> CliResult<Vec<Point>> {
    let rows: Vec<ForgetRow> = read_table(path)?;
    let mut by_bin: BTreeMap<usize, (Vec<Real>, Vec<Real>, Vec<Real>)> = BTreeMap::new();
    for r in rows {
        let e = by_bin.entry(r.bin).or_default();
        e.0.extend(r.mean_noise);
        e.1.extend(r.delta);
        e.2.extend(r.delta_comparator);
    }
    let mut out = Vec::new();
    for (_, (noise, delta, cmp)) in by_bin {
        if noise.is_empty() {
            continue;
        }
        let x = mean(&noise).to_string();
        if !delta.is_empty() {
            out.push(("delta".to_string(), x.clone(), mean(&delta)));
        }
        if !cmp.is_empty() {
            out.push(("delta_comparator".to_string(), x, mean(&cmp)));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CorrRow {
    seed: u64,
    group: usize,
    r: Option<Real>,
}

fn correlation(path: &Path) -> CliResult<Vec<Point>> {
    let rows: Vec<CorrRow> = read_table(path)?;
    let mut by_group: BTreeMap<usize, Vec<Real>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in &rows {
        if let Some(v) = r.r {
            by_group.entry(r.group).or_default().push(v);
            out.push((format!("seed_{}", r.seed), r.group.to_string(), v));
        }
    }
    let mut head: Vec<Point> = by_group.iter().map(|(g, v)| ("mean_r".into(), g.to_string(), mean(v))).collect();
    head.extend(out);
    Ok(head)
}

#[derive(Deserialize)]
struct KlRow {
    group: String,
    landmark: Option<usize>,
    kl: Option<Real>,
}

fn density_kl(path: &Path) -> CliResult<Vec<Point>> {
    let rows: Vec<KlRow> = read_table(path)?;
    let mut by: BTreeMap<(String, usize), Vec<Real>> = BTreeMap::new();
    for r in rows {
        if let (Some(k), Some(v)) = (r.landmark, r.kl) {
            by.entry((r.group, k)).or_default().push(v);
        }
    }
    Ok(by.into_iter().map(|((g, k), v)| (g, k.to_string(), mean(&v))).collect())
}

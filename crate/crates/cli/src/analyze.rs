//! Diagnostic analyses computed from a saved run directory. Nothing here
//! trains; models come from the run's checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;

use stld_core::domain::{Dataset, Pathway, Prediction};
use stld_core::io::{load_checkpoint, load_dataset};
use stld_core::losses::TargetLoss;
use stld_core::metrics::{density_map, forgetting_curve, gradient_correlation, kl_divergence, noise_histogram, spearman};
use stld_core::selftrain::{input_matrix, Strategy};
use stld_core::{Landmarks, Real};

use crate::artifacts::{self, opt, PseudoHistory, RunLayout};
use crate::config::ExperimentConfig;
use crate::runner::load_run_config;
use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AnalysisKind {
    Histogram,
    Forgetting,
    Correlation,
    DensityKl,
    Ablation,
}

impl AnalysisKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            Self::Histogram => "histogram",
            Self::Forgetting => "forgetting",
            Self::Correlation => "correlation",
            Self::DensityKl => "density_kl",
            Self::Ablation => "ablation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Probe,
    Warm,
    Final,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeOptions {
    /// Pseudo-label round to analyse (`0` = warm start). Forgetting uses it as
    /// the training round `t` and defaults to 1.
    pub round: Option<usize>,
    /// Comparator run for forgetting; extra runs for ablation.
    pub compare: Vec<PathBuf>,
    /// Noise bins (forgetting) or loss-scale groups (correlation).
    pub groups: usize,
    pub hist_range_px: Real,
    pub hist_bins: usize,
    pub density_bins: usize,
    /// Confidence threshold of the `confident_pseudo` density group.
    pub tau: Real,
    pub model: ModelChoice,
    /// Compute KL(group || anchor) instead of KL(anchor || group).
    pub kl_reverse: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            round: None,
            compare: Vec::new(),
            groups: 6,
            hist_range_px: 8.0,
            hist_bins: 17,
            density_bins: 12,
            tau: 0.4,
            model: ModelChoice::Probe,
            kl_reverse: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalysisOutput {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub summary: serde_json::Value,
}

struct LoadedRun {
    layout: RunLayout,
    cfg: ExperimentConfig,
    run_id: String,
}

impl LoadedRun {
    fn open(dir: &Path) -> CliResult<Self> {
        let layout = RunLayout::new(dir);
        let cfg = load_run_config(&layout)?;
        let run_id = cfg.run_id();
        Ok(Self { layout, cfg, run_id })
    }

    fn dataset(&self, seed: u64) -> CliResult<Dataset> {
        Ok(load_dataset(&self.layout.data(seed))?.0)
    }

    fn pseudo(&self, seed: u64) -> CliResult<PseudoHistory> {
        let p = self.layout.pseudo(seed);
        if !p.exists() {
            return Err(CliError::Validation(format!("{} is missing; rerun `stld run`", p.display())));
        }
        artifacts::read_pseudo(&p)
    }
}

fn hidden_of(ds: &Dataset) -> CliResult<BTreeMap<u64, Landmarks>> {
    ds.unlabeled
        .iter()
        .map(|s| {
            s.hidden_gt()
                .cloned()
                .map(|g| (s.id, g))
                .ok_or_else(|| CliError::Runtime(format!("unlabeled sample {} has no hidden ground truth", s.id)))
        })
        .collect()
}

fn round_of<'a>(history: &'a PseudoHistory, round: usize, what: &str) -> CliResult<&'a BTreeMap<u64, Prediction>> {
    history.get(round).ok_or_else(|| {
        CliError::Validation(format!("{what}: round {round} not recorded (run has rounds 0..={})", history.len().saturating_sub(1)))
    })
}

pub fn analyze(kind: AnalysisKind, run_dir: &Path, opts: &AnalyzeOptions) -> CliResult<AnalysisOutput> {
    let run = LoadedRun::open(run_dir)?;
    let (rows, summary) = match kind {
        AnalysisKind::Histogram => histogram(&run, opts)?,
        AnalysisKind::Forgetting => forgetting(&run, opts)?,
        AnalysisKind::Correlation => correlation(&run, opts)?,
        AnalysisKind::DensityKl => density_kl(&run, opts)?,
        AnalysisKind::Ablation => ablation(&run, opts)?,
    };
    let stem = kind.file_stem();
    let csv_path = run.layout.analysis(&run.run_id, stem);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    let sidecar = run.layout.sidecar(&run.run_id, stem);
    let full = json!({
        "analysis": stem,
        "run_id": run.run_id,
        "options": opts,
        "summary": summary,
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&full)? + "\n")?;
    Ok(AnalysisOutput { csv: csv_path, sidecar, summary })
}

type Table = (Vec<Vec<String>>, serde_json::Value);

fn histogram(run: &LoadedRun, opts: &AnalyzeOptions) -> CliResult<Table> {
    let round = opts.round.unwrap_or(0);
    let (mut pseudo, mut gts) = (Vec::new(), Vec::new());
    for &seed in &run.cfg.seeds {
        let ds = run.dataset(seed)?;
        let hidden = hidden_of(&ds)?;
        let history = run.pseudo(seed)?;
        for (id, p) in round_of(&history, round, "histogram")? {
            pseudo.push(p.landmarks.clone());
            gts.push(hidden[id].clone());
        }
    }
    let h = noise_histogram(&pseudo, &gts, opts.hist_range_px, opts.hist_bins)?;
    let mut rows = vec![vec!["dx_lo", "dx_hi", "dy_lo", "dy_hi", "count"].into_iter().map(String::from).collect()];
    for iy in 0..h.bins {
        for ix in 0..h.bins {
            rows.push(vec![
                h.edge(ix).to_string(),
                h.edge(ix + 1).to_string(),
                h.edge(iy).to_string(),
                h.edge(iy + 1).to_string(),
                h.counts[[iy, ix]].to_string(),
            ]);
        }
    }
    Ok((rows, json!({ "round": round, "total": h.total(), "overflow": h.overflow, "seeds": run.cfg.seeds })))
}

fn same_data(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.task == b.task && a.n_train == b.n_train && a.n_test == b.n_test && a.split == b.split
}

fn forgetting(run: &LoadedRun, opts: &AnalyzeOptions) -> CliResult<Table> {
    let t = opts.round.unwrap_or(1);
    if t == 0 {
        return Err(CliError::Validation("forgetting: --round is the training round and starts at 1".into()));
    }
    let comparator = match opts.compare.as_slice() {
        [] => None,
        [c] => {
            let c = LoadedRun::open(c)?;
            if !same_data(&run.cfg, &c.cfg) {
                return Err(CliError::Validation("forgetting: comparator run was trained on different data".into()));
            }
            Some(c)
        }
        _ => return Err(CliError::Validation("forgetting: at most one --compare run".into())),
    };
    let pretrains = matches!(run.cfg.strategy, Strategy::Stld { pseudo_pretrain: true, .. });
    let mut rows = vec![["seed", "bin", "noise_lo", "noise_hi", "mean_noise", "count", "delta", "delta_comparator"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    let mut trend = BTreeMap::new();
    for &seed in &run.cfg.seeds {
        let ds = run.dataset(seed)?;
        let hidden = hidden_of(&ds)?;
        let history = run.pseudo(seed)?;
        let before = round_of(&history, t - 1, "forgetting")?;
        let after = round_of(&history, t, "forgetting")?;
        // stage-1 pretraining fits every pseudo-label; otherwise only the pseudo term's ids count
        let ids: BTreeSet<u64> = if pretrains {
            before.keys().copied().collect()
        } else {
            artifacts::read_used(&run.layout.used(seed))?.remove(&t).unwrap_or_default()
        };
        if ids.is_empty() {
            return Err(CliError::Validation(format!("forgetting: no pseudo-labels were trained on in round {t}")));
        }
        let cmp_history = match &comparator {
            Some(c) => {
                if !c.cfg.seeds.contains(&seed) {
                    return Err(CliError::Validation(format!("forgetting: comparator lacks seed {seed}")));
                }
                Some(c.pseudo(seed)?)
            }
            None => None,
        };
        let used: Vec<Landmarks> = ids.iter().map(|id| before[id].landmarks.clone()).collect();
        let preds: Vec<Landmarks> = ids.iter().map(|id| after[id].landmarks.clone()).collect();
        let gts: Vec<Landmarks> = ids.iter().map(|id| hidden[id].clone()).collect();
        let cmp: Option<Vec<Landmarks>> = match &cmp_history {
            Some(h) => {
                let r = round_of(h, t, "forgetting comparator")?;
                Some(ids.iter().map(|id| r[id].landmarks.clone()).collect())
            }
            None => None,
        };
        let bins = forgetting_curve(&used, &preds, cmp.as_deref(), &gts, opts.groups)?;
        let idx: Vec<f64> = (0..bins.len()).map(|b| b as f64).collect();
        let deltas: Vec<f64> = bins.iter().map(|b| b.delta.unwrap_or(f64::NAN)).collect();
        trend.insert(seed.to_string(), spearman(&idx, &deltas));
        for (b, bin) in bins.iter().enumerate() {
            rows.push(vec![
                seed.to_string(),
                b.to_string(),
                opt(bin.noise_lo),
                opt(bin.noise_hi),
                opt(bin.mean_noise),
                bin.count.to_string(),
                opt(bin.delta),
                opt(bin.delta_comparator),
            ]);
        }
    }
    Ok((
        rows,
        json!({
            "round": t,
            "comparator": comparator.map(|c| c.run_id),
            "spearman_delta_vs_noise_bin": trend,
        }),
    ))
}

fn correlation(run: &LoadedRun, opts: &AnalyzeOptions) -> CliResult<Table> {
    let round = opts.round.unwrap_or(0);
    let name = match opts.model {
        ModelChoice::Probe => "probe",
        ModelChoice::Warm => "warm",
        ModelChoice::Final => "final",
    };
    let mut rows = vec![["seed", "group", "count", "mean_loss_scale", "r"].into_iter().map(String::from).collect::<Vec<_>>()];
    let mut ranks = BTreeMap::new();
    let mut non_increasing = 0;
    for &seed in &run.cfg.seeds {
        let ckpt = run.layout.checkpoint(seed, name);
        if !ckpt.exists() {
            return Err(CliError::Validation(format!(
                "correlation: {} missing{}",
                ckpt.display(),
                if name == "probe" { " (rerun with probe.enabled = true)" } else { "" }
            )));
        }
        let (model, _) = load_checkpoint(&ckpt)?;
        let ds = run.dataset(seed)?;
        let hidden = hidden_of(&ds)?;
        let history = run.pseudo(seed)?;
        let pseudo = round_of(&history, round, "correlation")?;
        let x = input_matrix(&ds.unlabeled);
        let gts: Vec<Landmarks> = ds.unlabeled.iter().map(|s| hidden[&s.id].clone()).collect();
        let ps: Vec<Landmarks> = ds.unlabeled.iter().map(|s| pseudo[&s.id].landmarks.clone()).collect();
        let loss = TargetLoss::standard(model.pathway());
        let groups = gradient_correlation(&model, x.view(), &gts, &ps, loss, ds.image_size(), opts.groups)?;
        let (gi, rs): (Vec<f64>, Vec<f64>) =
            groups.iter().enumerate().filter_map(|(i, g)| g.r.map(|r| (i as f64, r))).unzip();
        let rho = spearman(&gi, &rs);
        if rho.is_some_and(|r| r <= 0.0) {
            non_increasing += 1;
        }
        ranks.insert(seed.to_string(), rho);
        for (i, g) in groups.iter().enumerate() {
            rows.push(vec![seed.to_string(), i.to_string(), g.count.to_string(), g.mean_loss_scale.to_string(), opt(g.r)]);
        }
    }
    Ok((
        rows,
        json!({
            "round": round,
            "model": name,
            "group_order": "descending loss scale",
            "spearman_r_vs_group": ranks,
            "non_increasing_seeds": non_increasing,
        }),
    ))
}

fn density_kl(run: &LoadedRun, opts: &AnalyzeOptions) -> CliResult<Table> {
    let round = opts.round.unwrap_or(0);
    let grid = run.cfg.task.grid;
    let extent = grid as Real;
    let mut rows = vec![["seed", "group", "landmark", "kl", "count"].into_iter().map(String::from).collect::<Vec<_>>()];
    let mut means: BTreeMap<String, BTreeMap<String, Real>> = BTreeMap::new();
    let mut pseudo_closer = 0;
    for &seed in &run.cfg.seeds {
        let ds = run.dataset(seed)?;
        let hidden = hidden_of(&ds)?;
        let history = run.pseudo(seed)?;
        let pseudo = round_of(&history, round, "density_kl")?;
        let anchor_sets: Vec<Landmarks> = hidden.values().cloned().collect();
        let anchor = density_map(&anchor_sets, opts.density_bins, extent)?;
        let labeled: Vec<Landmarks> = ds.labeled.iter().filter_map(|s| s.gt.clone()).collect();
        let all: Vec<Landmarks> = pseudo.values().map(|p| p.landmarks.clamped(grid, grid)).collect();
        let mut groups = vec![("labeled", labeled)];
        if run.cfg.engine.pathway == Pathway::Heatmap {
            let confident: Vec<Landmarks> = pseudo
                .values()
                .filter(|p| p.sample_confidence(run.cfg.engine.confidence_agg).is_some_and(|c| c >= opts.tau))
                .map(|p| p.landmarks.clamped(grid, grid))
                .collect();
            groups.push(("confident_pseudo", confident));
        }
        groups.push(("all_pseudo", all));
        let mut seed_means = BTreeMap::new();
        for (name, sets) in groups {
            if sets.is_empty() {
                rows.push(vec![seed.to_string(), name.into(), String::new(), String::new(), "0".into()]);
                continue;
            }
            let m = density_map(&sets, opts.density_bins, extent)?;
            let report = if opts.kl_reverse { kl_divergence(&m, &anchor)? } else { kl_divergence(&anchor, &m)? };
            for (k, kl) in report.per_landmark.iter().enumerate() {
                rows.push(vec![seed.to_string(), name.into(), k.to_string(), kl.to_string(), sets.len().to_string()]);
            }
            seed_means.insert(name.to_string(), report.mean);
        }
        if let (Some(a), Some(l)) = (seed_means.get("all_pseudo"), seed_means.get("labeled")) {
            if a < l {
                pseudo_closer += 1;
            }
        }
        means.insert(seed.to_string(), seed_means);
    }
    Ok((
        rows,
        json!({
            "round": round,
            "direction": if opts.kl_reverse { "KL(group || unlabeled_gt)" } else { "KL(unlabeled_gt || group)" },
            "bins": opts.density_bins,
            "extent": extent,
            "mean_kl": means,
            "seeds_all_pseudo_below_labeled": pseudo_closer,
        }),
    ))
}

fn ablation(run: &LoadedRun, opts: &AnalyzeOptions) -> CliResult<Table> {
    let mut rows = vec![["strategy", "run_id", "n_seeds", "mean_final_nme", "std_final_nme", "mean_final_auc", "mean_final_fr"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    let mut runs = vec![LoadedRun::open(&run.layout.dir)?];
    for c in &opts.compare {
        runs.push(LoadedRun::open(c)?);
    }
    let mut table = Vec::new();
    for r in &runs {
        let all = artifacts::read_rounds(&r.layout.rounds())?;
        let finals = artifacts::final_rows(&all);
        let nmes: Vec<Real> = finals.iter().map(|f| f.test_nme).collect();
        let aucs: Vec<Real> = finals.iter().map(|f| f.test_auc).collect();
        let frs: Vec<Real> = finals.iter().map(|f| f.test_fr).collect();
        let (m, s) = artifacts::mean_std(&nmes);
        let name = r.cfg.strategy.name();
        rows.push(vec![
            name.clone(),
            r.run_id.clone(),
            finals.len().to_string(),
            m.to_string(),
            s.to_string(),
            artifacts::mean_std(&aucs).0.to_string(),
            artifacts::mean_std(&frs).0.to_string(),
        ]);
        table.push(json!({ "strategy": name, "run_id": r.run_id, "mean_final_nme": m }));
    }
    let seeds_match = runs.iter().all(|r| r.cfg.seeds == run.cfg.seeds && same_data(&r.cfg, &run.cfg));
    Ok((rows, json!({ "runs": table, "same_seeds_and_data": seeds_match })))
}

//! Executes an experiment config: one strategy run per seed, persisted into
//! `<output_dir>/<run_id>/`.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use stld_core::domain::{split_dataset, Dataset, PseudoStore};
use stld_core::io::{save_checkpoint, save_dataset};
use stld_core::selftrain::{estimate, run_strategy, stage_seed, train_supervised};
use stld_core::synth::generate_task;
use stld_core::Model;

use crate::artifacts::{self, RoundRow, RunLayout};
use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub rows: Vec<RoundRow>,
    /// The directory already held a verified run of the same config.
    pub reused: bool,
}

/// The dataset seen by run seed `seed`: the generator and, unless pinned,
/// the split are both seeded by it.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> CliResult<Dataset> {
    let task = generate_task(&cfg.task, cfg.n_train, cfg.n_test, seed)?;
    Ok(split_dataset(
        task.train,
        task.test,
        cfg.split.labeled_ratio,
        cfg.split.seed.unwrap_or(seed),
        cfg.split.bias_knob,
    )?)
}

struct SeedOutput {
    records: Vec<Vec<String>>,
    timing: Vec<(String, f64)>,
}

fn run_seed(cfg: &ExperimentConfig, layout: &RunLayout, run_id: &str, seed: u64) -> CliResult<SeedOutput> {
    let start = Instant::now();
    let dataset = build_dataset(cfg, seed)?;
    fs::create_dir_all(layout.seed_dir(seed))?;
    save_dataset(&layout.data(seed), &dataset, Some(&cfg.task), Some(seed), cfg.split.bias_knob)?;

    let run = run_strategy(&dataset, &cfg.strategy, &cfg.engine, seed)?;
    let name = cfg.strategy.name();
    let records: Vec<Vec<String>> = run.logs.iter().map(|l| artifacts::round_record(run_id, &name, seed, l)).collect();
    artifacts::write_rounds(&layout.seed_rounds(seed), records.clone())?;

    let history = if run.pseudo.is_empty() && !dataset.unlabeled.is_empty() {
        // supervised-only runs still record the warm start's estimates for the analyses
        vec![PseudoStore::for_ids(dataset.unlabeled_ids()).update(estimate(&run.warm_model, &dataset.unlabeled)?, 0)?]
    } else {
        run.pseudo.clone()
    };
    artifacts::write_pseudo(&layout.pseudo(seed), &history)?;
    artifacts::write_used(&layout.used(seed), &run.used)?;

    save_checkpoint(&layout.checkpoint(seed, "warm"), &run.warm_model, 0)?;
    save_checkpoint(&layout.checkpoint(seed, "final"), run.final_model(), run.logs.len() as u64)?;
    if cfg.probe.enabled {
        let probe_seed = seed.wrapping_add(cfg.probe.seed_offset);
        let spec = *run.warm_model.spec();
        let init = Model::init(spec, probe_seed)?;
        let (probe, _) = train_supervised(&dataset.labeled, &init, &cfg.engine.stage, stage_seed(probe_seed, 0, 0))?;
        save_checkpoint(&layout.checkpoint(seed, "probe"), &probe, 0)?;
    }

    let mut timing: Vec<(String, f64)> = run.logs.iter().map(|l| (l.round.to_string(), l.seconds)).collect();
    timing.push(("total".into(), start.elapsed().as_secs_f64()));
    if let Some(last) = run.logs.last() {
        eprintln!(
            "[{run_id}] {name} seed {seed}: final test NME {:.5} ({:.1}s)",
            last.test_nme,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(SeedOutput { records, timing })
}

/// Run every seed of `cfg` on a pool of `jobs` workers and persist the run.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let dir = cfg.output_dir.join(&run_id);
    let layout = RunLayout::new(&dir);

    if layout.checksums().exists() && artifacts::verify_checksums(&dir).map(|r| r.ok()).unwrap_or(false) {
        let rows = artifacts::read_rounds(&layout.rounds())?;
        return Ok(RunOutcome { run_id, dir, rows, reused: true });
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(layout.config(), cfg.to_pretty_json())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let results: Vec<(u64, CliResult<SeedOutput>)> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| (s, run_seed(cfg, &layout, &run_id, s))).collect());

    let mut records = Vec::new();
    let mut timing = csv::Writer::from_path(layout.timing())?;
    timing.write_record(["seed", "round", "seconds"])?;
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(out) => {
                records.extend(out.records);
                for (round, secs) in out.timing {
                    timing.write_record([seed.to_string(), round, secs.to_string()])?;
                }
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    timing.flush()?;
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!("run {run_id} incomplete: {}", failures.join("; "))));
    }
    artifacts::write_rounds(&layout.rounds(), records)?;
    let rows = artifacts::read_rounds(&layout.rounds())?;
    artifacts::write_summary(&layout.summary(), &rows)?;
    artifacts::write_checksums(&dir)?;
    Ok(RunOutcome { run_id, dir, rows, reused: false })
}

/// Load the resolved config persisted in a run directory.
pub fn load_run_config(layout: &RunLayout) -> CliResult<ExperimentConfig> {
    let path = layout.config();
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("{}: not a run directory ({e})", layout.dir.display())))?;
    let v = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_value(v, &[])
}

/// Run id recorded for a run directory (its directory name is not trusted).
pub fn run_id_of(layout: &RunLayout) -> CliResult<String> {
    Ok(load_run_config(layout)?.run_id())
}

/// Generate and save the dataset of run seed `seed` into `dir`.
pub fn gen_data(cfg: &ExperimentConfig, seed: u64, dir: &std::path::Path) -> CliResult<stld_core::io::DatasetManifest> {
    cfg.validate()?;
    let dataset = build_dataset(cfg, seed)?;
    Ok(save_dataset(dir, &dataset, Some(&cfg.task), Some(seed), cfg.split.bias_knob)?)
}

#[derive(Clone, Debug)]
pub struct VerifyOutcome {
    pub report: artifacts::VerifyReport,
    /// Files whose rerun checksum differs from the stored one.
    pub rerun_diff: Option<Vec<String>>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.report.ok() && self.rerun_diff.as_ref().is_none_or(|d| d.is_empty())
    }
}

/// Recompute the checksums of a run; with `rerun`, also re-execute its
/// resolved config in a scratch directory and compare every tracked file.
pub fn verify_run(dir: &std::path::Path, rerun: bool, jobs: usize) -> CliResult<VerifyOutcome> {
    let layout = RunLayout::new(dir);
    let cfg = load_run_config(&layout)?;
    let report = artifacts::verify_checksums(dir)?;
    let rerun_diff = if rerun {
        let scratch = std::env::temp_dir().join(format!("stld-verify-{}-{}", cfg.run_id(), std::process::id()));
        let mut again = cfg.clone();
        again.output_dir = scratch.clone();
        let out = run_experiment(&again, jobs)?;
        let stored = artifacts::read_checksums(&layout.checksums())?;
        let fresh = artifacts::read_checksums(&RunLayout::new(&out.dir).checksums())?;
        let mut diff: Vec<String> = stored
            .iter()
            .filter(|(k, v)| fresh.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(fresh.keys().filter(|k| !stored.contains_key(*k)).cloned());
        let _ = fs::remove_dir_all(&scratch);
        Some(diff)
    } else {
        None
    };
    Ok(VerifyOutcome { report, rerun_diff })
}

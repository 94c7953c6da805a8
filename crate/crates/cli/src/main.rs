use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stld_cli::analyze::{analyze, AnalysisKind, AnalyzeOptions, ModelChoice};
use stld_cli::config::{parse_overrides, ExperimentConfig};
use stld_cli::plot::{emit_plot_data, PlotKind};
use stld_cli::runner::{gen_data, run_experiment, verify_run};
use stld_cli::sweep::{sweep, SweepAxis};
use stld_cli::{CliError, CliResult};

/// Self-training laboratory for landmark detection on synthetic tasks.
#[derive(Parser)]
#[command(name = "stld", version)]
struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`; for gen-data, the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for seeds.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and save the dataset of one seed.
    ///
    /// Arguments: [CONFIG] [--key.path value]...
    GenData {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Run an experiment config over all of its seeds.
    ///
    /// Arguments: [CONFIG] [--key.path value]...
    Run {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// One run per value along a sweep axis, plus a summary table.
    ///
    /// Arguments: [CONFIG] --axis threshold|sigma2|p2 --values v1,v2,... [--key.path value]...
    Sweep {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Compute a diagnostic analysis from a saved run.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        run_dir: PathBuf,
        /// Comparator run (forgetting) or further runs (ablation).
        #[arg(long)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        round: Option<usize>,
        /// Noise bins or loss-scale groups.
        #[arg(long, default_value_t = 6)]
        groups: usize,
        #[arg(long, default_value_t = 8.0)]
        range_px: f64,
        #[arg(long, default_value_t = 17)]
        hist_bins: usize,
        #[arg(long, default_value_t = 12)]
        density_bins: usize,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long, value_enum, default_value = "probe")]
        model: ModelChoice,
        #[arg(long)]
        kl_reverse: bool,
    },
    /// Write `series,x,y` plot data for a run.
    EmitPlot {
        run_dir: PathBuf,
        /// rounds | ablation | histogram | forgetting | correlation | density_kl
        #[arg(long)]
        kind: String,
    },
    /// Recompute a run's checksums; `--rerun` also re-executes it.
    Verify {
        run_dir: PathBuf,
        #[arg(long)]
        rerun: bool,
    },
}

/// Free-form arguments of the config-driven subcommands.
struct ConfigArgs {
    config: Option<PathBuf>,
    /// Subcommand flags pulled out of the override list.
    flags: BTreeMap<String, String>,
    out: Option<PathBuf>,
    jobs: usize,
    overrides: Vec<(String, serde_json::Value)>,
}

fn config_args(cli: &Cli, args: &[String], flags: &[&str]) -> CliResult<ConfigArgs> {
    let mut rest = args;
    let mut config = None;
    if let Some(first) = rest.first() {
        if !first.starts_with("--") {
            config = Some(PathBuf::from(first));
            rest = &rest[1..];
        }
    }
    let mut found = BTreeMap::new();
    let mut overrides = Vec::new();
    let (mut seed, mut out, mut jobs) = (cli.seed, cli.out.clone(), cli.jobs);
    for (k, v) in parse_overrides(rest)? {
        let text = match &v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let bad = |what: &str| CliError::Validation(format!("--{k}: expected {what}, got {text}"));
        match k.as_str() {
            "seed" => seed = Some(text.parse().map_err(|_| bad("an integer"))?),
            "out" => out = Some(PathBuf::from(text)),
            "jobs" => jobs = text.parse().map_err(|_| bad("an integer"))?,
            f if flags.contains(&f) => {
                found.insert(k, text);
            }
            _ => overrides.push((k, v)),
        }
    }
    if let Some(s) = seed {
        overrides.push(("seeds".into(), serde_json::json!([s])));
    }
    Ok(ConfigArgs { config, flags: found, out, jobs, overrides })
}

fn resolve(a: &ConfigArgs, out_is_output_dir: bool) -> CliResult<ExperimentConfig> {
    let mut o = a.overrides.clone();
    if let (Some(out), true) = (&a.out, out_is_output_dir) {
        o.push(("output_dir".into(), serde_json::json!(out)));
    }
    ExperimentConfig::load(a.config.as_deref(), &o)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let label = match e {
                CliError::Validation(_) => "invalid",
                CliError::Runtime(_) => "error",
            };
            eprintln!("stld: {label}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::GenData { args } => {
            let a = config_args(cli, args, &[])?;
            let cfg = resolve(&a, false)?;
            let seed = cfg.seeds[0];
            let dir = a.out.clone().unwrap_or_else(|| cfg.output_dir.join(format!("data_seed_{seed}")));
            let m = gen_data(&cfg, seed, &dir)?;
            println!(
                "{}: {} labeled, {} unlabeled, {} test",
                dir.display(),
                m.labeled.len(),
                m.unlabeled.len(),
                m.test.len()
            );
        }
        Cmd::Run { args } => {
            let a = config_args(cli, args, &[])?;
            let cfg = resolve(&a, true)?;
            let out = run_experiment(&cfg, a.jobs)?;
            if out.reused {
                eprintln!("run {} already complete and verified", out.run_id);
            }
            println!("{}", out.dir.display());
        }
        Cmd::Sweep { args } => {
            let a = config_args(cli, args, &["axis", "values"])?;
            let axis_name = a.flags.get("axis").ok_or_else(|| CliError::Validation("sweep: --axis is required".into()))?;
            let axis = SweepAxis::from_str(axis_name, false)
                .map_err(|_| CliError::Validation(format!("sweep: unknown axis {axis_name:?}; valid axes: threshold, sigma2, p2")))?;
            let values = a
                .flags
                .get("values")
                .ok_or_else(|| CliError::Validation("sweep: --values is required".into()))?
                .trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Validation(format!("sweep: bad value {v:?}"))))
                .collect::<CliResult<Vec<_>>>()?;
            let cfg = resolve(&a, true)?;
            let out = sweep(&cfg, axis, &values, a.jobs)?;
            for r in &out.rows {
                match r.mean_final_nme {
                    Some(m) => println!("{} = {}: mean final NME {m:.5} {}", axis.name(), r.value, r.note),
                    None => println!("{} = {}: skipped ({})", axis.name(), r.value, r.note),
                }
            }
            println!("{}", out.table.display());
        }
        Cmd::Analyze { kind, run_dir, compare, round, groups, range_px, hist_bins, density_bins, tau, model, kl_reverse } => {
            let opts = AnalyzeOptions {
                round: *round,
                compare: compare.clone(),
                groups: *groups,
                hist_range_px: *range_px,
                hist_bins: *hist_bins,
                density_bins: *density_bins,
                tau: *tau,
                model: *model,
                kl_reverse: *kl_reverse,
            };
            let out = analyze(*kind, run_dir, &opts)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            println!("{}", out.csv.display());
        }
        Cmd::EmitPlot { run_dir, kind } => {
            let kind = PlotKind::parse(kind)?;
            println!("{}", emit_plot_data(run_dir, kind)?.display());
        }
        Cmd::Verify { run_dir, rerun } => {
            let out = verify_run(run_dir, *rerun, cli.jobs)?;
            let r = &out.report;
            println!("{} files verified", r.checked);
            for f in &r.mismatched {
                println!("MISMATCH {f}");
            }
            for f in &r.missing {
                println!("MISSING {f}");
            }
            for f in &r.untracked {
                println!("untracked {f}");
            }
            if let Some(d) = &out.rerun_diff {
                for f in d {
                    println!("RERUN DIFFERS {f}");
                }
                if d.is_empty() {
                    println!("rerun reproduced every tracked file");
                }
            }
            if !out.ok() {
                return Err(CliError::Runtime(format!("{} failed verification", run_dir.display())));
            }
        }
    }
    Ok(())
}

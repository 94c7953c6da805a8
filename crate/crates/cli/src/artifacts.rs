//! Run-directory layout and the CSV formats written into it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stld_core::domain::{Prediction, PseudoStore};
use stld_core::selftrain::RoundLog;
use stld_core::{Landmarks, Real};

use crate::{CliError, CliResult};

pub const ROUNDS_HEADER: [&str; 14] = [
    "run_id",
    "strategy",
    "seed",
    "round",
    "stage1_loss",
    "stage2_loss",
    "pseudo_noise_mean",
    "selected",
    "test_nme",
    "test_auc",
    "test_fr",
    "sigma_or_p",
    "lambda",
    "seconds",
];

pub const CHECKSUMS: &str = "checksums.sha256";
pub const TIMING: &str = "timing.csv";

#[derive(Clone, Debug)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn rounds(&self) -> PathBuf {
        self.dir.join("rounds.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join(TIMING)
    }

    pub fn checksums(&self) -> PathBuf {
        self.dir.join(CHECKSUMS)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed_{seed}"))
    }

    pub fn seed_rounds(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("rounds.csv")
    }

    pub fn pseudo(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("pseudo.csv")
    }

    pub fn used(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("used.csv")
    }

    pub fn data(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    pub fn checkpoint(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("{name}.ckpt"))
    }

    pub fn analysis(&self, run_id: &str, kind: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.{kind}.csv"))
    }

    pub fn sidecar(&self, run_id: &str, kind: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.{kind}.json"))
    }

    pub fn plot(&self, run_id: &str, kind: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.plot.{kind}.csv"))
    }
}

pub(crate) fn opt(v: Option<Real>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn round_record(run_id: &str, strategy: &str, seed: u64, log: &RoundLog) -> Vec<String> {
    vec![
        run_id.to_string(),
        strategy.to_string(),
        seed.to_string(),
        log.round.to_string(),
        opt(log.stage1_loss),
        log.stage2_loss.to_string(),
        opt(log.pseudo_noise_mean),
        log.selected.map(|s| s.to_string()).unwrap_or_default(),
        log.test_nme.to_string(),
        log.test_auc.to_string(),
        log.test_fr.to_string(),
        opt(log.granularity),
        log.lambda.to_string(),
        // wall time lives in timing.csv
        String::new(),
    ]
}

pub fn write_rounds<'a>(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROUNDS_HEADER)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub round: usize,
    pub stage1_loss: Option<Real>,
    pub stage2_loss: Real,
    pub pseudo_noise_mean: Option<Real>,
    pub selected: Option<usize>,
    pub test_nme: Real,
    pub test_auc: Real,
    pub test_fr: Real,
    pub sigma_or_p: Option<Real>,
    pub lambda: Real,
    pub seconds: Option<Real>,
}

pub fn read_rounds(path: &Path) -> CliResult<Vec<RoundRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if headers != ROUNDS_HEADER {
        return Err(CliError::Runtime(format!("{}: unexpected header {headers:?}", path.display())));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Rows of the last round of every seed, in file order.
pub fn final_rows(rows: &[RoundRow]) -> Vec<&RoundRow> {
    let mut last: BTreeMap<u64, &RoundRow> = BTreeMap::new();
    for r in rows {
        let e = last.entry(r.seed).or_insert(r);
        if r.round >= e.round {
            *e = r;
        }
    }
    last.into_values().collect()
}

/// Pseudo-label history: one block per round, `round = 0` being the warm start.
pub fn write_pseudo(path: &Path, history: &[PseudoStore]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "id", "landmark_index", "x", "y", "confidence"])?;
    for (round, store) in history.iter().enumerate() {
        for (id, p) in store.iter() {
            let pred = &p.prediction;
            for (k, pt) in pred.landmarks.points().iter().enumerate() {
                let conf = pred.confidences.as_ref().map(|c| c[k].to_string()).unwrap_or_default();
                w.write_record([round.to_string(), id.to_string(), k.to_string(), pt[0].to_string(), pt[1].to_string(), conf])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct PseudoRow {
    round: usize,
    id: u64,
    landmark_index: usize,
    x: Real,
    y: Real,
    confidence: Option<Real>,
}

pub type PseudoHistory = Vec<BTreeMap<u64, Prediction>>;

pub fn read_pseudo(path: &Path) -> CliResult<PseudoHistory> {
    let mut grouped: BTreeMap<usize, BTreeMap<u64, Vec<PseudoRow>>> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: PseudoRow = row?;
        grouped.entry(r.round).or_default().entry(r.id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (i, (round, by_id)) in grouped.into_iter().enumerate() {
        if round != i {
            return Err(CliError::Runtime(format!("{}: pseudo rounds are not contiguous at {round}", path.display())));
        }
        let mut m = BTreeMap::new();
        for (id, mut rows) in by_id {
            rows.sort_by_key(|r| r.landmark_index);
            if rows.iter().enumerate().any(|(k, r)| r.landmark_index != k) {
                return Err(CliError::Runtime(format!("{}: landmark indices of id {id} are not 0..N", path.display())));
            }
            let landmarks = Landmarks::new(rows.iter().map(|r| [r.x, r.y]).collect())?;
            let confidences = rows.iter().map(|r| r.confidence).collect::<Option<Vec<_>>>();
            m.insert(id, Prediction { landmarks, confidences });
        }
        out.push(m);
    }
    Ok(out)
}

/// Ids that entered the pseudo term of round `t` (`round` column is `t`).
pub fn write_used(path: &Path, used: &[BTreeSet<u64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "id"])?;
    for (i, ids) in used.iter().enumerate() {
        for id in ids {
            w.write_record([(i + 1).to_string(), id.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_used(path: &Path) -> CliResult<BTreeMap<usize, BTreeSet<u64>>> {
    let mut out: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let (round, id): (usize, u64) = row?;
        out.entry(round).or_default().insert(id);
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[Real]) -> (Real, Real) {
    let n = xs.len() as Real;
    let m = xs.iter().sum::<Real>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<Real>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn write_summary(path: &Path, rows: &[RoundRow]) -> CliResult<()> {
    let finals = final_rows(rows);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "mean", "std", "n"])?;
    let metrics: [(&str, fn(&RoundRow) -> Option<Real>); 4] = [
        ("test_nme", |r| Some(r.test_nme)),
        ("test_auc", |r| Some(r.test_auc)),
        ("test_fr", |r| Some(r.test_fr)),
        ("pseudo_noise_mean", |r| r.pseudo_noise_mean),
    ];
    for (name, f) in metrics {
        let vals: Vec<Real> = finals.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            continue;
        }
        let (m, s) = mean_std(&vals);
        w.write_record([name.to_string(), m.to_string(), s.to_string(), vals.len().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Relative paths of every file under `dir`, sorted, `/`-separated.
pub fn list_files(dir: &Path) -> CliResult<Vec<String>> {
    fn walk(root: &Path, cur: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for e in fs::read_dir(cur)? {
            let e = e?;
            let p = e.path();
            if e.file_type()?.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Write the checksum manifest over every run artifact except wall-time data.
pub fn write_checksums(dir: &Path) -> CliResult<()> {
    let mut text = String::new();
    for rel in list_files(dir)? {
        if rel == CHECKSUMS || rel == TIMING {
            continue;
        }
        text.push_str(&format!("{}  {}\n", sha256_file(&dir.join(&rel))?, rel));
    }
    fs::write(dir.join(CHECKSUMS), text)?;
    Ok(())
}

pub fn read_checksums(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once("  ")
                .map(|(h, p)| (p.to_string(), h.to_string()))
                .ok_or_else(|| CliError::Runtime(format!("{}: malformed line {l:?}", path.display())))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    /// Files written after the run (analyses, plot data); not covered.
    pub untracked: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

pub fn verify_checksums(dir: &Path) -> CliResult<VerifyReport> {
    let expected = read_checksums(&dir.join(CHECKSUMS))?;
    let mut report = VerifyReport::default();
    for (rel, hash) in &expected {
        let p = dir.join(rel);
        if !p.exists() {
            report.missing.push(rel.clone());
        } else if &sha256_file(&p)? != hash {
            report.mismatched.push(rel.clone());
        } else {
            report.checked += 1;
        }
    }
    for rel in list_files(dir)? {
        if rel != CHECKSUMS && rel != TIMING && !expected.contains_key(&rel) {
            report.untracked.push(rel);
        }
    }
    Ok(report)
}

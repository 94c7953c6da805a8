//! Experiment configuration: defaults, schema versioning, `--key value`
//! overrides and validation with field-qualified diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use stld_core::domain::Pathway;
use stld_core::metrics::Normalizer;
use stld_core::selftrain::{EngineConfig, Strategy};
use stld_core::synth::TaskConfig;
use stld_core::Real;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub labeled_ratio: Real,
    /// Pose-latent truncation of the labeled pool; 0 draws uniformly.
    pub bias_knob: Real,
    /// Fixed split seed; by default each run seed also seeds its split.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { labeled_ratio: 0.05, bias_knob: 0.0, seed: None }
    }
}

/// Independently initialised supervised model saved next to each seed's run,
/// used by the gradient-correlation analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub seed_offset: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { enabled: true, seed_offset: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub split: SplitConfig,
    pub engine: EngineConfig,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: TaskConfig::default(),
            n_train: 1000,
            n_test: 300,
            split: SplitConfig::default(),
            engine: EngineConfig::for_pathway(Pathway::Coordinate),
            strategy: Strategy::stld(),
            seeds: vec![0, 1, 2, 3, 4],
            probe: ProbeConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    /// Parse, migrate and apply overrides, then validate. Nothing is computed
    /// before this returns.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let raw = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(raw, overrides)
    }

    pub fn from_value(mut raw: Value, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        migrate(&mut raw)?;
        // A pathway switch also switches the pathway-specific engine defaults.
        let pathway_override = overrides.iter().find(|(k, _)| k == "engine.pathway").map(|(_, v)| v.clone());
        let pathway = pathway_override
            .or_else(|| raw.pointer("/engine/pathway").cloned())
            .map(|v| serde_json::from_value::<Pathway>(v).map_err(|e| field("engine.pathway", e)))
            .transpose()?;
        let mut base = serde_json::to_value(Self::default()).expect("default serializes");
        if let Some(p) = pathway {
            base["engine"] = serde_json::to_value(EngineConfig::for_pathway(p)).expect("engine serializes");
        }
        merge(&mut base, &raw);
        for (key, value) in overrides {
            set_path(&mut base, key, value.clone())?;
        }
        let mut cfg: Self = serde_json::from_value(base.clone()).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        // the canonical shape follows grid and landmark count unless given explicitly
        let shape_given = raw.pointer("/task/base_shape").is_some() || overrides.iter().any(|(k, _)| k == "task.base_shape");
        if !shape_given {
            cfg.task.base_shape = TaskConfig::new(cfg.task.grid, cfg.task.n_landmarks).base_shape;
            base["task"]["base_shape"] = serde_json::to_value(&cfg.task.base_shape).expect("shape serializes");
        }
        let resolved = serde_json::to_value(&cfg).expect("config serializes");
        if let Some(path) = unknown_path(&base, &resolved, "") {
            return Err(field(&path, "unknown field"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        self.task.validate().map_err(|e| field("task", e))?;
        if self.n_train == 0 {
            return Err(field("n_train", "must be positive"));
        }
        if self.n_test == 0 {
            return Err(field("n_test", "must be positive"));
        }
        let s = &self.split;
        if !(s.labeled_ratio > 0.0 && s.labeled_ratio <= 1.0) {
            return Err(field("split.labeled_ratio", format!("{} outside (0, 1]", s.labeled_ratio)));
        }
        if (s.labeled_ratio * self.n_train as Real).round() < 1.0 {
            return Err(field(
                "split.labeled_ratio",
                format!("{} of {} samples leaves no labeled sample", s.labeled_ratio, self.n_train),
            ));
        }
        if (s.labeled_ratio * self.n_train as Real).round() as usize >= self.n_train && !matches!(self.strategy, Strategy::SupervisedOnly) {
            return Err(field("split.labeled_ratio", "self-training needs at least one unlabeled sample"));
        }
        if !(0.0..=1.0).contains(&s.bias_knob) {
            return Err(field("split.bias_knob", format!("{} outside [0, 1]", s.bias_knob)));
        }
        let e = &self.engine;
        e.stage.validate().map_err(|err| field("engine.stage", err))?;
        if e.hidden == 0 {
            return Err(field("engine.hidden", "must be positive"));
        }
        if e.rounds == 0 {
            return Err(field("engine.rounds", "must be positive"));
        }
        if e.curriculum.kind != e.pathway {
            return Err(field(
                "engine.curriculum.kind",
                format!("{} does not match engine.pathway {}", e.curriculum.kind, e.pathway),
            ));
        }
        if e.curriculum.rounds != e.rounds {
            return Err(field(
                "engine.curriculum.rounds",
                format!("{} does not match engine.rounds {}", e.curriculum.rounds, e.rounds),
            ));
        }
        e.curriculum.check(true).map_err(|err| field("engine.curriculum", err))?;
        if !(e.fr_cutoff > 0.0 && e.fr_cutoff.is_finite()) {
            return Err(field("engine.fr_cutoff", "must be positive"));
        }
        match e.normalizer {
            Normalizer::InterLandmark(i, j) => {
                let n = self.task.n_landmarks;
                if i >= n || j >= n || i == j {
                    return Err(field("engine.normalizer", format!("landmark pair ({i}, {j}) invalid for {n} landmarks")));
                }
            }
            Normalizer::ImageSize(sz) if !(sz > 0.0) => return Err(field("engine.normalizer", "image size must be positive")),
            Normalizer::ImageSize(_) => {}
        }
        self.strategy.validate(e.pathway).map_err(|err| match err {
            stld_core::Error::NoConfidence => field(
                "strategy",
                format!("{} selects by confidence, which the {} pathway does not output", self.strategy.name(), e.pathway),
            ),
            other => field("strategy", other),
        })?;
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(field("seeds", format!("duplicate seed {d}")));
        }
        Ok(())
    }

    /// Stable identity of the experiment: output location excluded.
    pub fn run_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        format!("{digest:x}")[..12].to_string()
    }

    /// Resolved config as persisted in a run directory: the output location
    /// is not part of the experiment.
    pub fn to_pretty_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }
}

fn migrate(raw: &mut Value) -> Result<(), CliError> {
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| CliError::Validation("config: top level must be a JSON object".into()))?;
    match obj.get("schema_version") {
        // unversioned drafts predate nothing but the defaults; adopt the current schema
        None => {
            obj.insert("schema_version".into(), SCHEMA_VERSION.into());
            Ok(())
        }
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => Ok(()),
        Some(v) => Err(field(
            "schema_version",
            format!("{v} is not supported by this build (supports {SCHEMA_VERSION})"),
        )),
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                // an explicit strategy replaces the default wholesale: variants carry different fields
                if k == "strategy" || !b.contains_key(k) {
                    b.insert(k.clone(), v.clone());
                } else {
                    merge(b.get_mut(k).expect("present"), v);
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override --{key}: malformed key")));
    }
    if parts[0] == "strategy" && parts.len() == 2 && parts[1] == "kind" {
        // switching variants drops the old variant's parameters
        root["strategy"] = serde_json::json!({ "kind": value });
        return Ok(());
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = match cur {
            Value::Object(m) => m.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(CliError::Validation(format!("override --{key}: {p} is not an object"))),
        };
    }
    match cur {
        Value::Object(m) => {
            m.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(CliError::Validation(format!("override --{key}: parent is not an object"))),
    }
}

/// First object key present in `given` but dropped by deserialization.
fn unknown_path(given: &Value, resolved: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(r)) = (given, resolved) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => return Some(path),
            Some(rv) => {
                if let Some(p) = unknown_path(v, rv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

/// Parse `--a.b value` / `--a.b=value` pairs. Values are JSON when they parse
/// as JSON, strings otherwise.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(key) = a.strip_prefix("--") else {
            return Err(CliError::Validation(format!("unexpected argument {a:?}; overrides look like --key.path value")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Validation(format!("override --{key} is missing a value")))?;
                i += 1;
                (key.to_string(), v.clone())
            }
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
        i += 1;
    }
    Ok(out)
}

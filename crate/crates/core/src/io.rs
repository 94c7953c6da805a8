//! On-disk formats.
//!
//! Dataset directory:
//!
//! ```text
//! manifest.json          ids per split, image size, generator config
//! samples.csv            id,split,pose
//! gt.csv                 id,landmark_index,x,y   (labeled and test supervision)
//! hidden_gt.csv          id,landmark_index,x,y   (measurement only)
//! rasters/<id>.bin       3 x u32 LE header (H0, W0, channels) + f32 LE values
//! ```
//!
//! Checkpoints are one JSON header line followed by the parameters as
//! little-endian `f64`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::synth::TaskConfig;
use crate::tinynet::ModelSpec;
use crate::{Landmarks, Model, Real};

pub const DATASET_FORMAT: &str = "stld-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "stld-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub landmarks: usize,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub test: Vec<u64>,
    /// Generator settings, when the data is synthetic.
    pub generator: Option<TaskConfig>,
    pub seed: Option<u64>,
    pub labeled_ratio: Real,
    pub bias_knob: Real,
}

pub fn write_raster(path: &Path, image: &Array2<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (h, wd) = image.dim();
    for v in [h as u32, wd as u32, 1u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in image.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 1 {
        return Err(Error::Format(format!("{}: {c} channels, only 1 is supported", path.display())));
    }
    let body = &bytes[12..];
    if body.len() != h * w * 4 {
        return Err(Error::Format(format!("{}: {} data bytes for {h}x{w}", path.display(), body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("sized"))
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    id: u64,
    landmark_index: usize,
    x: Real,
    y: Real,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    id: u64,
    split: String,
    pose: Real,
}

fn write_landmarks<'a>(path: &Path, rows: impl IntoIterator<Item = (u64, &'a Landmarks)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, lm) in rows {
        for (k, p) in lm.points().iter().enumerate() {
            w.serialize(LandmarkRow { id, landmark_index: k, x: p[0], y: p[1] })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_landmarks(path: &Path) -> Result<BTreeMap<u64, Landmarks>> {
    let mut points: BTreeMap<u64, Vec<(usize, [Real; 2])>> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: LandmarkRow = row?;
        points.entry(r.id).or_default().push((r.landmark_index, [r.x, r.y]));
    }
    points
        .into_iter()
        .map(|(id, mut pts)| {
            pts.sort_by_key(|p| p.0);
            if pts.iter().enumerate().any(|(i, p)| p.0 != i) {
                return Err(Error::Format(format!("{}: landmark indices of id {id} are not 0..N", path.display())));
            }
            Ok((id, Landmarks::new(pts.into_iter().map(|p| p.1).collect())?))
        })
        .collect()
}

/// Write `dataset` into `dir` (created if missing).
///
/// Reads hidden ground truth, so it must not run inside a training scope.
pub fn save_dataset(dir: &Path, dataset: &Dataset, generator: Option<&TaskConfig>, seed: Option<u64>, bias_knob: Real) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("rasters"))?;
    let (height, width) = dataset.image_size();
    let landmarks = dataset.labeled[0].gt.as_ref().map(|g| g.len()).unwrap_or(0);
    let splits = [("labeled", &dataset.labeled), ("unlabeled", &dataset.unlabeled), ("test", &dataset.test)];
    let mut samples = csv::Writer::from_path(dir.join("samples.csv"))?;
    for (name, split) in splits {
        for s in split.iter() {
            write_raster(&dir.join("rasters").join(format!("{}.bin", s.id)), &s.image)?;
            samples.serialize(SampleRow { id: s.id, split: name.into(), pose: s.pose })?;
        }
    }
    samples.flush()?;
    let visible = dataset.labeled.iter().chain(&dataset.test).filter_map(|s| s.gt.as_ref().map(|g| (s.id, g)));
    write_landmarks(&dir.join("gt.csv"), visible)?;
    let all = dataset.labeled.iter().chain(&dataset.unlabeled).chain(&dataset.test);
    write_landmarks(&dir.join("hidden_gt.csv"), all.filter_map(|s| s.hidden_gt().map(|g| (s.id, g))))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        height,
        width,
        channels: 1,
        landmarks,
        labeled: dataset.labeled.iter().map(|s| s.id).collect(),
        unlabeled: dataset.unlabeled.iter().map(|s| s.id).collect(),
        test: dataset.test.iter().map(|s| s.id).collect(),
        generator: generator.cloned(),
        seed,
        labeled_ratio: dataset.labeled_ratio(),
        bias_knob,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("{}: not a dataset manifest", dir.display())));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {} unsupported (expected {DATASET_VERSION})", manifest.version)));
    }
    let mut poses = BTreeMap::new();
    for row in csv::Reader::from_path(dir.join("samples.csv"))?.deserialize() {
        let r: SampleRow = row?;
        poses.insert(r.id, r.pose);
    }
    let gt = read_landmarks(&dir.join("gt.csv"))?;
    let hidden = read_landmarks(&dir.join("hidden_gt.csv"))?;
    let load = |ids: &[u64], visible: bool| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&id| {
                let image = read_raster(&dir.join("rasters").join(format!("{id}.bin")))?;
                if image.dim() != (manifest.height, manifest.width) {
                    return Err(Error::Format(format!("raster {id} is {:?}", image.dim())));
                }
                let g = if visible {
                    Some(gt.get(&id).cloned().ok_or_else(|| Error::Format(format!("no gt rows for id {id}")))?)
                } else {
                    None
                };
                let pose = *poses.get(&id).ok_or_else(|| Error::Format(format!("no samples.csv row for id {id}")))?;
                Ok(Sample::new(id, image, g, hidden.get(&id).cloned(), pose))
            })
            .collect()
    };
    let dataset = Dataset {
        labeled: load(&manifest.labeled, true)?,
        unlabeled: load(&manifest.unlabeled, false)?,
        test: load(&manifest.test, true)?,
    };
    Ok((dataset, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    /// Optimizer steps taken to reach these weights.
    pub step: u64,
    pub params: usize,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: *model.spec(),
        step,
        params: model.param_count(),
    };
    w.write_all(serde_json::to_string(&header)?.as_bytes())?;
    w.write_all(b"\n")?;
    for v in model.params_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(Model, CheckpointHeader)> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != header.params * 8 {
        return Err(Error::Format(format!("{} parameter bytes, header says {}", body.len(), header.params * 8)));
    }
    let flat: Vec<Real> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let mut model = Model::zeros(header.spec)?;
    model.set_params_flat(&flat)?;
    model.set_version(0);
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &Model, step: u64) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, step)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    read_checkpoint(File::open(path)?)
}

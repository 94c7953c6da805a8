//! Images, landmark annotations, dataset splits and pseudo-label bookkeeping.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{Landmarks, Real, Scalar};

/// `N` two-dimensional points in pixel units, `x` along columns and `y` along rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LandmarkSet<T> {
    points: Vec<[T; 2]>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<[T; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("landmark coordinates must be finite");
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    pub fn point(&self, k: usize) -> [T; 2] {
        self.points[k]
    }

    /// Clamp every point into `[0, width) x [0, height)`.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        let below = |n: usize| T::lit(n as f64) - T::lit(1e-9);
        let points = self
            .points
            .iter()
            .map(|&[x, y]| [x.max(T::zero()).min(below(width)), y.max(T::zero()).min(below(height))])
            .collect();
        Self { points }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        self.points
            .iter()
            .all(|&[x, y]| x >= T::zero() && y >= T::zero() && x < w && y < h)
    }

    /// Per-landmark Euclidean distances to `other`.
    pub fn distances(&self, other: &Self) -> Vec<T> {
        assert_eq!(self.len(), other.len(), "landmark count mismatch");
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .collect()
    }

    pub fn mean_distance(&self, other: &Self) -> T {
        let d = self.distances(other);
        d.iter().copied().sum::<T>() / T::lit(d.len() as f64)
    }

    /// Coordinates divided by the image extent, flattened as `[x0, y0, x1, y1, ..]`.
    pub fn to_normalized(&self, width: usize, height: usize) -> Vec<T> {
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        self.points.iter().flat_map(|&[x, y]| [x / w, y / h]).collect()
    }

    pub fn from_normalized(flat: &[T], width: usize, height: usize) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape(format!("odd coordinate vector length {}", flat.len())));
        }
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        Self::new(flat.chunks_exact(2).map(|c| [c[0] * w, c[1] * h]).collect())
    }

    pub fn cast<U: Scalar>(&self) -> LandmarkSet<U> {
        LandmarkSet {
            points: self.points.iter().map(|&[x, y]| [U::lit(x.as_f64()), U::lit(y.as_f64())]).collect(),
        }
    }
}

thread_local! {
    static TRAINING_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Marks the current thread as executing a training code path.
///
/// While any scope is alive, [`Sample::hidden_gt`] panics.
pub struct TrainingScope {
    _private: (),
}

impl TrainingScope {
    pub fn enter() -> Self {
        TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
        Self { _private: () }
    }

    pub fn active() -> bool {
        TRAINING_DEPTH.with(|d| d.get() > 0)
    }
}

impl Drop for TrainingScope {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    /// Single-channel raster, row-major `H0 x W0`, values in `[0, 1]`.
    pub image: Array2<f32>,
    /// Supervision visible to training; present only on labeled and test samples.
    pub gt: Option<Landmarks>,
    hidden_gt: Option<Landmarks>,
    /// Generator pose latent mapped to `[0, 1]`; drives the biased split.
    pub pose: Real,
}

impl Sample {
    pub fn new(id: u64, image: Array2<f32>, gt: Option<Landmarks>, hidden_gt: Option<Landmarks>, pose: Real) -> Self {
        Self { id, image, gt, hidden_gt, pose }
    }

    /// Synthetic ground truth, for measurement only.
    ///
    /// # Panics
    /// When called inside a [`TrainingScope`].
    pub fn hidden_gt(&self) -> Option<&Landmarks> {
        assert!(
            !TrainingScope::active(),
            "hidden_gt of sample {} read from a training code path",
            self.id
        );
        self.hidden_gt.as_ref()
    }

    pub fn has_hidden_gt(&self) -> bool {
        self.hidden_gt.is_some()
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled_ratio(&self) -> Real {
        self.n_labeled() as Real / (self.n_labeled() + self.n_unlabeled()) as Real
    }

    pub fn unlabeled_ids(&self) -> BTreeSet<u64> {
        self.unlabeled.iter().map(|s| s.id).collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.labeled.first().expect("labeled split is never empty");
        (s.height(), s.width())
    }
}

/// Partition training samples into labeled and unlabeled splits.
///
/// `bias_knob = 0` draws the labeled split uniformly. For `bias_knob > 0` the
/// labeled samples are drawn only from the lowest `1 - bias_knob` fraction of
/// the pose latent (never fewer candidates than labeled slots), so at
/// `bias_knob = 1` the labeled split is the contiguous low-pose block.
pub fn split_dataset(
    train: Vec<Sample>,
    test: Vec<Sample>,
    labeled_ratio: Real,
    seed: u64,
    bias_knob: Real,
) -> Result<Dataset> {
    if train.is_empty() {
        return invalid("no training samples");
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return invalid(format!("labeled_ratio {labeled_ratio} outside (0, 1]"));
    }
    if !(0.0..=1.0).contains(&bias_knob) {
        return invalid(format!("bias_knob {bias_knob} outside [0, 1]"));
    }
    if train.iter().chain(&test).any(|s| !s.has_hidden_gt()) {
        return invalid("every synthetic sample must carry hidden ground truth");
    }
    let mut ids = BTreeSet::new();
    for s in train.iter().chain(&test) {
        if !ids.insert(s.id) {
            return invalid(format!("duplicate sample id {}", s.id));
        }
    }
    let n = train.len();
    let n_labeled = (labeled_ratio * n as Real).round() as usize;
    if n_labeled == 0 {
        return Err(Error::EmptyLabeledSplit { ratio: labeled_ratio, n });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train[a].pose.total_cmp(&train[b].pose).then(train[a].id.cmp(&train[b].id)));
    let pool = (((1.0 - bias_knob) * n as Real).round() as usize).clamp(n_labeled, n);
    let mut candidates = order[..pool].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = candidates[..n_labeled].iter().copied().collect();

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    for (i, mut s) in train.into_iter().enumerate() {
        if chosen.contains(&i) {
            s.gt = s.hidden_gt.clone();
            labeled.push(s);
        } else {
            s.gt = None;
            unlabeled.push(s);
        }
    }
    labeled.sort_by_key(|s| s.id);
    unlabeled.sort_by_key(|s| s.id);
    let test = test
        .into_iter()
        .map(|mut s| {
            s.gt = s.hidden_gt.clone();
            s
        })
        .collect();
    Ok(Dataset { labeled, unlabeled, test })
}

/// Which detector family a model, loss or curriculum belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Heatmap,
    Coordinate,
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pathway::Heatmap => "heatmap",
            Pathway::Coordinate => "coordinate",
        })
    }
}

/// How per-landmark confidences collapse into one sample confidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceAgg {
    #[default]
    Mean,
    Min,
}

/// A model's estimate for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub landmarks: Landmarks,
    /// Per-landmark confidences; absent for coordinate regression.
    pub confidences: Option<Vec<Real>>,
}

impl Prediction {
    pub fn sample_confidence(&self, agg: ConfidenceAgg) -> Option<Real> {
        let c = self.confidences.as_ref()?;
        Some(match agg {
            ConfidenceAgg::Mean => c.iter().sum::<Real>() / c.len() as Real,
            ConfidenceAgg::Min => c.iter().copied().fold(Real::INFINITY, Real::min),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub prediction: Prediction,
    pub round_estimated: usize,
}

/// Pseudo-labels for exactly the unlabeled ids of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoStore {
    ids: BTreeSet<u64>,
    entries: BTreeMap<u64, PseudoLabel>,
}

impl PseudoStore {
    /// An empty store awaiting its first estimate.
    pub fn for_ids(ids: BTreeSet<u64>) -> Self {
        Self { ids, entries: BTreeMap::new() }
    }

    pub fn ids(&self) -> &BTreeSet<u64> {
        &self.ids
    }

    pub fn is_populated(&self) -> bool {
        !self.ids.is_empty() && self.entries.len() == self.ids.len()
    }

    pub fn get(&self, id: u64) -> Option<&PseudoLabel> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &PseudoLabel)> {
        self.entries.iter().map(|(&id, p)| (id, p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace every entry with a fresh estimate stamped `round`.
    pub fn update(&self, predictions: BTreeMap<u64, Prediction>, round: usize) -> Result<Self> {
        let missing: Vec<u64> = self.ids.iter().filter(|id| !predictions.contains_key(id)).copied().collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        if let Some(extra) = predictions.keys().find(|id| !self.ids.contains(id)) {
            return invalid(format!("prediction for id {extra} which is not unlabeled"));
        }
        let entries = predictions
            .into_iter()
            .map(|(id, prediction)| (id, PseudoLabel { prediction, round_estimated: round }))
            .collect();
        Ok(Self { ids: self.ids.clone(), entries })
    }
}

/// Free-function form of [`PseudoStore::update`].
pub fn update_pseudo(store: &PseudoStore, predictions: BTreeMap<u64, Prediction>, round: usize) -> Result<PseudoStore> {
    store.update(predictions, round)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, pose: Real) -> Sample {
        let lm = Landmarks::new(vec![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        Sample::new(id, Array2::zeros((8, 8)), None, Some(lm), pose)
    }

    fn samples(n: u64) -> Vec<Sample> {
        (0..n).map(|i| sample(i, (i as Real * 0.618).fract())).collect()
    }

    #[test]
    fn split_counts_and_disjointness() {
        let d = split_dataset(samples(1000), vec![], 0.05, 7, 0.0).unwrap();
        assert_eq!(d.n_labeled(), 50);
        assert_eq!(d.n_unlabeled(), 950);
        let l: BTreeSet<u64> = d.labeled.iter().map(|s| s.id).collect();
        let u = d.unlabeled_ids();
        assert!(l.is_disjoint(&u));
        assert_eq!(l.len() + u.len(), 1000);
        assert!(d.labeled.iter().all(|s| s.gt.is_some()));
        assert!(d.unlabeled.iter().all(|s| s.gt.is_none()));
        assert!((d.labeled_ratio() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn split_is_deterministic() {
        let ids = |d: &Dataset| d.labeled.iter().map(|s| s.id).collect::<Vec<_>>();
        let a = split_dataset(samples(1000), vec![], 0.05, 7, 0.0).unwrap();
        let b = split_dataset(samples(1000), vec![], 0.05, 7, 0.0).unwrap();
        let c = split_dataset(samples(1000), vec![], 0.05, 8, 0.0).unwrap();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn tiny_ratio_is_rejected() {
        let err = split_dataset(samples(1000), vec![], 0.0004, 7, 0.0).unwrap_err();
        assert!(err.to_string().contains("empty labeled split"), "{err}");
    }

    #[test]
    fn bias_restricts_pose_range() {
        let d = split_dataset(samples(1000), vec![], 0.05, 3, 0.8).unwrap();
        assert!(d.labeled.iter().all(|s| s.pose < 0.21), "labeled poses drawn from low range");
        let full = split_dataset(samples(1000), vec![], 0.05, 3, 1.0).unwrap();
        let max_pose = full.labeled.iter().map(|s| s.pose).fold(0.0, Real::max);
        assert!(max_pose < 0.051);
    }

    #[test]
    fn hidden_gt_firewall() {
        let s = sample(1, 0.0);
        assert!(s.hidden_gt().is_some());
        let r = std::panic::catch_unwind(|| {
            let _scope = TrainingScope::enter();
            s.hidden_gt().cloned()
        });
        assert!(r.is_err());
        assert!(!TrainingScope::active());
    }

    fn pred(x: Real) -> Prediction {
        Prediction { landmarks: Landmarks::new(vec![[x, x]]).unwrap(), confidences: Some(vec![0.5]) }
    }

    #[test]
    fn update_pseudo_replaces_and_stamps() {
        let ids: BTreeSet<u64> = (0..5).collect();
        let store = PseudoStore::for_ids(ids.clone());
        let preds: BTreeMap<u64, Prediction> = ids.iter().map(|&i| (i, pred(i as Real))).collect();
        let s1 = update_pseudo(&store, preds.clone(), 1).unwrap();
        let s2 = update_pseudo(&s1, preds, 2).unwrap();
        assert!(s2.iter().all(|(_, p)| p.round_estimated == 2));
        assert!(s1.iter().zip(s2.iter()).all(|(a, b)| a.1.prediction == b.1.prediction));
        assert_eq!(s2.ids(), &ids);
    }

    #[test]
    fn update_pseudo_reports_missing() {
        let ids: BTreeSet<u64> = (0..950).collect();
        let store = PseudoStore::for_ids(ids);
        let preds: BTreeMap<u64, Prediction> = (0..950).filter(|&i| i != 417).map(|i| (i, pred(1.0))).collect();
        match update_pseudo(&store, preds, 1) {
            Err(Error::MissingIds(m)) => assert_eq!(m, vec![417]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sample_confidence_aggregation() {
        let p = Prediction {
            landmarks: Landmarks::new(vec![[0.0, 0.0], [1.0, 1.0]]).unwrap(),
            confidences: Some(vec![0.2, 0.6]),
        };
        assert!((p.sample_confidence(ConfidenceAgg::Mean).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(p.sample_confidence(ConfidenceAgg::Min), Some(0.2));
    }
}

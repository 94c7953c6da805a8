//! Evaluation metrics and the diagnostic analyses: label density maps with KL
//! divergence, pseudo-label offset histograms, example forgetting and
//! gradient correlation.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::LandmarkSet;
use crate::error::{invalid, Error, Result};
use crate::losses::TargetLoss;
use crate::tinynet::TinyModel;
use crate::Scalar;

/// Distance used to normalize landmark errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Ground-truth distance between two landmarks (e.g. the outer eye corners).
    InterLandmark(usize, usize),
    /// A fixed size in pixels.
    ImageSize(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmeReport<T> {
    pub per_sample: Vec<T>,
    pub mean: T,
}

fn check_pairs<T: Scalar>(preds: &[LandmarkSet<T>], gts: &[LandmarkSet<T>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return invalid("no samples");
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("sample {i}: {} vs {} landmarks", p.len(), g.len())));
        }
    }
    Ok(())
}

/// Normalized mean error: per sample, mean Euclidean error divided by the normalizer.
pub fn nme<T: Scalar>(preds: &[LandmarkSet<T>], gts: &[LandmarkSet<T>], normalizer: Normalizer) -> Result<NmeReport<T>> {
    check_pairs(preds, gts)?;
    let mut per_sample = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let norm = match normalizer {
            Normalizer::InterLandmark(a, b) => {
                if a >= g.len() || b >= g.len() {
                    return invalid(format!("normalizer landmarks ({a}, {b}) out of range"));
                }
                let (pa, pb) = (g.point(a), g.point(b));
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
            }
            Normalizer::ImageSize(s) => T::lit(s),
        };
        if !(norm > T::zero()) {
            return invalid(format!("sample {i}: normalizer distance is zero (coincident landmarks)"));
        }
        per_sample.push(p.mean_distance(g) / norm);
    }
    let mean = per_sample.iter().copied().sum::<T>() / T::lit(per_sample.len() as f64);
    Ok(NmeReport { per_sample, mean })
}

/// Area under the cumulative error distribution on `[0, cutoff]` (normalized so a
/// perfect detector scores 1) and the failure rate `P(NME > cutoff)`.
///
/// The CED is a staircase; integrating it with the trapezoid rule over its
/// vertices is exact.
pub fn auc_fr<T: Scalar>(nmes: &[T], cutoff: T) -> Result<(T, T)> {
    if nmes.is_empty() {
        return invalid("auc_fr of an empty set");
    }
    if nmes.iter().any(|&e| !(e >= T::zero())) {
        return invalid("NMEs must be nonnegative");
    }
    if !(cutoff > T::zero()) {
        return invalid("cutoff must be positive");
    }
    let n = T::lit(nmes.len() as f64);
    let mut sorted = nmes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let fr = T::lit(sorted.iter().filter(|&&e| e > cutoff).count() as f64) / n;

    let mut area = T::zero();
    let mut x_prev = T::zero();
    let mut level = T::zero();
    for (i, &e) in sorted.iter().enumerate() {
        if e > cutoff {
            break;
        }
        // flat segment at the current level, then a vertical jump (zero width)
        area = area + level * (e - x_prev);
        x_prev = e;
        level = T::lit((i + 1) as f64) / n;
    }
    area = area + level * (cutoff - x_prev);
    Ok((area / cutoff, fr))
}

/// Mean radial error in physical units.
pub fn mre<T: Scalar>(preds: &[LandmarkSet<T>], gts: &[LandmarkSet<T>], units_per_px: T) -> Result<T> {
    check_pairs(preds, gts)?;
    if !(units_per_px > T::zero()) {
        return invalid("units_per_px must be positive");
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for d in p.distances(g) {
            total = total + d;
            count += 1;
        }
    }
    Ok(total / T::lit(count as f64) * units_per_px)
}

/// Per-landmark normalized `B x B` label histograms over a square extent.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap<T> {
    pub bins: usize,
    pub extent: T,
    /// `maps[k][[row, col]]`: row bins `y`, column bins `x`.
    pub maps: Vec<Array2<T>>,
}

pub const DENSITY_SMOOTHING: f64 = 1e-6;

pub fn density_map<T: Scalar>(sets: &[LandmarkSet<T>], bins: usize, extent: T) -> Result<DensityMap<T>> {
    if sets.is_empty() {
        return invalid("density_map of an empty list");
    }
    if bins == 0 || !(extent > T::zero()) {
        return invalid("density_map needs bins > 0 and a positive extent");
    }
    let n = sets[0].len();
    let width = extent / T::lit(bins as f64);
    let mut maps = vec![Array2::<T>::zeros((bins, bins)); n];
    for (i, s) in sets.iter().enumerate() {
        if s.len() != n {
            return Err(Error::Shape(format!("set {i} has {} landmarks, expected {n}", s.len())));
        }
        for (k, &[x, y]) in s.points().iter().enumerate() {
            if x < T::zero() || y < T::zero() || x > extent || y > extent {
                return invalid(format!("set {i} landmark {k} at ({x}, {y}) outside extent {extent}"));
            }
            let bx = (x / width).floor().to_usize().unwrap_or(0).min(bins - 1);
            let by = (y / width).floor().to_usize().unwrap_or(0).min(bins - 1);
            maps[k][[by, bx]] = maps[k][[by, bx]] + T::one();
        }
    }
    let eps = T::lit(DENSITY_SMOOTHING);
    for m in &mut maps {
        m.mapv_inplace(|c| c + eps);
        let total = m.sum();
        m.mapv_inplace(|c| c / total);
    }
    Ok(DensityMap { bins, extent, maps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlReport<T> {
    pub per_landmark: Vec<T>,
    pub mean: T,
}

/// `KL(anchor || other) = sum a ln(a / o)` per landmark, and the mean over landmarks.
pub fn kl_divergence<T: Scalar>(anchor: &DensityMap<T>, other: &DensityMap<T>) -> Result<KlReport<T>> {
    if anchor.maps.len() != other.maps.len() || anchor.bins != other.bins {
        return Err(Error::Shape(format!(
            "{} maps of {} bins vs {} maps of {} bins",
            anchor.maps.len(),
            anchor.bins,
            other.maps.len(),
            other.bins
        )));
    }
    let per_landmark: Vec<T> = anchor
        .maps
        .iter()
        .zip(&other.maps)
        .map(|(a, o)| kl_grid(a.as_slice().expect("standard"), o.as_slice().expect("standard")))
        .collect();
    let mean = per_landmark.iter().copied().sum::<T>() / T::lit(per_landmark.len().max(1) as f64);
    Ok(KlReport { per_landmark, mean })
}

/// KL divergence between two discrete distributions on the same support.
pub fn kl_grid<T: Scalar>(a: &[T], o: &[T]) -> T {
    a.iter()
        .zip(o)
        .filter(|(&p, _)| p > T::zero())
        .map(|(&p, &q)| p * (p / q).ln())
        .sum()
}

/// 2-D histogram of pseudo-label offsets `(dx, dy) = pseudo - gt`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseHistogram {
    /// Bins per axis; odd counts center a bin on zero offset.
    pub bins: usize,
    pub range: f64,
    /// `counts[[dy_bin, dx_bin]]`.
    pub counts: Array2<u64>,
    pub overflow: u64,
}

impl NoiseHistogram {
    pub fn total(&self) -> u64 {
        self.counts.sum() + self.overflow
    }

    /// Lower edge of bin `i` along either axis.
    pub fn edge(&self, i: usize) -> f64 {
        -self.range + 2.0 * self.range * i as f64 / self.bins as f64
    }
}

pub fn noise_histogram<T: Scalar>(
    pseudo: &[LandmarkSet<T>],
    gts: &[LandmarkSet<T>],
    range_px: f64,
    bins: usize,
) -> Result<NoiseHistogram> {
    check_pairs(pseudo, gts)?;
    if bins == 0 || !(range_px > 0.0) {
        return invalid("noise_histogram needs bins > 0 and a positive range");
    }
    let width = 2.0 * range_px / bins as f64;
    let index = |d: f64| -> Option<usize> {
        if d < -range_px || d > range_px {
            None
        } else {
            Some((((d + range_px) / width).floor() as usize).min(bins - 1))
        }
    };
    let mut counts = Array2::<u64>::zeros((bins, bins));
    let mut overflow = 0;
    for (p, g) in pseudo.iter().zip(gts) {
        for (a, b) in p.points().iter().zip(g.points()) {
            let (dx, dy) = ((a[0] - b[0]).as_f64(), (a[1] - b[1]).as_f64());
            match (index(dx), index(dy)) {
                (Some(cx), Some(cy)) => counts[[cy, cx]] += 1,
                _ => overflow += 1,
            }
        }
    }
    Ok(NoiseHistogram { bins, range: range_px, counts, overflow })
}

/// Equal-count bins over `values`: returns, for each bin, the indices it holds
/// (ascending value order; ties broken by index).
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = order.len();
    (0..bins)
        .map(|b| order[b * n / bins.max(1)..(b + 1) * n / bins.max(1)].to_vec())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingBin {
    pub noise_lo: Option<f64>,
    pub noise_hi: Option<f64>,
    pub mean_noise: Option<f64>,
    pub count: usize,
    /// Mean distance between post-training predictions and the pseudo-labels trained on.
    pub delta: Option<f64>,
    pub delta_comparator: Option<f64>,
}

/// Example-forgetting curve over equal-count noise bins.
///
/// Noise of a sample is the mean pixel error of its pseudo-label; delta is the
/// mean pixel distance between the model's predictions after training and the
/// pseudo-label it was trained on. Empty bins report `None`.
pub fn forgetting_curve<T: Scalar>(
    pseudo_used: &[LandmarkSet<T>],
    preds_after: &[LandmarkSet<T>],
    comparator_preds: Option<&[LandmarkSet<T>]>,
    hidden_gts: &[LandmarkSet<T>],
    noise_bins: usize,
) -> Result<Vec<ForgettingBin>> {
    check_pairs(pseudo_used, hidden_gts)?;
    check_pairs(preds_after, pseudo_used)?;
    if let Some(c) = comparator_preds {
        check_pairs(c, pseudo_used)?;
    }
    if noise_bins == 0 {
        return invalid("noise_bins must be positive");
    }
    let noise: Vec<f64> = pseudo_used.iter().zip(hidden_gts).map(|(p, g)| p.mean_distance(g).as_f64()).collect();
    let delta = |preds: &[LandmarkSet<T>], idx: &[usize]| -> Option<f64> {
        if idx.is_empty() {
            return None;
        }
        Some(idx.iter().map(|&i| preds[i].mean_distance(&pseudo_used[i]).as_f64()).sum::<f64>() / idx.len() as f64)
    };
    Ok(quantile_bins(&noise, noise_bins)
        .into_iter()
        .map(|idx| {
            let vals: Vec<f64> = idx.iter().map(|&i| noise[i]).collect();
            ForgettingBin {
                noise_lo: vals.first().copied(),
                noise_hi: vals.last().copied(),
                mean_noise: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                count: idx.len(),
                delta: delta(preds_after, &idx),
                delta_comparator: comparator_preds.and_then(|c| delta(c, &idx)),
            }
        })
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub count: usize,
    /// Mean loss (against the pseudo-labels) of the group's samples.
    pub mean_loss_scale: f64,
    pub r: Option<f64>,
}

/// Correlation between final-layer gradients under ground-truth and pseudo-label
/// supervision, grouped by loss scale.
///
/// Every sample is its own batch, so each gradient pair comes from the same
/// input. Samples are ranked by their loss against the pseudo-label; group 0
/// holds the largest loss scales and the last group the smallest. Within a
/// group the paired gradient vectors are concatenated and Pearson's r is
/// computed over all coordinates.
pub fn gradient_correlation<T: Scalar>(
    model: &TinyModel<T>,
    inputs: ndarray::ArrayView2<'_, T>,
    gt_targets: &[LandmarkSet<T>],
    pseudo_targets: &[LandmarkSet<T>],
    loss: TargetLoss,
    image: (usize, usize),
    groups: usize,
) -> Result<Vec<CorrelationGroup>> {
    check_pairs(pseudo_targets, gt_targets)?;
    if inputs.nrows() != gt_targets.len() {
        return Err(Error::Shape(format!("{} inputs for {} targets", inputs.nrows(), gt_targets.len())));
    }
    if groups == 0 {
        return invalid("groups must be positive");
    }
    let spec = *model.spec();
    let mut scale = Vec::with_capacity(gt_targets.len());
    let mut grad_gt = Vec::with_capacity(gt_targets.len());
    let mut grad_pseudo = Vec::with_capacity(gt_targets.len());
    for (i, row) in inputs.axis_iter(Axis(0)).enumerate() {
        let x = row.insert_axis(Axis(0));
        let (out, cache) = model.forward(x)?;
        let out = out.row(0).to_vec();
        let last = |target: &LandmarkSet<T>| -> Result<(T, Vec<f64>)> {
            let tv = loss.target_vector(target, &spec, image)?;
            let (l, g) = loss.evaluate(&out, &tv)?;
            let g = ndarray::Array2::from_shape_vec((1, g.len()), g).expect("row");
            let grads = model.backward(&cache, g.view())?;
            Ok((l, grads.last_layer_flat().into_iter().map(|v| v.as_f64()).collect()))
        };
        let (_, g_gt) = last(&gt_targets[i])?;
        let (l_ps, g_ps) = last(&pseudo_targets[i])?;
        scale.push(l_ps.as_f64());
        grad_gt.push(g_gt);
        grad_pseudo.push(g_ps);
    }
    // descending loss scale: negate for the ascending binning helper
    let neg: Vec<f64> = scale.iter().map(|s| -s).collect();
    Ok(quantile_bins(&neg, groups)
        .into_iter()
        .map(|idx| {
            let xs: Vec<f64> = idx.iter().flat_map(|&i| grad_gt[i].iter().copied()).collect();
            let ys: Vec<f64> = idx.iter().flat_map(|&i| grad_pseudo[i].iter().copied()).collect();
            CorrelationGroup {
                count: idx.len(),
                mean_loss_scale: if idx.is_empty() { f64::NAN } else { idx.iter().map(|&i| scale[i]).sum::<f64>() / idx.len() as f64 },
                r: pearson(&xs, &ys),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Landmarks;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(points: &[[f64; 2]]) -> Landmarks {
        Landmarks::new(points.to_vec()).unwrap()
    }

    #[test]
    fn nme_examples() {
        let g = lm(&[[0.0, 0.0], [100.0, 0.0], [50.0, 50.0]]);
        let r = nme(&[g.clone()], &[g.clone()], Normalizer::InterLandmark(0, 1)).unwrap();
        assert_eq!(r.mean, 0.0);
        let p = lm(&[[5.0, 0.0], [100.0, 5.0], [47.0, 54.0]]);
        let r = nme(&[p], &[g], Normalizer::InterLandmark(0, 1)).unwrap();
        assert!((r.mean - 0.05).abs() < 1e-15);
    }

    #[test]
    fn nme_rejects_coincident_normalizer() {
        let g = lm(&[[3.0, 3.0], [3.0, 3.0]]);
        let err = nme(&[g.clone()], &[g], Normalizer::InterLandmark(0, 1)).unwrap_err();
        assert!(err.to_string().contains("sample 0"));
    }

    #[test]
    fn nme_image_size_normalizer() {
        let g = lm(&[[0.0, 0.0], [10.0, 0.0]]);
        let p = lm(&[[2.0, 0.0], [10.0, 2.0]]);
        let r = nme(&[p], &[g], Normalizer::ImageSize(200.0)).unwrap();
        assert!((r.mean - 0.01).abs() < 1e-15);
    }

    #[test]
    fn auc_fr_extremes() {
        assert_eq!(auc_fr(&[0.0, 0.0, 0.0], 0.1).unwrap(), (1.0, 0.0));
        assert_eq!(auc_fr(&[0.2, 0.11, 0.5], 0.1).unwrap(), (0.0, 1.0));
        assert!(auc_fr::<f64>(&[], 0.1).is_err());
        assert!(auc_fr(&[-0.1], 0.1).is_err());
    }

    /// Fine-grid Riemann sum of the empirical CED, independent of the staircase walk.
    fn ced_oracle(nmes: &[f64], cutoff: f64) -> f64 {
        let steps = 2_000_000;
        let dx = cutoff / steps as f64;
        let mut sorted = nmes.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut acc = 0.0;
        let mut j = 0;
        for s in 0..steps {
            let x = (s as f64 + 0.5) * dx;
            while j < sorted.len() && sorted[j] <= x {
                j += 1;
            }
            acc += j as f64 / sorted.len() as f64 * dx;
        }
        acc / cutoff
    }

    #[test]
    fn auc_matches_fine_grid_oracle() {
        let (auc, fr) = auc_fr(&[0.05, 0.15], 0.1).unwrap();
        assert_eq!(fr, 0.5);
        assert!((auc - ced_oracle(&[0.05, 0.15], 0.1)).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..57).map(|_| rng.random_range(0.0..0.14)).collect();
        let (auc, _) = auc_fr(&xs, 0.1).unwrap();
        assert!((auc - ced_oracle(&xs, 0.1)).abs() < 1e-6);
    }

    #[test]
    fn mre_examples() {
        let g = lm(&[[1.0, 1.0]]);
        assert_eq!(mre(&[g.clone()], &[g.clone()], 0.5).unwrap(), 0.0);
        let p = lm(&[[3.0, 1.0]]);
        assert_eq!(mre(&[p.clone()], &[g.clone()], 0.5).unwrap(), 1.0);
        assert_eq!(mre(&[p], &[g], 1.0).unwrap(), 2.0);
    }

    #[test]
    fn density_single_point_and_boundary() {
        let d = density_map(&[lm(&[[128.0, 128.0]])], 12, 256.0).unwrap();
        let (_, (r, c)) = d.maps[0]
            .indexed_iter()
            .map(|(ix, &v)| (v, ix))
            .fold((0.0, (0, 0)), |acc, (v, ix)| if v > acc.0 { (v, ix) } else { acc });
        assert_eq!((r, c), (6, 6));
        assert!(d.maps[0][[6, 6]] > 0.999);
        assert!((d.maps[0].sum() - 1.0).abs() < 1e-12);

        let e = density_map(&[lm(&[[256.0, 0.0]])], 12, 256.0).unwrap();
        assert!(e.maps[0][[0, 11]] > 0.999);
        assert!(density_map(&[lm(&[[257.0, 0.0]])], 12, 256.0).is_err());
        assert!(density_map::<f64>(&[], 12, 256.0).is_err());
    }

    fn uniform_ratio(n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<Landmarks> = (0..n)
            .map(|_| lm(&[[rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]]))
            .collect();
        let d = density_map(&sets, 12, 256.0).unwrap();
        let max = d.maps[0].iter().copied().fold(0.0, f64::max);
        let min = d.maps[0].iter().copied().fold(1.0, f64::min);
        max / min
    }

    /// 144 bins at 10^5 points hold ~694 each; the max/min spread of that many
    /// binomial counts is itself about 1.2, so the 1.2 bound is checked at 10^6.
    #[test]
    fn density_of_uniform_coordinates_flattens() {
        let coarse = uniform_ratio(100_000, 10);
        assert!(coarse < 1.3, "ratio {coarse}");
        let fine = uniform_ratio(1_000_000, 10);
        assert!(fine < 1.2, "ratio {fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn kl_examples() {
        let a = DensityMap { bins: 2, extent: 1.0, maps: vec![Array2::from_elem((2, 2), 0.25)] };
        let o = DensityMap { bins: 2, extent: 1.0, maps: vec![Array2::from_shape_vec((2, 2), vec![0.7, 0.1, 0.1, 0.1]).unwrap()] };
        assert_eq!(kl_divergence(&a, &a).unwrap().mean, 0.0);
        let expected = 0.25 * (0.25f64 / 0.7).ln() + 0.75 * (0.25f64 / 0.1).ln();
        let kl = kl_divergence(&a, &o).unwrap().mean;
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.4298).abs() < 1e-4);
        let bad = DensityMap { bins: 3, extent: 1.0, maps: vec![Array2::from_elem((3, 3), 1.0 / 9.0)] };
        assert!(kl_divergence(&a, &bad).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let draw = |rng: &mut ChaCha8Rng| {
                let sets: Vec<Landmarks> = (0..20).map(|_| lm(&[[rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)]])).collect();
                density_map(&sets, 6, 32.0).unwrap()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            assert!(kl_divergence(&a, &b).unwrap().mean >= 0.0);
        }
    }

    #[test]
    fn histogram_examples() {
        let g = vec![lm(&[[10.0, 10.0], [20.0, 5.0]]); 4];
        let h = noise_histogram(&g, &g, 5.0, 11).unwrap();
        assert_eq!(h.counts[[5, 5]], 8);
        assert_eq!(h.total(), 8);
        let shifted: Vec<Landmarks> = g.iter().map(|s| lm(&s.points().iter().map(|p| [p[0] + 3.0, p[1]]).collect::<Vec<_>>())).collect();
        let h = noise_histogram(&shifted, &g, 5.0, 11).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts[[5, 8]], 8);
        let far: Vec<Landmarks> = g.iter().map(|s| lm(&s.points().iter().map(|p| [p[0] + 9.0, p[1]]).collect::<Vec<_>>())).collect();
        assert_eq!(noise_histogram(&far, &g, 5.0, 11).unwrap().overflow, 8);
    }

    #[test]
    fn histogram_of_isotropic_noise_is_symmetric() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 1.5).unwrap();
        let gts = vec![lm(&[[16.0, 16.0]]); 10_000];
        let pseudo: Vec<Landmarks> = gts
            .iter()
            .map(|_| lm(&[[16.0 + normal.sample(&mut rng), 16.0 + normal.sample(&mut rng)]]))
            .collect();
        let h = noise_histogram(&pseudo, &gts, 6.0, 9).unwrap();
        let cols = h.counts.sum_axis(Axis(0));
        let rows = h.counts.sum_axis(Axis(1));
        // chi-square of each marginal against its mirror image
        for m in [cols, rows] {
            let mut chi = 0.0;
            for i in 0..4 {
                let (a, b) = (m[i] as f64, m[8 - i] as f64);
                let e = (a + b) / 2.0;
                chi += (a - e).powi(2) / e + (b - e).powi(2) / e;
            }
            // 4 degrees of freedom, 99.9% quantile 18.47
            assert!(chi < 18.47, "chi2 {chi}");
        }
    }

    #[test]
    fn forgetting_identities() {
        let gts: Vec<Landmarks> = (0..12).map(|i| lm(&[[10.0 + i as f64, 10.0]])).collect();
        let pseudo: Vec<Landmarks> = (0..12).map(|i| lm(&[[10.0 + i as f64 + 0.5 * i as f64, 10.0]])).collect();
        let memorized = forgetting_curve(&pseudo, &pseudo, None, &gts, 4).unwrap();
        assert!(memorized.iter().all(|b| b.delta == Some(0.0)));
        let truthful = forgetting_curve(&pseudo, &gts, Some(&pseudo), &gts, 4).unwrap();
        for b in &truthful {
            assert!((b.delta.unwrap() - b.mean_noise.unwrap()).abs() < 1e-12);
            assert_eq!(b.delta_comparator, Some(0.0));
        }
        let sparse = forgetting_curve(&pseudo[..2], &pseudo[..2], None, &gts[..2], 4).unwrap();
        assert!(sparse.iter().any(|b| b.delta.is_none() && b.count == 0));
    }

    #[test]
    fn pearson_and_spearman() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]), Some(-1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]), Some(1.0));
    }

    #[test]
    fn gradient_correlation_identity_and_antisymmetry() {
        use crate::tinynet::{ModelSpec, TinyModel};
        let spec = ModelSpec::coordinate(4, 3, 1);
        let model: TinyModel<f64> = TinyModel::init(spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((12, 16), || rng.random_range(0.0..1.0));
        let gts: Vec<Landmarks> = (0..12).map(|_| lm(&[[rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]])).collect();
        let groups = gradient_correlation(&model, x.view(), &gts, &gts, TargetLoss::Lp { p: 1.6 }, (4, 4), 3).unwrap();
        assert!(groups.iter().all(|g| (g.r.unwrap() - 1.0).abs() < 1e-12));

        // pseudo-label mirrored through the prediction: p = 2*y_hat - y flips every error sign
        let out = model.predict(x.view()).unwrap();
        let mirrored: Vec<Landmarks> = (0..12)
            .map(|i| {
                let g = gts[i].to_normalized(4, 4);
                let m: Vec<f64> = g.iter().enumerate().map(|(j, &v)| 2.0 * out[[i, j]] - v).collect();
                Landmarks::from_normalized(&m, 4, 4).unwrap()
            })
            .collect();
        let groups = gradient_correlation(&model, x.view(), &gts, &mirrored, TargetLoss::Lp { p: 1.0 }, (4, 4), 2).unwrap();
        assert!(groups.iter().all(|g| (g.r.unwrap() + 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn nme_invariances(
            pts in proptest::collection::vec((1.0f64..50.0, 1.0f64..50.0, -3.0f64..3.0, -3.0f64..3.0), 3..6),
            shift in (-20.0f64..20.0, -20.0f64..20.0),
            k in 0.5f64..4.0,
        ) {
            let g = lm(&pts.iter().map(|p| [p.0, p.1]).collect::<Vec<_>>());
            let p = lm(&pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect::<Vec<_>>());
            prop_assume!(g.distances(&lm(&[g.point(1); 3][..1].iter().cycle().take(g.len()).copied().collect::<Vec<_>>()))[0] > 1e-3);
            let base = nme(&[p.clone()], &[g.clone()], Normalizer::InterLandmark(0, 1)).unwrap().mean;
            let tr = |s: &Landmarks, f: &dyn Fn([f64; 2]) -> [f64; 2]| lm(&s.points().iter().map(|&q| f(q)).collect::<Vec<_>>());
            let moved = nme(&[tr(&p, &|q| [q[0] + shift.0, q[1] + shift.1])], &[tr(&g, &|q| [q[0] + shift.0, q[1] + shift.1])], Normalizer::InterLandmark(0, 1)).unwrap().mean;
            let scaled = nme(&[tr(&p, &|q| [q[0] * k, q[1] * k])], &[tr(&g, &|q| [q[0] * k, q[1] * k])], Normalizer::InterLandmark(0, 1)).unwrap().mean;
            prop_assert!((moved - base).abs() < 1e-9);
            prop_assert!((scaled - base).abs() < 1e-9);
        }

        #[test]
        fn auc_fr_bounds_and_monotone(xs in proptest::collection::vec(0.0f64..0.3, 1..40), c1 in 0.01f64..0.2, dc in 0.0f64..0.1) {
            let (auc, fr) = auc_fr(&xs, c1).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc) && (0.0..=1.0).contains(&fr));
            let (_, fr2) = auc_fr(&xs, c1 + dc).unwrap();
            prop_assert!(fr2 <= fr);
        }

        #[test]
        fn density_rows_normalized(xs in proptest::collection::vec((0.0f64..32.0, 0.0f64..32.0), 1..50)) {
            let sets: Vec<Landmarks> = xs.iter().map(|&(x, y)| lm(&[[x, y]])).collect();
            let d = density_map(&sets, 12, 32.0).unwrap();
            prop_assert!((d.maps[0].sum() - 1.0).abs() < 1e-12);
            prop_assert!(d.maps[0].iter().all(|&v| v > 0.0));
            prop_assert_eq!(kl_divergence(&d, &d).unwrap().mean, 0.0);
        }
    }
}

//! Regression losses with analytic gradients, and the granularity/weight
//! schedules that make up the task curriculum.
//!
//! All losses use mean reduction over elements (or heatmap cells).

use serde::{Deserialize, Serialize};

use crate::domain::{LandmarkSet, Pathway};
use crate::tinynet::ModelSpec;
use crate::error::{invalid, Error, Result};
use crate::{Real, Scalar};

/// `|e|^(p-1)`, the factor multiplying `sign(e)` in the `Lp` gradient.
#[inline]
pub fn lp_grad_weight<T: Scalar>(e: T, p: T) -> T {
    let a = e.abs();
    if p == T::one() {
        if a == T::zero() {
            T::zero()
        } else {
            T::one()
        }
    } else if p == T::lit(2.0) {
        a
    } else {
        a.powf(p - T::one())
    }
}

#[inline]
fn lp_term<T: Scalar>(e: T, p: T) -> T {
    let a = e.abs();
    if p == T::one() {
        a
    } else if p == T::lit(2.0) {
        T::lit(0.5) * a * a
    } else {
        a.powf(p) / p
    }
}

/// Mean `(1/p)|pred - target|^p` and its gradient with respect to `pred`.
///
/// Errors must lie in `[-1, 1]` (normalized coordinates); `p = 1` uses the sign
/// subgradient with zero at `e = 0`.
pub fn lp_loss<T: Scalar>(pred: &[T], target: &[T], p: T) -> Result<(T, Vec<T>)> {
    if !(p >= T::one()) {
        return invalid(format!("lp_loss needs p >= 1, got {p}"));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("pred {} vs target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return invalid("lp_loss of an empty vector");
    }
    let count = T::lit(pred.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&y_hat, &y) in pred.iter().zip(target) {
        let e = y_hat - y;
        if !(e.abs() <= T::one()) {
            return invalid(format!("error {e} outside [-1, 1]; coordinates must be normalized"));
        }
        loss = loss + lp_term(e, p);
        let s = if e > T::zero() {
            T::one()
        } else if e < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad.push(s * lp_grad_weight(e, p) / count);
    }
    Ok((loss / count, grad))
}

/// Mean `1/2 (pred - target)^2` over cells and its gradient.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("pred {} vs target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return invalid("mse_loss of an empty map");
    }
    let count = T::lit(pred.len() as f64);
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a - b;
            loss = loss + half * d * d;
            d / count
        })
        .collect();
    Ok((loss / count, grad))
}

/// Heatmap L2 loss over whole stacks.
pub fn heatmap_mse_loss<T: Scalar>(
    pred: &crate::codec::HeatmapStack<T>,
    target: &crate::codec::HeatmapStack<T>,
) -> Result<(T, ndarray::Array3<T>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let p = pred.values.as_standard_layout();
    let t = target.values.as_standard_layout();
    let (loss, grad) = mse_loss(p.as_slice().expect("standard layout"), t.as_slice().expect("standard layout"))?;
    Ok((loss, ndarray::Array3::from_shape_vec(pred.dim(), grad).expect("same shape")))
}

/// A regression task at a fixed granularity: Gaussian heatmap targets of a
/// given sigma, or an `Lp` loss on normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLoss {
    Heatmap { sigma: Real },
    Lp { p: Real },
}

impl TargetLoss {
    pub fn standard(pathway: Pathway) -> Self {
        Self::at(pathway, match pathway {
            Pathway::Heatmap => Curriculum::HEATMAP_STD_SIGMA,
            Pathway::Coordinate => Curriculum::COORD_STD_P,
        })
    }

    pub fn at(pathway: Pathway, granularity: Real) -> Self {
        match pathway {
            Pathway::Heatmap => Self::Heatmap { sigma: granularity },
            Pathway::Coordinate => Self::Lp { p: granularity },
        }
    }

    pub fn pathway(&self) -> Pathway {
        match self {
            Self::Heatmap { .. } => Pathway::Heatmap,
            Self::Lp { .. } => Pathway::Coordinate,
        }
    }

    pub fn granularity(&self) -> Real {
        match *self {
            Self::Heatmap { sigma } => sigma,
            Self::Lp { p } => p,
        }
    }

    /// The model-output-shaped target for `landmarks` on an `image = (height, width)` raster.
    pub fn target_vector<T: Scalar>(&self, landmarks: &LandmarkSet<T>, spec: &ModelSpec, image: (usize, usize)) -> Result<Vec<T>> {
        if self.pathway() != spec.pathway {
            return invalid(format!("{} loss on a {} model", self.pathway(), spec.pathway));
        }
        if landmarks.len() != spec.landmarks {
            return Err(Error::Shape(format!("{} landmarks, model predicts {}", landmarks.len(), spec.landmarks)));
        }
        match *self {
            Self::Heatmap { sigma } => {
                let (h, w) = spec.map;
                let scale = T::lit(image.1 as f64 / w as f64);
                let mut out = vec![T::zero(); spec.output()];
                crate::codec::encode_into(&landmarks.clamped(image.1, image.0), T::lit(sigma), h, w, scale, &mut out)?;
                Ok(out)
            }
            Self::Lp { .. } => Ok(landmarks.to_normalized(image.1, image.0)),
        }
    }

    /// Loss of one output row against a precomputed target vector, with its gradient.
    pub fn evaluate<T: Scalar>(&self, output: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
        match *self {
            Self::Heatmap { .. } => mse_loss(output, target),
            Self::Lp { p } => lp_loss(output, target, T::lit(p)),
        }
    }
}

/// Coarse-to-fine granularity schedule for rounds `2..=T`.
///
/// Heatmap curricula hold Gaussian sigmas ending at the standard sigma;
/// coordinate curricula hold `Lp` norms ending at `p = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub kind: Pathway,
    /// `values[t - 2]` is the granularity of round `t`.
    pub values: Vec<Real>,
    pub rounds: usize,
    /// Standard granularity (sigma for heatmaps, `p` for coordinates).
    pub standard: Real,
    /// Pseudo-loss weight for rounds strictly between 1 and `T`.
    pub lambda_sub: Real,
}

impl Curriculum {
    pub const HEATMAP_STD_SIGMA: Real = 1.5;
    pub const COORD_STD_P: Real = 1.0;

    pub fn heatmap_default() -> Self {
        Self {
            kind: Pathway::Heatmap,
            values: vec![2.2, 1.8, 1.5],
            rounds: 4,
            standard: Self::HEATMAP_STD_SIGMA,
            lambda_sub: 0.1,
        }
    }

    pub fn coordinate_default() -> Self {
        Self {
            kind: Pathway::Coordinate,
            values: vec![2.4, 1.6, 1.0],
            rounds: 4,
            standard: Self::COORD_STD_P,
            lambda_sub: 0.1,
        }
    }

    pub fn default_for(kind: Pathway) -> Self {
        match kind {
            Pathway::Heatmap => Self::heatmap_default(),
            Pathway::Coordinate => Self::coordinate_default(),
        }
    }

    /// Curriculum for `rounds` rounds that starts at `second` in round 2 and
    /// moves linearly to the standard value in round `T` (for `T = 4`, round 3
    /// gets the midpoint).
    pub fn interpolated(kind: Pathway, second: Real, rounds: usize, standard: Real, lambda_sub: Real) -> Self {
        let steps = rounds.saturating_sub(1).max(1);
        let values = (0..steps)
            .map(|i| {
                if steps == 1 {
                    standard
                } else {
                    second + (standard - second) * i as Real / (steps - 1) as Real
                }
            })
            .collect();
        Self { kind, values, rounds, standard, lambda_sub }
    }

    /// Check every invariant. Strict decrease is required unless `allow_flat`.
    pub fn check(&self, allow_flat: bool) -> Result<()> {
        if self.rounds < 2 {
            return invalid(format!("curriculum needs T >= 2, got {}", self.rounds));
        }
        if self.values.len() != self.rounds - 1 {
            return invalid(format!(
                "curriculum has {} values, T = {} needs {}",
                self.values.len(),
                self.rounds,
                self.rounds - 1
            ));
        }
        if !(self.lambda_sub > 0.0 && self.lambda_sub <= 1.0) {
            return invalid(format!("lambda_sub {} outside (0, 1]", self.lambda_sub));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return invalid("curriculum values must be finite and positive");
        }
        for w in self.values.windows(2) {
            let ok = if allow_flat { w[1] <= w[0] } else { w[1] < w[0] };
            if !ok {
                return invalid(format!("curriculum values must decrease: {:?}", self.values));
            }
        }
        let last = *self.values.last().expect("nonempty");
        match self.kind {
            Pathway::Heatmap => {
                if last != self.standard {
                    return invalid(format!("last sigma {last} must equal the standard sigma {}", self.standard));
                }
            }
            Pathway::Coordinate => {
                if last != 1.0 || self.standard != 1.0 {
                    return invalid(format!("coordinate curriculum must end at p = 1, got {last}"));
                }
                if self.values.iter().any(|&p| p < 1.0) {
                    return invalid("coordinate curriculum values must be >= 1");
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    /// No shrink at all: every round already at the standard granularity.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == self.standard)
    }

    pub fn granularity_at(&self, t: usize) -> Result<Real> {
        granularity_at(self, t)
    }
}

/// Granularity of round `t` (`2 <= t <= T`).
pub fn granularity_at(curr: &Curriculum, t: usize) -> Result<Real> {
    if t < 2 {
        return invalid(format!("shrink regression starts at round 2, got t = {t}"));
    }
    if t > curr.rounds {
        return invalid(format!("round {t} beyond T = {}", curr.rounds));
    }
    curr.values
        .get(t - 2)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("no curriculum value for round {t}")))
}

/// Pseudo-loss weight: 0 in round 1, `lambda_sub` in between, 1 in round `T`.
pub fn lambda_weight(t: usize, rounds: usize, lambda_sub: Real) -> Real {
    if t <= 1 {
        0.0
    } else if t < rounds {
        lambda_sub
    } else {
        1.0
    }
}

/// Linear warm-up weight: 0.1 in round 1 rising linearly to 1 in round `T`.
pub fn linear_warmup_weight(t: usize, rounds: usize) -> Real {
    if rounds <= 1 {
        return 1.0;
    }
    let frac = (t.clamp(1, rounds) - 1) as Real / (rounds - 1) as Real;
    0.1 + 0.9 * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l1_ref(e: f64) -> f64 {
        e.abs()
    }

    fn l2_ref(e: f64) -> f64 {
        0.5 * e.abs() * e.abs()
    }

    #[test]
    fn closed_forms() {
        let (l1, g1) = lp_loss(&[0.5f64], &[0.0], 1.0).unwrap();
        assert_eq!(l1, 0.5);
        assert_eq!(g1[0].abs(), 1.0);
        let (l2, g2) = lp_loss(&[0.5f64], &[0.0], 2.0).unwrap();
        assert_eq!(l2, 0.125);
        assert_eq!(g2[0].abs(), 0.5);
        let (l24, _) = lp_loss(&[0.5f64], &[0.0], 2.4).unwrap();
        // 0.5^2.4 / 2.4 at 30 digits: 0.0789435711724165667889...
        assert!((l24 - 0.078_943_571_172_416_57).abs() < 1e-12);
    }

    #[test]
    fn p_below_one_rejected() {
        assert!(lp_loss(&[0.1], &[0.0], 0.9).is_err());
    }

    #[test]
    fn unnormalized_error_rejected() {
        assert!(lp_loss(&[2.0], &[0.0], 1.5).is_err());
    }

    #[test]
    fn zero_error_has_zero_subgradient() {
        let (_, g) = lp_loss(&[0.3, 0.3], &[0.3, 0.1], 1.0).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.5);
    }

    #[test]
    fn mse_identity_and_unit_offset() {
        let a = [0.2f64, 0.4, 0.9];
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let b = [1.2, 1.4, 1.9];
        let (l, _) = mse_loss(&b, &a).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn heatmap_mse_shape_mismatch() {
        use crate::codec::HeatmapStack;
        let a = HeatmapStack::<f64>::from_flat(&[0.0; 8], 2, 2, 2).unwrap();
        let b = HeatmapStack::<f64>::from_flat(&[0.0; 8], 1, 2, 4).unwrap();
        assert!(heatmap_mse_loss(&a, &b).is_err());
    }

    fn fd_check(loss: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) {
        let (_, g) = loss(x);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp).0 - loss(&xm).0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "element {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let target: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..0.9)).collect();
        let pred: Vec<f64> = target.iter().map(|t| t + rng.random_range(-0.08..0.08)).collect();
        for p in [1.0, 1.6, 2.0, 2.4] {
            fd_check(|x| lp_loss(x, &target, p).unwrap(), &pred);
        }
        fd_check(|x| mse_loss(x, &target).unwrap(), &pred);
    }

    #[test]
    fn default_curricula() {
        let h = Curriculum::heatmap_default();
        h.validate().unwrap();
        assert_eq!(granularity_at(&h, 2).unwrap(), 2.2);
        assert_eq!(granularity_at(&h, 4).unwrap(), 1.5);
        let c = Curriculum::coordinate_default();
        c.validate().unwrap();
        assert_eq!(granularity_at(&c, 4).unwrap(), 1.0);
        assert!(granularity_at(&c, 1).is_err());
        assert!(granularity_at(&c, 5).is_err());
    }

    #[test]
    fn curriculum_invariants_enforced() {
        let mut c = Curriculum::heatmap_default();
        c.values = vec![1.8, 2.2, 1.5];
        assert!(c.validate().is_err());
        c.values = vec![2.2, 1.8, 1.6];
        assert!(c.validate().is_err());
        let mut p = Curriculum::coordinate_default();
        p.values = vec![2.4, 1.6, 0.9];
        assert!(p.validate().is_err());
        let flat = Curriculum::interpolated(Pathway::Heatmap, 1.5, 4, 1.5, 0.1);
        assert!(flat.validate().is_err());
        flat.check(true).unwrap();
        assert!(flat.is_degenerate());
    }

    #[test]
    fn interpolated_midpoints() {
        let c = Curriculum::interpolated(Pathway::Heatmap, 2.6, 4, 1.5, 0.1);
        assert_eq!(c.values, vec![2.6, 2.05, 1.5]);
        let p = Curriculum::interpolated(Pathway::Coordinate, 3.0, 4, 1.0, 0.1);
        assert_eq!(p.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn lambda_schedule() {
        assert_eq!(lambda_weight(1, 4, 0.1), 0.0);
        assert_eq!(lambda_weight(2, 4, 0.1), 0.1);
        assert_eq!(lambda_weight(3, 4, 0.1), 0.1);
        assert_eq!(lambda_weight(4, 4, 0.1), 1.0);
        assert!((linear_warmup_weight(1, 4) - 0.1).abs() < 1e-15);
        assert!((linear_warmup_weight(4, 4) - 1.0).abs() < 1e-15);
        assert!((linear_warmup_weight(2, 4) - 0.4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn grad_weight_is_power_law(e in -1.0f64..1.0, p in 1.0f64..3.0) {
            prop_assume!(e != 0.0);
            let (_, g) = lp_loss(&[e], &[0.0], p).unwrap();
            prop_assert!((g[0].abs() - e.abs().powf(p - 1.0)).abs() <= 1e-12);
        }

        #[test]
        fn grad_weight_decreases_in_p(e in 0.01f64..0.99, p in 1.0f64..2.9, dp in 0.01f64..0.5) {
            prop_assert!(lp_grad_weight(e, p + dp) < lp_grad_weight(e, p));
        }

        #[test]
        fn l1_l2_special_cases_are_exact(xs in proptest::collection::vec(-1.0f64..1.0, 1..16)) {
            let zeros = vec![0.0; xs.len()];
            let n = xs.len() as f64;
            let (l1, _) = lp_loss(&xs, &zeros, 1.0).unwrap();
            let (l2, _) = lp_loss(&xs, &zeros, 2.0).unwrap();
            let r1 = xs.iter().map(|&e| l1_ref(e)).fold(0.0, |a, b| a + b) / n;
            let r2 = xs.iter().map(|&e| l2_ref(e)).fold(0.0, |a, b| a + b) / n;
            prop_assert_eq!(l1, r1);
            prop_assert_eq!(l2, r2);
        }
    }
}

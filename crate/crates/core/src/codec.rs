//! Gaussian target heatmaps and their decoding back to coordinates.

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::domain::LandmarkSet;
use crate::error::{invalid, Error, Result};
use crate::Scalar;

/// `N x H x W` stack of per-landmark maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T> {
    pub values: Array3<T>,
    /// Standard deviation the stack was encoded with; `None` for model outputs.
    pub sigma: Option<T>,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn from_flat(flat: &[T], n: usize, h: usize, w: usize) -> Result<Self> {
        if flat.len() != n * h * w {
            return Err(Error::Shape(format!("{} values for a {n}x{h}x{w} stack", flat.len())));
        }
        let values = Array3::from_shape_vec((n, h, w), flat.to_vec()).expect("length checked");
        Ok(Self { values, sigma: None })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Write the amplitude-1 Gaussian targets for `coords` into `out` (row-major `N x H x W`).
pub fn encode_into<T: Scalar>(coords: &LandmarkSet<T>, sigma: T, h: usize, w: usize, scale: T, out: &mut [T]) -> Result<()> {
    if !(sigma > T::zero()) {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    if !(scale > T::zero()) {
        return invalid(format!("scale must be positive, got {scale}"));
    }
    let n = coords.len();
    if out.len() != n * h * w {
        return Err(Error::Shape(format!("output buffer {} for {n}x{h}x{w}", out.len())));
    }
    let extent_w = T::lit(w as f64) * scale;
    let extent_h = T::lit(h as f64) * scale;
    let denom = T::lit(2.0) * sigma * sigma;
    let mut gx = vec![T::zero(); w];
    let mut gy = vec![T::zero(); h];
    for (k, &[x, y]) in coords.points().iter().enumerate() {
        if x < T::zero() || y < T::zero() || x >= extent_w || y >= extent_h {
            return invalid(format!("landmark {k} at ({x}, {y}) outside the {extent_w}x{extent_h} image"));
        }
        let (mx, my) = (x / scale, y / scale);
        for (c, g) in gx.iter_mut().enumerate() {
            let d = T::lit(c as f64) - mx;
            *g = d * d;
        }
        for (r, g) in gy.iter_mut().enumerate() {
            let d = T::lit(r as f64) - my;
            *g = d * d;
        }
        let chan = &mut out[k * h * w..(k + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                chan[r * w + c] = (-(gx[c] + gy[r]) / denom).exp();
            }
        }
    }
    Ok(())
}

/// Encode landmarks as Gaussians of standard deviation `sigma` on an `h x w` map,
/// where `scale` is the image-to-map ratio.
pub fn encode_heatmaps<T: Scalar>(coords: &LandmarkSet<T>, sigma: T, h: usize, w: usize, scale: T) -> Result<HeatmapStack<T>> {
    let mut flat = vec![T::zero(); coords.len() * h * w];
    encode_into(coords, sigma, h, w, scale, &mut flat)?;
    let values = Array3::from_shape_vec((coords.len(), h, w), flat).expect("sized above");
    Ok(HeatmapStack { values, sigma: Some(sigma) })
}

/// Sub-pixel refinement applied after the per-channel argmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Refinement {
    /// Shift a quarter cell toward the larger axis neighbour.
    #[default]
    QuarterOffset,
    /// Plain argmax.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    pub landmarks: LandmarkSet<T>,
    /// Peak value per channel clamped to `[0, 1]`.
    pub confidences: Vec<T>,
    /// Channels that were flat; decoded to the map center.
    pub degenerate: Vec<bool>,
}

fn decode_channel<T: Scalar>(map: ArrayView2<'_, T>, scale: T, refine: Refinement) -> ([T; 2], T, bool) {
    let (h, w) = map.dim();
    let mut best = (T::neg_infinity(), 0usize, 0usize);
    let mut lowest = T::infinity();
    for ((r, c), &v) in map.indexed_iter() {
        if v > best.0 {
            best = (v, r, c);
        }
        lowest = lowest.min(v);
    }
    let (peak, r, c) = best;
    let conf = peak.max(T::zero()).min(T::one());
    if peak == lowest {
        let half = T::lit(0.5);
        let center = [T::lit(w as f64 - 1.0) * half * scale, T::lit(h as f64 - 1.0) * half * scale];
        return (center, conf, true);
    }
    let quarter = T::lit(0.25);
    let nudge = |lo: T, hi: T| {
        let d = hi - lo;
        if d > T::zero() {
            quarter
        } else if d < T::zero() {
            -quarter
        } else {
            T::zero()
        }
    };
    let mut x = T::lit(c as f64);
    let mut y = T::lit(r as f64);
    if refine == Refinement::QuarterOffset {
        if c > 0 && c + 1 < w {
            x = x + nudge(map[[r, c - 1]], map[[r, c + 1]]);
        }
        if r > 0 && r + 1 < h {
            y = y + nudge(map[[r - 1, c]], map[[r + 1, c]]);
        }
    }
    ([x * scale, y * scale], conf, false)
}

pub fn decode_view<T: Scalar>(values: ArrayView3<'_, T>, scale: T, refine: Refinement) -> Result<Decoded<T>> {
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("heatmap contains non-finite values");
    }
    let mut points = Vec::with_capacity(values.dim().0);
    let mut confidences = Vec::with_capacity(points.capacity());
    let mut degenerate = Vec::with_capacity(points.capacity());
    for chan in values.outer_iter() {
        let (p, conf, flat) = decode_channel(chan, scale, refine);
        points.push(p);
        confidences.push(conf);
        degenerate.push(flat);
    }
    Ok(Decoded { landmarks: LandmarkSet::new(points)?, confidences, degenerate })
}

/// Argmax with quarter-offset refinement, mapped back to image coordinates via `scale`.
pub fn decode_heatmaps<T: Scalar>(stack: &HeatmapStack<T>, scale: T) -> Result<Decoded<T>> {
    decode_view(stack.values.view(), scale, Refinement::QuarterOffset)
}

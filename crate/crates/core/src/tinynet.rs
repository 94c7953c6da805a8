//! Tiny fully connected detectors with handwritten forward/backward passes and Adam.
//!
//! - Heatmap pathway: `G^2 -> hidden (ReLU) -> N*H*W (linear)`.
//! - Coordinate pathway: `G^2 -> hidden (ReLU) -> hidden (ReLU) -> 2N (sigmoid)`,
//!   emitting normalized `[x0, y0, x1, y1, ..]` in `(0, 1)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Pathway;
use crate::error::{invalid, Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub pathway: Pathway,
    /// Flattened input size (`G^2`).
    pub input: usize,
    pub hidden: usize,
    pub landmarks: usize,
    /// Heatmap output resolution `(H, W)`; ignored by the coordinate pathway.
    pub map: (usize, usize),
}

impl ModelSpec {
    pub fn heatmap(grid: usize, hidden: usize, landmarks: usize) -> Self {
        Self { pathway: Pathway::Heatmap, input: grid * grid, hidden, landmarks, map: (grid, grid) }
    }

    pub fn coordinate(grid: usize, hidden: usize, landmarks: usize) -> Self {
        Self { pathway: Pathway::Coordinate, input: grid * grid, hidden, landmarks, map: (grid, grid) }
    }

    pub fn output(&self) -> usize {
        match self.pathway {
            Pathway::Heatmap => self.landmarks * self.map.0 * self.map.1,
            Pathway::Coordinate => 2 * self.landmarks,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.pathway {
            Pathway::Heatmap => vec![(self.input, self.hidden), (self.hidden, self.output())],
            Pathway::Coordinate => vec![
                (self.input, self.hidden),
                (self.hidden, self.hidden),
                (self.hidden, self.output()),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.landmarks == 0 || self.map.0 == 0 || self.map.1 == 0 {
            return invalid(format!("model dimensions must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `fan_in x fan_out`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel<T> {
    spec: ModelSpec,
    layers: Vec<Dense<T>>,
    version: u64,
}

/// Activations kept by [`TinyModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    version: u64,
    /// Input of every layer.
    inputs: Vec<Array2<T>>,
    /// Pre-activation of every layer.
    pre: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T> Cache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scaled(&self, k: T) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense { weight: d.weight.mapv(|v| v * k), bias: d.bias.mapv(|v| v * k) })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|d| d.weight.iter().chain(d.bias.iter()).all(|v| v.is_finite()))
    }

    /// Gradient of the final dense layer (weights then bias), flattened.
    pub fn last_layer_flat(&self) -> Vec<T> {
        let d = self.layers.last().expect("at least one layer");
        d.weight.iter().chain(d.bias.iter()).copied().collect()
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> TinyModel<T> {
    /// Glorot-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || T::lit(rng.random_range(-a..a)));
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { spec, layers, version: 0 })
    }

    /// A model with every parameter set to zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense { weight: Array2::zeros((i, o)), bias: Array1::zeros(o) })
            .collect();
        Ok(Self { spec, layers, version: 0 })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn pathway(&self) -> Pathway {
        self.spec.pathway
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    /// Incremented by every optimizer step; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn activation(&self, layer: usize) -> Activation {
        let last = layer + 1 == self.layers.len();
        match (last, self.spec.pathway) {
            (false, _) => Activation::Relu,
            (true, Pathway::Heatmap) => Activation::Identity,
            (true, Pathway::Coordinate) => Activation::Sigmoid,
        }
    }

    /// Forward a batch (`b x input`), returning outputs (`b x output`) and the cache.
    pub fn forward(&self, batch: ArrayView2<'_, T>) -> Result<(Array2<T>, Cache<T>)> {
        if batch.ncols() != self.spec.input {
            return Err(Error::Shape(format!("input width {} but model expects {}", batch.ncols(), self.spec.input)));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = batch.to_owned();
        for (l, dense) in self.layers.iter().enumerate() {
            let z = a.dot(&dense.weight) + &dense.bias;
            let out = match self.activation(l) {
                Activation::Relu => z.mapv(|v| v.max(T::zero())),
                Activation::Identity => z.clone(),
                Activation::Sigmoid => z.mapv(sigmoid),
            };
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let cache = Cache { version: self.version, inputs, pre, output: a.clone() };
        Ok((a, cache))
    }

    /// Forward without keeping a cache.
    pub fn predict(&self, batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward(batch)?.0)
    }

    /// Exact reverse-mode gradients for `grad_out = dLoss/dOutput`.
    pub fn backward(&self, cache: &Cache<T>, grad_out: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, model: self.version });
        }
        if grad_out.dim() != cache.output.dim() {
            return Err(Error::Shape(format!("grad {:?} vs output {:?}", grad_out.dim(), cache.output.dim())));
        }
        let n = self.layers.len();
        let mut grads: Vec<Option<Dense<T>>> = vec![None; n];
        let mut delta = grad_out.to_owned();
        for l in (0..n).rev() {
            match self.activation(l) {
                Activation::Identity => {}
                Activation::Sigmoid => Zip::from(&mut delta).and(&cache.output).for_each(|d, &s| *d = *d * s * (T::one() - s)),
                Activation::Relu => Zip::from(&mut delta).and(&cache.pre[l]).for_each(|d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                }),
            }
            let weight = cache.inputs[l].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.layers[l].weight.t());
            }
            grads[l] = Some(Dense { weight, bias });
        }
        Ok(Gradients { layers: grads.into_iter().map(|g| g.expect("filled")).collect() })
    }

    pub fn params_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model of {}", flat.len(), self.param_count())));
        }
        let mut it = flat.iter().copied();
        for d in &mut self.layers {
            d.weight.iter_mut().chain(d.bias.iter_mut()).for_each(|v| *v = it.next().expect("sized"));
        }
        self.version += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|d| d.weight.iter().chain(d.bias.iter()).all(|v| v.is_finite()))
    }

    pub(crate) fn set_version(&mut self, v: u64) {
        self.version = v;
    }
}

/// Free-function form of [`TinyModel::init`].
pub fn init_model<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<TinyModel<T>> {
    TinyModel::init(spec, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    m: Vec<Dense<T>>,
    v: Vec<Dense<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for `model`, with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(model: &TinyModel<T>, lr: T) -> Self {
        let zeros: Vec<Dense<T>> = model
            .layers
            .iter()
            .map(|d| Dense { weight: Array2::zeros(d.weight.dim()), bias: Array1::zeros(d.bias.len()) })
            .collect();
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self) -> &[Dense<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Dense<T>] {
        &self.v
    }

    /// One bias-corrected Adam update of `model`.
    pub fn step(&mut self, model: &mut TinyModel<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
        {
            return Err(Error::Shape("gradient shapes do not match the model".into()));
        }
        if self.m.len() != model.layers.len() {
            return Err(Error::Shape("optimizer state belongs to another model".into()));
        }
        for (l, g) in grads.layers.iter().enumerate() {
            if !g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} gradient at optimizer step {}", self.step + 1)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = self.lr;
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((p, m), v), g) in model.layers.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&grads.layers) {
            Zip::from(&mut p.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut p.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        model.version += 1;
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, model: &mut TinyModel<T>, grads: &Gradients<T>) -> Result<()> {
    state.step(model, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_input(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((b, d), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn param_count_matches_arithmetic() {
        // 1024*128 + 128 + 128*5120 + 5120
        assert_eq!(ModelSpec::heatmap(32, 128, 5).param_count(), 131_200 + 660_480);
        let m: TinyModel<f64> = init_model(ModelSpec::heatmap(32, 128, 5), 0).unwrap();
        assert_eq!(m.params_flat().len(), 791_680);
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::coordinate(8, 6, 2);
        let a: TinyModel<f64> = init_model(spec, 0).unwrap();
        let b: TinyModel<f64> = init_model(spec, 0).unwrap();
        let c: TinyModel<f64> = init_model(spec, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params_flat(), c.params_flat());
        let bound = (6.0f64 / (64 + 6) as f64).sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() < bound));
        assert!(a.layers().iter().all(|d| d.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_model_outputs() {
        let x = Array2::<f64>::zeros((3, 64));
        let h = TinyModel::<f64>::zeros(ModelSpec::heatmap(8, 4, 2)).unwrap();
        assert!(h.predict(x.view()).unwrap().iter().all(|&v| v == 0.0));
        let c = TinyModel::<f64>::zeros(ModelSpec::coordinate(8, 4, 2)).unwrap();
        assert!(c.predict(x.view()).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_matches_single_forward() {
        for spec in [ModelSpec::heatmap(8, 5, 2), ModelSpec::coordinate(8, 5, 2)] {
            let m: TinyModel<f64> = init_model(spec, 3).unwrap();
            let x = random_input(4, 64, 9);
            let y = m.predict(x.view()).unwrap();
            for i in 0..4 {
                let yi = m.predict(x.slice(ndarray::s![i..i + 1, ..])).unwrap();
                for (a, b) in yi.row(0).iter().zip(y.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn input_shape_checked() {
        let m: TinyModel<f64> = init_model(ModelSpec::heatmap(8, 5, 2), 3).unwrap();
        assert!(m.forward(Array2::zeros((1, 63)).view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_linearity() {
        let m: TinyModel<f64> = init_model(ModelSpec::coordinate(8, 5, 2), 3).unwrap();
        let x = random_input(2, 64, 1);
        let (y, cache) = m.forward(x.view()).unwrap();
        let g0 = m.backward(&cache, Array2::zeros(y.dim()).view()).unwrap();
        assert!(g0.flat().iter().all(|&v| v == 0.0));
        let up = random_input(2, 4, 2);
        let g1 = m.backward(&cache, up.view()).unwrap();
        let g2 = m.backward(&cache, (&up * 2.0).view()).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m: TinyModel<f64> = init_model(ModelSpec::coordinate(8, 5, 2), 3).unwrap();
        let x = random_input(2, 64, 1);
        let (y, cache) = m.forward(x.view()).unwrap();
        let g = m.backward(&cache, Array2::ones(y.dim()).view()).unwrap();
        let mut adam = AdamState::new(&m, 1e-3);
        adam.step(&mut m, &g).unwrap();
        assert!(matches!(m.backward(&cache, Array2::ones(y.dim()).view()), Err(Error::StaleCache { .. })));
    }

    /// Sum of `c_ij * y_ij` as the scalar objective; checks every parameter against
    /// central differences.
    fn gradient_check(spec: ModelSpec, seed: u64) {
        let mut m: TinyModel<f64> = init_model(spec, seed).unwrap();
        let x = random_input(3, spec.input, seed + 100);
        let coef = random_input(3, spec.output(), seed + 200) - 0.5;
        let (_, cache) = m.forward(x.view()).unwrap();
        let g = m.backward(&cache, coef.view()).unwrap().flat();
        let base = m.params_flat();
        let h = 1e-5;
        let objective = |m: &TinyModel<f64>| (&m.predict(x.view()).unwrap() * &coef).sum();
        let mut worst = 0.0f64;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            m.set_params_flat(&p).unwrap();
            let fp = objective(&m);
            p[i] -= 2.0 * h;
            m.set_params_flat(&p).unwrap();
            let fm = objective(&m);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs());
            if denom > 1e-7 {
                worst = worst.max((fd - g[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        gradient_check(ModelSpec::heatmap(6, 7, 2), 5);
        gradient_check(ModelSpec::coordinate(6, 7, 3), 6);
    }

    #[test]
    fn adam_single_step_hand_computed() {
        let spec = ModelSpec::coordinate(1, 1, 1);
        let mut m = TinyModel::<f64>::zeros(spec).unwrap();
        let mut g = Gradients { layers: m.layers().to_vec() };
        g.layers[0].weight[[0, 0]] = 1.0;
        let mut adam = AdamState::new(&m, 1e-3);
        adam.step(&mut m, &g).unwrap();
        // m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        assert!((m.layers()[0].weight[[0, 0]] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(m.layers()[1].weight[[0, 0]], 0.0);
        assert_eq!(adam.step, 1);

        let before = m.clone();
        let m1 = adam.first_moment()[0].weight[[0, 0]];
        let zero = Gradients { layers: m.layers().iter().map(|d| Dense { weight: d.weight.mapv(|_| 0.0), bias: d.bias.mapv(|_| 0.0) }).collect() };
        adam.step(&mut m, &zero).unwrap();
        assert!((adam.first_moment()[0].weight[[0, 0]] - 0.9 * m1).abs() < 1e-18);
        // moment still nonzero so the parameter keeps moving; the untouched ones stay put
        assert_eq!(m.layers()[1].weight, before.layers()[1].weight);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let spec = ModelSpec::coordinate(1, 1, 1);
        let mut m = TinyModel::<f64>::zeros(spec).unwrap();
        let mut g = Gradients { layers: m.layers().to_vec() };
        g.layers[1].bias[0] = f64::NAN;
        let mut adam = AdamState::new(&m, 1e-3);
        let err = adam.step(&mut m, &g).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn adam_zero_grad_from_rest_is_noop() {
        let spec = ModelSpec::heatmap(4, 3, 1);
        let mut m: TinyModel<f64> = init_model(spec, 1).unwrap();
        let before = m.params_flat();
        let zero = Gradients { layers: m.layers().iter().map(|d| Dense { weight: d.weight.mapv(|_| 0.0), bias: d.bias.mapv(|_| 0.0) }).collect() };
        let mut adam = AdamState::new(&m, 1e-3);
        adam.step(&mut m, &zero).unwrap();
        assert_eq!(before, m.params_flat());
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let spec = ModelSpec::coordinate(6, 5, 2);
            let mut m: TinyModel<f64> = init_model(spec, 2).unwrap();
            let mut adam = AdamState::new(&m, 1e-2);
            let x = random_input(4, 36, 3);
            for _ in 0..5 {
                let (y, c) = m.forward(x.view()).unwrap();
                let g = m.backward(&c, (&y - 0.3).view()).unwrap();
                adam.step(&mut m, &g).unwrap();
            }
            m.params_flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_precision_model_runs() {
        let m: TinyModel<f32> = init_model(ModelSpec::coordinate(6, 5, 2), 2).unwrap();
        let x = Array2::<f32>::from_elem((2, 36), 0.5);
        let y = m.predict(x.view()).unwrap();
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

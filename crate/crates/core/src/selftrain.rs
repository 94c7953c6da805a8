//! The self-training engine: supervised warm start, per-round pseudo
//! pretraining and source-aware mixed training, plus the selection-based,
//! naive and warm-up baselines.
//!
//! Training entry points run inside a [`TrainingScope`], so any attempt to read
//! hidden ground truth from them panics. Pseudo-label noise and test metrics
//! are measured by [`run_strategy`] between rounds, outside the scope.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_view, Refinement};
use crate::domain::{ConfidenceAgg, Dataset, Pathway, Prediction, PseudoStore, Sample, TrainingScope};
use crate::error::{invalid, Error, Result};
use crate::losses::{granularity_at, lambda_weight, linear_warmup_weight, Curriculum, TargetLoss};
use crate::metrics::{auc_fr, nme, Normalizer};
use crate::tinynet::{AdamState, ModelSpec};
use crate::{Landmarks, Model, Real};

/// Optimisation settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: Real,
    pub batch_size: usize,
    /// Fractions of the stage's epochs after which the learning rate drops by 10x.
    pub decay_at: Vec<Real>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 1e-3, batch_size: 16, decay_at: vec![2.0 / 3.0, 5.0 / 6.0] }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("stage.batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("stage.lr must be positive, got {}", self.lr));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return invalid("stage.decay_at fractions must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate for a 0-based `epoch` of a stage with `epochs` epochs.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> Real {
        let drops = self
            .decay_at
            .iter()
            .filter(|&&f| epoch >= (f * epochs as Real).floor() as usize)
            .count();
        self.lr * 0.1f64.powi(drops as i32)
    }

    /// Epoch budget of a speed-up pretraining round.
    pub fn speedup_epochs(&self) -> usize {
        if self.epochs == 0 {
            0
        } else {
            (self.epochs / 5).max(1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    SupervisedOnly,
    /// Retrain on labeled plus every pseudo-label each round.
    Naive,
    ThresholdSelect {
        #[serde(default = "default_tau")]
        tau: Real,
    },
    /// Use the most confident `steps[t-1]` percent of pseudo-labels in round `t`.
    PercentileCurriculum {
        #[serde(default)]
        steps: Vec<Real>,
    },
    LinearWarmup,
    Stld {
        #[serde(default = "yes")]
        pseudo_pretrain: bool,
        #[serde(default = "yes")]
        shrink: bool,
    },
}

fn default_tau() -> Real {
    0.4
}

fn yes() -> bool {
    true
}

impl Strategy {
    pub fn stld() -> Self {
        Self::Stld { pseudo_pretrain: true, shrink: true }
    }

    pub fn name(&self) -> String {
        match self {
            Self::SupervisedOnly => "supervised_only".into(),
            Self::Naive => "naive".into(),
            Self::ThresholdSelect { tau } => format!("threshold_select({tau})"),
            Self::PercentileCurriculum { .. } => "percentile_curriculum".into(),
            Self::LinearWarmup => "linear_warmup".into(),
            Self::Stld { pseudo_pretrain: true, shrink: true } => "stld".into(),
            Self::Stld { pseudo_pretrain, shrink } => format!(
                "stld(pp={},shrink={})",
                if *pseudo_pretrain { "on" } else { "off" },
                if *shrink { "on" } else { "off" }
            ),
        }
    }

    pub fn needs_confidence(&self) -> bool {
        matches!(self, Self::ThresholdSelect { .. } | Self::PercentileCurriculum { .. })
    }

    pub fn validate(&self, pathway: Pathway) -> Result<()> {
        match self {
            Self::ThresholdSelect { tau } if !(0.0..=1.0).contains(tau) => {
                return invalid(format!("strategy.tau {tau} outside [0, 1]"));
            }
            Self::PercentileCurriculum { steps } => {
                if steps.is_empty() || steps.iter().any(|s| !(*s > 0.0 && *s <= 100.0)) {
                    return invalid("strategy.steps must be percentages in (0, 100]");
                }
                if steps.windows(2).any(|w| w[1] <= w[0]) {
                    return invalid("strategy.steps must increase");
                }
                if *steps.last().expect("nonempty") != 100.0 {
                    return invalid("strategy.steps must end at 100");
                }
            }
            _ => {}
        }
        if self.needs_confidence() && pathway == Pathway::Coordinate {
            return Err(Error::NoConfidence);
        }
        Ok(())
    }

    /// Percentile used in round `t`; lists whose length differs from `T` fall
    /// back to evenly spaced steps `100 t / T`.
    pub fn percentile_at(steps: &[Real], t: usize, rounds: usize) -> Real {
        if steps.len() == rounds {
            steps[t - 1]
        } else {
            100.0 * t as Real / rounds as Real
        }
    }
}

/// Everything about a run except the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub pathway: Pathway,
    pub hidden: usize,
    pub stage: StageConfig,
    pub rounds: usize,
    pub curriculum: Curriculum,
    /// Rounds after the first pretrain from the previous round's weights for a fifth of the epochs.
    pub speedup: bool,
    pub confidence_agg: ConfidenceAgg,
    pub normalizer: Normalizer,
    pub fr_cutoff: Real,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::for_pathway(Pathway::Heatmap)
    }
}

impl EngineConfig {
    pub fn for_pathway(pathway: Pathway) -> Self {
        Self {
            pathway,
            hidden: 128,
            stage: StageConfig::default(),
            rounds: 4,
            curriculum: Curriculum::default_for(pathway),
            speedup: true,
            confidence_agg: ConfidenceAgg::Mean,
            normalizer: Normalizer::InterLandmark(0, 1),
            fr_cutoff: 0.10,
        }
    }

    pub fn model_spec(&self, image: (usize, usize), landmarks: usize) -> ModelSpec {
        ModelSpec {
            pathway: self.pathway,
            input: image.0 * image.1,
            hidden: self.hidden,
            landmarks,
            map: image,
        }
    }

    /// Validation that does not depend on the strategy. Degenerate (flat)
    /// curricula are allowed here; sweeps flag them separately.
    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        if self.hidden == 0 {
            return invalid("hidden must be positive");
        }
        if self.rounds == 0 {
            return invalid("rounds must be positive");
        }
        if self.curriculum.kind != self.pathway {
            return invalid(format!(
                "curriculum.kind is {} but pathway is {}",
                self.curriculum.kind, self.pathway
            ));
        }
        if self.curriculum.rounds != self.rounds {
            return invalid(format!("curriculum.rounds {} differs from rounds {}", self.curriculum.rounds, self.rounds));
        }
        self.curriculum.check(true)?;
        if !(self.fr_cutoff > 0.0) {
            return invalid("fr_cutoff must be positive");
        }
        Ok(())
    }
}

/// Per-round record of a strategy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub stage1_loss: Option<Real>,
    pub stage2_loss: Real,
    /// Pixel error of the pseudo-labels estimated at the end of this round.
    pub pseudo_noise_mean: Option<Real>,
    pub pseudo_noise_median: Option<Real>,
    /// Pseudo-labeled samples entering stage 2.
    pub selected: Option<usize>,
    pub test_nme: Real,
    pub test_auc: Real,
    pub test_fr: Real,
    /// Granularity of the pseudo term (sigma or p); `None` when it is absent.
    pub granularity: Option<Real>,
    pub lambda: Real,
    pub seconds: Real,
}

impl RoundLog {
    /// The record with its wall time zeroed, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        Self { seconds: 0.0, ..self.clone() }
    }
}

/// Output of [`run_strategy`].
#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub logs: Vec<RoundLog>,
    /// `pseudo[0]` is the warm-start estimate, `pseudo[t]` the estimate after round `t`.
    pub pseudo: Vec<PseudoStore>,
    /// Pseudo-labeled ids that entered stage 2 of round `t` (index `t - 1`).
    pub used: Vec<BTreeSet<u64>>,
    pub warm_model: Model,
    /// Stage-1 model of each round, when the strategy has one.
    pub pretrain_models: Vec<Option<Model>>,
    /// Stage-2 model of each round.
    pub round_models: Vec<Model>,
    /// Mean pixel error of the warm-start pseudo-labels.
    pub initial_noise: Option<Real>,
}

impl StrategyRun {
    pub fn final_model(&self) -> &Model {
        self.round_models.last().unwrap_or(&self.warm_model)
    }

    pub fn final_log(&self) -> &RoundLog {
        self.logs.last().expect("at least one round")
    }
}

/// Flatten rasters into the model's `n x (H*W)` input matrix.
pub fn input_matrix<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Array2<Real> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for s in samples {
        width = s.image.len();
        data.extend(s.image.iter().map(|&v| v as Real));
        rows += 1;
    }
    Array2::from_shape_vec((rows, width), data).expect("rasters share one size")
}

/// Rows of training data with their per-row target, loss and weight.
#[derive(Clone, Debug)]
pub struct TrainSet {
    x: Vec<Real>,
    width: usize,
    targets: Vec<Vec<Real>>,
    losses: Vec<TargetLoss>,
    weights: Vec<Real>,
}

impl TrainSet {
    pub fn new(width: usize) -> Self {
        Self { x: Vec::new(), width, targets: Vec::new(), losses: Vec::new(), weights: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Append one row supervised by `landmarks` under `loss` with weight `weight`.
    pub fn push(
        &mut self,
        row: ndarray::ArrayView1<'_, Real>,
        landmarks: &Landmarks,
        loss: TargetLoss,
        weight: Real,
        spec: &ModelSpec,
        image: (usize, usize),
    ) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape(format!("row of {} for a set of width {}", row.len(), self.width)));
        }
        self.targets.push(loss.target_vector(landmarks, spec, image)?);
        self.x.extend(row.iter().copied());
        self.losses.push(loss);
        self.weights.push(weight);
        Ok(())
    }

    fn matrix(&self) -> ArrayView2<'_, Real> {
        ArrayView2::from_shape((self.len(), self.width), &self.x).expect("row-major rows")
    }
}

/// Minibatch Adam over `set`; returns the weighted mean loss of the last epoch
/// (`NaN` when no epoch ran).
///
/// Each batch minimizes `(1/B) sum_i w_i l_i` over its `B` rows.
pub fn fit(model: &mut Model, set: &TrainSet, cfg: &StageConfig, epochs: usize, shuffle_seed: u64) -> Result<Real> {
    let _scope = TrainingScope::enter();
    if set.is_empty() {
        return invalid("training set is empty");
    }
    cfg.validate()?;
    let x = set.matrix();
    let out_dim = model.spec().output();
    let mut adam = AdamState::new(model, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut last = Real::NAN;
    for epoch in 0..epochs {
        adam.lr = cfg.lr_at(epoch, epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Array2::<Real>::zeros((chunk.len(), x.ncols()));
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).assign(&x.row(i));
            }
            let (out, cache) = model.forward(batch.view())?;
            let mut grad = Array2::<Real>::zeros((chunk.len(), out_dim));
            let b = chunk.len() as Real;
            for (r, &i) in chunk.iter().enumerate() {
                let (l, g) = set.losses[i].evaluate(out.row(r).as_slice().expect("row"), &set.targets[i])?;
                let w = set.weights[i];
                total += w * l;
                for (dst, gv) in grad.row_mut(r).iter_mut().zip(g) {
                    *dst = w * gv / b;
                }
            }
            let grads = model.backward(&cache, grad.view())?;
            adam.step(model, &grads)?;
        }
        last = total / set.len() as Real;
        if !last.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} loss")));
        }
    }
    Ok(last)
}

/// Convert raw model outputs for `ids` into predictions on an `image = (h, w)` raster.
pub fn decode_outputs(spec: &ModelSpec, out: ArrayView2<'_, Real>, image: (usize, usize)) -> Result<Vec<Prediction>> {
    out.axis_iter(Axis(0))
        .map(|row| match spec.pathway {
            Pathway::Heatmap => {
                let (h, w) = spec.map;
                let view = row.into_shape_with_order((spec.landmarks, h, w)).map_err(|e| Error::Shape(e.to_string()))?;
                let d = decode_view(view, image.1 as Real / w as Real, Refinement::QuarterOffset)?;
                Ok(Prediction {
                    landmarks: d.landmarks.clamped(image.1, image.0),
                    confidences: Some(d.confidences),
                })
            }
            Pathway::Coordinate => {
                let flat = row.to_vec();
                Ok(Prediction { landmarks: Landmarks::from_normalized(&flat, image.1, image.0)?, confidences: None })
            }
        })
        .collect()
}

/// Predict every row of `x`.
pub fn predict_rows(model: &Model, x: ArrayView2<'_, Real>, image: (usize, usize)) -> Result<Vec<Prediction>> {
    let mut preds = Vec::with_capacity(x.nrows());
    let step = 256;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + step).min(x.nrows());
        let out = model.predict(x.slice(s![start..end, ..]))?;
        preds.extend(decode_outputs(model.spec(), out.view(), image)?);
        start = end;
    }
    Ok(preds)
}

/// Pseudo-label estimates for `samples`, keyed by id.
pub fn estimate(model: &Model, samples: &[Sample]) -> Result<BTreeMap<u64, Prediction>> {
    let _scope = TrainingScope::enter();
    let Some(first) = samples.first() else {
        return Ok(BTreeMap::new());
    };
    let image = (first.height(), first.width());
    let preds = predict_rows(model, input_matrix(samples).view(), image)?;
    Ok(samples.iter().map(|s| s.id).zip(preds).collect())
}

/// Train on the visible labels of `labeled` at standard granularity.
pub fn train_supervised(labeled: &[Sample], model_init: &Model, cfg: &StageConfig, shuffle_seed: u64) -> Result<(Model, Real)> {
    let _scope = TrainingScope::enter();
    if labeled.is_empty() {
        return invalid("labeled set is empty");
    }
    let spec = *model_init.spec();
    let image = (labeled[0].height(), labeled[0].width());
    let x = input_matrix(labeled);
    let mut set = TrainSet::new(x.ncols());
    let loss = TargetLoss::standard(spec.pathway);
    for (row, s) in x.axis_iter(Axis(0)).zip(labeled) {
        let gt = s.gt.as_ref().ok_or_else(|| Error::Invalid(format!("labeled sample {} has no gt", s.id)))?;
        set.push(row, gt, loss, 1.0, &spec, image)?;
    }
    let mut model = model_init.clone();
    let l = fit(&mut model, &set, cfg, cfg.epochs, shuffle_seed)?;
    Ok((model, l))
}

/// Where pseudo pretraining starts from.
#[derive(Clone, Debug)]
pub enum PretrainInit<'a> {
    Fresh { seed: u64 },
    /// Previous round's stage-1 model; runs a fifth of the epochs.
    Checkpoint(&'a Model),
}

/// Stage 1: train on every pseudo-labeled sample at standard granularity.
pub fn pseudo_pretrain(
    unlabeled: &[Sample],
    pseudo: &PseudoStore,
    init: PretrainInit<'_>,
    spec: &ModelSpec,
    cfg: &StageConfig,
    shuffle_seed: u64,
) -> Result<(Model, Real)> {
    let _scope = TrainingScope::enter();
    if pseudo.is_empty() || unlabeled.is_empty() {
        return invalid("pseudo set is empty");
    }
    let ids: BTreeSet<u64> = unlabeled.iter().map(|s| s.id).collect();
    if &ids != pseudo.ids() || !pseudo.is_populated() {
        return invalid("pseudo store must cover exactly the unlabeled ids");
    }
    let image = (unlabeled[0].height(), unlabeled[0].width());
    let x = input_matrix(unlabeled);
    let mut set = TrainSet::new(x.ncols());
    let loss = TargetLoss::standard(spec.pathway);
    for (row, s) in x.axis_iter(Axis(0)).zip(unlabeled) {
        let p = pseudo.get(s.id).expect("coverage checked");
        set.push(row, &p.prediction.landmarks, loss, 1.0, spec, image)?;
    }
    let (mut model, epochs) = match init {
        PretrainInit::Fresh { seed } => (Model::init(*spec, seed)?, cfg.epochs),
        PretrainInit::Checkpoint(m) => (m.clone(), cfg.speedup_epochs()),
    };
    let l = fit(&mut model, &set, cfg, epochs, shuffle_seed)?;
    Ok((model, l))
}

/// The pseudo-label term of a stage-2 objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoTerm {
    pub weight: Real,
    pub loss: TargetLoss,
}

/// Shrink-regression pseudo term of round `t`: absent in round 1, then
/// `lambda(t)` at the curriculum's granularity.
pub fn shrink_term(t: usize, rounds: usize, curriculum: &Curriculum) -> Result<Option<PseudoTerm>> {
    if t == 0 || t > rounds {
        return invalid(format!("round {t} outside 1..={rounds}"));
    }
    if t == 1 {
        return Ok(None);
    }
    Ok(Some(PseudoTerm {
        weight: lambda_weight(t, rounds, curriculum.lambda_sub),
        loss: TargetLoss::at(curriculum.kind, granularity_at(curriculum, t)?),
    }))
}

/// Stage 2 with an explicit pseudo term: labeled rows at standard loss and
/// weight 1, plus the `pseudo` rows weighted and targeted by `term`.
#[allow(clippy::too_many_arguments)]
pub fn train_mixed(
    init: &Model,
    labeled: &[Sample],
    pseudo_samples: &[&Sample],
    pseudo: &PseudoStore,
    term: Option<PseudoTerm>,
    cfg: &StageConfig,
    shuffle_seed: u64,
) -> Result<(Model, Real)> {
    let _scope = TrainingScope::enter();
    if labeled.is_empty() {
        return invalid("labeled set is empty");
    }
    let spec = *init.spec();
    if let Some(term) = term {
        if term.loss.pathway() != spec.pathway {
            return invalid(format!("{} pseudo loss on a {} model", term.loss.pathway(), spec.pathway));
        }
    }
    let image = (labeled[0].height(), labeled[0].width());
    let width = image.0 * image.1;
    let mut set = TrainSet::new(width);
    let standard = TargetLoss::standard(spec.pathway);
    for s in labeled {
        let gt = s.gt.as_ref().ok_or_else(|| Error::Invalid(format!("labeled sample {} has no gt", s.id)))?;
        let row = s.image.mapv(|v| v as Real);
        set.push(row.view().into_shape_with_order(width).expect("contiguous"), gt, standard, 1.0, &spec, image)?;
    }
    if let Some(term) = term.filter(|t| t.weight > 0.0) {
        for s in pseudo_samples {
            let p = pseudo
                .get(s.id)
                .ok_or_else(|| Error::MissingIds(vec![s.id]))?;
            let row = s.image.mapv(|v| v as Real);
            set.push(
                row.view().into_shape_with_order(width).expect("contiguous"),
                &p.prediction.landmarks,
                term.loss,
                term.weight,
                &spec,
                image,
            )?;
        }
    }
    let mut model = init.clone();
    let l = fit(&mut model, &set, cfg, cfg.epochs, shuffle_seed)?;
    Ok((model, l))
}

/// Source-aware mixed training of round `t` from `theta_pre`.
#[allow(clippy::too_many_arguments)]
pub fn mixed_train(
    theta_pre: &Model,
    labeled: &[Sample],
    unlabeled: &[Sample],
    pseudo: &PseudoStore,
    t: usize,
    curriculum: &Curriculum,
    cfg: &StageConfig,
    shuffle_seed: u64,
) -> Result<(Model, Real)> {
    if curriculum.kind != theta_pre.pathway() {
        return invalid(format!("{} curriculum for a {} model", curriculum.kind, theta_pre.pathway()));
    }
    let term = shrink_term(t, curriculum.rounds, curriculum)?;
    let refs: Vec<&Sample> = unlabeled.iter().collect();
    train_mixed(theta_pre, labeled, &refs, pseudo, term, cfg, shuffle_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionRule {
    Threshold { tau: Real },
    TopPercentile { q: Real },
}

/// Confident subset of the store: sample confidence `>= tau`, or the top `q`
/// percent (rounded to the nearest count, ties broken by smaller id).
pub fn select_confident(pseudo: &PseudoStore, rule: SelectionRule, agg: ConfidenceAgg) -> Result<BTreeSet<u64>> {
    let mut scored = Vec::with_capacity(pseudo.len());
    for (id, p) in pseudo.iter() {
        let c = p.prediction.sample_confidence(agg).ok_or(Error::NoConfidence)?;
        scored.push((id, c));
    }
    Ok(match rule {
        SelectionRule::Threshold { tau } => scored.into_iter().filter(|&(_, c)| c >= tau).map(|(id, _)| id).collect(),
        SelectionRule::TopPercentile { q } => {
            if !(0.0..=100.0).contains(&q) {
                return invalid(format!("percentile {q} outside [0, 100]"));
            }
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let k = (q / 100.0 * scored.len() as Real).round() as usize;
            scored.into_iter().take(k).map(|(id, _)| id).collect()
        }
    })
}

/// Deterministic per-stage shuffle seed.
pub fn stage_seed(seed: u64, round: usize, stage: u64) -> u64 {
    let mut z = seed ^ ((round as u64) << 8 | stage).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_WARM: u64 = 0;
const STAGE_PRE: u64 = 1;
const STAGE_MIX: u64 = 2;

/// Mean and median pixel error of pseudo-labels against hidden ground truth.
pub fn pseudo_noise(pseudo: &PseudoStore, hidden: &BTreeMap<u64, Landmarks>) -> Option<(Real, Real)> {
    let mut errs: Vec<Real> = pseudo
        .iter()
        .filter_map(|(id, p)| hidden.get(&id).map(|g| p.prediction.landmarks.mean_distance(g)))
        .collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(|a, b| a.total_cmp(b));
    let n = errs.len();
    let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
    Some((errs.iter().sum::<Real>() / n as Real, median))
}

/// Test-set NME, AUC and FR of `model`.
pub fn evaluate(model: &Model, test_x: ArrayView2<'_, Real>, test_gts: &[Landmarks], image: (usize, usize), cfg: &EngineConfig) -> Result<(Real, Real, Real)> {
    let preds: Vec<Landmarks> = predict_rows(model, test_x, image)?.into_iter().map(|p| p.landmarks).collect();
    let report = nme(&preds, test_gts, cfg.normalizer)?;
    let (auc, fr) = auc_fr(&report.per_sample, cfg.fr_cutoff)?;
    Ok((report.mean, auc, fr))
}

/// Execute one strategy on one dataset with model seed `seed`.
pub fn run_strategy(dataset: &Dataset, strategy: &Strategy, cfg: &EngineConfig, seed: u64) -> Result<StrategyRun> {
    cfg.validate()?;
    strategy.validate(cfg.pathway)?;
    if dataset.labeled.is_empty() {
        return invalid("labeled split is empty");
    }
    let image = dataset.image_size();
    let n_landmarks = dataset.labeled[0].gt.as_ref().map(|g| g.len()).unwrap_or(0);
    let spec = cfg.model_spec(image, n_landmarks);
    spec.validate()?;

    // measurement-only data, gathered before any training scope opens
    let hidden: BTreeMap<u64, Landmarks> = dataset
        .unlabeled
        .iter()
        .filter_map(|s| s.hidden_gt().map(|g| (s.id, g.clone())))
        .collect();
    let test_x = input_matrix(&dataset.test);
    let test_gts: Vec<Landmarks> = dataset
        .test
        .iter()
        .map(|s| s.gt.clone().ok_or_else(|| Error::Invalid(format!("test sample {} has no gt", s.id))))
        .collect::<Result<_>>()?;

    let rounds = cfg.rounds;
    let mut logs = Vec::new();
    let start = Instant::now();
    let init = Model::init(spec, seed)?;
    let (warm, warm_loss) = train_supervised(&dataset.labeled, &init, &cfg.stage, stage_seed(seed, 0, STAGE_WARM))?;

    if matches!(strategy, Strategy::SupervisedOnly) {
        let (test_nme, test_auc, test_fr) = evaluate(&warm, test_x.view(), &test_gts, image, cfg)?;
        logs.push(RoundLog {
            round: 1,
            stage1_loss: None,
            stage2_loss: warm_loss,
            pseudo_noise_mean: None,
            pseudo_noise_median: None,
            selected: None,
            test_nme,
            test_auc,
            test_fr,
            granularity: None,
            lambda: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        });
        return Ok(StrategyRun {
            strategy: strategy.clone(),
            seed,
            logs,
            pseudo: Vec::new(),
            used: Vec::new(),
            warm_model: warm,
            pretrain_models: Vec::new(),
            round_models: Vec::new(),
            initial_noise: None,
        });
    }

    let empty = PseudoStore::for_ids(dataset.unlabeled_ids());
    let mut pseudo = empty.update(estimate(&warm, &dataset.unlabeled)?, 0)?;
    let initial_noise = pseudo_noise(&pseudo, &hidden).map(|n| n.0);
    let mut history = vec![pseudo.clone()];
    let mut used_history = Vec::new();
    let mut pretrain_models: Vec<Option<Model>> = Vec::new();
    let mut round_models = Vec::new();
    let mut prev_pre: Option<Model> = None;

    for t in 1..=rounds {
        let round_start = Instant::now();
        let standard = TargetLoss::standard(cfg.pathway);
        let all_ids: BTreeSet<u64> = pseudo.ids().clone();

        // stage 1
        let mut stage1_loss = None;
        let mut theta_pre = None;
        if let Strategy::Stld { pseudo_pretrain: true, .. } = strategy {
            let init = match (&prev_pre, cfg.speedup) {
                (Some(m), true) => PretrainInit::Checkpoint(m),
                _ => PretrainInit::Fresh { seed },
            };
            let (m, l) = pseudo_pretrain(&dataset.unlabeled, &pseudo, init, &spec, &cfg.stage, stage_seed(seed, t, STAGE_PRE))?;
            stage1_loss = Some(l);
            theta_pre = Some(m);
        }

        // stage 2
        let (ids, term): (BTreeSet<u64>, Option<PseudoTerm>) = match strategy {
            Strategy::Stld { shrink: true, .. } => (all_ids.clone(), shrink_term(t, rounds, &cfg.curriculum)?),
            Strategy::Stld { shrink: false, .. } | Strategy::Naive => {
                (all_ids.clone(), Some(PseudoTerm { weight: 1.0, loss: standard }))
            }
            Strategy::ThresholdSelect { tau } => (
                select_confident(&pseudo, SelectionRule::Threshold { tau: *tau }, cfg.confidence_agg)?,
                Some(PseudoTerm { weight: 1.0, loss: standard }),
            ),
            Strategy::PercentileCurriculum { steps } => (
                select_confident(
                    &pseudo,
                    SelectionRule::TopPercentile { q: Strategy::percentile_at(steps, t, rounds) },
                    cfg.confidence_agg,
                )?,
                Some(PseudoTerm { weight: 1.0, loss: standard }),
            ),
            Strategy::LinearWarmup => (all_ids.clone(), Some(PseudoTerm { weight: linear_warmup_weight(t, rounds), loss: standard })),
            Strategy::SupervisedOnly => unreachable!("handled above"),
        };
        let active = term.filter(|t| t.weight > 0.0);
        let chosen: Vec<&Sample> = dataset.unlabeled.iter().filter(|s| ids.contains(&s.id)).collect();
        let stage2_init = match &theta_pre {
            Some(m) => m.clone(),
            None => Model::init(spec, seed)?,
        };
        let (model, stage2_loss) =
            train_mixed(&stage2_init, &dataset.labeled, &chosen, &pseudo, active, &cfg.stage, stage_seed(seed, t, STAGE_MIX))?;

        pseudo = pseudo.update(estimate(&model, &dataset.unlabeled)?, t)?;
        let noise = pseudo_noise(&pseudo, &hidden);
        let (test_nme, test_auc, test_fr) = evaluate(&model, test_x.view(), &test_gts, image, cfg)?;
        if !(test_nme.is_finite() && test_auc.is_finite() && test_fr.is_finite()) {
            return Err(Error::NonFinite(format!("round {t} test metrics")));
        }
        logs.push(RoundLog {
            round: t,
            stage1_loss,
            stage2_loss,
            pseudo_noise_mean: noise.map(|n| n.0),
            pseudo_noise_median: noise.map(|n| n.1),
            selected: Some(if active.is_some() { chosen.len() } else { 0 }),
            test_nme,
            test_auc,
            test_fr,
            granularity: active.map(|a| a.loss.granularity()),
            lambda: active.map(|a| a.weight).unwrap_or(0.0),
            seconds: round_start.elapsed().as_secs_f64(),
        });
        history.push(pseudo.clone());
        used_history.push(if active.is_some() { ids } else { BTreeSet::new() });
        prev_pre = theta_pre.clone();
        pretrain_models.push(theta_pre);
        round_models.push(model);
    }

    Ok(StrategyRun {
        strategy: strategy.clone(),
        seed,
        logs,
        pseudo: history,
        used: used_history,
        warm_model: warm,
        pretrain_models,
        round_models,
        initial_noise,
    })
}

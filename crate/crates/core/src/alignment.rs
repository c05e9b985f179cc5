//! Model alignment: fine-tuning a source model so that its outputs (or
//! hidden representations) match those of one or more frozen witness models.
//!
//! For a mini-batch `B` and witness set `W` the source parameters follow
//! SGD on `1 / (|B| |W|) * sum_{x in B} sum_{w in W} d(z_s(x), z_w(x))`.
//! Output-space distances compare `softmax(logits / tau)` of both models;
//! embedding-space distances compare the representations feeding the last
//! dense layer through a trainable linear projection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::loss::{self, floored_ln};
use crate::math;
use crate::model::{Model, Trace};
use crate::optim::{sgd_step, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, schedule_for, steps_per_epoch};

/// Distance `d` between source and witness representations.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Distance {
    Kl,
    Tv,
    Hint,
    /// `KL(outputs) + lambda * HINT(embeddings)`.
    Combined { lambda: f64 },
}

impl Distance {
    pub fn name(&self) -> &'static str {
        match self {
            Distance::Kl => "kl",
            Distance::Tv => "tv",
            Distance::Hint => "hint",
            Distance::Combined { .. } => "kl+hint",
        }
    }

    fn uses_outputs(&self) -> bool {
        !matches!(self, Distance::Hint)
    }

    fn uses_embeddings(&self) -> bool {
        matches!(self, Distance::Hint | Distance::Combined { .. })
    }
}

/// Which argument of the KL divergence is the target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KlDirection {
    /// `KL(p_w || p_s)`.
    #[default]
    WitnessTarget,
    /// `KL(p_s || p_w)`.
    SourceTarget,
}

/// Representation compared by embedding-space distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmbeddingLayer {
    /// Input of each model's last dense layer.
    #[default]
    Penultimate,
    /// The same representation index in both models.
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AlignmentConfig {
    pub distance: Distance,
    pub kl_direction: KlDirection,
    pub embedding_layer: EmbeddingLayer,
    /// Softmax temperature applied to both models' logits. `None` uses the
    /// models' own output distributions, which equals a temperature of 1.
    pub temperature: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub clip_global_norm: Option<f64>,
    /// Hard cap on the number of optimizer steps.
    pub early_stop: Option<usize>,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            distance: Distance::Kl,
            kl_direction: KlDirection::WitnessTarget,
            embedding_layer: EmbeddingLayer::Penultimate,
            temperature: Some(1.0),
            epochs: 1,
            batch_size: 32,
            base_lr: 0.01,
            warmup_fraction: 0.05,
            momentum: 0.9,
            clip_global_norm: None,
            early_stop: None,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !(t > 0.0) || !t.is_finite() {
                return Err(invalid!("temperature must be positive, got {t}"));
            }
        }
        if let Distance::Combined { lambda } = self.distance {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(invalid!("lambda must be nonnegative, got {lambda}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be at least 1"));
        }
        if self.early_stop == Some(0) {
            return Err(invalid!("early stop must allow at least one step"));
        }
        Ok(())
    }

    fn tau(&self) -> f64 {
        self.temperature.unwrap_or(1.0)
    }
}

/// Linear map from the source embedding space to a witness embedding space.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmbeddingProjection {
    /// `[witness_dim, source_dim]`.
    pub weight: Tensor,
    pub trainable: bool,
}

impl EmbeddingProjection {
    /// Identity when the dimensions agree; otherwise a seeded matrix with
    /// orthonormal rows (or columns, when the witness side is larger).
    pub fn init(source_dim: usize, witness_dim: usize, seed: u64) -> Self {
        let mut w = Tensor::zeros(&[witness_dim, source_dim]);
        if source_dim == witness_dim {
            for i in 0..source_dim {
                w.data_mut()[i * source_dim + i] = 1.0;
            }
        } else {
            let mut rng = rng::stream(seed, Stream::Projection);
            let (count, len) = if witness_dim <= source_dim {
                (witness_dim, source_dim)
            } else {
                (source_dim, witness_dim)
            };
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
            while basis.len() < count {
                let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                    v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
                }
                let n = math::sqrt(v.iter().map(|a| a * a).sum());
                if n > 1e-8 {
                    v.iter_mut().for_each(|a| *a /= n);
                    basis.push(v);
                }
            }
            for (i, b) in basis.iter().enumerate() {
                for (j, &val) in b.iter().enumerate() {
                    let (r, c) = if witness_dim <= source_dim { (i, j) } else { (j, i) };
                    w.data_mut()[r * source_dim + c] = val;
                }
            }
        }
        Self {
            weight: w,
            trainable: true,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn witness_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the projection to each row of a `[n, source_dim]` batch.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let (n, ds) = rows(z)?;
        if ds != self.source_dim() {
            return Err(Error::ShapeMismatch {
                context: "embedding projection",
                expected: vec![self.source_dim()],
                found: vec![ds],
            });
        }
        let dw = self.witness_dim();
        let w = self.weight.data();
        let mut out = Tensor::zeros(&[n, dw]);
        for i in 0..n {
            let zi = &z.data()[i * ds..(i + 1) * ds];
            for r in 0..dw {
                out.data_mut()[i * dw + r] =
                    w[r * ds..(r + 1) * ds].iter().zip(zi).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// `(rows, width)` of a rank-1 or rank-2 view, treating higher ranks as
/// `[n, prod(rest)]`.
fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        0 => Err(Error::Empty("representation")),
        1 => Ok((1, t.len())),
        _ => Ok((t.batch_len(), t.item_len())),
    }
}

fn check_distribution(p: &Tensor, what: &str) -> Result<()> {
    let (_, m) = rows(p)?;
    for row in p.data().chunks(m) {
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
        }
    }
    Ok(())
}

fn kl_rows(target: &[f64], other: &[f64]) -> f64 {
    target
        .iter()
        .zip(other)
        .map(|(&t, &o)| if t == 0.0 { 0.0 } else { t * (floored_ln(t) - floored_ln(o)) })
        .sum()
}

/// Mean over rows of `KL(p_w || p_s)`, with logarithms floored at
/// [`loss::LOG_FLOOR`].
pub fn distance_kl(p_s: &Tensor, p_w: &Tensor) -> Result<f64> {
    p_s.check_same_shape(p_w, "kl distance")?;
    check_distribution(p_s, "source distribution")?;
    check_distribution(p_w, "witness distribution")?;
    let (n, m) = rows(p_s)?;
    let total: f64 = p_s
        .data()
        .chunks(m)
        .zip(p_w.data().chunks(m))
        .map(|(s, w)| kl_rows(w, s))
        .sum();
    Ok(total / n as f64)
}

/// Mean over rows of `0.5 * sum |p_s - p_w|`.
pub fn distance_tv(p_s: &Tensor, p_w: &Tensor) -> Result<f64> {
    p_s.check_same_shape(p_w, "tv distance")?;
    check_distribution(p_s, "source distribution")?;
    check_distribution(p_w, "witness distribution")?;
    let (n, _) = rows(p_s)?;
    let total: f64 = p_s.data().iter().zip(p_w.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * total / n as f64)
}

/// Mean squared error between `proj(z_s)` and `z_w`.
pub fn distance_hint(z_s: &Tensor, z_w: &Tensor, proj: &EmbeddingProjection) -> Result<f64> {
    let (n, _) = rows(z_s)?;
    let (nw, dw) = rows(z_w)?;
    let zs = z_s.clone().reshape(&[n, z_s.len() / n])?;
    let projected = proj.apply(&zs)?;
    if nw != n || dw != proj.witness_dim() {
        return Err(Error::ShapeMismatch {
            context: "hint distance",
            expected: vec![n, proj.witness_dim()],
            found: vec![nw, dw],
        });
    }
    let sq: f64 = projected
        .data()
        .iter()
        .zip(z_w.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (n * dw) as f64)
}

/// Representation indices a distance needs from one model.
#[derive(Debug, Clone, Copy)]
struct Plan {
    logits: Option<usize>,
    embedding: Option<usize>,
}

impl Plan {
    fn depth(&self) -> usize {
        self.logits.unwrap_or(0).max(self.embedding.unwrap_or(0))
    }
}

fn plan_for(model: &Model, cfg: &AlignmentConfig) -> Result<Plan> {
    let logits = cfg.distance.uses_outputs().then(|| model.logits_layer());
    let embedding = if cfg.distance.uses_embeddings() {
        let q = match cfg.embedding_layer {
            EmbeddingLayer::Penultimate => model.embedding_layer()?,
            EmbeddingLayer::Index(q) => q,
        };
        if q >= model.depth() {
            return Err(invalid!(
                "embedding alignment needs a layer below the output, got {q} for depth {}",
                model.depth()
            ));
        }
        Some(q)
    } else {
        None
    };
    Ok(Plan { logits, embedding })
}

fn embedding_dim(model: &Model, plan: &Plan) -> usize {
    plan.embedding.map_or(0, |q| model.shape_at(q).iter().product())
}

/// Frozen witness quantities for one batch.
struct WitnessView {
    probs: Option<Tensor>,
    embedding: Option<Tensor>,
}

fn output_probs(model: &Model, trace: &Trace, cfg: &AlignmentConfig) -> Result<Tensor> {
    match cfg.temperature {
        None => Ok(trace.at(model.depth()).clone()),
        Some(t) => loss::softmax_t(trace.at(model.logits_layer()), t),
    }
}

fn witness_view(witness: &Model, plan: &Plan, x: &Tensor, cfg: &AlignmentConfig) -> Result<WitnessView> {
    let depth = if cfg.temperature.is_none() && plan.logits.is_some() {
        witness.depth()
    } else {
        plan.depth()
    };
    let trace = witness.trace(x, depth)?;
    let probs = match plan.logits {
        Some(_) => Some(output_probs(witness, &trace, cfg)?),
        None => None,
    };
    let embedding = plan.embedding.map(|q| {
        let z = trace.at(q);
        let n = z.batch_len();
        z.clone().reshape(&[n, z.item_len()]).expect("flatten embedding")
    });
    Ok(WitnessView { probs, embedding })
}

/// Summed (not averaged) loss and gradients of one witness term.
struct Term {
    loss: f64,
    logits_grad: Option<Tensor>,
    embedding_grad: Option<Tensor>,
    projection_grad: Option<Tensor>,
}

fn output_term(p_s: &Tensor, p_w: &Tensor, cfg: &AlignmentConfig) -> Result<(f64, Tensor)> {
    let tau = cfg.tau();
    let m = p_s.shape()[1];
    match cfg.distance {
        Distance::Tv => {
            let loss = 0.5 * p_s.data().iter().zip(p_w.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let g = p_s.zip_map(p_w, |a, b| 0.5 * math::sign(a - b))?;
            Ok((loss, loss::softmax_backward(p_s, &g, tau)?))
        }
        _ => match cfg.kl_direction {
            KlDirection::WitnessTarget => {
                let loss = p_s
                    .data()
                    .chunks(m)
                    .zip(p_w.data().chunks(m))
                    .map(|(s, w)| kl_rows(w, s))
                    .sum();
                // d/dz KL(p_w || softmax(z / tau)) = (p_s - p_w) / tau
                let g = p_s.zip_map(p_w, |s, w| (s - w) / tau)?;
                Ok((loss, g))
            }
            KlDirection::SourceTarget => {
                let loss = p_s
                    .data()
                    .chunks(m)
                    .zip(p_w.data().chunks(m))
                    .map(|(s, w)| kl_rows(s, w))
                    .sum();
                // d/dz KL(p_s || p_w) = p_s * (r - <p_s, r>) / tau with r = ln p_s - ln p_w
                let r = p_s.zip_map(p_w, |s, w| floored_ln(s) - floored_ln(w))?;
                Ok((loss, loss::softmax_backward(p_s, &r, tau)?))
            }
        },
    }
}

fn hint_term(z_s: &Tensor, z_w: &Tensor, proj: &EmbeddingProjection) -> Result<(f64, Tensor, Tensor)> {
    let n = z_s.batch_len();
    let ds = z_s.item_len();
    let flat = z_s.clone().reshape(&[n, ds])?;
    let projected = proj.apply(&flat)?;
    projected.check_same_shape(z_w, "hint distance")?;
    let dw = proj.witness_dim();
    let resid = projected.sub(z_w)?;
    let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / dw as f64;
    let c = 2.0 / dw as f64;
    let w = proj.weight.data();
    let mut gz = Tensor::zeros(&[n, ds]);
    let mut gp = Tensor::zeros(proj.weight.shape());
    for i in 0..n {
        let r = &resid.data()[i * dw..(i + 1) * dw];
        let zi = &flat.data()[i * ds..(i + 1) * ds];
        for (row, &rv) in r.iter().enumerate() {
            if rv == 0.0 {
                continue;
            }
            let g = c * rv;
            let wrow = &w[row * ds..(row + 1) * ds];
            for k in 0..ds {
                gz.data_mut()[i * ds + k] += wrow[k] * g;
                gp.data_mut()[row * ds + k] += g * zi[k];
            }
        }
    }
    Ok((loss, gz.reshape(z_s.shape())?, gp))
}

fn witness_term(
    source: &Model,
    plan: &Plan,
    trace: &Trace,
    view: &WitnessView,
    proj: Option<&EmbeddingProjection>,
    cfg: &AlignmentConfig,
) -> Result<Term> {
    let mut term = Term {
        loss: 0.0,
        logits_grad: None,
        embedding_grad: None,
        projection_grad: None,
    };
    if let (Some(_), Some(p_w)) = (plan.logits, &view.probs) {
        let p_s = output_probs(source, trace, cfg)?;
        let (l, g) = output_term(&p_s, p_w, cfg)?;
        term.loss += l;
        term.logits_grad = Some(g);
    }
    if let (Some(q), Some(z_w)) = (plan.embedding, &view.embedding) {
        let proj = proj.ok_or_else(|| invalid!("embedding alignment needs a projection"))?;
        let (l, gz, gp) = hint_term(trace.at(q), z_w, proj)?;
        let weight = match cfg.distance {
            Distance::Combined { lambda } => lambda,
            _ => 1.0,
        };
        term.loss += weight * l;
        term.embedding_grad = Some(gz.scale(weight));
        term.projection_grad = Some(gp.scale(weight));
    }
    Ok(term)
}

/// Sums tensors by recursive halving, so that `2^k` identical terms add up
/// to exactly `2^k` times one of them.
fn pairwise_sum(mut items: Vec<Tensor>) -> Option<Tensor> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.add(&b).expect("terms share a shape")),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

fn pairwise_sum_scalar(mut items: Vec<f64>) -> f64 {
    while items.len() > 1 {
        items = items.chunks(2).map(|c| c.iter().sum()).collect();
    }
    items.pop().unwrap_or(0.0)
}

/// Loss and gradients of one alignment step, averaged over batch and witnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGrad {
    pub loss: f64,
    /// Gradients of the source parameters, in parameter order.
    pub param_grads: Vec<Tensor>,
    /// Gradients of each witness's projection (`None` for output distances).
    pub projection_grads: Vec<Option<Tensor>>,
}

/// Evaluates the averaged alignment objective on a batch and its gradient
/// with respect to the source parameters (and projections). Witness
/// parameters receive no gradient.
pub fn alignment_grad(
    x: &Tensor,
    source: &Model,
    witnesses: &[Model],
    projections: &[Option<EmbeddingProjection>],
    cfg: &AlignmentConfig,
) -> Result<AlignmentGrad> {
    if witnesses.is_empty() {
        return Err(Error::Empty("witness set"));
    }
    let plan = plan_for(source, cfg)?;
    let depth = if cfg.temperature.is_none() && plan.logits.is_some() {
        source.depth()
    } else {
        plan.depth()
    };
    let trace = source.trace(x, depth)?;
    let batch = trace.at(0).batch_len();
    let mut losses = Vec::with_capacity(witnesses.len());
    let mut logit_grads = Vec::new();
    let mut emb_grads = Vec::new();
    let mut proj_grads = Vec::with_capacity(witnesses.len());
    for (i, w) in witnesses.iter().enumerate() {
        let wplan = plan_for(w, cfg)?;
        let view = witness_view(w, &wplan, x, cfg)?;
        let term = witness_term(source, &plan, &trace, &view, projections.get(i).and_then(|p| p.as_ref()), cfg)?;
        losses.push(term.loss);
        logit_grads.extend(term.logits_grad);
        emb_grads.extend(term.embedding_grad);
        proj_grads.push(term.projection_grad);
    }
    let norm = (batch * witnesses.len()) as f64;
    let mut seeds = Vec::new();
    if let (Some(q), Some(g)) = (plan.logits, pairwise_sum(logit_grads)) {
        seeds.push((q, g.scale(1.0 / norm)));
    }
    if let (Some(q), Some(g)) = (plan.embedding, pairwise_sum(emb_grads)) {
        seeds.push((q, g.scale(1.0 / norm)));
    }
    let (param_grads, _) = source.backward_trace(&trace, &seeds, true)?;
    Ok(AlignmentGrad {
        loss: pairwise_sum_scalar(losses) / norm,
        param_grads: param_grads.into_iter().map(|g| g.value).collect(),
        projection_grads: proj_grads
            .into_iter()
            .map(|g| g.map(|t| t.scale(1.0 / norm)))
            .collect(),
    })
}

/// Single-witness alignment loss `d(z_s(x), z_w(x))` averaged over the batch.
pub fn alignment_loss(
    x: &Tensor,
    source: &Model,
    witness: &Model,
    projection: Option<&EmbeddingProjection>,
    cfg: &AlignmentConfig,
) -> Result<AlignmentGrad> {
    alignment_grad(x, source, core::slice::from_ref(witness), &[projection.cloned()], cfg)
}

/// Projections for each witness when the distance compares embeddings.
pub fn init_projections(
    source: &Model,
    witnesses: &[Model],
    cfg: &AlignmentConfig,
) -> Result<Vec<Option<EmbeddingProjection>>> {
    let splan = plan_for(source, cfg)?;
    witnesses
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if !cfg.distance.uses_embeddings() {
                return Ok(None);
            }
            let wplan = plan_for(w, cfg)?;
            Ok(Some(EmbeddingProjection::init(
                embedding_dim(source, &splan),
                embedding_dim(w, &wplan),
                rng::mix(cfg.seed, i as u64),
            )))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub model: Model,
    pub projections: Vec<Option<EmbeddingProjection>>,
    pub history: Vec<AlignStep>,
}

/// Fine-tunes a copy of `source` toward the witnesses on `data`. Neither the
/// source nor the witnesses are modified.
pub fn align(
    source: &Model,
    witnesses: &[Model],
    cfg: &AlignmentConfig,
    data: &Dataset,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    if witnesses.is_empty() {
        return Err(Error::Empty("witness set"));
    }
    if data.is_empty() {
        return Err(Error::Empty("alignment data"));
    }
    for w in witnesses {
        if w.input_shape() != source.input_shape() {
            return Err(Error::ShapeMismatch {
                context: "witness input",
                expected: source.input_shape().to_vec(),
                found: w.input_shape().to_vec(),
            });
        }
        if cfg.distance.uses_outputs() && w.num_classes() != source.num_classes() {
            return Err(invalid!(
                "witness predicts {} classes, source {}",
                w.num_classes(),
                source.num_classes()
            ));
        }
    }
    let mut model = source.clone();
    let mut projections = init_projections(source, witnesses, cfg)?;
    let mut total = cfg.epochs * steps_per_epoch(data.len(), cfg.batch_size);
    if let Some(cap) = cfg.early_stop {
        total = total.min(cap);
    }
    let schedule = schedule_for(cfg.base_lr, cfg.warmup_fraction, total);
    let trainable: Vec<usize> = projections
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().filter(|p| p.trainable).map(|_| i))
        .collect();
    let mut state = {
        let mut shapes: Vec<&Tensor> = model.params().iter().map(|p| &p.value).collect();
        shapes.extend(trainable.iter().map(|&i| &projections[i].as_ref().expect("trainable").weight));
        OptimizerState::new(shapes, schedule, cfg.momentum, cfg.clip_global_norm)?
    };
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(total);
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for ids in epoch_batches(&order, cfg.batch_size) {
            if history.len() >= total {
                break 'epochs;
            }
            let (x, _) = data.batch(ids);
            let step = state.step_index;
            let g = alignment_grad(&x, &model, witnesses, &projections, cfg)?;
            if !g.loss.is_finite() || g.param_grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    context: "alignment loss",
                    step,
                });
            }
            let mut grads: Vec<&Tensor> = g.param_grads.iter().collect();
            for &i in &trainable {
                grads.push(g.projection_grads[i].as_ref().expect("embedding distance"));
            }
            let mut params: Vec<&mut Tensor> = model.params_mut().collect();
            for p in projections.iter_mut().flatten().filter(|p| p.trainable) {
                params.push(&mut p.weight);
            }
            let lr = sgd_step(&mut params, &grads, &mut state)?;
            history.push(AlignStep { step, lr, loss: g.loss });
        }
    }
    Ok(AlignOutcome {
        model,
        projections,
        history,
    })
}

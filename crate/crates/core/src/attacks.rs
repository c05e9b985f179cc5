//! l-infinity bounded, non-targeted attacks: PGD and the iterative FGSM
//! family (momentum, Nesterov lookahead, scale invariance, variance tuning,
//! translation-invariant smoothing, diverse inputs), against one model or a
//! logit-averaged ensemble.

use alloc::format;
use alloc::string::String;

use alloc::vec::Vec;
use core::fmt::Write as _;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::loss;
use crate::math;
use crate::model::Model;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Momentum decay `mu`; 0 disables the accumulator.
    pub momentum: f64,
    pub nesterov: bool,
    /// Scale copies `m` (`x / 2^i`, `i < m`).
    pub scale_copies: usize,
    /// Neighbour count `N` for variance tuning; 0 disables it.
    pub variance_samples: usize,
    /// Neighbourhood radius as a multiple of epsilon.
    pub variance_beta: f64,
    /// Odd Gaussian kernel size; 1 disables smoothing.
    pub ti_kernel_size: usize,
    pub ti_sigma: f64,
    pub di_probability: f64,
    /// Resize range as fractions of the spatial size, within (0, 1].
    pub di_resize_low: f64,
    pub di_resize_high: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 20,
            momentum: 0.0,
            nesterov: false,
            scale_copies: 1,
            variance_samples: 0,
            variance_beta: 1.5,
            ti_kernel_size: 1,
            ti_sigma: 1.0,
            di_probability: 0.0,
            di_resize_low: 0.9,
            di_resize_high: 1.0,
            random_start: false,
            seed: 0,
        }
    }
}

/// Named method presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttackMethod {
    Pgd,
    Mi,
    Ni,
    Sini,
    Vmi,
    Vni,
    Ti,
    Di,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 8] = [
        AttackMethod::Pgd,
        AttackMethod::Mi,
        AttackMethod::Ni,
        AttackMethod::Sini,
        AttackMethod::Vmi,
        AttackMethod::Vni,
        AttackMethod::Ti,
        AttackMethod::Di,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mi => "mi",
            AttackMethod::Ni => "ni",
            AttackMethod::Sini => "sini",
            AttackMethod::Vmi => "vmi",
            AttackMethod::Vni => "vni",
            AttackMethod::Ti => "ti",
            AttackMethod::Di => "di",
        }
    }

    /// The preset's switches on top of the given budget.
    pub fn config(&self, epsilon: f64, alpha: f64, iterations: usize, seed: u64) -> AttackConfig {
        let mut c = AttackConfig {
            epsilon,
            alpha,
            iterations,
            seed,
            ..AttackConfig::default()
        };
        match self {
            AttackMethod::Pgd => {}
            AttackMethod::Mi => c.momentum = 1.0,
            AttackMethod::Ni => {
                c.momentum = 1.0;
                c.nesterov = true;
            }
            AttackMethod::Sini => {
                c.momentum = 1.0;
                c.nesterov = true;
                c.scale_copies = 5;
            }
            AttackMethod::Vmi => {
                c.momentum = 1.0;
                c.variance_samples = 5;
            }
            AttackMethod::Vni => {
                c.momentum = 1.0;
                c.nesterov = true;
                c.variance_samples = 5;
            }
            AttackMethod::Ti => c.ti_kernel_size = 5,
            AttackMethod::Di => c.di_probability = 0.5,
        }
        c
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown attack method {s:?}"))
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        if !finite_pos(self.epsilon) {
            return Err(invalid!("epsilon must be positive, got {}", self.epsilon));
        }
        if !finite_pos(self.alpha) {
            return Err(invalid!("alpha must be positive, got {}", self.alpha));
        }
        if self.iterations == 0 {
            return Err(invalid!("at least one iteration is required"));
        }
        if !(self.momentum >= 0.0) || !self.momentum.is_finite() {
            return Err(invalid!("momentum must be nonnegative"));
        }
        if self.scale_copies == 0 {
            return Err(invalid!("scale copies must be at least 1"));
        }
        if !finite_pos(self.variance_beta) {
            return Err(invalid!("variance radius factor must be positive"));
        }
        if self.ti_kernel_size % 2 == 0 {
            return Err(invalid!("kernel size must be odd, got {}", self.ti_kernel_size));
        }
        if !finite_pos(self.ti_sigma) {
            return Err(invalid!("kernel sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.di_probability) {
            return Err(invalid!("diverse-input probability must lie in [0, 1]"));
        }
        check_resize(self.di_resize_low, self.di_resize_high)
    }

    /// Canonical text form of every switch; the attack fingerprint hashes it.
    pub fn canonical(&self) -> String {
        format!(
            "eps={:?};alpha={:?};iters={};mu={:?};nesterov={};m={};n={};beta={:?};ti={}/{:?};di={:?}/{:?}/{:?};rs={};seed={}",
            self.epsilon,
            self.alpha,
            self.iterations,
            self.momentum,
            self.nesterov,
            self.scale_copies,
            self.variance_samples,
            self.variance_beta,
            self.ti_kernel_size,
            self.ti_sigma,
            self.di_probability,
            self.di_resize_low,
            self.di_resize_high,
            self.random_start,
            self.seed,
        )
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(self.canonical())
    }
}

fn check_resize(low: f64, high: f64) -> Result<()> {
    if !(low > 0.0 && low <= high && high <= 1.0) {
        return Err(invalid!("resize range must satisfy 0 < low <= high <= 1, got [{low}, {high}]"));
    }
    Ok(())
}

/// Canonical configuration text and its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fingerprint {
    pub canonical: String,
    pub hash: String,
}

impl Fingerprint {
    pub fn of(canonical: String) -> Self {
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hash = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(hash, "{b:02x}");
        }
        Self { canonical, hash }
    }

    /// First 16 hex digits, for file names.
    pub fn short(&self) -> &str {
        &self.hash[..16]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerturbationRecord {
    /// `x_adv - x`, batched like the input.
    pub delta: Tensor,
    pub source_model_id: String,
    pub fingerprint: Fingerprint,
    /// Whether each adversarial sample fools the attacked model (or ensemble).
    pub whitebox_success: Vec<bool>,
}

impl PerturbationRecord {
    pub fn adversarial(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.delta)
    }

    pub fn success_rate(&self) -> f64 {
        if self.whitebox_success.is_empty() {
            return 0.0;
        }
        self.whitebox_success.iter().filter(|&&s| s).count() as f64 / self.whitebox_success.len() as f64
    }
}

fn check_ensemble(models: &[Model]) -> Result<()> {
    let first = models.first().ok_or(Error::Empty("model ensemble"))?;
    for m in &models[1..] {
        if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
            return Err(invalid!("ensemble members must share input and output shapes"));
        }
    }
    Ok(())
}

/// Mean of the members' logits `z[l-1]`.
pub fn ensemble_logits(models: &[Model], x: &Tensor) -> Result<Tensor> {
    check_ensemble(models)?;
    let mut sum = models[0].logits(x)?;
    for m in &models[1..] {
        sum.add_assign(&m.logits(x)?)?;
    }
    Ok(sum.scale(1.0 / models.len() as f64))
}

fn ensemble_predict(models: &[Model], x: &Tensor) -> Result<Vec<usize>> {
    Ok(ensemble_logits(models, x)?.argmax_rows())
}

/// Input gradient of the summed cross-entropy of `softmax(ensemble_logits)`.
fn loss_input_grad(models: &[Model], x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let traces = models
        .iter()
        .map(|m| m.trace(x, m.logits_layer()))
        .collect::<Result<Vec<_>>>()?;
    let k = models.len() as f64;
    let mut mean = traces[0].at(models[0].logits_layer()).clone();
    for (m, t) in models.iter().zip(&traces).skip(1) {
        mean.add_assign(t.at(m.logits_layer()))?;
    }
    let mean = mean.scale(1.0 / k);
    let probs = loss::softmax_t(&mean, 1.0)?;
    let seed = loss::cross_entropy_logit_grad(&probs, y, 0.0, 1.0 / k)?;
    let mut grad: Option<Tensor> = None;
    for (m, t) in models.iter().zip(&traces) {
        let (_, g) = m.backward_trace(t, &[(m.logits_layer(), seed.clone())], false)?;
        match grad.as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => grad = Some(g),
        }
    }
    Ok(grad.expect("nonempty ensemble"))
}

fn batched_input(models: &[Model], x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let shape = models[0].input_shape();
    let xb = if x.shape() == shape { x.clone().unsqueeze0() } else { x.clone() };
    if xb.rank() != shape.len() + 1 || xb.shape()[1..] != shape[..] {
        return Err(Error::ShapeMismatch {
            context: "attack input",
            expected: shape.to_vec(),
            found: x.shape().to_vec(),
        });
    }
    if xb.batch_len() != y.len() {
        return Err(invalid!("{} inputs but {} labels", xb.batch_len(), y.len()));
    }
    Ok(xb)
}

fn start_point(x: &Tensor, cfg: &AttackConfig) -> Tensor {
    if !cfg.random_start {
        return x.clone();
    }
    let mut rng = rng::stream(cfg.seed, Stream::RandomStart);
    let eps = cfg.epsilon;
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0));
    out
}

/// `x_t + alpha * sign(g)`, projected onto the epsilon ball around `x` and [0, 1].
fn signed_step(x: &Tensor, x_t: &Tensor, g: &Tensor, cfg: &AttackConfig) -> Tensor {
    let eps = cfg.epsilon;
    let data = x
        .data()
        .iter()
        .zip(x_t.data())
        .zip(g.data())
        .map(|((&x0, &xt), &gv)| {
            let v = xt + cfg.alpha * math::sign(gv);
            v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn finish(models: &[Model], x: &Tensor, x_adv: Tensor, y: &[usize], cfg: &AttackConfig) -> Result<PerturbationRecord> {
    let preds = ensemble_predict(models, &x_adv)?;
    let ids: Vec<String> = models.iter().map(|m| m.id()).collect();
    Ok(PerturbationRecord {
        delta: x_adv.sub(x)?,
        source_model_id: ids.join("+"),
        fingerprint: cfg.fingerprint(),
        whitebox_success: preds.iter().zip(y).map(|(p, t)| p != t).collect(),
    })
}

fn checked(g: Tensor, step: usize) -> Result<Tensor> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFinite {
            context: "attack gradient",
            step,
        })
    }
}

/// Projected gradient descent: `x_{t+1} = clip(x_t + alpha sign(grad))`.
/// Only the budget and `random_start` are read from `cfg`.
pub fn pgd(models: &[Model], x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<PerturbationRecord> {
    cfg.validate()?;
    check_ensemble(models)?;
    let x = batched_input(models, x, y)?;
    let mut x_t = start_point(&x, cfg);
    for t in 0..cfg.iterations {
        let g = checked(loss_input_grad(models, &x_t, y)?, t)?;
        x_t = signed_step(&x, &x_t, &g, cfg);
    }
    finish(models, &x, x_t, y, cfg)
}

/// A diverse-input draw: nearest-neighbour resize to `h x w`, zero-padded
/// at `(top, left)` back to the original spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiDraw {
    pub applied: bool,
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

impl DiDraw {
    pub fn sample(rng: &mut Rng, p: f64, low: f64, high: f64, h: usize, w: usize) -> Self {
        let applied = rng.random::<f64>() < p;
        if !applied {
            return Self {
                applied,
                height: h,
                width: w,
                top: 0,
                left: 0,
            };
        }
        let lo = (math::ceil(low * h as f64) as usize).clamp(1, h);
        let hi = (math::floor(high * h as f64) as usize).clamp(lo, h);
        let height = rng.random_range(lo..=hi);
        let width = ((height * w + h / 2) / h).clamp(1, w);
        let top = rng.random_range(0..=h - height);
        let left = rng.random_range(0..=w - width);
        Self {
            applied,
            height,
            width,
            top,
            left,
        }
    }

    /// Source pixel feeding output pixel `(i, j)`, if any.
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        if i < self.top || j < self.left || i >= self.top + self.height || j >= self.left + self.width {
            return None;
        }
        Some(((i - self.top) * h / self.height, (j - self.left) * w / self.width))
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        if !self.applied {
            return x.clone();
        }
        let s = x.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = Tensor::zeros(s);
        let planes = x.len() / (h * w);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..h {
                for j in 0..w {
                    if let Some((si, sj)) = self.source(i, j, h, w) {
                        out.data_mut()[base + i * w + j] = x.data()[base + si * w + sj];
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`DiDraw::apply`]: scatters gradients back to source pixels.
    fn backward(&self, g: &Tensor) -> Tensor {
        if !self.applied {
            return g.clone();
        }
        let s = g.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = Tensor::zeros(s);
        let planes = g.len() / (h * w);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..h {
                for j in 0..w {
                    if let Some((si, sj)) = self.source(i, j, h, w) {
                        out.data_mut()[base + si * w + sj] += g.data()[base + i * w + j];
                    }
                }
            }
        }
        out
    }
}

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() < 3 {
        return Err(invalid!("spatial transforms need [.., H, W] inputs, got {:?}", x.shape()));
    }
    let s = x.shape();
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// With probability `p`, resizes `x` (`[.., H, W]`) by a uniformly drawn
/// fraction in `[low, high]` and zero-pads it back at a random offset.
pub fn di_transform(x: &Tensor, p: f64, low: f64, high: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid!("probability must lie in [0, 1], got {p}"));
    }
    check_resize(low, high)?;
    let (h, w) = spatial(x)?;
    let mut rng = rng::stream(seed, Stream::DiverseInput);
    Ok(DiDraw::sample(&mut rng, p, low, high, h, w).apply(x))
}

/// Sampled 2-D Gaussian `exp(-(i^2 + j^2) / (2 sigma^2))` on integer offsets
/// from the centre, normalized to sum 1. Shape `[size, size]`.
pub fn ti_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size % 2 == 0 {
        return Err(invalid!("kernel size must be odd and positive, got {size}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    let c = (size / 2) as f64;
    let mut k = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            k.data_mut()[i * size + j] = math::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        }
    }
    let total = k.sum();
    Ok(k.scale(1.0 / total))
}

/// Same-size zero-padded convolution of every `[H, W]` plane with `kernel`.
fn smooth(g: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial(g)?;
    let ks = kernel.shape()[0];
    let r = ks / 2;
    let mut out = Tensor::zeros(g.shape());
    let planes = g.len() / (h * w);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..ks {
                    let si = i as isize + a as isize - r as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for b in 0..ks {
                        let sj = j as isize + b as isize - r as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        acc += kernel.data()[a * ks + b] * g.data()[base + si as usize * w + sj as usize];
                    }
                }
                out.data_mut()[base + i * w + j] = acc;
            }
        }
    }
    Ok(out)
}

/// `x + N(0, variance)` elementwise, clipped to [0, 1].
pub fn gaussian_perturb(x: &Tensor, variance: f64, seed: u64) -> Result<Tensor> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(invalid!("variance must be nonnegative, got {variance}"));
    }
    if variance == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, math::sqrt(variance)).map_err(|e| invalid!("{e}"))?;
    let mut rng = rng::stream(seed, Stream::Gaussian);
    Ok(x.map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)))
}

/// Gradient seen by the FGSM family at `z`: diverse-input transform, then
/// the mean over scale copies `z / 2^i` (with the chain factor `2^-i`).
fn family_grad(models: &[Model], z: &Tensor, y: &[usize], draw: &DiDraw, copies: usize) -> Result<Tensor> {
    let mut sum: Option<Tensor> = None;
    let mut factor = 1.0;
    for _ in 0..copies {
        let zi = if factor == 1.0 { z.clone() } else { z.scale(factor) };
        let g = draw.backward(&loss_input_grad(models, &draw.apply(&zi), y)?).scale(factor);
        match sum.as_mut() {
            Some(s) => s.add_assign(&g)?,
            None => sum = Some(g),
        }
        factor *= 0.5;
    }
    Ok(sum.expect("at least one copy").scale(1.0 / copies as f64))
}

/// Iterative FGSM with composable switches. With every switch off and
/// `momentum = 0` it produces exactly the PGD perturbation.
pub fn fgsm_family(models: &[Model], x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<PerturbationRecord> {
    cfg.validate()?;
    check_ensemble(models)?;
    let x = batched_input(models, x, y)?;
    let uses_spatial = cfg.di_probability > 0.0 || cfg.ti_kernel_size > 1;
    let (h, w) = if uses_spatial { spatial(&x)? } else { (0, 0) };
    let kernel = if cfg.ti_kernel_size > 1 {
        Some(ti_kernel(cfg.ti_kernel_size, cfg.ti_sigma)?)
    } else {
        None
    };
    let mut di_rng = rng::stream(cfg.seed, Stream::DiverseInput);
    let mut var_rng = rng::stream(cfg.seed, Stream::Variance);
    let radius = cfg.variance_beta * cfg.epsilon;
    let n = x.batch_len();
    let item = x.item_len();

    let mut x_t = start_point(&x, cfg);
    let mut g = Tensor::zeros(x.shape());
    let mut variance = Tensor::zeros(x.shape());
    for t in 0..cfg.iterations {
        let draw = if cfg.di_probability > 0.0 {
            DiDraw::sample(&mut di_rng, cfg.di_probability, cfg.di_resize_low, cfg.di_resize_high, h, w)
        } else {
            DiDraw {
                applied: false,
                height: h,
                width: w,
                top: 0,
                left: 0,
            }
        };
        let point = if cfg.nesterov {
            let mut p = x_t.clone();
            p.axpy(cfg.alpha * cfg.momentum, &g)?;
            p
        } else {
            x_t.clone()
        };
        let raw = checked(family_grad(models, &point, y, &draw, cfg.scale_copies)?, t)?;
        let mut ghat = if cfg.variance_samples > 0 {
            raw.add(&variance)?
        } else {
            raw.clone()
        };
        if cfg.variance_samples > 0 {
            let mut acc = Tensor::zeros(x.shape());
            for _ in 0..cfg.variance_samples {
                let neighbour = x_t.map(|v| v + var_rng.random_range(-radius..=radius));
                acc.add_assign(&family_grad(models, &neighbour, y, &draw, cfg.scale_copies)?)?;
            }
            variance = checked(acc.scale(1.0 / cfg.variance_samples as f64).sub(&raw)?, t)?;
        }
        if let Some(k) = &kernel {
            ghat = smooth(&ghat, k)?;
        }
        g = g.scale(cfg.momentum);
        for i in 0..n {
            let gi = &ghat.data()[i * item..(i + 1) * item];
            let l1: f64 = gi.iter().map(|v| v.abs()).sum();
            if l1 > 0.0 {
                let acc = g.item_slice_mut(i);
                acc.iter_mut().zip(gi).for_each(|(a, &b)| *a += b / l1);
            }
        }
        x_t = signed_step(&x, &x_t, &g, cfg);
    }
    finish(models, &x, x_t, y, cfg)
}

/// Runs `pgd` when no switch is active, `fgsm_family` otherwise.
pub fn attack(models: &[Model], x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<PerturbationRecord> {
    let plain = cfg.momentum == 0.0
        && !cfg.nesterov
        && cfg.scale_copies == 1
        && cfg.variance_samples == 0
        && cfg.ti_kernel_size == 1
        && cfg.di_probability == 0.0;
    if plain {
        pgd(models, x, y, cfg)
    } else {
        fgsm_family(models, x, y, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::layers::LayerSpec;
    use crate::tensor::NamedTensor;

    fn linear(w: &[f64]) -> Model {
        // logits (w.x, 0)
        let n = w.len();
        let mut weight = vec![0.0; 2 * n];
        weight[..n].copy_from_slice(w);
        Model::new(
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: n, outputs: 2 },
                LayerSpec::Softmax,
            ],
            vec![n],
            vec![
                NamedTensor {
                    name: "1.dense.weight".into(),
                    value: Tensor::new(vec![2, n], weight).unwrap(),
                },
                NamedTensor {
                    name: "1.dense.bias".into(),
                    value: Tensor::zeros(&[2]),
                },
            ],
            "linear",
            0,
        )
        .unwrap()
    }

    #[test]
    fn linear_model_closed_form() {
        let w = [0.5, -1.0, 2.0, -0.25];
        let m = linear(&w);
        let x = Tensor::new(vec![1, 4], vec![0.5, 0.4, 0.6, 0.5]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.05,
            alpha: 0.02,
            iterations: 5,
            ..AttackConfig::default()
        };
        // label 0: loss decreases in w.x, so ascent moves along -sign(w)
        let rec = pgd(&[m], &x, &[0], &cfg).unwrap();
        for (d, wi) in rec.delta.data().iter().zip(w) {
            assert!((d + 0.05 * wi.signum()).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn single_iteration_is_fgsm() {
        let m = linear(&[1.0, -2.0, 0.0]);
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.03,
            iterations: 1,
            ..AttackConfig::default()
        };
        let rec = pgd(&[m.clone()], &x, &[1], &cfg).unwrap();
        let g = loss_input_grad(&[m], &x, &[1]).unwrap();
        let expected = g.map(|v| 0.03 * math::sign(v));
        for (d, e) in rec.delta.data().iter().zip(expected.data()) {
            assert!((d - e).abs() < 1e-15);
        }
        assert_eq!(rec.delta.data()[2], 0.0);
    }

    #[test]
    fn ensemble_logits_mean() {
        let a = linear(&[2.0]);
        let b = linear(&[0.0]);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let l = ensemble_logits(&[a.clone(), b], &x).unwrap();
        assert_eq!(l.data(), &[1.0, 0.0]);
        assert_eq!(ensemble_logits(&[a.clone()], &x).unwrap(), a.logits(&x).unwrap());
        assert_eq!(ensemble_logits(&[a.clone(), a.clone()], &x).unwrap(), a.logits(&x).unwrap());
        assert!(ensemble_logits(&[], &x).is_err());
    }

    #[test]
    fn kernel_properties() {
        assert_eq!(ti_kernel(1, 2.0).unwrap().data(), &[1.0]);
        let k = ti_kernel(5, 3.0).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(ti_kernel(4, 1.0).is_err());
        assert!(ti_kernel(3, 0.0).is_err());
    }

    #[test]
    fn di_shape_and_determinism() {
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|v| v as f64 / 64.0).collect()).unwrap();
        assert_eq!(di_transform(&x, 0.0, 0.5, 1.0, 3).unwrap(), x);
        for seed in 0..10 {
            let a = di_transform(&x, 1.0, 0.5, 0.9, seed).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, di_transform(&x, 1.0, 0.5, 0.9, seed).unwrap());
        }
        assert!(di_transform(&x, 1.0, 0.9, 0.5, 0).is_err());
        assert!(di_transform(&x, 1.5, 0.5, 0.9, 0).is_err());
    }

    #[test]
    fn di_backward_is_adjoint() {
        let mut rng = rng::stream(5, Stream::DiverseInput);
        let draw = DiDraw::sample(&mut rng, 1.0, 0.5, 0.8, 6, 6);
        assert!(draw.applied);
        let a = Tensor::new(vec![1, 1, 6, 6], (0..36).map(|v| libm::sin(v as f64)).collect()).unwrap();
        let b = Tensor::new(vec![1, 1, 6, 6], (0..36).map(|v| libm::cos(v as f64 * 0.3)).collect()).unwrap();
        let lhs = draw.apply(&a).dot(&b).unwrap();
        let rhs = a.dot(&draw.backward(&b)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gaussian_perturb_contract() {
        let x = Tensor::full(&[2, 3], 0.5);
        assert_eq!(gaussian_perturb(&x, 0.0, 1).unwrap(), x);
        let y = gaussian_perturb(&x, 0.5, 1).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, gaussian_perturb(&x, 0.5, 1).unwrap());
        assert!(gaussian_perturb(&x, -1.0, 1).is_err());
    }

    #[test]
    fn config_validation_and_fingerprint() {
        let mut c = AttackMethod::Pgd.config(8.0 / 255.0, 2.0 / 255.0, 40, 0);
        c.validate().unwrap();
        let fp = c.fingerprint();
        assert!(fp.canonical.contains("iters=40"));
        assert!(fp.canonical.contains(&format!("eps={:?}", 8.0 / 255.0)));
        assert_eq!(fp.hash.len(), 64);
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let bad = AttackConfig {
            ti_kernel_size: 2,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("vni".parse::<AttackMethod>().unwrap(), AttackMethod::Vni);
        assert!("fgsm".parse::<AttackMethod>().is_err());
    }
}

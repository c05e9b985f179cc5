//! Measurement instruments: DCT spectra of perturbations, loss surfaces on
//! a plane, input-gradient norms, the dominant input-Hessian eigenvalue,
//! and source/witness similarity metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{self, AttackConfig};
use crate::error::{invalid, Error, Result};
use crate::hvp;
use crate::loss;
use crate::math;
use crate::model::Model;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Orthonormal DCT-II basis `C[k][n] = s_k cos(pi (2n + 1) k / 2N)`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let s = if k == 0 { math::sqrt(1.0 / nf) } else { math::sqrt(2.0 / nf) };
        for i in 0..n {
            c[k * n + i] = s * math::cos(core::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf));
        }
    }
    c
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    if image.rank() != 2 {
        return Err(invalid!("expected a 2-D image, got shape {:?}", image.shape()));
    }
    Ok((image.shape()[0], image.shape()[1]))
}

/// `A X B^T` for row-major `A: [h, h]`, `X: [h, w]`, `B: [w, w]`.
fn sandwich(a: &[f64], x: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (0..h).map(|r| a[i * h + r] * x[r * w + j]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (0..w).map(|c| tmp[i * w + c] * b[j * w + c]).sum();
        }
    }
    out
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

/// Orthonormal 2-D DCT-II.
pub fn dct2(image: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    let data = sandwich(&dct_basis(h), image.data(), &dct_basis(w), h, w);
    Tensor::new(vec![h, w], data)
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(coeffs: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(coeffs)?;
    let data = sandwich(
        &transpose(&dct_basis(h), h),
        coeffs.data(),
        &transpose(&dct_basis(w), w),
        h,
        w,
    );
    Tensor::new(vec![h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectrumDiff {
    /// `mean |DCT(aligned)| - mean |DCT(source)|`, shape `[H, W]`.
    pub matrix: Tensor,
    pub samples: usize,
    pub channel_handling: String,
    /// Share of the positive mass lying in the top-left quarter (the lowest
    /// frequencies along both axes).
    pub low_frequency_positive_fraction: f64,
}

/// Channel-averaged `|DCT|` of every sample, folded into a running mean.
fn mean_magnitude(deltas: &Tensor) -> Result<(Tensor, usize)> {
    let s = deltas.shape();
    let (n, c, h, w) = match s.len() {
        3 => (s[0], 1, s[1], s[2]),
        4 => (s[0], s[1], s[2], s[3]),
        _ => return Err(invalid!("perturbations must be [N, H, W] or [N, C, H, W], got {s:?}")),
    };
    let (bh, bw) = (dct_basis(h), dct_basis(w));
    let mut mean = vec![0.0; h * w];
    for i in 0..n {
        let mut mag = vec![0.0; h * w];
        for ch in 0..c {
            let off = (i * c + ch) * h * w;
            let coeffs = sandwich(&bh, &deltas.data()[off..off + h * w], &bw, h, w);
            mag.iter_mut().zip(&coeffs).for_each(|(m, v)| *m += v.abs());
        }
        let k = (i + 1) as f64;
        for (m, v) in mean.iter_mut().zip(&mag) {
            *m += (v / c as f64 - *m) / k;
        }
    }
    Ok((Tensor::new(vec![h, w], mean)?, n))
}

/// Differences the mean DCT magnitude spectra of two perturbation sets
/// whose sample ids must agree pairwise.
pub fn spectrum_diff(
    aligned_ids: &[usize],
    aligned: &Tensor,
    source_ids: &[usize],
    source: &Tensor,
) -> Result<SpectrumDiff> {
    if aligned_ids != source_ids {
        return Err(invalid!("perturbation sets cover different sample ids"));
    }
    if aligned.shape() != source.shape() {
        return Err(Error::ShapeMismatch {
            context: "spectrum diff",
            expected: aligned.shape().to_vec(),
            found: source.shape().to_vec(),
        });
    }
    if aligned.batch_len() != aligned_ids.len() {
        return Err(invalid!("{} ids for {} perturbations", aligned_ids.len(), aligned.batch_len()));
    }
    if aligned_ids.is_empty() {
        return Err(Error::Empty("perturbation set"));
    }
    let (ma, n) = mean_magnitude(aligned)?;
    let (ms, _) = mean_magnitude(source)?;
    let matrix = ma.sub(&ms)?;
    let (h, w) = (matrix.shape()[0], matrix.shape()[1]);
    let (bh, bw) = (h.div_ceil(2), w.div_ceil(2));
    let (mut low, mut total) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = matrix.data()[i * w + j];
            if v > 0.0 {
                total += v;
                if i < bh && j < bw {
                    low += v;
                }
            }
        }
    }
    Ok(SpectrumDiff {
        matrix,
        samples: n,
        channel_handling: "mean-over-channels".into(),
        low_frequency_positive_fraction: if total > 0.0 { low / total } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalDirection {
    pub direction: Tensor,
    /// `|<d, delta>| / (||d|| ||delta||)` after the final rescale.
    pub residual_cosine: f64,
}

fn remove_projection(r: &mut Tensor, delta: &Tensor, dd: f64) -> Result<()> {
    let coef = r.dot(delta)? / dd;
    r.axpy(-coef, delta)
}

/// A seeded Gaussian direction with its Euclidean projection onto `delta`
/// removed, rescaled to l-infinity norm `epsilon`.
pub fn orthogonal_direction(delta: &Tensor, epsilon: f64, seed: u64) -> Result<OrthogonalDirection> {
    let dd = delta.dot(delta)?;
    if dd == 0.0 {
        return Err(invalid!("delta must be nonzero"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid!("epsilon must be positive"));
    }
    let mut rng = rng::stream(seed, Stream::Direction);
    for _ in 0..16 {
        let mut r = Tensor::zeros(delta.shape());
        r.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        remove_projection(&mut r, delta, dd)?;
        if r.norm_linf() <= 1e-12 * math::sqrt(r.len() as f64) {
            continue;
        }
        r = r.scale(epsilon / r.norm_linf());
        remove_projection(&mut r, delta, dd)?;
        r = r.scale(epsilon / r.norm_linf());
        let residual_cosine = r.dot(delta)?.abs() / (r.norm_l2() * math::sqrt(dd));
        return Ok(OrthogonalDirection {
            direction: r,
            residual_cosine,
        });
    }
    Err(invalid!("could not draw a direction orthogonal to delta"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    /// Row-major `(2k + 1)^2` losses; row `i + k`, column `j + k`.
    pub values: Vec<f64>,
    pub dir1: Tensor,
    pub dir2: Tensor,
    pub half_extent: usize,
    pub scale: f64,
    pub center_id: String,
}

impl SurfaceGrid {
    pub fn side(&self) -> usize {
        2 * self.half_extent + 1
    }

    /// Loss at grid offsets `(i, j)`, each in `[-k, k]`.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let k = self.half_extent as isize;
        self.values[((i + k) as usize) * self.side() + (j + k) as usize]
    }
}

/// `grid[i][j] = CE(clip(x + (i/k) s d1 + (j/k) s d2), y)` for one sample.
pub fn loss_surface(
    model: &Model,
    x: &Tensor,
    y: usize,
    dir1: &Tensor,
    dir2: &Tensor,
    half_extent: usize,
    scale: f64,
    center_id: &str,
) -> Result<SurfaceGrid> {
    if half_extent < 1 {
        return Err(invalid!("half extent must be at least 1"));
    }
    x.check_same_shape(dir1, "surface direction")?;
    x.check_same_shape(dir2, "surface direction")?;
    let k = half_extent as isize;
    let side = 2 * half_extent + 1;
    let mut points = Vec::with_capacity(side * side);
    for i in -k..=k {
        for j in -k..=k {
            let a = (i as f64 / k as f64) * scale;
            let b = (j as f64 / k as f64) * scale;
            let mut p = x.clone();
            p.axpy(a, dir1)?;
            p.axpy(b, dir2)?;
            points.push(p.clamp(0.0, 1.0));
        }
    }
    let mut values = Vec::with_capacity(points.len());
    for chunk in points.chunks(256) {
        let batch = Tensor::stack(chunk)?;
        let probs = model.forward(&batch, None)?;
        values.extend(loss::cross_entropy_per_sample(&probs, &vec![y; chunk.len()], 0.0)?);
    }
    Ok(SurfaceGrid {
        values,
        dir1: dir1.clone(),
        dir2: dir2.clone(),
        half_extent,
        scale,
        center_id: center_id.into(),
    })
}

/// Per-sample `||grad_x CE||_2` over a batch.
pub fn input_grad_norms(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(y.len());
    let ids: Vec<usize> = (0..y.len()).collect();
    for chunk in ids.chunks(256) {
        let xb = x.select(chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
        let g = hvp::input_gradient(model, &xb, &yb)?;
        for i in 0..chunk.len() {
            out.push(math::sqrt(g.item_slice(i).iter().map(|v| v * v).sum()));
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Which model PGD points are generated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PgdPoints {
    #[default]
    MeasuredModel,
    OriginalModel,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PowerConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothnessOptions {
    pub variance: f64,
    pub attack: AttackConfig,
    pub pgd_points: PgdPoints,
    pub lambda_max: Option<PowerConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothnessRow {
    pub model: String,
    pub clean: f64,
    pub gaussian: f64,
    pub pgd: f64,
    /// Mean dominant input-Hessian eigenvalue at clean points.
    pub lambda_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothnessReport {
    pub original: SmoothnessRow,
    pub aligned: SmoothnessRow,
    pub samples: usize,
}

/// Mean input-gradient norms at clean, Gaussian and PGD points for an
/// original/aligned pair, optionally with mean `lambda_max` at clean points.
pub fn grad_norm_report(
    original: &Model,
    aligned: &Model,
    x: &Tensor,
    y: &[usize],
    opts: &SmoothnessOptions,
) -> Result<SmoothnessReport> {
    if original.input_shape() != aligned.input_shape() {
        return Err(invalid!("models must share an input shape"));
    }
    if y.is_empty() {
        return Err(Error::Empty("smoothness samples"));
    }
    let noisy = attacks::gaussian_perturb(x, opts.variance, opts.seed)?;
    let original_adv = attacks::pgd(core::slice::from_ref(original), x, y, &opts.attack)?.adversarial(x)?;
    let row = |model: &Model, name: &str| -> Result<SmoothnessRow> {
        let adv = match opts.pgd_points {
            PgdPoints::OriginalModel => original_adv.clone(),
            PgdPoints::MeasuredModel => {
                attacks::pgd(core::slice::from_ref(model), x, y, &opts.attack)?.adversarial(x)?
            }
        };
        let lambda_max = match &opts.lambda_max {
            Some(pc) => {
                let mut vals = Vec::with_capacity(y.len());
                for (i, &label) in y.iter().enumerate() {
                    vals.push(hessian_lambda_max(model, &x.item(i), label, pc)?.value);
                }
                Some(mean(&vals))
            }
            None => None,
        };
        Ok(SmoothnessRow {
            model: name.into(),
            clean: mean(&input_grad_norms(model, x, y)?),
            gaussian: mean(&input_grad_norms(model, &noisy, y)?),
            pgd: mean(&input_grad_norms(model, &adv, y)?),
            lambda_max,
        })
    };
    Ok(SmoothnessReport {
        original: row(original, "original")?,
        aligned: row(aligned, "aligned")?,
        samples: y.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LambdaMax {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on a symmetric operator given by `hvp`, returning the
/// Rayleigh quotient of the dominant-magnitude eigenvector.
pub fn power_iteration<H>(hvp: H, shape: &[usize], cfg: &PowerConfig) -> Result<LambdaMax>
where
    H: Fn(&Tensor) -> Result<Tensor>,
{
    if cfg.max_iters == 0 {
        return Err(invalid!("max_iters must be at least 1"));
    }
    let mut rng = rng::stream(cfg.seed, Stream::PowerIteration);
    let mut v = Tensor::zeros(shape);
    v.data_mut().iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
    v = v.scale(1.0 / v.norm_l2());
    let mut prev: Option<f64> = None;
    let mut lambda = 0.0;
    for it in 1..=cfg.max_iters {
        let w = hvp(&v)?;
        if !w.is_finite() {
            return Err(Error::NonFinite {
                context: "hessian-vector product",
                step: it,
            });
        }
        lambda = v.dot(&w)?;
        let norm = w.norm_l2();
        if norm == 0.0 {
            return Ok(LambdaMax {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        if let Some(p) = prev {
            if (lambda - p).abs() <= cfg.tol * p.abs() {
                return Ok(LambdaMax {
                    value: lambda,
                    iterations: it,
                    converged: true,
                });
            }
        }
        prev = Some(lambda);
        v = w.scale(1.0 / norm);
    }
    Ok(LambdaMax {
        value: lambda,
        iterations: cfg.max_iters,
        converged: false,
    })
}

/// Dominant eigenvalue of the input Hessian of CE at a single sample.
pub fn hessian_lambda_max(model: &Model, x: &Tensor, y: usize, cfg: &PowerConfig) -> Result<LambdaMax> {
    let labels = [y];
    power_iteration(|v| hvp::hvp_input(model, x, &labels, v), x.shape(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimilarityReport {
    /// Mean `KL(p_b || p_a)`.
    pub kl: f64,
    pub agreement: f64,
    /// Mean cosine between the two models' input gradients.
    pub cosine: f64,
    pub samples: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = math::sqrt(a.iter().map(|v| v * v).sum());
    let nb = math::sqrt(b.iter().map(|v| v * v).sum());
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (d / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

/// KL, prediction agreement and input-gradient cosine between two models at
/// clean points, each gradient taken under that model's own CE loss.
pub fn similarity_report(model_a: &Model, model_b: &Model, x: &Tensor, y: &[usize]) -> Result<SimilarityReport> {
    if model_a.input_shape() != model_b.input_shape() || model_a.num_classes() != model_b.num_classes() {
        return Err(invalid!("models must share input and output shapes"));
    }
    if y.is_empty() {
        return Err(Error::Empty("similarity samples"));
    }
    let m = model_a.num_classes();
    let ids: Vec<usize> = (0..y.len()).collect();
    let (mut kl, mut agree, mut cos) = (0.0, 0usize, 0.0);
    for chunk in ids.chunks(256) {
        let xb = x.select(chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
        let pa = model_a.forward(&xb, None)?;
        let pb = model_b.forward(&xb, None)?;
        for (ra, rb) in pa.data().chunks(m).zip(pb.data().chunks(m)) {
            kl += rb
                .iter()
                .zip(ra)
                .map(|(&b, &a)| if b == 0.0 { 0.0 } else { b * (loss::floored_ln(b) - loss::floored_ln(a)) })
                .sum::<f64>();
            agree += (crate::tensor::argmax(ra) == crate::tensor::argmax(rb)) as usize;
        }
        let ga = hvp::input_gradient(model_a, &xb, &yb)?;
        let gb = hvp::input_gradient(model_b, &xb, &yb)?;
        for i in 0..chunk.len() {
            cos += cosine(ga.item_slice(i), gb.item_slice(i));
        }
    }
    let n = y.len() as f64;
    Ok(SimilarityReport {
        kl: kl / n,
        agreement: agree as f64 / n,
        cosine: cos / n,
        samples: y.len(),
    })
}

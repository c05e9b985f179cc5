//! In-memory datasets and seeded synthetic image generators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SynthKind {
    GaussBlobs,
    RingClasses,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss-blobs" => Ok(SynthKind::GaussBlobs),
            "ring-classes" => Ok(SynthKind::RingClasses),
            _ => Err(invalid!("unknown synthetic dataset kind {s:?}")),
        }
    }
}

impl SynthKind {
    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::GaussBlobs => "gauss-blobs",
            SynthKind::RingClasses => "ring-classes",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "source", rename_all = "kebab-case"))]
pub enum Provenance {
    IdxFile { images: String, labels: String },
    CsvFile { path: String },
    Synthetic { kind: SynthKind, seed: u64 },
    Derived { note: String },
}

/// Labelled inputs with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(invalid!("dataset inputs need a leading sample axis"));
        }
        if inputs.batch_len() != labels.len() {
            return Err(invalid!(
                "{} inputs but {} labels",
                inputs.batch_len(),
                labels.len()
            ));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("input value {v} outside [0, 1]"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid!("label {y} outside [0, {num_classes})"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels for the given sample indices.
    pub fn batch(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select(ids), ids.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let ids: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, labels) = self.batch(&ids);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-pixel standard deviation of the gauss-blobs class patterns.
    pub amplitude: f64,
    pub seed: u64,
    /// Images are `[1, side, side]`.
    pub side: usize,
}

impl SynthSpec {
    /// The 10-class gauss-blobs task used by the bundled transfer scenarios.
    pub fn bundled_ten_class(seed: u64) -> Self {
        Self {
            kind: SynthKind::GaussBlobs,
            n_train: 2000,
            n_test: 1000,
            num_classes: 10,
            noise: BUNDLED_NOISE,
            amplitude: BUNDLED_AMPLITUDE,
            seed,
            side: 16,
        }
    }
}

/// Per-pixel noise of the bundled 10-class task.
pub const BUNDLED_NOISE: f64 = 0.5;

/// Class-pattern amplitude of the bundled 10-class task.
pub const BUNDLED_AMPLITUDE: f64 = 0.12;

/// Lowest spatial frequencies (per axis) mixed into a class centroid.
const BLOB_FREQUENCIES: usize = 4;

fn blob_centroids(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let side = spec.side;
    let mut rng = rng::stream(spec.seed, Stream::Synth);
    let pi = core::f64::consts::PI;
    (0..spec.num_classes)
        .map(|_| {
            let mut coeffs = [[0.0f64; BLOB_FREQUENCIES]; BLOB_FREQUENCIES];
            for (u, row) in coeffs.iter_mut().enumerate() {
                for (v, c) in row.iter_mut().enumerate() {
                    if u + v > 0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *c = z / (u + v) as f64;
                    }
                }
            }
            let mut pattern = vec![0.0; side * side];
            for y in 0..side {
                for x in 0..side {
                    let mut s = 0.0;
                    for (u, row) in coeffs.iter().enumerate() {
                        for (v, c) in row.iter().enumerate() {
                            s += c
                                * math::cos(pi * (2 * y + 1) as f64 * u as f64 / (2 * side) as f64)
                                * math::cos(pi * (2 * x + 1) as f64 * v as f64 / (2 * side) as f64);
                        }
                    }
                    pattern[y * side + x] = s;
                }
            }
            let mean = pattern.iter().sum::<f64>() / pattern.len() as f64;
            let var = pattern.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / pattern.len() as f64;
            let sd = math::sqrt(var).max(1e-12);
            pattern
                .iter()
                .map(|p| (0.5 + spec.amplitude * (p - mean) / sd).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

fn ring_image(side: usize, class: usize, classes: usize, angle: f64) -> Vec<f64> {
    let centre = (side as f64 - 1.0) / 2.0;
    let max_r = side as f64 / 2.0 - 1.5;
    let r = max_r * (class as f64 + 1.0) / classes as f64;
    let (cy, cx) = (centre + r * libm::sin(angle), centre + r * math::cos(angle));
    let width = (side as f64 / 10.0).max(1.0);
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let d2 = dy * dy + dx * dx;
            img[y * side + x] = 0.1 + 0.8 * math::exp(-d2 / (2.0 * width * width));
        }
    }
    img
}

/// Generates disjoint train and test splits. Labels cycle through the
/// classes so every class is represented equally.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(invalid!("synthetic splits must be nonempty"));
    }
    if spec.num_classes < 2 {
        return Err(invalid!("need at least two classes"));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(invalid!("noise must be nonnegative, got {}", spec.noise));
    }
    if !(spec.amplitude > 0.0) || !spec.amplitude.is_finite() {
        return Err(invalid!("amplitude must be positive, got {}", spec.amplitude));
    }
    if spec.side < 4 {
        return Err(invalid!("image side must be at least 4, got {}", spec.side));
    }
    let centroids = match spec.kind {
        SynthKind::GaussBlobs => Some(blob_centroids(spec)),
        SynthKind::RingClasses => None,
    };
    let pixels = spec.side * spec.side;
    let make = |n: usize, stream: Stream, split: Split| -> Result<Dataset> {
        let mut rng = rng::stream(spec.seed, stream);
        let mut data = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % spec.num_classes;
            let base = match &centroids {
                Some(c) => c[y].clone(),
                None => {
                    let angle = rng.random_range(0.0..2.0 * core::f64::consts::PI);
                    ring_image(spec.side, y, spec.num_classes, angle)
                }
            };
            for b in base {
                let eps: f64 = if spec.noise > 0.0 {
                    StandardNormal.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((b + spec.noise * eps).clamp(0.0, 1.0));
            }
            labels.push(y);
        }
        let inputs = Tensor::new(vec![n, 1, spec.side, spec.side], data)?;
        Dataset::new(
            inputs,
            labels,
            spec.num_classes,
            split,
            Provenance::Synthetic {
                kind: spec.kind,
                seed: spec.seed,
            },
        )
    };
    Ok((
        make(spec.n_train, Stream::Synth, Split::Train)?,
        make(spec.n_test, Stream::SynthTest, Split::Test)?,
    ))
}

/// One-line summary of a synthetic spec.
pub fn describe(spec: &SynthSpec) -> String {
    format!(
        "{}(n={}+{}, classes={}, noise={}, amplitude={}, side={}, seed={})",
        spec.kind.name(),
        spec.n_train,
        spec.n_test,
        spec.num_classes,
        spec.noise,
        spec.amplitude,
        spec.side,
        spec.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SynthKind, noise: f64) -> SynthSpec {
        SynthSpec {
            kind,
            n_train: 40,
            n_test: 20,
            num_classes: 4,
            noise,
            amplitude: 0.1,
            seed: 9,
            side: 8,
        }
    }

    #[test]
    fn deterministic() {
        for kind in [SynthKind::GaussBlobs, SynthKind::RingClasses] {
            assert_eq!(synth_dataset(&spec(kind, 0.1)).unwrap(), synth_dataset(&spec(kind, 0.1)).unwrap());
        }
    }

    #[test]
    fn zero_noise_blobs_sit_on_centroids() {
        let (train, test) = synth_dataset(&spec(SynthKind::GaussBlobs, 0.0)).unwrap();
        for d in [&train, &test] {
            for i in 0..d.len() {
                let j = d.labels[i];
                assert_eq!(d.inputs.item_slice(i), train.inputs.item_slice(j));
            }
        }
    }

    #[test]
    fn values_and_labels_in_range() {
        let (train, test) = synth_dataset(&spec(SynthKind::RingClasses, 0.5)).unwrap();
        for d in [&train, &test] {
            assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(d.labels.iter().all(|&y| y < 4));
            assert_eq!(d.sample_shape(), &[1, 8, 8]);
        }
        assert_ne!(train.inputs.item_slice(0), test.inputs.item_slice(0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut s = spec(SynthKind::GaussBlobs, -1.0);
        assert!(synth_dataset(&s).is_err());
        s.noise = 0.1;
        s.n_train = 0;
        assert!(synth_dataset(&s).is_err());
    }

    #[test]
    fn dataset_validation() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.5, 0.2, 0.3]).unwrap();
        assert!(Dataset::new(t, vec![0, 1], 2, Split::Train, Provenance::Derived { note: "x".into() }).is_err());
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.2, 0.3]).unwrap();
        assert!(Dataset::new(t.clone(), vec![0, 2], 2, Split::Train, Provenance::Derived { note: "x".into() }).is_err());
        assert!(Dataset::new(t, vec![0], 2, Split::Train, Provenance::Derived { note: "x".into() }).is_err());
    }
}

//! TOML experiment manifests.
//!
//! ```toml
//! [run]
//! seeds = [0, 1, 2]
//! out_dir = "runs/demo"
//!
//! [data]
//! source = "synth:gauss-blobs"
//!
//! [train]
//! epochs = 10
//!
//! [[models]]
//! name = "A"
//! arch = "cnn-S"
//! seed = 1
//!
//! [[alignments]]
//! name = "A~W"
//! source = "A"
//! witnesses = ["W"]
//! config = { base_lr = 0.2, epochs = 3, temperature = 4.0 }
//! # optional: replaces base_lr by the best rate on a held-out target
//! # lr_sweep = { rates = [0.05, 0.01, 0.002], validation_target = "V" }
//!
//! [attack]
//! method = "pgd"
//! epsilon = "8/255"
//! alpha = "2/255"
//! iterations = 20
//!
//! [eval]
//! samples = 200
//! sources = ["A"]
//! targets = ["B"]
//!
//! [[analysis]]
//! kind = "smoothness"
//! alignment = "A~W"
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use malign_core::alignment::{AlignmentConfig, Distance};
use malign_core::analysis::{PgdPoints, PowerConfig};
use malign_core::attacks::{AttackConfig, AttackMethod};
use malign_core::train::TrainConfig;
use malign_core::zoo::ArchTag;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::harness::SweepAxis;
use crate::source::DataSource;

/// Parses `"a/b"` or a plain decimal.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = |why: &str| Error::Manifest(format!("invalid number {s:?}: {why}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad("bad numerator"))?;
            let b: f64 = b.trim().parse().map_err(|_| bad("bad denominator"))?;
            if b == 0.0 {
                return Err(bad("zero denominator"));
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| bad("not a number"))?,
    };
    if !v.is_finite() {
        return Err(bad("not finite"));
    }
    Ok(v)
}

/// A number written either as a float or as an `"a/b"` string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Float(f64),
    Text(String),
}

impl Num {
    pub fn value(&self) -> Result<f64> {
        match self {
            Num::Float(v) => Ok(*v),
            Num::Text(s) => parse_fraction(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Defaults to the logical core count.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_out() -> PathBuf {
    PathBuf::from("malign-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub arch: String,
    /// Mixed with the run seed into the init and shuffle seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentEntry {
    pub name: String,
    pub source: String,
    pub witnesses: Vec<String>,
    #[serde(default)]
    pub config: AlignmentConfig,
    /// Replaces `config.base_lr` with the best of several rates.
    #[serde(default)]
    pub lr_sweep: Option<LrSweep>,
}

/// Align once per rate, measure the transfer delta of each candidate on a
/// target kept out of `eval.targets`, and keep the rate with the highest
/// seed-mean delta (the first one on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSweep {
    #[serde(default = "default_lr_rates")]
    pub rates: Vec<f64>,
    pub validation_target: String,
}

fn default_lr_rates() -> Vec<f64> {
    vec![0.05, 0.01, 0.002]
}

/// A method preset plus budget, with optional per-switch overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_method")]
    pub method: AttackMethod,
    pub epsilon: Num,
    pub alpha: Num,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    pub momentum: Option<f64>,
    pub nesterov: Option<bool>,
    pub scale_copies: Option<usize>,
    pub variance_samples: Option<usize>,
    pub variance_beta: Option<f64>,
    pub ti_kernel_size: Option<usize>,
    pub ti_sigma: Option<f64>,
    pub di_probability: Option<f64>,
    pub di_resize_low: Option<f64>,
    pub di_resize_high: Option<f64>,
    pub random_start: Option<bool>,
}

fn default_method() -> AttackMethod {
    AttackMethod::Pgd
}

impl AttackSection {
    pub fn config(&self) -> Result<AttackConfig> {
        let mut c = self
            .method
            .config(self.epsilon.value()?, self.alpha.value()?, self.iterations, self.seed);
        macro_rules! over {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        over!(
            momentum,
            nesterov,
            scale_copies,
            variance_samples,
            variance_beta,
            ti_kernel_size,
            ti_sigma,
            di_probability,
            di_resize_low,
            di_resize_high,
            random_start
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleEntry {
    pub name: String,
    /// The source whose eval set and baseline the ensemble is compared to.
    pub source: String,
    /// Model or alignment names.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub ensembles: Vec<EnsembleEntry>,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Smoothness,
    Similarity,
    Hessian,
    Dct,
    Surface,
}

impl AnalysisKind {
    pub fn name(&self) -> &'static str {
        match self {
            AnalysisKind::Smoothness => "smoothness",
            AnalysisKind::Similarity => "similarity",
            AnalysisKind::Hessian => "hessian",
            AnalysisKind::Dct => "dct",
            AnalysisKind::Surface => "surface",
        }
    }
}

/// One analysis comparing an aligned model with its original source on
/// the first `samples` held-out samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisEntry {
    pub kind: AnalysisKind,
    pub alignment: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Gaussian variance (smoothness).
    #[serde(default = "default_variance")]
    pub variance: f64,
    /// Smoothness: also report mean lambda_max.
    #[serde(default)]
    pub lambda_max: bool,
    #[serde(default)]
    pub pgd_points: PgdPoints,
    /// Power iteration settings (hessian, smoothness with lambda_max).
    #[serde(default)]
    pub power: PowerConfig,
    /// Surface: pool index of the center sample.
    #[serde(default)]
    pub sample: usize,
    /// Surface: grid half extent `k` (the grid is `(2k+1)^2`).
    #[serde(default = "default_half_extent")]
    pub half_extent: usize,
    /// Surface: the outermost cell sits at `scale * direction`, with
    /// directions of l-infinity norm epsilon.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_variance() -> f64 {
    0.01
}

fn default_half_extent() -> usize {
    20
}

fn default_scale() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub axis: String,
    /// Strings for capacity/distance/attack, integers for witness count.
    pub values: Vec<toml::Value>,
    pub source: String,
    pub targets: Vec<String>,
    /// Template witness model.
    pub witness: String,
    #[serde(default)]
    pub config: AlignmentConfig,
}

impl SweepEntry {
    pub fn axis(&self) -> Result<SweepAxis> {
        let text = |v: &toml::Value| -> Result<String> {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::Manifest(format!("sweep value {v} must be a string")))
        };
        let strings = || self.values.iter().map(text).collect::<Result<Vec<_>>>();
        Ok(match self.axis.as_str() {
            "witness-capacity" => {
                let v = strings()?;
                for a in &v {
                    a.parse::<ArchTag>()?;
                }
                SweepAxis::WitnessCapacity(v)
            }
            "witness-count" => SweepAxis::WitnessCount(
                self.values
                    .iter()
                    .map(|v| {
                        v.as_integer()
                            .filter(|&c| c >= 1)
                            .map(|c| c as usize)
                            .ok_or_else(|| Error::Manifest(format!("witness count {v} must be a positive integer")))
                    })
                    .collect::<Result<_>>()?,
            ),
            "distance" => SweepAxis::Distance(
                strings()?
                    .iter()
                    .map(|s| match s.as_str() {
                        "kl" => Ok(Distance::Kl),
                        "tv" => Ok(Distance::Tv),
                        "hint" => Ok(Distance::Hint),
                        other => Err(Error::Manifest(format!("unknown distance {other:?}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
            "attack" => SweepAxis::Attack(
                strings()?
                    .iter()
                    .map(|s| s.parse::<AttackMethod>().map_err(Error::from))
                    .collect::<Result<_>>()?,
            ),
            other => return Err(Error::Manifest(format!("unknown sweep axis {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub alignments: Vec<AlignmentEntry>,
    pub attack: AttackSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub analysis: Vec<AnalysisEntry>,
    #[serde(default)]
    pub sweep: Option<SweepEntry>,
}

fn safe_name(n: &str) -> bool {
    !n.is_empty()
        && n != "n/a"
        && n.chars().all(|c| c.is_ascii_alphanumeric() || "_-.~+".contains(c))
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn data_source(&self) -> Result<DataSource> {
        self.data.source.parse()
    }

    pub fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn alignment(&self, name: &str) -> Option<&AlignmentEntry> {
        self.alignments.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Manifest(m));
        if self.run.seeds.is_empty() {
            return err("run.seeds must list at least one seed".into());
        }
        if self.run.workers == Some(0) {
            return err("run.workers must be at least 1".into());
        }
        self.data_source()?;
        self.train.validate()?;
        let mut names = BTreeSet::new();
        for m in &self.models {
            m.arch.parse::<ArchTag>()?;
            if !safe_name(&m.name) || !names.insert(m.name.as_str()) {
                return err(format!("model name {:?} is invalid or repeated", m.name));
            }
        }
        for a in &self.alignments {
            if !safe_name(&a.name) || !names.insert(a.name.as_str()) {
                return err(format!("alignment name {:?} is invalid or repeated", a.name));
            }
            if self.model(&a.source).is_none() {
                return err(format!("alignment {}: unknown source model {:?}", a.name, a.source));
            }
            if a.witnesses.is_empty() {
                return err(format!("alignment {}: no witnesses", a.name));
            }
            for w in &a.witnesses {
                if self.model(w).is_none() {
                    return err(format!("alignment {}: unknown witness model {w:?}", a.name));
                }
            }
            a.config.validate()?;
            if let Some(sw) = &a.lr_sweep {
                if sw.rates.is_empty() || sw.rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
                    return err(format!("alignment {}: lr_sweep.rates must be positive and nonempty", a.name));
                }
                if self.model(&sw.validation_target).is_none() {
                    return err(format!("alignment {}: unknown validation target {:?}", a.name, sw.validation_target));
                }
                if self.eval.targets.contains(&sw.validation_target) || sw.validation_target == a.source {
                    return err(format!(
                        "alignment {}: validation target {:?} must be held out of eval.targets and differ from the source",
                        a.name, sw.validation_target
                    ));
                }
            }
        }
        self.attack.config()?;
        if self.eval.samples == 0 {
            return err("eval.samples must be at least 1".into());
        }
        for s in self.eval.sources.iter().chain(&self.eval.targets) {
            if self.model(s).is_none() {
                return err(format!("eval: unknown model {s:?}"));
            }
        }
        for e in &self.eval.ensembles {
            if !safe_name(&e.name) || !names.insert(e.name.as_str()) {
                return err(format!("ensemble name {:?} is invalid or repeated", e.name));
            }
            if !self.eval.sources.contains(&e.source) {
                return err(format!("ensemble {}: {:?} is not an eval source", e.name, e.source));
            }
            if e.members.is_empty() {
                return err(format!("ensemble {}: no members", e.name));
            }
            for m in &e.members {
                if self.model(m).is_none() && self.alignment(m).is_none() {
                    return err(format!("ensemble {}: unknown member {m:?}", e.name));
                }
            }
        }
        for (i, a) in self.analysis.iter().enumerate() {
            if self.alignment(&a.alignment).is_none() {
                return err(format!("analysis {i}: unknown alignment {:?}", a.alignment));
            }
            if a.samples == 0 || a.half_extent == 0 || !(a.scale > 0.0) || a.power.max_iters == 0 {
                return err(format!("analysis {i}: samples, half_extent, scale and power.max_iters must be positive"));
            }
        }
        if let Some(s) = &self.sweep {
            s.axis()?;
            s.config.validate()?;
            for n in std::iter::once(&s.source).chain(&s.targets).chain(std::iter::once(&s.witness)) {
                if self.model(n).is_none() {
                    return err(format!("sweep: unknown model {n:?}"));
                }
            }
        }
        Ok(())
    }
}

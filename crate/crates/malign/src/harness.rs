//! Transfer-rate experiments: fixed-set evaluation of source variants
//! against targets, seed aggregation, and one-axis sweeps.

use malign_core::alignment::{align, AlignmentConfig, Distance};
use malign_core::attacks::{self, AttackConfig, AttackMethod, PerturbationRecord};
use malign_core::data::Dataset;
use malign_core::eval::{select_eval_samples, transfer_error, EvalSet};
use malign_core::rng::mix;
use malign_core::train::{train, TrainConfig};
use malign_core::zoo::{build_model, ArchFamily, ArchTag};
use malign_core::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::quantize;
use crate::error::{Error, Result};
use crate::report::{Cell, Report};

/// Variant name of the unaligned source row.
pub const BASELINE: &str = "n/a";

/// A source replacement evaluated on the original source's eval set. More
/// than one model means a logit-averaged ensemble.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub models: Vec<Model>,
}

#[derive(Debug, Clone)]
pub struct SourceGroup {
    pub name: String,
    pub original: Model,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone)]
pub struct Target {
    pub name: String,
    pub model: Model,
}

/// Everything evaluated under one run seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub sources: Vec<SourceGroup>,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    pub attack: AttackConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            attack: AttackConfig::default(),
        }
    }
}

/// The attack config used under run seed `seed`.
pub fn seeded_attack(cfg: &AttackConfig, seed: u64) -> AttackConfig {
    AttackConfig {
        seed: mix(cfg.seed, seed),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub source: String,
    pub variant: String,
    pub target: String,
    /// Percent of the eval set the target misclassifies.
    pub rate: f64,
    pub samples: usize,
    pub exhausted: bool,
    pub sample_ids: Vec<usize>,
    pub selection_fingerprint: String,
    pub attack_fingerprint: String,
    pub model_ids: Vec<String>,
    pub target_id: String,
    /// Fraction of the set on which the attack fooled its own models.
    pub whitebox_success: f64,
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub eval_set: EvalSet,
    pub cells: Vec<CellRecord>,
    /// Per variant (baseline first).
    pub perturbations: Vec<(String, PerturbationRecord)>,
}

/// Selects the eval set with the original source, then attacks it with the
/// baseline and every variant and measures the target's error.
pub fn evaluate_pair(group: &SourceGroup, target: &Target, pool: &Dataset, opts: &EvalOptions, seed: u64) -> Result<PairOutcome> {
    let cfg = seeded_attack(&opts.attack, seed);
    let set = select_eval_samples(&group.original, &target.model, pool, opts.samples, &cfg)?;
    if set.ids.is_empty() {
        return Err(Error::Manifest(format!(
            "no pool sample qualifies for source {} and target {} under seed {seed}",
            group.name, target.name
        )));
    }
    let (x, y) = pool.batch(&set.ids);
    let baseline = Variant {
        name: BASELINE.into(),
        models: vec![group.original.clone()],
    };
    let mut cells = Vec::new();
    let mut perturbations = Vec::new();
    for v in std::iter::once(&baseline).chain(&group.variants) {
        let rec = attacks::attack(&v.models, &x, &y, &cfg)?;
        let rate = transfer_error(&target.model, &rec.adversarial(&x)?, &y)?;
        cells.push(CellRecord {
            seed,
            source: group.name.clone(),
            variant: v.name.clone(),
            target: target.name.clone(),
            rate,
            samples: set.ids.len(),
            exhausted: set.exhausted,
            sample_ids: set.ids.clone(),
            selection_fingerprint: set.fingerprint.hash.clone(),
            attack_fingerprint: rec.fingerprint.hash.clone(),
            model_ids: v.models.iter().map(Model::id).collect(),
            target_id: target.model.id(),
            whitebox_success: rec.success_rate(),
        });
        perturbations.push((v.name.clone(), rec));
    }
    Ok(PairOutcome {
        eval_set: set,
        cells,
        perturbations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: String,
    pub variant: String,
    pub target: String,
    pub seeds: Vec<u64>,
    pub mean_samples: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `mean - mean(baseline)`; absent on baseline rows.
    pub delta: Option<f64>,
    /// Spread of the per-seed deltas.
    pub delta_min: Option<f64>,
    pub delta_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub cells: Vec<CellRecord>,
    pub rows: Vec<TransferRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl TransferReport {
    /// Groups cells by (source, variant, target) in first-seen order and
    /// aggregates over seeds.
    pub fn from_cells(cells: Vec<CellRecord>) -> Result<Self> {
        let mut keys: Vec<(&str, &str, &str)> = Vec::new();
        for c in &cells {
            let k = (c.source.as_str(), c.variant.as_str(), c.target.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let cell = |s: &str, v: &str, t: &str, seed: u64| {
            cells
                .iter()
                .find(|c| c.source == s && c.variant == v && c.target == t && c.seed == seed)
        };
        let mut rows = Vec::with_capacity(keys.len());
        for &(s, v, t) in &keys {
            let mine: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| c.source == s && c.variant == v && c.target == t)
                .collect();
            let rates: Vec<f64> = mine.iter().map(|c| c.rate).collect();
            let seeds: Vec<u64> = mine.iter().map(|c| c.seed).collect();
            let m = mean(&rates);
            let (delta, delta_min, delta_max) = if v == BASELINE {
                (None, None, None)
            } else {
                let base: Vec<f64> = seeds
                    .iter()
                    .map(|&seed| {
                        cell(s, BASELINE, t, seed).map(|c| c.rate).ok_or_else(|| {
                            Error::Manifest(format!("variant {v} of {s} has no baseline cell for {t}, seed {seed}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let per: Vec<f64> = rates.iter().zip(&base).map(|(r, b)| r - b).collect();
                (
                    Some(m - mean(&base)),
                    per.iter().copied().reduce(f64::min),
                    per.iter().copied().reduce(f64::max),
                )
            };
            rows.push(TransferRow {
                source: s.into(),
                variant: v.into(),
                target: t.into(),
                mean_samples: mean(&mine.iter().map(|c| c.samples as f64).collect::<Vec<_>>()),
                mean: m,
                min: rates.iter().copied().fold(f64::INFINITY, f64::min),
                max: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                seeds,
                delta,
                delta_min,
                delta_max,
            });
        }
        Ok(Self { cells, rows })
    }

    pub fn row(&self, source: &str, variant: &str, target: &str) -> Option<&TransferRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.variant == variant && r.target == target)
    }

    /// Mean delta over every row of the named variant.
    pub fn mean_delta(&self, variant: &str) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).filter_map(|r| r.delta).collect();
        (!d.is_empty()).then(|| mean(&d))
    }

    /// Baseline rows plus the rows of one variant.
    pub fn restrict(&self, variant: &str) -> TransferReport {
        let keep = |v: &str| v == BASELINE || v == variant;
        TransferReport {
            cells: self.cells.iter().filter(|c| keep(&c.variant)).cloned().collect(),
            rows: self.rows.iter().filter(|r| keep(&r.variant)).cloned().collect(),
        }
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn matrix_report(&self, meta: serde_json::Value) -> Result<Report> {
        let mut r = Report::new(
            with_seeds(meta, &self.seeds()),
            &["source", "variant", "target", "seeds", "samples", "mean", "min", "max"],
        )?;
        for row in &self.rows {
            r.push(vec![
                row.source.as_str().into(),
                row.variant.as_str().into(),
                row.target.as_str().into(),
                row.seeds.len().into(),
                row.mean_samples.into(),
                row.mean.into(),
                row.min.into(),
                row.max.into(),
            ]);
        }
        Ok(r)
    }

    pub fn deltas_report(&self, meta: serde_json::Value) -> Result<Report> {
        let mut r = Report::new(
            with_seeds(meta, &self.seeds()),
            &["source", "variant", "target", "baseline", "rate", "delta", "seed_delta_min", "seed_delta_max"],
        )?;
        for row in self.rows.iter().filter(|r| r.variant != BASELINE) {
            let base = self.row(&row.source, BASELINE, &row.target).map(|b| b.mean);
            r.push(vec![
                row.source.as_str().into(),
                row.variant.as_str().into(),
                row.target.as_str().into(),
                base.into(),
                row.mean.into(),
                row.delta.into(),
                row.delta_min.into(),
                row.delta_max.into(),
            ]);
        }
        Ok(r)
    }
}

fn with_seeds(mut meta: serde_json::Value, seeds: &[u64]) -> serde_json::Value {
    if let serde_json::Value::Object(m) = &mut meta {
        m.insert("seeds".into(), serde_json::json!(seeds));
    }
    meta
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Manifest(format!("worker pool: {e}")))
}

/// Logical core count, the default worker count.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every (seed, source, target) pair on `workers` threads and
/// aggregates over seeds. Results do not depend on the worker count.
pub fn transfer_matrix(scenarios: &[Scenario], pool: &Dataset, opts: &EvalOptions, workers: usize) -> Result<TransferReport> {
    let jobs: Vec<(&Scenario, &SourceGroup, &Target)> = scenarios
        .iter()
        .flat_map(|sc| sc.sources.iter().flat_map(move |g| sc.targets.iter().map(move |t| (sc, g, t))))
        .collect();
    let outcomes: Vec<Result<PairOutcome>> = thread_pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(sc, g, t)| evaluate_pair(g, t, pool, opts, sc.seed))
            .collect()
    });
    let mut cells = Vec::new();
    for o in outcomes {
        cells.extend(o?.cells);
    }
    TransferReport::from_cells(cells)
}

/// A model to build and train: architecture plus a per-model seed that
/// is mixed with the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub arch: String,
    pub seed: u64,
}

impl Recipe {
    pub fn tag(&self) -> Result<ArchTag> {
        Ok(self.arch.parse()?)
    }

    /// Seed used for both initialization and shuffling under `run_seed`.
    pub fn seed_for(&self, run_seed: u64) -> u64 {
        mix(run_seed, self.seed)
    }
}

/// Builds and trains a recipe; parameters are rounded to f32 so a
/// checkpointed copy behaves identically.
pub fn train_recipe(recipe: &Recipe, data: &Dataset, cfg: &TrainConfig, run_seed: u64) -> Result<Model> {
    let fam = ArchFamily::new(recipe.tag()?, data.num_classes, data.sample_shape());
    let seed = recipe.seed_for(run_seed);
    let model = build_model(&fam, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    Ok(quantize(&train(&model, data, &cfg)?.0))
}

pub fn seeded_align(cfg: &AlignmentConfig, run_seed: u64) -> AlignmentConfig {
    AlignmentConfig {
        seed: mix(cfg.seed, run_seed),
        ..cfg.clone()
    }
}

/// Aligns and rounds to f32.
pub fn align_quantized(source: &Model, witnesses: &[Model], cfg: &AlignmentConfig, data: &Dataset) -> Result<malign_core::alignment::AlignOutcome> {
    let mut out = align(source, witnesses, cfg, data)?;
    out.model = quantize(&out.model);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    WitnessCapacity(Vec<String>),
    WitnessCount(Vec<usize>),
    Distance(Vec<Distance>),
    Attack(Vec<AttackMethod>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::WitnessCapacity(_) => "witness-capacity",
            SweepAxis::WitnessCount(_) => "witness-count",
            SweepAxis::Distance(_) => "distance",
            SweepAxis::Attack(_) => "attack",
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::WitnessCapacity(v) => v.clone(),
            SweepAxis::WitnessCount(v) => v.iter().map(|c| c.to_string()).collect(),
            SweepAxis::Distance(v) => v.iter().map(|d| d.name().to_string()).collect(),
            SweepAxis::Attack(v) => v.iter().map(|m| m.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub source: Recipe,
    pub targets: Vec<Recipe>,
    /// Template witness; the capacity axis swaps its architecture and the
    /// count axis adds copies with consecutive seeds.
    pub witness: Recipe,
    pub train: TrainConfig,
    pub align: AlignmentConfig,
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub axis: SweepAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    /// Total witness parameter count (capacity and count axes).
    pub witness_params: Option<usize>,
    pub report: TransferReport,
}

/// Name of the aligned variant in sweep reports.
pub const ALIGNED: &str = "aligned";

/// Trains shared source/target models per seed, aligns the source once per
/// axis value and evaluates against one shared baseline (per attack, on the
/// attack axis).
pub fn sweep(spec: &SweepSpec, train_d: &Dataset, pool: &Dataset, workers: usize) -> Result<Vec<SweepPoint>> {
    if spec.seeds.is_empty() {
        return Err(Error::Manifest("sweep needs at least one seed".into()));
    }
    let labels = spec.axis.labels();
    if labels.is_empty() {
        return Err(Error::Manifest("sweep axis has no values".into()));
    }
    let tp = thread_pool(workers)?;
    let witnesses: Vec<Recipe> = match &spec.axis {
        SweepAxis::WitnessCapacity(archs) => archs
            .iter()
            .map(|a| Recipe {
                name: format!("{}:{a}", spec.witness.name),
                arch: a.clone(),
                seed: spec.witness.seed,
            })
            .collect(),
        SweepAxis::WitnessCount(counts) => {
            let max = counts.iter().copied().max().unwrap_or(0);
            if counts.contains(&0) {
                return Err(Error::Manifest("witness count must be at least 1".into()));
            }
            (0..max as u64)
                .map(|k| Recipe {
                    name: format!("{}#{k}", spec.witness.name),
                    arch: spec.witness.arch.clone(),
                    seed: spec.witness.seed + k,
                })
                .collect()
        }
        _ => vec![spec.witness.clone()],
    };
    let recipes: Vec<&Recipe> = std::iter::once(&spec.source).chain(&spec.targets).chain(&witnesses).collect();
    let jobs: Vec<(u64, &Recipe)> = spec.seeds.iter().flat_map(|&s| recipes.iter().map(move |r| (s, *r))).collect();
    let trained: Vec<Model> = tp
        .install(|| jobs.par_iter().map(|(s, r)| train_recipe(r, train_d, &spec.train, *s)).collect::<Vec<_>>())
        .into_iter()
        .collect::<Result<_>>()?;
    let per_seed = recipes.len();
    let models = |si: usize| &trained[si * per_seed..(si + 1) * per_seed];
    let nt = spec.targets.len();

    // (seed index, axis index) -> aligned source
    let align_jobs: Vec<(usize, usize)> = (0..spec.seeds.len())
        .flat_map(|si| {
            let n = if matches!(spec.axis, SweepAxis::Attack(_)) { 1 } else { labels.len() };
            (0..n).map(move |ai| (si, ai))
        })
        .collect();
    let aligned: Vec<Model> = tp
        .install(|| {
            align_jobs
                .par_iter()
                .map(|&(si, ai)| {
                    let m = models(si);
                    let ws = &m[1 + nt..];
                    let mut cfg = seeded_align(&spec.align, spec.seeds[si]);
                    let chosen: &[Model] = match &spec.axis {
                        SweepAxis::WitnessCapacity(_) => &ws[ai..=ai],
                        SweepAxis::WitnessCount(c) => &ws[..c[ai]],
                        SweepAxis::Distance(d) => {
                            cfg.distance = d[ai];
                            ws
                        }
                        SweepAxis::Attack(_) => ws,
                    };
                    align_quantized(&m[0], chosen, &cfg, train_d).map(|o| o.model)
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let n_aligned = aligned.len() / spec.seeds.len();

    let targets = |si: usize| -> Vec<Target> {
        spec.targets
            .iter()
            .zip(&models(si)[1..1 + nt])
            .map(|(r, m)| Target {
                name: r.name.clone(),
                model: m.clone(),
            })
            .collect()
    };
    let witness_params = |ai: usize| -> Option<usize> {
        let m = models(0);
        let ws = &m[1 + nt..];
        match &spec.axis {
            SweepAxis::WitnessCapacity(_) => Some(ws[ai].param_count()),
            SweepAxis::WitnessCount(c) => Some(ws[..c[ai]].iter().map(Model::param_count).sum()),
            _ => None,
        }
    };

    if let SweepAxis::Attack(methods) = &spec.axis {
        let mut points = Vec::new();
        for (ai, method) in methods.iter().enumerate() {
            let base = &spec.eval.attack;
            let eval = EvalOptions {
                samples: spec.eval.samples,
                attack: method.config(base.epsilon, base.alpha, base.iterations, base.seed),
            };
            let scenarios: Vec<Scenario> = spec
                .seeds
                .iter()
                .enumerate()
                .map(|(si, &seed)| Scenario {
                    seed,
                    sources: vec![SourceGroup {
                        name: spec.source.name.clone(),
                        original: models(si)[0].clone(),
                        variants: vec![Variant {
                            name: ALIGNED.into(),
                            models: vec![aligned[si].clone()],
                        }],
                    }],
                    targets: targets(si),
                })
                .collect();
            points.push(SweepPoint {
                label: labels[ai].clone(),
                witness_params: None,
                report: transfer_matrix(&scenarios, pool, &eval, workers)?,
            });
        }
        return Ok(points);
    }

    // one evaluation with a variant per axis value shares the baseline
    let scenarios: Vec<Scenario> = spec
        .seeds
        .iter()
        .enumerate()
        .map(|(si, &seed)| Scenario {
            seed,
            sources: vec![SourceGroup {
                name: spec.source.name.clone(),
                original: models(si)[0].clone(),
                variants: (0..n_aligned)
                    .map(|ai| Variant {
                        name: labels[ai].clone(),
                        models: vec![aligned[si * n_aligned + ai].clone()],
                    })
                    .collect(),
            }],
            targets: targets(si),
        })
        .collect();
    let full = transfer_matrix(&scenarios, pool, &spec.eval, workers)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(ai, l)| SweepPoint {
            label: l.clone(),
            witness_params: witness_params(ai),
            report: full.restrict(l),
        })
        .collect())
}

/// Flattens sweep points into one report.
pub fn sweep_report(axis: &str, points: &[SweepPoint], meta: serde_json::Value) -> Result<Report> {
    let mut r = Report::new(
        meta,
        &["axis", "value", "witness_params", "source", "variant", "target", "mean", "min", "max", "delta"],
    )?;
    for p in points {
        for row in &p.report.rows {
            r.push(vec![
                axis.into(),
                p.label.as_str().into(),
                p.witness_params.into(),
                row.source.as_str().into(),
                row.variant.as_str().into(),
                row.target.as_str().into(),
                row.mean.into(),
                row.min.into(),
                row.max.into(),
                Cell::from(row.delta),
            ]);
        }
    }
    Ok(r)
}

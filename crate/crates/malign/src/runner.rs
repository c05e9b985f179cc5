//! Executes a manifest: train -> align -> attack/eval -> analyze -> sweep.
//!
//! Every stage has a key: the sha256 of its config and of the keys of the
//! stages it consumes. `run_record.json` maps stage names to keys; a stage
//! whose key is unchanged and whose outputs exist is skipped and its
//! outputs are read back instead. Aggregate reports are rebuilt from the
//! per-stage outputs on every run, so they come out byte-identical.
//!
//! Layout under the output directory:
//!
//! ```text
//! checkpoints/seed{s}/{model}.ckpt (and {alignment}@lr{i}.ckpt per swept rate)
//! perturbations/seed{s}/{source}__{target}__{variant}.pert
//! reports/transfer_matrix.csv
//! reports/deltas.csv
//! reports/cells/seed{s}__{source}__{target}.json
//! reports/align/seed{s}__{alignment}.csv
//! reports/lr_sweep/seed{s}__{alignment}@lr{i}.json, reports/lr_sweep.csv
//! reports/analysis/{i}-{kind}.csv
//! reports/analysis/{i}-{kind}/seed{s}.json (+ .csv for grids and spectra)
//! reports/sweep.json, reports/sweep.csv
//! run_record.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use malign_core::alignment::AlignStep;
use malign_core::analysis::{
    grad_norm_report, hessian_lambda_max, loss_surface, orthogonal_direction, similarity_report, spectrum_diff,
    PowerConfig, SimilarityReport, SmoothnessOptions, SmoothnessReport,
};
use malign_core::attacks::{self, AttackConfig};
use malign_core::data::Dataset;
use malign_core::rng::mix;
use malign_core::Model;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, IoContext, Result};
use crate::harness::{
    align_quantized, evaluate_pair, seeded_align, seeded_attack, sweep, sweep_report, thread_pool, train_recipe,
    CellRecord, EvalOptions, Recipe, SourceGroup, SweepPoint, SweepSpec, Target, TransferReport, Variant, BASELINE,
};
use crate::manifest::{AnalysisEntry, AnalysisKind, ExperimentManifest};
use crate::perturbation::{save_perturbations, PerturbationSet};
use crate::report::{matrix_report, Cell, Report};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `run.out_dir`.
    pub out_dir: Option<PathBuf>,
    /// Overrides `run.workers`.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub stages: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub mean: f64,
    pub values: Vec<f64>,
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessSimilarity {
    pub witness: String,
    /// Witness vs original source.
    pub before: SimilarityReport,
    /// Witness vs aligned source.
    pub after: SimilarityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnalysisResult {
    Smoothness {
        report: SmoothnessReport,
    },
    Similarity {
        witnesses: Vec<WitnessSimilarity>,
    },
    Hessian {
        original: LambdaStats,
        aligned: LambdaStats,
    },
    Dct {
        samples: usize,
        shape: Vec<usize>,
        matrix: Vec<f64>,
        low_frequency_positive_fraction: f64,
    },
    Surface {
        side: usize,
        original: Vec<f64>,
        aligned: Vec<f64>,
        residual_cosine: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub seed: u64,
    pub result: AnalysisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub index: usize,
    pub kind: AnalysisKind,
    pub alignment: String,
    pub per_seed: Vec<SeedAnalysis>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub transfer: TransferReport,
    pub analyses: Vec<AnalysisOutcome>,
    pub sweep: Option<Vec<SweepPoint>>,
}

fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Hash of everything that decides the results (output path and worker
/// count excluded).
pub fn config_hash(m: &ExperimentManifest) -> Result<String> {
    let mut v = serde_json::to_value(m)?;
    if let Some(run) = v.get_mut("run").and_then(|r| r.as_object_mut()) {
        run.remove("out_dir");
        run.remove("workers");
    }
    Ok(hash_json(&v))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).at(path)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).at(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn file_name(variant: &str) -> String {
    if variant == BASELINE {
        "baseline".into()
    } else {
        variant.into()
    }
}

struct Ctx {
    out: PathBuf,
    record: RunRecord,
    executed: Vec<String>,
    skipped: Vec<String>,
    data_hash: String,
    attack: AttackConfig,
}

/// A stage's planned work: its name, key, and whether it can be skipped.
struct Plan {
    name: String,
    key: String,
    cached: bool,
}

impl Ctx {
    fn plan(&self, name: String, key: String, outputs: &[PathBuf]) -> Plan {
        let cached = self.record.stages.get(&name) == Some(&key) && outputs.iter().all(|p| p.exists());
        Plan { name, key, cached }
    }

    fn finish(&mut self, plans: &[Plan]) -> Result<()> {
        for p in plans {
            if p.cached {
                self.skipped.push(p.name.clone());
            } else {
                self.executed.push(p.name.clone());
            }
            self.record.stages.insert(p.name.clone(), p.key.clone());
        }
        self.save_record()
    }

    fn save_record(&self) -> Result<()> {
        write_json(&self.out.join("run_record.json"), &self.record)
    }

    fn ckpt(&self, seed: u64, name: &str) -> PathBuf {
        self.out.join(format!("checkpoints/seed{seed}/{name}.ckpt"))
    }
}

fn stage_err(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    }
}

/// Collects per-job results, failing with the first error in job order.
fn gather<T>(plans: &[Plan], results: Vec<Result<T>>) -> Result<Vec<T>> {
    plans
        .iter()
        .zip(results)
        .map(|(p, r)| r.map_err(stage_err(&p.name)))
        .collect()
}

pub fn run_experiment(manifest: &ExperimentManifest, opts: &RunOptions) -> Result<RunOutcome> {
    manifest.validate()?;
    let out = opts.out_dir.clone().unwrap_or_else(|| manifest.run.out_dir.clone());
    let workers = opts
        .workers
        .or(manifest.run.workers)
        .unwrap_or_else(crate::harness::default_workers);
    fs::create_dir_all(&out).at(&out)?;
    let record_path = out.join("run_record.json");
    let record: RunRecord = if record_path.exists() {
        read_json(&record_path).unwrap_or_default()
    } else {
        RunRecord::default()
    };
    let source = manifest.data_source()?;
    let (train_d, test_d) = source.load().map_err(stage_err("data"))?;
    let config_hash = config_hash(manifest)?;
    let mut ctx = Ctx {
        out,
        record: RunRecord {
            config_hash: config_hash.clone(),
            stages: record.stages,
        },
        executed: Vec::new(),
        skipped: Vec::new(),
        data_hash: source.content_hash()?,
        attack: manifest.attack.config()?,
    };
    let tp = thread_pool(workers)?;
    let seeds = manifest.run.seeds.clone();

    // train
    let mut models: BTreeMap<(u64, String), (Model, String)> = BTreeMap::new();
    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    for &s in &seeds {
        for e in &manifest.models {
            let key = hash_json(&json!({
                "stage": "train", "data": ctx.data_hash, "model": e, "train": manifest.train, "seed": s
            }));
            plans.push(ctx.plan(format!("train/seed{s}/{}", e.name), key, &[ctx.ckpt(s, &e.name)]));
            jobs.push((s, e));
        }
    }
    let results: Vec<Result<Model>> = tp.install(|| {
        plans
            .par_iter()
            .zip(&jobs)
            .map(|(p, (s, e))| {
                let path = ctx.ckpt(*s, &e.name);
                if p.cached {
                    return load_checkpoint(&path);
                }
                let recipe = Recipe {
                    name: e.name.clone(),
                    arch: e.arch.clone(),
                    seed: e.seed,
                };
                let model = train_recipe(&recipe, &train_d, &manifest.train, *s)?;
                let prov = json!({"stage": p.name, "key": p.key, "train": manifest.train, "data": manifest.data.source});
                save_checkpoint(&model, &path, prov)?;
                Ok(model)
            })
            .collect()
    });
    for ((p, (s, e)), m) in plans.iter().zip(&jobs).zip(gather(&plans, results)?) {
        models.insert((*s, e.name.clone()), (m, p.key.clone()));
    }
    ctx.finish(&plans)?;

    let eval = EvalOptions {
        samples: manifest.eval.samples,
        attack: ctx.attack.clone(),
    };

    // align; an entry with an lr sweep becomes one candidate stage per rate,
    // each also measured against its held-out validation target
    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    for &s in &seeds {
        for a in &manifest.alignments {
            let parents: Vec<&String> = std::iter::once(&a.source)
                .chain(&a.witnesses)
                .map(|n| &models[&(s, n.clone())].1)
                .collect();
            let rates: Vec<Option<usize>> = match &a.lr_sweep {
                None => vec![None],
                Some(sw) => (0..sw.rates.len()).map(Some).collect(),
            };
            for r in rates {
                let (stem, key) = match (r, &a.lr_sweep) {
                    (Some(i), Some(sw)) => (
                        format!("{}@lr{i}", a.name),
                        hash_json(&json!({
                            "stage": "align", "parents": parents, "config": a.config, "seed": s,
                            "rate": sw.rates[i], "validation": models[&(s, sw.validation_target.clone())].1,
                            "eval": eval, "data": ctx.data_hash
                        })),
                    ),
                    _ => (
                        a.name.clone(),
                        hash_json(&json!({"stage": "align", "parents": parents, "config": a.config, "seed": s})),
                    ),
                };
                let mut outputs = vec![ctx.ckpt(s, &stem), ctx.out.join(format!("reports/align/seed{s}__{stem}.csv"))];
                if r.is_some() {
                    outputs.push(lr_path(&ctx.out, s, &stem));
                }
                let name = match r {
                    Some(i) => format!("align/seed{s}/{}/lr{i}", a.name),
                    None => format!("align/seed{s}/{}", a.name),
                };
                plans.push(ctx.plan(name, key, &outputs));
                jobs.push((s, a, r, stem));
            }
        }
    }
    let results: Vec<Result<(Model, Option<f64>)>> = tp.install(|| {
        plans
            .par_iter()
            .zip(&jobs)
            .map(|(p, (s, a, r, stem))| {
                let path = ctx.ckpt(*s, stem);
                if p.cached {
                    let delta = match r {
                        Some(_) => Some(read_json::<LrCandidate>(&lr_path(&ctx.out, *s, stem))?.delta),
                        None => None,
                    };
                    return Ok((load_checkpoint(&path)?, delta));
                }
                let source = &models[&(*s, a.source.clone())].0;
                let witnesses: Vec<Model> = a.witnesses.iter().map(|w| models[&(*s, w.clone())].0.clone()).collect();
                let mut cfg = seeded_align(&a.config, *s);
                if let (Some(i), Some(sw)) = (r, &a.lr_sweep) {
                    cfg.base_lr = sw.rates[*i];
                }
                let outcome = align_quantized(source, &witnesses, &cfg, &train_d)?;
                let prov = json!({"stage": p.name, "key": p.key, "align": cfg, "source": a.source, "witnesses": a.witnesses});
                save_checkpoint(&outcome.model, &path, prov)?;
                history_report(&outcome.history, &p.key)?
                    .write(&ctx.out.join(format!("reports/align/seed{s}__{stem}.csv")))?;
                let delta = match &a.lr_sweep {
                    None => None,
                    Some(sw) => {
                        let group = SourceGroup {
                            name: a.source.clone(),
                            original: source.clone(),
                            variants: vec![Variant {
                                name: stem.clone(),
                                models: vec![outcome.model.clone()],
                            }],
                        };
                        let target = Target {
                            name: sw.validation_target.clone(),
                            model: models[&(*s, sw.validation_target.clone())].0.clone(),
                        };
                        let pair = evaluate_pair(&group, &target, &test_d, &eval, *s)?;
                        let delta = pair.cells[1].rate - pair.cells[0].rate;
                        let rec = LrCandidate {
                            rate: cfg.base_lr,
                            delta,
                            cells: pair.cells,
                        };
                        write_json(&lr_path(&ctx.out, *s, stem), &rec)?;
                        Some(delta)
                    }
                };
                Ok((outcome.model, delta))
            })
            .collect()
    });
    let results = gather(&plans, results)?;
    ctx.finish(&plans)?;
    let mut candidates: BTreeMap<(u64, String), Vec<(Model, String, f64)>> = BTreeMap::new();
    for ((p, (s, a, r, _)), (m, delta)) in plans.iter().zip(&jobs).zip(results) {
        match r {
            None => {
                models.insert((*s, a.name.clone()), (m, p.key.clone()));
            }
            Some(_) => candidates
                .entry((*s, a.name.clone()))
                .or_default()
                .push((m, p.key.clone(), delta.expect("measured"))),
        }
    }
    let mut lr_reports = Vec::new();
    for a in &manifest.alignments {
        let Some(sw) = &a.lr_sweep else { continue };
        let per_seed: Vec<&Vec<(Model, String, f64)>> = seeds.iter().map(|s| &candidates[&(*s, a.name.clone())]).collect();
        let means: Vec<f64> = (0..sw.rates.len())
            .map(|i| per_seed.iter().map(|c| c[i].2).sum::<f64>() / seeds.len() as f64)
            .collect();
        let best = (0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b });
        for (&s, c) in seeds.iter().zip(&per_seed) {
            let (m, key, _) = &c[best];
            // the chosen candidate also lives under the alignment's own name
            let chosen = ctx.ckpt(s, &a.name);
            let from = ctx.ckpt(s, &format!("{}@lr{best}", a.name));
            let bytes = fs::read(&from).at(&from)?;
            if fs::read(&chosen).ok().as_deref() != Some(bytes.as_slice()) {
                fs::write(&chosen, &bytes).at(&chosen)?;
            }
            models.insert((s, a.name.clone()), (m.clone(), key.clone()));
        }
        lr_reports.push((a, means, best, per_seed.iter().map(|c| c.iter().map(|x| x.2).collect::<Vec<_>>()).collect::<Vec<_>>()));
    }

    // attack + eval
    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    for &s in &seeds {
        for src in &manifest.eval.sources {
            for tgt in &manifest.eval.targets {
                let group = source_group(manifest, &models, s, src);
                let variant_keys: Vec<(String, Vec<String>)> = group_keys(manifest, &models, s, src);
                let key = hash_json(&json!({
                    "stage": "cell", "source": models[&(s, src.clone())].1, "target": models[&(s, tgt.clone())].1,
                    "variants": variant_keys, "eval": eval, "data": ctx.data_hash, "seed": s
                }));
                let cell_path = ctx.out.join(format!("reports/cells/seed{s}__{src}__{tgt}.json"));
                plans.push(ctx.plan(format!("cell/seed{s}/{src}/{tgt}"), key, &[cell_path]));
                let target = Target {
                    name: tgt.clone(),
                    model: models[&(s, tgt.clone())].0.clone(),
                };
                jobs.push((s, group, target));
            }
        }
    }
    let results: Vec<Result<Vec<CellRecord>>> = tp.install(|| {
        plans
            .par_iter()
            .zip(&jobs)
            .map(|(p, (s, group, target))| {
                let cell_path = ctx
                    .out
                    .join(format!("reports/cells/seed{s}__{}__{}.json", group.name, target.name));
                if p.cached {
                    return read_json(&cell_path);
                }
                let outcome = evaluate_pair(group, target, &test_d, &eval, *s)?;
                for (variant, rec) in &outcome.perturbations {
                    let ids: Vec<String> = rec.source_model_id.split('+').map(str::to_owned).collect();
                    let set = PerturbationSet::new(rec.fingerprint.clone(), ids, outcome.eval_set.ids.clone(), rec.delta.clone())?;
                    let path = ctx.out.join(format!(
                        "perturbations/seed{s}/{}__{}__{}.pert",
                        group.name,
                        target.name,
                        file_name(variant)
                    ));
                    save_perturbations(&set, &path)?;
                }
                write_json(&cell_path, &outcome.cells)?;
                Ok(outcome.cells)
            })
            .collect()
    });
    let cells: Vec<CellRecord> = gather(&plans, results)?.into_iter().flatten().collect();
    ctx.finish(&plans)?;

    // analyses
    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    for (i, entry) in manifest.analysis.iter().enumerate() {
        let al = manifest.alignment(&entry.alignment).expect("validated");
        for &s in &seeds {
            let parents: Vec<&String> = std::iter::once(&al.name)
                .chain(std::iter::once(&al.source))
                .chain(&al.witnesses)
                .map(|n| &models[&(s, n.clone())].1)
                .collect();
            let key = hash_json(&json!({
                "stage": "analysis", "entry": entry, "parents": parents, "attack": eval.attack,
                "data": ctx.data_hash, "seed": s
            }));
            let dir = analysis_dir(&ctx.out, i, entry);
            plans.push(ctx.plan(
                format!("analysis/{i}-{}/seed{s}", entry.kind.name()),
                key,
                &[dir.join(format!("seed{s}.json"))],
            ));
            jobs.push((i, s, entry));
        }
    }
    let results: Vec<Result<AnalysisResult>> = tp.install(|| {
        plans
            .par_iter()
            .zip(&jobs)
            .map(|(p, &(i, s, entry))| {
                let dir = analysis_dir(&ctx.out, i, entry);
                let path = dir.join(format!("seed{s}.json"));
                if p.cached {
                    return read_json::<SeedAnalysis>(&path).map(|a| a.result);
                }
                let al = manifest.alignment(&entry.alignment).expect("validated");
                let original = &models[&(s, al.source.clone())].0;
                let aligned = &models[&(s, al.name.clone())].0;
                let witnesses: Vec<(&str, &Model)> = al
                    .witnesses
                    .iter()
                    .map(|w| (w.as_str(), &models[&(s, w.clone())].0))
                    .collect();
                let attack = seeded_attack(&eval.attack, s);
                let result = run_analysis(entry, i, s, original, aligned, &witnesses, &test_d, &attack)?;
                if let Some(r) = analysis_grid_report(&result, &p.key)? {
                    r.write(&dir.join(format!("seed{s}.csv")))?;
                }
                write_json(&path, &SeedAnalysis { seed: s, result: result.clone() })?;
                Ok(result)
            })
            .collect()
    });
    let results = gather(&plans, results)?;
    ctx.finish(&plans)?;
    let mut analyses: Vec<AnalysisOutcome> = manifest
        .analysis
        .iter()
        .enumerate()
        .map(|(i, e)| AnalysisOutcome {
            index: i,
            kind: e.kind,
            alignment: e.alignment.clone(),
            per_seed: Vec::new(),
        })
        .collect();
    for ((i, s, _), r) in jobs.iter().zip(results) {
        analyses[*i].per_seed.push(SeedAnalysis { seed: *s, result: r });
    }

    // sweep
    let sweep_points = match &manifest.sweep {
        None => None,
        Some(entry) => {
            let recipe = |n: &String| {
                let e = manifest.model(n).expect("validated");
                Recipe {
                    name: e.name.clone(),
                    arch: e.arch.clone(),
                    seed: e.seed,
                }
            };
            let spec = SweepSpec {
                source: recipe(&entry.source),
                targets: entry.targets.iter().map(recipe).collect(),
                witness: recipe(&entry.witness),
                train: manifest.train.clone(),
                align: entry.config.clone(),
                eval: eval.clone(),
                seeds: seeds.clone(),
                axis: entry.axis()?,
            };
            let key = hash_json(&json!({"stage": "sweep", "spec": spec, "data": ctx.data_hash}));
            let path = ctx.out.join("reports/sweep.json");
            let plan = ctx.plan("sweep".into(), key, &[path.clone(), ctx.out.join("reports/sweep.csv")]);
            let points: Vec<SweepPoint> = if plan.cached {
                read_json(&path)?
            } else {
                let points = sweep(&spec, &train_d, &test_d, workers).map_err(stage_err("sweep"))?;
                write_json(&path, &points)?;
                let meta = json!({"report": "sweep", "axis": spec.axis.name(), "config": config_hash,
                    "attack": eval.attack.fingerprint().hash, "samples": eval.samples, "seeds": seeds});
                sweep_report(spec.axis.name(), &points, meta)?.write(&ctx.out.join("reports/sweep.csv"))?;
                points
            };
            ctx.finish(&[plan])?;
            Some(points)
        }
    };

    // aggregate reports
    let transfer = TransferReport::from_cells(cells).map_err(stage_err("report"))?;
    let meta = |kind: &str| {
        json!({
            "report": kind, "config": config_hash, "attack": eval.attack.fingerprint().hash,
            "samples": eval.samples, "seed_semantics": "run seed mixed into model, alignment and attack seeds"
        })
    };
    transfer
        .matrix_report(meta("transfer_matrix"))?
        .write(&ctx.out.join("reports/transfer_matrix.csv"))?;
    transfer
        .deltas_report(meta("deltas"))?
        .write(&ctx.out.join("reports/deltas.csv"))?;
    for (i, a) in analyses.iter().enumerate() {
        let entry = &manifest.analysis[i];
        let path = ctx
            .out
            .join(format!("reports/analysis/{i}-{}.csv", entry.kind.name()));
        let mut m = meta(entry.kind.name());
        m["alignment"] = json!(entry.alignment);
        m["samples"] = json!(entry.samples);
        m["seeds"] = json!(seeds);
        summary_report(a, m)?.write(&path)?;
    }
    if !lr_reports.is_empty() {
        let mut r = Report::new(
            meta("lr_sweep"),
            &["alignment", "validation_target", "rate", "seed", "delta", "mean_delta", "selected"],
        )?;
        for (a, means, best, deltas) in &lr_reports {
            let sw = a.lr_sweep.as_ref().expect("swept");
            for (i, rate) in sw.rates.iter().enumerate() {
                for (s, d) in seeds.iter().zip(deltas) {
                    r.push(vec![
                        a.name.clone().into(),
                        sw.validation_target.clone().into(),
                        (*rate).into(),
                        (*s).into(),
                        d[i].into(),
                        means[i].into(),
                        (i == *best).into(),
                    ]);
                }
            }
        }
        r.write(&ctx.out.join("reports/lr_sweep.csv"))?;
    }
    ctx.save_record()?;
    Ok(RunOutcome {
        out_dir: ctx.out,
        executed: ctx.executed,
        skipped: ctx.skipped,
        transfer,
        analyses,
        sweep: sweep_points,
    })
}

fn analysis_dir(out: &Path, i: usize, e: &AnalysisEntry) -> PathBuf {
    out.join(format!("reports/analysis/{i}-{}", e.kind.name()))
}

/// Eval variants of a source: its alignments in manifest order, then its
/// ensembles.
fn source_group(
    m: &ExperimentManifest,
    models: &BTreeMap<(u64, String), (Model, String)>,
    s: u64,
    src: &str,
) -> SourceGroup {
    let get = |n: &String| models[&(s, n.clone())].0.clone();
    let mut variants: Vec<Variant> = m
        .alignments
        .iter()
        .filter(|a| a.source == src)
        .map(|a| Variant {
            name: a.name.clone(),
            models: vec![get(&a.name)],
        })
        .collect();
    variants.extend(m.eval.ensembles.iter().filter(|e| e.source == src).map(|e| Variant {
        name: e.name.clone(),
        models: e.members.iter().map(get).collect(),
    }));
    SourceGroup {
        name: src.into(),
        original: get(&src.to_string()),
        variants,
    }
}

fn group_keys(
    m: &ExperimentManifest,
    models: &BTreeMap<(u64, String), (Model, String)>,
    s: u64,
    src: &str,
) -> Vec<(String, Vec<String>)> {
    let key = |n: &String| models[&(s, n.clone())].1.clone();
    let mut v: Vec<(String, Vec<String>)> = m
        .alignments
        .iter()
        .filter(|a| a.source == src)
        .map(|a| (a.name.clone(), vec![key(&a.name)]))
        .collect();
    v.extend(
        m.eval
            .ensembles
            .iter()
            .filter(|e| e.source == src)
            .map(|e| (e.name.clone(), e.members.iter().map(key).collect())),
    );
    v
}

/// One lr-sweep candidate measured on the validation target.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LrCandidate {
    rate: f64,
    delta: f64,
    cells: Vec<CellRecord>,
}

fn lr_path(out: &Path, seed: u64, stem: &str) -> PathBuf {
    out.join(format!("reports/lr_sweep/seed{seed}__{stem}.json"))
}

fn history_report(history: &[AlignStep], key: &str) -> Result<Report> {
    let mut r = Report::new(json!({"report": "align_history", "stage_key": key}), &["step", "lr", "loss"])?;
    for h in history {
        r.push(vec![h.step.into(), h.lr.into(), h.loss.into()]);
    }
    Ok(r)
}

fn lambda_stats(model: &Model, x: &malign_core::Tensor, y: &[usize], cfg: &PowerConfig) -> Result<LambdaStats> {
    let mut values = Vec::with_capacity(y.len());
    let mut converged = 0;
    for (i, &label) in y.iter().enumerate() {
        let l = hessian_lambda_max(model, &x.item(i), label, cfg)?;
        values.push(l.value);
        converged += l.converged as usize;
    }
    Ok(LambdaStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        values,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_analysis(
    entry: &AnalysisEntry,
    index: usize,
    seed: u64,
    original: &Model,
    aligned: &Model,
    witnesses: &[(&str, &Model)],
    pool: &Dataset,
    attack: &AttackConfig,
) -> Result<AnalysisResult> {
    let n = entry.samples.min(pool.len());
    let ids: Vec<usize> = (0..n).collect();
    let (x, y) = pool.batch(&ids);
    let local = mix(seed, index as u64);
    let power = PowerConfig {
        seed: mix(entry.power.seed, seed),
        ..entry.power.clone()
    };
    Ok(match entry.kind {
        AnalysisKind::Smoothness => AnalysisResult::Smoothness {
            report: grad_norm_report(
                original,
                aligned,
                &x,
                &y,
                &SmoothnessOptions {
                    variance: entry.variance,
                    attack: attack.clone(),
                    pgd_points: entry.pgd_points,
                    lambda_max: entry.lambda_max.then(|| power.clone()),
                    seed: local,
                },
            )?,
        },
        AnalysisKind::Similarity => AnalysisResult::Similarity {
            witnesses: witnesses
                .iter()
                .map(|(name, w)| {
                    Ok(WitnessSimilarity {
                        witness: (*name).into(),
                        before: similarity_report(w, original, &x, &y)?,
                        after: similarity_report(w, aligned, &x, &y)?,
                    })
                })
                .collect::<Result<_>>()?,
        },
        AnalysisKind::Hessian => AnalysisResult::Hessian {
            original: lambda_stats(original, &x, &y, &power)?,
            aligned: lambda_stats(aligned, &x, &y, &power)?,
        },
        AnalysisKind::Dct => {
            let d_orig = attacks::attack(std::slice::from_ref(original), &x, &y, attack)?;
            let d_al = attacks::attack(std::slice::from_ref(aligned), &x, &y, attack)?;
            let diff = spectrum_diff(&ids, &d_al.delta, &ids, &d_orig.delta)?;
            AnalysisResult::Dct {
                samples: diff.samples,
                shape: diff.matrix.shape().to_vec(),
                matrix: diff.matrix.data().to_vec(),
                low_frequency_positive_fraction: diff.low_frequency_positive_fraction,
            }
        }
        AnalysisKind::Surface => {
            if entry.sample >= pool.len() {
                return Err(Error::Manifest(format!("surface sample {} outside the pool", entry.sample)));
            }
            let (x1, y1) = pool.batch(&[entry.sample]);
            let rec = attacks::attack(std::slice::from_ref(original), &x1, &y1, attack)?;
            let delta = rec.delta.item(0);
            let peak = delta.norm_linf();
            if peak == 0.0 {
                return Err(Error::Manifest("surface: the attack left the sample unchanged".into()));
            }
            let dir1 = delta.scale(attack.epsilon / peak);
            let dir2 = orthogonal_direction(&dir1, attack.epsilon, local)?;
            let center = x1.item(0);
            let id = format!("test:{}", entry.sample);
            let g_orig = loss_surface(original, &center, y1[0], &dir1, &dir2.direction, entry.half_extent, entry.scale, &id)?;
            let g_al = loss_surface(aligned, &center, y1[0], &dir1, &dir2.direction, entry.half_extent, entry.scale, &id)?;
            AnalysisResult::Surface {
                side: g_orig.side(),
                original: g_orig.values,
                aligned: g_al.values,
                residual_cosine: dir2.residual_cosine,
            }
        }
    })
}

/// Per-seed matrix outputs (spectra and loss grids).
pub(crate) fn analysis_grid_report(result: &AnalysisResult, key: &str) -> Result<Option<Report>> {
    Ok(match result {
        AnalysisResult::Dct { shape, matrix, samples, .. } => Some(matrix_report(
            json!({"report": "dct_spectrum_diff", "stage_key": key, "samples": samples,
                   "channel_handling": "mean-over-channels"}),
            shape[0],
            shape[1],
            matrix,
        )?),
        AnalysisResult::Surface { side, original, aligned, .. } => {
            let k = (*side / 2) as i64;
            let mut r = Report::new(json!({"report": "loss_surface", "stage_key": key}), &["model", "i", "j", "loss"])?;
            for (name, grid) in [("original", original), ("aligned", aligned)] {
                for (idx, v) in grid.iter().enumerate() {
                    let (i, j) = ((idx / side) as i64 - k, (idx % side) as i64 - k);
                    r.push(vec![name.into(), Cell::Int(i), Cell::Int(j), (*v).into()]);
                }
            }
            Some(r)
        }
        _ => None,
    })
}

pub(crate) fn summary_report(a: &AnalysisOutcome, meta: serde_json::Value) -> Result<Report> {
    let mut r;
    match a.kind {
        AnalysisKind::Smoothness => {
            r = Report::new(meta, &["seed", "model", "clean", "gaussian", "pgd", "lambda_max"])?;
            for s in &a.per_seed {
                if let AnalysisResult::Smoothness { report } = &s.result {
                    for row in [&report.original, &report.aligned] {
                        r.push(vec![
                            s.seed.into(),
                            row.model.as_str().into(),
                            row.clean.into(),
                            row.gaussian.into(),
                            row.pgd.into(),
                            row.lambda_max.into(),
                        ]);
                    }
                }
            }
        }
        AnalysisKind::Similarity => {
            r = Report::new(meta, &["seed", "witness", "model", "kl", "agreement", "cosine"])?;
            for s in &a.per_seed {
                if let AnalysisResult::Similarity { witnesses } = &s.result {
                    for w in witnesses {
                        for (name, rep) in [("original", &w.before), ("aligned", &w.after)] {
                            r.push(vec![
                                s.seed.into(),
                                w.witness.as_str().into(),
                                name.into(),
                                rep.kl.into(),
                                rep.agreement.into(),
                                rep.cosine.into(),
                            ]);
                        }
                    }
                }
            }
        }
        AnalysisKind::Hessian => {
            r = Report::new(meta, &["seed", "model", "mean_lambda_max", "converged", "samples"])?;
            for s in &a.per_seed {
                if let AnalysisResult::Hessian { original, aligned } = &s.result {
                    for (name, st) in [("original", original), ("aligned", aligned)] {
                        r.push(vec![
                            s.seed.into(),
                            name.into(),
                            st.mean.into(),
                            st.converged.into(),
                            st.values.len().into(),
                        ]);
                    }
                }
            }
        }
        AnalysisKind::Dct => {
            r = Report::new(meta, &["seed", "samples", "low_frequency_positive_fraction"])?;
            for s in &a.per_seed {
                if let AnalysisResult::Dct {
                    samples,
                    low_frequency_positive_fraction,
                    ..
                } = &s.result
                {
                    r.push(vec![s.seed.into(), (*samples).into(), (*low_frequency_positive_fraction).into()]);
                }
            }
        }
        AnalysisKind::Surface => {
            r = Report::new(meta, &["seed", "model", "center_loss", "max_loss", "residual_cosine"])?;
            for s in &a.per_seed {
                if let AnalysisResult::Surface {
                    side,
                    original,
                    aligned,
                    residual_cosine,
                } = &s.result
                {
                    let c = side * side / 2;
                    for (name, g) in [("original", original), ("aligned", aligned)] {
                        r.push(vec![
                            s.seed.into(),
                            name.into(),
                            g[c].into(),
                            g.iter().copied().fold(f64::NEG_INFINITY, f64::max).into(),
                            (*residual_cosine).into(),
                        ]);
                    }
                }
            }
        }
    }
    Ok(r)
}

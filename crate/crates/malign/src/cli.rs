//! The `malign` command line. Each subcommand resolves its settings as
//! flag > `--config` file section > default, calls the library, and prints
//! a one-line JSON summary on stdout.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use malign_core::alignment::{AlignmentConfig, Distance};
use malign_core::analysis::PowerConfig;
use malign_core::attacks::{self, AttackConfig, AttackMethod};
use malign_core::data::Dataset;
use malign_core::eval::transfer_error;
use malign_core::train::{accuracy, train, TrainConfig};
use malign_core::zoo::{build_model, ArchFamily, ArchTag};
use malign_core::Model;
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, quantize, save_checkpoint};
use crate::error::{Error, IoContext, Result};
use crate::harness::{
    align_quantized, default_workers, transfer_matrix, EvalOptions, Scenario, SourceGroup, Target, Variant,
};
use crate::manifest::{parse_fraction, AnalysisEntry, AnalysisKind, ExperimentManifest, Num};
use crate::perturbation::{save_perturbations, PerturbationSet};
use crate::runner::{self, AnalysisOutcome, RunOptions, SeedAnalysis};
use crate::source::DataSource;

pub const SEED_ENV: &str = "MALIGN_SEED";
const DEFAULT_DATA: &str = "synth:gauss-blobs";

fn fraction_arg(s: &str) -> std::result::Result<Num, String> {
    parse_fraction(s).map(Num::Float).map_err(|e| e.to_string())
}

fn positive_fraction_arg(s: &str) -> std::result::Result<Num, String> {
    match parse_fraction(s) {
        Ok(v) if v > 0.0 => Ok(Num::Float(v)),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "malign", version, about = "Model alignment and adversarial transferability experiments")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML file with per-subcommand defaults ([train], [align], [attack], [eval], [analyze]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for evaluation (default: logical cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and train a model, writing a checkpoint.
    Train(TrainArgs),
    /// Align a source checkpoint to one or more witnesses.
    Align(AlignArgs),
    /// Attack test samples and write a perturbation set.
    Attack {
        #[command(flatten)]
        args: AttackArgs,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Transfer error matrix of sources (and their variants) against targets.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Compare an aligned model with its original.
    Analyze {
        #[arg(value_enum)]
        kind: AnalyzeKind,
        #[command(flatten)]
        args: AnalyzeArgs,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Execute an experiment manifest.
    Run {
        manifest: PathBuf,
        /// Overrides run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeKind {
    Dct,
    Surface,
    Smoothness,
    Similarity,
    Hessian,
}

impl AnalyzeKind {
    fn kind(self) -> AnalysisKind {
        match self {
            AnalyzeKind::Dct => AnalysisKind::Dct,
            AnalyzeKind::Surface => AnalysisKind::Surface,
            AnalyzeKind::Smoothness => AnalysisKind::Smoothness,
            AnalyzeKind::Similarity => AnalysisKind::Similarity,
            AnalyzeKind::Hessian => AnalysisKind::Hessian,
        }
    }
}

/// `self` wins, `other` fills the gaps.
macro_rules! mergeable {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl $t {
            fn merged(self, other: Option<Self>) -> Self {
                let o = other.unwrap_or_default();
                Self { $($f: self.$f.or(o.$f)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Architecture tag: mlp-S|M|L, cnn-S|M|L.
    #[arg(long)]
    pub arch: Option<String>,
    /// synth:KIND[,k=v], idx:..., or csv:...
    #[arg(long)]
    pub data: Option<String>,
    /// Init and shuffle seed (default: $MALIGN_SEED, else 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint file stem (default: ARCH-seedSEED).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}
mergeable!(TrainArgs { arch, data, seed, out, name, epochs, lr, batch_size, momentum, warmup, label_smoothing });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Comma-separated witness checkpoints.
    #[arg(long)]
    pub witness: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    /// kl, tv, hint or kl+hint.
    #[arg(long)]
    pub distance: Option<String>,
    /// Weight of the embedding term for kl+hint.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Softmax temperature, or "none" to use the model's own outputs.
    #[arg(long)]
    pub temperature: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output checkpoint (default: aligned.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional loss-history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}
mergeable!(AlignArgs {
    source, witness, data, distance, lambda, temperature, lr, epochs, batch_size, momentum, warmup, seed, out, history
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackFlags {
    #[arg(long)]
    pub method: Option<AttackMethod>,
    /// Budget, e.g. 4/255.
    #[arg(long, value_parser = positive_fraction_arg)]
    pub eps: Option<Num>,
    /// Step size, e.g. 1/255.
    #[arg(long, value_parser = fraction_arg)]
    pub alpha: Option<Num>,
    #[arg(long)]
    pub iters: Option<usize>,
}
mergeable!(AttackFlags { method, eps, alpha, iters });

impl AttackFlags {
    fn config(&self, seed: u64) -> Result<AttackConfig> {
        let eps = self.eps.as_ref().map_or(Ok(4.0 / 255.0), Num::value)?;
        let alpha = self.alpha.as_ref().map_or(Ok(1.0 / 255.0), Num::value)?;
        let cfg = self
            .method
            .unwrap_or(AttackMethod::Pgd)
            .config(eps, alpha, self.iters.unwrap_or(20), seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackArgs {
    /// Comma-separated checkpoints; several form a logit-averaged ensemble.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    /// Attack the first N test samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output perturbation set (default: perturbations.pert).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated target checkpoints to measure transfer error on.
    #[arg(long)]
    pub target: Option<String>,
}
mergeable!(AttackArgs { model, data, samples, seed, out, target });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Comma-separated source checkpoints.
    #[arg(long)]
    pub sources: Option<String>,
    /// SOURCE=VARIANT[+VARIANT...]: an aligned variant (or ensemble) of a source; repeatable.
    #[arg(long = "variant")]
    pub variants: Option<Vec<String>>,
    /// Comma-separated target checkpoints.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    /// Number of attack seeds, counted up from --seed.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Report directory (default: reports).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(EvalArgs { sources, variants, targets, data, seeds, seed, samples, out });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub aligned: Option<PathBuf>,
    /// Comma-separated witness checkpoints (similarity).
    #[arg(long)]
    pub witness: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gaussian variance for smoothness.
    #[arg(long)]
    pub variance: Option<f64>,
    /// Smoothness: also compute mean lambda_max.
    #[arg(long)]
    pub lambda_max: Option<bool>,
    #[arg(long)]
    pub power_iters: Option<usize>,
    #[arg(long)]
    pub power_tol: Option<f64>,
    /// Surface: test-sample index.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub half_extent: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Output CSV (default: KIND.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(AnalyzeArgs {
    original, aligned, witness, data, samples, seed, variance, lambda_max, power_iters, power_tol, sample,
    half_extent, scale, out
});

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainArgs>,
    align: Option<AlignArgs>,
    attack: Option<AttackFlags>,
    #[serde(rename = "attack_inputs")]
    attack_run: Option<AttackArgs>,
    eval: Option<EvalArgs>,
    analyze: Option<AnalyzeArgs>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing --{flag}")))
}

fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn load_data(spec: Option<&str>) -> Result<(Dataset, Dataset)> {
    spec.unwrap_or(DEFAULT_DATA).parse::<DataSource>()?.load()
}

fn load_models(list: &str) -> Result<Vec<Model>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|p| load_checkpoint(Path::new(p.trim())))
        .collect()
}

fn stem(p: &str) -> String {
    Path::new(p.trim())
        .file_stem()
        .map_or_else(|| p.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Parses argv, runs the command, and returns the JSON summary.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let file: ConfigFile = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).at(p)?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {}", p.display(), e.message())))?
        }
        None => ConfigFile::default(),
    };
    let workers = cli.workers.unwrap_or_else(default_workers);
    match cli.command {
        Command::Train(a) => cmd_train(a.merged(file.train)),
        Command::Align(a) => cmd_align(a.merged(file.align)),
        Command::Attack { args, attack } => cmd_attack(args.merged(file.attack_run), attack.merged(file.attack)),
        Command::Eval { args, attack } => cmd_eval(args.merged(file.eval), attack.merged(file.attack), workers),
        Command::Analyze { kind, args, attack } => cmd_analyze(kind, args.merged(file.analyze), attack.merged(file.attack)),
        Command::Run { manifest, out } => cmd_run(&manifest, out, cli.workers),
    }
}

pub fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        base_lr: a.lr.unwrap_or(d.base_lr),
        warmup_fraction: a.warmup.unwrap_or(d.warmup_fraction),
        momentum: a.momentum.unwrap_or(d.momentum),
        label_smoothing: a.label_smoothing.unwrap_or(d.label_smoothing),
        clip_global_norm: d.clip_global_norm,
        seed,
    }
}

fn cmd_train(a: TrainArgs) -> Result<serde_json::Value> {
    let arch: ArchTag = need(a.arch.as_deref(), "arch")?.parse()?;
    let seed = resolve_seed(a.seed)?;
    let (train_d, test_d) = load_data(a.data.as_deref())?;
    let cfg = train_config(&a, seed);
    let fam = ArchFamily::new(arch, train_d.num_classes, train_d.sample_shape());
    let (trained, history) = train(&build_model(&fam, seed)?, &train_d, &cfg)?;
    let model = quantize(&trained);
    let name = a.name.clone().unwrap_or_else(|| format!("{arch}-seed{seed}"));
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from(".")).join(format!("{name}.ckpt"));
    let data = a.data.clone().unwrap_or_else(|| DEFAULT_DATA.into());
    save_checkpoint(&model, &path, json!({"train": cfg, "data": data}))?;
    Ok(json!({
        "checkpoint": path,
        "model_id": model.id(),
        "params": model.param_count(),
        "final_loss": history.epochs.last().map(|e| e.mean_loss),
        "test_accuracy": accuracy(&model, &test_d)?,
    }))
}

pub fn align_config(a: &AlignArgs, seed: u64) -> Result<AlignmentConfig> {
    let d = AlignmentConfig::default();
    let distance = match a.distance.as_deref().unwrap_or("kl") {
        "kl" => Distance::Kl,
        "tv" => Distance::Tv,
        "hint" => Distance::Hint,
        "kl+hint" => Distance::Combined {
            lambda: a.lambda.unwrap_or(1.0),
        },
        other => return Err(usage(format!("unknown distance {other:?}"))),
    };
    let temperature = match a.temperature.as_deref() {
        None => d.temperature,
        Some("none") => None,
        Some(t) => Some(t.parse().map_err(|_| usage(format!("invalid temperature {t:?}")))?),
    };
    let cfg = AlignmentConfig {
        distance,
        temperature,
        base_lr: a.lr.unwrap_or(d.base_lr),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        momentum: a.momentum.unwrap_or(d.momentum),
        warmup_fraction: a.warmup.unwrap_or(d.warmup_fraction),
        seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_align(a: AlignArgs) -> Result<serde_json::Value> {
    let source = load_checkpoint(&need(a.source.clone(), "source")?)?;
    let witnesses = load_models(need(a.witness.as_deref(), "witness")?)?;
    let cfg = align_config(&a, resolve_seed(a.seed)?)?;
    let (train_d, test_d) = load_data(a.data.as_deref())?;
    let out = align_quantized(&source, &witnesses, &cfg, &train_d)?;
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from("aligned.ckpt"));
    save_checkpoint(&out.model, &path, json!({"align": cfg, "source": source.id()}))?;
    if let Some(h) = &a.history {
        let mut r = crate::report::Report::new(json!({"report": "align_history"}), &["step", "lr", "loss"])?;
        for s in &out.history {
            r.push(vec![s.step.into(), s.lr.into(), s.loss.into()]);
        }
        r.write(h)?;
    }
    Ok(json!({
        "checkpoint": path,
        "model_id": out.model.id(),
        "steps": out.history.len(),
        "final_loss": out.history.last().map(|s| s.loss),
        "test_accuracy": accuracy(&out.model, &test_d)?,
    }))
}

fn cmd_attack(a: AttackArgs, flags: AttackFlags) -> Result<serde_json::Value> {
    let models = load_models(need(a.model.as_deref(), "model")?)?;
    let cfg = flags.config(resolve_seed(a.seed)?)?;
    let (_, test_d) = load_data(a.data.as_deref())?;
    let ids: Vec<usize> = (0..a.samples.unwrap_or(200).min(test_d.len())).collect();
    let (x, y) = test_d.batch(&ids);
    let rec = attacks::attack(&models, &x, &y, &cfg)?;
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from("perturbations.pert"));
    let model_ids = models.iter().map(Model::id).collect();
    save_perturbations(&PerturbationSet::new(rec.fingerprint.clone(), model_ids, ids, rec.delta.clone())?, &path)?;
    let mut transfer = serde_json::Map::new();
    if let Some(t) = &a.target {
        let adv = rec.adversarial(&x)?;
        for (p, m) in t.split(',').zip(load_models(t)?) {
            transfer.insert(stem(p), json!(transfer_error(&m, &adv, &y)?));
        }
    }
    Ok(json!({
        "perturbations": path,
        "fingerprint": rec.fingerprint.hash,
        "samples": y.len(),
        "whitebox_success": rec.success_rate(),
        "transfer_error": transfer,
    }))
}

fn cmd_eval(a: EvalArgs, flags: AttackFlags, workers: usize) -> Result<serde_json::Value> {
    let sources = need(a.sources.as_deref(), "sources")?;
    let targets = need(a.targets.as_deref(), "targets")?;
    let base = resolve_seed(a.seed)?;
    let n_seeds = a.seeds.unwrap_or(3);
    if n_seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let attack = flags.config(0)?;
    let opts = EvalOptions {
        samples: a.samples.unwrap_or(200),
        attack: attack.clone(),
    };
    let (_, test_d) = load_data(a.data.as_deref())?;
    let mut groups = Vec::new();
    for p in sources.split(',') {
        groups.push(SourceGroup {
            name: stem(p),
            original: load_checkpoint(Path::new(p.trim()))?,
            variants: Vec::new(),
        });
    }
    for v in a.variants.iter().flatten() {
        let (src, members) = v
            .split_once('=')
            .ok_or_else(|| usage(format!("--variant {v:?}: expected SOURCE=CHECKPOINT[+CHECKPOINT]")))?;
        let g = groups
            .iter_mut()
            .find(|g| g.name == stem(src) || g.name == src)
            .ok_or_else(|| usage(format!("--variant {v:?}: {src:?} is not among --sources")))?;
        let paths: Vec<&str> = members.split('+').collect();
        g.variants.push(Variant {
            name: paths.iter().map(|p| stem(p)).collect::<Vec<_>>().join("+"),
            models: paths.iter().map(|p| load_checkpoint(Path::new(p.trim()))).collect::<Result<_>>()?,
        });
    }
    let targets: Vec<Target> = targets
        .split(',')
        .map(|p| {
            Ok(Target {
                name: stem(p),
                model: load_checkpoint(Path::new(p.trim()))?,
            })
        })
        .collect::<Result<_>>()?;
    // checkpoints are fixed, so seeds vary the attack only
    let scenarios: Vec<Scenario> = (base..base + n_seeds)
        .map(|seed| Scenario {
            seed,
            sources: groups.clone(),
            targets: targets.clone(),
        })
        .collect();
    let report = transfer_matrix(&scenarios, &test_d, &opts, workers)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("reports"));
    let meta = |kind: &str| {
        json!({"report": kind, "attack": attack.fingerprint().hash, "samples": opts.samples,
               "seed_semantics": "attack seed only"})
    };
    report.matrix_report(meta("transfer_matrix"))?.write(&out.join("transfer_matrix.csv"))?;
    report.deltas_report(meta("deltas"))?.write(&out.join("deltas.csv"))?;
    Ok(json!({
        "reports": out,
        "rows": report.rows.iter().map(|r| json!({
            "source": r.source, "variant": r.variant, "target": r.target, "mean": r.mean, "delta": r.delta
        })).collect::<Vec<_>>(),
    }))
}

fn cmd_analyze(kind: AnalyzeKind, a: AnalyzeArgs, flags: AttackFlags) -> Result<serde_json::Value> {
    let original = load_checkpoint(&need(a.original.clone(), "original")?)?;
    let aligned = load_checkpoint(&need(a.aligned.clone(), "aligned")?)?;
    let witness_list = a.witness.clone().unwrap_or_default();
    let witnesses = load_models(&witness_list)?;
    if kind == AnalyzeKind::Similarity && witnesses.is_empty() {
        return Err(usage("similarity needs --witness"));
    }
    let names: Vec<String> = witness_list.split(',').filter(|s| !s.is_empty()).map(stem).collect();
    let seed = resolve_seed(a.seed)?;
    let attack = crate::harness::seeded_attack(&flags.config(0)?, seed);
    let (_, test_d) = load_data(a.data.as_deref())?;
    let d = PowerConfig::default();
    let entry = AnalysisEntry {
        kind: kind.kind(),
        alignment: "cli".into(),
        samples: a.samples.unwrap_or(200),
        variance: a.variance.unwrap_or(0.01),
        lambda_max: a.lambda_max.unwrap_or(false),
        pgd_points: Default::default(),
        power: PowerConfig {
            max_iters: a.power_iters.unwrap_or(d.max_iters),
            tol: a.power_tol.unwrap_or(d.tol),
            seed: 0,
        },
        sample: a.sample.unwrap_or(0),
        half_extent: a.half_extent.unwrap_or(20),
        scale: a.scale.unwrap_or(2.0),
    };
    let ws: Vec<(&str, &Model)> = names.iter().map(String::as_str).zip(&witnesses).collect();
    let result = runner::run_analysis(&entry, 0, seed, &original, &aligned, &ws, &test_d, &attack)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", entry.kind.name())));
    let report = match runner::analysis_grid_report(&result, "cli")? {
        Some(r) => r,
        None => runner::summary_report(
            &AnalysisOutcome {
                index: 0,
                kind: entry.kind,
                alignment: entry.alignment.clone(),
                per_seed: vec![SeedAnalysis { seed, result: result.clone() }],
            },
            json!({"report": entry.kind.name(), "attack": attack.fingerprint().hash, "samples": entry.samples, "seeds": [seed]}),
        )?,
    };
    report.write(&out)?;
    Ok(json!({"report": out, "result": result}))
}

fn cmd_run(manifest: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<serde_json::Value> {
    let m = ExperimentManifest::load(manifest)?;
    let outcome = runner::run_experiment(&m, &RunOptions { out_dir: out, workers })?;
    Ok(json!({
        "out_dir": outcome.out_dir,
        "executed": outcome.executed.len(),
        "skipped": outcome.skipped.len(),
    }))
}

/// Single-line machine-readable error.
pub fn error_line(e: &Error) -> String {
    json!({"error": e.kind(), "message": e.to_string()}).to_string()
}

/// Full entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            let msg = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand".to_string(),
                k => k.to_string(),
            };
            eprintln!("{}", json!({"error": "usage", "message": msg}));
            return 2;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

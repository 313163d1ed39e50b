//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use serde_json::json;
use unirobust_core::analysis::{
    evaluate, front_csv, loss_landscape, pareto_front, saliency_skewness, smoothgrad, EvalSuite, FrontPoint, Protocol,
    SmoothGradConfig,
};
use unirobust_core::attacks::{run_attack, AttackConfig, AttackMethod, InitKind};
use unirobust_core::data::Dataset;
use unirobust_core::io::{finite_or_null, write_atomic};
use unirobust_core::model::ModelHandle;
use unirobust_core::spatial::{SpatialBudget, SpatialParams};
use unirobust_core::{Error, Result};

use crate::config::ExperimentSpec;
use crate::data::{data_root, load_dataset_from, DatasetName, Split};
use crate::experiment::{
    dataset_of, load_checkpoint, read_report, run_experiment, write_report, REPORT_FILE, SPEC_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "unirobust",
    version,
    about = "Spatial attacks, Pareto adversarial training and robustness analysis"
)]
pub struct Cli {
    /// Dataset root; overrides PARETO_DATA_DIR.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model with one of the adversarial training strategies.
    Train(TrainArgs),
    /// Run one attack against a checkpoint.
    Attack(AttackArgs),
    /// Evaluate a checkpoint on an attack suite and write a report.
    Evaluate(EvaluateArgs),
    /// SmoothGrad saliency map for one test image.
    Saliency(SaliencyArgs),
    /// Median skewness of saliency differences between two models.
    Skewness(SkewnessArgs),
    /// 2-D spatial loss landscape around a point.
    Landscape(LandscapeArgs),
    /// Pareto front of evaluated runs against a baseline.
    Front(FrontArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra config entries, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Run the spec's evaluation suite when training ends.
    #[arg(long)]
    pub evaluate: bool,
}

#[derive(Debug, Args)]
pub struct DataSlice {
    /// Number of test examples used (0 = all).
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub method: AttackMethod,
    #[arg(long)]
    pub iters: usize,
    /// Pixel budget for PGD.
    #[arg(long, default_value_t = 0.3)]
    pub eps: f32,
    /// Pixel step for PGD.
    #[arg(long, default_value_t = 0.01)]
    pub step: f32,
    #[arg(long = "eps-f", default_value_t = 0.3)]
    pub eps_f: f32,
    #[arg(long = "eps-rt", default_value_t = 0.3)]
    pub eps_rt: f32,
    #[arg(long = "step-f", default_value_t = 0.01)]
    pub step_f: f32,
    #[arg(long = "step-rt", default_value_t = 0.1)]
    pub step_rt: f32,
    /// Starting point: `zero` or `uniform` (random inside the budget).
    #[arg(long, default_value = "zero")]
    pub init: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub slice: DataSlice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Suite name; defaults to the dataset's suite.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value = "all-test")]
    pub protocol: Protocol,
    /// Report of the naturally trained baseline, for the universal score.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Model id written into the report; defaults to the run name.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub slice: DataSlice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SmoothGradArgs {
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Noise level as a fraction of the input range.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SmoothGradArgs {
    fn config(&self) -> SmoothGradConfig {
        SmoothGradConfig {
            samples: self.samples,
            sigma_fraction: self.sigma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test-set index of the image.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[command(flatten)]
    pub smooth: SmoothGradArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SkewnessArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[command(flatten)]
    pub smooth: SmoothGradArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Anchor {
    /// The identity transform.
    Zero,
    /// The end point of an integrated spatial attack.
    Attack,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 21)]
    pub resolution: usize,
    /// Number of test images in the batch.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "zero")]
    pub anchor: Anchor,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrontArgs {
    /// Directory whose subdirectories hold evaluated runs.
    #[arg(long)]
    pub runs: PathBuf,
    /// Baseline run, by model id or strategy name.
    #[arg(long, default_value = "natural")]
    pub baseline: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let root = cli.data_dir.clone().unwrap_or_else(data_root);
    match cli.command {
        Command::Train(a) => cmd_train(a, &root),
        Command::Attack(a) => cmd_attack(a, &root),
        Command::Evaluate(a) => cmd_evaluate(a, &root),
        Command::Saliency(a) => cmd_saliency(a, &root),
        Command::Skewness(a) => cmd_skewness(a, &root),
        Command::Landscape(a) => cmd_landscape(a, &root),
        Command::Front(a) => cmd_front(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes)
}

pub fn build_train_spec(a: &TrainArgs) -> Result<ExperimentSpec> {
    let mut pairs = match &a.config {
        Some(p) => crate::config::parse_flat(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Default::default(),
    };
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.insert(k.to_string(), v);
        }
    };
    put("dataset", a.dataset.clone());
    put("strategy", a.strategy.clone());
    put("r", a.r.map(|v| v.to_string()));
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(out) = &a.out {
        pairs.insert("out".into(), out.display().to_string());
        if !pairs.contains_key("name") {
            let name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            pairs.insert("name".into(), name);
        }
    }
    ExperimentSpec::from_pairs(&pairs)
}

fn cmd_train(a: TrainArgs, root: &Path) -> Result<()> {
    let spec = build_train_spec(&a)?;
    let record = run_experiment(&spec, root, a.resume, a.evaluate)?;
    println!(
        "{}: {} steps in {:.1}s, checkpoint {}",
        record.name,
        record.steps,
        record.wall_clock_secs,
        record.checkpoint.display()
    );
    Ok(())
}

fn test_slice(model: &ModelHandle, root: &Path, limit: usize) -> Result<Dataset> {
    let data = load_dataset_from(root, dataset_of(model)?, Split::Test)?;
    Ok(if limit > 0 && limit < data.len() {
        data.head(limit)
    } else {
        data
    })
}

fn parse_init(s: &str) -> Result<InitKind> {
    match s {
        "zero" => Ok(InitKind::Zero),
        "uniform" => Ok(InitKind::UniformRandomInBall),
        other => Err(Error::usage(format!("--init must be zero or uniform, got `{other}`"))),
    }
}

fn cmd_attack(a: AttackArgs, root: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let data = test_slice(&model, root, a.slice.limit)?;
    let budget = SpatialBudget {
        eps_flow: a.eps_f,
        eps_affine: a.eps_rt,
        step_flow: a.step_f,
        step_affine: a.step_rt,
    };
    let cfg = match a.method {
        AttackMethod::Pgd => AttackConfig::pgd(a.iters, a.eps, a.step),
        AttackMethod::Flow => AttackConfig::flow(a.iters, a.eps_f, a.step_f),
        AttackMethod::Rt => AttackConfig::rt(a.iters, a.eps_rt, a.step_rt),
        AttackMethod::Integrated => AttackConfig::integrated(a.iters, budget),
    }
    .with_seed(a.seed)
    .with_init(parse_init(&a.init)?);
    cfg.validate()?;
    let mut correct = 0usize;
    let mut correct_best = 0usize;
    let mut loss_sum = 0.0;
    for batch in data.sequential_batches(a.slice.batch_size) {
        let res = run_attack(&model, &batch, &cfg)?;
        correct += res.trace.correct_final[a.iters];
        correct_best += res.trace.correct_best[a.iters];
        loss_sum += res.final_loss.iter().map(|&l| l as f64).sum::<f64>();
    }
    let n = data.len().max(1) as f64;
    let acc = 100.0 * correct as f64 / n;
    let report = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "method": cfg.method.name(),
        "iters": a.iters,
        "config": serde_json::to_value(cfg)?,
        "examples": data.len(),
        "acc": finite_or_null(acc),
        "acc_best": finite_or_null(100.0 * correct_best as f64 / n),
        "mean_loss": finite_or_null(loss_sum / n),
    });
    write_json(&a.out, &report)?;
    println!("{} {} iters: robust accuracy {:.2}%", cfg.method.name(), a.iters, acc);
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, root: &Path) -> Result<()> {
    let (model, spec) = load_checkpoint(&a.checkpoint)?;
    let dataset = dataset_of(&model)?;
    let suite_name = a.suite.clone().unwrap_or_else(|| match dataset {
        DatasetName::Mnist => "mnist-default".into(),
        DatasetName::Cifar10 => "cifar-default".into(),
    });
    let suite = EvalSuite::by_name(&suite_name)?;
    let id =
        a.id.clone()
            .or_else(|| spec.as_ref().map(|s| s.name.clone()))
            .unwrap_or_else(|| a.checkpoint.display().to_string());
    let data = test_slice(&model, root, a.slice.limit)?;
    let mut report = evaluate(&model, &id, &data, &suite, a.protocol, a.slice.batch_size)?;
    if let Some(b) = &a.baseline {
        report = report.with_universal(&read_report(b)?)?;
    }
    write_report(&a.out, &report)?;
    println!(
        "{id}: clean {:.2}%, scores {:.2} / {:.2} / {:.2}",
        report.clean_acc, report.scores.sensitivity, report.scores.local_spatial, report.scores.global_spatial
    );
    Ok(())
}

fn cmd_saliency(a: SaliencyArgs, root: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset_from(root, dataset_of(&model)?, Split::Test)?;
    if a.index >= data.len() {
        return Err(Error::usage(format!(
            "--index {} is past the test set ({})",
            a.index,
            data.len()
        )));
    }
    let image = data.images.index_axis(Axis(0), a.index).to_owned();
    let map = smoothgrad(&model, &image, data.labels[a.index], a.smooth.config())?.channel_abs_sum();
    let mut out = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_bytes(&a.out, out.as_bytes())
}

fn cmd_skewness(a: SkewnessArgs, root: &Path) -> Result<()> {
    let (ma, _) = load_checkpoint(&a.model_a)?;
    let (mb, _) = load_checkpoint(&a.model_b)?;
    let data = load_dataset_from(root, dataset_of(&ma)?, Split::Test)?;
    let skew = saliency_skewness(&ma, &mb, &data, a.count, a.smooth.config())?;
    write_json(
        &a.out,
        &json!({
            "model_a": a.model_a.display().to_string(),
            "model_b": a.model_b.display().to_string(),
            "count": a.count.min(data.len()),
            "samples": a.smooth.samples,
            "sigma_fraction": a.smooth.sigma,
            "median_skewness": finite_or_null(skew),
        }),
    )?;
    println!("median skewness {skew:.4}");
    Ok(())
}

fn cmd_landscape(a: LandscapeArgs, root: &Path) -> Result<()> {
    let (model, spec) = load_checkpoint(&a.checkpoint)?;
    let data = test_slice(&model, root, a.count)?;
    let batch = data.select(&(0..data.len()).collect::<Vec<_>>());
    let [_, h, w] = model.spec().input_shape;
    let budget = spec
        .as_ref()
        .map(|s| s.train.attacks.integrated.spatial)
        .unwrap_or(SpatialBudget {
            eps_flow: 0.3,
            eps_affine: 0.3,
            step_flow: 0.01,
            step_affine: 0.1,
        });
    let anchor = match a.anchor {
        Anchor::Zero => SpatialParams::zeros(batch.len(), h, w, budget),
        Anchor::Attack => {
            let cfg = AttackConfig::integrated(20, budget).with_seed(a.seed);
            match run_attack(&model, &batch, &cfg)?.params {
                unirobust_core::attacks::AttackParams::Spatial(p) => p,
                unirobust_core::attacks::AttackParams::Pixel(_) => unreachable!("spatial attack"),
            }
        }
    };
    let slice = loss_landscape(&model, &batch, &anchor, a.radius, a.resolution, a.seed)?;
    write_bytes(&a.out, &slice.to_csv()?)?;
    println!("center loss {:.4}", slice.center());
    Ok(())
}

struct EvaluatedRun {
    dir: PathBuf,
    strategy: String,
    r: Option<f64>,
    report: unirobust_core::analysis::RobustnessReport,
}

fn scan_runs(runs: &Path) -> Result<Vec<EvaluatedRun>> {
    let entries = fs::read_dir(runs).map_err(|e| Error::io(runs, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(REPORT_FILE).exists())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let report = read_report(&dir.join(REPORT_FILE))?;
        let spec_path = dir.join(SPEC_FILE);
        let (strategy, r) = if spec_path.exists() {
            let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
            let spec = ExperimentSpec::from_config(&text)?;
            let pareto = spec.train.strategy == unirobust_core::training::Strategy::Pareto;
            (spec.train.strategy.name().to_string(), pareto.then_some(spec.train.r))
        } else {
            ("unknown".to_string(), None)
        };
        out.push(EvaluatedRun {
            dir,
            strategy,
            r,
            report,
        });
    }
    Ok(out)
}

fn cmd_front(a: FrontArgs) -> Result<()> {
    let runs = scan_runs(&a.runs)?;
    if runs.is_empty() {
        return Err(Error::input(format!("no evaluated runs under {}", a.runs.display())));
    }
    let baseline = runs
        .iter()
        .find(|r| r.report.model_id == a.baseline)
        .or_else(|| runs.iter().find(|r| r.strategy == a.baseline))
        .ok_or_else(|| Error::usage(format!("no run matches baseline `{}`", a.baseline)))?;
    log::info!("baseline {} from {}", baseline.report.model_id, baseline.dir.display());
    let mut points = Vec::new();
    for run in &runs {
        let scored = run.report.clone().with_universal(&baseline.report)?;
        points.push(FrontPoint {
            model_id: run.report.model_id.clone(),
            strategy: run.strategy.clone(),
            r: run.r,
            clean_acc: run.report.clean_acc,
            universal: scored.universal.map(|u| u.value).unwrap_or(0.0),
        });
    }
    let rows = pareto_front(&points, baseline.report.clean_acc);
    write_bytes(&a.out, &front_csv(&rows)?)?;
    println!(
        "{} runs, {} non-dominated",
        rows.len(),
        rows.iter().filter(|r| r.non_dominated).count()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_subcommand_has_help() {
        for sub in [
            "train",
            "attack",
            "evaluate",
            "saliency",
            "skewness",
            "landscape",
            "front",
        ] {
            assert_eq!(run_cli(["unirobust", sub, "--help"]), 0, "{sub}");
        }
        assert_eq!(run_cli(["unirobust", "--help"]), 0);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["unirobust", "train", "--bogus-flag"]), 1);
        assert_eq!(run_cli(["unirobust", "launch"]), 1);
        assert_eq!(run_cli(["unirobust", "train", "--strategy", "sideways"]), 1);
        assert_eq!(run_cli(["unirobust", "train", "--set", "nokey"]), 1);
    }

    #[test]
    fn unknown_flag_names_the_token() {
        let err = Cli::try_parse_from(["unirobust", "front", "--runs", "x", "--out", "y", "--frobnicate"]).unwrap_err();
        assert!(err.to_string().contains("--frobnicate"));
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope").join("ckpt");
        let code = run_cli([
            "unirobust".into(),
            "evaluate".into(),
            "--checkpoint".into(),
            missing.into_os_string(),
            "--out".into(),
            dir.path().join("r.json").into_os_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn train_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("x.cfg");
        fs::write(&cfg, "strategy = ave\nepochs = 3\n").unwrap();
        let args = TrainArgs {
            config: Some(cfg),
            strategy: Some("pareto".into()),
            dataset: None,
            r: Some(0.5),
            epochs: None,
            seed: Some(4),
            out: Some(dir.path().join("run7")),
            set: vec!["window=5".into()],
            resume: false,
            evaluate: false,
        };
        let spec = build_train_spec(&args).unwrap();
        assert_eq!(spec.train.strategy, unirobust_core::training::Strategy::Pareto);
        assert_eq!(spec.train.epochs, 3);
        assert_eq!(spec.train.r, 0.5);
        assert_eq!(spec.train.window, 5);
        assert_eq!(spec.name, "run7");
        assert_eq!(spec.out, dir.path().join("run7"));
    }
}

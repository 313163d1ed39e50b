//! Run orchestration: data, model, training and the run record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use unirobust_core::analysis::{evaluate, EvalSuite, RobustnessReport};
use unirobust_core::data::Dataset;
use unirobust_core::io::write_atomic;
use unirobust_core::model::ModelHandle;
use unirobust_core::training::{train, TrainOutcome};
use unirobust_core::{Error, Result};

use crate::config::ExperimentSpec;
use crate::data::{load_dataset_from, DatasetName, Split};

pub const SPEC_FILE: &str = "spec.cfg";
pub const RECORD_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub spec_hash: String,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub alpha: PathBuf,
    pub report: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub steps: usize,
    pub secs_per_step: f64,
    pub epoch_accuracy: Vec<f64>,
}

impl RunRecord {
    /// Every file the record points at.
    pub fn files(&self) -> Vec<&Path> {
        let mut out = vec![self.checkpoint.as_path(), self.metrics.as_path(), self.alpha.as_path()];
        if let Some(r) = &self.report {
            out.push(r);
        }
        out
    }
}

/// Train and test splits, cut to the spec's limits.
pub fn load_splits(spec: &ExperimentSpec, root: &Path) -> Result<(Dataset, Dataset)> {
    let train_set = load_dataset_from(root, spec.dataset, Split::Train)?;
    let test_set = load_dataset_from(root, spec.dataset, Split::Test)?;
    let cut = |d: Dataset, n: usize| if n > 0 && n < d.len() { d.head(n) } else { d };
    Ok((cut(train_set, spec.train_limit), cut(test_set, spec.test_limit)))
}

/// Trains the spec on the given data and writes `spec.cfg` and `run.json`
/// under the spec's output directory. When `evaluate_after` is set the
/// spec's suite is run on `test_set` and written to `report.json`.
pub fn run_experiment_on(
    spec: &ExperimentSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    resume: bool,
    evaluate_after: bool,
) -> Result<(RunRecord, TrainOutcome)> {
    spec.validate()?;
    let dir = &spec.out;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join(SPEC_FILE);
    let hash = spec.hash();
    if resume && spec_path.exists() {
        let prior = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        if ExperimentSpec::from_config(&prior)?.hash() != hash {
            return Err(Error::State(format!(
                "{} holds a different experiment; refusing to resume",
                dir.display()
            )));
        }
    }
    write_atomic(&spec_path, spec.to_config().as_bytes())?;

    let model = initial_model(spec)?;
    let start = Instant::now();
    let outcome = train(&spec.train, model, train_set, test_set, dir, &hash, resume)?;
    let wall = start.elapsed().as_secs_f64();

    let report = if evaluate_after {
        let suite = EvalSuite::by_name(&spec.suite)?;
        let report = evaluate(&outcome.state.model, &spec.name, test_set, &suite, spec.protocol, 128)?;
        let path = dir.join(REPORT_FILE);
        write_report(&path, &report)?;
        Some(path)
    } else {
        None
    };

    let steps = outcome.state.step;
    let record = RunRecord {
        name: spec.name.clone(),
        spec_hash: hash,
        checkpoint: outcome.files.checkpoint.clone(),
        metrics: outcome.files.metrics.clone(),
        alpha: outcome.files.qp.clone(),
        report,
        wall_clock_secs: wall,
        steps,
        secs_per_step: if steps > 0 { wall / steps as f64 } else { 0.0 },
        epoch_accuracy: outcome.epoch_accuracy.clone(),
    };
    for f in record.files() {
        if !f.exists() {
            return Err(Error::State(format!("run finished without writing {}", f.display())));
        }
    }
    write_atomic(
        &dir.join(RECORD_FILE),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    Ok((record, outcome))
}

/// A fresh seeded model, or the warm-start checkpoint when one is set.
pub fn initial_model(spec: &ExperimentSpec) -> Result<ModelHandle> {
    let wanted = spec.model_spec()?;
    match &spec.init_from {
        None => ModelHandle::new(wanted, spec.train.seed),
        Some(path) => {
            let (model, _) = ModelHandle::load(path)?;
            if model.spec() != &wanted {
                return Err(Error::usage(format!(
                    "{} was built for a different model than this experiment",
                    path.display()
                )));
            }
            Ok(model)
        }
    }
}

/// Loads data from `root` and runs the spec.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path, resume: bool, evaluate_after: bool) -> Result<RunRecord> {
    let (train_set, test_set) = load_splits(spec, root)?;
    run_experiment_on(spec, &train_set, &test_set, resume, evaluate_after).map(|(r, _)| r)
}

pub fn write_report(path: &Path, report: &RobustnessReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_atomic(path, serde_json::to_string_pretty(&report.to_json())?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<RobustnessReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RobustnessReport::from_json(&serde_json::from_str(&text)?)
}

/// Loads a checkpoint and, when present, the `spec.cfg` written beside it.
pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, Option<ExperimentSpec>)> {
    let (model, _) = ModelHandle::load(path)?;
    let spec_path = path.parent().unwrap_or(Path::new(".")).join(SPEC_FILE);
    let spec = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Some(ExperimentSpec::from_config(&text)?)
    } else {
        None
    };
    Ok((model, spec))
}

/// The dataset a model was built for, from its input geometry.
pub fn dataset_of(model: &ModelHandle) -> Result<DatasetName> {
    DatasetName::from_input_shape(model.spec().input_shape)
        .ok_or_else(|| Error::input(format!("no dataset matches input shape {:?}", model.spec().input_shape)))
}

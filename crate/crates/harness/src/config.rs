//! Experiment specifications and the flat `key = value` config format.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use unirobust_core::analysis::Protocol;
use unirobust_core::attacks::{AttackConfig, InitKind};
use unirobust_core::model::{Architecture, ModelSpec, Normalization, SgdConfig};
use unirobust_core::spatial::SpatialBudget;
use unirobust_core::training::{Strategy, TrainAttacks, TrainConfig};
use unirobust_core::{Error, Result};

use crate::data::DatasetName;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("config line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::usage(format!("config line {}: empty key", no + 1)));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::usage(format!("config line {}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelChoice {
    pub arch: String,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
    pub base_width: usize,
    pub groups: usize,
}

impl ModelChoice {
    pub fn architecture(&self) -> Result<Architecture> {
        match self.arch.as_str() {
            "simple-cnn" => Ok(Architecture::SimpleCnn {
                conv_channels: self.conv_channels,
                hidden: self.hidden,
            }),
            "preact-resnet18" => Ok(Architecture::PreactResnet18 {
                base_width: self.base_width,
                groups: self.groups,
            }),
            "linear" => Ok(Architecture::Linear),
            other => Err(Error::usage(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetName,
    pub model: ModelChoice,
    pub train: TrainConfig,
    /// Training examples used (0 = all).
    pub train_limit: usize,
    /// Checkpoint whose parameters initialize the model instead of a
    /// seeded random draw.
    pub init_from: Option<PathBuf>,
    /// Test examples used for evaluation (0 = all).
    pub test_limit: usize,
    pub suite: String,
    pub protocol: Protocol,
    pub out: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    /// Defaults for a dataset: the paper's architecture and training
    /// attack settings.
    pub fn defaults(dataset: DatasetName) -> Self {
        let (model, attacks, epochs, suite) = match dataset {
            DatasetName::Mnist => (
                ModelChoice {
                    arch: "simple-cnn".into(),
                    conv_channels: [32, 64],
                    hidden: 200,
                    base_width: 64,
                    groups: 32,
                },
                TrainAttacks {
                    pgd: AttackConfig::pgd(30, 0.3, 0.01),
                    flow: AttackConfig::flow(20, 0.3, 0.01),
                    rt: AttackConfig::rt(20, 0.3, 0.1),
                    integrated: AttackConfig::integrated(
                        20,
                        SpatialBudget {
                            eps_flow: 0.3,
                            eps_affine: 0.3,
                            step_flow: 0.01,
                            step_affine: 0.1,
                        },
                    ),
                },
                10,
                "mnist-default",
            ),
            DatasetName::Cifar10 => (
                ModelChoice {
                    arch: "preact-resnet18".into(),
                    conv_channels: [32, 64],
                    hidden: 200,
                    base_width: 64,
                    groups: 32,
                },
                TrainAttacks {
                    pgd: AttackConfig::pgd(3, 0.031, 0.007),
                    flow: AttackConfig::flow(5, 0.3, 1e-3),
                    rt: AttackConfig::rt(5, 1.0, 0.05),
                    integrated: AttackConfig::integrated(
                        5,
                        SpatialBudget {
                            eps_flow: 0.3,
                            eps_affine: 1.0,
                            step_flow: 1e-3,
                            step_affine: 0.05,
                        },
                    ),
                },
                30,
                "cifar-default",
            ),
        };
        ExperimentSpec {
            name: format!("{dataset}-run"),
            dataset,
            model,
            train: TrainConfig {
                strategy: Strategy::Natural,
                dataset: dataset.to_string(),
                epochs,
                batch_size: 64,
                attacks,
                r: 1.0,
                window: 10,
                seed: 0,
                optimizer: SgdConfig::default(),
                lr_milestones: vec![epochs / 2, epochs * 3 / 4],
                lr_gamma: 0.1,
                include_natural: false,
                eval_limit: 0,
            },
            train_limit: 0,
            init_from: None,
            test_limit: 0,
            suite: suite.into(),
            protocol: Protocol::AllTest,
            out: PathBuf::from("runs").join(format!("{dataset}-run")),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let shape = self.dataset.input_shape();
        let mut spec = ModelSpec::new(self.model.architecture()?, shape, 10);
        if self.dataset == DatasetName::Cifar10 {
            spec.normalization = Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            };
        }
        Ok(spec)
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let a = &t.attacks;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("name", self.name.clone());
        put("dataset", self.dataset.to_string());
        put("out", self.out.display().to_string());
        put("arch", self.model.arch.clone());
        put("conv_channels", join(&self.model.conv_channels));
        put("hidden", self.model.hidden.to_string());
        put("base_width", self.model.base_width.to_string());
        put("groups", self.model.groups.to_string());
        put("strategy", t.strategy.name().to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("r", t.r.to_string());
        put("window", t.window.to_string());
        put("seed", t.seed.to_string());
        put("lr", t.optimizer.lr.to_string());
        put("momentum", t.optimizer.momentum.to_string());
        put("weight_decay", t.optimizer.weight_decay.to_string());
        put("lr_milestones", join(&t.lr_milestones));
        put("lr_gamma", t.lr_gamma.to_string());
        put("include_natural", t.include_natural.to_string());
        put("eval_limit", t.eval_limit.to_string());
        put("train_limit", self.train_limit.to_string());
        put(
            "init_from",
            self.init_from
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("test_limit", self.test_limit.to_string());
        put(
            "attack_init",
            match a.pgd.init {
                InitKind::Zero => "zero",
                InitKind::UniformRandomInBall => "uniform",
            }
            .to_string(),
        );
        put("pgd_iters", a.pgd.iterations.to_string());
        put("pgd_eps", a.pgd.eps.to_string());
        put("pgd_step", a.pgd.step.to_string());
        put("flow_iters", a.flow.iterations.to_string());
        put("flow_eps", a.flow.spatial.eps_flow.to_string());
        put("flow_step", a.flow.spatial.step_flow.to_string());
        put("rt_iters", a.rt.iterations.to_string());
        put("rt_eps", a.rt.spatial.eps_affine.to_string());
        put("rt_step", a.rt.spatial.step_affine.to_string());
        put("spatial_iters", a.integrated.iterations.to_string());
        put("suite", self.suite.clone());
        put("protocol", self.protocol.name().to_string());
        m
    }

    pub fn to_config(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_config(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_flat(text)?)
    }

    /// Builds a spec from dataset defaults overridden by `pairs`.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let dataset: DatasetName = pairs
            .get("dataset")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(DatasetName::Mnist);
        let mut spec = Self::defaults(dataset);
        let had_name = pairs.contains_key("name");
        let had_out = pairs.contains_key("out");
        for (k, v) in pairs {
            spec.set(k, v)?;
        }
        if had_name && !had_out {
            spec.out = PathBuf::from("runs").join(&spec.name);
        }
        spec.train.dataset = spec.dataset.to_string();
        Ok(spec)
    }

    /// Sets one key; unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::usage(format!("`{key}` expects a number, got `{v}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let t = &mut self.train;
        let a = &mut t.attacks;
        match key {
            "name" => self.name = value.to_string(),
            "dataset" => self.dataset = value.parse()?,
            "out" => self.out = PathBuf::from(value),
            "arch" => {
                self.model.arch = value.to_string();
                self.model.architecture()?;
            }
            "conv_channels" => {
                let v = list(key, value)?;
                if v.len() != 2 {
                    return Err(Error::usage("conv_channels expects two widths, e.g. `32,64`"));
                }
                self.model.conv_channels = [v[0], v[1]];
            }
            "hidden" => self.model.hidden = num(key, value)?,
            "base_width" => self.model.base_width = num(key, value)?,
            "groups" => self.model.groups = num(key, value)?,
            "strategy" => t.strategy = value.parse()?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "r" => t.r = num(key, value)?,
            "window" => t.window = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "lr" => t.optimizer.lr = num(key, value)?,
            "momentum" => t.optimizer.momentum = num(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = num(key, value)?,
            "lr_milestones" => t.lr_milestones = list(key, value)?,
            "lr_gamma" => t.lr_gamma = num(key, value)?,
            "include_natural" => {
                t.include_natural = value
                    .parse()
                    .map_err(|_| Error::usage(format!("`include_natural` expects true/false, got `{value}`")))?
            }
            "eval_limit" => t.eval_limit = num(key, value)?,
            "train_limit" => self.train_limit = num(key, value)?,
            "init_from" => self.init_from = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_limit" => self.test_limit = num(key, value)?,
            "attack_init" => {
                let init = match value {
                    "zero" => InitKind::Zero,
                    "uniform" => InitKind::UniformRandomInBall,
                    other => {
                        return Err(Error::usage(format!(
                            "attack_init must be zero or uniform, got `{other}`"
                        )))
                    }
                };
                for cfg in [&mut a.pgd, &mut a.flow, &mut a.rt, &mut a.integrated] {
                    cfg.init = init;
                }
            }
            "pgd_iters" => a.pgd.iterations = num(key, value)?,
            "pgd_eps" => a.pgd.eps = num(key, value)?,
            "pgd_step" => a.pgd.step = num(key, value)?,
            "flow_iters" => a.flow.iterations = num(key, value)?,
            "flow_eps" => {
                a.flow.spatial.eps_flow = num(key, value)?;
                a.integrated.spatial.eps_flow = a.flow.spatial.eps_flow;
            }
            "flow_step" => {
                a.flow.spatial.step_flow = num(key, value)?;
                a.integrated.spatial.step_flow = a.flow.spatial.step_flow;
            }
            "rt_iters" => a.rt.iterations = num(key, value)?,
            "rt_eps" => {
                a.rt.spatial.eps_affine = num(key, value)?;
                a.integrated.spatial.eps_affine = a.rt.spatial.eps_affine;
            }
            "rt_step" => {
                a.rt.spatial.step_affine = num(key, value)?;
                a.integrated.spatial.step_affine = a.rt.spatial.step_affine;
            }
            "spatial_iters" => a.integrated.iterations = num(key, value)?,
            "suite" => self.suite = value.to_string(),
            "protocol" => self.protocol = value.parse()?,
            other => return Err(Error::usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// SHA-256 of the canonical config with the output directory left out,
    /// so the same experiment hashes identically wherever it is written.
    /// A warm-start checkpoint enters by content, not by path.
    pub fn hash(&self) -> String {
        let mut pairs = self.to_pairs();
        pairs.remove("out");
        if let Some(path) = &self.init_from {
            let digest = std::fs::read(path)
                .map(|b| hex(&Sha256::digest(&b)))
                .unwrap_or_else(|_| "missing".into());
            pairs.insert("init_from".into(), digest);
        }
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.architecture()?;
        self.train.validate()
    }
}

//! Training strategies sharing one epoch loop.
//!
//! Every strategy reduces to a weighted sum over up to four per-example
//! loss streams (natural, PGD, flow, RT), or the integrated spatial loss
//! for spatial training. Adversarial examples are regenerated against the
//! current parameters at every step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_f32_blob, write_atomic, write_f32_blob};
use crate::model::{Batch, LossKind, ModelHandle, Sgd, SgdConfig};
use crate::pareto_qp::{build_qp, solve_qp, LossHistory, ParetoWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Natural,
    Pgd,
    Spatial,
    Max,
    Ave,
    Pareto,
    /// Flow-only adversarial training.
    Flow,
    /// RT-only adversarial training.
    Rt,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Natural => "natural",
            Strategy::Pgd => "pgd",
            Strategy::Spatial => "spatial",
            Strategy::Max => "max",
            Strategy::Ave => "ave",
            Strategy::Pareto => "pareto",
            Strategy::Flow => "flow",
            Strategy::Rt => "rt",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "natural" => Strategy::Natural,
            "pgd" => Strategy::Pgd,
            "spatial" => Strategy::Spatial,
            "max" => Strategy::Max,
            "ave" => Strategy::Ave,
            "pareto" => Strategy::Pareto,
            "flow" => Strategy::Flow,
            "rt" => Strategy::Rt,
            other => return Err(Error::usage(format!("unknown strategy `{other}`"))),
        })
    }
}

/// Attack configurations used to generate training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainAttacks {
    pub pgd: AttackConfig,
    pub flow: AttackConfig,
    pub rt: AttackConfig,
    pub integrated: AttackConfig,
}

impl TrainAttacks {
    fn check(&self) -> Result<()> {
        for (cfg, method) in [
            (&self.pgd, AttackMethod::Pgd),
            (&self.flow, AttackMethod::Flow),
            (&self.rt, AttackMethod::Rt),
            (&self.integrated, AttackMethod::Integrated),
        ] {
            if cfg.method != method {
                return Err(Error::input(format!(
                    "training attack slot `{}` holds a `{}` config",
                    method.name(),
                    cfg.method.name()
                )));
            }
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub attacks: TrainAttacks,
    /// Robustness level for Pareto training.
    pub r: f64,
    /// Moment window in mini-batches.
    pub window: usize,
    pub seed: u64,
    pub optimizer: SgdConfig,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f32,
    /// Adds the natural loss as a fourth member of the Max/Ave loss set.
    pub include_natural: bool,
    /// Test examples used for the per-epoch clean accuracy (0 = all).
    pub eval_limit: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        if self.strategy == Strategy::Pareto && !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::input(format!("pareto training needs r > 0, got {}", self.r)));
        }
        if self.window == 0 {
            return Err(Error::input("moment window must be at least 1"));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::input("learning rate must be finite and non-negative"));
        }
        self.attacks.check()
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.optimizer.lr * self.lr_gamma.powi(drops as i32)
    }
}

pub const NAT: usize = 0;
pub const PGD: usize = 1;
pub const FLOW: usize = 2;
pub const RT: usize = 3;

/// Scalar training objective and the batch means of whichever component
/// losses the strategy computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyLoss {
    pub loss: f64,
    pub components: [Option<f64>; 4],
    /// Parameter gradient of `loss`.
    pub grad: Vec<f32>,
}

struct Stream {
    slot: Option<usize>,
    images: Array4<f32>,
    losses: Vec<f32>,
}

fn adversarial_images(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig, seed: u64) -> Result<Array4<f32>> {
    Ok(run_attack(model, batch, &cfg.with_seed(seed))?.adversarial)
}

fn per_example_losses(model: &ModelHandle, images: &Array4<f32>, labels: &[usize]) -> Result<Vec<f32>> {
    let logits = model.forward(images)?;
    Ok(crate::model::loss_ce(&logits.view(), labels)?.to_vec())
}

/// Per-example max over rows, ties resolved to the lowest index.
pub fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Computes the strategy objective and its parameter gradient on one batch.
/// `attack_seed` seeds any random attack initialisation.
pub fn strategy_loss(
    strategy: Strategy,
    model: &ModelHandle,
    batch: &Batch,
    attacks: &TrainAttacks,
    alpha: Option<&ParetoWeights>,
    include_natural: bool,
    attack_seed: u64,
) -> Result<StrategyLoss> {
    if strategy == Strategy::Pareto && alpha.is_none() {
        return Err(Error::usage("pareto loss requested without weights"));
    }
    if batch.is_empty() {
        return Err(Error::input("empty training batch"));
    }
    let b = batch.len();
    let inv_b = 1.0 / b as f32;
    let labels = &batch.labels;

    let needs: &[usize] = match strategy {
        Strategy::Natural => &[NAT],
        Strategy::Pgd => &[NAT, PGD],
        Strategy::Flow => &[NAT, FLOW],
        Strategy::Rt => &[NAT, RT],
        Strategy::Spatial => &[NAT],
        Strategy::Max | Strategy::Ave | Strategy::Pareto => &[NAT, PGD, FLOW, RT],
    };
    let mut streams: Vec<Stream> = Vec::new();
    for &slot in needs {
        let images = match slot {
            NAT => batch.images.clone(),
            PGD => adversarial_images(model, batch, &attacks.pgd, attack_seed)?,
            FLOW => adversarial_images(model, batch, &attacks.flow, attack_seed.wrapping_add(1))?,
            _ => adversarial_images(model, batch, &attacks.rt, attack_seed.wrapping_add(2))?,
        };
        let losses = per_example_losses(model, &images, labels)?;
        streams.push(Stream {
            slot: Some(slot),
            images,
            losses,
        });
    }
    if strategy == Strategy::Spatial {
        let images = adversarial_images(model, batch, &attacks.integrated, attack_seed.wrapping_add(3))?;
        let losses = per_example_losses(model, &images, labels)?;
        streams.push(Stream {
            slot: None,
            images,
            losses,
        });
    }

    let mut components = [None; 4];
    for s in &streams {
        if let Some(slot) = s.slot {
            components[slot] = Some(s.losses.iter().map(|&l| l as f64).sum::<f64>() / b as f64);
        }
    }

    // Per-example weights for each stream.
    let mut weights: Vec<Vec<f32>> = streams.iter().map(|_| vec![0.0; b]).collect();
    let find = |slot: usize| streams.iter().position(|s| s.slot == Some(slot));
    match strategy {
        Strategy::Natural => weights[find(NAT).unwrap()].fill(inv_b),
        Strategy::Pgd => weights[find(PGD).unwrap()].fill(inv_b),
        Strategy::Flow => weights[find(FLOW).unwrap()].fill(inv_b),
        Strategy::Rt => weights[find(RT).unwrap()].fill(inv_b),
        Strategy::Spatial => weights[streams.len() - 1].fill(inv_b),
        Strategy::Ave | Strategy::Max => {
            let mut members = vec![find(PGD).unwrap(), find(FLOW).unwrap(), find(RT).unwrap()];
            if include_natural {
                members.insert(0, find(NAT).unwrap());
            }
            if strategy == Strategy::Ave {
                let w = inv_b / members.len() as f32;
                for &m in &members {
                    weights[m].fill(w);
                }
            } else {
                for e in 0..b {
                    let row: Vec<f32> = members.iter().map(|&m| streams[m].losses[e]).collect();
                    let mean = row.iter().sum::<f32>() / row.len() as f32;
                    let top = row[argmax_lowest(&row)];
                    if top < mean - 1e-6 * (1.0 + mean.abs()) {
                        return Err(Error::numerical(format!(
                            "max loss {top} below mean loss {mean} for example {e}"
                        )));
                    }
                    weights[members[argmax_lowest(&row)]][e] = inv_b;
                }
            }
        }
        Strategy::Pareto => {
            let a = alpha.unwrap().alpha;
            for (slot, &w) in a.iter().enumerate() {
                weights[find(slot).unwrap()].fill(w as f32 * inv_b);
            }
        }
    }

    let mut grad = vec![0.0f32; model.num_params()];
    let mut loss = 0.0f64;
    for (s, w) in streams.iter().zip(&weights) {
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        let eval = model.param_gradient::<f32>(LossKind::Ce, &s.images, labels, w)?;
        for (g, v) in grad.iter_mut().zip(&eval.grad) {
            *g += v;
        }
        if strategy != Strategy::Pareto {
            loss += s.losses.iter().zip(w).map(|(&l, &wt)| (l * wt) as f64).sum::<f64>();
        }
    }
    if strategy == Strategy::Pareto {
        let a = alpha.unwrap().alpha;
        loss = (0..4).map(|i| a[i] * components[i].unwrap()).sum();
    }
    Ok(StrategyLoss { loss, components, grad })
}

/// Percentage of correctly classified examples.
pub fn clean_accuracy(model: &ModelHandle, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot measure accuracy on an empty set"));
    }
    let mut correct = 0usize;
    for batch in data.sequential_batches(batch_size) {
        let preds = model.predict(&batch.images)?;
        correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub components: [Option<f64>; 4],
    pub alpha: [f64; 4],
    pub clean_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpRecord {
    pub step: usize,
    pub mean: [f64; 4],
    pub alpha: [f64; 4],
    pub r_requested: f64,
    pub r_effective: f64,
    pub objective: f64,
    pub clamped: bool,
}

pub const METRICS_HEADER: [&str; 12] = [
    "step",
    "epoch",
    "loss",
    "loss_nat",
    "loss_pgd",
    "loss_flow",
    "loss_rt",
    "alpha0",
    "alpha1",
    "alpha2",
    "alpha3",
    "clean_acc",
];

pub const QP_HEADER: [&str; 13] = [
    "step",
    "mu0",
    "mu1",
    "mu2",
    "mu3",
    "alpha0",
    "alpha1",
    "alpha2",
    "alpha3",
    "r_requested",
    "r_effective",
    "qp_objective",
    "clamped",
];

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StepRecord {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string(), self.epoch.to_string(), self.loss.to_string()];
        f.extend(self.components.iter().map(|c| opt_field(*c)));
        f.extend(self.alpha.iter().map(|a| a.to_string()));
        f.push(opt_field(self.clean_acc));
        f
    }
}

impl QpRecord {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string()];
        f.extend(self.mean.iter().map(|v| v.to_string()));
        f.extend(self.alpha.iter().map(|v| v.to_string()));
        f.push(self.r_requested.to_string());
        f.push(self.r_effective.to_string());
        f.push(self.objective.to_string());
        f.push(u8::from(self.clamped).to_string());
        f
    }
}

/// Everything the epoch loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelHandle,
    pub optimizer: Sgd,
    pub alpha: ParetoWeights,
    pub history: LossHistory,
    pub step: usize,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub cursor: usize,
    pub log: Vec<StepRecord>,
    pub qp_log: Vec<QpRecord>,
}

impl TrainState {
    pub fn new(model: ModelHandle, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            optimizer: Sgd::new(cfg.optimizer),
            alpha: ParetoWeights::uniform(),
            history: LossHistory::new(cfg.window),
            step: 0,
            epoch: 0,
            cursor: 0,
            log: Vec::new(),
            qp_log: Vec::new(),
        }
    }
}

fn step_seed(cfg: &TrainConfig, step: usize) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step as u64)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn epoch_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// One optimisation step on `batch`. For Pareto training the parameter
/// update uses the current weights, after which the moments are refreshed
/// and new weights solved; a failed solve keeps the old weights.
pub fn train_on_batch(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepRecord> {
    let seed = step_seed(cfg, state.step);
    let alpha = (cfg.strategy == Strategy::Pareto).then_some(state.alpha);
    let out = strategy_loss(
        cfg.strategy,
        &state.model,
        batch,
        &cfg.attacks,
        alpha.as_ref(),
        cfg.include_natural,
        seed,
    )?;
    let lr = cfg.lr_at(state.epoch);
    state
        .model
        .train_step(&mut state.optimizer, out.loss as f32, &out.grad, lr)?;
    let used_alpha = state.alpha.alpha;
    if cfg.strategy == Strategy::Pareto {
        let sample = out.components.map(|c| c.unwrap());
        state.history.push(sample);
        let refreshed = state
            .history
            .moments()
            .and_then(|m| build_qp(&m, cfg.r))
            .and_then(|q| solve_qp(&q).map(|w| (q, w)));
        match refreshed {
            Ok((q, w)) if w.on_simplex() => {
                state.qp_log.push(QpRecord {
                    step: state.step,
                    mean: q.mean,
                    alpha: w.alpha,
                    r_requested: q.r_requested,
                    r_effective: q.r,
                    objective: q.objective(&w.alpha),
                    clamped: q.clamped,
                });
                state.alpha = w;
            }
            Ok((_, w)) => log::warn!(
                "step {}: QP returned off-simplex weights {:?}; keeping previous",
                state.step,
                w.alpha
            ),
            Err(e) => log::warn!("step {}: QP failed ({e}); keeping previous weights", state.step),
        }
    }
    let record = StepRecord {
        step: state.step,
        epoch: state.epoch,
        loss: out.loss,
        components: out.components,
        alpha: used_alpha,
        clean_acc: None,
    };
    state.step += 1;
    Ok(record)
}

/// Paths of the files a training run writes under its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub qp: PathBuf,
}

impl RunFiles {
    pub fn under(dir: &Path) -> Self {
        RunFiles {
            checkpoint: dir.join("ckpt"),
            metrics: dir.join("metrics.csv"),
            qp: dir.join("alpha.csv"),
        }
    }

    fn state(&self) -> PathBuf {
        with_suffix(&self.checkpoint, ".state.json")
    }

    fn velocity(&self) -> PathBuf {
        with_suffix(&self.checkpoint, ".velocity")
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedState {
    alpha: ParetoWeights,
    history: LossHistory,
    step: usize,
    epoch: usize,
    cursor: usize,
    config_hash: String,
}

fn save_state(state: &TrainState, files: &RunFiles, config_hash: &str) -> Result<()> {
    state.model.save(&files.checkpoint, config_hash)?;
    write_f32_blob(&files.velocity(), state.optimizer.velocity())?;
    let saved = SavedState {
        alpha: state.alpha,
        history: state.history.clone(),
        step: state.step,
        epoch: state.epoch,
        cursor: state.cursor,
        config_hash: config_hash.to_string(),
    };
    write_atomic(&files.state(), serde_json::to_string_pretty(&saved)?.as_bytes())
}

/// Restores a run written by [`train`], refusing a different configuration.
pub fn load_state(files: &RunFiles, cfg: &TrainConfig, config_hash: &str) -> Result<TrainState> {
    let (model, _) = ModelHandle::load(&files.checkpoint)?;
    let path = files.state();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let saved: SavedState = serde_json::from_str(&text)?;
    if saved.config_hash != config_hash {
        return Err(Error::State(format!(
            "checkpoint was written by config {} but resuming with {config_hash}",
            saved.config_hash
        )));
    }
    let mut optimizer = Sgd::new(cfg.optimizer);
    let velocity = read_f32_blob(&files.velocity())?;
    if !velocity.is_empty() {
        optimizer.set_velocity(velocity);
    }
    Ok(TrainState {
        model,
        optimizer,
        alpha: saved.alpha,
        history: saved.history,
        step: saved.step,
        epoch: saved.epoch,
        cursor: saved.cursor,
        log: Vec::new(),
        qp_log: Vec::new(),
    })
}

struct CsvAppender {
    file: fs::File,
}

impl CsvAppender {
    /// Opens `path` for appending, keeping only rows whose first field (the
    /// step) is below `keep_below`. A fresh file gets the header.
    fn open(path: &Path, header: &[&str], keep_below: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if keep_below > 0 && path.exists() {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
            for rec in rdr.records() {
                let rec = rec?;
                let step: usize = rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                if step < keep_below {
                    kept.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
                }
            }
        }
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(header)?;
        for row in kept {
            wtr.write_record(&row)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &bytes)?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CsvAppender { file })
    }

    fn append(&mut self, fields: Vec<String>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(&fields)?;
        let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        self.file
            .write_all(&bytes)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::Format(format!("metrics append failed: {e}")))
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub files: RunFiles,
    pub state: TrainState,
    pub epoch_accuracy: Vec<f64>,
}

/// Runs (or resumes) training into `out_dir`.
///
/// The checkpoint is rewritten atomically after every epoch. A non-finite
/// loss stops the run with an error after checkpointing the last good
/// parameters (the rejected update never touches them).
pub fn train(
    cfg: &TrainConfig,
    initial: ModelHandle,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: &Path,
    config_hash: &str,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = RunFiles::under(out_dir);
    let mut state = if resume && files.checkpoint.exists() {
        load_state(&files, cfg, config_hash)?
    } else {
        TrainState::new(initial, cfg)
    };
    let mut metrics = CsvAppender::open(&files.metrics, &METRICS_HEADER, state.step)?;
    let mut qp_csv = CsvAppender::open(&files.qp, &QP_HEADER, state.step)?;
    let eval_set = if cfg.eval_limit > 0 {
        test_set.head(cfg.eval_limit)
    } else {
        test_set.clone()
    };
    let mut epoch_accuracy = Vec::new();

    while state.epoch < cfg.epochs {
        let order = train_set.shuffled_order(epoch_seed(cfg, state.epoch));
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        while state.cursor < chunks.len() {
            let batch = train_set.select(chunks[state.cursor]);
            let qp_before = state.qp_log.len();
            let mut record = match train_on_batch(&mut state, &batch, cfg) {
                Ok(r) => r,
                Err(e) => {
                    save_state(&state, &files, config_hash)?;
                    return Err(e);
                }
            };
            state.cursor += 1;
            if state.cursor == chunks.len() {
                record.clean_acc = Some(clean_accuracy(&state.model, &eval_set, 256)?);
            }
            metrics.append(record.fields())?;
            for q in &state.qp_log[qp_before..] {
                qp_csv.append(q.fields())?;
            }
            if let Some(acc) = record.clean_acc {
                log::info!(
                    "{} epoch {} step {} loss {:.4} clean {:.2}%",
                    cfg.strategy.name(),
                    state.epoch,
                    record.step,
                    record.loss,
                    acc
                );
                epoch_accuracy.push(acc);
            }
            state.log.push(record);
        }
        state.epoch += 1;
        state.cursor = 0;
        save_state(&state, &files, config_hash)?;
    }
    if !files.checkpoint.exists() {
        save_state(&state, &files, config_hash)?;
    }
    Ok(TrainOutcome {
        files,
        state,
        epoch_accuracy,
    })
}

/// Mean robust weight `alpha1 + alpha2 + alpha3` over the records of the
/// last epoch in `log`.
pub fn last_epoch_robust_mass(log: &[StepRecord]) -> Option<f64> {
    let last = log.last()?.epoch;
    let rows: Vec<f64> = log
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| r.alpha[1..].iter().sum())
        .collect();
    Some(rows.iter().sum::<f64>() / rows.len() as f64)
}

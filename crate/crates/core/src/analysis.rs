//! Evaluation and representation analysis.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::finite_or_null;
use crate::model::{loss_ce, Batch, ModelHandle};
use crate::spatial::{AffineParams, FlowField, SpatialParams};
use crate::training::clean_accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    AllTest,
    CorrectlyClassifiedOnly,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::AllTest => "all-test",
            Protocol::CorrectlyClassifiedOnly => "correctly-classified-only",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-test" => Ok(Protocol::AllTest),
            "correctly-classified-only" => Ok(Protocol::CorrectlyClassifiedOnly),
            other => Err(Error::usage(format!("unknown protocol `{other}`"))),
        }
    }
}

/// One attack family evaluated at several iteration counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackLadder {
    pub attack: AttackConfig,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub name: String,
    pub ladders: Vec<AttackLadder>,
}

impl EvalSuite {
    pub fn mnist_default() -> Self {
        EvalSuite {
            name: "mnist-default".into(),
            ladders: vec![
                AttackLadder {
                    attack: AttackConfig::pgd(40, 0.3, 0.01),
                    iterations: vec![10, 20, 30, 40],
                },
                AttackLadder {
                    attack: AttackConfig::flow(20, 0.3, 0.01),
                    iterations: vec![5, 10, 15, 20],
                },
                AttackLadder {
                    attack: AttackConfig::rt(20, 0.3, 0.1),
                    iterations: vec![5, 10, 15, 20],
                },
            ],
        }
    }

    pub fn cifar_default() -> Self {
        EvalSuite {
            name: "cifar-default".into(),
            ladders: vec![
                AttackLadder {
                    attack: AttackConfig::pgd(20, 0.031, 0.007),
                    iterations: vec![5, 10, 15, 20],
                },
                AttackLadder {
                    attack: AttackConfig::flow(15, 0.3, 1e-3),
                    iterations: vec![3, 5, 10, 15],
                },
                AttackLadder {
                    attack: AttackConfig::rt(15, 1.0, 0.05),
                    iterations: vec![3, 5, 10, 15],
                },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist-default" => Ok(Self::mnist_default()),
            "cifar-default" => Ok(Self::cifar_default()),
            other => Err(Error::usage(format!("unknown evaluation suite `{other}`"))),
        }
    }
}

/// Accuracy of one attack at one iteration count, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub method: AttackMethod,
    pub eps: f64,
    pub iters: usize,
    pub acc: f64,
    /// Accuracy against the per-example worst iterate so far.
    pub acc_best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub sensitivity: f64,
    pub local_spatial: f64,
    pub global_spatial: f64,
}

impl Scores {
    pub fn total(&self) -> f64 {
        self.sensitivity + self.local_spatial + self.global_spatial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universal {
    pub baseline_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model_id: String,
    pub clean_acc: f64,
    pub protocol: Protocol,
    pub attacks: Vec<AttackRow>,
    pub scores: Scores,
    pub universal: Option<Universal>,
}

fn budget_of(cfg: &AttackConfig) -> f64 {
    match cfg.method {
        AttackMethod::Pgd => cfg.eps as f64,
        AttackMethod::Flow => cfg.spatial.eps_flow as f64,
        AttackMethod::Rt => cfg.spatial.eps_affine as f64,
        AttackMethod::Integrated => cfg.spatial.eps_flow.max(cfg.spatial.eps_affine) as f64,
    }
}

/// Mean robust accuracy over an iteration ladder.
pub fn robustness_score(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::input("robustness score needs at least one iteration setting"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

fn family_rows(rows: &[AttackRow], method: AttackMethod) -> impl Iterator<Item = &AttackRow> {
    rows.iter().filter(move |r| r.method == method)
}

/// Recomputes the three scores from an accuracy table.
pub fn scores_from_rows(rows: &[AttackRow]) -> Result<Scores> {
    let score = |m| {
        let accs: Vec<f64> = family_rows(rows, m).map(|r| r.acc).collect();
        robustness_score(&accs)
    };
    Ok(Scores {
        sensitivity: score(AttackMethod::Pgd)?,
        local_spatial: score(AttackMethod::Flow)?,
        global_spatial: score(AttackMethod::Rt)?,
    })
}

/// Sum over the three robustness families of `model - baseline` scores.
pub fn universal_score(report: &RobustnessReport, baseline: &RobustnessReport) -> Result<f64> {
    let suite = |r: &RobustnessReport| -> Vec<(AttackMethod, u64, usize)> {
        r.attacks.iter().map(|a| (a.method, a.eps.to_bits(), a.iters)).collect()
    };
    if suite(report) != suite(baseline) {
        return Err(Error::input(format!(
            "reports `{}` and `{}` were evaluated with different attack suites",
            report.model_id, baseline.model_id
        )));
    }
    Ok(report.scores.total() - baseline.scores.total())
}

/// Runs every ladder of `suite` against `data`.
///
/// Each ladder is one attack trajectory run to its largest iteration
/// count; the accuracy after `t` steps is read off the trajectory, which
/// is identical to a separate `t`-step run.
pub fn evaluate(
    model: &ModelHandle,
    model_id: &str,
    data: &Dataset,
    suite: &EvalSuite,
    protocol: Protocol,
    batch_size: usize,
) -> Result<RobustnessReport> {
    let clean_acc = clean_accuracy(model, data, batch_size)?;
    let eval_set = match protocol {
        Protocol::AllTest => data.clone(),
        Protocol::CorrectlyClassifiedOnly => correctly_classified(model, data, batch_size)?,
    };
    let mut rows = Vec::new();
    for ladder in &suite.ladders {
        let max_iter = *ladder
            .iterations
            .iter()
            .max()
            .ok_or_else(|| Error::input("attack ladder has no iteration counts"))?;
        let cfg = ladder.attack.with_iterations(max_iter);
        let mut correct_final = vec![0usize; max_iter + 1];
        let mut correct_best = vec![0usize; max_iter + 1];
        for batch in eval_set.sequential_batches(batch_size) {
            let res = run_attack(model, &batch, &cfg)?;
            for t in 0..=max_iter {
                correct_final[t] += res.trace.correct_final[t];
                correct_best[t] += res.trace.correct_best[t];
            }
        }
        let n = eval_set.len().max(1) as f64;
        for &it in &ladder.iterations {
            rows.push(AttackRow {
                method: cfg.method,
                eps: budget_of(&cfg),
                iters: it,
                acc: 100.0 * correct_final[it] as f64 / n,
                acc_best: 100.0 * correct_best[it] as f64 / n,
            });
        }
    }
    let scores = scores_from_rows(&rows)?;
    Ok(RobustnessReport {
        model_id: model_id.to_string(),
        clean_acc,
        protocol,
        attacks: rows,
        scores,
        universal: None,
    })
}

/// The subset of `data` the model classifies correctly.
pub fn correctly_classified(model: &ModelHandle, data: &Dataset, batch_size: usize) -> Result<Dataset> {
    let mut keep = Vec::new();
    let mut offset = 0;
    for batch in data.sequential_batches(batch_size) {
        let preds = model.predict(&batch.images)?;
        for (i, (p, y)) in preds.iter().zip(&batch.labels).enumerate() {
            if p == y {
                keep.push(offset + i);
            }
        }
        offset += batch.len();
    }
    let b = data.select(&keep);
    Ok(Dataset {
        images: b.images,
        labels: b.labels,
        num_classes: data.num_classes,
    })
}

impl RobustnessReport {
    pub fn with_universal(mut self, baseline: &RobustnessReport) -> Result<Self> {
        let value = universal_score(&self, baseline)?;
        self.universal = Some(Universal {
            baseline_id: baseline.model_id.clone(),
            value,
        });
        Ok(self)
    }

    /// JSON form with non-finite numbers replaced by `null` and listed
    /// under `errors`.
    pub fn to_json(&self) -> Value {
        let mut errors = Vec::new();
        let mut num = |v: f64, what: &str| {
            if !v.is_finite() {
                errors.push(format!("{what} is not finite"));
            }
            finite_or_null(v)
        };
        let attacks: Vec<Value> = self
            .attacks
            .iter()
            .map(|a| {
                json!({
                    "method": a.method.name(),
                    "eps": num(a.eps, "eps"),
                    "iters": a.iters,
                    "acc": num(a.acc, "acc"),
                    "acc_best": num(a.acc_best, "acc_best"),
                })
            })
            .collect();
        let scores = json!({
            "sensitivity": num(self.scores.sensitivity, "sensitivity"),
            "local_spatial": num(self.scores.local_spatial, "local_spatial"),
            "global_spatial": num(self.scores.global_spatial, "global_spatial"),
        });
        let universal = match &self.universal {
            Some(u) => json!({"baseline_id": u.baseline_id, "value": num(u.value, "universal")}),
            None => Value::Null,
        };
        let clean = num(self.clean_acc, "clean_acc");
        let mut out = json!({
            "model_id": self.model_id,
            "clean_acc": clean,
            "protocol": self.protocol.name(),
            "attacks": attacks,
            "scores": scores,
            "universal": universal,
        });
        if !errors.is_empty() {
            out["error"] = json!(true);
            out["errors"] = json!(errors);
        }
        out
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        validate_report_json(value)?;
        let f = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
        let attacks = value["attacks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| {
                Ok(AttackRow {
                    method: a["method"].as_str().unwrap().parse()?,
                    eps: f(&a["eps"]),
                    iters: a["iters"].as_u64().unwrap() as usize,
                    acc: f(&a["acc"]),
                    acc_best: a.get("acc_best").map(f).unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = &value["scores"];
        let universal = match &value["universal"] {
            Value::Null => None,
            u => Some(Universal {
                baseline_id: u["baseline_id"].as_str().unwrap().to_string(),
                value: f(&u["value"]),
            }),
        };
        Ok(RobustnessReport {
            model_id: value["model_id"].as_str().unwrap().to_string(),
            clean_acc: f(&value["clean_acc"]),
            protocol: value["protocol"].as_str().unwrap().parse()?,
            attacks,
            scores: Scores {
                sensitivity: f(&s["sensitivity"]),
                local_spatial: f(&s["local_spatial"]),
                global_spatial: f(&s["global_spatial"]),
            },
            universal,
        })
    }
}

/// Checks a report against the JSON schema: required keys, types, and
/// accuracies within `[0, 100]`.
pub fn validate_report_json(value: &Value) -> Result<()> {
    let bad = |msg: &str| Err(Error::Format(format!("report schema: {msg}")));
    let num_or_null = |v: &Value| v.is_number() || v.is_null();
    let Some(obj) = value.as_object() else {
        return bad("top level is not an object");
    };
    if !obj.get("model_id").is_some_and(Value::is_string) {
        return bad("model_id must be a string");
    }
    let in_range = |v: &Value| v.as_f64().map_or(v.is_null(), |x| (0.0..=100.0).contains(&x));
    if !obj.get("clean_acc").is_some_and(|v| num_or_null(v) && in_range(v)) {
        return bad("clean_acc must be a number in [0, 100]");
    }
    match obj.get("protocol").and_then(Value::as_str) {
        Some("all-test" | "correctly-classified-only") => {}
        _ => return bad("protocol must be all-test or correctly-classified-only"),
    }
    let Some(attacks) = obj.get("attacks").and_then(Value::as_array) else {
        return bad("attacks must be an array");
    };
    for a in attacks {
        let method_ok = matches!(
            a.get("method").and_then(Value::as_str),
            Some("pgd" | "flow" | "rt" | "integrated")
        );
        if !method_ok
            || !a.get("eps").is_some_and(num_or_null)
            || !a.get("iters").is_some_and(Value::is_u64)
            || !a.get("acc").is_some_and(|v| num_or_null(v) && in_range(v))
        {
            return bad(&format!("malformed attack row {a}"));
        }
    }
    let Some(scores) = obj.get("scores").and_then(Value::as_object) else {
        return bad("scores must be an object");
    };
    for key in ["sensitivity", "local_spatial", "global_spatial"] {
        if !scores.get(key).is_some_and(num_or_null) {
            return bad(&format!("scores.{key} missing"));
        }
    }
    match obj.get("universal") {
        Some(Value::Null) => {}
        Some(Value::Object(u)) => {
            if !u.get("baseline_id").is_some_and(Value::is_string) || !u.get("value").is_some_and(num_or_null) {
                return bad("universal needs baseline_id and value");
            }
        }
        _ => return bad("universal must be an object or null"),
    }
    Ok(())
}

/// One trained model placed on the (sacrificed accuracy, universal score) plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub model_id: String,
    pub strategy: String,
    pub r: Option<f64>,
    pub clean_acc: f64,
    pub universal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub model_id: String,
    pub strategy: String,
    pub r: Option<f64>,
    pub sacrificed: f64,
    pub universal: f64,
    pub non_dominated: bool,
}

/// `a` dominates `b`: no worse on both axes and strictly better on one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    let (sa, ua) = a;
    let (sb, ub) = b;
    sa <= sb && ua >= ub && (sa < sb || ua > ub)
}

/// `a` is no worse than `b` on both axes.
pub fn weakly_dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1
}

/// Rows sorted by sacrificed clean accuracy with dominance flags.
pub fn pareto_front(points: &[FrontPoint], baseline_clean: f64) -> Vec<FrontRow> {
    let mut rows: Vec<FrontRow> = points
        .iter()
        .map(|p| FrontRow {
            model_id: p.model_id.clone(),
            strategy: p.strategy.clone(),
            r: p.r,
            sacrificed: baseline_clean - p.clean_acc,
            universal: p.universal,
            non_dominated: true,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.sacrificed
            .total_cmp(&b.sacrificed)
            .then(b.universal.total_cmp(&a.universal))
    });
    // Sweep by sacrifice: a row is dominated iff some row with no larger
    // sacrifice has a larger universal score, or an equal score at a
    // strictly smaller sacrifice.
    let mut best_prev = f64::NEG_INFINITY; // best score at strictly smaller sacrifice
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j < rows.len() && rows[j].sacrificed == rows[i].sacrificed {
            j += 1;
        }
        let group_best = rows[i..j].iter().map(|r| r.universal).fold(f64::NEG_INFINITY, f64::max);
        for row in &mut rows[i..j] {
            row.non_dominated = !(best_prev >= row.universal || group_best > row.universal);
        }
        best_prev = best_prev.max(group_best);
        i = j;
    }
    rows
}

/// Pairwise dominance flags, used to cross-check [`pareto_front`].
pub fn non_dominated_brute(rows: &[FrontRow]) -> Vec<bool> {
    rows.iter()
        .map(|a| {
            !rows
                .iter()
                .any(|b| dominates((b.sacrificed, b.universal), (a.sacrificed, a.universal)))
        })
        .collect()
}

pub fn front_csv(rows: &[FrontRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model_id",
        "strategy",
        "r",
        "sacrificed_clean_acc",
        "universal",
        "non_dominated",
    ])?;
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            r.strategy.clone(),
            r.r.map(|v| v.to_string()).unwrap_or_default(),
            r.sacrificed.to_string(),
            r.universal.to_string(),
            u8::from(r.non_dominated).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradConfig {
    pub samples: usize,
    pub sigma_fraction: f64,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        SmoothGradConfig {
            samples: 100,
            sigma_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `(C, H, W)` averaged logit gradient.
    pub values: Array3<f32>,
    pub config: SmoothGradConfig,
}

impl SaliencyMap {
    /// Sum of absolute values over channels, `(H, W)`.
    pub fn channel_abs_sum(&self) -> Array2<f32> {
        self.values.mapv(f32::abs).sum_axis(Axis(0))
    }
}

/// Average gradient of the class-`label` logit over `samples` copies of
/// `image` with Gaussian noise of standard deviation
/// `sigma_fraction * (max - min)` of that image.
pub fn smoothgrad(
    model: &ModelHandle,
    image: &Array3<f32>,
    label: usize,
    cfg: SmoothGradConfig,
) -> Result<SaliencyMap> {
    if cfg.samples == 0 {
        return Err(Error::input("smoothgrad needs at least one sample"));
    }
    if label >= model.num_classes() {
        return Err(Error::input(format!("label {label} outside the model's classes")));
    }
    let (c, h, w) = image.dim();
    let lo = image.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sigma = cfg.sigma_fraction * (hi - lo) as f64;
    if sigma == 0.0 && cfg.sigma_fraction > 0.0 {
        log::warn!("constant image: smoothgrad noise is degenerate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::input(e.to_string()))?;
    let mut sum = Array3::<f32>::zeros((c, h, w));
    // Chunked so large models do not hold a hundred activations at once.
    let chunk = 25usize;
    let mut left = cfg.samples;
    while left > 0 {
        let n = left.min(chunk);
        left -= n;
        let mut noisy = Array4::<f32>::zeros((n, c, h, w));
        for mut copy in noisy.outer_iter_mut() {
            copy.assign(image);
            if sigma > 0.0 {
                copy.mapv_inplace(|v| v + normal.sample(&mut rng) as f32);
            }
        }
        let (logits, tape) = model.forward_tape(&noisy)?;
        let mut seed_grad = Array2::<f32>::zeros(logits.dim());
        seed_grad.column_mut(label).fill(1.0);
        let g = model.backward(&tape, seed_grad, None);
        sum += &g.sum_axis(Axis(0));
    }
    sum.mapv_inplace(|v| v / cfg.samples as f32);
    Ok(SaliencyMap {
        values: sum,
        config: cfg,
    })
}

/// Fisher-Pearson skewness `m3 / m2^(3/2)`, zero for a degenerate sample.
pub fn skewness(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 < 1e-12 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median over the first `count` examples of the skewness of
/// `|S_a| - |S_b|` (channel-summed absolute saliency, signed difference).
pub fn saliency_skewness(
    model_a: &ModelHandle,
    model_b: &ModelHandle,
    data: &Dataset,
    count: usize,
    cfg: SmoothGradConfig,
) -> Result<f64> {
    if model_a.spec().input_shape != model_b.spec().input_shape {
        return Err(Error::input("models disagree on input geometry"));
    }
    let n = count.min(data.len());
    if n == 0 {
        return Err(Error::input("saliency skewness needs at least one example"));
    }
    let mut skews = Vec::with_capacity(n);
    for i in 0..n {
        let image = data.images.index_axis(Axis(0), i).to_owned();
        let y = data.labels[i];
        let per_image = SmoothGradConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg
        };
        let a = smoothgrad(model_a, &image, y, per_image)?.channel_abs_sum();
        let b = smoothgrad(model_b, &image, y, per_image)?.channel_abs_sum();
        let diff: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| (x - y) as f64).collect();
        skews.push(skewness(&diff));
    }
    Ok(median(&mut skews).unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSlice {
    /// Grid coefficients shared by both axes.
    pub coords: Vec<f64>,
    /// `values[[i, j]]` is the mean CE loss at `anchor + coords[i] d1 + coords[j] d2`.
    pub values: Array2<f64>,
    pub directions: [(FlowField<f32>, AffineParams<f32>); 2],
    /// Per direction, per example: the `(flow, affine)` norms the blocks were scaled to.
    pub normalization: [Vec<(f64, f64)>; 2],
}

impl LandscapeSlice {
    pub fn center(&self) -> f64 {
        let m = self.coords.len() / 2;
        self.values[[m, m]]
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["a", "b", "loss"])?;
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                w.write_record([a.to_string(), b.to_string(), self.values[[i, j]].to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Least-squares quadratic `c + g.x + x'Hx/2` over cells within
    /// `radius`, returning the fitted Hessian.
    pub fn local_hessian(&self, radius: f64) -> Result<[[f64; 2]; 2]> {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (i, &a) in self.coords.iter().enumerate() {
            for (j, &b) in self.coords.iter().enumerate() {
                if a.hypot(b) <= radius + 1e-12 {
                    rows.push([1.0, a, b, 0.5 * a * a, a * b, 0.5 * b * b]);
                    rhs.push(self.values[[i, j]]);
                }
            }
        }
        if rows.len() < 6 {
            return Err(Error::input("too few cells for a quadratic fit"));
        }
        let x = nalgebra::DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c]);
        let y = nalgebra::DVector::from_vec(rhs);
        let coef = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::numerical(e.to_string()))?;
        Ok([[coef[3], coef[4]], [coef[4], coef[5]]])
    }
}

fn random_direction(
    anchor: &SpatialParams,
    rng: &mut ChaCha8Rng,
) -> ((FlowField<f32>, AffineParams<f32>), Vec<(f64, f64)>) {
    let mut flow = anchor.flow.0.mapv(|_| StandardNormal.sample(rng));
    let mut affine = anchor.affine.0.mapv(|_| StandardNormal.sample(rng));
    let mut norms = Vec::new();
    let block_norm = |it: &mut dyn Iterator<Item = &f32>| it.map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    for b in 0..anchor.batch() {
        let target_f = block_norm(&mut anchor.flow.0.slice(s![b, .., .., ..]).iter());
        let target_a = block_norm(&mut anchor.affine.0.row(b).iter());
        let target_f = if target_f > 0.0 { target_f } else { 1.0 };
        let target_a = if target_a > 0.0 { target_a } else { 1.0 };
        let mut fb = flow.slice_mut(s![b, .., .., ..]);
        let nf = block_norm(&mut fb.iter()).max(1e-30);
        fb.mapv_inplace(|v| (v as f64 * target_f / nf) as f32);
        let mut ab = affine.row_mut(b);
        let na = block_norm(&mut ab.iter()).max(1e-30);
        ab.mapv_inplace(|v| (v as f64 * target_a / na) as f32);
        norms.push((target_f, target_a));
    }
    ((FlowField(flow), AffineParams(affine)), norms)
}

/// Loss over a 2-D slice of spatial-parameter space around `anchor`,
/// using two random, filter-normalised directions.
pub fn loss_landscape(
    model: &ModelHandle,
    batch: &Batch,
    anchor: &SpatialParams,
    radius: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeSlice> {
    if resolution < 3 {
        return Err(Error::input("landscape resolution must be at least 3"));
    }
    if anchor.batch() != batch.len() {
        return Err(Error::input("anchor and batch sizes differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d1, n1) = random_direction(anchor, &mut rng);
    let (d2, n2) = random_direction(anchor, &mut rng);
    let coords: Vec<f64> = (0..resolution)
        .map(|k| -radius + 2.0 * radius * k as f64 / (resolution - 1) as f64)
        .collect();
    let mid = resolution / 2;
    let mut values = Array2::zeros((resolution, resolution));
    for (i, &a) in coords.iter().enumerate() {
        for (j, &b) in coords.iter().enumerate() {
            // Exact zero offsets keep the centre cell bit-identical to the anchor loss.
            let (a, b) = (
                if i == mid && resolution % 2 == 1 { 0.0 } else { a },
                if j == mid && resolution % 2 == 1 { 0.0 } else { b },
            );
            let flow = FlowField(&anchor.flow.0 + &(&d1.0 .0 * a as f32) + &(&d2.0 .0 * b as f32));
            let affine = AffineParams(&anchor.affine.0 + &(&d1.1 .0 * a as f32) + &(&d2.1 .0 * b as f32));
            values[[i, j]] = mean_spatial_loss(model, batch, &flow, &affine)?;
        }
    }
    Ok(LandscapeSlice {
        coords,
        values,
        directions: [d1, d2],
        normalization: [n1, n2],
    })
}

/// Mean CE loss of the batch warped by `(flow, affine)`.
pub fn mean_spatial_loss(
    model: &ModelHandle,
    batch: &Batch,
    flow: &FlowField<f32>,
    affine: &AffineParams<f32>,
) -> Result<f64> {
    let losses = crate::model::spatial_losses(
        model,
        crate::model::LossKind::Ce,
        &batch.images,
        &batch.labels,
        flow,
        affine,
    )?;
    Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / batch.len().max(1) as f64)
}

/// Mean CE loss on clean images, for reference.
pub fn mean_loss(model: &ModelHandle, batch: &Batch) -> Result<f64> {
    let logits = model.forward(&batch.images)?;
    let l = loss_ce(&logits.view(), &batch.labels)?;
    Ok(l.iter().map(|&v| v as f64).sum::<f64>() / batch.len().max(1) as f64)
}

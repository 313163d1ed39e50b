//! Untargeted sign-gradient attacks.
//!
//! All four attacks run the same loop: evaluate the loss gradient at the
//! current iterate, take a signed step per parameter block, clip each block
//! to its box, rebuild the adversarial batch. PGD perturbs pixels directly;
//! the spatial attacks perturb the flow field and/or the affine increments
//! and resample the clean image through the resulting grid.

use ndarray::{Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, Batch, LossKind, ModelHandle};
use crate::real::sign;
use crate::spatial::{
    base_grid, bilinear_sample, integrated_grid_parts, AffineParams, FlowField, SpatialBudget, SpatialParams,
};

pub use crate::model::ce_smoothmax_ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Pgd,
    Flow,
    Rt,
    Integrated,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Pgd => "pgd",
            AttackMethod::Flow => "flow",
            AttackMethod::Rt => "rt",
            AttackMethod::Integrated => "integrated",
        }
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackMethod::Pgd),
            "flow" => Ok(AttackMethod::Flow),
            "rt" => Ok(AttackMethod::Rt),
            "integrated" => Ok(AttackMethod::Integrated),
            other => Err(Error::usage(format!("unknown attack method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Zero,
    UniformRandomInBall,
}

/// Which spatial blocks the integrated attack may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeBlocks {
    pub flow: bool,
    pub affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub iterations: usize,
    /// L-infinity radius of the PGD pixel perturbation.
    pub eps: f32,
    /// PGD step size.
    pub step: f32,
    /// Bounds and step sizes of the flow and affine blocks.
    pub spatial: SpatialBudget,
    pub init: InitKind,
    pub loss: LossKind,
    pub seed: u64,
    /// Only read by the integrated attack; flow and RT fix their own block.
    pub free_blocks: FreeBlocks,
}

impl AttackConfig {
    fn base(method: AttackMethod, iterations: usize) -> Self {
        AttackConfig {
            method,
            iterations,
            eps: 0.0,
            step: 0.0,
            spatial: SpatialBudget {
                eps_flow: 0.0,
                eps_affine: 0.0,
                step_flow: 0.0,
                step_affine: 0.0,
            },
            init: InitKind::Zero,
            loss: LossKind::Ce,
            seed: 0,
            free_blocks: FreeBlocks {
                flow: true,
                affine: true,
            },
        }
    }

    pub fn pgd(iterations: usize, eps: f32, step: f32) -> Self {
        AttackConfig {
            eps,
            step,
            ..Self::base(AttackMethod::Pgd, iterations)
        }
    }

    pub fn flow(iterations: usize, eps_flow: f32, step_flow: f32) -> Self {
        let mut cfg = Self::base(AttackMethod::Flow, iterations);
        cfg.spatial.eps_flow = eps_flow;
        cfg.spatial.step_flow = step_flow;
        cfg
    }

    pub fn rt(iterations: usize, eps_affine: f32, step_affine: f32) -> Self {
        let mut cfg = Self::base(AttackMethod::Rt, iterations);
        cfg.spatial.eps_affine = eps_affine;
        cfg.spatial.step_affine = step_affine;
        cfg
    }

    pub fn integrated(iterations: usize, budget: SpatialBudget) -> Self {
        AttackConfig {
            spatial: budget,
            ..Self::base(AttackMethod::Integrated, iterations)
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitKind) -> Self {
        self.init = init;
        self
    }

    /// Blocks that move under this configuration, `(flow, affine)`.
    pub fn spatial_blocks(&self) -> (bool, bool) {
        match self.method {
            AttackMethod::Pgd => (false, false),
            AttackMethod::Flow => (true, false),
            AttackMethod::Rt => (false, true),
            AttackMethod::Integrated => (self.free_blocks.flow, self.free_blocks.affine),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::input("attack needs at least one iteration"));
        }
        let finite_nonneg = |v: f32| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.eps) || !finite_nonneg(self.step) {
            return Err(Error::input(format!(
                "PGD eps/step must be finite and non-negative (eps {}, step {})",
                self.eps, self.step
            )));
        }
        self.spatial.validate()
    }
}

/// Final perturbation parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackParams {
    Pixel(Array4<f32>),
    Spatial(SpatialParams),
}

/// Per-example worst case seen along the trajectory: the first
/// misclassified iterate if there is one, otherwise the highest-loss iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct BestIterate {
    pub adversarial: Array4<f32>,
    pub loss: Vec<f32>,
    pub success: Vec<bool>,
    pub iteration: Vec<usize>,
}

/// Statistics for iterates `0..=iterations` (index 0 is the starting point).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackTrace {
    pub mean_loss: Vec<f32>,
    /// Examples classified correctly at iterate `t`.
    pub correct_final: Vec<usize>,
    /// Examples classified correctly at every iterate up to `t`.
    pub correct_best: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Array4<f32>,
    pub params: AttackParams,
    pub success: Vec<bool>,
    pub final_loss: Vec<f32>,
    pub best: BestIterate,
    pub trace: AttackTrace,
}

impl AttackResult {
    /// Final-iterate accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        percent(self.success.iter().filter(|s| !**s).count(), self.success.len())
    }

    /// Best-iterate accuracy in percent.
    pub fn best_accuracy(&self) -> f64 {
        percent(
            self.best.success.iter().filter(|s| !**s).count(),
            self.best.success.len(),
        )
    }
}

fn percent(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

struct Bookkeeper {
    best_images: Array4<f32>,
    best_loss: Vec<f32>,
    best_iter: Vec<usize>,
    broken: Vec<bool>,
    trace: AttackTrace,
}

impl Bookkeeper {
    fn new(images: &Array4<f32>) -> Self {
        let b = images.dim().0;
        Bookkeeper {
            best_images: images.clone(),
            best_loss: vec![f32::NEG_INFINITY; b],
            best_iter: vec![0; b],
            broken: vec![false; b],
            trace: AttackTrace::default(),
        }
    }

    fn record(&mut self, t: usize, images: &Array4<f32>, losses: &[f32], logits: &Array2<f32>, labels: &[usize]) {
        let preds = argmax_rows(logits);
        let mut correct = 0;
        for (b, (&loss, (&pred, &y))) in losses.iter().zip(preds.iter().zip(labels)).enumerate() {
            let wrong = pred != y;
            if !wrong {
                correct += 1;
            }
            if self.broken[b] {
                continue;
            }
            if wrong || loss > self.best_loss[b] {
                self.best_loss[b] = loss;
                self.best_iter[b] = t;
                self.best_images
                    .index_axis_mut(ndarray::Axis(0), b)
                    .assign(&images.index_axis(ndarray::Axis(0), b));
                self.broken[b] = wrong;
            }
        }
        let n = losses.len().max(1) as f32;
        self.trace.mean_loss.push(losses.iter().sum::<f32>() / n);
        self.trace.correct_final.push(correct);
        self.trace
            .correct_best
            .push(self.broken.iter().filter(|b| !**b).count());
    }

    fn finish(
        self,
        adversarial: Array4<f32>,
        params: AttackParams,
        losses: Vec<f32>,
        logits: &Array2<f32>,
        labels: &[usize],
    ) -> AttackResult {
        let success = argmax_rows(logits).iter().zip(labels).map(|(p, y)| p != y).collect();
        AttackResult {
            adversarial,
            params,
            success,
            final_loss: losses,
            best: BestIterate {
                adversarial: self.best_images,
                loss: self.best_loss,
                success: self.broken,
                iteration: self.best_iter,
            },
            trace: self.trace,
        }
    }
}

fn expect_method(cfg: &AttackConfig, method: AttackMethod) -> Result<()> {
    if cfg.method != method {
        return Err(Error::usage(format!(
            "{} attack called with a `{}` configuration",
            method.name(),
            cfg.method.name()
        )));
    }
    cfg.validate()
}

/// L-infinity PGD on pixels: step along `sign(grad)`, project onto the
/// `eps` box around the clean image, then onto `[0, 1]`.
pub fn pgd_attack(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Pgd)?;
    let clean = &batch.images;
    let (eps, step) = (cfg.eps, cfg.step);
    let mut x = clean.clone();
    if cfg.init == InitKind::UniformRandomInBall && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        x.mapv_inplace(|v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0));
    }
    let mut book = Bookkeeper::new(&x);
    for t in 0..cfg.iterations {
        let eval = model.input_gradient(cfg.loss, &x, &batch.labels)?;
        book.record(t, &x, eval.losses.as_slice().unwrap(), &eval.logits, &batch.labels);
        Zip::from(&mut x).and(clean).and(&eval.grad).for_each(|xv, &x0, &g| {
            let stepped = *xv + step * sign(g);
            *xv = stepped.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        });
    }
    let logits = model.forward(&x)?;
    let losses = crate::model::loss_ce(&logits.view(), &batch.labels)
        .map(|l| l.to_vec())
        .and_then(|ce| match cfg.loss {
            LossKind::Ce => Ok(ce),
            LossKind::Smoothmax => crate::model::loss_smoothmax(&logits.view(), &batch.labels).map(|l| l.to_vec()),
        })?;
    book.record(cfg.iterations, &x, &losses, &logits, &batch.labels);
    let delta = &x - clean;
    Ok(book.finish(x, AttackParams::Pixel(delta), losses, &logits, &batch.labels))
}

fn clip_box(v: f32, eps: f32) -> f32 {
    v.clamp(-eps, eps)
}

fn spatial_loop(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let clean = &batch.images;
    let (b, _, h, w) = clean.dim();
    let (move_flow, move_affine) = cfg.spatial_blocks();
    let budget = cfg.spatial;
    let mut params = SpatialParams::zeros(b, h, w, budget);
    if cfg.init == InitKind::UniformRandomInBall {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        if move_flow && budget.eps_flow > 0.0 {
            let e = budget.eps_flow;
            params.flow.0.mapv_inplace(|_| rng.random_range(-e..=e));
        }
        if move_affine && budget.eps_affine > 0.0 {
            let e = budget.eps_affine;
            params.affine.0.mapv_inplace(|_| rng.random_range(-e..=e));
        }
    }
    let base = base_grid::<f32>(b, h, w)?;
    let warp = |p: &SpatialParams| -> Result<Array4<f32>> {
        bilinear_sample(clean, &integrated_grid_parts(&p.flow, &p.affine, &base)?)
    };
    let mut x = warp(&params)?;
    let mut book = Bookkeeper::new(&x);
    for t in 0..cfg.iterations {
        let eval = model.spatial_gradient(cfg.loss, clean, &batch.labels, &params.flow, &params.affine)?;
        book.record(t, &x, eval.losses.as_slice().unwrap(), &eval.logits, &batch.labels);
        let (g_flow, g_affine): (FlowField<f32>, AffineParams<f32>) = eval.grad;
        if move_flow {
            Zip::from(&mut params.flow.0).and(&g_flow.0).for_each(|p, &g| {
                *p = clip_box(*p + budget.step_flow * sign(g), budget.eps_flow);
            });
        }
        if move_affine {
            Zip::from(&mut params.affine.0).and(&g_affine.0).for_each(|p, &g| {
                *p = clip_box(*p + budget.step_affine * sign(g), budget.eps_affine);
            });
        }
        x = warp(&params)?;
    }
    let logits = model.forward(&x)?;
    let losses = match cfg.loss {
        LossKind::Ce => crate::model::loss_ce(&logits.view(), &batch.labels)?,
        LossKind::Smoothmax => crate::model::loss_smoothmax(&logits.view(), &batch.labels)?,
    }
    .to_vec();
    book.record(cfg.iterations, &x, &losses, &logits, &batch.labels);
    Ok(book.finish(x, AttackParams::Spatial(params), losses, &logits, &batch.labels))
}

/// Flow-field attack: the affine block stays at zero.
pub fn flow_attack(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Flow)?;
    spatial_loop(model, batch, cfg)
}

/// Generic affine (rotation-translation) attack: the flow block stays at zero.
pub fn rt_attack(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Rt)?;
    spatial_loop(model, batch, cfg)
}

/// Joint flow + affine attack. The sign is taken elementwise over the
/// stacked parameter vector and each block then uses its own step and box.
pub fn integrated_spatial_attack(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Integrated)?;
    spatial_loop(model, batch, cfg)
}

pub fn run_attack(model: &ModelHandle, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.method {
        AttackMethod::Pgd => pgd_attack(model, batch, cfg),
        AttackMethod::Flow => flow_attack(model, batch, cfg),
        AttackMethod::Rt => rt_attack(model, batch, cfg),
        AttackMethod::Integrated => integrated_spatial_attack(model, batch, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelSpec};
    use rand::Rng;

    fn setup(seed: u64) -> (ModelHandle, Batch) {
        let spec = ModelSpec::new(
            Architecture::SimpleCnn {
                conv_channels: [4, 6],
                hidden: 16,
            },
            [1, 20, 20],
            4,
        );
        let model = ModelHandle::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let images = Array4::from_shape_fn((3, 1, 20, 20), |_| rng.random_range(0.0..1.0));
        let batch = Batch::new(images, vec![0, 1, 3], 4).unwrap();
        (model, batch)
    }

    #[test]
    fn single_saturating_pgd_step() {
        let (model, batch) = setup(1);
        let cfg = AttackConfig::pgd(1, 0.1, 0.5);
        let res = pgd_attack(&model, &batch, &cfg).unwrap();
        let g = model
            .input_gradient(LossKind::Ce, &batch.images, &batch.labels)
            .unwrap()
            .grad;
        let expected = Zip::from(&batch.images)
            .and(&g)
            .map_collect(|&x, &g| (x + 0.1 * sign(g)).clamp(0.0, 1.0));
        assert_eq!(res.adversarial, expected);
    }

    #[test]
    fn pgd_respects_box_and_range() {
        let (model, batch) = setup(2);
        let cfg = AttackConfig::pgd(7, 0.05, 0.02).with_init(InitKind::UniformRandomInBall);
        let res = pgd_attack(&model, &batch, &cfg).unwrap();
        for (&a, &x) in res.adversarial.iter().zip(batch.images.iter()) {
            assert!((a - x).abs() <= 0.05 + 1e-6);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn zero_radius_is_identity() {
        let (model, batch) = setup(3);
        let res = pgd_attack(&model, &batch, &AttackConfig::pgd(3, 0.0, 0.01)).unwrap();
        assert_eq!(res.adversarial, batch.images);
        assert_eq!(res.trace.mean_loss[0], res.trace.mean_loss[3]);

        let res = rt_attack(&model, &batch, &AttackConfig::rt(3, 0.0, 0.1)).unwrap();
        let err = (&res.adversarial - &batch.images)
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6);

        let res = flow_attack(&model, &batch, &AttackConfig::flow(2, 0.3, 0.0)).unwrap();
        let err = (&res.adversarial - &batch.images)
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6);
    }

    #[test]
    fn spatial_params_stay_in_their_boxes() {
        let (model, batch) = setup(4);
        let budget = SpatialBudget {
            eps_flow: 0.05,
            eps_affine: 0.2,
            step_flow: 0.03,
            step_affine: 0.15,
        };
        for iters in 1..5 {
            let cfg = AttackConfig::integrated(iters, budget).with_init(InitKind::UniformRandomInBall);
            let res = integrated_spatial_attack(&model, &batch, &cfg).unwrap();
            let AttackParams::Spatial(p) = res.params else {
                panic!("spatial attack returned pixel params")
            };
            let (f, a) = p.max_abs();
            assert!(f <= 0.05 && a <= 0.2);
        }
    }

    #[test]
    fn frozen_blocks_reduce_to_single_attacks() {
        let (model, batch) = setup(5);
        let budget = SpatialBudget {
            eps_flow: 0.1,
            eps_affine: 0.3,
            step_flow: 0.02,
            step_affine: 0.1,
        };
        for init in [InitKind::Zero, InitKind::UniformRandomInBall] {
            let mut flow_cfg = AttackConfig::flow(4, budget.eps_flow, budget.step_flow).with_init(init);
            flow_cfg.spatial = budget;
            let mut joint = AttackConfig::integrated(4, budget).with_init(init);
            joint.free_blocks = FreeBlocks {
                flow: true,
                affine: false,
            };
            assert_eq!(
                flow_attack(&model, &batch, &flow_cfg).unwrap(),
                integrated_spatial_attack(&model, &batch, &joint).unwrap()
            );

            let mut rt_cfg = AttackConfig::rt(4, budget.eps_affine, budget.step_affine).with_init(init);
            rt_cfg.spatial = budget;
            joint.free_blocks = FreeBlocks {
                flow: false,
                affine: true,
            };
            assert_eq!(
                rt_attack(&model, &batch, &rt_cfg).unwrap(),
                integrated_spatial_attack(&model, &batch, &joint).unwrap()
            );
        }
    }

    #[test]
    fn best_iterate_accuracy_never_increases() {
        let (model, batch) = setup(6);
        let res = pgd_attack(&model, &batch, &AttackConfig::pgd(10, 0.3, 0.05)).unwrap();
        assert_eq!(res.trace.correct_best.len(), 11);
        assert!(res.trace.correct_best.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.best_accuracy() <= res.accuracy() + 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let (model, batch) = setup(7);
        let cfg = AttackConfig::pgd(4, 0.1, 0.03)
            .with_init(InitKind::UniformRandomInBall)
            .with_seed(9);
        assert_eq!(
            pgd_attack(&model, &batch, &cfg).unwrap(),
            pgd_attack(&model, &batch, &cfg).unwrap()
        );
    }

    #[test]
    fn method_mismatch_is_a_usage_error() {
        let (model, batch) = setup(8);
        let err = flow_attack(&model, &batch, &AttackConfig::pgd(1, 0.1, 0.1)).unwrap_err();
        assert!(err.is_usage());
        assert!(pgd_attack(&model, &batch, &AttackConfig::pgd(0, 0.1, 0.1)).is_err());
    }

    #[test]
    fn one_pixel_flow_reproduces_a_shift() {
        // A constant flow of one pixel pitch equals an integer translation.
        let (model, batch) = setup(9);
        let (b, _, h, w) = batch.images.dim();
        let base = base_grid::<f32>(b, h, w).unwrap();
        let mut flow = FlowField::<f32>::zeros(b, h, w);
        flow.0.index_axis_mut(ndarray::Axis(3), 0).fill(2.0 / (w - 1) as f32);
        let shifted = bilinear_sample(
            &batch.images,
            &integrated_grid_parts(&flow, &AffineParams::zeros(b), &base).unwrap(),
        )
        .unwrap();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w - 1 {
                    assert!((shifted[[bi, 0, i, j]] - batch.images[[bi, 0, i, j + 1]]).abs() <= 1e-6);
                }
            }
        }
        let _ = model;
    }
}

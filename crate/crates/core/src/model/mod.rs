//! Differentiable classifier backend.
//!
//! A [`ModelHandle`] owns a flat `f32` parameter buffer and the layer graph
//! for one of the supported architectures. Forward and backward passes are
//! generic over the element type, so the same model can be evaluated at
//! `f64` when checking gradients.

mod layers;
pub mod loss;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, ArrayD, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_blob, write_atomic, write_f32_blob};
use crate::real::Real;
use crate::spatial::{
    base_grid, bilinear_sample, bilinear_sample_backward, grid_grad_to_params, integrated_grid_parts, AffineParams,
    FlowField, SpatialParams,
};

use layers::{Cache, Conv2d, GroupNorm, Init, Layer, Linear, PreActBlock, SlotAllocator};
pub use loss::{ce_smoothmax_ratio, loss_and_grad, loss_ce, loss_smoothmax, LossKind};
pub use optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Architecture {
    /// Four 3x3 convolutions with two max-pools, then three dense layers.
    SimpleCnn { conv_channels: [usize; 2], hidden: usize },
    /// Pre-activation ResNet-18 with group normalization.
    PreactResnet18 { base_width: usize, groups: usize },
    /// Multinomial logistic regression; a reference model for checks.
    Linear,
}

impl Architecture {
    /// Widths of the MNIST network used by TRADES-style setups.
    pub fn simple_cnn() -> Self {
        Architecture::SimpleCnn {
            conv_channels: [32, 64],
            hidden: 200,
        }
    }

    pub fn preact_resnet18() -> Self {
        Architecture::PreactResnet18 {
            base_width: 64,
            groups: 32,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::SimpleCnn { .. } => "simple-cnn",
            Architecture::PreactResnet18 { .. } => "preact-resnet18",
            Architecture::Linear => "linear",
        }
    }
}

/// Per-channel affine input normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `(C, H, W)`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture,
            input_shape,
            num_classes,
            normalization: Normalization::identity(input_shape[0]),
        }
    }
}

/// A labelled image batch with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("batch contains non-finite pixel values"));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {y} outside [0, {num_classes})")));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_images(&self, images: Array4<f32>) -> Batch {
        Batch {
            images,
            labels: self.labels.clone(),
        }
    }
}

/// Activations recorded by a forward pass.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Input,
    SpatialParams,
    ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Input(Array4<f32>),
    Spatial {
        flow: FlowField<f32>,
        affine: AffineParams<f32>,
    },
    Params(Vec<f32>),
}

/// Losses, logits and the requested gradient from one backward pass.
#[derive(Debug, Clone)]
pub struct Evaluated<T, G> {
    pub losses: Array1<T>,
    pub logits: Array2<T>,
    pub grad: G,
}

#[derive(Debug, Clone)]
pub struct ModelHandle {
    spec: ModelSpec,
    params: Vec<f32>,
    layers: Vec<Layer>,
}

fn build_layers(spec: &ModelSpec) -> Result<(Vec<Layer>, SlotAllocator)> {
    let [c, h, w] = spec.input_shape;
    let k = spec.num_classes;
    if k == 0 || c == 0 {
        return Err(Error::input("model needs at least one class and one channel"));
    }
    if spec.normalization.mean.len() != c || spec.normalization.std.len() != c {
        return Err(Error::input("normalization must list one mean/std per channel"));
    }
    if spec.normalization.std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::input("normalization std must be positive"));
    }
    let mut alloc = SlotAllocator::default();
    let mut layers = Vec::new();
    match &spec.architecture {
        Architecture::SimpleCnn {
            conv_channels: [c1, c2],
            hidden,
        } => {
            let side = |v: usize| -> Option<usize> { ((v.checked_sub(4)? / 2).checked_sub(4)?).checked_div(2) };
            let (fh, fw) = match (side(h), side(w)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => {
                    return Err(Error::input(format!(
                        "simple-cnn needs inputs of at least 16x16, got {h}x{w}"
                    )))
                }
            };
            for (i, o) in [(c, *c1), (*c1, *c1)] {
                layers.push(Layer::Conv(Conv2d::new(&mut alloc, i, o, 3, 1, 0, true)));
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool2);
            for (i, o) in [(*c1, *c2), (*c2, *c2)] {
                layers.push(Layer::Conv(Conv2d::new(&mut alloc, i, o, 3, 1, 0, true)));
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(&mut alloc, c2 * fh * fw, *hidden)));
            layers.push(Layer::Relu);
            layers.push(Layer::Linear(Linear::new(&mut alloc, *hidden, *hidden)));
            layers.push(Layer::Relu);
            layers.push(Layer::Linear(Linear::new(&mut alloc, *hidden, k)));
        }
        Architecture::PreactResnet18 { base_width, groups } => {
            let bw = *base_width;
            if bw == 0 || *groups == 0 || bw % groups.min(&bw) != 0 {
                return Err(Error::input("resnet width must be divisible by the group count"));
            }
            if h < 8 || w < 8 {
                return Err(Error::input("preact-resnet18 needs inputs of at least 8x8"));
            }
            layers.push(Layer::Conv(Conv2d::new(&mut alloc, c, bw, 3, 1, 1, false)));
            let mut in_c = bw;
            for (stage, width) in [bw, 2 * bw, 4 * bw, 8 * bw].into_iter().enumerate() {
                for block in 0..2 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    layers.push(Layer::PreAct(Box::new(PreActBlock::new(
                        &mut alloc, in_c, width, stride, *groups,
                    ))));
                    in_c = width;
                }
            }
            layers.push(Layer::GroupNorm(GroupNorm::new(&mut alloc, in_c, (*groups).min(in_c))));
            layers.push(Layer::Relu);
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Linear(Linear::new(&mut alloc, in_c, k)));
        }
        Architecture::Linear => {
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(&mut alloc, c * h * w, k)));
        }
    }
    Ok((layers, alloc))
}

impl ModelHandle {
    /// Builds a freshly initialized model: He-normal weights, zero biases,
    /// unit group-norm scales.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (layers, alloc) = build_layers(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; alloc.total()];
        for (slot, init) in &alloc.slots {
            let dst = &mut params[slot.range()];
            match *init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f32, std).expect("valid std");
                    dst.iter_mut().for_each(|p| *p = dist.sample(&mut rng));
                }
                Init::Constant(v) => dst.fill(v),
            }
        }
        Ok(ModelHandle { spec, params, layers })
    }

    /// Reassembles a model from a spec and an existing parameter buffer.
    pub fn from_parts(spec: ModelSpec, params: Vec<f32>) -> Result<Self> {
        let (layers, alloc) = build_layers(&spec)?;
        if params.len() != alloc.total() {
            return Err(Error::input(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                alloc.total()
            )));
        }
        Ok(ModelHandle { spec, params, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter range of the final dense layer (weights then bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        match self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        }) {
            Some(lin) => lin.weight.offset..lin.bias.offset + lin.bias.len,
            None => 0..0,
        }
    }

    fn check_input<T: Real>(&self, images: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::input(format!(
                "input shape {:?} does not match model input {:?}",
                [c, h, w],
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward_tape<T: Real>(&self, images: &Array4<T>) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(images)?;
        let params = T::from_f32_slice(&self.params);
        let mut x = images.clone();
        let norm = &self.spec.normalization;
        for (ci, mut plane) in x.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let mean = T::lit(norm.mean[ci] as f64);
            let std = T::lit(norm.std[ci] as f64);
            plane.mapv_inplace(|v| (v - mean) / std);
        }
        let mut act: ArrayD<T> = x.into_dyn();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&params, act);
            act = out;
            caches.push(cache);
        }
        let logits = act
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::State(format!("network did not end in logits: {e}")))?;
        Ok((logits, Tape { caches }))
    }

    pub fn forward<T: Real>(&self, images: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.forward_tape(images)?.0)
    }

    /// Back-propagates `grad_logits` through a recorded pass. Returns the
    /// input gradient; parameter gradients are added into `param_grad`.
    pub fn backward<T: Real>(
        &self,
        tape: &Tape<T>,
        grad_logits: Array2<T>,
        mut param_grad: Option<&mut [T]>,
    ) -> Array4<T> {
        let params = T::from_f32_slice(&self.params);
        let mut g: ArrayD<T> = grad_logits.into_dyn();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            g = layer.backward(&params, cache, g, param_grad.as_deref_mut());
        }
        let mut g = g.into_dimensionality::<Ix4>().expect("input gradient is 4-d");
        let norm = &self.spec.normalization;
        for (ci, mut plane) in g.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let std = T::lit(norm.std[ci] as f64);
            plane.mapv_inplace(|v| v / std);
        }
        g
    }

    /// Per-example losses and the gradient of `sum_b loss_b` with respect to
    /// the input images (each row gets its own example's gradient).
    pub fn input_gradient<T: Real>(
        &self,
        kind: LossKind,
        images: &Array4<T>,
        labels: &[usize],
    ) -> Result<Evaluated<T, Array4<T>>> {
        let (logits, tape) = self.forward_tape(images)?;
        let (losses, dlogits) = loss_and_grad(kind, &logits.view(), labels)?;
        let grad = self.backward(&tape, dlogits, None);
        Ok(Evaluated { losses, logits, grad })
    }

    /// Per-example losses of the warped batch and the gradient of
    /// `sum_b loss_b` with respect to the flow and affine blocks.
    pub fn spatial_gradient<T: Real>(
        &self,
        kind: LossKind,
        images: &Array4<T>,
        labels: &[usize],
        flow: &FlowField<T>,
        affine: &AffineParams<T>,
    ) -> Result<Evaluated<T, (FlowField<T>, AffineParams<T>)>> {
        let (b, _, h, w) = images.dim();
        let base = base_grid::<T>(b, h, w)?;
        let grid = integrated_grid_parts(flow, affine, &base)?;
        let warped = bilinear_sample(images, &grid)?;
        let Evaluated {
            losses,
            logits,
            grad: grad_warped,
        } = self.input_gradient(kind, &warped, labels)?;
        let (_, grad_grid) = bilinear_sample_backward(images, &grid, &grad_warped, false)?;
        let grad = grid_grad_to_params(&grad_grid, &base);
        Ok(Evaluated { losses, logits, grad })
    }

    /// Gradient of `sum_b weights_b * loss_b` with respect to the parameters.
    pub fn param_gradient<T: Real>(
        &self,
        kind: LossKind,
        images: &Array4<T>,
        labels: &[usize],
        weights: &[T],
    ) -> Result<Evaluated<T, Vec<T>>> {
        if weights.len() != labels.len() {
            return Err(Error::input("one weight per example is required"));
        }
        let (logits, tape) = self.forward_tape(images)?;
        let (losses, mut dlogits) = loss_and_grad(kind, &logits.view(), labels)?;
        for (mut row, &wgt) in dlogits.outer_iter_mut().zip(weights) {
            row.mapv_inplace(|v| v * wgt);
        }
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward(&tape, dlogits, Some(&mut grad));
        Ok(Evaluated { losses, logits, grad })
    }

    /// Applies one optimizer step. A non-finite loss or gradient aborts
    /// without writing any parameter.
    pub fn train_step(&mut self, opt: &mut Sgd, loss: f32, grad: &[f32], lr: f32) -> Result<()> {
        opt.step(&mut self.params, loss, grad, lr)
    }

    pub fn predict(&self, images: &Array4<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(images)?))
    }

    /// Writes the raw parameter blob to `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_f32_blob(path, &self.params)?;
        let sidecar = CheckpointSidecar {
            architecture_id: self.spec.architecture.id().to_string(),
            num_classes: self.spec.num_classes,
            normalization: self.spec.normalization.clone(),
            training_config_hash: config_hash.to_string(),
            spec: self.spec.clone(),
            num_params: self.params.len(),
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointSidecar)> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: CheckpointSidecar = serde_json::from_str(&text)?;
        if sidecar.architecture_id != sidecar.spec.architecture.id() {
            return Err(Error::Format(format!(
                "sidecar architecture `{}` disagrees with its spec",
                sidecar.architecture_id
            )));
        }
        let params = read_f32_blob(path)?;
        let model = ModelHandle::from_parts(sidecar.spec.clone(), params)?;
        Ok((model, sidecar))
    }
}

/// Losses of `images` warped by the given spatial parameters.
pub fn spatial_losses<T: Real>(
    model: &ModelHandle,
    kind: LossKind,
    images: &Array4<T>,
    labels: &[usize],
    flow: &FlowField<T>,
    affine: &AffineParams<T>,
) -> Result<Array1<T>> {
    let (b, _, h, w) = images.dim();
    let base = base_grid::<T>(b, h, w)?;
    let grid = integrated_grid_parts(flow, affine, &base)?;
    let warped = bilinear_sample(images, &grid)?;
    let logits = model.forward(&warped)?;
    match kind {
        LossKind::Ce => loss_ce(&logits.view(), labels),
        LossKind::Smoothmax => loss_smoothmax(&logits.view(), labels),
    }
}

pub fn argmax_rows<T: Real>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub architecture_id: String,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub training_config_hash: String,
    pub spec: ModelSpec,
    pub num_params: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Gradient of the batch loss with respect to the chosen target.
///
/// Input and spatial gradients differentiate `sum_b loss_b`, so each
/// example receives the gradient of its own loss. Parameter gradients
/// differentiate the batch mean.
pub fn grad_wrt(
    model: &ModelHandle,
    kind: LossKind,
    batch: &Batch,
    wrt: Wrt,
    spatial: Option<&SpatialParams>,
) -> Result<Gradient> {
    match wrt {
        Wrt::Input => Ok(Gradient::Input(
            model.input_gradient(kind, &batch.images, &batch.labels)?.grad,
        )),
        Wrt::SpatialParams => {
            let sp = spatial
                .ok_or_else(|| Error::usage("spatial-parameter gradient requested without spatial parameters"))?;
            let (flow, affine) = model
                .spatial_gradient(kind, &batch.images, &batch.labels, &sp.flow, &sp.affine)?
                .grad;
            Ok(Gradient::Spatial { flow, affine })
        }
        Wrt::ModelParams => {
            let n = batch.len().max(1) as f32;
            let weights = vec![1.0 / n; batch.len()];
            Ok(Gradient::Params(
                model.param_gradient(kind, &batch.images, &batch.labels, &weights)?.grad,
            ))
        }
    }
}

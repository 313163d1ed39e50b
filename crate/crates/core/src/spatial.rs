//! Differentiable sampling-grid geometry.
//!
//! Coordinates are normalized so that `-1` and `+1` are the centers of the
//! first and last pixel along each axis; `u` runs horizontally (columns) and
//! `v` vertically (rows). Warping is backward: output pixel `(i, j)` reads the
//! input at `grid[b, i, j]`. Samples falling outside the image read zeros.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Sampling coordinates, shape `(B, H, W, 2)` with `(u, v)` in the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T = f32>(pub Array4<T>);

/// Per-example increments on the identity affine map, shape `(B, 6)`,
/// laid out row-major as `[w11, w12, w13, w21, w22, w23]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T = f32>(pub Array2<T>);

/// Per-pixel grid displacements `(du, dv)`, shape `(B, H, W, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T = f32>(pub Array4<T>);

impl<T: Real> SamplingGrid<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (b, h, w, _) = self.0.dim();
        (b, h, w)
    }
}

impl<T: Real> AffineParams<T> {
    pub fn zeros(batch: usize) -> Self {
        AffineParams(Array2::zeros((batch, 6)))
    }

    /// Affine increment that rotates by `theta` radians and translates by
    /// `(du, dv)` normalized units.
    pub fn rotation_translation(batch: usize, theta: f64, du: f64, dv: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let row = [c - 1.0, -s, du, s, c - 1.0, dv].map(T::lit);
        AffineParams(Array2::from_shape_fn((batch, 6), |(_, k)| row[k]))
    }
}

impl<T: Real> FlowField<T> {
    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        FlowField(Array4::zeros((batch, height, width, 2)))
    }
}

/// Step sizes and box bounds for the two spatial parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBudget {
    pub eps_flow: f32,
    pub eps_affine: f32,
    pub step_flow: f32,
    pub step_affine: f32,
}

impl SpatialBudget {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eps_flow, self.eps_affine, self.step_flow, self.step_affine];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input(format!(
                "spatial budget must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The joint spatial perturbation `[flow, affine]` with its budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams {
    pub flow: FlowField<f32>,
    pub affine: AffineParams<f32>,
    pub budget: SpatialBudget,
}

impl SpatialParams {
    pub fn zeros(batch: usize, height: usize, width: usize, budget: SpatialBudget) -> Self {
        SpatialParams {
            flow: FlowField::zeros(batch, height, width),
            affine: AffineParams::zeros(batch),
            budget,
        }
    }

    pub fn batch(&self) -> usize {
        self.affine.0.nrows()
    }

    /// Largest `|entry|` of each block, in `(flow, affine)` order.
    pub fn max_abs(&self) -> (f32, f32) {
        let m = |a: &mut dyn Iterator<Item = &f32>| a.fold(0.0f32, |acc, v| acc.max(v.abs()));
        (m(&mut self.flow.0.iter()), m(&mut self.affine.0.iter()))
    }
}

pub fn base_grid<T: Real>(batch: usize, height: usize, width: usize) -> Result<SamplingGrid<T>> {
    if height < 2 || width < 2 {
        return Err(Error::input(format!(
            "sampling grid needs height and width >= 2, got {height}x{width}"
        )));
    }
    let two = T::lit(2.0);
    let hm1 = T::from_usize(height - 1).unwrap();
    let wm1 = T::from_usize(width - 1).unwrap();
    let grid = Array4::from_shape_fn((batch, height, width, 2), |(_, i, j, k)| {
        if k == 0 {
            -T::one() + two * T::from_usize(j).unwrap() / wm1
        } else {
            -T::one() + two * T::from_usize(i).unwrap() / hm1
        }
    });
    Ok(SamplingGrid(grid))
}

pub fn affine_grid<T: Real>(affine: &AffineParams<T>, base: &SamplingGrid<T>) -> Result<SamplingGrid<T>> {
    let (b, h, w) = base.dims();
    if affine.0.dim() != (b, 6) {
        return Err(Error::input(format!(
            "affine params shape {:?} does not match batch {b}",
            affine.0.dim()
        )));
    }
    let mut out = Array4::<T>::zeros((b, h, w, 2));
    for bi in 0..b {
        let a = affine.0.row(bi);
        let (a11, a12, a13) = (T::one() + a[0], a[1], a[2]);
        let (a21, a22, a23) = (a[3], T::one() + a[4], a[5]);
        for i in 0..h {
            for j in 0..w {
                let u = base.0[[bi, i, j, 0]];
                let v = base.0[[bi, i, j, 1]];
                out[[bi, i, j, 0]] = a11 * u + a12 * v + a13;
                out[[bi, i, j, 1]] = a21 * u + a22 * v + a23;
            }
        }
    }
    Ok(SamplingGrid(out))
}

/// Affine map of the base grid plus the per-pixel flow.
pub fn integrated_grid_parts<T: Real>(
    flow: &FlowField<T>,
    affine: &AffineParams<T>,
    base: &SamplingGrid<T>,
) -> Result<SamplingGrid<T>> {
    if flow.0.dim() != base.0.dim() {
        return Err(Error::input(format!(
            "flow shape {:?} does not match grid shape {:?}",
            flow.0.dim(),
            base.0.dim()
        )));
    }
    let mut grid = affine_grid(affine, base)?;
    grid.0 += &flow.0;
    Ok(grid)
}

pub fn integrated_grid(spatial: &SpatialParams, base: &SamplingGrid<f32>) -> Result<SamplingGrid<f32>> {
    integrated_grid_parts(&spatial.flow, &spatial.affine, base)
}

struct Taps<T> {
    x0: isize,
    y0: isize,
    wx: T,
    wy: T,
}

fn taps<T: Real>(u: T, v: T, h: usize, w: usize) -> Taps<T> {
    let half = T::lit(0.5);
    let px = (u + T::one()) * half * T::from_usize(w - 1).unwrap();
    let py = (v + T::one()) * half * T::from_usize(h - 1).unwrap();
    let fx = px.floor();
    let fy = py.floor();
    Taps {
        x0: fx.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy.to_isize().unwrap_or(isize::MIN / 2),
        wx: px - fx,
        wy: py - fy,
    }
}

fn check_sample_shapes<T: Real>(image: &Array4<T>, grid: &SamplingGrid<T>) -> Result<()> {
    let (b, _, h, w) = image.dim();
    let (gb, gh, gw) = grid.dims();
    if (b, h, w) != (gb, gh, gw) {
        return Err(Error::input(format!(
            "image {:?} and grid {:?} disagree",
            image.dim(),
            grid.0.dim()
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::input("bilinear sampling needs images of at least 2x2"));
    }
    if grid.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("sampling grid contains non-finite coordinates"));
    }
    Ok(())
}

#[inline]
fn pixel<T: Real>(image: &Array4<T>, b: usize, c: usize, y: isize, x: isize, h: usize, w: usize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        image[[b, c, y as usize, x as usize]]
    } else {
        T::zero()
    }
}

/// Bilinear backward warp of `image` (B, C, H, W) through `grid`.
pub fn bilinear_sample<T: Real>(image: &Array4<T>, grid: &SamplingGrid<T>) -> Result<Array4<T>> {
    check_sample_shapes(image, grid)?;
    let (b, c, h, w) = image.dim();
    let mut out = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let t = taps(grid.0[[bi, i, j, 0]], grid.0[[bi, i, j, 1]], h, w);
                let (wx1, wy1) = (t.wx, t.wy);
                let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
                for ci in 0..c {
                    let p00 = pixel(image, bi, ci, t.y0, t.x0, h, w);
                    let p01 = pixel(image, bi, ci, t.y0, t.x0 + 1, h, w);
                    let p10 = pixel(image, bi, ci, t.y0 + 1, t.x0, h, w);
                    let p11 = pixel(image, bi, ci, t.y0 + 1, t.x0 + 1, h, w);
                    out[[bi, ci, i, j]] = wy0 * (wx0 * p00 + wx1 * p01) + wy1 * (wx0 * p10 + wx1 * p11);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * bilinear_sample(image, grid))` with respect
/// to the image and to the grid coordinates.
pub fn bilinear_sample_backward<T: Real>(
    image: &Array4<T>,
    grid: &SamplingGrid<T>,
    grad_out: &Array4<T>,
    want_image_grad: bool,
) -> Result<(Option<Array4<T>>, Array4<T>)> {
    check_sample_shapes(image, grid)?;
    if grad_out.dim() != image.dim() {
        return Err(Error::input("upstream gradient shape does not match the image"));
    }
    let (b, c, h, w) = image.dim();
    let mut grad_image = want_image_grad.then(|| Array4::<T>::zeros((b, c, h, w)));
    let mut grad_grid = Array4::<T>::zeros((b, h, w, 2));
    let sx = T::lit(0.5) * T::from_usize(w - 1).unwrap();
    let sy = T::lit(0.5) * T::from_usize(h - 1).unwrap();
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let t = taps(grid.0[[bi, i, j, 0]], grid.0[[bi, i, j, 1]], h, w);
                let (wx1, wy1) = (t.wx, t.wy);
                let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
                let mut gu = T::zero();
                let mut gv = T::zero();
                for ci in 0..c {
                    let g = grad_out[[bi, ci, i, j]];
                    let p00 = pixel(image, bi, ci, t.y0, t.x0, h, w);
                    let p01 = pixel(image, bi, ci, t.y0, t.x0 + 1, h, w);
                    let p10 = pixel(image, bi, ci, t.y0 + 1, t.x0, h, w);
                    let p11 = pixel(image, bi, ci, t.y0 + 1, t.x0 + 1, h, w);
                    gu += g * (wy0 * (p01 - p00) + wy1 * (p11 - p10));
                    gv += g * (wx0 * (p10 - p00) + wx1 * (p11 - p01));
                    if let Some(gi) = grad_image.as_mut() {
                        for (dy, dx, wgt) in [
                            (0, 0, wy0 * wx0),
                            (0, 1, wy0 * wx1),
                            (1, 0, wy1 * wx0),
                            (1, 1, wy1 * wx1),
                        ] {
                            let (y, x) = (t.y0 + dy, t.x0 + dx);
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                gi[[bi, ci, y as usize, x as usize]] += g * wgt;
                            }
                        }
                    }
                }
                grad_grid[[bi, i, j, 0]] = gu * sx;
                grad_grid[[bi, i, j, 1]] = gv * sy;
            }
        }
    }
    Ok((grad_image, grad_grid))
}

/// Pulls a grid gradient back onto the flow and affine blocks.
///
/// The flow enters the grid additively, so its gradient is the grid gradient
/// itself. Each affine row contracts the grid gradient against `[u, v, 1]`.
pub fn grid_grad_to_params<T: Real>(grad_grid: &Array4<T>, base: &SamplingGrid<T>) -> (FlowField<T>, AffineParams<T>) {
    let (b, h, w, _) = grad_grid.dim();
    let mut affine = Array2::<T>::zeros((b, 6));
    for (bi, mut row) in affine.axis_iter_mut(Axis(0)).enumerate() {
        for i in 0..h {
            for j in 0..w {
                let u = base.0[[bi, i, j, 0]];
                let v = base.0[[bi, i, j, 1]];
                let gu = grad_grid[[bi, i, j, 0]];
                let gv = grad_grid[[bi, i, j, 1]];
                row[0] += gu * u;
                row[1] += gu * v;
                row[2] += gu;
                row[3] += gv * u;
                row[4] += gv * v;
                row[5] += gv;
            }
        }
    }
    (FlowField(grad_grid.clone()), AffineParams(affine))
}

/// Distance (normalized units) from the sampling point to the nearest
/// pixel-lattice line along either axis. The sampler is not differentiable on
/// those lines.
pub fn lattice_distance<T: Real>(u: T, v: T, height: usize, width: usize) -> f64 {
    let half = 0.5;
    let u = u.to_f64().unwrap();
    let v = v.to_f64().unwrap();
    let px = (u + 1.0) * half * (width - 1) as f64;
    let py = (v + 1.0) * half * (height - 1) as f64;
    let dx = (px - px.round()).abs() / ((width - 1) as f64 * half);
    let dy = (py - py.round()).abs() / ((height - 1) as f64 * half);
    dx.min(dy)
}

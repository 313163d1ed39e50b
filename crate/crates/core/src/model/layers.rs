//! Layer kernels with hand-written backward passes.
//!
//! Parameters live in one flat buffer owned by the model; every layer only
//! records the offsets of its slices. Forward passes never mutate the layer,
//! they return a cache that the matching backward pass consumes.

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Hands out consecutive slots in the flat parameter buffer.
#[derive(Debug, Default)]
pub(crate) struct SlotAllocator {
    next: usize,
    pub slots: Vec<(ParamSlot, Init)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Normal with the given standard deviation.
    Normal(f32),
    Constant(f32),
}

impl SlotAllocator {
    pub fn take(&mut self, len: usize, init: Init) -> ParamSlot {
        let slot = ParamSlot { offset: self.next, len };
        self.next += len;
        self.slots.push((slot, init));
        slot
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamSlot,
    pub bias: Option<ParamSlot>,
}

impl Conv2d {
    pub fn new(
        alloc: &mut SlotAllocator,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = alloc.take(out_c * fan_in, Init::Normal((2.0 / fan_in as f32).sqrt()));
        let bias = bias.then(|| alloc.take(out_c, Init::Constant(0.0)));
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<T: Real>(&self, x: &ArrayView4<T>) -> Array2<T> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::<T>::zeros((c * k * k, b * ho * wo));
        let dst = cols.as_slice_mut().unwrap();
        let n = b * ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_buf = &mut dst[row * n..(row + 1) * n];
                    for bi in 0..b {
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (bi * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    row_buf[base + ox] = x[[bi, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &Array2<T>, in_dim: [usize; 4]) -> Array4<T> {
        let [b, c, h, w] = in_dim;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let n = b * ho * wo;
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let src = cols.as_slice().unwrap();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_buf = &src[row * n..(row + 1) * n];
                    for bi in 0..b {
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (bi * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx[[bi, ci, iy as usize, ix as usize]] += row_buf[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (b, _, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.im2col(&x.view());
        let ckk = self.in_c * self.kernel * self.kernel;
        let weight = ArrayView2::from_shape((self.out_c, ckk), &params[self.weight.range()]).unwrap();
        let prod = weight.dot(&cols);
        let mut out = Array4::<T>::zeros((b, self.out_c, ho, wo));
        let plane = ho * wo;
        let prod_s = prod.as_slice().unwrap();
        let out_s = out.as_slice_mut().unwrap();
        for co in 0..self.out_c {
            let bias = self.bias.map(|slot| params[slot.offset + co]).unwrap_or_else(T::zero);
            for bi in 0..b {
                let src = &prod_s[co * b * plane + bi * plane..co * b * plane + (bi + 1) * plane];
                let dst = &mut out_s[(bi * self.out_c + co) * plane..(bi * self.out_c + co + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        (
            out,
            ConvCache {
                cols,
                in_dim: [b, self.in_c, h, w],
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        grad_out: &Array4<T>,
        param_grad: Option<&mut [T]>,
    ) -> Array4<T> {
        let (b, _, ho, wo) = grad_out.dim();
        let plane = ho * wo;
        let n = b * plane;
        let mut g = Array2::<T>::zeros((self.out_c, n));
        {
            let gs = g.as_slice_mut().unwrap();
            let go = grad_out.as_standard_layout();
            let go = go.as_slice().unwrap();
            for bi in 0..b {
                for co in 0..self.out_c {
                    let src = &go[(bi * self.out_c + co) * plane..(bi * self.out_c + co + 1) * plane];
                    gs[co * n + bi * plane..co * n + (bi + 1) * plane].copy_from_slice(src);
                }
            }
        }
        let ckk = self.in_c * self.kernel * self.kernel;
        if let Some(pg) = param_grad {
            let dw = g.dot(&cache.cols.t());
            for (dst, &v) in pg[self.weight.range()].iter_mut().zip(dw.iter()) {
                *dst += v;
            }
            if let Some(slot) = self.bias {
                for (co, row) in g.axis_iter(Axis(0)).enumerate() {
                    pg[slot.offset + co] += row.sum();
                }
            }
        }
        let weight = ArrayView2::from_shape((self.out_c, ckk), &params[self.weight.range()]).unwrap();
        let dcols = weight.t().dot(&g);
        self.col2im(&dcols, cache.in_dim)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvCache<T> {
    cols: Array2<T>,
    in_dim: [usize; 4],
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl Linear {
    pub fn new(alloc: &mut SlotAllocator, in_f: usize, out_f: usize) -> Self {
        let weight = alloc.take(in_f * out_f, Init::Normal((2.0 / in_f as f32).sqrt()));
        let bias = alloc.take(out_f, Init::Constant(0.0));
        Linear {
            in_f,
            out_f,
            weight,
            bias,
        }
    }

    fn weight<'a, T: Real>(&self, params: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.out_f, self.in_f), &params[self.weight.range()]).unwrap()
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Array2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weight(params).t());
        let bias = &params[self.bias.range()];
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        input: &Array2<T>,
        grad_out: &Array2<T>,
        param_grad: Option<&mut [T]>,
    ) -> Array2<T> {
        if let Some(pg) = param_grad {
            let dw = grad_out.t().dot(input);
            for (dst, &v) in pg[self.weight.range()].iter_mut().zip(dw.iter()) {
                *dst += v;
            }
            let db = grad_out.sum_axis(Axis(0));
            for (dst, &v) in pg[self.bias.range()].iter_mut().zip(db.iter()) {
                *dst += v;
            }
        }
        grad_out.dot(&self.weight(params))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(alloc: &mut SlotAllocator, channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "group norm needs channels ({channels}) divisible by groups ({groups})"
        );
        GroupNorm {
            channels,
            groups,
            gamma: alloc.take(channels, Init::Constant(1.0)),
            beta: alloc.take(channels, Init::Constant(0.0)),
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let per_group = c / self.groups * h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        let mut out = Array4::<T>::zeros((b, c, h, w));
        let mut inv_std = Vec::with_capacity(b * self.groups);
        let gamma = &params[self.gamma.range()];
        let beta = &params[self.beta.range()];
        let plane = h * w;
        let cpg = c / self.groups;
        {
            let xh = xhat.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            let n = T::from_usize(per_group).unwrap();
            for bg in 0..b * self.groups {
                let range = bg * per_group..(bg + 1) * per_group;
                let seg = &xs[range.clone()];
                let mean = seg.iter().copied().sum::<T>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let istd = T::one() / (var + T::lit(GN_EPS)).sqrt();
                inv_std.push(istd);
                let first_c = (bg % self.groups) * cpg;
                for (k, idx) in range.enumerate() {
                    let ch = first_c + k / plane;
                    let v = (xs[idx] - mean) * istd;
                    xh[idx] = v;
                    os[idx] = v * gamma[ch] + beta[ch];
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &GroupNormCache<T>,
        grad_out: &Array4<T>,
        param_grad: Option<&mut [T]>,
    ) -> Array4<T> {
        let (b, c, h, w) = grad_out.dim();
        let plane = h * w;
        let cpg = c / self.groups;
        let per_group = cpg * plane;
        let go = grad_out.as_standard_layout();
        let gs = go.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let gamma = &params[self.gamma.range()];
        if let Some(pg) = param_grad {
            for (idx, (&g, &x)) in gs.iter().zip(xh).enumerate() {
                let ch = (idx / plane) % c;
                pg[self.gamma.offset + ch] += g * x;
                pg[self.beta.offset + ch] += g;
            }
        }
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let ds = dx.as_slice_mut().unwrap();
        let n = T::from_usize(per_group).unwrap();
        for bg in 0..b * self.groups {
            let first_c = (bg % self.groups) * cpg;
            let range = bg * per_group..(bg + 1) * per_group;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for (k, idx) in range.clone().enumerate() {
                let d = gs[idx] * gamma[first_c + k / plane];
                sum_d += d;
                sum_dx += d * xh[idx];
            }
            let istd = cache.inv_std[bg];
            for (k, idx) in range.enumerate() {
                let d = gs[idx] * gamma[first_c + k / plane];
                ds[idx] = istd / n * (n * d - sum_d - xh[idx] * sum_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

/// Pre-activation residual block: norm and ReLU come before each convolution.
#[derive(Debug, Clone)]
pub(crate) struct PreActBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl PreActBlock {
    pub fn new(alloc: &mut SlotAllocator, in_c: usize, out_c: usize, stride: usize, groups: usize) -> Self {
        let norm1 = GroupNorm::new(alloc, in_c, groups.min(in_c));
        let conv1 = Conv2d::new(alloc, in_c, out_c, 3, stride, 1, false);
        let norm2 = GroupNorm::new(alloc, out_c, groups.min(out_c));
        let conv2 = Conv2d::new(alloc, out_c, out_c, 3, 1, 1, false);
        let shortcut = (stride != 1 || in_c != out_c).then(|| Conv2d::new(alloc, in_c, out_c, 1, stride, 0, false));
        PreActBlock {
            norm1,
            conv1,
            norm2,
            conv2,
            shortcut,
        }
    }

    fn forward<T: Real>(&self, params: &[T], x: &Array4<T>) -> (Array4<T>, PreActCache<T>) {
        let (a, n1) = self.norm1.forward(params, x);
        let r1 = a.mapv(relu);
        let sc = self.shortcut.as_ref().map(|conv| conv.forward(params, &r1));
        let (c1, k1) = self.conv1.forward(params, &r1);
        let (bn, n2) = self.norm2.forward(params, &c1);
        let r2 = bn.mapv(relu);
        let (c2, k2) = self.conv2.forward(params, &r2);
        let (out, sc_cache) = match sc {
            Some((sc_out, cache)) => (c2 + &sc_out, Some(cache)),
            None => (c2 + x, None),
        };
        (
            out,
            PreActCache {
                n1,
                r1,
                k1,
                n2,
                r2,
                k2,
                sc: sc_cache,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &PreActCache<T>,
        grad_out: &Array4<T>,
        mut param_grad: Option<&mut [T]>,
    ) -> Array4<T> {
        let g_r2 = self
            .conv2
            .backward(params, &cache.k2, grad_out, param_grad.as_deref_mut());
        let g_bn = relu_backward(&cache.r2, g_r2);
        let g_c1 = self.norm2.backward(params, &cache.n2, &g_bn, param_grad.as_deref_mut());
        let mut g_r1 = self.conv1.backward(params, &cache.k1, &g_c1, param_grad.as_deref_mut());
        if let (Some(conv), Some(sc)) = (&self.shortcut, &cache.sc) {
            g_r1 += &conv.backward(params, sc, grad_out, param_grad.as_deref_mut());
        }
        let g_a = relu_backward(&cache.r1, g_r1);
        let mut g_x = self.norm1.backward(params, &cache.n1, &g_a, param_grad);
        if self.shortcut.is_none() {
            g_x += grad_out;
        }
        g_x
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PreActCache<T> {
    n1: GroupNormCache<T>,
    r1: Array4<T>,
    k1: ConvCache<T>,
    n2: GroupNormCache<T>,
    r2: Array4<T>,
    k2: ConvCache<T>,
    sc: Option<ConvCache<T>>,
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn relu_backward<T: Real, D: ndarray::Dimension>(
    output: &ndarray::Array<T, D>,
    mut grad: ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    grad.zip_mut_with(output, |g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    grad
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Relu,
    /// 2x2 max pooling with stride 2, flooring odd extents.
    MaxPool2,
    GroupNorm(GroupNorm),
    GlobalAvgPool,
    Flatten,
    PreAct(Box<PreActBlock>),
}

#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    Conv(ConvCache<T>),
    Linear(Array2<T>),
    Relu(ArrayD<T>),
    MaxPool { argmax: Vec<usize>, in_dim: [usize; 4] },
    GroupNorm(GroupNormCache<T>),
    GlobalAvgPool([usize; 4]),
    Flatten(Vec<usize>),
    PreAct(Box<PreActCache<T>>),
}

fn to4<T: Real>(x: ArrayD<T>) -> Array4<T> {
    x.into_dimensionality::<Ix4>().expect("layer expects a 4-d activation")
}

fn to2<T: Real>(x: ArrayD<T>) -> Array2<T> {
    x.into_dimensionality::<Ix2>().expect("layer expects a 2-d activation")
}

impl Layer {
    pub fn forward<T: Real>(&self, params: &[T], x: ArrayD<T>) -> (ArrayD<T>, Cache<T>) {
        match self {
            Layer::Conv(conv) => {
                let (out, cache) = conv.forward(params, &to4(x));
                (out.into_dyn(), Cache::Conv(cache))
            }
            Layer::Linear(lin) => {
                let x = to2(x);
                let out = lin.forward(params, &x);
                (out.into_dyn(), Cache::Linear(x))
            }
            Layer::Relu => {
                let out = x.mapv(relu);
                (out.clone(), Cache::Relu(out))
            }
            Layer::MaxPool2 => {
                let x = to4(x);
                let (b, c, h, w) = x.dim();
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Array4::<T>::zeros((b, c, ho, wo));
                let mut argmax = Vec::with_capacity(b * c * ho * wo);
                let x = x.as_standard_layout();
                let xs = x.as_slice().unwrap();
                let os = out.as_slice_mut().unwrap();
                let mut o = 0;
                for bc in 0..b * c {
                    let base = bc * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                            os[o] = xs[best];
                            argmax.push(best);
                            o += 1;
                        }
                    }
                }
                (
                    out.into_dyn(),
                    Cache::MaxPool {
                        argmax,
                        in_dim: [b, c, h, w],
                    },
                )
            }
            Layer::GroupNorm(gn) => {
                let (out, cache) = gn.forward(params, &to4(x));
                (out.into_dyn(), Cache::GroupNorm(cache))
            }
            Layer::GlobalAvgPool => {
                let x = to4(x);
                let (b, c, h, w) = x.dim();
                let n = T::from_usize(h * w).unwrap();
                let out = x
                    .into_shape_with_order((b, c, h * w))
                    .unwrap()
                    .sum_axis(Axis(2))
                    .mapv(|v| v / n);
                (out.into_dyn(), Cache::GlobalAvgPool([b, c, h, w]))
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest: usize = shape[1..].iter().product();
                let x = x.as_standard_layout().to_owned();
                let out = x.into_shape_with_order(IxDyn(&[b, rest])).unwrap();
                (out, Cache::Flatten(shape))
            }
            Layer::PreAct(block) => {
                let (out, cache) = block.forward(params, &to4(x));
                (out.into_dyn(), Cache::PreAct(Box::new(cache)))
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &Cache<T>,
        grad: ArrayD<T>,
        param_grad: Option<&mut [T]>,
    ) -> ArrayD<T> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv(c)) => conv.backward(params, c, &to4(grad), param_grad).into_dyn(),
            (Layer::Linear(lin), Cache::Linear(input)) => {
                lin.backward(params, input, &to2(grad), param_grad).into_dyn()
            }
            (Layer::Relu, Cache::Relu(out)) => relu_backward(out, grad),
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_dim }) => {
                let mut dx = Array4::<T>::zeros((in_dim[0], in_dim[1], in_dim[2], in_dim[3]));
                let ds = dx.as_slice_mut().unwrap();
                let g = grad.as_standard_layout();
                for (&idx, &v) in argmax.iter().zip(g.iter()) {
                    ds[idx] += v;
                }
                dx.into_dyn()
            }
            (Layer::GroupNorm(gn), Cache::GroupNorm(c)) => gn.backward(params, c, &to4(grad), param_grad).into_dyn(),
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool([b, c, h, w])) => {
                let g = to2(grad);
                let n = T::from_usize(h * w).unwrap();
                let mut dx = Array4::<T>::zeros((*b, *c, *h, *w));
                for bi in 0..*b {
                    for ci in 0..*c {
                        let v = g[[bi, ci]] / n;
                        dx.slice_mut(s![bi, ci, .., ..]).fill(v);
                    }
                }
                dx.into_dyn()
            }
            (Layer::Flatten, Cache::Flatten(shape)) => grad
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .unwrap(),
            (Layer::PreAct(block), Cache::PreAct(c)) => block.backward(params, c, &to4(grad), param_grad).into_dyn(),
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    /// Checks input and parameter gradients of `layer` against central
    /// differences of `sum(out * probe)`.
    fn check_layer(layer: &Layer, n_params: usize, in_shape: &[usize]) {
        let params = random_params(n_params, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array::from_shape_fn(IxDyn(in_shape), |_| rng.random_range(-1.0..1.0));
        let (out, cache) = layer.forward(&params, x.clone());
        let probe = Array::from_shape_fn(out.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let mut pg = vec![0.0; n_params];
        let gx = layer.backward(&params, &cache, probe.clone(), Some(&mut pg));

        let objective = |p: &[f64], x: &ArrayD<f64>| -> f64 {
            let (o, _) = layer.forward(p, x.clone());
            (&o * &probe).sum()
        };
        let h = 1e-6;
        for idx in (0..x.len()).step_by((x.len() / 7).max(1)) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
                "input {idx}: fd {fd} vs {an}"
            );
        }
        for idx in (0..n_params).step_by((n_params / 9).max(1)) {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp[idx] += h;
            pm[idx] -= h;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
            assert!(
                (fd - pg[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: fd {fd} vs {}",
                pg[idx]
            );
        }
    }

    #[test]
    fn conv_gradients() {
        let mut alloc = SlotAllocator::default();
        let conv = Conv2d::new(&mut alloc, 2, 3, 3, 2, 1, true);
        check_layer(&Layer::Conv(conv), alloc.total(), &[2, 2, 5, 6]);
    }

    #[test]
    fn linear_gradients() {
        let mut alloc = SlotAllocator::default();
        let lin = Linear::new(&mut alloc, 7, 4);
        check_layer(&Layer::Linear(lin), alloc.total(), &[3, 7]);
    }

    #[test]
    fn group_norm_gradients() {
        let mut alloc = SlotAllocator::default();
        let gn = GroupNorm::new(&mut alloc, 4, 2);
        check_layer(&Layer::GroupNorm(gn), alloc.total(), &[2, 4, 3, 3]);
    }

    #[test]
    fn preact_block_gradients() {
        let mut alloc = SlotAllocator::default();
        let block = PreActBlock::new(&mut alloc, 2, 4, 2, 2);
        check_layer(&Layer::PreAct(Box::new(block)), alloc.total(), &[2, 2, 6, 6]);
        let mut alloc = SlotAllocator::default();
        let block = PreActBlock::new(&mut alloc, 4, 4, 1, 2);
        check_layer(&Layer::PreAct(Box::new(block)), alloc.total(), &[1, 4, 4, 4]);
    }

    #[test]
    fn pooling_and_reshape_gradients() {
        check_layer(&Layer::MaxPool2, 0, &[2, 3, 4, 5]);
        check_layer(&Layer::GlobalAvgPool, 0, &[2, 3, 4, 4]);
        check_layer(&Layer::Flatten, 0, &[2, 3, 2, 2]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut alloc = SlotAllocator::default();
        let conv = Conv2d::new(&mut alloc, 1, 1, 2, 1, 0, false);
        let params = vec![1.0f64, 2.0, 3.0, 4.0];
        let x = Array4::from_shape_vec((1, 1, 2, 3), vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]).unwrap();
        let (out, _) = conv.forward(&params, &x);
        // [1 0; 0 1] . [1 2; 3 4] = 5, [0 2; 1 1] . [1 2; 3 4] = 11
        assert_eq!(out.as_slice().unwrap(), &[5.0, 11.0]);
    }
}

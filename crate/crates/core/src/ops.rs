//! Forward kernels and their analytic adjoints.
//!
//! Every function here is a pure map on tensors. The autodiff tape in
//! [`crate::graph`] stitches them together; the `*_backward` functions take the
//! upstream gradient and return gradients shaped like the forward inputs.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, gemm, Scalar, Tensor};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Stride 1 with `(k - 1) / 2` padding: spatial size preserved for odd `k`.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: (kernel - 1) / 2, groups: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<ConvGeometry> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, cin_g, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::Shape(format!("conv2d weight must be 4-D, got {:?}", weight.shape()))),
    };
    let groups = spec.groups;
    if groups == 0 || spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride and groups must be positive".into()));
    }
    if cin % groups != 0 {
        return Err(Error::Shape(format!("conv2d input channels {cin} not divisible by groups {groups}")));
    }
    if cout % groups != 0 {
        return Err(Error::Shape(format!("conv2d output channels {cout} not divisible by groups {groups}")));
    }
    if cin_g != cin / groups {
        return Err(Error::Shape(format!(
            "conv2d weight in-channels {cin_g} != input channels {cin} / groups {groups}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("conv2d bias shape {:?} != [{cout}]", b.shape())));
        }
    }
    let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
    if kh > hp {
        return Err(Error::Shape(format!("conv2d kernel height {kh} exceeds padded height {hp}")));
    }
    if kw > wp {
        return Err(Error::Shape(format!("conv2d kernel width {kw} exceeds padded width {wp}")));
    }
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: (hp - kh) / spec.stride + 1,
        wo: (wp - kw) / spec.stride + 1,
        groups,
        stride: spec.stride,
        pad: spec.padding,
    })
}

/// Unfolds one group of one sample into a `patch x out_plane` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin_g() {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::ZERO } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into image layout.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin_g() {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, spec)?;
    let mut out = Tensor::zeros(vec![g.n, g.cout, g.ho, g.wo]);
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_group = g.cin_g() * g.h * g.w;
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; patch * plane] };
    let x = input.data();
    let wdata = weight.data();
    let o = out.data_mut();
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[(b * g.cin + grp * g.cin_g()) * g.h * g.w..][..in_group];
            let rhs: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let wg = &wdata[grp * g.cout_g() * patch..(grp + 1) * g.cout_g() * patch];
            let og = &mut o[(b * g.cout + grp * g.cout_g()) * plane..][..g.cout_g() * plane];
            gemm(g.cout_g(), patch, plane, wg, false, rhs, false, T::ZERO, og);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut o[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]; `None` entries are skipped when not requested.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = conv_geometry(input, weight, None, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?} != output shape {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.ho, g.wo]
        )));
    }
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_group = g.cin_g() * g.h * g.w;
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = Tensor::zeros(vec![g.cout]);
    let mut dx = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; patch * plane] };
    let mut dcols = if g.pointwise() || !need_input { Vec::new() } else { vec![T::ZERO; patch * plane] };
    let x = input.data();
    let dy = grad_out.data();
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[(b * g.cin + grp * g.cin_g()) * g.h * g.w..][..in_group];
            let dyg = &dy[(b * g.cout + grp * g.cout_g()) * plane..][..g.cout_g() * plane];
            let rhs: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let dwg = &mut dw.data_mut()[grp * g.cout_g() * patch..(grp + 1) * g.cout_g() * patch];
            gemm(g.cout_g(), plane, patch, dyg, false, rhs, true, T::ONE, dwg);
            if let Some(dx) = dx.as_mut() {
                let wg = &weight.data()[grp * g.cout_g() * patch..(grp + 1) * g.cout_g() * patch];
                let dxs = &mut dx.data_mut()[(b * g.cin + grp * g.cin_g()) * g.h * g.w..][..in_group];
                if g.pointwise() {
                    gemm(patch, g.cout_g(), plane, wg, true, dyg, false, T::ONE, dxs);
                } else {
                    gemm(patch, g.cout_g(), plane, wg, true, dyg, false, T::ZERO, &mut dcols);
                    col2im(&dcols, &g, dxs);
                }
            }
        }
        for co in 0..g.cout {
            let s: T = dy[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane].iter().copied().sum();
            db.data_mut()[co] += s;
        }
    }
    Ok(Conv2dGrads { input: dx, weight: dw, bias: db })
}

/// Per-pixel channel mean (output channel 0) and channel max (channel 1).
///
/// Also returns, per output pixel, the index of the first maximal channel.
pub fn channel_stats<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut out = Tensor::zeros(vec![n, 2, h, w]);
    let mut argmax = vec![0usize; n * plane];
    let x = input.data();
    let o = out.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let mut sum = T::ZERO;
            let mut best = x[b * c * plane + p];
            let mut best_c = 0;
            for ch in 0..c {
                let v = x[(b * c + ch) * plane + p];
                sum += v;
                if v > best {
                    best = v;
                    best_c = ch;
                }
            }
            o[(b * 2) * plane + p] = sum * inv_c;
            o[(b * 2 + 1) * plane + p] = best;
            argmax[b * plane + p] = best_c;
        }
    }
    Ok((out, argmax))
}

pub fn channel_stats_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let plane = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let dy = grad_out.data();
    let d = dx.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let gm = dy[(b * 2) * plane + p] * inv_c;
            for ch in 0..c {
                d[(b * c + ch) * plane + p] += gm;
            }
            d[(b * c + argmax[b * plane + p]) * plane + p] += dy[(b * 2 + 1) * plane + p];
        }
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::from_f64(1.0 / plane as f64);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (chunk, &g) in dx.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        chunk.fill(g * inv);
    }
    dx
}

/// Source taps for half-pixel-centre (align-corners off) linear resampling.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling with half-pixel centres.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h < h || out_w < w {
        return Err(Error::Shape(format!("upsample target {out_h}x{out_w} smaller than input {h}x{w}")));
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    let x = input.data();
    for (plane_in, plane_out) in x.chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(out_h * out_w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::ONE - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::ONE - lx;
                let top = hx * plane_in[y0 * w + x0] + lx * plane_in[y0 * w + x1];
                let bot = hx * plane_in[y1 * w + x0] + lx * plane_in[y1 * w + x1];
                plane_out[oy * out_w + ox] = hy * top + ly * bot;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (plane_in, plane_out) in dx.data_mut().chunks_exact_mut(h * w).zip(grad_out.data().chunks_exact(out_h * out_w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::ONE - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::ONE - lx;
                let g = plane_out[oy * out_w + ox];
                plane_in[y0 * w + x0] += hy * hx * g;
                plane_in[y0 * w + x1] += hy * lx * g;
                plane_in[y1 * w + x0] += ly * hx * g;
                plane_in[y1 * w + x1] += ly * lx * g;
            }
        }
    }
    dx
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max subtracted before `exp`).
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let mut out = input.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut m = d[idx(0)];
            for k in 1..len {
                m = m.max(d[idx(k)]);
            }
            let mut sum = T::ZERO;
            for k in 0..len {
                let e = (d[idx(k)] - m).exp();
                d[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                d[idx(k)] /= sum;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(output.shape(), axis).expect("validated in forward");
    let y = output.data();
    let dy = grad_out.data();
    let mut dx = Tensor::zeros(output.shape().to_vec());
    let d = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| y[idx(k)] * dy[idx(k)]).sum();
            for k in 0..len {
                d[idx(k)] = y[idx(k)] * (dy[idx(k)] - dot);
            }
        }
    }
    dx
}

pub const CE_PROB_FLOOR: f64 = 1e-12;

fn check_class_probs<T: Scalar>(pred: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = pred.dims4()?;
    let plane = h * w;
    let tol = 1e-6f64.max(16.0 * T::EPSILON.to_f64());
    let p = pred.data();
    for b in 0..n {
        for px in 0..plane {
            let sum: f64 = (0..c).map(|k| p[(b * c + k) * plane + px].to_f64()).sum();
            if (sum - 1.0).abs() > tol || !sum.is_finite() {
                return Err(Error::NotNormalized { index: b * plane + px, sum });
            }
        }
    }
    Ok((n, c, plane))
}

/// Mean negative log-likelihood of `target` under per-pixel class
/// probabilities, with probabilities floored at [`CE_PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &[u8]) -> Result<T> {
    let (n, c, plane) = check_class_probs(pred)?;
    if target.len() != n * plane {
        return Err(Error::Shape(format!("target has {} labels, prediction {} pixels", target.len(), n * plane)));
    }
    let floor = T::from_f64(CE_PROB_FLOOR);
    let p = pred.data();
    let mut total = T::ZERO;
    for (i, &label) in target.iter().enumerate() {
        if label as usize >= c || label > 1 {
            return Err(Error::InvalidLabel { index: i, label });
        }
        let (b, px) = (i / plane, i % plane);
        total += -p[(b * c + label as usize) * plane + px].max(floor).ln();
    }
    Ok(total / T::from_f64((n * plane) as f64))
}

pub fn cross_entropy_backward<T: Scalar>(pred: &Tensor<T>, target: &[u8], grad_out: T) -> Tensor<T> {
    let (n, c, h, w) = pred.dims4().expect("validated in forward");
    let plane = h * w;
    let scale = grad_out / T::from_f64((n * plane) as f64);
    let floor = T::from_f64(CE_PROB_FLOOR);
    let mut dx = Tensor::zeros(pred.shape().to_vec());
    let p = pred.data();
    for (i, &label) in target.iter().enumerate() {
        let idx = ((i / plane) * c + label as usize) * plane + i % plane;
        if p[idx] > floor {
            dx.data_mut()[idx] = -scale / p[idx];
        }
    }
    dx
}

/// 3x3 sliding-window maximum, stride 1, zero padding.
pub fn max_filter3x3<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    let mut out = input.clone();
    for (src, dst) in input.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let mut m = T::ZERO;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        m = m.max(src[yy * w + xx]);
                    }
                }
                // Zero padding: border windows also see implicit zeros.
                let full = y > 0 && x > 0 && y + 1 < h && x + 1 < w;
                dst[y * w + x] = if full { m } else { m.max(T::ZERO) };
            }
        }
    }
    Ok(out)
}

/// 3x3 sliding-window sum, stride 1, zero padding.
pub fn box_sum3x3<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    let mut out = input.clone();
    for (src, dst) in input.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let mut s = T::ZERO;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        s += src[yy * w + xx];
                    }
                }
                dst[y * w + x] = s;
            }
        }
    }
    Ok(out)
}

/// Elementwise `p <- p - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut Tensor<T>, grads: &Tensor<T>, lr: f64) -> Result<()> {
    ensure_same_shape(params, grads)?;
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let lr = T::from_f64(lr);
    for (p, &g) in params.data_mut().iter_mut().zip(grads.data()) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(vec![1])), Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_windowed_dot_products() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &k, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv_stride_output_size() {
        let x = Tensor::<f64>::full(vec![2, 4, 8, 8], 1.0);
        let k = Tensor::<f64>::full(vec![6, 2, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, Conv2dSpec::same(3).with_stride(2).with_groups(2)).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 4]);
        // interior: 2 channels * 9 taps
        assert_eq!(y.at4(0, 0, 1, 1), 18.0);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(vec![4, 3, 3, 3]);
        let err = conv2d(&x, &k, None, Conv2dSpec::default().with_groups(2)).unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");
        let k2 = Tensor::<f64>::zeros(vec![4, 2, 3, 3]);
        let err = conv2d(&x, &k2, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("in-channels"), "{err}");
        let big = Tensor::<f64>::zeros(vec![1, 3, 7, 7]);
        let err = conv2d(&x, &big, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("kernel height"), "{err}");
    }

    #[test]
    fn channel_stats_examples() {
        let x = t(&[1, 3, 1, 1], &[1., 2., 6.]);
        assert_eq!(channel_stats(&x).unwrap().0.data(), &[3., 6.]);
        let x = t(&[1, 1, 1, 2], &[4., -2.]);
        assert_eq!(channel_stats(&x).unwrap().0.data(), &[4., -2., 4., -2.]);
        let x = t(&[1, 2, 1, 1], &[-1., 1.]);
        assert_eq!(channel_stats(&x).unwrap().0.data(), &[0., 1.]);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(global_avg_pool(&Tensor::<f64>::full(vec![1, 1, 3, 3], 5.0)).unwrap().data(), &[5.0]);
        assert_eq!(global_avg_pool(&t(&[1, 1, 2, 2], &[1., 2., 3., 6.])).unwrap().data(), &[3.0]);
        assert_eq!(global_avg_pool(&Tensor::<f64>::zeros(vec![1, 2, 2, 2])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let row = t(&[1, 1, 1, 2], &[1., 3.]);
        let up = bilinear_upsample(&row, 1, 4).unwrap();
        assert_eq!(up.data(), &[1.0, 1.5, 2.5, 3.0]);
        let c = Tensor::<f64>::full(vec![1, 2, 3, 5], 0.7);
        let up = bilinear_upsample(&c, 9, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(bilinear_upsample(&x, 2, 2).unwrap(), x);
        assert!(bilinear_upsample(&x, 1, 2).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[1, 3], &[0.4, 0.4, 0.4]), 1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let a = softmax(&t(&[1, 2, 1, 1], &[1.0, -2.0]), 1).unwrap();
        let b = softmax(&t(&[1, 2, 1, 1], &[101.0, 98.0]), 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let big = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(big.all_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = t(&[1, 2, 1, 2], &[1., 0., 0., 1.]);
        assert_eq!(cross_entropy(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = Tensor::<f64>::full(vec![1, 2, 2, 2], 0.5);
        assert!((cross_entropy(&uniform, &[0, 1, 1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let one = t(&[1, 2, 1, 1], &[0.75, 0.25]);
        assert!((cross_entropy(&one, &[1]).unwrap() - 1.3862943611198906).abs() < 1e-12);
        assert!(matches!(cross_entropy(&one, &[2]), Err(Error::InvalidLabel { label: 2, .. })));
        let bad = t(&[1, 2, 1, 1], &[0.7, 0.7]);
        assert!(matches!(cross_entropy(&bad, &[0]), Err(Error::NotNormalized { .. })));
        let saturated = t(&[1, 2, 1, 1], &[1.0, 0.0]);
        assert!((cross_entropy(&saturated, &[1]).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn sgd_examples() {
        let mut p = t(&[1], &[1.0]);
        sgd_step(&mut p, &t(&[1], &[2.0]), 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut p, &t(&[1], &[0.0]), 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        let mut q = t(&[1], &[0.0]);
        sgd_step(&mut q, &t(&[1], &[1.0]), 1.0).unwrap();
        sgd_step(&mut q, &t(&[1], &[1.0]), 1.0).unwrap();
        assert_eq!(q.data(), &[-2.0]);
        assert!(sgd_step(&mut q, &t(&[2], &[1.0, 1.0]), 1.0).is_err());
        assert!(sgd_step(&mut q, &t(&[1], &[1.0]), 0.0).is_err());
    }

    #[test]
    fn max_filter_examples() {
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let y = max_filter3x3(&x).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y.at4(0, 0, r, c), if inside { 1.0 } else { 0.0 });
            }
        }
        let c = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.3);
        assert_eq!(max_filter3x3(&c).unwrap(), c);
        let z = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        assert_eq!(max_filter3x3(&z).unwrap(), z);
    }
}

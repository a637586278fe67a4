//! CPU kernels for sliced layers.
//!
//! Weights are read straight out of the full-width store with strided GEMM
//! calls, so a sliced layer never copies its weights.

use crate::params::ParamTensor;
use crate::tensor::Tensor;

/// Output side length of a convolution with floor semantics.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad),
            conv_out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f32], channels: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = g.kernel;
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((c * k + kh) * k + kw) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], channels: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((c * k + kh) * k + kw) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense or grouped convolution over the first `geom.cin` input channels,
/// producing `geom.cout` channels from the leading weight slice.
pub(crate) fn conv_forward(x: &Tensor, weight: &ParamTensor, g: &ConvGeom) -> Tensor {
    let [n, _, h, w] = x.shape();
    let (oh, ow) = g.out_hw(h, w);
    let ohw = oh * ow;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.kernel * g.kernel;
    let row_stride = weight.dims[1] * kk;
    let mut out = Tensor::zeros([n, g.cout, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; cin_g * kk * ohw] };
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        for gi in 0..g.groups {
            let xg = &xs[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
            let b: &[f32] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, cin_g, h, w, g, oh, ow, &mut cols);
                &cols
            };
            let a = &weight.data[gi * cout_g * row_stride..];
            let c = &mut ys[gi * cout_g * ohw..(gi + 1) * cout_g * ohw];
            gemm(cout_g, cin_g * kk, ohw, a, row_stride, 1, b, ohw, 1, 0.0, c, ohw, 1);
        }
    }
    out
}

/// Accumulates the weight gradient into `dweight` and returns the input
/// gradient when requested.
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &ParamTensor,
    dy: &Tensor,
    g: &ConvGeom,
    dweight: &mut ParamTensor,
    need_dx: bool,
) -> Option<Tensor> {
    let [n, _, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let ohw = oh * ow;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.kernel * g.kernel;
    let row_stride = weight.dims[1] * kk;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; cin_g * kk * ohw] };
    let mut dcols = vec![0.0; cin_g * kk * ohw];
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        for gi in 0..g.groups {
            let xg = &xs[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
            let b: &[f32] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, cin_g, h, w, g, oh, ow, &mut cols);
                &cols
            };
            let dyg = &dys[gi * cout_g * ohw..(gi + 1) * cout_g * ohw];
            // dW[o, r] += sum_p dY[o, p] * cols[r, p]
            let dw = &mut dweight.data[gi * cout_g * row_stride..];
            gemm(cout_g, ohw, cin_g * kk, dyg, ohw, 1, b, 1, ohw, 1.0, dw, row_stride, 1);
            if let Some(dx) = dx.as_mut() {
                // dcols[r, p] = sum_o W[o, r] * dY[o, p]
                let a = &weight.data[gi * cout_g * row_stride..];
                let dxs = &mut dx.sample_mut(s)[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
                if g.is_pointwise() {
                    gemm(cin_g, cout_g, ohw, a, 1, row_stride, dyg, ohw, 1, 1.0, dxs, ohw, 1);
                } else {
                    gemm(cin_g * kk, cout_g, ohw, a, 1, row_stride, dyg, ohw, 1, 0.0, &mut dcols, ohw, 1);
                    col2im_add(&dcols, cin_g, h, w, g, oh, ow, dxs);
                }
            }
        }
    }
    dx
}

pub(crate) fn depthwise_forward(x: &Tensor, weight: &ParamTensor, kernel: usize, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let kk = kernel * kernel;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        for ch in 0..c {
            let wk = &weight.data[ch * kk..(ch + 1) * kk];
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            let dst = &mut ys[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for kh in 0..kernel {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..];
                        for kw in 0..kernel {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                acc += wk[kh * kernel + kw] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &Tensor,
    weight: &ParamTensor,
    dy: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
    dweight: &mut ParamTensor,
    need_dx: bool,
) -> Option<Tensor> {
    let [n, c, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let kk = kernel * kernel;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            let dplane = &dys[ch * oh * ow..(ch + 1) * oh * ow];
            let wk = &weight.data[ch * kk..(ch + 1) * kk];
            let dwk = &mut dweight.data[ch * kk..(ch + 1) * kk];
            let mut dxp = dx.as_mut().map(|d| &mut d.sample_mut(s)[ch * h * w..(ch + 1) * h * w]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dplane[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for kh in 0..kernel {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kw in 0..kernel {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                let idx = iy as usize * w + ix as usize;
                                dwk[kh * kernel + kw] += g * plane[idx];
                                if let Some(d) = dxp.as_deref_mut() {
                                    d[idx] += g * wk[kh * kernel + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `y = x W^T + b` over the leading `cin` features and `cout` outputs.
pub(crate) fn linear_forward(x: &Tensor, weight: &ParamTensor, bias: &ParamTensor, cin: usize, cout: usize) -> Tensor {
    let n = x.batch();
    let row_stride = weight.dims[1];
    let mut out = Tensor::zeros([n, cout, 1, 1]);
    gemm(n, cin, cout, x.data(), cin, 1, &weight.data, 1, row_stride, 0.0, out.data_mut(), cout, 1);
    for s in 0..n {
        out.sample_mut(s).iter_mut().zip(&bias.data[..cout]).for_each(|(y, b)| *y += b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &ParamTensor,
    dy: &Tensor,
    cin: usize,
    cout: usize,
    dweight: &mut ParamTensor,
    dbias: &mut ParamTensor,
    need_dx: bool,
) -> Option<Tensor> {
    let n = x.batch();
    let row_stride = weight.dims[1];
    // dW[o, i] += sum_n dY[n, o] * X[n, i]
    gemm(cout, n, cin, dy.data(), 1, cout, x.data(), cin, 1, 1.0, &mut dweight.data, row_stride, 1);
    for s in 0..n {
        dbias.data[..cout].iter_mut().zip(dy.row(s)).for_each(|(b, g)| *b += g);
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, cout, cin, dy.data(), cout, 1, &weight.data, row_stride, 1, 0.0, dx.data_mut(), cin, 1);
        dx
    })
}

pub(crate) fn global_pool_forward(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for (dst, src) in out.data_mut().iter_mut().zip(x.data().chunks(plane)) {
        *dst = src.iter().sum::<f32>() / plane as f32;
    }
    out
}

pub(crate) fn global_pool_backward(input_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let plane = dx.plane();
    let scale = 1.0 / plane as f32;
    for (dst, g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        dst.iter_mut().for_each(|v| *v = g * scale);
    }
    dx
}

pub(crate) fn relu_forward(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub(crate) fn relu_backward(output: &Tensor, mut dy: Tensor) -> Tensor {
    dy.data_mut().iter_mut().zip(output.data()).for_each(|(g, y)| {
        if *y <= 0.0 {
            *g = 0.0
        }
    });
    dy
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an oracle for the GEMM path.
    fn naive_conv(x: &Tensor, w: &ParamTensor, g: &ConvGeom) -> Tensor {
        let [n, _, h, wd] = x.shape();
        let (oh, ow) = g.out_hw(h, wd);
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let k = g.kernel;
        let mut out = Tensor::zeros([n, g.cout, oh, ow]);
        for s in 0..n {
            for o in 0..g.cout {
                let gi = o / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c = gi * cin_g + ci;
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let widx = ((o * w.dims[1] + ci) * k + kh) * k + kw;
                                    let xidx = ((s * x.channels() + c) * h + iy as usize) * wd + ix as usize;
                                    acc += w.data[widx] * x.data()[xidx];
                                }
                            }
                        }
                        let oidx = ((s * g.cout + o) * oh + oy) * ow + ox;
                        out.data_mut()[oidx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f32) -> Vec<f32> {
        (0..len).map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn gemm_conv_matches_naive_on_slices() {
        for &(groups, k, stride) in &[(1, 3, 1), (1, 3, 2), (1, 1, 1), (2, 3, 1), (4, 1, 2)] {
            let full_in = 8;
            let full_out = 8;
            let w = ParamTensor { dims: vec![full_out, full_in / groups, k, k], data: ramp(full_out * full_in / groups * k * k, 1.0) };
            let g = ConvGeom { cin: 4, cout: 4, groups, kernel: k, stride, pad: k / 2 };
            let x = Tensor::from_vec([2, 4, 7, 6], ramp(2 * 4 * 42, 2.0)).unwrap();
            let fast = conv_forward(&x, &w, &g);
            let slow = naive_conv(&x, &w, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let w = ParamTensor { dims: vec![6, 1, 3, 3], data: ramp(54, 1.0) };
        let x = Tensor::from_vec([1, 4, 5, 5], ramp(100, 1.0)).unwrap();
        let a = depthwise_forward(&x, &w, 3, 2, 1);
        let g = ConvGeom { cin: 4, cout: 4, groups: 4, kernel: 3, stride: 2, pad: 1 };
        let b = naive_conv(&x, &w, &g);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_output_size_floor() {
        assert_eq!(conv_out_size(7, 3, 2, 1), 4);
        assert_eq!(conv_out_size(8, 3, 2, 1), 4);
        assert_eq!(conv_out_size(8, 1, 1, 0), 8);
    }
}

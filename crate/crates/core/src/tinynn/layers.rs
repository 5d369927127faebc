//! Layer kernels. Activations are batch-major row-major buffers; image
//! activations are NHWC so flattening is free.

use serde::{Deserialize, Serialize};

/// Row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.shape.iter().product::<usize>() == self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `weight` is `[inputs, outputs]`.
    Dense { weight: Tensor, bias: Tensor },
    /// Stride 1, same padding. `weight` is `[k, k, in_c, out_c]`; `height` and
    /// `width` are the input (and output) spatial dims.
    Conv2d {
        height: usize,
        width: usize,
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    /// 2x2 window, stride 2, floor division of the input dims.
    MaxPool2 {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flatten,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => weight.len() + bias.len(),
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 { .. } => "max_pool2",
            Layer::Flatten => "flatten",
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// row-major shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are asserted, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn dense_forward(x: &[f64], batch: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (inputs, outputs) = (weight.shape[0], weight.shape[1]);
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(&bias.data);
    }
    gemm(batch, inputs, outputs, x, false, &weight.data, false, 1.0, &mut out);
    out
}

/// Returns input gradient when requested; weight and bias gradients are
/// written into `dw` and `db`.
pub(crate) fn dense_backward(
    x: &[f64],
    dout: &[f64],
    batch: usize,
    weight: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let (inputs, outputs) = (weight.shape[0], weight.shape[1]);
    gemm(inputs, batch, outputs, x, true, dout, false, 0.0, dw);
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in dout.chunks_exact(outputs) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    need_input_grad.then(|| {
        let mut dx = vec![0.0; batch * inputs];
        gemm(batch, outputs, inputs, dout, false, &weight.data, true, 0.0, &mut dx);
        dx
    })
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn from_weight(height: usize, width: usize, weight: &Tensor) -> Self {
        Self {
            h: height,
            w: width,
            c: weight.shape[2],
            k: weight.shape[0],
        }
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c
    }
}

/// Valid kernel offsets `[lo, hi)` along one axis for output coordinate `o`.
#[inline]
fn kernel_span(o: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(o);
    let hi = k.min(extent + pad - o);
    (lo, hi.max(lo))
}

pub(crate) fn im2col(x: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let ConvGeom { h, w, c, k } = g;
    let pad = k / 2;
    let patch = g.patch();
    let mut cols = vec![0.0; batch * h * w * patch];
    for b in 0..batch {
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            let (ky_lo, ky_hi) = kernel_span(y, pad, k, h);
            for xx in 0..w {
                let (kx_lo, kx_hi) = kernel_span(xx, pad, k, w);
                let run = (kx_hi - kx_lo) * c;
                let row = &mut cols[((b * h + y) * w + xx) * patch..][..patch];
                for ky in ky_lo..ky_hi {
                    let iy = y + ky - pad;
                    let src = &img[(iy * w + xx + kx_lo - pad) * c..][..run];
                    let dst = &mut row[(ky * k + kx_lo) * c..][..run];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let ConvGeom { h, w, c, k } = g;
    let pad = k / 2;
    let patch = g.patch();
    let mut dx = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        let img = &mut dx[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            let (ky_lo, ky_hi) = kernel_span(y, pad, k, h);
            for xx in 0..w {
                let (kx_lo, kx_hi) = kernel_span(xx, pad, k, w);
                let run = (kx_hi - kx_lo) * c;
                let row = &cols[((b * h + y) * w + xx) * patch..][..patch];
                for ky in ky_lo..ky_hi {
                    let iy = y + ky - pad;
                    let dst = &mut img[(iy * w + xx + kx_lo - pad) * c..][..run];
                    for (d, &v) in dst.iter_mut().zip(&row[(ky * k + kx_lo) * c..][..run]) {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Samples per im2col chunk, sized so a chunk's patch matrix stays in cache.
fn conv_chunk(g: ConvGeom) -> usize {
    const TARGET_ELEMS: usize = 1 << 16;
    (TARGET_ELEMS / (g.h * g.w * g.patch())).max(1)
}

pub(crate) fn conv_forward(x: &[f64], batch: usize, g: ConvGeom, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let out_c = weight.shape[3];
    let rows = batch * g.h * g.w;
    let in_len = g.h * g.w * g.c;
    let mut out = Vec::with_capacity(rows * out_c);
    for _ in 0..rows {
        out.extend_from_slice(&bias.data);
    }
    let step = conv_chunk(g);
    for start in (0..batch).step_by(step) {
        let n = step.min(batch - start);
        let cols = im2col(&x[start * in_len..(start + n) * in_len], n, g);
        let chunk_rows = n * g.h * g.w;
        let dst = &mut out[start * g.h * g.w * out_c..][..chunk_rows * out_c];
        gemm(chunk_rows, g.patch(), out_c, &cols, false, &weight.data, false, 1.0, dst);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    dout: &[f64],
    batch: usize,
    g: ConvGeom,
    weight: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let out_c = weight.shape[3];
    let patch = g.patch();
    let in_len = g.h * g.w * g.c;
    let pixels = g.h * g.w;
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in dout.chunks_exact(out_c) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = need_input_grad.then(|| Vec::with_capacity(batch * in_len));
    let step = conv_chunk(g);
    for (i, start) in (0..batch).step_by(step).enumerate() {
        let n = step.min(batch - start);
        let chunk_rows = n * pixels;
        let cols = im2col(&x[start * in_len..(start + n) * in_len], n, g);
        let dchunk = &dout[start * pixels * out_c..][..chunk_rows * out_c];
        let beta = if i == 0 { 0.0 } else { 1.0 };
        gemm(patch, chunk_rows, out_c, &cols, true, dchunk, false, beta, dw);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = cols;
            gemm(chunk_rows, out_c, patch, dchunk, false, &weight.data, true, 0.0, &mut dcols);
            dx.extend(col2im(&dcols, n, g));
        }
    }
    dx
}

/// Returns pooled output and, per output element, the flat input index of
/// the selected maximum (first maximum on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut idx = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + 2 * y) * w + 2 * xx) * c + ch;
                    let mut best = x[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool_backward(dout: &[f64], idx: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dout.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

//! Raw numeric kernels shared by the graph ops and the tensor-level API.

use crate::error::{Error, Result};

use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (av, bv) in arow.iter().zip(brow) {
                        s += av * bv;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            // a is stored k x m
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub kdims: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d expects input [C,T,H,W] and kernel [Co,Ci,kt,kh,kw], got {:?} and {:?}",
                input, kernel
            )));
        }
        if kernel[1] != input[0] {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: input has {}, kernel expects {}",
                input[0], kernel[1]
            )));
        }
        let kdims = [kernel[2], kernel[3], kernel[4]];
        if kdims.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!(
                "conv3d kernel extents must be odd, got {:?}",
                kdims
            )));
        }
        Ok(ConvGeom {
            c_in: input[0],
            c_out: kernel[0],
            dims: [input[1], input[2], input[3]],
            kdims,
        })
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize, isize)> + '_ {
        let [kt, kh, kw] = self.kdims;
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        (0..kt).flat_map(move |a| {
            (0..kh).flat_map(move |b| {
                (0..kw).map(move |c| {
                    (
                        (a * kh + b) * kw + c,
                        a as isize - pt as isize,
                        b as isize - ph as isize,
                        c as isize - pw as isize,
                    )
                })
            })
        })
    }
}

fn valid_range(n: usize, d: isize) -> (usize, usize) {
    // output positions i with 0 <= i + d < n
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Visits every (output row, input row) pair of contiguous W-slices for one offset.
#[inline]
fn for_each_row(
    dims: [usize; 3],
    dt: isize,
    dh: isize,
    dw: isize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [t_n, h_n, w_n] = dims;
    let (t_lo, t_hi) = valid_range(t_n, dt);
    let (h_lo, h_hi) = valid_range(h_n, dh);
    let (w_lo, w_hi) = valid_range(w_n, dw);
    if w_lo >= w_hi {
        return;
    }
    let len = w_hi - w_lo;
    for t in t_lo..t_hi {
        let ts = (t as isize + dt) as usize;
        for h in h_lo..h_hi {
            let hs = (h as isize + dh) as usize;
            let out_off = (t * h_n + h) * w_n + w_lo;
            let in_off = (ts * h_n + hs) * w_n + (w_lo as isize + dw) as usize;
            f(out_off, in_off, len);
        }
    }
}

pub(crate) fn conv3d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let vol: usize = g.dims.iter().product();
    let ksz: usize = g.kdims.iter().product();
    for co in 0..g.c_out {
        let out_c = &mut out[co * vol..(co + 1) * vol];
        for ci in 0..g.c_in {
            let in_c = &input[ci * vol..(ci + 1) * vol];
            let kbase = (co * g.c_in + ci) * ksz;
            for (ko, dt, dh, dw) in g.offsets() {
                let wv = kernel[kbase + ko];
                if wv == 0.0 {
                    continue;
                }
                for_each_row(g.dims, dt, dh, dw, |o, i, len| {
                    for (ov, iv) in out_c[o..o + len].iter_mut().zip(&in_c[i..i + len]) {
                        *ov += wv * iv;
                    }
                });
            }
        }
    }
}

pub(crate) fn conv3d_backward_input(
    g: &ConvGeom,
    grad_out: &[f64],
    kernel: &[f64],
    grad_in: &mut [f64],
) {
    let vol: usize = g.dims.iter().product();
    let ksz: usize = g.kdims.iter().product();
    for co in 0..g.c_out {
        let go = &grad_out[co * vol..(co + 1) * vol];
        for ci in 0..g.c_in {
            let gi = &mut grad_in[ci * vol..(ci + 1) * vol];
            let kbase = (co * g.c_in + ci) * ksz;
            for (ko, dt, dh, dw) in g.offsets() {
                let wv = kernel[kbase + ko];
                if wv == 0.0 {
                    continue;
                }
                for_each_row(g.dims, dt, dh, dw, |o, i, len| {
                    for (iv, ov) in gi[i..i + len].iter_mut().zip(&go[o..o + len]) {
                        *iv += wv * ov;
                    }
                });
            }
        }
    }
}

pub(crate) fn conv3d_backward_kernel(
    g: &ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    grad_kernel: &mut [f64],
) {
    let vol: usize = g.dims.iter().product();
    let ksz: usize = g.kdims.iter().product();
    for co in 0..g.c_out {
        let go = &grad_out[co * vol..(co + 1) * vol];
        for ci in 0..g.c_in {
            let in_c = &input[ci * vol..(ci + 1) * vol];
            let kbase = (co * g.c_in + ci) * ksz;
            for (ko, dt, dh, dw) in g.offsets() {
                let mut acc = 0.0;
                for_each_row(g.dims, dt, dh, dw, |o, i, len| {
                    let mut s = 0.0;
                    for (ov, iv) in go[o..o + len].iter().zip(&in_c[i..i + len]) {
                        s += ov * iv;
                    }
                    acc += s;
                });
                grad_kernel[kbase + ko] += acc;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis(shape: &[usize], axis: usize, x: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                y[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                y[base + l * inner] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_axis_backward(
    shape: &[usize],
    axis: usize,
    y: &[f64],
    g: &[f64],
    gx: &mut [f64],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += g[base + l * inner] * y[base + l * inner];
            }
            for l in 0..len {
                let idx = base + l * inner;
                gx[idx] += y[idx] * (g[idx] - dot);
            }
        }
    }
}

/// Layer norm over rows of length `d`. Returns (output, normalized input, inverse std per row).
pub(crate) fn layer_norm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[r * d + j] = xh;
            y[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, xhat, inv_std)
}

pub fn conv3d(input: &Tensor, kernel: &Tensor, padding: [usize; 3]) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape())?;
    let same = [g.kdims[0] / 2, g.kdims[1] / 2, g.kdims[2] / 2];
    if padding != same {
        return Err(Error::invalid(format!(
            "conv3d supports same padding only: expected {:?}, got {:?}",
            same, padding
        )));
    }
    let mut out = vec![0.0; g.c_out * g.dims.iter().product::<usize>()];
    conv3d_forward(&g, input.data(), kernel.data(), &mut out);
    Tensor::new(vec![g.c_out, g.dims[0], g.dims[1], g.dims[2]], out)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "softmax axis {} out of range for rank {}",
            axis,
            x.rank()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Tensor::new(x.shape().to_vec(), softmax_axis(x.shape(), axis, x.data()))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm affine params must be [{}], got {:?} and {:?}",
            d,
            gamma.shape(),
            beta.shape()
        )));
    }
    let (y, _, _) = layer_norm_rows(x.data(), d, gamma.data(), beta.data());
    Tensor::new(x.shape().to_vec(), y)
}

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;

use super::kernels::{self, ConvGeom};
use super::tensor::strides;
use super::Tensor;
use crate::error::{Error, Result};
use crate::nufft::kernel::Grid;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Sum(Var),
    Mean(Var),
    FrameMeans(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        dims: [usize; 4],
    },
    Conv3d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    Nudft {
        image: Var,
        coords: Var,
    },
    NudftAdjoint {
        samples: Var,
        coords: Var,
    },
}

enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    // (Sx, Sy) per sample, for the coordinate derivative of the forward transform
    Moments(Vec<[Complex64; 2]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    saved: Saved,
}

/// Record of a forward computation, consumed by [`Graph::backward`].
///
/// Nodes are appended in evaluation order so the node list is always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf, keyed by the leaf's [`Var`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn check_coords(coords: &Tensor, frames: usize) -> Result<()> {
    let s = coords.shape();
    if s.len() != 4 || s[3] != 2 || s[0] != frames {
        return Err(Error::shape(format!(
            "trajectory coordinates must be [{}, shots, points, 2], got {:?}",
            frames, s
        )));
    }
    if let Some(v) = coords.data().iter().find(|v| v.abs() > PI) {
        return Err(Error::invalid(format!(
            "trajectory coordinate {} outside [-pi, pi]",
            v
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var], saved: Saved) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. Leaves with `requires_grad` appear in the [`Gradients`] of a backward pass.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            saved: Saved::None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                name,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b], Saved::None)
    }

    fn map(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, value, op, &[a], Saved::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), |x| gelu(x).0)
    }

    /// Adds `bias` (shape `[d]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last dim {}",
                self.shape(bias),
                d
            )));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias], Saved::None)
    }

    /// Adds `bias` (shape `[c]`) along the first axis of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).first().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {:?} does not match first dim {}",
                self.shape(bias),
                c
            )));
        }
        let xv = self.value(x);
        let inner = xv.numel() / c.max(1);
        let b = self.value(bias).data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / inner])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "add_channel_bias",
            value,
            Op::AddChannelBias(x, bias),
            &[x, bias],
            Saved::None,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a], Saved::None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.sum() / v.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a], Saved::None)
    }

    /// Mean over every axis but the first: `[T, ...] -> [T]`.
    pub fn frame_means(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = *v
            .shape()
            .first()
            .ok_or_else(|| Error::shape("frame_means on a scalar"))?;
        let inner = v.numel() / t.max(1);
        let data = v
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(vec![t], data)?;
        self.push("frame_means", value, Op::FrameMeans(a), &[a], Saved::None)
    }

    /// Batched matrix product: `[B, M, K] x [B, K, N]` (or `[B, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!(
                "bmm inner dims: {:?} x {:?} (trans_b={})",
                sa, sb, trans_b
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm_acc(
                false,
                trans_b,
                m,
                n,
                k,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            "bmm",
            value,
            Op::Bmm {
                a,
                b,
                trans_b,
                dims: [batch, m, k, n],
            },
            &[a, b],
            Saved::None,
        )
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Same-padded 3D cross-correlation, `[Ci,T,H,W] * [Co,Ci,kt,kh,kw] -> [Co,T,H,W]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel))?;
        let mut out = vec![0.0; geom.c_out * geom.dims.iter().product::<usize>()];
        kernels::conv3d_forward(&geom, self.value(input).data(), self.value(kernel).data(), &mut out);
        let value = Tensor::new(vec![geom.c_out, geom.dims[0], geom.dims[1], geom.dims[2]], out)?;
        self.push(
            "conv3d",
            value,
            Op::Conv3d {
                input,
                kernel,
                geom,
            },
            &[input, kernel],
            Saved::None,
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let y = kernels::softmax_axis(&shape, axis, self.value(x).data());
        self.push(
            "softmax",
            Tensor::new(shape, y)?,
            Op::Softmax { x, axis },
            &[x],
            Saved::None,
        )
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: affine params {:?}, {:?} vs last dim {}",
                self.shape(gamma),
                self.shape(beta),
                d
            )));
        }
        let (y, xhat, inv_std) = kernels::layer_norm_rows(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        self.push(
            "layer_norm",
            Tensor::new(shape, y)?,
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
            Saved::LayerNorm { xhat, inv_std },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x], Saved::None)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {:?} is not a permutation of rank {}",
                perm,
                shape.len()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        permute_visit(&shape, perm, |o, i| out[o] = src[i]);
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
            Saved::None,
        )
    }

    /// Elements `start .. start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{}, {}) along axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "slice",
            Tensor::new(out_shape, out)?,
            Op::Slice { x, axis, start },
            &[x],
            Saved::None,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {} for {:?}", axis, first)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            Saved::None,
        )
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("pad axis {} for {:?}", axis, shape)));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let m = n + before + after;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        self.push(
            "pad",
            Tensor::new(out_shape, out)?,
            Op::Pad { x, axis, before },
            &[x],
            Saved::None,
        )
    }

    /// Exact non-uniform DFT of a real image sequence `[T,H,W]` at coordinates
    /// `[T,S,m,2]`, producing `[T,S,m,2]` (real, imaginary) samples.
    pub fn nudft(&mut self, image: Var, coords: Var) -> Result<Var> {
        let ishape = self.shape(image).to_vec();
        if ishape.len() != 3 {
            return Err(Error::shape(format!("nudft image must be [T,H,W], got {:?}", ishape)));
        }
        let (t_n, h, w) = (ishape[0], ishape[1], ishape[2]);
        check_coords(self.value(coords), t_n)?;
        let with_moments = self.needs(coords);
        let cshape = self.shape(coords).to_vec();
        let per_frame = cshape[1] * cshape[2];
        let mut grid = Grid::new(h, w);
        let img = self.value(image).data();
        let k = self.value(coords).data();
        let mut out = vec![0.0; t_n * per_frame * 2];
        let mut saved = Vec::with_capacity(if with_moments { t_n * per_frame } else { 0 });
        for t in 0..t_n {
            let frame = &img[t * h * w..(t + 1) * h * w];
            for j in 0..per_frame {
                let idx = t * per_frame + j;
                let [s0, sx, sy] = grid.moments(frame, None, k[2 * idx], k[2 * idx + 1], with_moments);
                out[2 * idx] = s0.re;
                out[2 * idx + 1] = s0.im;
                if with_moments {
                    saved.push([sx, sy]);
                }
            }
        }
        let saved = if with_moments { Saved::Moments(saved) } else { Saved::None };
        self.push(
            "nudft",
            Tensor::new(cshape, out)?,
            Op::Nudft { image, coords },
            &[image, coords],
            saved,
        )
    }

    /// Scaled adjoint `(1/(H W)) sum_j X_j exp(+i w_j . r)` onto an `[H, W]` grid,
    /// producing `[2, T, H, W]` (real plane, imaginary plane).
    pub fn nudft_adjoint(&mut self, samples: Var, coords: Var, grid_hw: (usize, usize)) -> Result<Var> {
        let cshape = self.shape(coords).to_vec();
        if cshape.len() != 4 {
            return Err(Error::shape(format!("adjoint coords must be [T,S,m,2], got {:?}", cshape)));
        }
        check_coords(self.value(coords), cshape[0])?;
        if self.shape(samples) != cshape.as_slice() {
            return Err(Error::shape(format!(
                "adjoint samples {:?} do not match coords {:?}",
                self.shape(samples),
                cshape
            )));
        }
        let (h, w) = grid_hw;
        let t_n = cshape[0];
        let per_frame = cshape[1] * cshape[2];
        let npix = h * w;
        let scale = 1.0 / npix as f64;
        let mut grid = Grid::new(h, w);
        let x = self.value(samples).data();
        let k = self.value(coords).data();
        let mut out = vec![0.0; 2 * t_n * npix];
        let (re_all, im_all) = out.split_at_mut(t_n * npix);
        for t in 0..t_n {
            let re = &mut re_all[t * npix..(t + 1) * npix];
            let im = &mut im_all[t * npix..(t + 1) * npix];
            for j in 0..per_frame {
                let idx = t * per_frame + j;
                let v = Complex64::new(x[2 * idx], x[2 * idx + 1]) * scale;
                grid.scatter(re, im, k[2 * idx], k[2 * idx + 1], v);
            }
        }
        self.push(
            "nudft_adjoint",
            Tensor::new(vec![2, t_n, h, w], out)?,
            Op::NudftAdjoint { samples, coords },
            &[samples, coords],
            Saved::None,
        )
    }

    /// Reverse-mode sweep from `output` seeded with `seed`. Consumes the graph.
    pub fn backward(self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        if !seed.is_finite() {
            return Err(Error::NonFinite("backward seed".into()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed.data().to_vec());
        let mut result = Gradients::default();

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {}", id)));
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    result
                        .map
                        .insert(Var(id), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(result)
    }

    /// Convenience for scalar outputs (seed 1).
    pub fn backward_scalar(self, output: Var) -> Result<Gradients> {
        let seed = Tensor::new(self.shape(output).to_vec(), vec![1.0])?;
        self.backward(output, &seed)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // accumulator for an input, allocated on first use; None when no gradient is needed
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot!(v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(*a) {
                    add_into(s, g);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = slot!(*a) {
                    for ((x, gy), bv) in s.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(s) = slot!(*b) {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(s) = slot!(*a) {
                    add_into(s, g);
                }
            }
            Op::Square(a) => {
                if let Some(s) = slot!(*a) {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(*a)) {
                        *x += 2.0 * av * gy;
                    }
                }
            }
            Op::Abs(a) => {
                if let Some(s) = slot!(*a) {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * if *av > 0.0 {
                            1.0
                        } else if *av < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(s) = slot!(*a) {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(*a)) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(s) = slot!(*a) {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * gelu(*av).1;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = slot!(*x) {
                    add_into(s, g);
                }
                let d = nodes[b.0].value.numel();
                if let Some(s) = slot!(*b) {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(s) = slot!(*x) {
                    add_into(s, g);
                }
                let c = nodes[b.0].value.numel();
                let inner = g.len() / c.max(1);
                if let Some(s) = slot!(*b) {
                    for (ch, chunk) in g.chunks(inner.max(1)).enumerate() {
                        s[ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = slot!(*a) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|x| *x += c);
                }
            }
            Op::FrameMeans(a) => {
                if let Some(s) = slot!(*a) {
                    let inner = s.len() / g.len().max(1);
                    for (chunk, gt) in s.chunks_mut(inner.max(1)).zip(g) {
                        let c = gt / inner as f64;
                        chunk.iter_mut().for_each(|x| *x += c);
                    }
                }
            }
            Op::Bmm { a, b, trans_b, dims } => {
                let [batch, m, k, n] = *dims;
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = slot!(*a) {
                    // dA = dC op(B)^T
                    for i in 0..batch {
                        kernels::gemm_acc(
                            false,
                            !trans_b,
                            m,
                            k,
                            n,
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut s[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(s) = slot!(*b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [N, K]: dB = dC^T A
                            kernels::gemm_acc(true, false, n, k, m, gi, ai, si);
                        } else {
                            // dB = A^T dC
                            kernels::gemm_acc(true, false, k, n, m, ai, gi, si);
                        }
                    }
                }
            }
            Op::Conv3d {
                input,
                kernel,
                geom,
            } => {
                if let Some(s) = slot!(*input) {
                    kernels::conv3d_backward_input(geom, g, val(*kernel), s);
                }
                if let Some(s) = slot!(*kernel) {
                    kernels::conv3d_backward_kernel(geom, g, val(*input), s);
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(s) = slot!(*x) {
                    kernels::softmax_axis_backward(node.value.shape(), *axis, node.value.data(), g, s);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    return Err(Error::Unsupported("layer_norm without saved statistics".into()));
                };
                let d = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                if let Some(s) = slot!(*gamma) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(s) = slot!(*beta) {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                }
                if let Some(s) = slot!(*x) {
                    let mut gxh = vec![0.0; d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            gxh[j] = grow[j] * gam[j];
                            mean_g += gxh[j];
                            mean_gx += gxh[j] * xrow[j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        let srow = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            srow[j] += inv_std[r] * (gxh[j] - mean_g - xrow[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(s) = slot!(*x) {
                    permute_visit(nodes[x.0].value.shape(), perm, |o, i| s[i] += g[o]);
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(s) = slot!(*x) {
                    let (outer, n, inner) = kernels::axis_split(nodes[x.0].value.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    if let Some(s) = slot!(p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut s[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner]);
                        }
                    }
                    offset += n;
                }
            }
            Op::Pad { x, axis, before } => {
                if let Some(s) = slot!(*x) {
                    let (outer, n, inner) = kernels::axis_split(nodes[x.0].value.shape(), *axis);
                    let m = node.value.shape()[*axis];
                    for o in 0..outer {
                        let src = (o * m + before) * inner;
                        add_into(&mut s[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner]);
                    }
                }
            }
            Op::Nudft { image, coords } => {
                let ishape = nodes[image.0].value.shape();
                let (t_n, h, w) = (ishape[0], ishape[1], ishape[2]);
                let per_frame = g.len() / 2 / t_n;
                let k = val(*coords);
                if let Some(s) = slot!(*coords) {
                    let Saved::Moments(moments) = &node.saved else {
                        return Err(Error::Unsupported("nudft coordinate gradient without saved moments".into()));
                    };
                    for (idx, [sx, sy]) in moments.iter().enumerate() {
                        let gc = Complex64::new(g[2 * idx], g[2 * idx + 1]).conj();
                        let mi = Complex64::new(0.0, -1.0);
                        s[2 * idx] += (gc * mi * sx).re;
                        s[2 * idx + 1] += (gc * mi * sy).re;
                    }
                }
                if let Some(s) = slot!(*image) {
                    let mut grid = Grid::new(h, w);
                    let mut re = vec![0.0; h * w];
                    let mut im = vec![0.0; h * w];
                    for t in 0..t_n {
                        re.iter_mut().for_each(|v| *v = 0.0);
                        im.iter_mut().for_each(|v| *v = 0.0);
                        for j in 0..per_frame {
                            let idx = t * per_frame + j;
                            let gv = Complex64::new(g[2 * idx], g[2 * idx + 1]);
                            grid.scatter(&mut re, &mut im, k[2 * idx], k[2 * idx + 1], gv);
                        }
                        add_into(&mut s[t * h * w..(t + 1) * h * w], &re);
                    }
                }
            }
            Op::NudftAdjoint { samples, coords } => {
                let oshape = node.value.shape();
                let (t_n, h, w) = (oshape[1], oshape[2], oshape[3]);
                let npix = h * w;
                let scale = 1.0 / npix as f64;
                let cshape = nodes[coords.0].value.shape();
                let per_frame = cshape[1] * cshape[2];
                let k = val(*coords);
                let x = val(*samples);
                let want_coords = nodes[coords.0].needs_grad;
                let want_samples = nodes[samples.0].needs_grad;
                if !(want_coords || want_samples) {
                    return Ok(());
                }
                let (g_re, g_im) = g.split_at(t_n * npix);
                let mut grid = Grid::new(h, w);
                let mut gs = vec![0.0; if want_samples { x.len() } else { 0 }];
                let mut gk = vec![0.0; if want_coords { k.len() } else { 0 }];
                for t in 0..t_n {
                    let fr = &g_re[t * npix..(t + 1) * npix];
                    let fi = &g_im[t * npix..(t + 1) * npix];
                    for j in 0..per_frame {
                        let idx = t * per_frame + j;
                        let [s0, sx, sy] = grid.moments(fr, Some(fi), k[2 * idx], k[2 * idx + 1], want_coords);
                        if want_samples {
                            gs[2 * idx] += s0.re * scale;
                            gs[2 * idx + 1] += s0.im * scale;
                        }
                        if want_coords {
                            let xi = Complex64::new(x[2 * idx], x[2 * idx + 1]) * scale * Complex64::new(0.0, 1.0);
                            gk[2 * idx] += (xi * sx.conj()).re;
                            gk[2 * idx + 1] += (xi * sy.conj()).re;
                        }
                    }
                }
                if let Some(s) = slot!(*samples) {
                    add_into(s, &gs);
                }
                if let Some(s) = slot!(*coords) {
                    add_into(s, &gk);
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Calls `f(out_offset, in_offset)` for every element of `x.permute(perm)`.
fn permute_visit(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for o in 0..total {
        f(o, in_off);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            in_off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

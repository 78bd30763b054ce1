//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the tape is acyclic by construction and
//! [`Graph::backward`] is a single reverse sweep.

use std::f64::consts::LN_2;

use super::conv::{self, ConvGeom};
use crate::entropy::mog_kernel;
use crate::error::{dim_err, Error, Result};
use crate::nonlocal::kernel as nl_kernel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DepthToSpace {
        x: Var,
        factor: usize,
    },
    PadBottomRight {
        x: Var,
    },
    Crop {
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    PRelu {
        x: Var,
        a: Var,
    },
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        split: AxisSplit,
    },
    LogSoftmax {
        x: Var,
        split: AxisSplit,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        split: AxisSplit,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    StraightThrough {
        x: Var,
    },
    Centers(Var),
    NonLocal {
        y: Var,
        logw: Var,
        geom: nl_kernel::Geom,
    },
    MogProb {
        pi: Var,
        mu: Var,
        scale: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    AvgPool2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- convolution and spatial rearrangement -------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return dim_err(format!("conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be at least 1".into()));
        }
        if ws[1] != xs[1] {
            return dim_err(format!(
                "conv2d channel axis: input has {} channels, weight expects {}",
                xs[1], ws[1]
            ));
        }
        if ws[2] != ws[3] {
            return dim_err(format!("conv2d kernel must be square, got {}x{}", ws[2], ws[3]));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return dim_err(format!(
                "conv2d spatial axes: kernel {k} does not fit padded input {}x{} (pad {pad})",
                xs[2], xs[3]
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return dim_err(format!(
                    "conv2d bias has shape {:?}, expected [{}]",
                    self.shape(b),
                    ws[0]
                ));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![geom.n, geom.co, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Moves channel groups of `factor²` into `factor`×`factor` spatial
    /// cells: output pixel `(h·f + i, w·f + j)` of channel `c` reads input
    /// channel `c·f² + i·f + j`.
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err(format!("depth_to_space expects NCHW, got {s:?}"));
        }
        let ff = factor * factor;
        if factor == 0 || s[1] % ff != 0 {
            return dim_err(format!(
                "depth_to_space: channel count {} not divisible by {ff}",
                s[1]
            ));
        }
        let (n, c, h, w) = (s[0], s[1] / ff, s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let ic = ch * ff + (y % factor) * factor + xx % factor;
                        out[((b * c + ch) * ho + y) * wo + xx] =
                            src[((b * s[1] + ic) * h + y / factor) * w + xx / factor];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::DepthToSpace { x, factor }, &[x]))
    }

    /// Zero-pads an NCHW tensor on the bottom and right edges.
    pub fn pad_bottom_right(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h < s[2] || w < s[3] {
            return dim_err(format!("cannot pad {s:?} to {h}x{w}"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * h * w];
        for nc in 0..s[0] * s[1] {
            for y in 0..s[2] {
                let d = (nc * h + y) * w;
                let o = (nc * s[2] + y) * s[3];
                out[d..d + s[3]].copy_from_slice(&src[o..o + s[3]]);
            }
        }
        let t = Tensor::new(vec![s[0], s[1], h, w], out)?;
        Ok(self.push(t, Op::PadBottomRight { x }, &[x]))
    }

    /// Keeps the top-left `h`×`w` window of an NCHW tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h > s[2] || w > s[3] {
            return dim_err(format!("cannot crop {s:?} to {h}x{w}"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * h * w];
        for nc in 0..s[0] * s[1] {
            for y in 0..h {
                let d = (nc * h + y) * w;
                let o = (nc * s[2] + y) * s[3];
                out[d..d + w].copy_from_slice(&src[o..o + w]);
            }
        }
        let t = Tensor::new(vec![s[0], s[1], h, w], out)?;
        Ok(self.push(t, Op::Crop { x }, &[x]))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return dim_err(format!("avg_pool2 needs NCHW with spatial dims >= 2, got {s:?}"));
        }
        let (ho, wo) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        for nc in 0..s[0] * s[1] {
            let plane = &src[nc * s[2] * s[3]..];
            for y in 0..ho {
                for xx in 0..wo {
                    let a = plane[2 * y * s[3] + 2 * xx];
                    let b = plane[2 * y * s[3] + 2 * xx + 1];
                    let c = plane[(2 * y + 1) * s[3] + 2 * xx];
                    let d = plane[(2 * y + 1) * s[3] + 2 * xx + 1];
                    out[(nc * ho + y) * wo + xx] = 0.25 * (a + b + c + d);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), name)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Offset(x), &[x])
    }

    /// Parametric ReLU with one learnable slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(a) != [s[1]] {
            return dim_err(format!(
                "prelu slope shape {:?} does not match channels of {s:?}",
                self.shape(a)
            ));
        }
        let inner: usize = s[2..].iter().product();
        let slopes = self.value(a).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { slopes[(i / inner) % s[1]] * v })
            .collect();
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::PRelu { x, a }, &[x, a]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Ln(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x), &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        self.push(t, Op::Powf(x, p), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<AxisSplit> {
        let s = self.shape(x);
        if axis >= s.len() {
            return dim_err(format!("axis {axis} out of range for shape {s:?}"));
        }
        Ok(AxisSplit::of(s, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_split(x, axis)?;
        let t = softmax_values(self.value(x), split, false);
        Ok(self.push(t, Op::Softmax { x, split }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_split(x, axis)?;
        let t = softmax_values(self.value(x), split, true);
        Ok(self.push(t, Op::LogSoftmax { x, split }, &[x]))
    }

    // ---- reductions and layout ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_split(x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for l in 0..split.len {
                let row = &src[(o * split.len + l) * split.inner..][..split.inner];
                for (d, v) in out[o * split.inner..][..split.inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, split }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let split = self.axis_split(x, axis)?;
        if start + len > split.len {
            return dim_err(format!(
                "slice [{start}, {}) out of range for axis {axis} of length {}",
                start + len,
                split.len
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            out.extend_from_slice(&src[(o * split.len + start) * split.inner..][..len * split.inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Picks flat elements of `x`; the result is 1-D.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Usage(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    // ---- model-specific operators -------------------------------------

    /// Forwards `quantized` while routing the incoming gradient to `x`
    /// unchanged (identity Jacobian).
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        same_shape(self.value(x), &quantized, "straight_through")?;
        Ok(self.push(quantized, Op::StraightThrough { x }, &[x]))
    }

    /// Row-wise cumulative sum of `exp(sigma)` for a `[M, L]` tensor.
    pub fn centers(&mut self, sigma: Var) -> Result<Var> {
        let s = self.shape(sigma).to_vec();
        if s.len() != 2 {
            return dim_err(format!("centers expects [M, L], got {s:?}"));
        }
        let src = self.value(sigma).data();
        let mut out = vec![0.0; src.len()];
        for r in 0..s[0] {
            let mut acc = 0.0;
            for j in 0..s[1] {
                acc += src[r * s[1] + j].exp();
                out[r * s[1] + j] = acc;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::Centers(sigma), &[sigma]))
    }

    /// Context-based non-local operator over `y: [N, M, H, W]` with
    /// log proxy weights `logw: [M, M]`. Output `[N, 2M, H, W]`: channels
    /// `0..M` hold the representation, `M..2M` the confidence.
    pub fn nonlocal(&mut self, y: Var, logw: Var, window: Option<usize>) -> Result<Var> {
        let s = self.shape(y).to_vec();
        if s.len() != 4 {
            return dim_err(format!("nonlocal expects [N, M, H, W], got {s:?}"));
        }
        if self.shape(logw) != [s[1], s[1]] {
            return dim_err(format!(
                "nonlocal proxy weights have shape {:?}, expected [{}, {}]",
                self.shape(logw),
                s[1],
                s[1]
            ));
        }
        let geom = nl_kernel::Geom {
            n: s[0],
            m: s[1],
            h: s[2],
            w: s[3],
            window,
        };
        let out = nl_kernel::forward(&geom, self.value(y).data(), self.value(logw).data());
        let t = Tensor::new(vec![s[0], 2 * s[1], s[2], s[3]], out)?;
        Ok(self.push(t, Op::NonLocal { y, logw, geom }, &[y, logw]))
    }

    /// Discretized mixture-of-Gaussians mass on `[lo, hi]` per code.
    ///
    /// `pi`, `mu`, `scale` are `[N, C, M, H, W]`; `lo`/`hi` hold one
    /// interval per code (`N·M·H·W` entries, infinities allowed).
    pub fn mog_prob(&mut self, pi: Var, mu: Var, scale: Var, lo: Vec<f64>, hi: Vec<f64>) -> Result<Var> {
        let s = self.shape(pi).to_vec();
        if s.len() != 5 || self.shape(mu) != s.as_slice() || self.shape(scale) != s.as_slice() {
            return dim_err(format!(
                "mog_prob expects equal [N, C, M, H, W] shapes, got {s:?}, {:?}, {:?}",
                self.shape(mu),
                self.shape(scale)
            ));
        }
        let plane = s[2] * s[3] * s[4];
        if lo.len() != s[0] * plane || hi.len() != lo.len() {
            return dim_err(format!(
                "mog_prob bounds have {} / {} entries, expected {}",
                lo.len(),
                hi.len(),
                s[0] * plane
            ));
        }
        let out = mog_kernel::forward(
            s[0],
            s[1],
            plane,
            self.value(pi).data(),
            self.value(mu).data(),
            self.value(scale).data(),
            &lo,
            &hi,
        );
        let t = Tensor::new(vec![s[0], s[2], s[3], s[4]], out)?;
        Ok(self.push(t, Op::MogProb { pi, mu, scale, lo, hi }, &[pi, mu, scale]))
    }

    /// `-Σ log2(max(p, floor))`, the code length in bits.
    pub fn bits(&mut self, p: Var, floor: f64) -> Var {
        let c = self.clamp(p, floor, f64::INFINITY);
        let l = self.ln(c);
        let s = self.sum(l);
        self.scale(s, -1.0 / LN_2)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// [`Graph::param`] receives a gradient (zero when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, n.needs_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(d) => Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            slot => *slot = Some(d),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let r = conv::backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.map_or(false, |b| self.wants(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::DepthToSpace { x, factor } => {
                let s = self.nodes[x.0].value.shape();
                let f = *factor;
                let ff = f * f;
                let (n, c, h, w) = (s[0], s[1] / ff, s[2], s[3]);
                let (ho, wo) = (h * f, w * f);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let ic = ch * ff + (y % f) * f + xx % f;
                                dx[((b * s[1] + ic) * h + y / f) * w + xx / f] =
                                    g[((b * c + ch) * ho + y) * wo + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PadBottomRight { x } => {
                let s = self.nodes[x.0].value.shape();
                let os = node.value.shape();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for nc in 0..s[0] * s[1] {
                    for y in 0..s[2] {
                        let src = (nc * os[2] + y) * os[3];
                        let dst = (nc * s[2] + y) * s[3];
                        dx[dst..dst + s[3]].copy_from_slice(&g[src..src + s[3]]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Crop { x } => {
                let s = self.nodes[x.0].value.shape();
                let os = node.value.shape();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for nc in 0..s[0] * s[1] {
                    for y in 0..os[2] {
                        let src = (nc * os[2] + y) * os[3];
                        let dst = (nc * s[2] + y) * s[3];
                        dx[dst..dst + os[3]].copy_from_slice(&g[src..src + os[3]]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (ho, wo) = (s[2] / 2, s[3] / 2);
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for nc in 0..s[0] * s[1] {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let d = 0.25 * g[(nc * ho + y) * wo + xx];
                            let base = nc * s[2] * s[3];
                            dx[base + 2 * y * s[3] + 2 * xx] += d;
                            dx[base + 2 * y * s[3] + 2 * xx + 1] += d;
                            dx[base + (2 * y + 1) * s[3] + 2 * xx] += d;
                            dx[base + (2 * y + 1) * s[3] + 2 * xx + 1] += d;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                let db = g
                    .iter()
                    .zip(out)
                    .zip(bv)
                    .map(|((g, q), b)| -g * q / b)
                    .collect();
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Offset(x) | Op::Reshape(x) | Op::StraightThrough { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::PRelu { x, a } => {
                let xv = val(*x);
                let s = self.nodes[x.0].value.shape();
                let inner: usize = s[2..].iter().product();
                let slopes = val(*a);
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .zip(xv)
                        .enumerate()
                        .map(|(i, (g, &v))| if v > 0.0 { *g } else { slopes[(i / inner) % s[1]] * g })
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate_with(grads, *a, |da| {
                    for (i, (g, &v)) in g.iter().zip(xv).enumerate() {
                        if v <= 0.0 {
                            da[(i / inner) % s[1]] += g * v;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Ln(x) => {
                let dx = g.iter().zip(val(*x)).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let dx = g.iter().zip(val(*x)).map(|(g, v)| 2.0 * g * v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Powf(x, p) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| g * p * v.powf(p - 1.0))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, split } => {
                let mut dx = vec![0.0; g.len()];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let at = |l: usize| (o * split.len + l) * split.inner + i;
                        let dot: f64 = (0..split.len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..split.len {
                            dx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x, split } => {
                let mut dx = vec![0.0; g.len()];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let at = |l: usize| (o * split.len + l) * split.inner + i;
                        let total: f64 = (0..split.len).map(|l| g[at(l)]).sum();
                        for l in 0..split.len {
                            dx[at(l)] = g[at(l)] - out[at(l)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, split } => {
                let mut dx = vec![0.0; split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    for l in 0..split.len {
                        dx[(o * split.len + l) * split.inner..][..split.inner]
                            .copy_from_slice(&g[o * split.inner..][..split.inner]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis + 1..].iter().product();
                let total = base[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            dx.extend_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.nodes[x.0].value.shape();
                let split = AxisSplit::of(s, *axis);
                let len = node.value.shape()[*axis];
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..split.outer {
                        let dst = &mut dx[(o * split.len + start) * split.inner..][..len * split.inner];
                        for (d, v) in dst.iter_mut().zip(&g[o * len * split.inner..][..len * split.inner]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, v) in idx.iter().zip(g) {
                        dx[i] += v;
                    }
                });
            }
            Op::Centers(sigma) => {
                let s = self.nodes[sigma.0].value.shape();
                let sv = val(*sigma);
                let mut dx = vec![0.0; sv.len()];
                for r in 0..s[0] {
                    let mut tail = 0.0;
                    for j in (0..s[1]).rev() {
                        tail += g[r * s[1] + j];
                        dx[r * s[1] + j] = sv[r * s[1] + j].exp() * tail;
                    }
                }
                self.accumulate(grads, *sigma, dx);
            }
            Op::NonLocal { y, logw, geom } => {
                let (dy, dlogw) = nl_kernel::backward(geom, val(*y), val(*logw), g, self.wants(*y));
                if let Some(dy) = dy {
                    self.accumulate(grads, *y, dy);
                }
                self.accumulate(grads, *logw, dlogw);
            }
            Op::MogProb { pi, mu, scale, lo, hi } => {
                let s = self.nodes[pi.0].value.shape();
                let plane = s[2] * s[3] * s[4];
                let (dpi, dmu, ds) = mog_kernel::backward(
                    s[0],
                    s[1],
                    plane,
                    val(*pi),
                    val(*mu),
                    val(*scale),
                    lo,
                    hi,
                    g,
                );
                self.accumulate(grads, *pi, dpi);
                self.accumulate(grads, *mu, dmu);
                self.accumulate(grads, *scale, ds);
            }
        }
        Ok(())
    }
}

fn softmax_values(x: &Tensor, split: AxisSplit, log: bool) -> Tensor {
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..split.outer {
        for i in 0..split.inner {
            let at = |l: usize| (o * split.len + l) * split.inner + i;
            let max = (0..split.len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..split.len).map(|l| (src[at(l)] - max).exp()).sum();
            for l in 0..split.len {
                out[at(l)] = if log {
                    src[at(l)] - max - total.ln()
                } else {
                    (src[at(l)] - max).exp() / total
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

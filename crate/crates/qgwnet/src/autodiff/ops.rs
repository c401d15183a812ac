//! Primitive ops recorded on the tape.
//!
//! Every op validates shapes up front, computes its forward value, and
//! registers a backward rule that accumulates into its parents' gradient
//! slots. Shape errors name both offending shapes.

use rand::Rng;

use super::tape::{GradBuffer, Node, Tape, Var};
use super::tensor::{strides_of, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if lhs != rhs {
        return Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(())
}

/// out += a(m x k) . b(k x n)
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m x n) += transpose(a)(m x k from a(k x m)) . b(k x n)
pub(crate) fn mm_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m x n) += a(m x k) . transpose(b)(k x n from b(n x k))
pub(crate) fn mm_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Walks an output shape in row-major order yielding (out_flat, src_flat)
/// where `src` is broadcast against `out` (src dims of extent 1 are pinned).
fn broadcast_walk(
    src_shape_padded: &[usize],
    out_shape: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let out_len: usize = out_shape.iter().product();
    if rank == 0 {
        if out_len > 0 {
            visit(0, 0);
        }
        return;
    }
    let src_strides = strides_of(src_shape_padded);
    let bstride: Vec<usize> = (0..rank)
        .map(|d| if src_shape_padded[d] == 1 { 0 } else { src_strides[d] })
        .collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..out_len {
        visit(out, src);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += bstride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= bstride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn binary_parents(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if !a.same_tape(b) {
        return Err(Error::invalid(op, "operands recorded on different tapes"));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        binary_parents("add", &self, &rhs)?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let b = &nodes[rhs.idx].value;
        same_shape("add", a.shape(), b.shape())?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad;
        let (ai, bi, len) = (self.idx, rhs.idx, a.len());
        let (an, bn) = (nodes[self.idx].needs_grad, nodes[rhs.idx].needs_grad);
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                if an {
                    for (d, &gv) in buf.slot(ai, len).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if bn {
                    for (d, &gv) in buf.slot(bi, len).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("add", out, needs, back)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        binary_parents("sub", &self, &rhs)?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let b = &nodes[rhs.idx].value;
        same_shape("sub", a.shape(), b.shape())?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad;
        let (ai, bi, len) = (self.idx, rhs.idx, a.len());
        let (an, bn) = (nodes[self.idx].needs_grad, nodes[rhs.idx].needs_grad);
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                if an {
                    for (d, &gv) in buf.slot(ai, len).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if bn {
                    for (d, &gv) in buf.slot(bi, len).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("sub", out, needs, back)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        binary_parents("mul", &self, &rhs)?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let b = &nodes[rhs.idx].value;
        same_shape("mul", a.shape(), b.shape())?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad;
        let (ai, bi, len) = (self.idx, rhs.idx, a.len());
        let (an, bn) = (nodes[self.idx].needs_grad, nodes[rhs.idx].needs_grad);
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                if an {
                    let bvals = nodes[bi].value.data();
                    let dst = buf.slot(ai, len);
                    for i in 0..len {
                        dst[i] += g[i] * bvals[i];
                    }
                }
                if bn {
                    let avals = nodes[ai].value.data();
                    let dst = buf.slot(bi, len);
                    for i in 0..len {
                        dst[i] += g[i] * avals[i];
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("mul", out, needs, back)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i] * c;
                }
            }) as super::tape::BackFn
        });
        self.tape.push("scale", out, needs, back)
    }

    /// 2-D matrix product `(m x k) . (k x n)`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        binary_parents("matmul", &self, &rhs)?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let b = &nodes[rhs.idx].value;
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        mm_acc(a.data(), b.data(), m, k, n, &mut data);
        let out = Tensor::from_vec(vec![m, n], data)?;
        let needs = nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad;
        let (ai, bi) = (self.idx, rhs.idx);
        let (an, bn) = (nodes[self.idx].needs_grad, nodes[rhs.idx].needs_grad);
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                if an {
                    let b = nodes[bi].value.data().to_vec();
                    mm_bt_acc(g, &b, m, n, k, buf.slot(ai, m * k));
                }
                if bn {
                    let a = nodes[ai].value.data().to_vec();
                    mm_at_acc(&a, g, m, k, n, buf.slot(bi, k * n));
                }
            }) as super::tape::BackFn
        });
        self.tape.push("matmul", out, needs, back)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out_idx = self.tape.next_index();
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let data: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                let y = nodes[out_idx].value.data();
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }) as super::tape::BackFn
        });
        self.tape.push("tanh", out, needs, back)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out_idx = self.tape.next_index();
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let data: Vec<f64> = a.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                let y = nodes[out_idx].value.data();
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }) as super::tape::BackFn
        });
        self.tape.push("sigmoid", out, needs, back)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let data: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                let x = nodes[ai].value.data();
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    if x[i] > 0.0 {
                        dst[i] += g[i];
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("relu", out, needs, back)
    }

    /// Elementwise absolute value; subgradient 0 at the origin.
    pub fn abs(self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let data: Vec<f64> = a.data().iter().map(|x| x.abs()).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                let x = nodes[ai].value.data();
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                }
            }) as super::tape::BackFn
        });
        self.tape.push("abs", out, needs, back)
    }

    /// Keeps `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let shape = a.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {}..{} on axis {} of shape {:?}", start, end, axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mid = shape[axis];
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * mid * inner;
            data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let out = Tensor::from_vec(out_shape, data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, src_len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let dst = buf.slot(ai, src_len);
                for o in 0..outer {
                    let dbase = o * mid * inner + start * inner;
                    let gbase = o * width * inner;
                    for i in 0..width * inner {
                        dst[dbase + i] += g[gbase + i];
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("slice", out, needs, back)
    }

    /// Numpy-style broadcast to `target`: the source shape is right-aligned
    /// and dims of extent 1 (or missing leading dims) are expanded.
    pub fn broadcast_to(self, target: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let src_shape = a.shape();
        if src_shape.len() > target.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src_shape.to_vec(),
                rhs: target.to_vec(),
            });
        }
        let pad = target.len() - src_shape.len();
        let mut padded = vec![1usize; pad];
        padded.extend_from_slice(src_shape);
        for (d, (&s, &t)) in padded.iter().zip(target).enumerate() {
            if s != t && s != 1 {
                return Err(Error::invalid(
                    "broadcast",
                    format!("dim {} of {:?} cannot expand to {:?}", d, src_shape, target),
                ));
            }
        }
        let out_len: usize = target.iter().product();
        let mut data = vec![0.0; out_len];
        {
            let src = a.data();
            broadcast_walk(&padded, target, |o, s| data[o] = src[s]);
        }
        let out = Tensor::from_vec(target.to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, src_len) = (self.idx, a.len());
        let target_v = target.to_vec();
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let dst = buf.slot(ai, src_len);
                broadcast_walk(&padded, &target_v, |o, s| dst[s] += g[o]);
            }) as super::tape::BackFn
        });
        self.tape.push("broadcast", out, needs, back)
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(self, new_shape: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let expect: usize = new_shape.iter().product();
        if expect != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let out = Tensor::from_vec(new_shape.to_vec(), a.data().to_vec())?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i];
                }
            }) as super::tape::BackFn
        });
        self.tape.push("reshape", out, needs, back)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let total: f64 = a.data().iter().sum();
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let gv = g[0];
                for d in buf.slot(ai, len).iter_mut() {
                    *d += gv;
                }
            }) as super::tape::BackFn
        });
        self.tape.push("sum", Tensor::scalar(total), needs, back)
    }

    /// Mean of all elements (sum scaled by 1/len).
    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Inverted dropout: in train mode each element is zeroed independently
    /// with probability `p` and survivors are scaled by `1/(1-p)`, so eval
    /// mode is the identity.
    pub fn dropout<R: Rng>(self, p: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("p must satisfy 0 <= p < 1, got {}", p),
            ));
        }
        if !train || p == 0.0 {
            return Ok(self);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let nodes = self.tape.nodes();
        let a = &nodes[self.idx].value;
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.gen::<f64>() >= p { keep_scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let needs = nodes[self.idx].needs_grad;
        let (ai, len) = (self.idx, a.len());
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
                let dst = buf.slot(ai, len);
                for i in 0..len {
                    dst[i] += g[i] * mask[i];
                }
            }) as super::tape::BackFn
        });
        self.tape.push("dropout", out, needs, back)
    }

    /// Dilated causal 1-D convolution over the leading (time) axis.
    ///
    /// Input is `(T, ..., C_in)` with the middle axes treated as batch;
    /// weights are `(k, C_in, C_out)`. Output `(T - d*(k-1), ..., C_out)`
    /// with `y[t] = sum_j w[j] . x[t - j*d]`: taps look strictly backward,
    /// so no future value leaks into any output position.
    pub fn conv1d(self, weight: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        binary_parents("conv1d_dilated", &self, &weight)?;
        if dilation == 0 {
            return Err(Error::invalid("conv1d_dilated", "dilation must be >= 1"));
        }
        let nodes = self.tape.nodes();
        let x = &nodes[self.idx].value;
        let w = &nodes[weight.idx].value;
        if x.ndim() < 2 || w.ndim() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_dilated",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let t_len = x.shape()[0];
        let c_in = *x.shape().last().unwrap();
        let batch: usize = x.shape()[1..x.ndim() - 1].iter().product();
        let (k, wc_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d_dilated",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let support = 1 + dilation * (k - 1);
        if t_len < support {
            return Err(Error::invalid(
                "conv1d_dilated",
                format!(
                    "input length {} shorter than required support {} (kernel {}, dilation {})",
                    t_len, support, k, dilation
                ),
            ));
        }
        let t_out = t_len - dilation * (k - 1);
        let in_step = batch * c_in;
        let out_step = batch * c_out;
        let mut data = vec![0.0; t_out * out_step];
        for tp in 0..t_out {
            let dst = &mut data[tp * out_step..(tp + 1) * out_step];
            for j in 0..k {
                let src_t = tp + dilation * (k - 1) - j * dilation;
                let xin = &x.data()[src_t * in_step..(src_t + 1) * in_step];
                let wj = &w.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
                mm_acc(xin, wj, batch, c_in, c_out, dst);
            }
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = t_out;
        *out_shape.last_mut().unwrap() = c_out;
        let out = Tensor::from_vec(out_shape, data)?;
        let needs = nodes[self.idx].needs_grad || nodes[weight.idx].needs_grad;
        let (xi, wi) = (self.idx, weight.idx);
        let (xn, wn) = (nodes[self.idx].needs_grad, nodes[weight.idx].needs_grad);
        let x_len = x.len();
        let w_len = w.len();
        drop(nodes);
        let back: Option<super::tape::BackFn> = needs.then(|| {
            Box::new(move |g: &[f64], nodes: &[Node], buf: &mut GradBuffer| {
                if wn {
                    let xv = nodes[xi].value.data().to_vec();
                    let dw = buf.slot(wi, w_len);
                    for tp in 0..t_out {
                        let gt = &g[tp * out_step..(tp + 1) * out_step];
                        for j in 0..k {
                            let src_t = tp + dilation * (k - 1) - j * dilation;
                            let xin = &xv[src_t * in_step..(src_t + 1) * in_step];
                            mm_at_acc(
                                xin,
                                gt,
                                batch,
                                c_in,
                                c_out,
                                &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out],
                            );
                        }
                    }
                }
                if xn {
                    let wv = nodes[wi].value.data().to_vec();
                    let dx = buf.slot(xi, x_len);
                    for tp in 0..t_out {
                        let gt = &g[tp * out_step..(tp + 1) * out_step];
                        for j in 0..k {
                            let src_t = tp + dilation * (k - 1) - j * dilation;
                            let wj = &wv[j * c_in * c_out..(j + 1) * c_in * c_out];
                            mm_bt_acc(
                                gt,
                                wj,
                                batch,
                                c_out,
                                c_in,
                                &mut dx[src_t * in_step..(src_t + 1) * in_step],
                            );
                        }
                    }
                }
            }) as super::tape::BackFn
        });
        self.tape.push("conv1d_dilated", out, needs, back)
    }
}

/// Concatenates along `axis`; all parts must agree on every other dim.
pub fn concat<'t>(tape: &'t Tape, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat", "no tensors to concatenate"));
    }
    for p in parts {
        if !std::ptr::eq(p.tape, tape) {
            return Err(Error::invalid("concat", "operands recorded on different tapes"));
        }
    }
    let nodes = tape.nodes();
    let first = nodes[parts[0].idx].value.shape().to_vec();
    if axis >= first.len() {
        return Err(Error::invalid(
            "concat",
            format!("axis {} out of range for shape {:?}", axis, first),
        ));
    }
    let mut total_axis = 0usize;
    for p in parts {
        let s = nodes[p.idx].value.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.clone(),
                rhs: s.to_vec(),
            });
        }
        total_axis += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out_shape = first.clone();
    out_shape[axis] = total_axis;
    let mut data = vec![0.0; outer * total_axis * inner];
    let mut offsets = Vec::with_capacity(parts.len());
    let mut off = 0usize;
    for p in parts {
        let v = &nodes[p.idx].value;
        let mid = v.shape()[axis];
        for o in 0..outer {
            let src = &v.data()[o * mid * inner..(o + 1) * mid * inner];
            let dst_base = o * total_axis * inner + off * inner;
            data[dst_base..dst_base + mid * inner].copy_from_slice(src);
        }
        offsets.push((p.idx, off, mid, nodes[p.idx].needs_grad, v.len()));
        off += mid;
    }
    let needs = parts.iter().any(|p| nodes[p.idx].needs_grad);
    drop(nodes);
    let out = Tensor::from_vec(out_shape, data)?;
    let back: Option<super::tape::BackFn> = needs.then(|| {
        Box::new(move |g: &[f64], _nodes: &[Node], buf: &mut GradBuffer| {
            for &(idx, off, mid, pn, len) in &offsets {
                if !pn {
                    continue;
                }
                let dst = buf.slot(idx, len);
                for o in 0..outer {
                    let gbase = o * total_axis * inner + off * inner;
                    let dbase = o * mid * inner;
                    for i in 0..mid * inner {
                        dst[dbase + i] += g[gbase + i];
                    }
                }
            }
        }) as super::tape::BackFn
    });
    tape.push("concat", out, needs, back)
}

#[cfg(test)]
mod tests {
    use super::super::check::grad_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(x.tanh().unwrap().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().unwrap().scalar_value().unwrap(), 0.5);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![3, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).with_grad());
        let loss = x.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward(l1 + l2) == backward(l1) + backward(l2), exactly.
        let x0 = t(&[4], &[0.3, -1.2, 2.0, 0.7]).with_grad();

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let l1 = x.mul(x).unwrap().sum().unwrap();
        let l2 = x.tanh().unwrap().sum().unwrap();
        let total = l1.add(l2).unwrap();
        let g_total = tape.backward(total).unwrap().get(x).unwrap().clone();

        let tape1 = Tape::new();
        let x1 = tape1.leaf(x0.clone());
        let g1 = tape1
            .backward(x1.mul(x1).unwrap().sum().unwrap())
            .unwrap()
            .get(x1)
            .unwrap()
            .clone();
        let tape2 = Tape::new();
        let x2 = tape2.leaf(x0);
        let g2 = tape2
            .backward(x2.tanh().unwrap().sum().unwrap())
            .unwrap()
            .get(x2)
            .unwrap()
            .clone();

        for i in 0..4 {
            let expect = g1.data()[i] + g2.data()[i];
            let got = g_total.data()[i];
            // Accumulation order differs between the fused and separate
            // passes, so equality holds to f64 rounding.
            assert!((got - expect).abs() <= 4.0 * f64::EPSILON * expect.abs().max(1.0));
        }
    }

    #[test]
    fn dropout_zero_rate_is_exact_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.dropout(0.0, true, &mut rng).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.len(), 1); // no node recorded
    }

    #[test]
    fn dropout_eval_is_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let y = x.dropout(0.5, false, &mut rng).unwrap();
        assert_eq!(y.value().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(Tensor::zeros(vec![2]));
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_train_preserves_mean_within_three_standard_errors() {
        let n = 2000;
        let draws = 40;
        let p = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        for _ in 0..draws {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::full(vec![n], 1.0));
            let y = x.dropout(p, true, &mut rng).unwrap();
            total += y.value().data().iter().sum::<f64>();
        }
        let grand_mean = total / (n * draws) as f64;
        // Each surviving element is 1/(1-p) w.p. (1-p): mean 1, var p/(1-p).
        let se = (p / (1.0 - p) / (n * draws) as f64).sqrt();
        assert!(
            (grand_mean - 1.0).abs() < 3.0 * se,
            "mean {grand_mean} off by more than 3 SE ({se})"
        );
    }

    #[test]
    fn conv_identity_tap_truncates_input() {
        // w = [1, 0]: only the newest tap fires, so y equals x on the valid range.
        let tape = Tape::new();
        let x = tape.leaf(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[2, 1, 1], &[1.0, 0.0]));
        let y = x.conv1d(w, 1).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_hand_computed_dilation_one() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = x.conv1d(w, 1).unwrap();
        assert_eq!(y.value().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_hand_computed_dilation_two() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = x.conv1d(w, 2).unwrap();
        assert_eq!(y.value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn conv_errors_when_input_shorter_than_support() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 1, 1]));
        let w = tape.leaf(Tensor::zeros(vec![2, 1, 1]));
        let err = x.conv1d(w, 4).unwrap_err().to_string();
        assert!(err.contains("support 5"), "{err}");
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        let y = concat(&tape, &[a, b], 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn broadcast_repeats_trailing_vector() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.broadcast_to(&[2, 3, 2]).unwrap();
        assert_eq!(y.value().shape(), &[2, 3, 2]);
        assert_eq!(&y.value().data()[..4], &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_scalar_to_any_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5));
        let y = x.broadcast_to(&[2, 2]).unwrap();
        assert_eq!(y.value().data(), &[2.5; 4]);
    }

    // Finite-difference oracle over every differentiable primitive.
    #[test]
    fn primitives_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::from_vec(
                shape.to_vec(),
                (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>(),
            )
            .unwrap()
        };

        let x = rand_t(&mut rng, &[3, 4]);
        let cases: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>)> = vec![
            ("tanh", Box::new(|_t, v| v.tanh()?.sum())),
            ("sigmoid", Box::new(|_t, v| v.sigmoid()?.sum())),
            ("mul_self", Box::new(|_t, v| v.mul(v)?.sum())),
            ("scale", Box::new(|_t, v| v.scale(-2.5)?.sum())),
            ("slice", Box::new(|_t, v| v.slice(1, 1, 3)?.sum())),
            ("reshape", Box::new(|_t, v| v.reshape(&[4, 3])?.tanh()?.sum())),
            ("mean", Box::new(|_t, v| v.mul(v)?.mean())),
            (
                "matmul",
                Box::new(|t: &Tape, v: Var<'_>| {
                    let w = t.constant(
                        Tensor::from_vec(vec![4, 2], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect())
                            .unwrap(),
                    );
                    v.matmul(w)?.tanh()?.sum()
                }),
            ),
            (
                "broadcast",
                Box::new(|_t, v| v.slice(0, 0, 1)?.broadcast_to(&[3, 4])?.tanh()?.sum()),
            ),
            (
                "concat",
                Box::new(|t: &Tape, v: Var<'_>| {
                    let a = v.slice(0, 0, 1)?;
                    let b = v.slice(0, 1, 3)?;
                    concat(t, &[b, a], 0)?.tanh()?.sum()
                }),
            ),
        ];
        for (name, f) in cases {
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: finite-difference mismatch {err}");
        }

        // conv1d w.r.t. input and weights, multichannel with dilation.
        let x3 = rand_t(&mut rng, &[7, 2, 3]);
        let w3 = rand_t(&mut rng, &[2, 3, 4]);
        let wc = w3.clone();
        let err_x = grad_check(
            move |t: &Tape, v: Var<'_>| {
                let w = t.constant(wc.clone());
                v.conv1d(w, 2)?.tanh()?.sum()
            },
            &x3,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-4, "conv1d input grad: {err_x}");
        let xc = x3.clone();
        let err_w = grad_check(
            move |t: &Tape, v: Var<'_>| {
                let x = t.constant(xc.clone());
                x.conv1d(v, 2)?.tanh()?.sum()
            },
            &w3,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-4, "conv1d weight grad: {err_w}");

        // dropout backward with a frozen mask (same seed for every call).
        let err_d = grad_check(
            |_t: &Tape, v: Var<'_>| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                v.dropout(0.4, true, &mut rng)?.mul(v.tanh()?)?.sum()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_d < 1e-4, "dropout grad: {err_d}");
    }

    #[test]
    fn overflow_is_an_error_not_a_value() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2], 1e308));
        assert!(matches!(
            x.add(x).unwrap_err(),
            Error::NonFinite { op: "add" }
        ));
    }
}

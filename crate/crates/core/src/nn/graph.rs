//! Tape of tensor operations with reverse-mode differentiation.

use crate::error::{Error, Result};
use crate::Scalar;

use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary<T> {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
    Abs,
    /// `max(x, c)`; zero gradient where clamped.
    ClampMin(T),
    AddScalar(T),
    Scale(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Hyperparameters of a 1-d convolution over `[batch, channels, time]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    /// Zeros added on each side of the time axis.
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Stride-1 convolution whose output length equals its input length (odd kernels).
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups: 1,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

enum Op<T> {
    Leaf,
    Unary(Var, Unary<T>),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Conv1d(Var, Var, ConvParams),
    SumAxis(Var, usize),
    SumAll(Var),
    MaxAxis(Var, usize, Vec<usize>),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    L2Normalize(Var, Vec<T>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// `out = f(x)` elementwise with the derivative saved at forward time.
    Pointwise(Var, Vec<T>),
    /// `out[n, k]` depends only on `a[n]` and `b[n]`; partials saved per element.
    RowPair {
        a: Var,
        b: Var,
        da: Vec<T>,
        db: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Result<&Tensor<T>> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Detached(v.0));
        }
        self.grads[v.0].as_ref().ok_or(Error::Detached(v.0))
    }

    /// Moves the gradient out, substituting zeros when the output did not depend on `v`.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Result<Tensor<T>> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Detached(v.0));
        }
        Ok(self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row layout for `a (op) b` where each dim of `b` equals that of `a` or is 1.
struct Broadcast {
    rows: usize,
    len: usize,
    b_offsets: Vec<usize>,
    b_full_row: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let fail = || Error::Shape {
            op: "broadcast",
            detail: format!("{b:?} does not broadcast onto {a:?}"),
        };
        let b: Vec<usize> = if b.iter().product::<usize>() == 1 {
            vec![1; a.len()]
        } else if b.len() < a.len() {
            // right-aligned, missing leading dims broadcast
            std::iter::repeat(1).take(a.len() - b.len()).chain(b.iter().copied()).collect()
        } else {
            b.to_vec()
        };
        if b.len() != a.len() && !a.is_empty() {
            return Err(fail());
        }
        if a.is_empty() {
            return Ok(Self {
                rows: 1,
                len: 1,
                b_offsets: vec![0],
                b_full_row: false,
            });
        }
        if a.iter().zip(&b).any(|(&x, &y)| y != x && y != 1) {
            return Err(fail());
        }
        let r = a.len();
        let len = a[r - 1];
        let b_full_row = b[r - 1] == len && len != 1;
        let mut strides = vec![0usize; r];
        let mut acc = 1;
        for d in (0..r).rev() {
            strides[d] = if b[d] == 1 { 0 } else { acc };
            acc *= b[d];
        }
        let rows: usize = a[..r - 1].iter().product();
        let mut b_offsets = Vec::with_capacity(rows);
        let mut idx = vec![0usize; r - 1];
        for _ in 0..rows {
            b_offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..r - 1).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            rows,
            len,
            b_offsets,
            b_full_row,
        })
    }
}

/// Operation tape. Values are computed eagerly as nodes are pushed.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn unary(&mut self, x: Var, f: Unary<T>) -> Var {
        let out = self.value(x).map(|v| match f {
            Unary::Relu => v.max(T::zero()),
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => v.tanh(),
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Sqrt => v.sqrt(),
            Unary::Square => v * v,
            Unary::Recip => T::one() / v,
            Unary::Abs => v.abs(),
            Unary::ClampMin(c) => v.max(c),
            Unary::AddScalar(c) => v + c,
            Unary::Scale(c) => v * c,
        });
        self.push(out, Op::Unary(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len());
        for r in 0..bc.rows {
            let arow = &av[r * bc.len..(r + 1) * bc.len];
            let off = bc.b_offsets[r];
            if bc.b_full_row {
                let brow = &bv[off..off + bc.len];
                match kind {
                    Binary::Add => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x + y)),
                    Binary::Sub => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x - y)),
                    Binary::Mul => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x * y)),
                }
            } else {
                let y = bv[off];
                match kind {
                    Binary::Add => out.extend(arow.iter().map(|&x| x + y)),
                    Binary::Sub => out.extend(arow.iter().map(|&x| x - y)),
                    Binary::Mul => out.extend(arow.iter().map(|&x| x * y)),
                }
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Binary(a, b, kind), &[a, b]))
    }

    /// `a + b`, broadcasting `b` over size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// `x [n, in] @ w[out, in]^T -> [n, out]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input {xs:?} vs weight {ws:?}"),
            });
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let xr = &xv[i * k..(i + 1) * k];
            for o in 0..m {
                out[i * m + o] = dot(xr, &wv[o * k..(o + 1) * k]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(x, w), &[x, w]))
    }

    /// `x [b, cin, t]` convolved with `w [cout, cin / groups, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: String| Error::Shape { op: "conv1d", detail: d };
        if xs.len() != 3 || ws.len() != 3 {
            return Err(bad(format!("input {xs:?}, weight {ws:?}")));
        }
        let (b, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
            return Err(bad("stride, dilation and groups must be positive".into()));
        }
        if cin % p.groups != 0 || cout % p.groups != 0 || cin / p.groups != cin_g {
            return Err(bad(format!(
                "{cin} input channels, weight {ws:?}, {} groups",
                p.groups
            )));
        }
        let tout = p
            .output_len(t, k)
            .ok_or_else(|| bad(format!("time length {t} shorter than kernel span")))?;
        let cout_g = cout / p.groups;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); b * cout * tout];
        for bi in 0..b {
            for o in 0..cout {
                let g = o / cout_g;
                let yrow = &mut out[(bi * cout + o) * tout..(bi * cout + o + 1) * tout];
                for ci in 0..cin_g {
                    let i = g * cin_g + ci;
                    let xrow = &xv[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                    for kk in 0..k {
                        let wgt = wv[(o * cin_g + ci) * k + kk];
                        let (lo, hi, off) = tap_range(&p, kk, t, tout);
                        if p.stride == 1 {
                            let src = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            axpy(wgt, src, &mut yrow[lo..hi]);
                        } else {
                            for to in lo..hi {
                                let ti = (to * p.stride) as isize + off;
                                yrow[to] += wgt * xrow[ti as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, cout, tout], out)?;
        Ok(self.push(value, Op::Conv1d(x, w, p), &[x, w]))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = split3(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of_usize(n)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of_usize(n))
    }

    /// Max over `axis` (kept with size 1); ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "max_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = split3(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if xv[(o * n + j) * inner + i] > xv[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                arg.push(best);
                out.push(xv[(o * n + best) * inner + i]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::MaxAxis(x, axis, arg), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = split3(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same || axis >= s.len() {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Normalizes each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(xv.len() / d.max(1));
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let n = dot(row, row).sqrt();
            if !(n > T::zero()) {
                return Err(Error::ZeroVector("l2 normalization"));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::L2Normalize(x, norms), &[x]))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    ///
    /// Returns the output plus per-channel batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!("input {shape:?} needs a channel axis"),
            });
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!("{c} channels, affine {:?}", self.shape(gamma)),
            });
        }
        let (outer, _, inner) = split3(&shape, 1);
        let count = outer * inner;
        if count < 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: "training statistics need at least two values per channel".into(),
            });
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let nf = T::of_usize(count);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let row = &xv[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                mean[ch] += row.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for o in 0..outer {
            for ch in 0..c {
                let row = &xv[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                var[ch] += row.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / nf + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let unbiased = var.iter().map(|&v| v / T::of_usize(count - 1)).collect();
        let value = Tensor::new(shape, out)?;
        let node = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((node, mean, unbiased))
    }

    /// Elementwise map whose derivative is supplied alongside the value.
    pub fn pointwise(&mut self, x: Var, f: impl Fn(usize, T) -> (T, T)) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (vals, ders): (Vec<T>, Vec<T>) =
            xv.data().iter().enumerate().map(|(i, &v)| f(i, v)).unzip();
        let value = Tensor::new(shape, vals).expect("pointwise keeps the input shape");
        self.push(value, Op::Pointwise(x, ders), &[x])
    }

    /// Builds an `[n, k]` tensor from per-row parameter pairs `a[n]`, `b[n]`.
    ///
    /// `f(row, a, b)` returns the row's `k` values and their partials w.r.t. `a` and `b`.
    pub fn row_pair(
        &mut self,
        a: Var,
        b: Var,
        k: usize,
        f: impl Fn(usize, T, T) -> (Vec<T>, Vec<T>, Vec<T>),
    ) -> Result<Var> {
        let n = self.value(a).numel();
        if self.value(b).numel() != n {
            return Err(Error::Shape {
                op: "row_pair",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut vals = Vec::with_capacity(n * k);
        let mut da = Vec::with_capacity(n * k);
        let mut db = Vec::with_capacity(n * k);
        for r in 0..n {
            let (v, pa, pb) = f(r, av[r], bv[r]);
            vals.extend(v);
            da.extend(pa);
            db.extend(pb);
        }
        let value = Tensor::new(vec![n, k], vals)?;
        Ok(self.push(value, Op::RowPair { a, b, da, db }, &[a, b]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits {shape:?} for {} labels", labels.len()),
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (row, &y) in lv.chunks(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of_usize(labels.len());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !out.requires_grad {
            return Ok(Gradients { grads, requires });
        }
        grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, requires })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d: Vec<T> = (0..xv.len())
                    .map(|j| {
                        let (x, y, g) = (xv[j], yv[j], gv[j]);
                        g * match *f {
                            Unary::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Tanh => T::one() - y * y,
                            Unary::Exp => y,
                            Unary::Ln => T::one() / x,
                            Unary::Sqrt => T::of(0.5) / y,
                            Unary::Square => T::of(2.0) * x,
                            Unary::Recip => -y * y,
                            Unary::Abs => x.signum(),
                            Unary::ClampMin(c) => {
                                if x > c {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::AddScalar(_) => T::one(),
                            Unary::Scale(c) => c,
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?);
            }
            Op::Binary(a, b, kind) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gv.to_vec(),
                        Binary::Mul => {
                            let mut out = Vec::with_capacity(gv.len());
                            for r in 0..bc.rows {
                                let off = bc.b_offsets[r];
                                for j in 0..bc.len {
                                    let y = bv[if bc.b_full_row { off + j } else { off }];
                                    out.push(gv[r * bc.len + j] * y);
                                }
                            }
                            out
                        }
                    };
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for r in 0..bc.rows {
                        let off = bc.b_offsets[r];
                        for j in 0..bc.len {
                            let k = r * bc.len + j;
                            let contrib = match kind {
                                Binary::Add => gv[k],
                                Binary::Sub => -gv[k],
                                Binary::Mul => gv[k] * av[k],
                            };
                            gb[if bc.b_full_row { off + j } else { off }] += contrib;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
            }
            Op::MatMul(x, w) => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, k, m) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); n * k];
                    for r in 0..n {
                        for o in 0..m {
                            axpy(gv[r * m + o], &wv[o * k..(o + 1) * k], &mut gx[r * k..(r + 1) * k]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs.to_vec(), gx)?);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); m * k];
                    for r in 0..n {
                        for o in 0..m {
                            axpy(gv[r * m + o], &xv[r * k..(r + 1) * k], &mut gw[o * k..(o + 1) * k]);
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(ws.to_vec(), gw)?);
                }
            }
            Op::Conv1d(x, w, p) => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (b, cin, t) = (xs[0], xs[1], xs[2]);
                let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
                let tout = node.value.shape()[2];
                let cout_g = cout / p.groups;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut gx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                let mut gw = vec![T::zero(); if need_w { wv.len() } else { 0 }];
                for bi in 0..b {
                    for o in 0..cout {
                        let grp = o / cout_g;
                        let grow = &gv[(bi * cout + o) * tout..(bi * cout + o + 1) * tout];
                        for ci in 0..cin_g {
                            let ch = grp * cin_g + ci;
                            let xbase = (bi * cin + ch) * t;
                            for kk in 0..k {
                                let widx = (o * cin_g + ci) * k + kk;
                                let (lo, hi, off) = tap_range(p, kk, t, tout);
                                if p.stride == 1 {
                                    let s = (xbase as isize + lo as isize + off) as usize;
                                    let e = s + (hi - lo);
                                    if need_x {
                                        axpy(wv[widx], &grow[lo..hi], &mut gx[s..e]);
                                    }
                                    if need_w {
                                        gw[widx] += dot(&grow[lo..hi], &xv[s..e]);
                                    }
                                } else {
                                    for to in lo..hi {
                                        let ti = (xbase as isize + (to * p.stride) as isize + off)
                                            as usize;
                                        if need_x {
                                            gx[ti] += wv[widx] * grow[to];
                                        }
                                        if need_w {
                                            gw[widx] += grow[to] * xv[ti];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(xs, gx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(ws, gw)?);
                }
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split3(&shape, *axis);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&gv[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(shape, gv[0]));
            }
            Op::MaxAxis(x, axis, arg) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split3(&shape, *axis);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = arg[o * inner + i];
                        gx[(o * n + j) * inner + i] += gv[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Softmax(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split3(&shape, *axis);
                let yv = node.value.data();
                let mut gx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let s: T = (0..n).map(|j| gv[at(j)] * yv[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yv[at(j)] * (gv[at(j)] - s);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Concat(xs, axis) => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split3(oshape, *axis);
                let mut start = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gx.extend_from_slice(&gv[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), gx)?);
                    }
                    start += n;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshaped(self.shape(*x))?);
            }
            Op::L2Normalize(x, norms) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let yv = node.value.data();
                let mut gx = Vec::with_capacity(yv.len());
                for (r, &n) in norms.iter().enumerate() {
                    let (y, gr) = (&yv[r * d..(r + 1) * d], &gv[r * d..(r + 1) * d]);
                    let proj = dot(y, gr);
                    gx.extend(y.iter().zip(gr).map(|(&y, &g)| (g - y * proj) / n));
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let (outer, _, inner) = split3(shape, 1);
                let nf = T::of_usize(outer * inner);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += gv[i];
                            sum_gx[ch] += gv[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![T::zero(); gv.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch] / nf;
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                gx[i] = scale * (nf * gv[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape.to_vec(), gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g)?);
            }
            Op::Pointwise(x, ders) => {
                let gx = gv.iter().zip(ders).map(|(&g, &d)| g * d).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::RowPair { a, b, da, db } => {
                let k = node.value.shape()[1];
                let ga: Vec<T> = gv.chunks(k).zip(da.chunks(k)).map(|(g, d)| dot(g, d)).collect();
                let gb: Vec<T> = gv.chunks(k).zip(db.chunks(k)).map(|(g, d)| dot(g, d)).collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = self.shape(*logits)[1];
                let scale = gv[0] / T::of_usize(labels.len());
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gx[r * c + y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

/// Output index range `[lo, hi)` touched by tap `kk`, and the input offset `ti = to*stride + off`.
fn tap_range(p: &ConvParams, kk: usize, t: usize, tout: usize) -> (usize, usize, isize) {
    let off = (kk * p.dilation) as isize - p.padding as isize;
    let s = p.stride as isize;
    // need 0 <= to*s + off < t
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (t as isize) - off <= 0 {
        0
    } else {
        ((t as isize - off + s - 1) / s).min(tout as isize)
    };
    let lo = (lo as usize).min(tout);
    (lo, (hi.max(0) as usize).max(lo), off)
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

use super::element::gemm;
use super::{invalid, numel_of, shape_err, Element, Result, Tensor, TensorError};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading `shape` as if it were broadcast to `out` (stride 0
/// along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Walks `out` in row-major order, yielding the output position and the
/// matching offsets into two broadcast operands.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `shape`, undoing a broadcast.
fn reduce_to<T: Element>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); numel_of(shape)];
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_pair(out, &s, &zeros, |o, i, _| acc[i] += grad[o]);
    acc
}

fn normalize_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(invalid(op, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

/// Splits a shape around `axis` into (outer, len, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, kind: Bin) -> Result<Tensor<T>> {
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let out_shape =
            broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| shape_err(name, self, rhs))?;
        let (a, b) = (self.data(), rhs.data());
        let f = |x: T, y: T| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let data: Vec<T> = if self.shape() == rhs.shape() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(rhs.shape(), &out_shape);
            let mut out = vec![T::zero(); numel_of(&out_shape)];
            for_each_pair(&out_shape, &sa, &sb, |o, i, j| out[o] = f(a[i], b[j]));
            out
        };
        let os = out_shape.clone();
        Tensor::from_op(name, data, out_shape, &[self, rhs], move |ctx| {
            let (x, y) = (&ctx.inputs[0], &ctx.inputs[1]);
            let (xs, ys) = (x.shape(), y.shape());
            let sa = broadcast_strides(xs, &os);
            let sb = broadcast_strides(ys, &os);
            let g = ctx.grad_out;
            let (xd, yd) = (x.data(), y.data());
            let want_x = x.is_tracked();
            let want_y = y.is_tracked();
            let mut gx = vec![T::zero(); if want_x { xd.len() } else { 0 }];
            let mut gy = vec![T::zero(); if want_y { yd.len() } else { 0 }];
            for_each_pair(&os, &sa, &sb, |o, i, j| {
                let (dx, dy) = match kind {
                    Bin::Add => (g[o], g[o]),
                    Bin::Sub => (g[o], -g[o]),
                    Bin::Mul => (g[o] * yd[j], g[o] * xd[i]),
                    Bin::Div => (g[o] / yd[j], -g[o] * xd[i] / (yd[j] * yd[j])),
                };
                if want_x {
                    gx[i] += dx;
                }
                if want_y {
                    gy[j] += dy;
                }
            });
            vec![want_x.then_some(gx), want_y.then_some(gy)]
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Bin::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Bin::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Bin::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Bin::Div)
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(name, data, self.shape().to_vec(), &[self], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad_out
                .iter()
                .zip(x)
                .zip(ctx.out)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary("log", |v| v.ln(), |x, _| x.recip())
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary("sqrt", |v| v.sqrt(), |_, y| (y + y).recip())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary("square", |v| v * v, |x, _| x + x)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary("neg", |v| -v, |_, _| -T::one())
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        self.unary("scale", move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Result<Tensor<T>> {
        self.unary("add_scalar", move |v| v + s, |_, _| T::one())
    }

    /// 2-D matrix product `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], rhs.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, self.data(), rhs.data(), T::zero(), &mut out);
        Tensor::from_op("matmul", out, vec![m, n], &[self, rhs], move |ctx| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad_out;
            let ga = a.is_tracked().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(false, true, m, n, k, g, b.data(), T::zero(), &mut ga);
                ga
            });
            let gb = b.is_tracked().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(true, false, k, m, n, a.data(), g, T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Sums over the given axes (negative indices count from the end).
    pub fn sum_axes(&self, axes: &[isize], keepdim: bool) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            reduce[normalize_axis("sum", a, rank)?] = true;
        }
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .zip(&reduce)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let in_shape = self.shape().to_vec();
        let data = reduce_to(self.data(), &in_shape, &kept);
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            self.shape()
                .iter()
                .zip(&reduce)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        Tensor::from_op("sum", data, out_shape, &[self], move |ctx| {
            let s = broadcast_strides(&kept, &in_shape);
            let zeros = vec![0; in_shape.len()];
            let mut g = vec![T::zero(); numel_of(&in_shape)];
            for_each_pair(&in_shape, &s, &zeros, |o, i, _| g[o] = ctx.grad_out[i]);
            vec![Some(g)]
        })
    }

    pub fn mean_axes(&self, axes: &[isize], keepdim: bool) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut count = 1usize;
        let mut seen = vec![false; rank];
        for &a in axes {
            let a = normalize_axis("mean", a, rank)?;
            if !seen[a] {
                seen[a] = true;
                count *= self.shape()[a];
            }
        }
        if count == 0 {
            return Err(invalid("mean", "reduction over an empty axis"));
        }
        self.sum_axes(axes, keepdim)?
            .scale(T::lit(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<isize> = (0..self.rank() as isize).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(invalid("mean", "mean of an empty tensor"));
        }
        let n = self.numel();
        self.sum_all()?.scale(T::lit(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            &[self],
            |ctx| vec![Some(ctx.grad_out.to_vec())],
        )
    }

    /// Reorders axes; the result is a materialized row-major copy.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_of(&in_shape);
        let read: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; rank];
        let src = self.data();
        let mut data = vec![T::zero(); self.numel()];
        for_each_pair(&out_shape, &read, &zeros, |o, i, _| data[o] = src[i]);
        let os = out_shape.clone();
        Tensor::from_op("permute", data, out_shape, &[self], move |ctx| {
            let mut g = vec![T::zero(); ctx.grad_out.len()];
            for_each_pair(&os, &read, &zeros, |o, i, _| g[i] = ctx.grad_out[o]);
            vec![Some(g)]
        })
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: isize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no tensors given"))?;
        let ax = normalize_axis("concat", axis, first.rank())?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(shape_err("concat", first, p));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), ax);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[ax] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Tensor::from_op("concat", data, out_shape, parts, move |ctx| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad_out[pos..pos + len * inner]);
                    pos += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(ctx.inputs)
                .map(|(g, t)| t.is_tracked().then_some(g))
                .collect()
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("stack", "no tensors given"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let lifted = parts
            .iter()
            .map(|p| p.reshape(&[&[1], p.shape()].concat()))
            .collect::<Result<Vec<_>>>()?;
        for p in parts {
            if p.shape() != first.shape() {
                return Err(shape_err("stack", first, p));
            }
        }
        Tensor::concat(&lifted.iter().collect::<Vec<_>>(), 0)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor<T>> {
        let ax = normalize_axis("narrow", axis, self.rank())?;
        let extent = self.shape()[ax];
        if start + len > extent {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {extent} of axis {ax}", start + len),
            ));
        }
        let (outer, _, inner) = split_at_axis(self.shape(), ax);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[ax] = len;
        Tensor::from_op("narrow", data, out_shape, &[self], move |ctx| {
            let mut g = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&ctx.grad_out[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Gathers the given indices along `axis` (repeats allowed).
    pub fn index_select(&self, axis: isize, indices: &[usize]) -> Result<Tensor<T>> {
        let ax = normalize_axis("index_select", axis, self.rank())?;
        let extent = self.shape()[ax];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(invalid("index_select", format!("index {bad} out of range for extent {extent}")));
        }
        let (outer, _, inner) = split_at_axis(self.shape(), ax);
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                data.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[ax] = k;
        let idx = indices.to_vec();
        Tensor::from_op("index_select", data, out_shape, &[self], move |ctx| {
            let mut g = vec![T::zero(); outer * extent * inner];
            let mut pos = 0;
            for o in 0..outer {
                for &i in &idx {
                    let base = (o * extent + i) * inner;
                    for (dst, &src) in g[base..base + inner].iter_mut().zip(&ctx.grad_out[pos..pos + inner]) {
                        *dst += src;
                    }
                    pos += inner;
                }
            }
            vec![Some(g)]
        })
    }

    /// Flat vector of the elements where `mask` is true (row-major order).
    pub fn masked_select(&self, mask: &[bool]) -> Result<Tensor<T>> {
        if mask.len() != self.numel() {
            return Err(invalid(
                "masked_select",
                format!("mask of length {} for shape {:?}", mask.len(), self.shape()),
            ));
        }
        let picked: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let data = picked.iter().map(|&i| self.data()[i]).collect();
        let n = self.numel();
        let len = picked.len();
        Tensor::from_op("masked_select", data, vec![len], &[self], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (&i, &v) in picked.iter().zip(ctx.grad_out) {
                g[i] = v;
            }
            vec![Some(g)]
        })
    }

    pub fn softmax(&self, axis: isize) -> Result<Tensor<T>> {
        let ax = normalize_axis("softmax", axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    data[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / s;
                }
            }
        }
        Tensor::from_op("softmax", data, self.shape().to_vec(), &[self], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad_out);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax(&self, axis: isize) -> Result<Tensor<T>> {
        let ax = normalize_axis("log_softmax", axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|j| (x[at(j)] - m).exp()).sum::<T>().ln();
                for j in 0..len {
                    data[at(j)] = x[at(j)] - lse;
                }
            }
        }
        Tensor::from_op("log_softmax", data, self.shape().to_vec(), &[self], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad_out);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let gs: T = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-sum-exp along `axis` (removed from the output shape), computed
    /// with max subtraction.
    pub fn logsumexp(&self, axis: isize) -> Result<Tensor<T>> {
        let mask = vec![true; self.numel()];
        self.masked_logsumexp(&mask, axis)
    }

    /// Log-sum-exp along `axis` over only the entries where `mask` is true.
    /// Every reduced lane must select at least one entry.
    pub fn masked_logsumexp(&self, mask: &[bool], axis: isize) -> Result<Tensor<T>> {
        let ax = normalize_axis("logsumexp", axis, self.rank())?;
        if mask.len() != self.numel() {
            return Err(invalid(
                "logsumexp",
                format!("mask of length {} for shape {:?}", mask.len(), self.shape()),
            ));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let x = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .filter(|&j| mask[at(j)])
                    .map(|j| x[at(j)])
                    .fold(T::neg_infinity(), T::max);
                if m == T::neg_infinity() {
                    return Err(invalid("logsumexp", "a reduced lane selects no entries"));
                }
                let s: T = (0..len).filter(|&j| mask[at(j)]).map(|j| (x[at(j)] - m).exp()).sum();
                data[o * inner + i] = m + s.ln();
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(ax);
        let mask = mask.to_vec();
        Tensor::from_op("logsumexp", data, out_shape, &[self], move |ctx| {
            let x = ctx.inputs[0].data();
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for j in 0..len {
                        let at = (o * len + j) * inner + i;
                        if mask[at] {
                            gx[at] = ctx.grad_out[r] * (x[at] - ctx.out[r]).exp();
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Divides each lane along `axis` by its Euclidean norm. A zero lane
    /// has no direction and is reported as a non-finite result.
    pub fn l2_normalize(&self, axis: isize) -> Result<Tensor<T>> {
        let ax = normalize_axis("l2_normalize", axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let x = self.data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let n = (0..len).map(|j| x[at(j)] * x[at(j)]).sum::<T>().sqrt();
                norms[o * inner + i] = n;
                for j in 0..len {
                    data[at(j)] = x[at(j)] / n;
                }
            }
        }
        Tensor::from_op("l2_normalize", data, self.shape().to_vec(), &[self], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad_out);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let n = norms[o * inner + i];
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = (g[at(j)] - y[at(j)] * dot) / n;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

//! Forward definitions and vector-Jacobian products for every tape op.

use super::tape::{Node, Op};
use super::{broadcast_shape, shape_len, Real, Result, Tensor, TensorError, Var};

/// Maps each flat index of `out_shape` to the flat index of a broadcast
/// operand with `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = shape_len(out_shape);
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// How an operand's elements line up with the broadcast output.
enum Align {
    Same,
    /// Operand repeats with period `len` (trailing-suffix broadcast).
    Cycle(usize),
    Map(Vec<usize>),
}

fn align(out_shape: &[usize], in_shape: &[usize]) -> Align {
    if out_shape == in_shape {
        return Align::Same;
    }
    let n_in = shape_len(in_shape);
    let trimmed: Vec<usize> = {
        let first = in_shape.iter().position(|&d| d != 1).unwrap_or(in_shape.len());
        in_shape[first..].to_vec()
    };
    if trimmed.is_empty() {
        return Align::Cycle(1);
    }
    if out_shape.ends_with(&trimmed) {
        return Align::Cycle(n_in);
    }
    Align::Map(broadcast_map(out_shape, in_shape))
}

impl Align {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Align::Same => i,
            Align::Cycle(n) => i % n,
            Align::Map(m) => m[i],
        }
    }
}

/// Sum-reduces an output-shaped gradient onto a broadcast operand.
fn reduce_to<F: Real>(g: &[F], out_shape: &[usize], in_shape: &[usize], acc: &mut [F]) {
    match align(out_shape, in_shape) {
        Align::Same => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        al => {
            for (i, &gi) in g.iter().enumerate() {
                let j = al.at(i);
                acc[j] = acc[j] + gi;
            }
        }
    }
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(a) => {
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(a);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        }
    }
}

/// Logical matrix strides (row, col) for a stored row-major [r x c] matrix,
/// optionally transposed.
fn mat_strides(shape: &[usize], t: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (shape[0], shape[1]);
    if t {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// im2col buffer [T_out x kernel*c_in] with zero padding `kernel / 2`.
fn im2col<F: Real>(x: &[F], t: usize, c_in: usize, kernel: usize, stride: usize) -> Vec<F> {
    let t_out = conv_out_len(t, stride);
    let pad = kernel / 2;
    let width = kernel * c_in;
    let mut cols = vec![F::zero(); t_out * width];
    for o in 0..t_out {
        for k in 0..kernel {
            let src = (o * stride + k) as isize - pad as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            cols[o * width + k * c_in..o * width + (k + 1) * c_in]
                .copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    cols
}

impl<'t, F: Real> Var<'t, F> {
    fn unary(&self, op: Op<F>, f: impl Fn(F) -> F) -> Var<'t, F> {
        let out = self.value_ref().map(f);
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'t, F>,
        name: &'static str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'t, F>> {
        let (out, rg) = {
            let a = self.value_ref();
            let b = other.value_ref();
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
            let n = shape_len(&shape);
            let (la, lb) = (align(&shape, a.shape()), align(&shape, b.shape()));
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<F> = match (&la, &lb) {
                (Align::Same, Align::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..n).map(|i| f(ad[la.at(i)], bd[lb.at(i)])).collect(),
            };
            (
                Tensor::new(shape, data)?,
                self.requires_grad() || other.requires_grad(),
            )
        };
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(&self) -> Var<'t, F> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.unary(Op::Relu(self.id), |a| a.max(F::zero()))
    }

    pub fn leaky_relu(&self, slope: F) -> Var<'t, F> {
        self.unary(Op::LeakyRelu(self.id, slope), |a| {
            if a > F::zero() {
                a
            } else {
                a * slope
            }
        })
    }

    /// Elementwise `min(x, c)`.
    pub fn min_const(&self, c: F) -> Var<'t, F> {
        self.unary(Op::MinConst(self.id, c), |a| a.min(c))
    }

    pub fn abs(&self) -> Var<'t, F> {
        self.unary(Op::Abs(self.id), |a| a.abs())
    }

    pub fn square(&self) -> Var<'t, F> {
        self.unary(Op::Square(self.id), |a| a * a)
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_const(&self, c: F) -> Var<'t, F> {
        self.unary(Op::AddConst(self.id), |a| a + c)
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(Op::Exp(self.id), |a| a.exp())
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Var<'t, F>, ta: bool, tb: bool) -> Result<Var<'t, F>> {
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            let err = || TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.rank() != 2 || b.rank() != 2 {
                return Err(err());
            }
            let (m, k, rsa, csa) = mat_strides(a.shape(), ta);
            let (k2, n, rsb, csb) = mat_strides(b.shape(), tb);
            if k != k2 {
                return Err(err());
            }
            let mut c = vec![F::zero(); m * n];
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.data(),
                rsa,
                csa,
                b.data(),
                rsb,
                csb,
                F::zero(),
                &mut c,
                n as isize,
                1,
            );
            Tensor::new(vec![m, n], c)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    fn check_axis(&self, axis: Option<usize>) -> Result<()> {
        if let Some(a) = axis {
            let rank = self.value_ref().rank();
            if a >= rank {
                return Err(TensorError::Axis { axis: a, rank });
            }
        }
        Ok(())
    }

    fn reduce_with(
        &self,
        axis: Option<usize>,
        op: Op<F>,
        f: impl Fn(&mut dyn Iterator<Item = F>, usize) -> F,
    ) -> Result<Var<'t, F>> {
        self.check_axis(axis)?;
        let out = {
            let x = self.value_ref();
            match axis {
                None => {
                    let v = f(&mut x.data().iter().copied(), x.len());
                    Tensor::scalar(v)
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(x.shape(), a);
                    let d = x.data();
                    let mut out = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut it = (0..len).map(|l| d[base + l * inner]);
                            out.push(f(&mut it, len));
                        }
                    }
                    Tensor::new(reduced_shape(x.shape(), axis), out)?
                }
            }
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t, F>> {
        self.reduce_with(axis, Op::Sum { x: self.id, axis }, |it, _| it.sum())
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t, F>> {
        self.reduce_with(axis, Op::Mean { x: self.id, axis }, |it, n| {
            it.sum::<F>() / F::of(n as f64)
        })
    }

    /// Standard deviation; `ddof = 0` is the population estimator.
    pub fn std(&self, axis: Option<usize>, ddof: usize) -> Result<Var<'t, F>> {
        self.check_axis(axis)?;
        let len = match axis {
            None => self.value_ref().len(),
            Some(a) => self.value_ref().shape()[a],
        };
        if len <= ddof {
            return Err(TensorError::EmptyReduction("std"));
        }
        self.reduce_with(
            axis,
            Op::Std {
                x: self.id,
                axis,
                ddof,
            },
            move |it, n| {
                let v: Vec<F> = it.collect();
                let mean = v.iter().copied().sum::<F>() / F::of(n as f64);
                let ss: F = v.iter().map(|&x| (x - mean) * (x - mean)).sum();
                (ss / F::of((n - ddof) as f64)).sqrt()
            },
        )
    }

    pub fn sum_all(&self) -> Var<'t, F> {
        self.sum(None).expect("full reduction")
    }

    pub fn mean_all(&self) -> Var<'t, F> {
        self.mean(None).expect("full reduction")
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t, F>> {
        self.check_axis(Some(axis))?;
        let out = {
            let x = self.value_ref();
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let d = x.data();
            let mut y = vec![F::zero(); d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let idx = |l: usize| base + l * inner;
                    let max = (0..len)
                        .map(|l| d[idx(l)])
                        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
                    // NaN inputs never win the comparison above and propagate
                    // through the exponentials below.
                    let max = if max.is_finite() { max } else { F::zero() };
                    let mut z = F::zero();
                    for l in 0..len {
                        let e = (d[idx(l)] - max).exp();
                        y[idx(l)] = e;
                        z = z + e;
                    }
                    for l in 0..len {
                        y[idx(l)] = if log {
                            d[idx(l)] - max - z.ln()
                        } else {
                            y[idx(l)] / z
                        };
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        let op = if log {
            Op::LogSoftmax { x: self.id, axis }
        } else {
            Op::Softmax { x: self.id, axis }
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        self.softmax_impl(axis, true)
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&self, eps: F) -> Var<'t, F> {
        let out = {
            let x = self.value_ref();
            let c = *x.shape().last().expect("rank >= 1");
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(c) {
                let n = F::of(c as f64);
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let inv = F::one() / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Tensor::new(x.shape().to_vec(), y).expect("same shape")
        };
        self.tape
            .push(out, Op::Normalize { x: self.id, eps }, self.requires_grad())
    }

    /// Same-padded 1-D convolution over rows of `self` ([T x C_in]) with a
    /// weight laid out as [kernel * C_in x C_out].
    pub fn conv1d(&self, weight: &Var<'t, F>, kernel: usize, stride: usize) -> Result<Var<'t, F>> {
        let out = {
            let x = self.value_ref();
            let w = weight.value_ref();
            let err = || TensorError::Shape {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            };
            if x.rank() != 2 || w.rank() != 2 || kernel == 0 || stride == 0 {
                return Err(err());
            }
            let (t, c_in) = (x.shape()[0], x.shape()[1]);
            if w.shape()[0] != kernel * c_in {
                return Err(err());
            }
            let c_out = w.shape()[1];
            let t_out = conv_out_len(t, stride);
            let cols = im2col(x.data(), t, c_in, kernel, stride);
            let width = kernel * c_in;
            let mut y = vec![F::zero(); t_out * c_out];
            F::gemm(
                t_out,
                width,
                c_out,
                F::one(),
                &cols,
                width as isize,
                1,
                w.data(),
                c_out as isize,
                1,
                F::zero(),
                &mut y,
                c_out as isize,
                1,
            );
            Tensor::new(vec![t_out, c_out], y)?
        };
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Rows of a rank-2 tensor selected (with repetition) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t, F>> {
        let out = {
            let x = self.value_ref();
            if x.rank() != 2 {
                return Err(TensorError::Invalid("gather_rows needs rank 2".into()));
            }
            if index.is_empty() {
                return Err(TensorError::EmptyReduction("gather_rows"));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut y = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= r {
                    return Err(TensorError::Index {
                        index: i,
                        extent: r,
                    });
                }
                y.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![index.len(), c], y)?
        };
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, F>> {
        let out = {
            let x = self.value_ref();
            if x.rank() != 2 || start >= end || end > x.shape()[0] {
                return Err(TensorError::Index {
                    index: end,
                    extent: x.shape()[0],
                });
            }
            let c = x.shape()[1];
            Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())?
        };
        Ok(self.tape.push(
            out,
            Op::SliceRows { x: self.id, start },
            self.requires_grad(),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, F>> {
        let out = {
            let x = self.value_ref();
            if x.rank() != 2 || start >= end || end > x.shape()[1] {
                return Err(TensorError::Index {
                    index: end,
                    extent: x.shape().get(1).copied().unwrap_or(0),
                });
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let w = end - start;
            let mut y = Vec::with_capacity(r * w);
            for i in 0..r {
                y.extend_from_slice(&x.data()[i * c + start..i * c + end]);
            }
            Tensor::new(vec![r, w], y)?
        };
        Ok(self.tape.push(
            out,
            Op::SliceCols { x: self.id, start },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = self.value().reshape(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape(self.id), self.requires_grad()))
    }
}

/// Stacks rank-2 tensors with equal column counts along rows.
pub fn concat_rows<'t, F: Real>(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = parts.first().ok_or(TensorError::EmptyReduction("concat_rows"))?;
    let tape = first.tape;
    let out = {
        let c = first.value_ref().shape().get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value_ref();
            if v.rank() != 2 || v.shape()[1] != c {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, c], data)?
    };
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
}

/// Joins rank-2 tensors with equal row counts along columns.
pub fn concat_cols<'t, F: Real>(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = parts.first().ok_or(TensorError::EmptyReduction("concat_cols"))?;
    let tape = first.tape;
    let out = {
        let r = first.value_ref().shape()[0];
        let vals: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
        for v in &vals {
            if v.rank() != 2 || v.shape()[0] != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        Tensor::new(vec![r, total], data)?
    };
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
}

fn add_into<F: Real>(nodes: &[Node<F>], adj: &mut [Option<Vec<F>>], id: usize, f: impl FnOnce(&mut [F])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = adj[id].get_or_insert_with(|| vec![F::zero(); nodes[id].value.len()]);
    f(slot);
}

fn elementwise_grad<F: Real>(
    nodes: &[Node<F>],
    adj: &mut [Option<Vec<F>>],
    x: usize,
    g: &[F],
    d: impl Fn(F) -> F,
) {
    let xv = nodes[x].value.data();
    add_into(nodes, adj, x, |acc| {
        for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
            *a = *a + gi * d(xi);
        }
    });
}

pub(crate) fn backward_op<F: Real>(nodes: &[Node<F>], id: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
    let out_shape = nodes[id].value.shape();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                -F::one()
            } else {
                F::one()
            };
            let sa = nodes[a].value.shape().to_vec();
            add_into(nodes, adj, a, |acc| reduce_to(g, out_shape, &sa, acc));
            let sb = nodes[b].value.shape().to_vec();
            if sign < F::zero() {
                let ng: Vec<F> = g.iter().map(|&v| -v).collect();
                add_into(nodes, adj, b, |acc| reduce_to(&ng, out_shape, &sb, acc));
            } else {
                add_into(nodes, adj, b, |acc| reduce_to(g, out_shape, &sb, acc));
            }
        }
        &Op::Mul(a, b) => {
            for (me, other) in [(a, b), (b, a)] {
                if !nodes[me].requires_grad {
                    continue;
                }
                let ov = &nodes[other].value;
                let lo = align(out_shape, ov.shape());
                let prod: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * ov.data()[lo.at(i)])
                    .collect();
                let sm = nodes[me].value.shape().to_vec();
                add_into(nodes, adj, me, |acc| reduce_to(&prod, out_shape, &sm, acc));
            }
        }
        &Op::Neg(x) => elementwise_grad(nodes, adj, x, g, |_| -F::one()),
        &Op::Relu(x) => elementwise_grad(nodes, adj, x, g, |v| {
            if v > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }),
        &Op::LeakyRelu(x, s) => elementwise_grad(nodes, adj, x, g, |v| {
            if v > F::zero() {
                F::one()
            } else {
                s
            }
        }),
        // Subgradient at the kink is 0.
        &Op::MinConst(x, c) => elementwise_grad(nodes, adj, x, g, |v| {
            if v < c {
                F::one()
            } else {
                F::zero()
            }
        }),
        &Op::Abs(x) => elementwise_grad(nodes, adj, x, g, |v| {
            if v > F::zero() {
                F::one()
            } else if v < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        }),
        &Op::Square(x) => elementwise_grad(nodes, adj, x, g, |v| v + v),
        &Op::Scale(x, c) => elementwise_grad(nodes, adj, x, g, |_| c),
        &Op::AddConst(x) => elementwise_grad(nodes, adj, x, g, |_| F::one()),
        &Op::Exp(x) => {
            let y = nodes[id].value.data();
            add_into(nodes, adj, x, |acc| {
                for ((a, &gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                    *a = *a + gi * yi;
                }
            });
        }
        &Op::MatMul { a, b, ta, tb } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, rsa, csa) = mat_strides(av.shape(), ta);
            let (_, n, rsb, csb) = mat_strides(bv.shape(), tb);
            // dA = G * B^T, written through A's logical strides.
            add_into(nodes, adj, a, |acc| {
                F::gemm(m, n, k, F::one(), g, n as isize, 1, bv.data(), csb, rsb, F::one(), acc, rsa, csa)
            });
            // dB = A^T * G
            add_into(nodes, adj, b, |acc| {
                F::gemm(k, m, n, F::one(), av.data(), csa, rsa, g, n as isize, 1, F::one(), acc, rsb, csb)
            });
        }
        &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
            let xs = nodes[x].value.shape().to_vec();
            let is_mean = matches!(nodes[id].op, Op::Mean { .. });
            add_into(nodes, adj, x, |acc| match axis {
                None => {
                    let scale = if is_mean {
                        F::one() / F::of(acc.len() as f64)
                    } else {
                        F::one()
                    };
                    acc.iter_mut().for_each(|a| *a = *a + g[0] * scale);
                }
                Some(ax) => {
                    let (outer, len, inner) = split_axis(&xs, ax);
                    let scale = if is_mean {
                        F::one() / F::of(len as f64)
                    } else {
                        F::one()
                    };
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let j = (o * len + l) * inner + i;
                                acc[j] = acc[j] + g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            });
        }
        &Op::Std { x, axis, ddof } => {
            let xv = &nodes[x].value;
            let s = nodes[id].value.data();
            let (outer, len, inner) = match axis {
                None => (1, xv.len(), 1),
                Some(ax) => split_axis(xv.shape(), ax),
            };
            let d = xv.data();
            add_into(nodes, adj, x, |acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        if s[k] == F::zero() {
                            continue;
                        }
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mean = (0..len).map(|l| d[idx(l)]).sum::<F>() / F::of(len as f64);
                        let denom = F::of((len - ddof) as f64) * s[k];
                        for l in 0..len {
                            acc[idx(l)] = acc[idx(l)] + g[k] * (d[idx(l)] - mean) / denom;
                        }
                    }
                }
            });
        }
        &Op::Softmax { x, axis } | &Op::LogSoftmax { x, axis } => {
            let log = matches!(nodes[id].op, Op::LogSoftmax { .. });
            let y = nodes[id].value.data();
            let (outer, len, inner) = split_axis(out_shape, axis);
            add_into(nodes, adj, x, |acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gs: F = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                acc[idx(l)] = acc[idx(l)] + g[idx(l)] - y[idx(l)].exp() * gs;
                            }
                        } else {
                            let dot: F = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                acc[idx(l)] = acc[idx(l)] + y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            });
        }
        &Op::Normalize { x, eps } => {
            let xv = nodes[x].value.data();
            let y = nodes[id].value.data();
            let c = *out_shape.last().expect("rank");
            let n = F::of(c as f64);
            add_into(nodes, adj, x, |acc| {
                for ((ar, gr), (yr, xr)) in acc
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(y.chunks(c).zip(xv.chunks(c)))
                {
                    let mean = xr.iter().copied().sum::<F>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                    let inv = F::one() / (var + eps).sqrt();
                    let gm = gr.iter().copied().sum::<F>() / n;
                    let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for ((a, &gi), &yi) in ar.iter_mut().zip(gr).zip(yr) {
                        *a = *a + inv * (gi - gm - yi * gy);
                    }
                }
            });
        }
        &Op::Conv1d {
            x,
            w,
            kernel,
            stride,
        } => {
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            let (t, c_in) = (xv.shape()[0], xv.shape()[1]);
            let c_out = wv.shape()[1];
            let t_out = conv_out_len(t, stride);
            let width = kernel * c_in;
            if nodes[w].requires_grad {
                let cols = im2col(xv.data(), t, c_in, kernel, stride);
                add_into(nodes, adj, w, |acc| {
                    F::gemm(width, t_out, c_out, F::one(), &cols, 1, width as isize, g, c_out as isize, 1, F::one(), acc, c_out as isize, 1)
                });
            }
            if nodes[x].requires_grad {
                let mut dcols = vec![F::zero(); t_out * width];
                F::gemm(t_out, c_out, width, F::one(), g, c_out as isize, 1, wv.data(), 1, c_out as isize, F::zero(), &mut dcols, width as isize, 1);
                let pad = kernel / 2;
                add_into(nodes, adj, x, |acc| {
                    for o in 0..t_out {
                        for k in 0..kernel {
                            let src = (o * stride + k) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            let from = &dcols[o * width + k * c_in..o * width + (k + 1) * c_in];
                            for (a, &d) in acc[src * c_in..(src + 1) * c_in].iter_mut().zip(from) {
                                *a = *a + d;
                            }
                        }
                    }
                });
            }
        }
        Op::GatherRows { x, index } => {
            let c = nodes[*x].value.shape()[1];
            add_into(nodes, adj, *x, |acc| {
                for (r, &i) in index.iter().enumerate() {
                    for (a, &gi) in acc[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *a = *a + gi;
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                add_into(nodes, adj, p, |acc| {
                    acc.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(a, &b)| *a = *a + b)
                });
                offset += n;
            }
        }
        &Op::SliceRows { x, start } => {
            let c = out_shape[1];
            add_into(nodes, adj, x, |acc| {
                acc[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a = *a + b)
            });
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (out_shape[0], out_shape[1]);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                add_into(nodes, adj, p, |acc| {
                    for i in 0..r {
                        for j in 0..w {
                            acc[i * w + j] = acc[i * w + j] + g[i * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        &Op::SliceCols { x, start } => {
            let (r, w) = (out_shape[0], out_shape[1]);
            let c = nodes[x].value.shape()[1];
            add_into(nodes, adj, x, |acc| {
                for i in 0..r {
                    for j in 0..w {
                        acc[i * c + start + j] = acc[i * c + start + j] + g[i * w + j];
                    }
                }
            });
        }
        &Op::Reshape(x) => {
            add_into(nodes, adj, x, |acc| {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b)
            });
        }
    }
}

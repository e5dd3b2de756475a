//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Binary elementwise operations broadcast only across trailing singleton
//! dimensions: an operand of shape `[2, 3, 1, 1]` combines with `[2, 3, 4, 5]`,
//! and a one-element operand combines with anything. Variances are biased
//! (divide by the number of reduced elements).

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::math::{self, Float};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Output shape plus the repeat block of each operand (1 = no broadcast).
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    fn fits(small: &[usize], big: &[usize]) -> bool {
        if numel(small) == 1 {
            return true;
        }
        let mut end = small.len();
        while end > 0 && small[end - 1] == 1 {
            end -= 1;
        }
        end <= big.len() && small[..end] == big[..end]
    }
    let (na, nb) = (numel(a), numel(b));
    if a == b {
        return Ok((a.to_vec(), 1, 1));
    }
    if na >= nb && fits(b, a) {
        return Ok((a.to_vec(), 1, na / nb));
    }
    if nb > na && fits(a, b) {
        return Ok((b.to_vec(), nb / na, 1));
    }
    Err(Error::shape(op, a, b))
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryRule {
    kind: BinaryKind,
    ra: usize,
    rb: usize,
}

impl Backward for BinaryRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; a.len()];
            for (i, gi) in g.iter().enumerate() {
                ga[i / self.ra] += match self.kind {
                    BinaryKind::Add | BinaryKind::Sub => *gi,
                    BinaryKind::Mul => *gi * b[i / self.rb],
                };
            }
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; b.len()];
            for (i, gi) in g.iter().enumerate() {
                gb[i / self.rb] += match self.kind {
                    BinaryKind::Add => *gi,
                    BinaryKind::Sub => -*gi,
                    BinaryKind::Mul => *gi * a[i / self.ra],
                };
            }
            gb
        });
        vec![ga, gb]
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Sqrt,
    Log,
    Exp,
    Scale(Float),
    Shift,
}

struct UnaryRule(UnaryKind);

impl Backward for UnaryRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let x = inputs[0].data();
        let y = output.data();
        let gx = g
            .iter()
            .enumerate()
            .map(|(i, gi)| match self.0 {
                UnaryKind::Relu => {
                    if x[i] > 0.0 {
                        *gi
                    } else {
                        0.0
                    }
                }
                // The derivative is unbounded at 0; use the zero subgradient.
                UnaryKind::Sqrt => {
                    if y[i] > 0.0 {
                        *gi * 0.5 / y[i]
                    } else {
                        0.0
                    }
                }
                UnaryKind::Log => *gi / x[i],
                UnaryKind::Exp => *gi * y[i],
                UnaryKind::Scale(c) => *gi * c,
                UnaryKind::Shift => *gi,
            })
            .collect();
        vec![Some(gx)]
    }
}

/// `(outer, n, inner)` decomposition of a shape around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

struct SoftmaxRule {
    n: usize,
    inner: usize,
    log: bool,
}

impl Backward for SoftmaxRule {
    fn backward(
        &self,
        g: &[Float],
        _inputs: &[&Tensor],
        output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let y = output.data();
        let (n, inner) = (self.n, self.inner);
        let mut gx = vec![0.0; y.len()];
        let outer = y.len() / (n * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                if self.log {
                    let total: Float = (0..n).map(|j| g[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = g[idx(j)] - math::exp(y[idx(j)]) * total;
                    }
                } else {
                    let dot: Float = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Output shape and, for every input element, the flat index of the output
/// element it reduces into.
fn reduce_map(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduced[a] {
            return Err(Error::contract(
                op,
                format!("invalid reduction axes {axes:?} for shape {shape:?}"),
            ));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, r)| !**r)
        .map(|(d, _)| *d)
        .collect();
    let count: usize = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, r)| **r)
        .map(|(d, _)| *d)
        .product();
    // Stride of each input axis inside the output (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut s = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            out_strides[ax] = s;
            s *= shape[ax];
        }
    }
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Ok((out_shape, map, count))
}

enum ReduceKind {
    Sum,
    Mean(Float),
    Var { count: Float, mean: Vec<Float> },
}

struct ReduceRule {
    kind: ReduceKind,
    map: Vec<usize>,
}

impl Backward for ReduceRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let x = inputs[0].data();
        let gx = self
            .map
            .iter()
            .enumerate()
            .map(|(i, &o)| match &self.kind {
                ReduceKind::Sum => g[o],
                ReduceKind::Mean(count) => g[o] / count,
                ReduceKind::Var { count, mean } => g[o] * 2.0 * (x[i] - mean[o]) / count,
            })
            .collect();
        vec![Some(gx)]
    }
}

struct SelectRule {
    /// For every output element, the input element it copies.
    source: Vec<usize>,
}

impl Backward for SelectRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let mut gx = vec![0.0; inputs[0].numel()];
        for (gi, &s) in g.iter().zip(&self.source) {
            gx[s] += *gi;
        }
        vec![Some(gx)]
    }
}

struct DistanceRule {
    dim: usize,
}

impl Backward for DistanceRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (a, b, d) = (inputs[0].data(), inputs[1].data(), output.data());
        let mut ga = vec![0.0; a.len()];
        for (row, (&dist, &gr)) in d.iter().zip(g).enumerate() {
            if dist == 0.0 {
                continue;
            }
            for c in row * self.dim..(row + 1) * self.dim {
                ga[c] = gr * (a[c] - b[c]) / dist;
            }
        }
        let gb = needs[1].then(|| ga.iter().map(|v| -v).collect());
        vec![needs[0].then_some(ga), gb]
    }
}

struct MatmulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, b, true, &mut ga, false);
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, a, true, g, false, &mut gb, false);
            gb
        });
        vec![ga, gb]
    }
}

struct ConcatRule {
    sizes: Vec<usize>,
}

impl Backward for ConcatRule {
    fn backward(
        &self,
        g: &[Float],
        _inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let mut offset = 0;
        self.sizes
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let part = need.then(|| g[offset..offset + len].to_vec());
                offset += len;
                part
            })
            .collect()
    }
}

struct ReshapeRule;

impl Backward for ReshapeRule {
    fn backward(
        &self,
        g: &[Float],
        _inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        vec![Some(g.to_vec())]
    }
}

impl Tape {
    fn binary(&mut self, op: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (shape, ra, rb) = broadcast(op, self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<Float> = (0..numel(&shape))
            .map(|i| {
                let (u, v) = (x[i / ra], y[i / rb]);
                match kind {
                    BinaryKind::Add => u + v,
                    BinaryKind::Sub => u - v,
                    BinaryKind::Mul => u * v,
                }
            })
            .collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(&[a, b], out, Box::new(BinaryRule { kind, ra, rb })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind, f: impl Fn(Float) -> Float) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect());
        self.push(&[a], out, Box::new(UnaryRule(kind)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: Float) -> Var {
        self.unary(a, UnaryKind::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: Float) -> Var {
        self.unary(a, UnaryKind::Shift, |v| v + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp, math::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {v}")));
        }
        Ok(self.unary(a, UnaryKind::Sqrt, math::sqrt))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        Ok(self.unary(a, UnaryKind::Log, math::ln))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let op = if log { "log_softmax" } else { "softmax" };
        let (outer, n, inner) = split_axis(op, self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(Float::NEG_INFINITY, Float::max);
                let total: Float = (0..n).map(|j| math::exp(x[idx(j)] - max)).sum();
                let log_total = math::ln(total);
                for j in 0..n {
                    y[idx(j)] = if log {
                        x[idx(j)] - max - log_total
                    } else {
                        math::exp(x[idx(j)] - max) / total
                    };
                }
            }
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), y);
        Ok(self.push(&[a], out, Box::new(SoftmaxRule { n, inner, log })))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn reduce(&mut self, op: &'static str, a: Var, axes: &[usize], var: bool, mean: bool) -> Result<Var> {
        let (shape, map, count) = reduce_map(op, self.shape(a), axes)?;
        if count == 0 {
            return Err(Error::contract(op, "reduction over an empty axis"));
        }
        let x = self.value(a).data();
        let mut sums = vec![0.0; numel(&shape)];
        for (v, &o) in x.iter().zip(&map) {
            sums[o] += *v;
        }
        let countf = math::from_usize(count);
        let (data, kind) = if var {
            let means: Vec<Float> = sums.iter().map(|s| s / countf).collect();
            let mut acc = vec![0.0; sums.len()];
            for (v, &o) in x.iter().zip(&map) {
                let d = *v - means[o];
                acc[o] += d * d;
            }
            let vars = acc.iter().map(|s| s / countf).collect();
            (
                vars,
                ReduceKind::Var {
                    count: countf,
                    mean: means,
                },
            )
        } else if mean {
            (sums.iter().map(|s| s / countf).collect(), ReduceKind::Mean(countf))
        } else {
            (sums, ReduceKind::Sum)
        };
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(&[a], out, Box::new(ReduceRule { kind, map })))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum", a, axes, false, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean", a, axes, false, true)
    }

    /// Biased (population) variance over `axes`.
    pub fn var(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("var", a, axes, true, false)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    fn extremum(&mut self, op: &'static str, a: Var, axis: usize, take_max: bool) -> Result<Var> {
        let (outer, n, inner) = split_axis(op, self.shape(a), axis)?;
        if n == 0 {
            return Err(Error::contract(op, "empty axis"));
        }
        let x = self.value(a).data();
        let mut source = Vec::with_capacity(outer * inner);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = o * n * inner + j * inner + i;
                    let better = if take_max { x[idx] > x[best] } else { x[idx] < x[best] };
                    if better {
                        best = idx;
                    }
                }
                source.push(best);
                data.push(x[best]);
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(&[a], out, Box::new(SelectRule { source })))
    }

    /// Maximum along `axis` (first occurrence wins ties).
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.extremum("max", a, axis, true)
    }

    /// Minimum along `axis` (first occurrence wins ties).
    pub fn min(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.extremum("min", a, axis, false)
    }

    /// Row-wise Euclidean distance. `[D]×[D] → []`, `[N,D]×[N,D] → [N]`.
    /// At zero distance the gradient is taken as zero.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.is_empty() || sa.len() > 2 {
            return Err(Error::shape("euclidean_distance", sa, sb));
        }
        let dim = *sa.last().unwrap_or(&1);
        let out_shape: Vec<usize> = sa[..sa.len() - 1].to_vec();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<Float> = x
            .chunks(dim.max(1))
            .zip(y.chunks(dim.max(1)))
            .map(|(u, v)| {
                let s: Float = u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
                math::sqrt(s)
            })
            .collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(&[a, b], out, Box::new(DistanceRule { dim })))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut c, false);
        let out = Tensor::from_parts(vec![m, n], c);
        Ok(self.push(&[a, b], out, Box::new(MatmulRule { m, k, n })))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract("transpose", "expected a matrix"));
        }
        let (r, c) = (s[0], s[1]);
        let source: Vec<usize> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather("transpose", a, vec![c, r], source)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if numel(shape) != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(&[a], out, Box::new(ReshapeRule)))
    }

    fn gather(&mut self, _op: &'static str, a: Var, shape: Vec<usize>, source: Vec<usize>) -> Result<Var> {
        let x = self.value(a).data();
        let data = source.iter().map(|&s| x[s]).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(&[a], out, Box::new(SelectRule { source })))
    }

    /// Rows of `a` (axis 0) at `indices`, in order; repeats allowed.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::contract("index_select", "cannot index a scalar"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::contract(
                "index_select",
                format!("index {bad} out of range for {} rows", s[0]),
            ));
        }
        let inner = numel(&s[1..]);
        let source = indices
            .iter()
            .flat_map(|&i| i * inner..(i + 1) * inner)
            .collect();
        let mut shape = s;
        shape[0] = indices.len();
        self.gather("index_select", a, shape, source)
    }

    /// `out[i] = a[i, cols[i]]` for a matrix `a`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != cols.len() {
            return Err(Error::shape("pick", &s, &[cols.len()]));
        }
        if let Some(bad) = cols.iter().find(|&&c| c >= s[1]) {
            return Err(Error::contract(
                "pick",
                format!("column {bad} out of range for {} columns", s[1]),
            ));
        }
        let source = cols.iter().enumerate().map(|(r, &c)| r * s[1] + c).collect();
        self.gather("pick", a, vec![s[0]], source)
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            rows += s[0];
            sizes.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(parts, out, Box::new(ConcatRule { sizes })))
    }
}

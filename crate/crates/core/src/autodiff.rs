//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value and enough
//! bookkeeping to replay its adjoint. Nodes are appended in execution order,
//! so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{count, Scalar};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    SumAll(usize),
    SumAxis {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    ConcatCols(Vec<(usize, usize)>),
    GatherRows(usize, Arc<[usize]>),
    ScatterMean {
        input: usize,
        groups: Arc<[usize]>,
        counts: Vec<usize>,
    },
    WeightedGather {
        input: usize,
        index: Arc<[usize]>,
        weights: Arc<[T]>,
        k: usize,
    },
    SelectPerRow(usize, Arc<[usize]>),
    Umbrella {
        input: usize,
        index: Arc<[usize]>,
        k: usize,
    },
    BatchNorm {
        input: usize,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed primitives for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (value, layout) = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
            let (rows, _) = nodes[first.id].value.expect_matrix("concat_cols")?;
            let mut layout = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = nodes[p.id].value.expect_matrix("concat_cols")?;
                if r != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        left: nodes[first.id].value.shape().to_vec(),
                        right: nodes[p.id].value.shape().to_vec(),
                    });
                }
                layout.push((p.id, c));
            }
            let total: usize = layout.iter().map(|&(_, c)| c).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &(id, c) in &layout {
                    data.extend_from_slice(&nodes[id].value.data()[i * c..(i + 1) * c]);
                }
            }
            (Tensor::new(vec![rows, total], data)?, layout)
        };
        let ids: Vec<usize> = layout.iter().map(|&(id, _)| id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::ConcatCols(layout), rg))
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.tape.leaf_grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Tensor::new(self.shape(), g.clone()).ok()
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = f(&self.value())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        self,
        other: Self,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let value = f(&self.value(), &other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    fn zip(self, other: Self, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Add(self.id, other.id), "add", |x, y| x + y)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Sub(self.id, other.id), "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Mul(self.id, other.id), "mul", |x, y| x * y)
    }

    fn row_op(self, row: Self, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.binary(row, op, |a, r| {
            let (n, d) = a.expect_matrix(name)?;
            if r.len() != d {
                return Err(shape_err(name, a, r));
            }
            let rv = r.data();
            let mut data = a.data().to_vec();
            if d > 0 {
                for row in data.chunks_exact_mut(d) {
                    for (x, &y) in row.iter_mut().zip(rv) {
                        *x = f(*x, y);
                    }
                }
            }
            Tensor::new(vec![n, d], data)
        })
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        self.row_op(row, Op::AddRow(self.id, row.id), "add_row", |x, y| x + y)
    }

    /// Scales every row of an `n×d` matrix elementwise by a length-`d` vector.
    pub fn mul_row(self, row: Self) -> Result<Self> {
        self.row_op(row, Op::MulRow(self.id, row.id), "mul_row", |x, y| x * y)
    }

    pub fn scale(self, s: T) -> Self {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.map(|x| x * s)))
            .expect("elementwise op")
    }

    pub fn add_scalar(self, s: T) -> Self {
        self.unary(Op::AddScalar(self.id), |a| Ok(a.map(|x| x + s)))
            .expect("elementwise op")
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |a| Ok(a.map(|x| x.max(T::zero()))))
            .expect("elementwise op")
    }

    pub fn log(self) -> Self {
        self.unary(Op::Log(self.id), |a| Ok(a.map(T::ln)))
            .expect("elementwise op")
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |a| Ok(a.map(T::exp)))
            .expect("elementwise op")
    }

    fn softmax_like(self, op: Op<T>, log: bool) -> Result<Self> {
        self.unary(op, |a| {
            let (n, c) = a.expect_matrix("softmax")?;
            let mut data = Vec::with_capacity(n * c);
            for i in 0..n {
                let row = a.row(i);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                if log {
                    let lz = z.ln() + m;
                    data.extend(row.iter().map(|&v| v - lz));
                } else {
                    data.extend(row.iter().map(|&v| (v - m).exp() / z));
                }
            }
            Tensor::new(vec![n, c], data)
        })
    }

    /// Row-wise softmax of an `n×c` matrix.
    pub fn softmax_rows(self) -> Result<Self> {
        self.softmax_like(Op::SoftmaxRows(self.id), false)
    }

    /// Row-wise log-softmax, evaluated with the max-shift for stability.
    pub fn log_softmax_rows(self) -> Result<Self> {
        self.softmax_like(Op::LogSoftmaxRows(self.id), true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(self) -> Self {
        self.unary(Op::SumAll(self.id), |a| Ok(Tensor::scalar(a.sum())))
            .expect("reduction")
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / count(n))
    }

    /// Sums out one axis; the result drops that axis.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Rank {
                op: "sum_axis",
                expected: axis + 1,
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.unary(
            Op::SumAxis {
                input: self.id,
                outer,
                len,
                inner,
            },
            |a| {
                let src = a.data();
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += s;
                        }
                    }
                }
                Tensor::new(out_shape, data)
            },
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        let len = *self.shape().get(axis).unwrap_or(&1);
        Ok(self.sum_axis(axis)?.scale(T::one() / count(len)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::Reshape(self.id), |a| a.clone().reshape(shape))
    }

    /// Selects rows `index[r]` of an `n×d` matrix into an `index.len()×d` matrix.
    pub fn gather_rows(self, index: Arc<[usize]>) -> Result<Self> {
        let idx = index.clone();
        self.unary(Op::GatherRows(self.id, index), |a| {
            let (n, d) = a.expect_matrix("gather_rows")?;
            let mut data = Vec::with_capacity(idx.len() * d);
            for &r in idx.iter() {
                if r >= n {
                    return Err(Error::InsufficientPoints {
                        needed: r + 1,
                        available: n,
                    });
                }
                data.extend_from_slice(a.row(r));
            }
            Tensor::new(vec![idx.len(), d], data)
        })
    }

    /// Averages rows sharing a group id; empty groups yield zero rows.
    pub fn scatter_mean(self, groups: Arc<[usize]>, n_groups: usize) -> Result<Self> {
        let (n, d) = self.value().expect_matrix("scatter_mean")?;
        if groups.len() != n {
            return Err(Error::Shape {
                op: "scatter_mean",
                left: vec![n, d],
                right: vec![groups.len()],
            });
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups.iter() {
            if g >= n_groups {
                return Err(Error::Label {
                    label: g,
                    classes: n_groups,
                });
            }
            counts[g] += 1;
        }
        let c2 = counts.clone();
        let g2 = groups.clone();
        self.unary(
            Op::ScatterMean {
                input: self.id,
                groups,
                counts,
            },
            move |a| {
                let mut data = vec![T::zero(); n_groups * d];
                for (i, &g) in g2.iter().enumerate() {
                    for (o, &v) in data[g * d..(g + 1) * d].iter_mut().zip(a.row(i)) {
                        *o += v;
                    }
                }
                for (g, &c) in c2.iter().enumerate() {
                    if c > 0 {
                        let inv = T::one() / count::<T>(c);
                        data[g * d..(g + 1) * d].iter_mut().for_each(|v| *v *= inv);
                    }
                }
                Tensor::new(vec![n_groups, d], data)
            },
        )
    }

    /// `out_i = Σ_j weights[i,j] · x[index[i,j]]` for an `m×k` index table.
    pub fn weighted_gather(self, index: Arc<[usize]>, weights: Arc<[T]>, k: usize) -> Result<Self> {
        if index.len() != weights.len() || k == 0 || index.len() % k != 0 {
            return Err(Error::Shape {
                op: "weighted_gather",
                left: vec![index.len()],
                right: vec![weights.len(), k],
            });
        }
        let (idx, w) = (index.clone(), weights.clone());
        self.unary(
            Op::WeightedGather {
                input: self.id,
                index,
                weights,
                k,
            },
            move |a| {
                let (n, d) = a.expect_matrix("weighted_gather")?;
                let m = idx.len() / k;
                let mut data = vec![T::zero(); m * d];
                for i in 0..m {
                    let out = &mut data[i * d..(i + 1) * d];
                    for j in 0..k {
                        let src = idx[i * k + j];
                        if src >= n {
                            return Err(Error::InsufficientPoints {
                                needed: src + 1,
                                available: n,
                            });
                        }
                        let wij = w[i * k + j];
                        for (o, &v) in out.iter_mut().zip(a.row(src)) {
                            *o += wij * v;
                        }
                    }
                }
                Tensor::new(vec![m, d], data)
            },
        )
    }

    /// `out_i = (1/k) Σ_j (x[index[i,j]] - x_i)` over a self-aligned `n×k` index.
    pub fn umbrella(self, index: Arc<[usize]>, k: usize) -> Result<Self> {
        let idx = index.clone();
        self.unary(
            Op::Umbrella {
                input: self.id,
                index,
                k,
            },
            move |a| {
                let (n, d) = a.expect_matrix("umbrella")?;
                if k == 0 || idx.len() != n * k {
                    return Err(Error::Shape {
                        op: "umbrella",
                        left: vec![n, d],
                        right: vec![idx.len(), k],
                    });
                }
                if let Some(&j) = idx.iter().find(|&&j| j >= n) {
                    return Err(Error::InsufficientPoints {
                        needed: j + 1,
                        available: n,
                    });
                }
                let (kk, inv) = (count::<T>(k), T::one() / count::<T>(k));
                let src = a.data();
                let mut data = vec![T::zero(); n * d];
                if d > 0 {
                    for ((out, nb), xi) in data.chunks_exact_mut(d).zip(idx.chunks_exact(k)).zip(src.chunks_exact(d)) {
                        for &j in nb {
                            for (o, &xj) in out.iter_mut().zip(&src[j * d..(j + 1) * d]) {
                                *o += xj;
                            }
                        }
                        for (o, &v) in out.iter_mut().zip(xi) {
                            *o = (*o - kk * v) * inv;
                        }
                    }
                }
                Tensor::new(vec![n, d], data)
            },
        )
    }

    /// Picks `x[i, cols[i]]` from each row, giving a length-`n` vector.
    pub fn select_per_row(self, cols: Arc<[usize]>) -> Result<Self> {
        let c2 = cols.clone();
        self.unary(Op::SelectPerRow(self.id, cols), move |a| {
            let (n, c) = a.expect_matrix("select_per_row")?;
            if c2.len() != n {
                return Err(Error::Shape {
                    op: "select_per_row",
                    left: vec![n, c],
                    right: vec![c2.len()],
                });
            }
            let mut data = Vec::with_capacity(n);
            for (i, &j) in c2.iter().enumerate() {
                if j >= c {
                    return Err(Error::Label { label: j, classes: c });
                }
                data.push(a.at(i, j));
            }
            Tensor::new(vec![n], data)
        })
    }

    /// Per-column standardization over rows using batch statistics.
    ///
    /// Returns the normalized matrix (no affine) and the statistics used.
    pub fn batch_normalize(self, eps: T) -> Result<(Self, BatchStats<T>)> {
        let (value, inv_std, stats) = {
            let a = self.value();
            let (n, d) = a.expect_matrix("batch_norm")?;
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let nn = count::<T>(n);
            let mut mean = vec![T::zero(); d];
            for i in 0..n {
                for (m, &v) in mean.iter_mut().zip(a.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nn);
            let mut var = vec![T::zero(); d];
            for i in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(a.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= nn);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                data.extend(
                    a.row(i)
                        .iter()
                        .zip(&mean)
                        .zip(&inv_std)
                        .map(|((&v, &m), &s)| (v - m) * s),
                );
            }
            (Tensor::new(vec![n, d], data)?, inv_std, BatchStats { mean, var })
        };
        let rg = self.requires_grad();
        let out = self.tape.push(
            value,
            Op::BatchNorm {
                input: self.id,
                inv_std,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// Reverse sweep from this scalar; leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id].value;
        if loss.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.tape.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => match &mut leaf_grads[id] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b += v),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    acc.with(*a, |da| {
                        // dA = G · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g,
                            (n as isize, 1),
                            bv.data(),
                            (1, n as isize),
                            T::one(),
                            da,
                            (k as isize, 1),
                        )
                    });
                    acc.with(*b, |db| {
                        // dB = Aᵀ · G
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            T::one(),
                            db,
                            (n as isize, 1),
                        )
                    });
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    acc.with(*b, |d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc.with(*a, |d| {
                        for ((d, &v), &y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += v * y;
                        }
                    });
                    acc.with(*b, |d| {
                        for ((d, &v), &x) in d.iter_mut().zip(&g).zip(av) {
                            *d += v * x;
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    acc.add(*a, &g);
                    let dcols = nodes[*r].value.len();
                    acc.with(*r, |d| {
                        for row in g.chunks(dcols) {
                            d.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
                Op::MulRow(a, r) => {
                    let rv = nodes[*r].value.data();
                    let av = nodes[*a].value.data();
                    let dcols = rv.len();
                    acc.with(*a, |d| {
                        for (drow, grow) in d.chunks_mut(dcols).zip(g.chunks(dcols)) {
                            for ((d, &v), &s) in drow.iter_mut().zip(grow).zip(rv) {
                                *d += v * s;
                            }
                        }
                    });
                    acc.with(*r, |d| {
                        for (grow, arow) in g.chunks(dcols).zip(av.chunks(dcols)) {
                            for ((d, &v), &x) in d.iter_mut().zip(grow).zip(arow) {
                                *d += v * x;
                            }
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc.with(*a, |d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * *s));
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc.add(*a, &g),
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    acc.with(*a, |d| {
                        for ((d, &v), &x) in d.iter_mut().zip(&g).zip(x) {
                            if x > T::zero() {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Log(a) => {
                    let x = nodes[*a].value.data();
                    acc.with(*a, |d| {
                        for ((d, &v), &x) in d.iter_mut().zip(&g).zip(x) {
                            *d += v / x;
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc.with(*a, |d| {
                        for ((d, &v), &y) in d.iter_mut().zip(&g).zip(y) {
                            *d += v * y;
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc.with(*a, |d| {
                        for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc.with(*a, |d| {
                        for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let total: T = grow.iter().copied().sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += g - y.exp() * total;
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let v = g[0];
                    acc.with(*a, |d| d.iter_mut().for_each(|d| *d += v));
                }
                Op::SumAxis {
                    input,
                    outer,
                    len,
                    inner,
                } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    acc.with(*input, |d| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for (d, &v) in d[base..base + inner].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    });
                }
                Op::ConcatCols(layout) => {
                    let total: usize = layout.iter().map(|&(_, c)| c).sum();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &(id, c) in layout {
                        acc.with(id, |d| {
                            for i in 0..rows {
                                let src = &g[i * total + offset..i * total + offset + c];
                                for (d, &v) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::GatherRows(a, index) => {
                    let d_cols = nodes[*a].value.cols();
                    acc.with(*a, |d| {
                        for (r, &src) in index.iter().enumerate() {
                            let grow = &g[r * d_cols..(r + 1) * d_cols];
                            for (d, &v) in d[src * d_cols..(src + 1) * d_cols].iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::ScatterMean {
                    input,
                    groups,
                    counts,
                } => {
                    let d_cols = nodes[*input].value.cols();
                    acc.with(*input, |d| {
                        for (i, &grp) in groups.iter().enumerate() {
                            let inv = T::one() / count::<T>(counts[grp]);
                            let grow = &g[grp * d_cols..(grp + 1) * d_cols];
                            for (d, &v) in d[i * d_cols..(i + 1) * d_cols].iter_mut().zip(grow) {
                                *d += v * inv;
                            }
                        }
                    });
                }
                Op::WeightedGather {
                    input,
                    index,
                    weights,
                    k,
                } => {
                    let d_cols = nodes[*input].value.cols();
                    let k = *k;
                    acc.with(*input, |d| {
                        for (i, grow) in g.chunks(d_cols).enumerate() {
                            for j in 0..k {
                                let src = index[i * k + j];
                                let w = weights[i * k + j];
                                for (d, &v) in d[src * d_cols..(src + 1) * d_cols].iter_mut().zip(grow) {
                                    *d += w * v;
                                }
                            }
                        }
                    });
                }
                Op::SelectPerRow(a, cols) => {
                    let c = nodes[*a].value.cols();
                    acc.with(*a, |d| {
                        for (i, &j) in cols.iter().enumerate() {
                            d[i * c + j] += g[i];
                        }
                    });
                }
                Op::Umbrella { input, index, k } => {
                    let d_cols = nodes[*input].value.cols();
                    let k = *k;
                    let inv = T::one() / count::<T>(k);
                    acc.with(*input, |d| {
                        for (i, grow) in g.chunks(d_cols).enumerate() {
                            for &j in &index[i * k..(i + 1) * k] {
                                for (d, &v) in d[j * d_cols..(j + 1) * d_cols].iter_mut().zip(grow) {
                                    *d += v * inv;
                                }
                            }
                            for (d, &v) in d[i * d_cols..(i + 1) * d_cols].iter_mut().zip(grow) {
                                *d -= v;
                            }
                        }
                    });
                }
                Op::BatchNorm { input, inv_std } => {
                    let xhat = node.value.data();
                    let d_cols = inv_std.len();
                    let n = g.len() / d_cols;
                    let nn = count::<T>(n);
                    let mut sum_g = vec![T::zero(); d_cols];
                    let mut sum_gx = vec![T::zero(); d_cols];
                    for (grow, xrow) in g.chunks(d_cols).zip(xhat.chunks(d_cols)) {
                        for c in 0..d_cols {
                            sum_g[c] += grow[c];
                            sum_gx[c] += grow[c] * xrow[c];
                        }
                    }
                    acc.with(*input, |d| {
                        for ((drow, grow), xrow) in
                            d.chunks_mut(d_cols).zip(g.chunks(d_cols)).zip(xhat.chunks(d_cols))
                        {
                            for c in 0..d_cols {
                                drow[c] += inv_std[c] / nn
                                    * (nn * grow[c] - sum_g[c] - xrow[c] * sum_gx[c]);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Accumulator<'_, T> {
    fn with(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn add(&mut self, id: usize, g: &[T]) {
        self.with(id, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
    }
}

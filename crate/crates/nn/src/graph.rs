use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::dropout::{keep_mask, DropoutKey};
use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Relu,
    Gelu,
    Sigmoid,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    Unary(UnaryOp, Var),
    Clamp(Var, T, T),
    Softmax(Var),
    Normalize { x: Var, rstd: Vec<T> },
    MeanRows(Var),
    SumAll(Var),
    RowNorm(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Conv1d(Var, Var),
    WindowSum { x: Var, lo: usize, hi: usize },
    MagAlpha { z: Var, h: Var, beta: T, active: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of operations over 2-D values, recorded in evaluation order.
///
/// Parameters are read from a borrowed [`ParamStore`]; [`Graph::backward`]
/// returns their gradients. Dropout is active only when a [`DropoutKey`] is
/// installed.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    dropout: Option<DropoutKey>,
    dropout_sites: u64,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn matmul_into<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    out: &mut [T],
    accumulate: bool,
) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut c = ArrayViewMut2::from_shape((n, m), out).expect("output buffer sized");
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a, &b, beta, &mut c);
}

fn view<T>(rows: usize, cols: usize, data: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer sized")
}

fn broadcast_shape(op: &'static str, a: &[usize; 2], b: &[usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for k in 0..2 {
        out[k] = if a[k] == b[k] || b[k] == 1 {
            a[k]
        } else if a[k] == 1 {
            b[k]
        } else {
            return Err(NnError::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

#[inline]
fn bidx(dims: &[usize; 2], r: usize, c: usize) -> usize {
    let rr = if dims[0] == 1 { 0 } else { r };
    let cc = if dims[1] == 1 { 0 } else { c };
    rr * dims[1] + cc
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> [usize; 2] {
    [t.rows(), t.cols()]
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout: None,
            dropout_sites: 0,
        }
    }

    /// Enables dropout masks drawn from the counter-based generator keyed by
    /// `key` and the per-graph site counter.
    pub fn with_dropout(mut self, key: DropoutKey) -> Self {
        self.dropout = Some(key);
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient that is reported anywhere.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(NnError::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, m) = (ta.rows(), tb.cols());
        let mut out = vec![T::zero(); n * m];
        matmul_into(
            view(n, ta.cols(), ta.data()),
            view(tb.rows(), m, tb.data()),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b)))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (dims2(ta), dims2(tb));
        let out_dims = broadcast_shape(name, &da, &db)?;
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<T> = if da == db {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = Vec::with_capacity(out_dims[0] * out_dims[1]);
            for r in 0..out_dims[0] {
                for c in 0..out_dims[1] {
                    d.push(f(ta.data()[bidx(&da, r, c)], tb.data()[bidx(&db, r, c)]));
                }
            }
            d
        };
        let t = Tensor::matrix(out_dims[0], out_dims[1], data)?;
        Ok(self.push(t, Op::Binary(op, a, b)))
    }

    /// Elementwise sum; either operand may broadcast along a size-1 axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let t = self.value(a).map(|x| match op {
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Gelu => gelu(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Abs => x.abs(),
        });
        self.push(t, Op::Unary(op, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    /// `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Softmax along the last axis of every row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis, population variance.
    pub fn normalize(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let n = T::count(cols);
        let mut out = x.data().to_vec();
        let mut rstds = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Normalize { x: a, rstd: rstds })
    }

    /// Mean over rows (time), giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); cols];
        for row in x.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::count(rows);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::count(self.value(a).len());
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Euclidean norm of each row, giving a `rows x 1` column. The gradient
    /// of a zero row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out: Vec<T> = x
            .data()
            .chunks(x.cols())
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rows = out.len();
        self.push(Tensor::matrix(rows, 1, out).expect("sized"), Op::RowNorm(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out).expect("sized"), Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.rows() {
            return Err(NnError::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, x.rows()),
            ));
        }
        let c = x.cols();
        let data = x.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.cols() {
            return Err(NnError::shape(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, x.cols()),
            ));
        }
        let c = x.cols();
        let data: Vec<T> = x
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rows = x.rows();
        Ok(self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(*parts.first().ok_or_else(|| NnError::shape("concat_rows", "empty"))?).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NnError::shape("concat_rows", format!("cols {} vs {cols}", t.cols())));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(*parts.first().ok_or_else(|| NnError::shape("concat_cols", "empty"))?).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(NnError::shape("concat_cols", format!("rows {} vs {rows}", t.rows())));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if indices.is_empty() {
            return Err(NnError::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(NnError::shape("gather", format!("index {bad} >= {}", t.rows())));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(out, Op::Gather(table, indices.to_vec())))
    }

    /// Temporal cross-correlation of `x` (`T x d_in`) with `kernel`
    /// (`k x d_in x d_out`, `k` odd), zero padded to keep length `T`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let ks = tk.shape();
        if ks.len() != 3 || ks[0] % 2 == 0 || ks[1] != tx.cols() {
            return Err(NnError::shape(
                "conv1d",
                format!("input {:?} kernel {:?}", tx.shape(), ks),
            ));
        }
        let (k, d_in, d_out) = (ks[0], ks[1], ks[2]);
        let t = tx.rows();
        let cols = im2col(tx, k);
        let mut out = vec![T::zero(); t * d_out];
        matmul_into(view(t, k * d_in, &cols), view(k * d_in, d_out, tk.data()), &mut out, false);
        Ok(self.push(Tensor::matrix(t, d_out, out)?, Op::Conv1d(x, kernel)))
    }

    /// Sliding sum: output row `i` is `sum_{q=lo..=hi} x[i + q]` for
    /// `i < count`.
    pub fn window_sum(&mut self, x: Var, lo: usize, hi: usize, count: usize) -> Result<Var> {
        let t = self.value(x);
        if lo > hi || count == 0 || count + hi > t.rows() {
            return Err(NnError::shape(
                "window_sum",
                format!("offsets {lo}..={hi} x {count} over {} rows", t.rows()),
            ));
        }
        let c = t.cols();
        let mut out = vec![T::zero(); count * c];
        for i in 0..count {
            let dst = &mut out[i * c..(i + 1) * c];
            for q in lo..=hi {
                for (o, &v) in dst.iter_mut().zip(t.row(i + q)) {
                    *o += v;
                }
            }
        }
        let out = Tensor::matrix(count, c, out)?;
        Ok(self.push(out, Op::WindowSum { x, lo, hi }))
    }

    /// Per-row gate scale `min(beta * |z| / |h|, 1)`, 1 when `|h| <= 1e-8`.
    pub fn mag_alpha(&mut self, z: Var, h: Var, beta: T) -> Result<Var> {
        let (tz, th) = (self.value(z), self.value(h));
        if tz.shape() != th.shape() {
            return Err(NnError::shape(
                "mag_alpha",
                format!("{:?} vs {:?}", tz.shape(), th.shape()),
            ));
        }
        let tiny = T::lit(1e-8);
        let c = tz.cols();
        let mut out = Vec::with_capacity(tz.rows());
        let mut active = Vec::with_capacity(tz.rows());
        for (rz, rh) in tz.data().chunks(c).zip(th.data().chunks(c)) {
            let nz = rz.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nh = rh.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nh <= tiny {
                out.push(T::one());
                active.push(false);
                continue;
            }
            let ratio = nz / nh * beta;
            if ratio >= T::one() {
                out.push(T::one());
                active.push(false);
            } else {
                out.push(ratio);
                active.push(true);
            }
        }
        let rows = out.len();
        let t = Tensor::matrix(rows, 1, out)?;
        Ok(self.push(t, Op::MagAlpha { z, h, beta, active }))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// rest by `1 / (1 - p)`. Identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        let Some(key) = self.dropout else {
            return Ok(a);
        };
        if p <= 0.0 {
            return Ok(a);
        }
        let site = self.dropout_sites;
        self.dropout_sites += 1;
        let x = self.value(a);
        let scale = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = keep_mask(key, site, x.len(), p)
            .into_iter()
            .map(|keep| if keep { scale } else { T::zero() })
            .collect();
        let mask = Tensor::new(x.shape().to_vec(), mask)?;
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Fails with `NonFiniteValue` naming the first node holding NaN or inf.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(NnError::NonFiniteValue(format!(
                    "node {i} ({})",
                    op_name(&n.op)
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from `root`, seeded with ones. Returns the gradient of
    /// every parameter that `root` depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));
        let mut out = Gradients::empty(self.params.len());
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &dy, &mut grads)?;
            if let Op::Param(id) = node.op {
                out.set(id, dy);
            }
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let dyv = view(n, m, dy.data());
                let ga = grad_slot(grads, *a, ta);
                matmul_into(dyv, view(k, m, tb.data()).t(), ga.data_mut(), true);
                let gb = grad_slot(grads, *b, tb);
                matmul_into(view(n, k, ta.data()).t(), dyv, gb.data_mut(), true);
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (dims2(ta), dims2(tb));
                let od = dims2(y);
                let mut ga = vec![T::zero(); ta.len()];
                let mut gb = vec![T::zero(); tb.len()];
                for r in 0..od[0] {
                    for c in 0..od[1] {
                        let g = dy.data()[r * od[1] + c];
                        let (ia, ib) = (bidx(&da, r, c), bidx(&db, r, c));
                        let (x, z) = (ta.data()[ia], tb.data()[ib]);
                        let (pa, pb) = match op {
                            BinaryOp::Add => (g, g),
                            BinaryOp::Sub => (g, -g),
                            BinaryOp::Mul => (g * z, g * x),
                            BinaryOp::Div => (g / z, -g * x / (z * z)),
                        };
                        ga[ia] += pa;
                        gb[ib] += pb;
                    }
                }
                add_grad(grads, *a, ta, &ga);
                add_grad(grads, *b, tb, &gb);
            }
            Op::Scale(a, c) => {
                let g: Vec<T> = dy.data().iter().map(|&v| v * *c).collect();
                add_grad(grads, *a, self.value(*a), &g);
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let g: Vec<T> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(dy.data())
                    .map(|((&xv, &yv), &d)| {
                        d * match op {
                            UnaryOp::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(xv),
                            UnaryOp::Sigmoid => yv * (T::one() - yv),
                            UnaryOp::Abs => {
                                if xv > T::zero() {
                                    T::one()
                                } else if xv < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                add_grad(grads, *a, x, &g);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let g: Vec<T> = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &d)| if xv < *lo || xv > *hi { T::zero() } else { d })
                    .collect();
                add_grad(grads, *a, x, &g);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut g = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)) {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        gr[k] = yr[k] * (dr[k] - dot);
                    }
                }
                add_grad(grads, *a, self.value(*a), &g);
            }
            Op::Normalize { x, rstd } => {
                let c = y.cols();
                let n = T::count(c);
                let mut g = vec![T::zero(); y.len()];
                for (((gr, yr), dr), &rs) in g
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(dy.data().chunks(c))
                    .zip(rstd)
                {
                    let mean_d = dr.iter().copied().sum::<T>() / n;
                    let mean_dy: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for k in 0..c {
                        gr[k] = rs * (dr[k] - mean_d - yr[k] * mean_dy);
                    }
                }
                add_grad(grads, *x, self.value(*x), &g);
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = T::one() / T::count(x.rows());
                let c = x.cols();
                let g: Vec<T> = (0..x.len()).map(|i| dy.data()[i % c] * inv).collect();
                add_grad(grads, *a, x, &g);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let g = vec![dy.item(); x.len()];
                add_grad(grads, *a, x, &g);
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut g = vec![T::zero(); x.len()];
                for (r, (gr, xr)) in g.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
                    let norm = y.data()[r];
                    if norm > T::zero() {
                        let s = dy.data()[r] / norm;
                        for k in 0..c {
                            gr[k] = s * xr[k];
                        }
                    }
                }
                add_grad(grads, *a, x, &g);
            }
            Op::Transpose(a) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut g = vec![T::zero(); x.len()];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy.data()[j * r + i];
                    }
                }
                add_grad(grads, *a, x, &g);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let c = x.cols();
                let slot = grad_slot(grads, *a, x);
                for (o, &d) in slot.data_mut()[start * c..].iter_mut().zip(dy.data()) {
                    *o += d;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (c, len) = (x.cols(), y.cols());
                let slot = grad_slot(grads, *a, x);
                for (r, dr) in dy.data().chunks(len).enumerate() {
                    for (o, &d) in slot.data_mut()[r * c + start..r * c + start + len].iter_mut().zip(dr) {
                        *o += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let n = x.len();
                    add_grad(grads, p, x, &dy.data()[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let x = self.value(p);
                    let c = x.cols();
                    let g: Vec<T> = dy
                        .data()
                        .chunks(total)
                        .flat_map(|row| row[col..col + c].iter().copied())
                        .collect();
                    add_grad(grads, p, x, &g);
                    col += c;
                }
            }
            Op::Gather(table, indices) => {
                let t = self.value(*table);
                let c = t.cols();
                let slot = grad_slot(grads, *table, t);
                for (i, &idx) in indices.iter().enumerate() {
                    for (o, &d) in slot.data_mut()[idx * c..(idx + 1) * c].iter_mut().zip(dy.row(i)) {
                        *o += d;
                    }
                }
            }
            Op::Conv1d(x, kernel) => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let ks = tk.shape();
                let (k, d_in, d_out) = (ks[0], ks[1], ks[2]);
                let t = tx.rows();
                let cols = im2col(tx, k);
                let dyv = view(t, d_out, dy.data());
                let gk = grad_slot(grads, *kernel, tk);
                matmul_into(view(t, k * d_in, &cols).t(), dyv, gk.data_mut(), true);
                let mut dcols = vec![T::zero(); t * k * d_in];
                matmul_into(dyv, view(k * d_in, d_out, tk.data()).t(), &mut dcols, false);
                let pad = k / 2;
                let gx = grad_slot(grads, *x, tx);
                let gxd = gx.data_mut();
                for row in 0..t {
                    for j in 0..k {
                        let src = row + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        let from = &dcols[row * k * d_in + j * d_in..row * k * d_in + (j + 1) * d_in];
                        for (o, &d) in gxd[s * d_in..(s + 1) * d_in].iter_mut().zip(from) {
                            *o += d;
                        }
                    }
                }
            }
            Op::WindowSum { x, lo, hi } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let slot = grad_slot(grads, *x, tx);
                let gd = slot.data_mut();
                for i in 0..y.rows() {
                    let dr = dy.row(i);
                    for q in *lo..=*hi {
                        for (o, &d) in gd[(i + q) * c..(i + q + 1) * c].iter_mut().zip(dr) {
                            *o += d;
                        }
                    }
                }
            }
            Op::MagAlpha { z, h, beta, active } => {
                let (tz, th) = (self.value(*z), self.value(*h));
                let c = tz.cols();
                let mut gz = vec![T::zero(); tz.len()];
                let mut gh = vec![T::zero(); th.len()];
                for r in 0..tz.rows() {
                    if !active[r] {
                        continue;
                    }
                    let (rz, rh) = (tz.row(r), th.row(r));
                    let nz = rz.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let nh = rh.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let d = dy.data()[r];
                    if nz > T::zero() {
                        let s = d * *beta / (nz * nh);
                        for k in 0..c {
                            gz[r * c + k] = s * rz[k];
                        }
                    }
                    let s = -d * *beta * nz / (nh * nh * nh);
                    for k in 0..c {
                        gh[r * c + k] = s * rh[k];
                    }
                }
                add_grad(grads, *z, tz, &gz);
                add_grad(grads, *h, th, &gh);
            }
        }
        Ok(())
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (t, d) = (x.rows(), x.cols());
    let pad = k / 2;
    let mut cols = vec![T::zero(); t * k * d];
    for row in 0..t {
        for j in 0..k {
            let src = row + j;
            if src < pad || src - pad >= t {
                continue;
            }
            let s = src - pad;
            cols[row * k * d + j * d..row * k * d + (j + 1) * d].copy_from_slice(x.row(s));
        }
    }
    cols
}

fn grad_slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], v: Var, like: &Tensor<T>) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, like: &Tensor<T>, g: &[T]) {
    let slot = grad_slot(grads, v, like);
    for (o, &d) in slot.data_mut().iter_mut().zip(g) {
        *o += d;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Binary(..) => "binary",
        Op::Scale(..) => "scale",
        Op::Unary(..) => "unary",
        Op::Clamp(..) => "clamp",
        Op::Softmax(_) => "softmax",
        Op::Normalize { .. } => "normalize",
        Op::MeanRows(_) => "mean_rows",
        Op::SumAll(_) => "sum_all",
        Op::RowNorm(_) => "row_norm",
        Op::Transpose(_) => "transpose",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::Gather(..) => "gather",
        Op::Conv1d(..) => "conv1d",
        Op::WindowSum { .. } => "window_sum",
        Op::MagAlpha { .. } => "mag_alpha",
    }
}

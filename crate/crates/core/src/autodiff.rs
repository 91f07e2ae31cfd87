//! Reverse-mode differentiation over batched row-major matrices.
//!
//! Every value on the [`Tape`] is an `Array2<f64>` whose rows are batch
//! elements (nodes or graphs) and whose columns are features. Operations are
//! recorded eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node that depends on a parameter leaf.
//!
//! Binary elementwise operations broadcast dimensions of size one, so a
//! `[1, c]` row of parameters or a `[r, 1]` column of per-row scalars can be
//! combined with an `[r, c]` block.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite gradient produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward root must be a 1x1 value, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse rows; used for the normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn matmul(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut row = out.row_mut(r);
            for idx in self.indptr[r]..self.indptr[r + 1] {
                row.scaled_add(self.values[idx], &x.row(self.indices[idx]));
            }
        }
        out
    }

    pub fn transpose_matmul(&self, g: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[idx])
                    .scaled_add(self.values[idx], &g.row(r));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    /// `x · wᵀ` with `w` stored as `[out, in]`.
    Linear(Var, Var),
    MatMul(Var, Var),
    SpMM(Rc<Csr>, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    ClampMin(Var, f64),
    RowSum(Var),
    RowDot(Var, Var),
    RowNorm(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    /// Per-segment row sums, each segment scaled by its factor.
    SegmentReduce(Var, Rc<Vec<usize>>, Rc<Vec<f64>>),
    WeightedSum(Vec<(Var, usize, Var)>),
    SoftmaxRows(Var),
    CrossEntropy(Var, Rc<Vec<usize>>),
    GroupDot(Var, Var),
    SphLogPole(Var, f64),
    SphExpPole(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Linear(..) => "linear",
            Op::MatMul(..) => "matmul",
            Op::SpMM(..) => "spmm",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::RowSum(..) => "row_sum",
            Op::RowDot(..) => "row_dot",
            Op::RowNorm(..) => "row_norm",
            Op::SumAll(..) => "sum_all",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SegmentReduce(..) => "segment_reduce",
            Op::WeightedSum(..) => "weighted_sum",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::GroupDot(..) => "group_dot",
            Op::SphLogPole(..) => "sph_log_pole",
            Op::SphExpPole(..) => "sph_exp_pole",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the
    /// root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push_raw(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        // Row-wise kernels rely on contiguous rows.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo), &[a])
    }

    // -- linear algebra ----------------------------------------------------

    /// `x · wᵀ` for `x: [r, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let v = self.value(x).dot(&self.value(w).t());
        self.push(v, Op::Linear(x, w), &[x, w])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn spmm(&mut self, m: Rc<Csr>, x: Var) -> Var {
        let v = m.matmul(&self.value(x).view());
        self.push(v, Op::SpMM(m, x), &[x])
    }

    // -- reductions --------------------------------------------------------

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a), &[a])
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "row_dot shape mismatch");
        let mut v = Array2::zeros((va.nrows(), 1));
        Zip::from(v.rows_mut())
            .and(va.rows())
            .and(vb.rows())
            .for_each(|mut o, x, y| o[0] = x.dot(&y));
        self.push(v, Op::RowDot(a, b), &[a, b])
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Array2::zeros((va.nrows(), 1));
        Zip::from(v.rows_mut())
            .and(va.rows())
            .for_each(|mut o, x| o[0] = x.dot(&x).sqrt());
        self.push(v, Op::RowNorm(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    // -- structural --------------------------------------------------------

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::GatherRows(a, rows), &[a])
    }

    /// Row-wise concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Sum of rows grouped by `segments[row]` into `count` output rows.
    pub fn segment_sum(&mut self, a: Var, segments: Rc<Vec<usize>>, count: usize) -> Var {
        self.segment_reduce(a, segments, count, false)
    }

    /// Mean of rows grouped by `segments[row]`; empty segments yield zeros.
    pub fn segment_mean(&mut self, a: Var, segments: Rc<Vec<usize>>, count: usize) -> Var {
        self.segment_reduce(a, segments, count, true)
    }

    fn segment_reduce(&mut self, a: Var, segments: Rc<Vec<usize>>, count: usize, mean: bool) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), segments.len());
        let mut sizes = vec![0.0; count];
        let mut v = Array2::zeros((count, va.ncols()));
        // ascending row order keeps the reduction reproducible
        for (r, &seg) in segments.iter().enumerate() {
            sizes[seg] += 1.0;
            v.row_mut(seg).scaled_add(1.0, &va.row(r));
        }
        let scales: Vec<f64> = if mean {
            sizes.iter().map(|&n| if n > 0.0 { 1.0 / n } else { 0.0 }).collect()
        } else {
            vec![1.0; count]
        };
        if mean {
            for (mut row, &k) in v.rows_mut().into_iter().zip(&scales) {
                row.mapv_inplace(|x| x * k);
            }
        }
        self.push(v, Op::SegmentReduce(a, segments, Rc::new(scales)), &[a])
    }

    /// `Σ_m w_m[:, col_m] ⊙ x_m` where each weight column scales its rows.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize, Var)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Array2::zeros(self.value(terms[0].2).dim());
        for &(w, col, x) in terms {
            let wv = self.value(w).column(col);
            Zip::from(out.rows_mut())
                .and(self.value(x).rows())
                .and(&wv)
                .for_each(|mut o, xr, &wr| o.scaled_add(wr, &xr));
        }
        let parents: Vec<Var> = terms.iter().flat_map(|t| [t.0, t.2]).collect();
        self.push(out, Op::WeightedSum(terms.to_vec()), &parents)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            softmax_in_place(row.as_slice_mut().unwrap());
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len());
        let mut total = 0.0;
        for (row, &y) in z.rows().into_iter().zip(labels.iter()) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels), &[logits])
    }

    /// Per-group dot products: `x: [r, K·m]`, `w: [K, m]` → `[r, K]`.
    pub fn group_dot(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (k, m) = vw.dim();
        assert_eq!(vx.ncols(), k * m, "group_dot width mismatch");
        let mut v = Array2::zeros((vx.nrows(), k));
        for g in 0..k {
            let block = vx.slice(s![.., g * m..(g + 1) * m]);
            v.column_mut(g).assign(&block.dot(&vw.row(g)));
        }
        self.push(v, Op::GroupDot(x, w), &[x, w])
    }

    /// Sphere log at the pole `(radius, 0, …)`. Input rows are time blocks
    /// of any positive scale; output rows are the `t` free tangent
    /// coordinates.
    pub fn sph_log_pole(&mut self, x: Var, radius: f64) -> Var {
        let vx = self.value(x);
        let t = vx.ncols() - 1;
        let mut v = Array2::zeros((vx.nrows(), t));
        for (mut o, row) in v.rows_mut().into_iter().zip(vx.rows()) {
            let x0 = row[0];
            let p = row.slice(s![1..]);
            let n = p.dot(&p).sqrt();
            let f = log_pole_factor(n, x0, radius);
            o.assign(&(&p * f));
        }
        self.push(v, Op::SphLogPole(x, radius), &[x])
    }

    /// Sphere exp at the pole; input rows are `t` free coordinates, output
    /// rows are points on the sphere of `radius` in `R^{t+1}`.
    pub fn sph_exp_pole(&mut self, v: Var, radius: f64) -> Var {
        let vv = self.value(v);
        let t = vv.ncols();
        let mut out = Array2::zeros((vv.nrows(), t + 1));
        for (mut o, row) in out.rows_mut().into_iter().zip(vv.rows()) {
            let n = row.dot(&row).sqrt();
            o[0] = radius * (n / radius).cos();
            let g = exp_pole_factor(n, radius);
            o.slice_mut(s![1..]).assign(&(&row * g));
        }
        self.push(out, Op::SphExpPole(v, radius), &[v])
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a `1x1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)
                .map_err(|()| AutodiffError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                })?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) -> Result<(), ()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = Accumulator {
            tape: self,
            grads,
            finite: true,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add_reduced(*a, g.clone());
                acc.add_reduced(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc.add_reduced(*a, g.clone());
                acc.add_reduced(*b, -g);
            }
            Op::Mul(a, b) => {
                if acc.wants(*a) {
                    acc.add_reduced(*a, broadcast_zip(g, self.value(*b), |x, y| x * y));
                }
                if acc.wants(*b) {
                    acc.add_reduced(*b, broadcast_zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if acc.wants(*a) {
                    acc.add_reduced(*a, broadcast_zip(g, vb, |x, y| x / y));
                }
                if acc.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = broadcast_zip(g, out, |x, y| -x * y);
                    acc.add_reduced(*b, broadcast_zip(&t, vb, |x, y| x / y));
                }
            }
            Op::Scale(a, k) => acc.add(*a, g * *k),
            Op::Offset(a) => acc.add(*a, g.clone()),
            Op::Linear(x, w) => {
                if acc.wants(*x) {
                    acc.add(*x, g.dot(self.value(*w)));
                }
                if acc.wants(*w) {
                    acc.add(*w, g.t().dot(self.value(*x)));
                }
            }
            Op::MatMul(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, g.dot(&self.value(*b).t()));
                }
                if acc.wants(*b) {
                    acc.add(*b, self.value(*a).t().dot(g));
                }
            }
            Op::SpMM(m, x) => acc.add(*x, m.transpose_matmul(&g.view())),
            Op::Tanh(a) => acc.add(*a, Zip::from(g).and(out).map_collect(|g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => {
                acc.add(*a, Zip::from(g).and(out).map_collect(|g, y| g * y * (1.0 - y)))
            }
            Op::Exp(a) => acc.add(*a, g * out),
            Op::Ln(a) => acc.add(*a, g / self.value(*a)),
            Op::Sqrt(a) => acc.add(*a, Zip::from(g).and(out).map_collect(|g, y| 0.5 * g / y)),
            Op::Square(a) => {
                acc.add(*a, Zip::from(g).and(self.value(*a)).map_collect(|g, x| 2.0 * g * x))
            }
            Op::Abs(a) => acc.add(
                *a,
                Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|g, x| if *x >= 0.0 { *g } else { -g }),
            ),
            Op::ClampMin(a, lo) => acc.add(
                *a,
                Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|g, x| if *x > *lo { *g } else { 0.0 }),
            ),
            Op::RowSum(a) => {
                let shape = self.shape(*a);
                acc.add(*a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::RowDot(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, self.value(*b) * g);
                }
                if acc.wants(*b) {
                    acc.add(*b, self.value(*a) * g);
                }
            }
            Op::RowNorm(a) => {
                let va = self.value(*a);
                let mut d = va.clone();
                for ((mut row, n), gi) in d.rows_mut().into_iter().zip(out.iter()).zip(g.iter()) {
                    if *n > 0.0 {
                        row.mapv_inplace(|x| x * gi / n);
                    } else {
                        row.fill(0.0);
                    }
                }
                acc.add(*a, d);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                acc.add(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Concat(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if acc.wants(*p) {
                        acc.add(*p, g.slice(s![.., c0..c0 + w]).to_owned());
                    }
                    c0 += w;
                }
            }
            Op::Slice(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc.add(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    d.row_mut(r).scaled_add(1.0, &g.row(i));
                }
                acc.add(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if acc.wants(*p) {
                        acc.add(*p, g.slice(s![r0..r0 + h, ..]).to_owned());
                    }
                    r0 += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                let h = g.nrows();
                d.slice_mut(s![*start..*start + h, ..]).assign(g);
                acc.add(*a, d);
            }
            Op::SegmentReduce(a, segments, scales) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, &seg) in segments.iter().enumerate() {
                    d.row_mut(r).scaled_add(scales[seg], &g.row(seg));
                }
                acc.add(*a, d);
            }
            Op::WeightedSum(terms) => {
                for &(w, col, x) in terms {
                    if acc.wants(x) {
                        let wc = self.value(w).column(col).insert_axis(Axis(1)).to_owned();
                        acc.add(x, g * &wc);
                    }
                    if acc.wants(w) {
                        let vx = self.value(x);
                        let mut d = Array2::zeros(self.shape(w));
                        Zip::from(d.column_mut(col))
                            .and(g.rows())
                            .and(vx.rows())
                            .for_each(|o, gr, xr| *o = gr.dot(&xr));
                        acc.add(w, d);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut row, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let sum: f64 = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|di, &y| *di -= y * sum);
                }
                acc.add(*a, d);
            }
            Op::CrossEntropy(logits, labels) => {
                let z = self.value(*logits);
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut d = z.clone();
                for (mut row, &y) in d.rows_mut().into_iter().zip(labels.iter()) {
                    softmax_in_place(row.as_slice_mut().unwrap());
                    row[y] -= 1.0;
                    row.mapv_inplace(|v| v * scale);
                }
                acc.add(*logits, d);
            }
            Op::GroupDot(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, m) = vw.dim();
                if acc.wants(*x) {
                    let mut d = Array2::zeros(vx.dim());
                    for grp in 0..k {
                        let gcol = g.column(grp).insert_axis(Axis(1));
                        let wrow = vw.row(grp).insert_axis(Axis(0));
                        d.slice_mut(s![.., grp * m..(grp + 1) * m])
                            .assign(&gcol.dot(&wrow));
                    }
                    acc.add(*x, d);
                }
                if acc.wants(*w) {
                    let mut d = Array2::zeros(vw.dim());
                    for grp in 0..k {
                        let block = vx.slice(s![.., grp * m..(grp + 1) * m]);
                        d.row_mut(grp).assign(&block.t().dot(&g.column(grp)));
                    }
                    acc.add(*w, d);
                }
            }
            Op::SphLogPole(x, radius) => {
                let vx = self.value(*x);
                let mut d = Array2::zeros(vx.dim());
                for ((mut drow, xrow), grow) in
                    d.rows_mut().into_iter().zip(vx.rows()).zip(g.rows())
                {
                    let x0 = xrow[0];
                    let p = xrow.slice(s![1..]);
                    let n = p.dot(&p).sqrt();
                    let (f, df_dn_over_n, df_dx0) = log_pole_derivs(n, x0, *radius);
                    let gp = grow.dot(&p);
                    drow[0] = df_dx0 * gp;
                    let mut rest = drow.slice_mut(s![1..]);
                    rest.assign(&(&grow * f));
                    rest.scaled_add(df_dn_over_n * gp, &p);
                }
                acc.add(*x, d);
            }
            Op::SphExpPole(v, radius) => {
                let vv = self.value(*v);
                let mut d = Array2::zeros(vv.dim());
                for ((mut drow, vrow), grow) in
                    d.rows_mut().into_iter().zip(vv.rows()).zip(g.rows())
                {
                    let n = vrow.dot(&vrow).sqrt();
                    let (gfac, dg_dn_over_n, sin_over_n) = exp_pole_derivs(n, *radius);
                    let grest = grow.slice(s![1..]);
                    let gv = grest.dot(&vrow);
                    // d/dv [r cos(n/r)] = -sin(n/r) v / n
                    drow.assign(&(&grest * gfac));
                    drow.scaled_add(dg_dn_over_n * gv - grow[0] * sin_over_n, &vrow);
                }
                acc.add(*v, d);
            }
        }
        if acc.finite {
            Ok(())
        } else {
            Err(())
        }
    }
}

struct Accumulator<'a> {
    tape: &'a Tape,
    grads: &'a mut [Option<Array2<f64>>],
    finite: bool,
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, d: Array2<f64>) {
        if !self.wants(v) {
            return;
        }
        if !d.iter().all(|x| x.is_finite()) {
            self.finite = false;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        }
    }

    /// Sums broadcast dimensions of `d` back to `v`'s shape.
    fn add_reduced(&mut self, v: Var, d: Array2<f64>) {
        if !self.wants(v) {
            return;
        }
        let (r, c) = self.tape.shape(v);
        let mut d = d;
        if r == 1 && d.nrows() != 1 {
            d = d.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if c == 1 && d.ncols() != 1 {
            d = d.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        self.add(v, d);
    }
}

// ---------------------------------------------------------------------------
// numeric kernels

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn broadcast_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let rows = bdim(a.nrows(), b.nrows());
    let cols = bdim(a.ncols(), b.ncols());
    let av = a.broadcast((rows, cols)).expect("broadcast lhs");
    let bv = b.broadcast((rows, cols)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn bdim(a: usize, b: usize) -> usize {
    match (a, b) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => panic!("incompatible broadcast dimensions {x} and {y}"),
    }
}

/// Below this ratio `n / x0` the series expansions are used.
const SERIES_CUTOFF: f64 = 1e-4;

/// `F(n, x0) = r·atan2(n, x0)/n`, continuous at `n = 0` for `x0 > 0`.
fn log_pole_factor(n: f64, x0: f64, r: f64) -> f64 {
    if x0 > 0.0 && n < SERIES_CUTOFF * x0 {
        let u = n / x0;
        r * (1.0 - u * u / 3.0) / x0
    } else if n == 0.0 {
        f64::NAN
    } else {
        r * n.atan2(x0) / n
    }
}

/// Returns `(F, (∂F/∂n)/n, ∂F/∂x0)`.
fn log_pole_derivs(n: f64, x0: f64, r: f64) -> (f64, f64, f64) {
    let f = log_pole_factor(n, x0, r);
    let rho2 = n * n + x0 * x0;
    let df_dx0 = -r / rho2;
    let df_dn_over_n = if x0 > 0.0 && n < SERIES_CUTOFF * x0 {
        let u = n / x0;
        r * (-2.0 / 3.0 + 0.8 * u * u) / (x0 * x0 * x0)
    } else {
        let theta = n.atan2(x0);
        r * (x0 * n / rho2 - theta) / (n * n * n)
    };
    (f, df_dn_over_n, df_dx0)
}

/// `G(n) = r·sin(n/r)/n`, continuous at zero.
fn exp_pole_factor(n: f64, r: f64) -> f64 {
    let a = n / r;
    if a < SERIES_CUTOFF {
        1.0 - a * a / 6.0
    } else {
        r * a.sin() / n
    }
}

/// Returns `(G, G'(n)/n, sin(n/r)/n)`.
fn exp_pole_derivs(n: f64, r: f64) -> (f64, f64, f64) {
    let a = n / r;
    let g = exp_pole_factor(n, r);
    if a < SERIES_CUTOFF {
        let dg = (-1.0 / 3.0 + a * a / 30.0) / (r * r);
        (g, dg, (1.0 - a * a / 6.0) / r)
    } else {
        let (sin, cos) = a.sin_cos();
        (g, (n * cos - r * sin) / (n * n * n), sin / n)
    }
}

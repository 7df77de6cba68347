//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Graph`] records a straight-line program over dense matrices built from a
//! fixed set of primitives (affine maps, `tanh`, elementwise arithmetic,
//! slicing/concatenation, batched matrix-vector products and squared-norm
//! reductions). Every node keeps its forward value; [`Graph::backward`] walks
//! the tape in reverse and accumulates adjoints.
//!
//! Batches are stored row-wise: a `B x n` matrix holds `B` samples of an
//! `n`-vector.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    /// `a + 1 * bias` with `bias` a single row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SumSquares(Var),
    Sum(Var),
    /// Row `i` of `a` multiplied by `s[i, 0]`.
    ScaleRows(Var, Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// Reinterpret a `1 x (r*c)` row (row-major) as an `r x c` matrix.
    Reshape(Var, usize, usize),
    /// Per-row matrix-vector product: row `b` of `k` is a row-major
    /// `rows x v.ncols()` matrix applied to row `b` of `v`.
    BatchMatVec(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check(cond: bool, what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    m.shape()
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A `1 x n` leaf holding a copy of `values`.
    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Mat::from_row_slice(1, values.len(), values))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.ncols() == vb.nrows(), "matmul", shape(va), shape(vb))?;
        let out = va * vb;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.ncols() == vb.ncols(), "matmul_nt", shape(va), shape(vb))?;
        let out = va * vb.transpose();
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        check(vb.nrows() == 1 && va.ncols() == vb.ncols(), "add_row", shape(va), shape(vb))?;
        let mut out = va.clone();
        for mut r in out.row_iter_mut() {
            r += vb.row(0);
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.shape() == vb.shape(), "add", shape(va), shape(vb))?;
        let out = va + vb;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.shape() == vb.shape(), "sub", shape(va), shape(vb))?;
        let out = va - vb;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.shape() == vb.shape(), "mul", shape(va), shape(vb))?;
        let out = va.component_mul(vb);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Mat::from_element(1, 1, s), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        self.push(Mat::from_element(1, 1, s), Op::Sum(a))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        check(vs.ncols() == 1 && vs.nrows() == va.nrows(), "scale_rows", shape(va), shape(vs))?;
        let mut out = va.clone();
        for (i, mut r) in out.row_iter_mut().enumerate() {
            r *= vs[(i, 0)];
        }
        Ok(self.push(out, Op::ScaleRows(a, s)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        check(start <= end && end <= va.ncols(), "slice_cols", shape(va), (start, end))?;
        let out = va.columns(start, end - start).into_owned();
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        check(start <= end && end <= va.nrows(), "slice_rows", shape(va), (start, end))?;
        let out = va.rows(start, end - start).into_owned();
        Ok(self.push(out, Op::SliceRows(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        };
        let rows = self.value(*first).nrows();
        let mut cols = 0;
        for p in parts {
            let vp = self.value(*p);
            check(vp.nrows() == rows, "concat_cols", (rows, cols), shape(vp))?;
            cols += vp.ncols();
        }
        let mut out = Mat::zeros(rows, cols);
        let mut c = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            out.columns_mut(c, vp.ncols()).copy_from(vp);
            c += vp.ncols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        check(va.nrows() == 1 && va.ncols() == rows * cols, "reshape", shape(va), (rows, cols))?;
        let out = Mat::from_row_slice(rows, cols, va.as_slice());
        Ok(self.push(out, Op::Reshape(a, rows, cols)))
    }

    pub fn batch_matvec(&mut self, k: Var, v: Var, rows: usize) -> Result<Var> {
        let (vk, vv) = (self.value(k), self.value(v));
        let cols = vv.ncols();
        check(
            vk.nrows() == vv.nrows() && vk.ncols() == rows * cols,
            "batch_matvec",
            shape(vk),
            shape(vv),
        )?;
        let mut out = Mat::zeros(vv.nrows(), rows);
        for b in 0..vv.nrows() {
            for i in 0..rows {
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += vk[(b, i * cols + j)] * vv[(b, j)];
                }
                out[(b, i)] = acc;
            }
        }
        Ok(self.push(out, Op::BatchMatVec(k, v, rows)))
    }

    /// Reverse sweep from the scalar node `output`. Returns the adjoint of
    /// every leaf (`None` for leaves that do not influence `output` and for
    /// interior nodes, whose adjoints are consumed during the sweep).
    pub fn backward(&self, output: Var) -> Result<Vec<Option<Mat>>> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {}x{}",
                out_val.nrows(),
                out_val.ncols()
            )));
        }
        if !out_val[(0, 0)].is_finite() {
            return Err(Error::NonFinite("graph output".into()));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Mat::from_element(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // consumers all have larger indices, so this is final
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let ga = &g * self.value(*b);
                    let gb = g.transpose() * self.value(*a);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let gb = Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, -&g);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g * *c),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, t| gi * (1.0 - t * t));
                    accumulate(&mut adj, *a, ga);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(*a) * (2.0 * g[(0, 0)]);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accumulate(&mut adj, *a, Mat::from_element(va.nrows(), va.ncols(), g[(0, 0)]));
                }
                Op::ScaleRows(a, s) => {
                    let (va, vs) = (self.value(*a), self.value(*s));
                    let mut ga = g.clone();
                    let mut gs = Mat::zeros(vs.nrows(), 1);
                    for i in 0..ga.nrows() {
                        gs[(i, 0)] = g.row(i).dot(&va.row(i));
                        let mut r = ga.row_mut(i);
                        r *= vs[(i, 0)];
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *s, gs);
                }
                Op::SliceCols(a, start, end) => {
                    let va = self.value(*a);
                    let mut ga = Mat::zeros(va.nrows(), va.ncols());
                    ga.columns_mut(*start, end - start).copy_from(&g);
                    accumulate(&mut adj, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let va = self.value(*a);
                    let mut ga = Mat::zeros(va.nrows(), va.ncols());
                    ga.rows_mut(*start, end - start).copy_from(&g);
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut adj, *p, g.columns(c, w).into_owned());
                        c += w;
                    }
                }
                Op::Reshape(a, rows, cols) => {
                    let mut flat = Mat::zeros(1, rows * cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            flat[(0, i * cols + j)] = g[(i, j)];
                        }
                    }
                    accumulate(&mut adj, *a, flat);
                }
                Op::BatchMatVec(k, v, rows) => {
                    let (vk, vv) = (self.value(*k), self.value(*v));
                    let cols = vv.ncols();
                    let mut gk = Mat::zeros(vk.nrows(), vk.ncols());
                    let mut gv = Mat::zeros(vv.nrows(), cols);
                    for b in 0..vv.nrows() {
                        for i in 0..*rows {
                            let gi = g[(b, i)];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..cols {
                                gk[(b, i * cols + j)] = gi * vv[(b, j)];
                                gv[(b, j)] += gi * vk[(b, i * cols + j)];
                            }
                        }
                    }
                    accumulate(&mut adj, *k, gk);
                    accumulate(&mut adj, *v, gv);
                }
            }
        }
        Ok(adj)
    }

    /// Adjoints of the scalar `output` with respect to the given leaves.
    pub fn gradients(&self, output: Var, wrt: &[Var]) -> Result<Vec<Mat>> {
        for v in wrt {
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(Error::Dimension(format!("node {} is not a leaf", v.0)));
            }
        }
        let mut adj = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|v| {
                adj.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| {
                    let val = &self.nodes[v.0].value;
                    Mat::zeros(val.nrows(), val.ncols())
                })
            })
            .collect())
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

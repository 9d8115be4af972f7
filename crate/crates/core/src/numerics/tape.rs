//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation eagerly: values are computed as the
//! graph is built, and [`Tape::gradient`] replays the record backwards to
//! accumulate adjoints. Nodes are whole matrices, so the tape stays short even
//! for batched encoder passes.
//!
//! Failures do not interrupt graph construction. The first shape error,
//! degenerate input or non-finite value poisons the tape; later operations
//! become inert placeholders and the fault is returned when the result is
//! read through [`Tape::try_value`] or [`Tape::gradient`].

use std::cell::RefCell;

use super::matrix::{self, Matrix, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    XLogX(Var),
    RowSoftmax(Var),
    RowNormalize(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    RowSum(Var),
    ColSum(Var),
    DivRows(Var, Var),
    Gather(Var, Vec<Option<usize>>),
    BlockMatMulNt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    BlockRowMean(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<Error>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first error recorded on this tape, if any.
    pub fn fault(&self) -> Option<Error> {
        self.fault.borrow().clone()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let nodes = self.nodes.borrow();
        inputs(op).iter().any(|v| nodes[v.0].requires_grad)
    }

    fn record(&self, primitive: &'static str, op: Op, value: Result<Matrix>) -> Var {
        let requires_grad = self.inputs_require_grad(&op);
        self.record_leaf(primitive, op, value, requires_grad)
    }

    fn record_leaf(&self, primitive: &'static str, op: Op, value: Result<Matrix>, requires_grad: bool) -> Var {
        match value {
            Ok(v) if v.is_finite() => self.push(v, op, requires_grad),
            Ok(_) => self.poison(Error::Numeric { primitive }),
            Err(e) => self.poison(e),
        }
    }

    fn poison(&self, err: Error) -> Var {
        let mut fault = self.fault.borrow_mut();
        if fault.is_none() {
            *fault = Some(err);
        }
        drop(fault);
        self.push(Matrix::zeros(0, 0), Op::Leaf, false)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Current value of a node (empty if the tape is poisoned upstream).
    pub fn value(&self, v: Var) -> Matrix {
        self.with(v, Matrix::clone)
    }

    /// Value of a node, or the tape's first fault.
    pub fn try_value(&self, v: Var) -> Result<Matrix> {
        match self.fault() {
            Some(e) => Err(e),
            None => Ok(self.value(v)),
        }
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.try_value(v)?;
        if m.shape() != (1, 1) {
            return Err(Error::dim("scalar", format!("node has shape {:?}", m.shape())));
        }
        Ok(m.item())
    }

    /// A differentiable input.
    pub fn param(&self, value: Matrix) -> Var {
        self.record_leaf("param", Op::Leaf, Ok(value), true)
    }

    /// A non-differentiable input. Gradients never flow into constants.
    pub fn constant(&self, value: Matrix) -> Var {
        self.record_leaf("constant", Op::Leaf, Ok(value), false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn stop_gradient(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let r = self.with2(a, b, |x, y| x.matmul(y));
        self.record("matmul", Op::MatMul(a, b), r)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(x.transpose()));
        self.record("transpose", Op::Transpose(a), r)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let r = self.with2(a, b, |x, y| x.add(y));
        self.record("add", Op::Add(a, b), r)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let r = self.with2(a, b, |x, y| x.sub(y));
        self.record("sub", Op::Sub(a, b), r)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let r = self.with2(a, b, |x, y| x.hadamard(y));
        self.record("mul", Op::Mul(a, b), r)
    }

    /// Adds the 1×c row `bias` to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let r = self.with2(a, bias, |x, b| {
            if b.rows() != 1 || b.cols() != x.cols() {
                return Err(Error::dim(
                    "add_row",
                    format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for row in 0..x.rows() {
                for (o, v) in out.row_mut(row).iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            Ok(out)
        });
        self.record("add_row", Op::AddRow(a, bias), r)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let r = self.with(a, |x| Ok(x.scale(k)));
        self.record("scale", Op::Scale(a, k), r)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(x.map(f64::tanh)));
        self.record("tanh", Op::Tanh(a), r)
    }

    pub fn exp(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(x.map(f64::exp)));
        self.record("exp", Op::Exp(a), r)
    }

    pub fn log(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(x.map(f64::ln)));
        self.record("log", Op::Log(a), r)
    }

    /// `x ln x` elementwise, with `0 ln 0 = 0`.
    pub fn xlogx(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(x.map(xlogx)));
        self.record("xlogx", Op::XLogX(a), r)
    }

    pub fn row_softmax(&self, a: Var) -> Var {
        let r = self.with(a, matrix::row_softmax);
        self.record("row_softmax", Op::RowSoftmax(a), r)
    }

    /// Scales each row to unit norm; rows with norm ≤ 1e-12 are degenerate.
    pub fn row_normalize(&self, a: Var) -> Var {
        let r = self.with(a, |x| {
            let norms: Vec<f64> = x
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            x.row_normalize().map(|y| (y, norms))
        });
        match r {
            Ok((y, norms)) => {
                self.record("row_normalize", Op::RowNormalize(a, norms), Ok(y))
            }
            Err(e) => self.poison(e),
        }
    }

    /// Cosine similarity between every row of `u` and every row of `v`.
    pub fn cosine_similarity(&self, u: Var, v: Var) -> Var {
        let un = self.row_normalize(u);
        let vn = self.row_normalize(v);
        let vt = self.transpose(vn);
        self.matmul(un, vt)
    }

    pub fn sum(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(Matrix::scalar(x.sum())));
        self.record("sum", Op::Sum(a), r)
    }

    pub fn mean(&self, a: Var) -> Var {
        let r = self.with(a, |x| {
            if x.is_empty() {
                Err(Error::dim("mean", "empty matrix"))
            } else {
                Ok(Matrix::scalar(x.mean()))
            }
        });
        self.record("mean", Op::Mean(a), r)
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(Matrix::scalar(x.squared_norm())));
        self.record("sum_squares", Op::SumSquares(a), r)
    }

    /// r×c → r×1.
    pub fn row_sum(&self, a: Var) -> Var {
        let r = self.with(a, |x| Matrix::from_vec(x.rows(), 1, x.row_sums()));
        self.record("row_sum", Op::RowSum(a), r)
    }

    /// r×c → 1×c.
    pub fn col_sum(&self, a: Var) -> Var {
        let r = self.with(a, |x| Ok(Matrix::row_vector(&x.col_sums())));
        self.record("col_sum", Op::ColSum(a), r)
    }

    /// Divides row `i` of `a` by entry `i` of the r×1 column `divisor`.
    pub fn div_rows(&self, a: Var, divisor: Var) -> Var {
        let r = self.with2(a, divisor, |x, s| {
            if s.shape() != (x.rows(), 1) {
                return Err(Error::dim(
                    "div_rows",
                    format!("divisor {:?} for input {:?}", s.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for i in 0..x.rows() {
                let d = s.get(i, 0);
                for v in out.row_mut(i) {
                    *v /= d;
                }
            }
            Ok(out)
        });
        self.record("div_rows", Op::DivRows(a, divisor), r)
    }

    /// Builds a `rows × cols` matrix whose flat entry `k` is the flat entry
    /// `index[k]` of `a`, or zero where the index is `None`.
    pub fn gather(&self, a: Var, rows: usize, cols: usize, index: Vec<Option<usize>>) -> Var {
        let r = self.with(a, |x| {
            if index.len() != rows * cols {
                return Err(Error::dim(
                    "gather",
                    format!("{} indices for a {rows}x{cols} output", index.len()),
                ));
            }
            let src = x.data();
            let mut data = Vec::with_capacity(index.len());
            for idx in &index {
                match idx {
                    Some(i) if *i < src.len() => data.push(src[*i]),
                    Some(i) => {
                        return Err(Error::dim(
                            "gather",
                            format!("index {i} out of bounds for {} entries", src.len()),
                        ))
                    }
                    None => data.push(0.0),
                }
            }
            Matrix::from_vec(rows, cols, data)
        });
        self.record("gather", Op::Gather(a, index), r)
    }

    /// Per-block `a_b · b_bᵀ` over consecutive blocks of `block` rows.
    /// Inputs are `(n·block) × d`; the output is `(n·block) × block`.
    pub fn block_matmul_nt(&self, a: Var, b: Var, block: usize) -> Var {
        let r = self.with2(a, b, |x, y| block_matmul_nt(x, y, block));
        self.record("block_matmul_nt", Op::BlockMatMulNt(a, b, block), r)
    }

    /// Per-block `p_b · v_b` with `p` of shape `(n·block) × block` and `v` of
    /// shape `(n·block) × d`.
    pub fn block_matmul(&self, p: Var, v: Var, block: usize) -> Var {
        let r = self.with2(p, v, |x, y| block_matmul(x, y, block));
        self.record("block_matmul", Op::BlockMatMul(p, v, block), r)
    }

    /// Mean over each consecutive block of `block` rows: `(n·block) × d → n × d`.
    pub fn block_row_mean(&self, a: Var, block: usize) -> Var {
        let r = self.with(a, |x| block_row_mean(x, block));
        self.record("block_row_mean", Op::BlockRowMean(a, block), r)
    }

    /// Reverse accumulation of `d output / d wrt`. `output` must be 1×1.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Matrix> {
        if let Some(e) = self.fault() {
            return Err(e);
        }
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.shape() != (1, 1) {
            return Err(Error::dim(
                "gradient",
                format!("output has shape {:?}", nodes[output.0].value.shape()),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if i == wrt.0 {
                adj[i] = Some(g);
                continue;
            }
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let wanted = |v: Var| nodes[v.0].requires_grad;
            for (target, contrib) in backward(&node.op, &node.value, &g, val, wanted)? {
                if !contrib.is_finite() {
                    return Err(Error::Numeric {
                        primitive: op_name(&node.op),
                    });
                }
                match &mut adj[target.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let shape = nodes[wrt.0].value.shape();
        Ok(adj
            .get_mut(wrt.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1)))
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::DivRows(a, b)
        | Op::BlockMatMulNt(a, b, _)
        | Op::BlockMatMul(a, b, _) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::XLogX(a)
        | Op::RowSoftmax(a)
        | Op::RowNormalize(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumSquares(a)
        | Op::RowSum(a)
        | Op::ColSum(a)
        | Op::Gather(a, _)
        | Op::BlockRowMean(a, _) => vec![*a],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::XLogX(..) => "xlogx",
        Op::RowSoftmax(..) => "row_softmax",
        Op::RowNormalize(..) => "row_normalize",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumSquares(..) => "sum_squares",
        Op::RowSum(..) => "row_sum",
        Op::ColSum(..) => "col_sum",
        Op::DivRows(..) => "div_rows",
        Op::Gather(..) => "gather",
        Op::BlockMatMulNt(..) => "block_matmul_nt",
        Op::BlockMatMul(..) => "block_matmul",
        Op::BlockRowMean(..) => "block_row_mean",
    }
}

fn check_blocks(op: &'static str, rows: usize, block: usize) -> Result<usize> {
    if block == 0 || rows % block != 0 {
        return Err(Error::dim(op, format!("{rows} rows in blocks of {block}")));
    }
    Ok(rows / block)
}

fn block_matmul_nt(a: &Matrix, b: &Matrix, block: usize) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "block_matmul_nt",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = check_blocks("block_matmul_nt", a.rows(), block)?;
    let mut out = Matrix::zeros(a.rows(), block);
    for blk in 0..n {
        let base = blk * block;
        for r in 0..block {
            let ar = a.row(base + r);
            for c in 0..block {
                let br = b.row(base + c);
                out.set(base + r, c, ar.iter().zip(br).map(|(x, y)| x * y).sum());
            }
        }
    }
    Ok(out)
}

fn block_matmul(p: &Matrix, v: &Matrix, block: usize) -> Result<Matrix> {
    if p.rows() != v.rows() || p.cols() != block {
        return Err(Error::dim(
            "block_matmul",
            format!("{:?} with {:?} in blocks of {block}", p.shape(), v.shape()),
        ));
    }
    let n = check_blocks("block_matmul", p.rows(), block)?;
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    for blk in 0..n {
        let base = blk * block;
        for r in 0..block {
            for c in 0..block {
                let w = p.get(base + r, c);
                if w == 0.0 {
                    continue;
                }
                let src = base + c;
                for k in 0..d {
                    let add = w * v.get(src, k);
                    let cur = out.get(base + r, k);
                    out.set(base + r, k, cur + add);
                }
            }
        }
    }
    Ok(out)
}

fn block_row_mean(a: &Matrix, block: usize) -> Result<Matrix> {
    let n = check_blocks("block_row_mean", a.rows(), block)?;
    let mut out = Matrix::zeros(n, a.cols());
    let inv = 1.0 / block as f64;
    for blk in 0..n {
        for r in 0..block {
            let src = a.row(blk * block + r);
            for (o, v) in out.row_mut(blk).iter_mut().zip(src) {
                *o += v * inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint contributions of one node to its inputs.
fn backward<'a>(
    op: &Op,
    y: &Matrix,
    g: &Matrix,
    val: impl Fn(Var) -> &'a Matrix,
    wanted: impl Fn(Var) -> bool,
) -> Result<Vec<(Var, Matrix)>> {
    let out = match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if wanted(*a) {
                out.push((*a, g.matmul_nt(val(*b))?));
            }
            if wanted(*b) {
                out.push((*b, val(*a).matmul_tn(g)?));
            }
            out
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, g.hadamard(val(*b))?),
            (*b, g.hadamard(val(*a))?),
        ],
        Op::AddRow(a, bias) => vec![(*a, g.clone()), (*bias, Matrix::row_vector(&g.col_sums()))],
        Op::Scale(a, k) => vec![(*a, g.scale(*k))],
        Op::Tanh(a) => vec![(*a, g.hadamard(&y.map(|t| 1.0 - t * t))?)],
        Op::Exp(a) => vec![(*a, g.hadamard(y)?)],
        Op::Log(a) => vec![(*a, g.hadamard(&val(*a).map(|x| 1.0 / x))?)],
        Op::XLogX(a) => vec![(*a, g.hadamard(&val(*a).map(|x| x.ln() + 1.0))?)],
        Op::RowSoftmax(a) => {
            let mut d = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = yv * (gv - dot);
                }
            }
            vec![(*a, d)]
        }
        Op::RowNormalize(a, norms) => {
            let mut d = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let n = norms[r].max(NORM_EPS);
                for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = (gv - yv * dot) / n;
                }
            }
            vec![(*a, d)]
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            vec![(*a, Matrix::filled(r, c, g.item()))]
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            vec![(*a, Matrix::filled(r, c, g.item() / (r * c) as f64))]
        }
        Op::SumSquares(a) => vec![(*a, val(*a).scale(2.0 * g.item()))],
        Op::RowSum(a) => {
            let (r, c) = val(*a).shape();
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                let gi = g.get(i, 0);
                d.row_mut(i).iter_mut().for_each(|v| *v = gi);
            }
            vec![(*a, d)]
        }
        Op::ColSum(a) => {
            let (r, c) = val(*a).shape();
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                d.row_mut(i).copy_from_slice(g.data());
            }
            vec![(*a, d)]
        }
        Op::DivRows(a, s) => {
            let x = val(*a);
            let s_val = val(*s);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            let mut ds = Matrix::zeros(x.rows(), 1);
            for i in 0..x.rows() {
                let d = s_val.get(i, 0);
                let mut acc = 0.0;
                for ((o, gv), xv) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(x.row(i)) {
                    *o = gv / d;
                    acc += gv * xv;
                }
                ds.set(i, 0, -acc / (d * d));
            }
            vec![(*a, da), (*s, ds)]
        }
        Op::Gather(a, index) => {
            let (r, c) = val(*a).shape();
            let mut d = Matrix::zeros(r, c);
            let dd = d.data_mut();
            for (gv, idx) in g.data().iter().zip(index) {
                if let Some(i) = idx {
                    dd[*i] += gv;
                }
            }
            vec![(*a, d)]
        }
        Op::BlockMatMulNt(a, b, block) => {
            // out[r][c] = a[r]·b[c] within a block
            let av = val(*a);
            let bv = val(*b);
            let block = *block;
            let d = av.cols();
            let mut da = Matrix::zeros(av.rows(), d);
            let mut db = Matrix::zeros(bv.rows(), d);
            for blk in 0..av.rows() / block {
                let base = blk * block;
                for r in 0..block {
                    for c in 0..block {
                        let gv = g.get(base + r, c);
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let t = da.get(base + r, k) + gv * bv.get(base + c, k);
                            da.set(base + r, k, t);
                            let t = db.get(base + c, k) + gv * av.get(base + r, k);
                            db.set(base + c, k, t);
                        }
                    }
                }
            }
            vec![(*a, da), (*b, db)]
        }
        Op::BlockMatMul(p, v, block) => {
            let pv = val(*p);
            let vv = val(*v);
            let block = *block;
            let d = vv.cols();
            let mut dp = Matrix::zeros(pv.rows(), block);
            let mut dv = Matrix::zeros(vv.rows(), d);
            for blk in 0..pv.rows() / block {
                let base = blk * block;
                for r in 0..block {
                    let gr = g.row(base + r);
                    for c in 0..block {
                        let vr = vv.row(base + c);
                        dp.set(base + r, c, gr.iter().zip(vr).map(|(a, b)| a * b).sum());
                        let w = pv.get(base + r, c);
                        for k in 0..d {
                            let t = dv.get(base + c, k) + w * gr[k];
                            dv.set(base + c, k, t);
                        }
                    }
                }
            }
            vec![(*p, dp), (*v, dv)]
        }
        Op::BlockRowMean(a, block) => {
            let (r, c) = val(*a).shape();
            let inv = 1.0 / *block as f64;
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                let gr = g.row(i / block);
                for (o, gv) in d.row_mut(i).iter_mut().zip(gr) {
                    *o = gv * inv;
                }
            }
            vec![(*a, d)]
        }
    };
    Ok(out.into_iter().filter(|(v, _)| wanted(*v)).collect())
}

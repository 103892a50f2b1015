//! Reverse-mode tape over small row-major matrices.
//!
//! Every node holds a dense `rows x cols` value. Elementwise binary ops
//! broadcast any dimension of size 1, so `n x m` combines with `1 x m`
//! (row vectors), `n x 1` (column vectors) and `1 x 1` (scalars).
//!
//! Nodes are appended in evaluation order, so the backward sweep is a plain
//! reverse iteration over the node list.

use std::fmt;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the tape. The forward
/// value is computed by the caller; `backward` accumulates vector-Jacobian
/// products into the input gradient buffers.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// `grad_inputs[i]` is `None` when input `i` does not need a gradient;
    /// otherwise it has the input's length and must be added to, not overwritten.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64], grad_inputs: &mut [Option<&mut [f64]>]);
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Erf(Var),
    Sqrt(Var),
    Sum(Var),
    RowSum(Var),
    MatMul(Var, Var),
    BatchedVecMat { x: Var, w: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Erf(..) => "erf",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::MatMul(..) => "matmul",
            Op::BatchedVecMat { .. } => "batched_vecmat",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `var`; all zeros if nothing flowed into it.
    pub fn get(&self, var: Var) -> std::borrow::Cow<'_, [f64]> {
        let g = &self.grads[var.0];
        if g.is_empty() {
            std::borrow::Cow::Owned(vec![0.0; self.shapes[var.0]])
        } else {
            std::borrow::Cow::Borrowed(g)
        }
    }

    /// Moves the gradient buffer out (zeros if none).
    pub fn take(&mut self, var: Var) -> Vec<f64> {
        let g = std::mem::take(&mut self.grads[var.0]);
        if g.is_empty() {
            vec![0.0; self.shapes[var.0]]
        } else {
            g
        }
    }
}

#[inline]
fn bcast(idx_r: usize, idx_c: usize, rows: usize, cols: usize) -> usize {
    (idx_r % rows) * cols + (idx_c % cols)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Custom { inputs, .. } | Op::ConcatCols(inputs) => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Max(a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::BatchedVecMat { x, w } => self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad,
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Erf(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::SliceCols { x: a, .. } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { op, rows, cols, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "param shape");
        self.nodes.push(Node { op: Op::Leaf, rows, cols, value, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(1, 1, vec![v])
    }

    fn broadcast_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let dim = |x: usize, y: usize| -> Option<usize> {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(ar, br), dim(ac, bc)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::Shape(format!("{op}: cannot broadcast {ar}x{ac} with {br}x{bc}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (rows, cols) = self.broadcast_shape(a, b, name)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(na.value[bcast(r, c, na.rows, na.cols)], nb.value[bcast(r, c, nb.rows, nb.cols)]));
            }
        }
        Ok((rows, cols, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), r, c, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), r, c, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), r, c, v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.nodes[b.0].value.iter().position(|&y| y == 0.0) {
            return Err(Error::Numerical {
                node: self.nodes.len(),
                op: "div",
                msg: format!("division by zero (divisor element {i})"),
            });
        }
        let (r, c, v) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), r, c, v))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "max", f64::max)?;
        Ok(self.push(Op::Max(a, b), r, c, v))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let (rows, cols) = (n.rows, n.cols);
        let v = n.value.iter().map(|&x| f(x)).collect();
        self.push(op, rows, cols, v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.nodes[a.0].value.iter().position(|&x| x <= 0.0) {
            return Err(Error::Numerical {
                node: self.nodes.len(),
                op: "ln",
                msg: format!("logarithm of non-positive value {} (element {i})", self.nodes[a.0].value[i]),
            });
        }
        Ok(self.unary(a, Op::Ln(a), f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(a, Op::Erf(a), libm::erf)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.nodes[a.0].value.iter().position(|&x| x < 0.0) {
            return Err(Error::Numerical {
                node: self.nodes.len(),
                op: "sqrt",
                msg: format!("square root of negative value {} (element {i})", self.nodes[a.0].value[i]),
            });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Sum of all elements, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![s])
    }

    /// Per-row sums, `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (rows, cols) = (n.rows, n.cols);
        let v = n.value.chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        self.push(Op::RowSum(a), rows, 1, v)
    }

    /// `(n x k) (k x m) -> n x m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {n}x{k} times {k2}x{m}")));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in orow.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), n, m, out))
    }

    /// Row `i` of the result is `x[i] (1 x k)` times row `i` of `w`
    /// reshaped row-major to `k x m`.
    pub fn batched_vecmat(&mut self, x: Var, w: Var, m: usize) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (n2, km) = self.shape(w);
        if n != n2 || km != k * m {
            return Err(Error::Shape(format!("batched_vecmat: x {n}x{k}, w {n2}x{km}, m = {m}")));
        }
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let wi = &wv[i * km..(i + 1) * km];
            for p in 0..k {
                let xp = xv[i * k + p];
                for j in 0..m {
                    out[i * m + j] += xp * wi[p * m + j];
                }
            }
        }
        Ok(self.push(Op::BatchedVecMat { x, w }, n, m, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Shape(format!("slice_cols: {start}..{} of {cols} columns", start + len)));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, rows, len, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out))
    }

    /// Records a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], rows: usize, cols: usize, value: Vec<f64>, op: Box<dyn CustomOp>) -> Var {
        assert_eq!(value.len(), rows * cols, "custom op {} output shape", op.name());
        self.push(Op::Custom { inputs: inputs.to_vec(), op }, rows, cols, value)
    }

    /// Convenience for scalar outputs: seeds `d out / d out = 1`.
    pub fn gradients(&self, out: Var) -> Gradients {
        let seed = vec![1.0; self.nodes[out.0].value.len()];
        self.backward(&[(out, seed.as_slice())])
    }

    /// Propagates the given output cotangents back through the tape.
    /// Seeds on the same node are summed.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.len(), "seed length for node {}", v.0);
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            if grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = std::mem::take(&mut grads[i]);
            self.backward_node(i, &gout, &mut grads);
            grads[i] = gout;
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.len()).collect() }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulates `d(out)/d(input)` elementwise, reducing broadcast dims.
        let bin = |grads: &mut [Vec<f64>], target: Var, f: &dyn Fn(usize, usize) -> f64| {
            if !self.needs(target) {
                return;
            }
            let t = &self.nodes[target.0];
            let buf = ensure(&mut grads[target.0], t.value.len());
            for r in 0..rows {
                for c in 0..cols {
                    let o = r * cols + c;
                    buf[bcast(r, c, t.rows, t.cols)] += gout[o] * f(r, c);
                }
            }
        };
        let at = |v: Var, r: usize, c: usize| {
            let t = &self.nodes[v.0];
            t.value[bcast(r, c, t.rows, t.cols)]
        };
        let unary = |grads: &mut [Vec<f64>], a: Var, f: &dyn Fn(usize) -> f64| {
            if !self.needs(a) {
                return;
            }
            let buf = ensure(&mut grads[a.0], gout.len());
            for (k, b) in buf.iter_mut().enumerate() {
                *b += gout[k] * f(k);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bin(grads, *a, &|_, _| 1.0);
                bin(grads, *b, &|_, _| 1.0);
            }
            Op::Sub(a, b) => {
                bin(grads, *a, &|_, _| 1.0);
                bin(grads, *b, &|_, _| -1.0);
            }
            Op::Mul(a, b) => {
                bin(grads, *a, &|r, c| at(*b, r, c));
                bin(grads, *b, &|r, c| at(*a, r, c));
            }
            Op::Div(a, b) => {
                bin(grads, *a, &|r, c| 1.0 / at(*b, r, c));
                bin(grads, *b, &|r, c| {
                    let y = at(*b, r, c);
                    -at(*a, r, c) / (y * y)
                });
            }
            Op::Max(a, b) => {
                bin(grads, *a, &|r, c| if at(*a, r, c) >= at(*b, r, c) { 1.0 } else { 0.0 });
                bin(grads, *b, &|r, c| if at(*a, r, c) >= at(*b, r, c) { 0.0 } else { 1.0 });
            }
            Op::Neg(a) => unary(grads, *a, &|_| -1.0),
            Op::Scale(a, k) => unary(grads, *a, &|_| *k),
            Op::AddScalar(a) => unary(grads, *a, &|_| 1.0),
            Op::Exp(a) => unary(grads, *a, &|k| node.value[k]),
            Op::Ln(a) => unary(grads, *a, &|k| 1.0 / val(*a)[k]),
            Op::Tanh(a) => unary(grads, *a, &|k| 1.0 - node.value[k] * node.value[k]),
            Op::Erf(a) => {
                let c = 2.0 / std::f64::consts::PI.sqrt();
                unary(grads, *a, &|k| c * (-val(*a)[k] * val(*a)[k]).exp())
            }
            Op::Sqrt(a) => unary(grads, *a, &|k| 0.5 / node.value[k]),
            Op::Sum(a) => {
                if self.needs(*a) {
                    let len = val(*a).len();
                    let buf = ensure(&mut grads[a.0], len);
                    buf.iter_mut().for_each(|b| *b += gout[0]);
                }
            }
            Op::RowSum(a) => {
                if self.needs(*a) {
                    let (_, ac) = self.shape(*a);
                    let len = val(*a).len();
                    let buf = ensure(&mut grads[a.0], len);
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gout[k / ac];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                if self.needs(*a) {
                    let bv = val(*b);
                    let buf = ensure(&mut grads[a.0], n * k);
                    for r in 0..n {
                        let g = &gout[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            buf[r * k + p] += g.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.needs(*b) {
                    let av = val(*a);
                    let buf = ensure(&mut grads[b.0], k * m);
                    for r in 0..n {
                        let g = &gout[r * m..(r + 1) * m];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (bb, &gg) in buf[p * m..(p + 1) * m].iter_mut().zip(g) {
                                *bb += a_rp * gg;
                            }
                        }
                    }
                }
            }
            Op::BatchedVecMat { x, w } => {
                let (n, k) = self.shape(*x);
                let m = cols;
                let (xv, wv) = (val(*x), val(*w));
                if self.needs(*x) {
                    let buf = ensure(&mut grads[x.0], n * k);
                    for r in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += gout[r * m + j] * wv[r * k * m + p * m + j];
                            }
                            buf[r * k + p] += s;
                        }
                    }
                }
                if self.needs(*w) {
                    let buf = ensure(&mut grads[w.0], n * k * m);
                    for r in 0..n {
                        for p in 0..k {
                            for j in 0..m {
                                buf[r * k * m + p * m + j] += xv[r * k + p] * gout[r * m + j];
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (xr, xc) = self.shape(*x);
                    let buf = ensure(&mut grads[x.0], xr * xc);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * xc + start + c] += gout[r * cols + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if self.needs(*p) {
                        let buf = ensure(&mut grads[p.0], rows * pc);
                        for r in 0..rows {
                            for c in 0..pc {
                                buf[r * pc + c] += gout[r * cols + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Custom { inputs, op } => {
                // Take each distinct input's buffer out so the op can borrow
                // them all mutably; repeated inputs get scratch buffers that
                // are folded back afterwards.
                let mut bufs: Vec<Option<Vec<f64>>> = Vec::with_capacity(inputs.len());
                let mut seen: Vec<usize> = Vec::new();
                for v in inputs {
                    if !self.needs(*v) {
                        bufs.push(None);
                    } else if seen.contains(&v.0) {
                        bufs.push(Some(vec![0.0; val(*v).len()]));
                    } else {
                        seen.push(v.0);
                        let mut b = std::mem::take(&mut grads[v.0]);
                        if b.is_empty() {
                            b = vec![0.0; val(*v).len()];
                        }
                        bufs.push(Some(b));
                    }
                }
                {
                    let in_vals: Vec<&[f64]> = inputs.iter().map(|v| val(*v).as_slice()).collect();
                    let mut views: Vec<Option<&mut [f64]>> =
                        bufs.iter_mut().map(|b| b.as_mut().map(|v| v.as_mut_slice())).collect();
                    op.backward(&in_vals, &node.value, gout, &mut views);
                }
                let mut restored: Vec<usize> = Vec::new();
                for (v, b) in inputs.iter().zip(bufs) {
                    if let Some(b) = b {
                        if restored.contains(&v.0) {
                            accumulate(&mut grads[v.0], &b);
                        } else {
                            restored.push(v.0);
                            grads[v.0] = b;
                        }
                    }
                }
            }
        }
    }
}

fn ensure(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if buf.is_empty() {
        *buf = vec![0.0; len];
    }
    buf
}

fn accumulate(buf: &mut Vec<f64>, g: &[f64]) {
    if buf.is_empty() {
        buf.extend_from_slice(g);
    } else {
        buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
    }
}

/// Records `f` on a fresh tape with `params` as trainable leaves, then
/// returns the scalar value of its output and the gradient for each param.
pub fn forward_backward<F>(params: &[(usize, usize, Vec<f64>)], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(r, c, v)| tape.param(*r, *c, v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(format!("forward_backward needs a scalar output, got {:?}", tape.shape(out))));
    }
    let value = tape.scalar(out);
    let mut g = tape.gradients(out);
    Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square() {
        let (v, g) = forward_backward(&[(1, 1, vec![3.0])], |t, p| t.mul(p[0], p[0])).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0], vec![6.0]);
    }

    #[test]
    fn product_plus() {
        let (v, g) = forward_backward(&[(1, 1, vec![2.0]), (1, 1, vec![5.0])], |t, p| {
            let xy = t.mul(p[0], p[1])?;
            t.add(xy, p[1])
        })
        .unwrap();
        assert_eq!(v, 15.0);
        assert_eq!(g, vec![vec![5.0], vec![3.0]]);
    }

    #[test]
    fn reuse_accumulates() {
        // f = x + x + x*x at x = 2 -> f' = 2 + 2x = 6
        let (_, g) = forward_backward(&[(1, 1, vec![2.0])], |t, p| {
            let a = t.add(p[0], p[0])?;
            let b = t.mul(p[0], p[0])?;
            t.add(a, b)
        })
        .unwrap();
        assert_eq!(g[0], vec![6.0]);
    }

    #[test]
    fn division_by_zero_and_bad_ln_are_errors() {
        let mut t = Tape::new();
        let x = t.param(1, 2, vec![1.0, 0.0]);
        assert!(matches!(t.div(x, x), Err(Error::Numerical { op: "div", .. })));
        assert!(matches!(t.ln(x), Err(Error::Numerical { op: "ln", .. })));
        let y = t.param(1, 1, vec![-1.0]);
        assert!(matches!(t.sqrt(y), Err(Error::Numerical { op: "sqrt", .. })));
    }

    #[test]
    fn broadcast_shapes() {
        let mut t = Tape::new();
        let m = t.param(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = t.param(1, 3, vec![10.0, 20.0, 30.0]);
        let col = t.param(2, 1, vec![2.0, 3.0]);
        let a = t.add(m, row).unwrap();
        assert_eq!(t.value(a), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let b = t.mul(a, col).unwrap();
        let s = t.sum(b);
        let g = t.gradients(s);
        assert_eq!(&*g.get(row), &[5.0, 5.0, 5.0]);
        assert_eq!(&*g.get(col), &[66.0, 75.0]);
        let bad = t.param(3, 2, vec![0.0; 6]);
        assert!(t.add(m, bad).is_err());
    }

    #[test]
    fn matmul_gradients() {
        let (_, g) = forward_backward(&[(1, 2, vec![1.0, 2.0]), (2, 2, vec![1.0, 2.0, 3.0, 4.0])], |t, p| {
            let y = t.matmul(p[0], p[1])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(g[0], vec![3.0, 7.0]);
        assert_eq!(g[1], vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn custom_op_with_repeated_input() {
        struct Dot;
        impl CustomOp for Dot {
            fn name(&self) -> &'static str {
                "dot"
            }
            fn backward(&self, inputs: &[&[f64]], _: &[f64], g: &[f64], gi: &mut [Option<&mut [f64]>]) {
                for k in 0..inputs[0].len() {
                    if let Some(b) = gi[0].as_deref_mut() {
                        b[k] += g[0] * inputs[1][k];
                    }
                    if let Some(b) = gi[1].as_deref_mut() {
                        b[k] += g[0] * inputs[0][k];
                    }
                }
            }
        }
        let mut t = Tape::new();
        let x = t.param(1, 2, vec![3.0, -1.0]);
        let v = t.value(x).iter().map(|a| a * a).sum();
        let d = t.custom(&[x, x], 1, 1, vec![v], Box::new(Dot));
        let g = t.gradients(d);
        assert_eq!(&*g.get(x), &[6.0, -2.0]);
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut t = Tape::new();
        let c = t.constant(1, 1, vec![2.0]);
        let e = t.exp(c);
        let g = t.gradients(e);
        assert_eq!(&*g.get(c), &[0.0]);
        assert_abs_diff_eq!(t.scalar(e), 2f64.exp());
    }
}

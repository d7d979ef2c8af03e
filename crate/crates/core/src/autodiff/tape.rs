use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::store::{ParamGrads, ParamId, ParameterStore};
use super::{AutodiffError, Matrix};
use crate::fdiv::{self, Kernel, Term};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    Clamp(Var, f64, f64),
    SoftClamp(Var, f64),
    Composite(Var, Kernel, Term),
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Neg(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::LogSumExpRows(a)
            | Op::SliceCols(a, _, _)
            | Op::RepeatRows(a, _)
            | Op::Clamp(a, _, _)
            | Op::SoftClamp(a, _)
            | Op::Composite(a, _, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Matrix,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so parents
/// always have smaller ids than their children.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParameterStore>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    /// A tape without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
        }
    }

    pub fn with_store(store: &'s ParameterStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> Option<&'s ParameterStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Leaf bound to a stored parameter. Binding the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var, AutodiffError> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or(AutodiffError::NoStore)?;
        let value = store.value(id).clone();
        let v = self.push(Op::Param(id), value);
        self.bound.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Matrix times column vector.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, AutodiffError> {
        let sx = self.shape(x);
        if sx.1 != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                left: self.shape(a),
                right: sx,
            });
        }
        self.matmul(a, x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: *bad,
            });
        }
        let v = self.value(a).mapv(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(fdiv::softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        // a * a keeps the double-use accumulation path exercised
        self.push(Op::Mul(a, a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Row-wise sum: `n×m -> n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a), v)
    }

    /// Row-wise log-sum-exp: `n×m -> n×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Array2::zeros((m.nrows(), 1));
        for (i, row) in m.rows().into_iter().enumerate() {
            out[[i, 0]] = logsumexp(row.iter().copied());
        }
        self.push(Op::LogSumExpRows(a), out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        if start > end || end > sa.1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                left: sa,
                right: (start, end),
            });
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(Op::SliceCols(a, start, end), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or(AutodiffError::Empty("concat_cols"))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Explicit broadcast of a `1×m` row to `n×m`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        if sa.0 != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "repeat_rows",
                left: sa,
                right: (n, sa.1),
            });
        }
        let v = self
            .value(a)
            .broadcast((n, sa.1))
            .expect("row broadcast")
            .to_owned();
        Ok(self.push(Op::RepeatRows(a, n), v))
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// `c · tanh(a / c)`, a smooth clamp into `(-c, c)`.
    pub fn soft_clamp(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * (x / c).tanh());
        self.push(Op::SoftClamp(a, c), v)
    }

    /// Elementwise f-divergence composite of a log-ratio node.
    pub fn composite(&mut self, r: Var, kernel: Kernel, term: Term) -> Var {
        let v = self.value(r).mapv(|x| kernel.composite_term(term, x));
        self.push(Op::Composite(r, kernel, term), v)
    }

    /// Affine map `x W + 1 bᵀ` with `b` a `1×m` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xw = self.matmul(x, w)?;
        let n = self.shape(x).0;
        let bb = self.repeat_rows(b, n)?;
        self.add(xw, bb)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::Exp(a) => accumulate(grads, *a, g * y),
            Op::Log(a) => accumulate(grads, *a, g / self.value(*a)),
            Op::Tanh(a) => {
                let mut d = y.mapv(|t| 1.0 - t * t);
                d *= g;
                accumulate(grads, *a, d)
            }
            Op::Softplus(a) => {
                let mut d = self.value(*a).mapv(fdiv::sigmoid);
                d *= g;
                accumulate(grads, *a, d)
            }
            Op::Neg(a) => accumulate(grads, *a, -g),
            Op::Sum(a) => {
                let shape = self.shape(*a);
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]))
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n))
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a);
                let d = g.broadcast(shape).expect("column broadcast").to_owned();
                accumulate(grads, *a, d)
            }
            Op::LogSumExpRows(a) => {
                let mut d = self.value(*a).clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let (gi, yi) = (g[[i, 0]], y[[i, 0]]);
                    row.mapv_inplace(|v| gi * (v - yi).exp());
                }
                accumulate(grads, *a, d)
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, d)
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    accumulate(grads, p, g.slice(s![.., col..col + w]).to_owned());
                    col += w;
                }
            }
            Op::RepeatRows(a, _) => accumulate(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |gv, &xv| {
                    if xv < *lo || xv > *hi {
                        *gv = 0.0
                    }
                });
                accumulate(grads, *a, d)
            }
            Op::SoftClamp(a, c) => {
                let mut d = y.mapv(|t| 1.0 - (t / c) * (t / c));
                d *= g;
                accumulate(grads, *a, d)
            }
            Op::Composite(a, kernel, term) => {
                let mut d = self
                    .value(*a)
                    .mapv(|r| kernel.composite_term_derivative(*term, r));
                d *= g;
                accumulate(grads, *a, d)
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Tape::backward`]: adjoints for every node reachable from the root.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of a node, `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoints for every parameter bound on `tape`, zeros for the rest of the store.
    pub fn params(&self, tape: &Tape<'_>) -> Result<ParamGrads, AutodiffError> {
        let store = tape.store.ok_or(AutodiffError::NoStore)?;
        let mut out = ParamGrads::zeros(store);
        for (&id, &v) in &tape.bound {
            if let Some(g) = self.get(v) {
                out.get_mut(id).assign(g);
            }
        }
        Ok(out)
    }
}

pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m.is_infinite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

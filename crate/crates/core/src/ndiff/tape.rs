use super::array::{matmul, matmul_nt, matmul_tn, Array};
use super::NdiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    Mask(Var, Array),
}

/// One recorded value. `grad` is present exactly when the node participates in
/// differentiation, and then has the same shape as `value`.
#[derive(Clone, Debug)]
pub struct DiffNode {
    value: Array,
    grad: Option<Array>,
    op: Op,
}

impl DiffNode {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array> {
        self.grad.as_ref()
    }
}

/// Records operations in creation order; parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffNode>,
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

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root w.r.t. `v`. Constants report zeros.
    pub fn grad(&self, v: Var) -> Array {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Array::zeros(node.value.rows(), node.value.cols()),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    /// A differentiable leaf.
    pub fn var(&mut self, value: Array) -> Var {
        let grad = Some(Array::zeros(value.rows(), value.cols()));
        self.push_node(value, grad, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_node(value, None, Op::Leaf)
    }

    fn push_node(&mut self, value: Array, grad: Option<Array>, op: Op) -> Var {
        self.nodes.push(DiffNode { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, parents: &[Var], op: Op) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].grad.is_some());
        let grad = needs.then(|| Array::zeros(value.rows(), value.cols()));
        self.push_node(value, grad, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NdiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NdiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(va.rows(), va.cols(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, &[a], Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.0 {
            return Err(NdiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let value = matmul(self.value(a), self.value(b));
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    /// `x · w + b` with `b` a `1×out` row added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NdiffError> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.1 != sw.0 {
            return Err(NdiffError::ShapeMismatch { op: "affine", lhs: sx, rhs: sw });
        }
        if sb != (1, sw.1) {
            return Err(NdiffError::ShapeMismatch { op: "affine bias", lhs: sw, rhs: sb });
        }
        let mut value = matmul(self.value(x), self.value(w));
        let bias = self.value(b).data().to_vec();
        for i in 0..value.rows() {
            for (o, bv) in value.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(value, &[x, w, b], Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, &[a], Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, &[a], Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NdiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(NdiffError::NonPositiveLog(bad));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(value, &[a], Op::Log(a)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(value, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NdiffError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(NdiffError::Empty("mean"));
        }
        let value = Array::scalar(v.sum() / v.len() as f64);
        Ok(self.push(value, &[a], Op::Mean(a)))
    }

    /// Per-row sums, as a column `rows×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array::from_fn(v.rows(), 1, |i, _| v.row(i).iter().sum());
        self.push(value, &[a], Op::RowSum(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a));
        self.push(value, &[a], Op::Softmax(a))
    }

    /// Row-wise log-softmax, computed with the max-shift.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut value = v.clone();
        for i in 0..v.rows() {
            let row = value.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(value, &[a], Op::LogSoftmax(a))
    }

    /// Joins arrays side by side; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NdiffError> {
        let Some(first) = parts.first() else {
            return Err(NdiffError::Empty("concat_cols"));
        };
        let rows = self.value(*first).rows();
        for p in parts {
            let s = self.value(*p).shape();
            if s.0 != rows {
                return Err(NdiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(*first).shape(),
                    rhs: s,
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Array::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                value.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, a: Var, mask: &Array) -> Result<Var, NdiffError> {
        let s = self.value(a).shape();
        if s != mask.shape() {
            return Err(NdiffError::ShapeMismatch { op: "mask", lhs: s, rhs: mask.shape() });
        }
        let data = self.value(a).data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Array::from_vec(s.0, s.1, data)?;
        Ok(self.push(value, &[a], Op::Mask(a, mask.clone())))
    }

    /// Zeroes every gradient buffer on the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Reverse sweep from a scalar root. Gradients are zeroed first, then
    /// accumulated additively over every path to the root.
    pub fn backward(&mut self, root: Var) -> Result<(), NdiffError> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(NdiffError::NonScalarRoot(shape));
        }
        self.zero_grad();
        match self.nodes[root.0].grad.as_mut() {
            Some(g) => g.data_mut()[0] = 1.0,
            None => return Ok(()),
        }
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if g.data().iter().any(|&x| x != 0.0) {
                let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
                self.propagate(i, &op, &g);
                self.nodes[i].op = op;
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &Array) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            g.add_assign(delta);
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Tape) -> Array) {
        if self.requires_grad(v) {
            let delta = f(self);
            self.accumulate(v, &delta);
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Array) {
        let out = Var(i);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                self.accumulate_with(*b, |_| g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(a, |t| hadamard(g, t.value(b)));
                self.accumulate_with(b, |t| hadamard(g, t.value(a)));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_with(*a, |_| g.map(|x| c * x));
            }
            Op::AddScalar(a) => self.accumulate(*a, g),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(a, |t| matmul_nt(g, t.value(b)));
                self.accumulate_with(b, |t| matmul_tn(t.value(a), g));
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                self.accumulate_with(x, |t| matmul_nt(g, t.value(w)));
                self.accumulate_with(w, |t| matmul_tn(t.value(x), g));
                self.accumulate_with(b, |_| column_sums(g));
            }
            Op::Relu(a) => {
                self.accumulate_with(*a, |t| {
                    let y = t.value(out);
                    zip_arrays(g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Tanh(a) => {
                self.accumulate_with(*a, |t| zip_arrays(g, t.value(out), |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Exp(a) => {
                self.accumulate_with(*a, |t| hadamard(g, t.value(out)));
            }
            Op::Log(a) => {
                let a = *a;
                self.accumulate_with(a, |t| zip_arrays(g, t.value(a), |gv, xv| gv / xv));
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = g.data()[0];
                self.accumulate_with(a, |t| {
                    let (r, c) = t.value(a).shape();
                    Array::filled(r, c, gv)
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let gv = g.data()[0];
                self.accumulate_with(a, |t| {
                    let (r, c) = t.value(a).shape();
                    Array::filled(r, c, gv / (r * c) as f64)
                });
            }
            Op::RowSum(a) => {
                let a = *a;
                self.accumulate_with(a, |t| {
                    let (r, c) = t.value(a).shape();
                    Array::from_fn(r, c, |ii, _| g.get(ii, 0))
                });
            }
            Op::Softmax(a) => {
                self.accumulate_with(*a, |t| {
                    let p = t.value(out);
                    let mut d = Array::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = pr[j] * (gr[j] - dot);
                        }
                    }
                    d
                });
            }
            Op::LogSoftmax(a) => {
                self.accumulate_with(*a, |t| {
                    let ls = t.value(out);
                    let mut d = Array::zeros(ls.rows(), ls.cols());
                    for r in 0..ls.rows() {
                        let (lr, gr) = (ls.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = gr[j] - lr[j].exp() * total;
                        }
                    }
                    d
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let start = off;
                    self.accumulate_with(*p, |_| Array::from_fn(g.rows(), c, |r, j| g.get(r, start + j)));
                    off += c;
                }
            }
            Op::Mask(a, m) => {
                self.accumulate_with(*a, |_| hadamard(g, m));
            }
        }
    }
}

fn zip_arrays(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn hadamard(a: &Array, b: &Array) -> Array {
    zip_arrays(a, b, |x, y| x * y)
}

fn column_sums(g: &Array) -> Array {
    let mut out = Array::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Row-wise softmax on a plain array.
pub fn row_softmax(a: &Array) -> Array {
    let mut value = a.clone();
    for i in 0..a.rows() {
        let row = value.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    value
}

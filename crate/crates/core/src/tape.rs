//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every model in this crate is written as a sequence of tape operations on
//! `(rows x cols)` matrices. Batches are laid out row-major: one row per
//! patient, one column per feature. Calling [`Tape::backward`] walks the tape
//! in reverse and accumulates adjoints for every node that depends on a
//! parameter leaf. Gradients flow through the unrolled solver steps exactly
//! like through any other operation.

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Transpose(Var),
    Cols(Var, usize),
    HCat(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when the root does
    /// not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += delta,
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data, masks, fixed matrices).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{what}: operand shapes differ ({:?} vs {:?})",
            va.shape(),
            vb.shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).component_mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: inner dimensions differ ({:?} x {:?})",
            va.shape(),
            vb.shape()
        );
        let v = va * vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `x + 1 * row`, broadcasting a `1 x m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(
            vr.nrows() == 1 && vr.ncols() == vx.ncols(),
            "add_row: expected 1x{} row, got {:?}",
            vx.ncols(),
            vr.shape()
        );
        let mut v = vx.clone();
        for mut r in v.row_iter_mut() {
            r += vr;
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const: shape mismatch");
        let v = self.value(x).component_mul(&c);
        let ng = self.needs(x);
        self.push(v, Op::MulConst(x, c), ng)
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.nrows(), s.len(), "scale_rows: length mismatch");
        let mut v = vx.clone();
        for (i, mut r) in v.row_iter_mut().enumerate() {
            r *= s[i];
        }
        let ng = self.needs(x);
        self.push(v, Op::ScaleRows(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        let ng = self.needs(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(v, Op::Transpose(x), ng)
    }

    /// Columns `start..start + width`.
    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).columns(start, width).into_owned();
        let ng = self.needs(x);
        self.push(v, Op::Cols(x, start), ng)
    }

    /// Horizontal concatenation.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hcat: no operands");
        let rows = self.value(parts[0]).nrows();
        let width: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Mat::zeros(rows, width);
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), rows, "hcat: row counts differ");
            v.columns_mut(at, pv.ncols()).copy_from(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::HCat(parts.to_vec()), ng)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward: root must be a 1x1 node"
        );
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Mat::from_element(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.component_mul(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.component_mul(self.value(*a)));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b).transpose());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).tr_mul(&g));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let mut s = Mat::zeros(1, g.ncols());
                        for r in g.row_iter() {
                            s += r;
                        }
                        accumulate(&mut grads[row.0], s);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g.clone());
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], &g * *c),
                Op::MulConst(x, c) => accumulate(&mut grads[x.0], g.component_mul(c)),
                Op::ScaleRows(x, s) => {
                    let mut d = g.clone();
                    for (r, mut row) in d.row_iter_mut().enumerate() {
                        row *= s[r];
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Softplus(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| gi * sigmoid(xi));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Square(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi);
                    accumulate(&mut grads[x.0], d);
                }
                Op::Transpose(x) => accumulate(&mut grads[x.0], g.transpose()),
                Op::Cols(x, start) => {
                    let src = self.value(*x);
                    let mut d = Mat::zeros(src.nrows(), src.ncols());
                    d.columns_mut(*start, g.ncols()).copy_from(&g);
                    accumulate(&mut grads[x.0], d);
                }
                Op::HCat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], g.columns(at, w).into_owned());
                        }
                        at += w;
                    }
                }
                Op::Sum(x) => {
                    let src = self.value(*x);
                    accumulate(
                        &mut grads[x.0],
                        Mat::from_element(src.nrows(), src.ncols(), g[(0, 0)]),
                    );
                }
            }
            // leaves keep their adjoint for the caller
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

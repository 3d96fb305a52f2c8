//! Eager tape for reverse-mode differentiation over matrix ops.
//!
//! Every operation computes its value immediately and records enough
//! structure to replay the chain rule backwards. One tape serves one forward
//! pass; training rebuilds the tape per minibatch and the adaptation filter
//! rebuilds it per linearization.

use super::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a @ b
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// (RxC) + (1xC), broadcast over rows
    AddRow(Var, Var),
    /// (RxC) + (Rx1), broadcast over cols
    AddCol(Var, Var),
    /// (RxC) / (Rx1)
    DivCol(Var, Var),
    /// (RxC) / (1xC)
    DivRow(Var, Var),
    /// (Rx1) ⊕ (1xC) -> (RxC), y[r][c] = col[r] + row[c]
    OuterSum(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    /// (RxC) -> (Rx1)
    SumRows(Var),
    /// (RxC) -> (1xC)
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Transpose(Var),
    /// Fused GRU gate math on precomputed input gates, see [`Tape::gru_gates`].
    GruGates {
        gi: Var,
        h: Var,
        w_hh: Var,
        b_hh: Var,
        aux: Box<GruAux>,
    },
}

/// Saved activations for the fused GRU backward pass.
#[derive(Debug)]
struct GruAux {
    z: Tensor,
    r: Tensor,
    n: Tensor,
    /// Candidate slice of `h @ w_hh + b_hh` before reset gating.
    hn: Tensor,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed w.r.t. `v`; zeros if the value was never reached.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that participates in gradients (parameters, adapted inputs).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, value: Tensor, a: Var, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, value: Tensor, a: Var, b: Var, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(v, a, b, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let v = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        );
        self.binary(v, a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let v = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
        );
        self.binary(v, a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let v = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        );
        self.binary(v, a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let v = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect(),
        );
        self.binary(v, a, b, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), [1, ta.cols()], "add_row shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let x = v.get(r, c) + tr.get(0, c);
                v.set(r, c, x);
            }
        }
        self.binary(v, a, row, Op::AddRow(a, row))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.shape(), [ta.rows(), 1], "add_col shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let x = v.get(r, c) + tc.get(r, 0);
                v.set(r, c, x);
            }
        }
        self.binary(v, a, col, Op::AddCol(a, col))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.shape(), [ta.rows(), 1], "div_col shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let x = v.get(r, c) / tc.get(r, 0);
                v.set(r, c, x);
            }
        }
        self.binary(v, a, col, Op::DivCol(a, col))
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), [1, ta.cols()], "div_row shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let x = v.get(r, c) / tr.get(0, c);
                v.set(r, c, x);
            }
        }
        self.binary(v, a, row, Op::DivRow(a, row))
    }

    pub fn outer_sum(&mut self, col: Var, row: Var) -> Var {
        let (tc, tr) = (self.value(col), self.value(row));
        assert_eq!(tc.cols(), 1, "outer_sum col operand must be Rx1");
        assert_eq!(tr.rows(), 1, "outer_sum row operand must be 1xC");
        let (rows, cols) = (tc.rows(), tr.cols());
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                v.set(r, c, tc.get(r, 0) + tr.get(0, c));
            }
        }
        self.binary(v, col, row, Op::OuterSum(col, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.unary(v, a, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.unary(v, a, Op::Offset(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(v, a, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, a, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, a, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(v, a, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(v, a, Op::Ln(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.unary(v, a, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            v.set(r, 0, t.row_slice(r).iter().sum());
        }
        self.unary(v, a, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                v.set(0, c, v.get(0, c) + t.get(r, c));
            }
        }
        self.unary(v, a, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..t.cols() {
                    v.set(r, at + c, t.get(r, c));
                }
            }
            at += t.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let t = self.value(a);
        assert!(from < to && to <= t.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(t.rows(), to - from);
        for r in 0..t.rows() {
            for c in from..to {
                v.set(r, c - from, t.get(r, c));
            }
        }
        self.unary(v, a, Op::SliceCols(a, from, to))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let t = self.value(a);
        assert!(from < to && to <= t.rows(), "slice_rows out of range");
        let v = Tensor::new(
            to - from,
            t.cols(),
            t.data()[from * t.cols()..to * t.cols()].to_vec(),
        );
        self.unary(v, a, Op::SliceRows(a, from, to))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(v, a, Op::Transpose(a))
    }

    /// One GRU step with precomputed input gates `gi = x @ w_ih + b_ih`
    /// (`Bx3H`, stacked `[z|r|n]`). Computes
    ///
    /// ```text
    /// gh = h @ w_hh + b_hh
    /// z = sigmoid(gi_z + gh_z);  r = sigmoid(gi_r + gh_r)
    /// n = tanh(gi_n + r * gh_n)
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// in one node, which keeps long unrolls off the allocator.
    pub fn gru_gates(&mut self, gi: Var, h: Var, w_hh: Var, b_hh: Var) -> Var {
        let (b, hidden) = {
            let th = self.value(h);
            (th.rows(), th.cols())
        };
        assert_eq!(
            self.value(gi).shape(),
            [b, 3 * hidden],
            "gru_gates: gi must be Bx3H"
        );
        assert_eq!(self.value(w_hh).shape(), [hidden, 3 * hidden]);
        assert_eq!(self.value(b_hh).shape(), [1, 3 * hidden]);

        let gh = {
            let mut gh = self.value(h).matmul(self.value(w_hh));
            let bias = self.value(b_hh);
            for r in 0..b {
                for c in 0..3 * hidden {
                    let v = gh.get(r, c) + bias.get(0, c);
                    gh.set(r, c, v);
                }
            }
            gh
        };
        let tgi = self.value(gi);
        let th = self.value(h);
        let mut z = Tensor::zeros(b, hidden);
        let mut rg = Tensor::zeros(b, hidden);
        let mut n = Tensor::zeros(b, hidden);
        let mut hn = Tensor::zeros(b, hidden);
        let mut out = Tensor::zeros(b, hidden);
        let sigm = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..b {
            for c in 0..hidden {
                let zv = sigm(tgi.get(r, c) + gh.get(r, c));
                let rv = sigm(tgi.get(r, hidden + c) + gh.get(r, hidden + c));
                let hnv = gh.get(r, 2 * hidden + c);
                let nv = (tgi.get(r, 2 * hidden + c) + rv * hnv).tanh();
                z.set(r, c, zv);
                rg.set(r, c, rv);
                n.set(r, c, nv);
                hn.set(r, c, hnv);
                out.set(r, c, (1.0 - zv) * nv + zv * th.get(r, c));
            }
        }
        let ng = self.needs(gi) || self.needs(h) || self.needs(w_hh) || self.needs(b_hh);
        self.push(
            out,
            Op::GruGates {
                gi,
                h,
                w_hh,
                b_hh,
                aux: Box::new(GruAux { z, r: rg, n, hn }),
            },
            ng,
        )
    }

    /// Backward from a scalar seed with gradient 1.
    pub fn backward(&self, seed: Var) -> Gradients {
        assert_eq!(self.value(seed).len(), 1, "backward seed must be scalar");
        self.backward_seeded(seed, Tensor::scalar(1.0))
    }

    /// Backward with an explicit seed gradient (for Jacobian rows).
    pub fn backward_seeded(&self, seed: Var, seed_grad: Tensor) -> Gradients {
        assert_eq!(
            self.value(seed).shape(),
            seed_grad.shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(seed_grad);

        for id in (0..=seed.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(dy);
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    self.accumulate(grads, *a, dy.matmul(&bt));
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    self.accumulate(grads, *b, at.matmul(dy));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    let mut d = dy.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(tb.data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    let mut d = dy.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(ta.data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.needs(*a) {
                    let mut d = dy.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(tb.data()) {
                        *x /= y;
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    let mut d = dy.clone();
                    for ((x, av), bv) in d.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *x *= -av / (bv * bv);
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*row) {
                    let mut d = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            d.set(0, c, d.get(0, c) + dy.get(r, c));
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*col) {
                    let mut d = Tensor::zeros(dy.rows(), 1);
                    for r in 0..dy.rows() {
                        d.set(r, 0, dy.row_slice(r).iter().sum());
                    }
                    self.accumulate(grads, *col, d);
                }
            }
            Op::DivCol(a, col) => {
                let tc = self.value(*col);
                if self.needs(*a) {
                    let mut d = dy.clone();
                    for r in 0..d.rows() {
                        let inv = 1.0 / tc.get(r, 0);
                        for c in 0..d.cols() {
                            d.set(r, c, d.get(r, c) * inv);
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*col) {
                    let ta = self.value(*a);
                    let mut d = Tensor::zeros(dy.rows(), 1);
                    for r in 0..dy.rows() {
                        let denom = tc.get(r, 0);
                        let mut acc = 0.0;
                        for c in 0..dy.cols() {
                            acc -= dy.get(r, c) * ta.get(r, c) / (denom * denom);
                        }
                        d.set(r, 0, acc);
                    }
                    self.accumulate(grads, *col, d);
                }
            }
            Op::DivRow(a, row) => {
                let tr = self.value(*row);
                if self.needs(*a) {
                    let mut d = dy.clone();
                    for r in 0..d.rows() {
                        for c in 0..d.cols() {
                            d.set(r, c, d.get(r, c) / tr.get(0, c));
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*row) {
                    let ta = self.value(*a);
                    let mut d = Tensor::zeros(1, dy.cols());
                    for c in 0..dy.cols() {
                        let denom = tr.get(0, c);
                        let mut acc = 0.0;
                        for r in 0..dy.rows() {
                            acc -= dy.get(r, c) * ta.get(r, c) / (denom * denom);
                        }
                        d.set(0, c, acc);
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::OuterSum(col, row) => {
                if self.needs(*col) {
                    let mut d = Tensor::zeros(dy.rows(), 1);
                    for r in 0..dy.rows() {
                        d.set(r, 0, dy.row_slice(r).iter().sum());
                    }
                    self.accumulate(grads, *col, d);
                }
                if self.needs(*row) {
                    let mut d = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            d.set(0, c, d.get(0, c) + dy.get(r, c));
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, dy.map(|x| x * k));
            }
            Op::Offset(a, _) => {
                self.accumulate(grads, *a, dy.clone());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut d = dy.clone();
                for (x, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *x *= 1.0 - yv * yv;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut d = dy.clone();
                for (x, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *x *= yv * (1.0 - yv);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let input = self.value(*a);
                let mut d = dy.clone();
                for (x, iv) in d.data_mut().iter_mut().zip(input.data()) {
                    *x *= if *iv > 0.0 { 1.0 } else { *slope };
                }
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let mut d = dy.clone();
                for (x, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *x *= yv;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Ln(a) => {
                let input = self.value(*a);
                let mut d = dy.clone();
                for (x, iv) in d.data_mut().iter_mut().zip(input.data()) {
                    *x /= iv;
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let g = dy.item();
                self.accumulate(grads, *a, Tensor::filled(ta.rows(), ta.cols(), g));
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let g = dy.get(r, 0);
                    for c in 0..ta.cols() {
                        d.set(r, c, g);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumCols(a) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    for c in 0..ta.cols() {
                        d.set(r, c, dy.get(0, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let t = self.value(*p);
                    if self.needs(*p) {
                        let mut d = Tensor::zeros(t.rows(), t.cols());
                        for r in 0..t.rows() {
                            for c in 0..t.cols() {
                                d.set(r, c, dy.get(r, at + c));
                            }
                        }
                        self.accumulate(grads, *p, d);
                    }
                    at += t.cols();
                }
            }
            Op::SliceCols(a, from, _to) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        d.set(r, from + c, dy.get(r, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let t = self.value(*p);
                    if self.needs(*p) {
                        let d = Tensor::new(
                            t.rows(),
                            t.cols(),
                            dy.data()[at * dy.cols()..(at + t.rows()) * dy.cols()].to_vec(),
                        );
                        self.accumulate(grads, *p, d);
                    }
                    at += t.rows();
                }
            }
            Op::SliceRows(a, from, _to) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        d.set(from + r, c, dy.get(r, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, dy.transpose());
            }
            Op::GruGates {
                gi,
                h,
                w_hh,
                b_hh,
                aux,
            } => {
                let th = self.value(*h);
                let (b, hidden) = (th.rows(), th.cols());
                let mut dgi = Tensor::zeros(b, 3 * hidden);
                let mut dgh = Tensor::zeros(b, 3 * hidden);
                let mut dh_direct = Tensor::zeros(b, hidden);
                for r in 0..b {
                    for c in 0..hidden {
                        let g = dy.get(r, c);
                        let (zv, rv, nv, hnv) = (
                            aux.z.get(r, c),
                            aux.r.get(r, c),
                            aux.n.get(r, c),
                            aux.hn.get(r, c),
                        );
                        let dn = g * (1.0 - zv);
                        let dz = g * (th.get(r, c) - nv);
                        dh_direct.set(r, c, g * zv);
                        let dan = dn * (1.0 - nv * nv);
                        let daz = dz * zv * (1.0 - zv);
                        let dr = dan * hnv;
                        let dar = dr * rv * (1.0 - rv);
                        dgi.set(r, c, daz);
                        dgi.set(r, hidden + c, dar);
                        dgi.set(r, 2 * hidden + c, dan);
                        dgh.set(r, c, daz);
                        dgh.set(r, hidden + c, dar);
                        dgh.set(r, 2 * hidden + c, dan * rv);
                    }
                }
                if self.needs(*gi) {
                    self.accumulate(grads, *gi, dgi.clone());
                }
                if self.needs(*w_hh) {
                    let ht = th.transpose();
                    self.accumulate(grads, *w_hh, ht.matmul(&dgh));
                }
                if self.needs(*b_hh) {
                    let mut db = Tensor::zeros(1, 3 * hidden);
                    for r in 0..b {
                        for c in 0..3 * hidden {
                            db.set(0, c, db.get(0, c) + dgh.get(r, c));
                        }
                    }
                    self.accumulate(grads, *b_hh, db);
                }
                if self.needs(*h) {
                    let wt = self.value(*w_hh).transpose();
                    let mut dh = dgh.matmul(&wt);
                    dh.add_scaled(&dh_direct, 1.0);
                    self.accumulate(grads, *h, dh);
                }
            }
        }
    }
}

/// Jacobian of a taped output w.r.t. a list of taped parameters.
///
/// Row `i` is the gradient of the `i`-th element of `output` (row-major)
/// against the concatenation of the flattened `wrt` tensors, in order. One
/// reverse sweep per output element.
pub fn jacobian(tape: &Tape, output: Var, wrt: &[Var]) -> Tensor {
    let out_len = tape.value(output).len();
    let [or, oc] = tape.value(output).shape();
    let n_params: usize = wrt.iter().map(|v| tape.value(*v).len()).sum();
    let mut h = Tensor::zeros(out_len, n_params);
    for i in 0..out_len {
        let mut seed = Tensor::zeros(or, oc);
        seed.data_mut()[i] = 1.0;
        let grads = tape.backward_seeded(output, seed);
        let mut at = 0;
        for v in wrt {
            let g = grads.get(tape, *v);
            for (j, gv) in g.data().iter().enumerate() {
                h.set(i, at + j, *gv);
            }
            at += g.len();
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) -> f64 {
        // Central finite differences against analytic gradients.
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(&tape, x);

        let mut fd = Tensor::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let mut tp = Tape::new();
            let xp = tp.param(plus);
            let lpv = build(&mut tp, xp);
            let lp = tp.value(lpv).item();
            let mut tm = Tape::new();
            let xm = tm.param(minus);
            let lmv = build(&mut tm, xm);
            let lm = tm.value(lmv).item();
            fd.data_mut()[i] = (lp - lm) / (2.0 * eps);
        }
        // Normalize by the gradient scale, not per element: tiny entries sit
        // below finite-difference roundoff.
        let scale = g
            .data()
            .iter()
            .chain(fd.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        g.data()
            .iter()
            .zip(fd.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / scale))
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let s = tape.sum_all(w);
        let grads = tape.backward(s);
        assert_eq!(grads.get(&tape, w), Tensor::filled(2, 3, 1.0));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(1, 2, vec![3.0, 4.0]));
        let c = tape.constant(Tensor::scalar(7.0));
        let loss = tape.mul(c, c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(&tape, w), Tensor::zeros(1, 2));
    }

    #[test]
    fn composite_ops_pass_finite_difference() {
        let x0 = Tensor::new(2, 3, vec![0.3, -0.8, 1.2, 0.05, -1.4, 0.9]);
        let worst = fd_check(
            |t, x| {
                let w = t.constant(Tensor::new(3, 2, vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.3]));
                let m = t.matmul(x, w);
                let a = t.tanh(m);
                let b = t.sigmoid(m);
                let c = t.mul(a, b);
                let lr = t.leaky_relu(c, 0.1);
                let e = t.exp(lr);
                let s = t.sum_rows(e);
                let d = t.div_col(e, s);
                let l = t.ln(d);
                t.sum_all(l)
            },
            x0,
        );
        assert!(worst < 1e-4, "finite-difference mismatch: {worst}");
    }

    #[test]
    fn broadcast_and_slice_ops_pass_finite_difference() {
        let x0 = Tensor::new(2, 4, vec![0.3, -0.8, 1.2, 0.05, -1.4, 0.9, 0.2, -0.1]);
        let worst = fd_check(
            |t, x| {
                let left = t.slice_cols(x, 0, 2);
                let right = t.slice_cols(x, 2, 4);
                let joined = t.concat_cols(&[right, left]);
                let colsum = t.sum_rows(joined);
                let rowsum = t.sum_cols(joined);
                let outer = t.outer_sum(colsum, rowsum);
                let shifted = t.offset(outer, 0.5);
                let scaled = t.scale(shifted, 1.3);
                let tr = t.transpose(scaled);
                let e = t.exp(tr);
                let denom = t.offset(e, 1.0);
                let sr = t.sum_cols(denom);
                let dr = t.div_row(denom, sr);
                // squared so the normalized sum is not a constant
                let sq = t.mul(dr, dr);
                t.sum_all(sq)
            },
            x0,
        );
        assert!(worst < 1e-4, "finite-difference mismatch: {worst}");
    }

    #[test]
    fn jacobian_of_linear_map_is_input_blocks() {
        // y = x @ W with x constant: dy_j/dW[k,j'] = x_k when j == j'.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 3, vec![2.0, -1.0, 0.5]));
        let w = tape.param(Tensor::zeros(3, 2));
        let y = tape.matmul(x, w);
        let h = jacobian(&tape, y, &[w]);
        assert_eq!(h.shape(), [2, 6]);
        // W is row-major 3x2: entry (k, j) sits at flat index 2k + j.
        for j in 0..2 {
            for k in 0..3 {
                for jj in 0..2 {
                    let expect = if j == jj { tape.value(x).get(0, k) } else { 0.0 };
                    assert_eq!(h.get(j, 2 * k + jj), expect);
                }
            }
        }
    }

    #[test]
    fn jacobian_rows_match_individual_backward_passes() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(2, 2, vec![0.4, -0.3, 0.8, 0.1]));
        let x = tape.constant(Tensor::new(1, 2, vec![1.5, -0.7]));
        let m = tape.matmul(x, w);
        let y = tape.tanh(m);
        let h = jacobian(&tape, y, &[w]);
        for i in 0..2 {
            let mut seed = Tensor::zeros(1, 2);
            seed.data_mut()[i] = 1.0;
            let grads = tape.backward_seeded(y, seed);
            let g = grads.get(&tape, w);
            for (j, gv) in g.data().iter().enumerate() {
                assert_eq!(h.get(i, j), *gv);
            }
        }
    }

    #[test]
    fn jacobian_of_detached_output_is_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(1, 2, vec![0.4, -0.3]));
        let c = tape.constant(Tensor::new(1, 2, vec![1.0, 2.0]));
        let y = tape.tanh(c);
        let h = jacobian(&tape, y, &[w]);
        assert_eq!(h, Tensor::zeros(2, 2));
    }
}

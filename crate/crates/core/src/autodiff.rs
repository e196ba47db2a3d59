//! Tape-based reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! the values it produced. [`Tape::backward`] then replays adjoints in exact
//! reverse recording order. The primitive set is small and closed: elementwise
//! arithmetic with row/column broadcasting, `exp`/`log`/`sqrt`, matrix
//! products, reductions, Cholesky, triangular solves, the arc-cosine Gram
//! matrix, and the structural ops (concat, slice, gather, reshape).
//!
//! ```
//! use msdgp::autodiff::Tape;
//! use msdgp::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = (x * x).sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::f64::consts::PI;
use std::ops;
use std::rc::Rc;

use crate::error::Result;
use crate::parallel;
use crate::tensor::{dot, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    Diag(usize),
    AddDiag(usize, usize),
    CholFactor(usize),
    ArcCosGram { x: usize, y: usize, theta: Tensor },
    Concat { axis: usize, parts: Vec<usize> },
    Slice { src: usize, axis: usize, start: usize },
    GatherRows { src: usize, index: Vec<usize> },
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitives for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
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

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert!(
            value.all_finite() || !needs_grad,
            "non-finite value from {op:?}"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[output.id].needs_grad {
            grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads, shapes }
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the output does not depend
    /// on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

/// Gradients of a scalar `output` with respect to each of `params`.
pub fn grad<'t>(output: Var<'t>, params: &[Var<'t>]) -> Vec<Tensor> {
    let g = output.tape.backward(output);
    params.iter().map(|&p| g.wrt(p)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> (usize, usize) {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
        }
    };
    (dim(ar, br), dim(ac, bc))
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a, b);
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let x = ad[ai + if ac == 1 { 0 } else { j }];
            let y = bd[bi + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sum `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = g.dims2();
    let (tr, tc) = (shape[0], shape[1]);
    let mut out = vec![0.0; tr * tc];
    let gd = g.data();
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i * tc };
        for j in 0..c {
            out[oi + if tc == 1 { 0 } else { j }] += gd[i * c + j];
        }
    }
    Tensor::matrix(tr, tc, out)
}

fn phi_lower(m: &Tensor) -> Tensor {
    let (n, _) = m.dims2();
    let mut out = m.tril();
    for i in 0..n {
        let v = out.at(i, i);
        out.set(i, i, 0.5 * v);
    }
    out
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &*nodes[i].value;
    let need = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            }
            if need(*b) {
                accumulate(grads, nodes, *b, reduce_to(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            }
            if need(*b) {
                accumulate(grads, nodes, *b, reduce_to(&g.scale(-1.0), val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if need(*a) {
                let ga = broadcast_binary(g, vb, |x, y| x * y);
                accumulate(grads, nodes, *a, reduce_to(&ga, va.shape()));
            }
            if need(*b) {
                let gb = broadcast_binary(g, va, |x, y| x * y);
                accumulate(grads, nodes, *b, reduce_to(&gb, vb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if need(*a) {
                let ga = broadcast_binary(g, vb, |x, y| x / y);
                accumulate(grads, nodes, *a, reduce_to(&ga, va.shape()));
            }
            if need(*b) {
                // d(a/b)/db = -out / b
                let q = broadcast_binary(out, vb, |o, y| -o / y);
                let gb = g.zip_map(&q, |x, y| x * y);
                accumulate(grads, nodes, *b, reduce_to(&gb, vb.shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.scale(-1.0)),
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c)),
        Op::Offset(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(out, |x, y| x * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| x / y)),
        Op::Sqrt(a) => accumulate(grads, nodes, *a, g.zip_map(out, |x, y| 0.5 * x / y)),
        Op::Relu(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
        ),
        Op::ClampMin(a, floor) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |x, y| if y > *floor { x } else { 0.0 }),
        ),
        Op::MatMul(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, g.matmul_nt(val(*b)));
            }
            if need(*b) {
                accumulate(grads, nodes, *b, val(*a).matmul_tn(g));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Sum(a) => accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::SumRows(a) => {
            let (r, c) = val(*a).dims2();
            let gd = g.data();
            let data = (0..r).flat_map(|i| std::iter::repeat_n(gd[i], c)).collect();
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, data));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).dims2();
            let gd = g.data();
            let data = (0..r).flat_map(|_| gd.iter().copied()).collect();
            accumulate(grads, nodes, *a, Tensor::matrix(r, c, data));
        }
        Op::Cholesky(a) => {
            let l = out;
            let p = phi_lower(&l.matmul_tn(g));
            let x = l.solve_lower_t(&p);
            let s = l.solve_lower_t(&x.transpose()).transpose();
            let st = s.transpose();
            accumulate(grads, nodes, *a, s.zip_map(&st, |x, y| 0.5 * (x + y)));
        }
        Op::SolveLower(l, b) => {
            let vl = val(*l);
            let gb = vl.solve_lower_t(g);
            if need(*l) {
                accumulate(grads, nodes, *l, gb.matmul_nt(out).tril().scale(-1.0));
            }
            accumulate(grads, nodes, *b, gb);
        }
        Op::SolveLowerT(l, b) => {
            let vl = val(*l);
            let gb = vl.solve_lower(g);
            if need(*l) {
                accumulate(grads, nodes, *l, out.matmul_nt(&gb).tril().scale(-1.0));
            }
            accumulate(grads, nodes, *b, gb);
        }
        Op::Diag(a) => {
            let n = val(*a).rows();
            let mut ga = Tensor::zeros(&[n, n]);
            for i in 0..n {
                ga.set(i, i, g.data()[i]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::AddDiag(a, s) => {
            if need(*s) {
                let tr: f64 = g.diagonal().iter().sum();
                accumulate(grads, nodes, *s, Tensor::scalar(tr));
            }
            accumulate(grads, nodes, *a, g.clone());
        }
        Op::CholFactor(raw) => {
            let (rows, m) = out.dims2();
            let mut graw = Tensor::zeros(&[rows, m]);
            for r in 0..rows {
                let i = r % m;
                for j in 0..i {
                    graw.set(r, j, g.at(r, j));
                }
                graw.set(r, i, g.at(r, i) * out.at(r, i));
            }
            accumulate(grads, nodes, *raw, graw);
        }
        Op::ArcCosGram { x, y, theta } => {
            let (vx, vy) = (val(*x), val(*y));
            let (gx, gy) = arccos_gram_backward(vx, vy, theta, g, need(*x), need(*y));
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gy) = gy {
                accumulate(grads, nodes, *y, gy);
            }
        }
        Op::Concat { axis, parts } => {
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let len = vp.shape()[*axis];
                if need(p) {
                    accumulate(grads, nodes, p, slice_value(g, *axis, offset, len));
                }
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let vs = val(*src);
            let (r, c) = vs.dims2();
            let mut gs = Tensor::zeros(&[r, c]);
            let (gr, gc) = g.dims2();
            for i in 0..gr {
                for j in 0..gc {
                    let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                    gs.set(si, sj, g.at(i, j));
                }
            }
            accumulate(grads, nodes, *src, gs);
        }
        Op::GatherRows { src, index } => {
            let vs = val(*src);
            let (r, c) = vs.dims2();
            let mut gs = vec![0.0; r * c];
            for (i, &k) in index.iter().enumerate() {
                for (o, &v) in gs[k * c..(k + 1) * c].iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *src, Tensor::matrix(r, c, gs));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            let ga = g.clone().reshape(&shape).expect("reshape preserves length");
            accumulate(grads, nodes, *a, ga);
        }
    }
}

fn slice_value(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (r, c) = t.dims2();
    if axis == 0 {
        assert!(start + len <= r, "row slice out of range");
        Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())
    } else {
        assert!(start + len <= c, "column slice out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Tensor::matrix(r, len, out)
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| dot(t.row(i), t.row(i)).sqrt()).collect()
}

/// Order-1 arc-cosine Gram matrix with unit output scale, plus the angles.
///
/// `k(x, y) = ‖x‖‖y‖ (sin θ + (π − θ) cos θ) / π` with
/// `cos θ = xᵀy / (‖x‖‖y‖)` clamped to `[-1, 1]`; zero-norm rows give 0.
pub(crate) fn arccos_gram_value(x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = x.dims2();
    let (m, d2) = y.dims2();
    assert_eq!(d, d2, "arccos_gram feature dims {d} vs {d2}");
    let nx = row_norms(x);
    let ny = row_norms(y);
    let mut buf = vec![0.0; n * 2 * m];
    parallel::rows_mut(&mut buf, 2 * m, n * m * (d + 8), |i, row| {
        let (k, th) = row.split_at_mut(m);
        let xi = x.row(i);
        for j in 0..m {
            let norm = nx[i] * ny[j];
            if norm == 0.0 {
                k[j] = 0.0;
                th[j] = 0.5 * PI;
                continue;
            }
            let c = (dot(xi, y.row(j)) / norm).clamp(-1.0, 1.0);
            let t = c.acos();
            th[j] = t;
            k[j] = norm * (t.sin() + (PI - t) * c) / PI;
        }
    });
    let mut k = Vec::with_capacity(n * m);
    let mut th = Vec::with_capacity(n * m);
    for row in buf.chunks(2 * m.max(1)) {
        k.extend_from_slice(&row[..m]);
        th.extend_from_slice(&row[m..]);
    }
    (Tensor::matrix(n, m, k), Tensor::matrix(n, m, th))
}

// dk/dx = (1/π) [ (‖y‖/‖x‖) sin θ · x + (π − θ) · y ], symmetric for y. The
// arccos singularity cancels analytically, so no clamp is needed here.
fn arccos_gram_backward(
    x: &Tensor,
    y: &Tensor,
    theta: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_y: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, d) = x.dims2();
    let m = y.rows();
    let nx = row_norms(x);
    let ny = row_norms(y);
    let mut p = vec![0.0; n * m];
    let mut qx = vec![0.0; n];
    let mut qy = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            if nx[i] == 0.0 || ny[j] == 0.0 {
                continue;
            }
            let gij = g.data()[i * m + j];
            let t = theta.data()[i * m + j];
            p[i * m + j] = gij * (PI - t) / PI;
            let s = gij * t.sin() / PI;
            qx[i] += s * ny[j];
            qy[j] += s * nx[i];
        }
    }
    let p = Tensor::matrix(n, m, p);
    let gx = want_x.then(|| {
        let mut gx = p.matmul(y);
        for i in 0..n {
            if nx[i] > 0.0 {
                let f = qx[i] / nx[i];
                for (o, &v) in gx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(x.row(i)) {
                    *o += f * v;
                }
            }
        }
        gx
    });
    let gy = want_y.then(|| {
        let mut gy = p.matmul_tn(x);
        for j in 0..m {
            if ny[j] > 0.0 {
                let f = qy[j] / ny[j];
                for (o, &v) in gy.data_mut()[j * d..(j + 1) * d].iter_mut().zip(y.row(j)) {
                    *o += f * v;
                }
            }
        }
        gy
    });
    (gx, gy)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.record(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        self.tape.record(value, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a + b);
        self.binary(other, Op::Add(self.id, other.id), v)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a - b);
        self.binary(other, Op::Sub(self.id, other.id), v)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a * b);
        self.binary(other, Op::Mul(self.id, other.id), v)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a / b);
        self.binary(other, Op::Div(self.id, other.id), v)
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().scale(-1.0);
        self.unary(Op::Neg(self.id), v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(Op::Scale(self.id, c), v)
    }

    /// `self + c` elementwise.
    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::Offset(self.id), v)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    /// `max(self, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor));
        self.unary(Op::ClampMin(self.id, floor), v)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul(&other.value());
        self.binary(other, Op::MatMul(self.id, other.id), v)
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(Op::Transpose(self.id), v)
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum(self.id), v)
    }

    /// Sum across columns: `r x c -> r x 1`.
    pub fn sum_rows(self) -> Var<'t> {
        let val = self.value();
        let (r, _) = val.dims2();
        let v = Tensor::matrix(r, 1, (0..r).map(|i| val.row(i).iter().sum()).collect());
        self.unary(Op::SumRows(self.id), v)
    }

    /// Sum down rows: `r x c -> 1 x c`.
    pub fn sum_cols(self) -> Var<'t> {
        let val = self.value();
        let (r, c) = val.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(val.row(i)) {
                *o += x;
            }
        }
        self.unary(Op::SumCols(self.id), Tensor::matrix(1, c, out))
    }

    pub fn cholesky(self) -> Result<Var<'t>> {
        let v = self.value().cholesky()?;
        Ok(self.unary(Op::Cholesky(self.id), v))
    }

    /// `self⁻¹ b` with `self` lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let v = self.value().solve_lower(&b.value());
        self.binary(b, Op::SolveLower(self.id, b.id), v)
    }

    /// `self⁻ᵀ b` with `self` lower triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let v = self.value().solve_lower_t(&b.value());
        self.binary(b, Op::SolveLowerT(self.id, b.id), v)
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(self) -> Var<'t> {
        let d = self.value().diagonal();
        let n = d.len();
        self.unary(Op::Diag(self.id), Tensor::matrix(n, 1, d))
    }

    /// `self + s·I` for a `1 x 1` value `s`.
    pub fn add_diag(self, s: Var<'t>) -> Var<'t> {
        let v = self.value().add_diagonal(s.value().item());
        self.binary(s, Op::AddDiag(self.id, s.id), v)
    }

    /// Lower-triangular factors from unconstrained storage.
    ///
    /// `self` stacks square `m x m` blocks vertically. In each block the strict
    /// lower triangle is used as is, the diagonal is exponentiated and the
    /// upper triangle ignored, so every factor has a positive diagonal.
    pub fn chol_factor(self) -> Var<'t> {
        let raw = self.value();
        let (rows, m) = raw.dims2();
        assert!(m > 0 && rows % m == 0, "chol_factor needs stacked square blocks");
        let mut out = Tensor::zeros(&[rows, m]);
        for r in 0..rows {
            let i = r % m;
            for j in 0..i {
                out.set(r, j, raw.at(r, j));
            }
            out.set(r, i, raw.at(r, i).exp());
        }
        self.unary(Op::CholFactor(self.id), out)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let v = slice_value(&self.value(), 0, start, len);
        self.unary(Op::Slice { src: self.id, axis: 0, start }, v)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = slice_value(&self.value(), 1, start, len);
        self.unary(Op::Slice { src: self.id, axis: 1, start }, v)
    }

    /// Rows `index[i]` of `self`, in order; duplicates allowed.
    pub fn gather_rows(self, index: &[usize]) -> Var<'t> {
        let val = self.value();
        let c = val.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &k in index {
            data.extend_from_slice(val.row(k));
        }
        let v = Tensor::matrix(index.len(), c, data);
        self.unary(
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
            v,
        )
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let v = (*self.value())
            .clone()
            .reshape(&[rows, cols])
            .expect("reshape preserves length");
        self.unary(Op::Reshape(self.id), v)
    }
}

/// Concatenate matrices along `axis` (0 = stack rows, 1 = side by side).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let v = if axis == 0 {
        let c = values[0].cols();
        let mut data = Vec::new();
        let mut r = 0;
        for t in &values {
            assert_eq!(t.cols(), c, "concat rows: column mismatch");
            data.extend_from_slice(t.data());
            r += t.rows();
        }
        Tensor::matrix(r, c, data)
    } else {
        let r = values[0].rows();
        let c: usize = values.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for t in &values {
                assert_eq!(t.rows(), r, "concat cols: row mismatch");
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::matrix(r, c, data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.record(
        v,
        Op::Concat {
            axis,
            parts: ids.clone(),
        },
        &ids,
    )
}

/// Unit-scale arc-cosine Gram matrix between the rows of `x` and `y`.
pub fn arccos_gram<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
    let (k, theta) = arccos_gram_value(&x.value(), &y.value());
    x.tape.record(
        k,
        Op::ArcCosGram {
            x: x.id,
            y: y.id,
            theta,
        },
        &[x.id, y.id],
    )
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

/// Central finite-difference gradient of `f` at `x`, entry by entry.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    out
}

/// Largest entrywise relative error between an analytic and a numeric
/// gradient. Entries where both are below `floor` in magnitude are compared
/// against `floor` instead.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, Rng};
    use proptest::prelude::*;

    const STEP: f64 = 1e-5;

    /// Checks d sum(w ∘ f(x)) / dx against finite differences, with random
    /// weights `w` so every output entry matters.
    fn check_unary(x: &Tensor, f: impl Fn(Var<'_>) -> Var<'_>, seed: u64) -> f64 {
        let eval = |t: &Tensor, w: &Tensor| {
            let tape = Tape::new();
            let v = f(tape.constant(t.clone()));
            v.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(xv);
        let w = gaussian_sample(&y.shape(), &mut Rng::new(seed));
        let wv = tape.constant(w.clone());
        let out = (y * wv).sum();
        let analytic = tape.backward(out).wrt(xv);
        let numeric = finite_difference(|t| eval(t, &w), x, STEP);
        max_relative_error(&analytic, &numeric, 1e-6)
    }

    fn spd(n: usize, rng: &mut Rng) -> Tensor {
        let b = gaussian_sample(&[n, n], rng);
        b.matmul_nt(&b).add_diagonal(0.5)
    }

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let g = grad((x * x).sum(), &[x]);
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let c = tape.scalar(5.0).sum();
        let g = grad(c, &[x]);
        assert_eq!(g[0], Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn cholesky_of_scaled_identity() {
        // f(x) = sum(chol(x I2)) = 2 sqrt(x); f'(4) = 1/2.
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(4.0));
        let eye = tape.constant(Tensor::eye(2));
        let l = (eye * x).cholesky().unwrap();
        let g = grad(l.sum(), &[x]);
        let numeric = finite_difference(|t| 2.0 * t.item().sqrt(), &Tensor::scalar(4.0), STEP);
        assert!((g[0].item() - numeric.item()).abs() < 1e-4 * numeric.item());
        assert!((g[0].item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn elementwise_primitives() {
        let mut rng = Rng::new(11);
        let x = gaussian_sample(&[3, 4], &mut rng);
        let pos = x.map(|v| v.abs() + 0.5);
        assert!(check_unary(&x, |v| v.exp(), 1) < 1e-4);
        assert!(check_unary(&pos, |v| v.log(), 2) < 1e-4);
        assert!(check_unary(&pos, |v| v.sqrt(), 3) < 1e-4);
        assert!(check_unary(&x, |v| v.square().neg().scale(0.3).offset(2.0), 4) < 1e-4);
        assert!(check_unary(&pos, |v| v.relu(), 5) < 1e-4);
        assert!(check_unary(&pos, |v| v.clamp_min(0.1), 6) < 1e-4);
        assert!(check_unary(&x, |v| v.t().sum_rows(), 7) < 1e-4);
        assert!(check_unary(&x, |v| v.sum_cols().exp(), 8) < 1e-4);
    }

    #[test]
    fn broadcasting_binary_primitives() {
        let mut rng = Rng::new(12);
        let x = gaussian_sample(&[3, 4], &mut rng);
        let row = gaussian_sample(&[1, 4], &mut rng);
        let col = gaussian_sample(&[3, 1], &mut rng).map(|v| v.abs() + 1.0);
        let r = row.clone();
        assert!(
            check_unary(&x, move |v| v.add(v.tape().constant(r.clone())).mul(v), 1) < 1e-4
        );
        let c = col.clone();
        assert!(check_unary(&x, move |v| v.div(v.tape().constant(c.clone())), 2) < 1e-4);
        let xx = x.clone();
        assert!(check_unary(&col, move |v| v.tape().constant(xx.clone()).div(v), 3) < 1e-4);
        let xx = x.clone();
        assert!(check_unary(&row, move |v| v.tape().constant(xx.clone()).sub(v), 4) < 1e-4);
    }

    #[test]
    fn structural_primitives() {
        let mut rng = Rng::new(13);
        let x = gaussian_sample(&[4, 3], &mut rng);
        assert!(check_unary(&x, |v| concat(&[v, v.square()], 0), 1) < 1e-4);
        assert!(check_unary(&x, |v| concat(&[v.exp(), v], 1), 2) < 1e-4);
        assert!(check_unary(&x, |v| v.slice_rows(1, 2), 3) < 1e-4);
        assert!(check_unary(&x, |v| v.slice_cols(1, 2), 4) < 1e-4);
        assert!(check_unary(&x, |v| v.gather_rows(&[3, 0, 3, 1]), 5) < 1e-4);
        assert!(check_unary(&x, |v| v.reshape(2, 6).square(), 6) < 1e-4);
        let sq = gaussian_sample(&[3, 3], &mut rng);
        assert!(check_unary(&sq, |v| v.diag().exp(), 7) < 1e-4);
        assert!(check_unary(&gaussian_sample(&[6, 3], &mut rng), |v| v.chol_factor(), 8) < 1e-4);
    }

    #[test]
    fn add_diag_gradient_reaches_scalar() {
        let sq = gaussian_sample(&[3, 3], &mut Rng::new(3));
        let e = check_unary(&Tensor::scalar(0.7), |s| {
            s.tape().constant(sq.clone()).add_diag(s).square()
        }, 9);
        assert!(e < 1e-4);
    }

    #[test]
    fn linear_algebra_primitives() {
        let mut rng = Rng::new(14);
        let a = gaussian_sample(&[3, 5], &mut rng);
        let b = gaussian_sample(&[5, 2], &mut rng);
        let bb = b.clone();
        assert!(check_unary(&a, move |v| v.matmul(v.tape().constant(bb.clone())), 1) < 1e-4);
        let aa = a.clone();
        assert!(check_unary(&b, move |v| v.tape().constant(aa.clone()).matmul(v), 2) < 1e-4);

        // Symmetric inputs are built from a free factor so finite differences
        // stay on the symmetric manifold the primitive is defined on.
        let f = gaussian_sample(&[4, 4], &mut rng);
        fn sym(v: Var<'_>) -> Var<'_> {
            v.matmul(v.t()).add_diag(v.tape().scalar(0.5))
        }
        assert!(check_unary(&f, move |v| sym(v).cholesky().unwrap(), 3) < 1e-4);

        let l = spd(4, &mut rng).cholesky().unwrap();
        let rhs = gaussian_sample(&[4, 3], &mut rng);
        let ll = l.clone();
        assert!(
            check_unary(&rhs, move |v| v.tape().constant(ll.clone()).solve_lower(v), 4) < 1e-4
        );
        let ll = l.clone();
        assert!(
            check_unary(&rhs, move |v| v.tape().constant(ll.clone()).solve_lower_t(v), 5) < 1e-4
        );
        let r = rhs.clone();
        assert!(
            check_unary(&f, move |v| sym(v)
                .cholesky()
                .unwrap()
                .solve_lower(v.tape().constant(r.clone())), 6)
                < 1e-4
        );
        let r = rhs.clone();
        assert!(
            check_unary(&f, move |v| sym(v)
                .cholesky()
                .unwrap()
                .solve_lower_t(v.tape().constant(r.clone())), 7)
                < 1e-4
        );
    }

    #[test]
    fn arccos_gram_gradients() {
        let mut rng = Rng::new(15);
        let x = gaussian_sample(&[4, 3], &mut rng);
        let y = gaussian_sample(&[5, 3], &mut rng);
        let yy = y.clone();
        assert!(check_unary(&x, move |v| arccos_gram(v, v.tape().constant(yy.clone())), 1) < 1e-4);
        let xx = x.clone();
        assert!(check_unary(&y, move |v| arccos_gram(v.tape().constant(xx.clone()), v), 2) < 1e-4);
        // Same variable on both sides, diagonal included.
        assert!(check_unary(&x, |v| arccos_gram(v, v), 3) < 1e-4);
    }

    #[test]
    fn arccos_gram_near_parallel_inputs() {
        // |cos θ| = 1 - 1e-7 between the two rows.
        let c: f64 = 1.0 - 1e-7;
        let s = (1.0 - c * c).sqrt();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![c, s]]);
        assert!(check_unary(&x, |v| arccos_gram(v, v), 4) < 1e-4);
        let anti = Tensor::from_rows(&[vec![1.0, 0.0], vec![-c, s]]);
        assert!(check_unary(&anti, |v| arccos_gram(v, v), 5) < 1e-4);
    }

    #[test]
    fn zero_norm_rows_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]));
        let out = arccos_gram(x, x).sum();
        let g = tape.backward(out).wrt(x);
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert!(g.all_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn chained_primitives_match_finite_differences(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let f = gaussian_sample(&[n, n], &mut rng);
            let b = gaussian_sample(&[n, 2], &mut rng);
            let err = check_unary(&f, move |v| {
                let a = v.matmul(v.t()).add_diag(v.tape().scalar(1.0));
                let l = a.cholesky().unwrap();
                let x = l.solve_lower(v.tape().constant(b.clone()));
                concat(&[x.square(), l.diag().log().t().t()], 1).sum_rows()
            }, seed);
            prop_assert!(err < 1e-4, "err {}", err);
        }
    }
}

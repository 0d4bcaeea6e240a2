use std::cell::Cell;

use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used to name the op in errors and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Matmul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    Offset,
    Concat,
    Slice,
    Sigmoid,
    Tanh,
    Log,
    Cos,
    Sin,
    Softmax,
    Clamp,
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Cos(Var),
    Sin(Var),
    Softmax(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Matmul(..) => Primitive::Matmul,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Offset(..) => Primitive::Offset,
            Op::Concat(..) => Primitive::Concat,
            Op::Slice(..) => Primitive::Slice,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Log(..) => Primitive::Log,
            Op::Cos(..) => Primitive::Cos,
            Op::Sin(..) => Primitive::Sin,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Clamp(..) => Primitive::Clamp,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

thread_local! {
    static FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `primitive` sign-flipped on this thread.
///
/// Negative control for the gradient checker: a correct checker must flag
/// every component whose gradient passes through the faulted primitive.
pub fn with_injected_fault<R>(primitive: Primitive, f: impl FnOnce() -> R) -> R {
    let previous = FAULT.with(|c| c.replace(Some(primitive)));
    let out = f();
    FAULT.with(|c| c.set(previous));
    out
}

fn fault_sign(p: Primitive) -> f64 {
    if FAULT.with(|c| c.get()) == Some(p) {
        -1.0
    } else {
        1.0
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
    records: usize,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled if unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Records processed by the backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Records on the tape (up to the loss) that participate in differentiation.
    pub fn records(&self) -> usize {
        self.records
    }
}

/// Reverse-mode tape. Every op appends one record; `backward` sweeps them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> NumError {
    NumError::Shape(format!("{op}: incompatible operand shapes {shapes:?}"))
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
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(format!("{:?}", op.primitive())));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a rank-1 `row` to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sa.last() != sr.first() {
            return Err(shape_err("add_row", &[sa, sr]));
        }
        let cols = sr[0];
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + r[i % cols]).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    /// Adds the constant `k` to every element.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::Offset(a), &[a])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return Err(NumError::Shape("concat: no operands".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape(v)).collect();
                return Err(shape_err("concat", &shapes));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let s = self.shape(a).to_vec();
        let cols = *s.last().unwrap_or(&0);
        if len == 0 || start + len > cols {
            return Err(NumError::Shape(format!(
                "slice: range {start}..{} out of bounds for shape {s:?}",
                start + len
            )));
        }
        let va = self.value(a);
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Slice(a, start), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(f64::cos);
        self.push(t, Op::Cos(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(f64::sin);
        self.push(t, Op::Sin(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NumError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let records = self.nodes[..=loss.0].iter().filter(|n| n.requires_grad).count();
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes, visited, records })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let sign = fault_sign(node.op.primitive());
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let t = if sign < 0.0 { t.map(|x| -x) } else { t };
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elem = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = self.value(a).data();
            let data = g.data().iter().zip(x).zip(out.data()).map(|((&gi, &xi), &yi)| f(gi, xi, yi)).collect();
            Tensor::new(out.shape(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da);
                    acc(*a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db);
                    acc(*b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let vb = self.value(*b).clone();
                let va = self.value(*a).clone();
                acc(*a, zip_with(g, &vb, |x, y| x * y));
                acc(*b, zip_with(g, &va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let cols = g.cols();
                let mut dr = vec![0.0; cols];
                for chunk in g.data().chunks(cols) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                acc(*row, Tensor::vector(dr));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Concat(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    acc(p, Tensor::new(self.shape(p), d).expect("shape"));
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let sa = self.shape(*a);
                let cols = *sa.last().unwrap();
                let len = g.cols();
                let mut d = vec![0.0; self.value(*a).len()];
                for (r, chunk) in g.data().chunks(len).enumerate() {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(chunk);
                }
                acc(*a, Tensor::new(sa, d).expect("shape"));
            }
            Op::Sigmoid(a) => acc(*a, elem(*a, &|gi, _, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, elem(*a, &|gi, _, y| gi * (1.0 - y * y))),
            Op::Log(a) => acc(*a, elem(*a, &|gi, x, _| gi / x)),
            Op::Cos(a) => acc(*a, elem(*a, &|gi, x, _| -gi * x.sin())),
            Op::Sin(a) => acc(*a, elem(*a, &|gi, x, _| gi * x.cos())),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, elem(*a, &|gi, x, _| if x > lo && x < hi { gi } else { 0.0 }))
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (gy, y) in g.data().chunks(cols).zip(out.data().chunks(cols)) {
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    d.extend(gy.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)));
                }
                acc(*a, Tensor::new(out.shape(), d).expect("shape"));
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n))
            }
        }
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

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// `out = op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64]) {
    // Stored layouts: a is [m,k] or [k,m] (if transposed); b is [k,n] or [n,k].
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 7.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 5]);
    }

    #[test]
    fn self_difference_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let d = tape.sub(x, x).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[36]));
        let p = tape.softmax(x).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 36.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_widths_add_up() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 512]));
        let b = tape.constant(Tensor::zeros(&[2, 128]));
        let c = tape.constant(Tensor::zeros(&[2, 128]));
        let out = tape.concat(&[a, b, c]).unwrap();
        assert_eq!(tape.shape(out), &[2, 768]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::vector(vec![3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn each_record_visited_once() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let mut h = x;
        for _ in 0..10 {
            let z = tape.matmul(h, w).unwrap();
            h = tape.tanh(z).unwrap();
        }
        let l = tape.sum(h).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.visited(), g.records());
        // w plus 10 × (matmul, tanh) plus the sum.
        assert_eq!(g.records(), 22);
    }

    #[test]
    fn matmul_gradients_match_transposes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Tensor::matrix(3, 1, vec![1., -1., 2.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[1., -1., 2., 1., -1., 2.]);
        assert_eq!(g.wrt(b).data(), &[5., 7., 9.]);
    }
}

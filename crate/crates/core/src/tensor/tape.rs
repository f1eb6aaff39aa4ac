use super::{gemm, permute_data, MatRef, Real, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Tanh(usize),
    Gelu(usize),
    Silu(usize),
    RmsNorm {
        a: usize,
        inv_rms: Vec<T>,
    },
    Softmax(usize),
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    IndexSelect {
        a: usize,
        index: Vec<usize>,
    },
    Rotate {
        a: usize,
        cos: Rc<Tensor<T>>,
        sin: Rc<Tensor<T>>,
    },
    ScaleBy(usize, usize),
    Concat(Vec<(usize, usize)>),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Node ids increase in creation
/// order, which is a topological order, so the reverse pass is a plain
/// descending sweep.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. The borrow checker guarantees no [`Var`]
    /// of this tape is alive.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a differentiable input.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Concatenates along axis 0; trailing dims must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?
            .value();
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim("concat", first.shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
            spans.push((p.id, v.len()));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push_op(Tensor::new(&shape, data)?, Op::Concat(spans), &ids))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar loss. Contributions from shared
    /// subexpressions are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &node.op, g.data(), lower);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Tensor<T>>], id: usize) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let entry = &mut grads[id];
    if entry.is_none() {
        *entry = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    entry.as_mut().map(|t| t.data_mut())
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    match op {
        Op::Leaf => {}
        &Op::MatMul { a, b, rows, k, n } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let gm = MatRef::new(g, rows, n);
            if let Some(ga) = slot(nodes, grads, a) {
                gemm(gm, MatRef::new(bv.data(), k, n).t(), ga, true);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gemm(MatRef::new(av.data(), rows, k).t(), gm, gb, true);
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let (br, bc) = if trans_b { (n, k) } else { (k, n) };
            if let Some(ga) = slot(nodes, grads, a) {
                for i in 0..batch {
                    let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let bi = MatRef::new(&bv.data()[i * k * n..(i + 1) * k * n], br, bc);
                    let bi = if trans_b { bi } else { bi.t() };
                    gemm(gi, bi, &mut ga[i * m * k..(i + 1) * m * k], true);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let ai = MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(gi.t(), ai, dst, true);
                    } else {
                        gemm(ai.t(), gi, dst, true);
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let bl = gb.len();
                for chunk in g.chunks(bl) {
                    gb.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + sign * v);
                }
            }
        }
        &Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let bl = bv.len();
            if let Some(ga) = slot(nodes, grads, a) {
                for (dc, gc) in ga.chunks_mut(bl).zip(g.chunks(bl)) {
                    for ((d, &gv), &y) in dc.iter_mut().zip(gc).zip(bv.data()) {
                        *d = *d + gv * y;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (gc, xc) in g.chunks(bl).zip(av.data().chunks(bl)) {
                    for ((d, &gv), &x) in gb.iter_mut().zip(gc).zip(xc) {
                        *d = *d + gv * x;
                    }
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + c * v);
            }
        }
        &Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d = *d + v * (T::one() - y * y);
                }
            }
        }
        &Op::Gelu(a) => {
            let av = Rc::clone(&nodes[a].value);
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *d = *d + v * gelu_grad(x);
                }
            }
        }
        &Op::Silu(a) => {
            let av = Rc::clone(&nodes[a].value);
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    let s = T::one() / (T::one() + (-x).exp());
                    *d = *d + v * s * (T::one() + x * (T::one() - s));
                }
            }
        }
        Op::RmsNorm { a, inv_rms } => {
            let n = out.last_dim();
            let nt = T::from_usize(n).unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv) / nt;
                    for j in 0..n {
                        ga[r * n + j] = ga[r * n + j] + inv * (gy[j] - y[j] * dot);
                    }
                }
            }
        }
        &Op::Softmax(a) => {
            let n = out.last_dim();
            if let Some(ga) = slot(nodes, grads, a) {
                for ((y, gy), dst) in out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..n {
                        dst[j] = dst[j] + y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        &Op::Mse(a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let scale = g[0] * T::from_f64_lossy(2.0 / av.len() as f64);
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, &x), &y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d = *d + scale * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, &x), &y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d = *d - scale * (x - y);
                }
            }
        }
        &Op::Sum(a) | &Op::Mean(a) => {
            let c = if matches!(op, Op::Mean(_)) {
                g[0] / T::from_usize(nodes[a].value.len()).unwrap()
            } else {
                g[0]
            };
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|d| *d = *d + c);
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::Permute { a, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let back = permute_data(g, out.shape(), &inverse);
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&back).for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::IndexSelect { a, index } => {
            let stride = out.len() / index.len().max(1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &src) in index.iter().enumerate() {
                    let from = &g[i * stride..(i + 1) * stride];
                    let to = &mut ga[src * stride..(src + 1) * stride];
                    to.iter_mut().zip(from).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::Rotate { a, cos, sin } => {
            let s = cos.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gc, dc) in g.chunks(s).zip(ga.chunks_mut(s)) {
                    for p in (0..s).step_by(2) {
                        let (g0, g1) = (gc[p], gc[p + 1]);
                        dc[p] = dc[p] + g0 * cos.data()[p] + g1 * sin.data()[p + 1];
                        dc[p + 1] = dc[p + 1] - g0 * sin.data()[p] + g1 * cos.data()[p + 1];
                    }
                }
            }
        }
        Op::Concat(spans) => {
            let mut off = 0;
            for &(p, len) in spans {
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &v)| *d = *d + v);
                }
                off += len;
            }
        }
        &Op::ScaleBy(a, s) => {
            let av = Rc::clone(&nodes[a].value);
            let sv = Rc::clone(&nodes[s].value);
            let inner = av.len() / sv.len();
            if let Some(ga) = slot(nodes, grads, a) {
                for (r, &c) in sv.data().iter().enumerate() {
                    for j in r * inner..(r + 1) * inner {
                        ga[j] = ga[j] + g[j] * c;
                    }
                }
            }
            if let Some(gs) = slot(nodes, grads, s) {
                for (r, d) in gs.iter_mut().enumerate() {
                    let span = r * inner..(r + 1) * inner;
                    let acc = g[span.clone()]
                        .iter()
                        .zip(&av.data()[span])
                        .fold(T::zero(), |acc, (&gv, &x)| acc + gv * x);
                    *d = *d + acc;
                }
            }
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

// 0.5·(1 + tanh(u)) equals sigmoid(2u), which needs a single exp.
fn gelu<T: Real>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let two = T::from_f64_lossy(2.0);
    let u = c * (x + k * x * x * x);
    x / (T::one() + (-two * u).exp())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let two = T::from_f64_lossy(2.0);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let s = T::one() / (T::one() + (-two * u).exp());
    s + x * s * (T::one() - s) * two * c * (T::one() + three * k * x * x)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        self.tape.push_op(out, op, &[self.id])
    }

    fn binary(self, other: Self, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let a = self.value();
        let b = other.value();
        if !is_suffix(b.shape(), a.shape()) {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let bl = b.len();
        let mut data = Vec::with_capacity(a.len());
        for chunk in a.data().chunks(bl) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push_op(out, op, &[self.id, other.id]))
    }

    /// `self + other`, with `other` repeated over leading dims.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn silu(self) -> Self {
        self.unary(Op::Silu(self.id), |x| x / (T::one() + (-x).exp()))
    }

    /// Normalizes each last-axis row to unit root-mean-square.
    pub fn rms_norm(self) -> Self {
        let v = self.value();
        let n = v.last_dim();
        let eps = T::from_f64_lossy(RMS_EPS);
        let nt = T::from_usize(n).unwrap();
        let mut data = Vec::with_capacity(v.len());
        let mut inv_rms = Vec::with_capacity(v.len() / n);
        for row in v.data().chunks(n) {
            let ms = row.iter().fold(T::zero(), |acc, &x| acc + x * x) / nt;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().map(|&x| x * inv));
        }
        let out = Tensor::new(v.shape(), data).expect("same shape");
        self.tape.push_op(out, Op::RmsNorm { a: self.id, inv_rms }, &[self.id])
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax(self) -> Result<Self> {
        let v = self.value();
        if !v.all_finite() {
            return Err(Error::Numeric("softmax input"));
        }
        let out = softmax_rows(&v);
        Ok(self.tape.push_op(out, Op::Softmax(self.id), &[self.id]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(self, target: Self) -> Result<Self> {
        let a = self.value();
        let b = target.value();
        if a.shape() != b.shape() {
            return Err(Error::dim("mse", a.shape(), b.shape()));
        }
        let total = a
            .data()
            .iter()
            .zip(b.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let out = Tensor::scalar(total / T::from_usize(a.len()).unwrap());
        Ok(self
            .tape
            .push_op(out, Op::Mse(self.id, target.id), &[self.id, target.id]))
    }

    pub fn sum(self) -> Self {
        let v = self.value();
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.tape.push_op(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::scalar(s / T::from_usize(v.len()).unwrap());
        self.tape.push_op(out, Op::Mean(self.id), &[self.id])
    }

    /// `[..., m, k] · [k, n] -> [..., m, n]`; leading dims of `self` are
    /// folded into rows.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        if a.ndim() < 1 || b.ndim() != 2 || a.last_dim() != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let k = b.shape()[0];
        let n = b.shape()[1];
        let rows = a.len() / k;
        let mut data = vec![T::zero(); rows * n];
        gemm(
            MatRef::new(a.data(), rows, k),
            MatRef::new(b.data(), k, n),
            &mut data,
            false,
        );
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push_op(
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                rows,
                k,
                n,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Batched product over matching leading dims:
    /// `[.., m, k] · [.., k, n]`, or `[.., m, k] · [.., n, k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(self, rhs: Self, trans_b: bool) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        let err = || Error::dim("bmm", a.shape(), b.shape());
        if a.ndim() < 3 || b.ndim() != a.ndim() {
            return Err(err());
        }
        let nd = a.ndim();
        if a.shape()[..nd - 2] != b.shape()[..nd - 2] {
            return Err(err());
        }
        let (m, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
        let (k2, n) = if trans_b {
            (b.shape()[nd - 1], b.shape()[nd - 2])
        } else {
            (b.shape()[nd - 2], b.shape()[nd - 1])
        };
        if k != k2 {
            return Err(err());
        }
        let batch: usize = a.shape()[..nd - 2].iter().product();
        let (br, bc) = if trans_b { (n, k) } else { (k, n) };
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bi = MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], br, bc);
            gemm(
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                if trans_b { bi.t() } else { bi },
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = a.shape()[..nd - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push_op(
            out,
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push_op(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let v = self.value();
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim()
            || axes
                .iter()
                .any(|&a| a >= v.ndim() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", v.shape(), axes));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        let out = Tensor::new(&shape, permute_data(v.data(), v.shape(), axes))?;
        Ok(self.tape.push_op(
            out,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn index_select(self, index: &[usize]) -> Result<Self> {
        let v = self.value();
        let rows = v.shape()[0];
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::Contract(format!(
                "index_select: index out of range for {} rows",
                rows
            )));
        }
        let stride = v.len() / rows;
        let mut data = Vec::with_capacity(stride * index.len());
        for &i in index {
            data.extend_from_slice(&v.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push_op(
            out,
            Op::IndexSelect {
                a: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Rotates adjacent pairs `(x[2i], x[2i+1])` by angles whose cosine and
    /// sine tables have shape equal to a suffix of `self`'s shape (and are
    /// repeated within each pair).
    pub fn rotate_pairs(self, cos: &Rc<Tensor<T>>, sin: &Rc<Tensor<T>>) -> Result<Self> {
        let v = self.value();
        if cos.shape() != sin.shape() || !is_suffix(cos.shape(), v.shape()) || !cos.last_dim().is_multiple_of(2) {
            return Err(Error::dim("rotate_pairs", v.shape(), cos.shape()));
        }
        let s = cos.len();
        let mut data = vec![T::zero(); v.len()];
        for (xc, yc) in v.data().chunks(s).zip(data.chunks_mut(s)) {
            for p in (0..s).step_by(2) {
                let (x0, x1) = (xc[p], xc[p + 1]);
                yc[p] = x0 * cos.data()[p] - x1 * sin.data()[p];
                yc[p + 1] = x1 * cos.data()[p + 1] + x0 * sin.data()[p + 1];
            }
        }
        let out = Tensor::new(v.shape(), data)?;
        Ok(self.tape.push_op(
            out,
            Op::Rotate {
                a: self.id,
                cos: Rc::clone(cos),
                sin: Rc::clone(sin),
            },
            &[self.id],
        ))
    }

    /// Multiplies every block `self[i, ...]` by `s[i]`, where `s`'s shape is
    /// a prefix of `self`'s.
    pub fn scale_by(self, s: Self) -> Result<Self> {
        let a = self.value();
        let sv = s.value();
        if sv.ndim() > a.ndim() || a.shape()[..sv.ndim()] != *sv.shape() {
            return Err(Error::dim("scale_by", a.shape(), sv.shape()));
        }
        let inner = a.len() / sv.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * sv.data()[i / inner])
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push_op(out, Op::ScaleBy(self.id, s.id), &[self.id, s.id]))
    }
}

/// Row softmax of a plain tensor, stabilized by row-max subtraction.
pub(crate) fn softmax_rows<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let n = v.last_dim();
    let mut data = Vec::with_capacity(v.len());
    for row in v.data().chunks(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let start = data.len();
        let mut total = T::zero();
        for &x in row {
            let e = (x - max).exp();
            total = total + e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|e| *e = *e / total);
    }
    Tensor::new(v.shape(), data).expect("same shape")
}

//! Tape-based reverse-mode differentiation.
//!
//! Every primitive is recorded on an append-only tape with its forward value
//! computed eagerly. `backward` walks the tape in reverse and *emits new tape
//! nodes* for each adjoint, so a returned gradient is itself a differentiable
//! expression — calling `backward` on a function of a gradient yields
//! second-order derivatives (reverse-over-reverse). The attack objective
//! ∇ₓ‖∇_θ L(x) − g‖² needs exactly this.
//!
//! The primitive set is deliberately small and closed under differentiation:
//! the adjoint of every op is expressible in the same ops. Convolution is
//! lowered to a gather (im2col) plus a matmul, so its backward reduces to
//! matmuls and a scatter-add.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Recorded primitive. Parent node ids are stored inline; every parent id is
/// strictly smaller than the node's own id.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Reduce to a broadcast-compatible target shape.
    SumTo(usize, Vec<usize>),
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Sigmoid(usize),
    Reshape(usize),
    /// out[i] = x[idx[i]], with idx[i] < 0 reading as 0.0 (padding).
    Gather {
        x: usize,
        idx: Rc<Vec<i64>>,
    },
    /// out[idx[i]] += x[i]; the adjoint of Gather.
    ScatterAdd {
        x: usize,
        idx: Rc<Vec<i64>>,
    },
    /// Softmax over the last axis.
    Softmax(usize),
    /// Log-sum-exp over the last axis, keeping it as size 1.
    LogSumExp(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only recording of a computation. Cheap to clone (shared handle).
/// Confined to one thread; detached `Tensor` values move freely.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A value recorded on a tape: node id + tape handle.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current node count, usable as a truncation mark.
    pub fn checkpoint(&self) -> usize {
        self.len()
    }

    /// Drop all nodes recorded after `mark`. Vars pointing past the mark are
    /// invalidated; callers own that discipline.
    pub fn truncate(&self, mark: usize) {
        self.inner.borrow_mut().nodes.truncate(mark);
    }

    /// Record a constant/input value.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Record `op` (whose parent ids must already be on this tape), computing
    /// the forward value eagerly and rejecting non-finite results.
    pub fn record(&self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let tag = op_name(&op);
        if !value.all_finite() {
            return Err(Error::NonFinite { op: tag });
        }
        Ok(self.push(op, value))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let val = |id: usize| &inner.nodes[id].value;
        match *op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Add(a, b) => tensor::broadcast_apply("add", val(a), val(b), |x, y| x + y),
            Op::Sub(a, b) => tensor::broadcast_apply("sub", val(a), val(b), |x, y| x - y),
            Op::Mul(a, b) => tensor::broadcast_apply("mul", val(a), val(b), |x, y| x * y),
            Op::Scale(a, c) => Ok(val(a).map(|v| v * c)),
            Op::SumTo(a, ref target) => tensor::sum_to(val(a), target),
            Op::Matmul { a, b, ta, tb } => tensor::matmul(val(a), val(b), ta, tb),
            Op::Sigmoid(a) => Ok(val(a).map(sigmoid)),
            Op::Reshape(_) => unreachable!("reshape records its value directly"),
            Op::Gather { x, ref idx } => {
                let src = val(x);
                let mut data = vec![0.0; idx.len()];
                for (o, &i) in data.iter_mut().zip(idx.iter()) {
                    if i >= 0 {
                        *o = src.data()[i as usize];
                    }
                }
                // Shape is supplied by the typed wrappers via reshape; raw
                // gather yields a flat vector.
                Tensor::new(vec![idx.len()], data)
            }
            Op::ScatterAdd { x, ref idx } => unreachable!(
                "scatter_add records through record_scatter_add ({} {})",
                x,
                idx.len()
            ),
            Op::Softmax(a) => Ok(softmax_last_axis(val(a))),
            Op::LogSumExp(a) => Ok(logsumexp_last_axis(val(a))),
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

fn last_axis_rows(t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    let c = *shape.last().expect("last-axis op on scalar");
    (t.numel() / c, c)
}

fn softmax_last_axis(t: &Tensor) -> Tensor {
    let (rows, c) = last_axis_rows(t);
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        let row = &t.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - m).exp();
            denom += *o;
        }
        for o in &mut out[r * c..(r + 1) * c] {
            *o /= denom;
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

fn logsumexp_last_axis(t: &Tensor) -> Tensor {
    let (rows, c) = last_axis_rows(t);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &t.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out[r] = m + s.ln();
    }
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::new(shape, out).unwrap()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::SumTo(..) => "sum_to",
        Op::Matmul { .. } => "matmul",
        Op::Sigmoid(..) => "sigmoid",
        Op::Reshape(..) => "reshape",
        Op::Gather { .. } => "gather",
        Op::ScatterAdd { .. } => "scatter_add",
        Op::Softmax(..) => "softmax",
        Op::LogSumExp(..) => "logsumexp",
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Detached copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    fn check_mate(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.check_mate(other)?;
        self.tape.record(Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.check_mate(other)?;
        self.tape.record(Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.check_mate(other)?;
        self.tape.record(Op::Mul(self.id, other.id))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.tape.record(Op::Scale(self.id, c))
    }

    pub fn sum_to(&self, target: &[usize]) -> Result<Var> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        self.tape.record(Op::SumTo(self.id, target.to_vec()))
    }

    /// Sum over all elements, yielding a scalar.
    pub fn sum(&self) -> Result<Var> {
        self.sum_to(&[])
    }

    pub fn matmul(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        self.check_mate(other)?;
        self.tape.record(Op::Matmul {
            a: self.id,
            b: other.id,
            ta,
            tb,
        })
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.tape.record(Op::Sigmoid(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.tape.value_of(self.id).reshaped(shape)?;
        Ok(self.tape.push(Op::Reshape(self.id), value))
    }

    /// Gather by flat index table; negative indices read 0.0.
    pub fn gather(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::InvalidArgument(format!(
                "gather: index table has {} entries, out shape {:?} needs {}",
                idx.len(),
                out_shape,
                numel
            )));
        }
        let src_len = self.value().numel() as i64;
        if idx.iter().any(|&i| i >= src_len) {
            return Err(Error::InvalidArgument(
                "gather: index out of range".to_string(),
            ));
        }
        let flat = self.tape.record(Op::Gather {
            x: self.id,
            idx,
        })?;
        flat.reshape(out_shape)
    }

    /// Scatter-add by flat index table into a zeroed tensor of `out_shape`;
    /// negative indices drop their element. `idx` has one entry per input
    /// element.
    pub fn scatter_add(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Result<Var> {
        let value = self.value();
        if idx.len() != value.numel() {
            return Err(Error::InvalidArgument(format!(
                "scatter_add: index table has {} entries, input has {}",
                idx.len(),
                value.numel()
            )));
        }
        let mut out = Tensor::zeros(out_shape);
        let out_len = out.numel() as i64;
        for (&v, &i) in value.data().iter().zip(idx.iter()) {
            if i >= 0 {
                if i >= out_len {
                    return Err(Error::InvalidArgument(
                        "scatter_add: index out of range".to_string(),
                    ));
                }
                out.data_mut()[i as usize] += v;
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "scatter_add" });
        }
        Ok(self.tape.push(
            Op::ScatterAdd {
                x: self.id,
                idx,
            },
            out,
        ))
    }

    pub fn softmax(&self) -> Result<Var> {
        self.tape.record(Op::Softmax(self.id))
    }

    pub fn logsumexp(&self) -> Result<Var> {
        self.tape.record(Op::LogSumExp(self.id))
    }
}

/// d(output)/d(target) for each target. `output` must be scalar. Targets not
/// reachable from the output receive exact-zero gradients. The returned
/// gradients are tape expressions; with `create_graph` they are intended for
/// further differentiation (the flag documents intent — gradients are always
/// recorded).
pub fn backward(output: &Var, targets: &[Var], _create_graph: bool) -> Result<Vec<Var>> {
    let out_shape = output.shape();
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NotScalar(out_shape));
    }
    for t in targets {
        if !output.tape.same(&t.tape) {
            return Err(Error::TapeMismatch);
        }
    }
    let tape = &output.tape;
    let n = output.id + 1;

    // Reachability from the output, walking parents.
    let mut reachable = vec![false; n];
    reachable[output.id] = true;
    {
        let inner = tape.inner.borrow();
        for id in (0..n).rev() {
            if !reachable[id] {
                continue;
            }
            for p in parents(&inner.nodes[id].op) {
                reachable[p] = true;
            }
        }
    }

    let mut adj: Vec<Option<Var>> = vec![None; n];
    adj[output.id] = Some(tape.leaf(Tensor::ones(&out_shape)));

    for id in (0..n).rev() {
        if !reachable[id] {
            continue;
        }
        let Some(g) = adj[id].clone() else { continue };
        let op = tape.inner.borrow().nodes[id].op.clone();
        let node_var = Var {
            tape: tape.clone(),
            id,
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(tape, &mut adj, a, g.sum_to(&tape.shape_of(a))?)?;
                accumulate(tape, &mut adj, b, g.sum_to(&tape.shape_of(b))?)?;
            }
            Op::Sub(a, b) => {
                accumulate(tape, &mut adj, a, g.sum_to(&tape.shape_of(a))?)?;
                accumulate(tape, &mut adj, b, g.scale(-1.0)?.sum_to(&tape.shape_of(b))?)?;
            }
            Op::Mul(a, b) => {
                let av = var(tape, a);
                let bv = var(tape, b);
                accumulate(tape, &mut adj, a, g.mul(&bv)?.sum_to(&tape.shape_of(a))?)?;
                accumulate(tape, &mut adj, b, g.mul(&av)?.sum_to(&tape.shape_of(b))?)?;
            }
            Op::Scale(a, c) => {
                accumulate(tape, &mut adj, a, g.scale(c)?)?;
            }
            Op::SumTo(a, _) => {
                // Broadcast the adjoint back up to the input shape.
                let ones = tape.leaf(Tensor::ones(&tape.shape_of(a)));
                accumulate(tape, &mut adj, a, g.mul(&ones)?)?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let av = var(tape, a);
                let bv = var(tape, b);
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.matmul(&bv, false, true)?, av.matmul(&g, true, false)?),
                    (true, false) => (bv.matmul(&g, false, true)?, av.matmul(&g, false, false)?),
                    (false, true) => (g.matmul(&bv, false, false)?, g.matmul(&av, true, false)?),
                    (true, true) => (bv.matmul(&g, true, true)?, g.matmul(&av, true, true)?),
                };
                accumulate(tape, &mut adj, a, da)?;
                accumulate(tape, &mut adj, b, db)?;
            }
            Op::Sigmoid(a) => {
                // dx = g * y * (1 - y), with y this node's own output.
                let ones = tape.leaf(Tensor::ones(&node_var.shape()));
                let d = g.mul(&node_var.mul(&ones.sub(&node_var)?)?)?;
                accumulate(tape, &mut adj, a, d)?;
            }
            Op::Reshape(a) => {
                accumulate(tape, &mut adj, a, g.reshape(&tape.shape_of(a))?)?;
            }
            Op::Gather { x, idx } => {
                let d = g
                    .reshape(&[g.value().numel()])?
                    .scatter_add(idx, &tape.shape_of(x))?;
                accumulate(tape, &mut adj, x, d)?;
            }
            Op::ScatterAdd { x, idx } => {
                let xs = tape.shape_of(x);
                let d = g.gather(idx, &[xs.iter().product()])?.reshape(&xs)?;
                accumulate(tape, &mut adj, x, d)?;
            }
            Op::Softmax(a) => {
                // dz = s ⊙ (g − Σ_last(g ⊙ s))
                let mut keep = node_var.shape();
                *keep.last_mut().unwrap() = 1;
                let gs = g.mul(&node_var)?;
                let d = node_var.mul(&g.sub(&gs.sum_to(&keep)?)?)?;
                accumulate(tape, &mut adj, a, d)?;
            }
            Op::LogSumExp(a) => {
                let s = var(tape, a).softmax()?;
                accumulate(tape, &mut adj, a, g.mul(&s)?)?;
            }
        }
    }

    targets
        .iter()
        .map(|t| {
            if t.id < n {
                if let Some(g) = adj[t.id].clone() {
                    return Ok(g);
                }
            }
            Ok(tape.leaf(Tensor::zeros(&t.shape())))
        })
        .collect()
}

fn var(tape: &Tape, id: usize) -> Var {
    Var {
        tape: tape.clone(),
        id,
    }
}

fn accumulate(tape: &Tape, adj: &mut [Option<Var>], id: usize, contrib: Var) -> Result<()> {
    adj[id] = Some(match adj[id].take() {
        Some(existing) => existing.add(&contrib)?,
        None => contrib,
    });
    let _ = tape;
    Ok(())
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::SumTo(a, _)
        | Op::Sigmoid(a)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSumExp(a) => vec![a],
        Op::Matmul { a, b, .. } => vec![a, b],
        Op::Gather { x, .. } | Op::ScatterAdd { x, .. } => vec![x],
    }
}

/// Max relative error between the analytic gradient of a scalar function and
/// central finite differences. Independent oracle: the difference side never
/// touches `backward`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: eps must be > 0".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&tape, &xv)?;
        backward(&y, &[xv], false)?[0].value()
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        let y = f(&tape, &xv)?;
        let v = y.value();
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v.item())
    };
    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max((a - numeric).abs() / denom);
    }
    Ok(max_err)
}

/// Flat index table mapping im2col output positions to input positions
/// (−1 for zero padding). Rows are (n, oh, ow), columns (c, kh, kw).
pub fn im2col_indices(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Rc<Vec<i64>>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut idx = Vec::with_capacity(n * oh * ow * c * kh * kw);
    for img in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as i64 - pad as i64;
                            let ix = (x * stride + kx) as i64 - pad as i64;
                            idx.push(
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    ((img * c + ch) as i64 * h as i64 + iy) * w as i64 + ix
                                } else {
                                    -1
                                },
                            );
                        }
                    }
                }
            }
        }
    }
    (Rc::new(idx), oh, ow)
}

/// 2-D convolution, NCHW input, OIHW kernel, lowered to im2col + matmul.
/// Output shape: `[n, oc, (h+2p−kh)/s+1, (w+2p−kw)/s+1]`.
pub fn conv2d(x: &Var, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Result<Var> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let (idx, oh, ow) = im2col_indices(n, c, h, w, kh, kw, stride, pad);
    let cols = x.gather(idx, &[n * oh * ow, c * kh * kw])?;
    let wm = weight.reshape(&[oc, c * kh * kw])?;
    // [n*oh*ow, oc] -> [n, oc, oh, ow]
    let out = cols.matmul(&wm, false, true)?;
    let nhwc = out.reshape(&[n, oh, ow, oc])?;
    let perm = nhwc_to_nchw_indices(n, oh, ow, oc);
    let nchw = nhwc.gather(perm, &[n, oc, oh, ow])?;
    if bias.shape() != [oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: bias.shape(),
            rhs: vec![oc],
        });
    }
    nchw.add(&bias.reshape(&[oc, 1, 1])?)
}

fn nhwc_to_nchw_indices(n: usize, h: usize, w: usize, c: usize) -> Rc<Vec<i64>> {
    let mut idx = Vec::with_capacity(n * c * h * w);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    idx.push((((img * h + y) * w + x) * c + ch) as i64);
                }
            }
        }
    }
    Rc::new(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn scalar_add_records_value() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        assert_eq!(a.add(&b).unwrap().value().item(), 5.0);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let eye = tape.leaf(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a = tape.leaf(Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap());
        let r = eye.matmul(&a, false, false).unwrap();
        assert_eq!(r.value(), a.value());
    }

    #[test]
    fn conv_output_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let k = tape.leaf(Tensor::zeros(&[12, 3, 5, 5]));
        let b = tape.leaf(Tensor::zeros(&[12]));
        let y = conv2d(&x, &k, &b, 2, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 12, 16, 16]);
    }

    #[test]
    fn first_derivative_of_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = backward(&y, &[x], false).unwrap();
        assert_eq!(g[0].value().item(), 6.0);
    }

    #[test]
    fn second_derivative_of_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = backward(&y, &[x.clone()], true).unwrap();
        let gg = backward(&g[0], &[x], false).unwrap();
        assert_eq!(gg[0].value().item(), 2.0);
    }

    #[test]
    fn unreached_target_gets_exact_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = x.square().unwrap();
        let g = backward(&y, &[unused], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = x.scale(2.0).unwrap();
        assert!(matches!(
            backward(&y, &[x], false),
            Err(Error::NotScalar(_))
        ));
    }

    #[test]
    fn cross_tape_operands_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(
            a.add(&a),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -0.2, 1.5, 2.0]).unwrap();
        let err = grad_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[8], &mut rng);
        let err = grad_check(|_, v| v.sigmoid()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_cube() {
        // f(x) = sum(x^3), x = [1, 2] -> analytic [3, 12]
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|_, v| v.square()?.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = v.square().unwrap().mul(&v).unwrap().sum().unwrap();
        let g = backward(&y, &[v], false).unwrap()[0].value();
        assert!((g.data()[0] - 3.0).abs() < 1e-12);
        assert!((g.data()[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_matmul_squared() {
        // f = sum((A·B)^2) w.r.t. A on random 4x4 inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_tensor(&[4, 4], &mut rng);
        let b = rand_tensor(&[4, 4], &mut rng);
        let err = grad_check(
            |tape, v| {
                let bv = tape.leaf(b.clone());
                v.matmul(&bv, false, false)?.square()?.sum()
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_all_primitives_random_shapes() {
        // 20 seeds across every primitive that has a nontrivial derivative.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d1 = rng.random_range(2..6usize);
            let d2 = rng.random_range(2..6usize);
            let x = rand_tensor(&[d1, d2], &mut rng);
            let other = rand_tensor(&[d1, d2], &mut rng);
            let row = rand_tensor(&[d2], &mut rng);
            let mm = rand_tensor(&[d2, d1], &mut rng);

            let cases: Vec<(&str, Box<dyn Fn(&Tape, &Var) -> Result<Var>>)> = vec![
                ("add_broadcast", {
                    let row = row.clone();
                    Box::new(move |t: &Tape, v: &Var| {
                        v.add(&t.leaf(row.clone()))?.square()?.sum()
                    })
                }),
                ("sub", {
                    let o = other.clone();
                    Box::new(move |t: &Tape, v: &Var| v.sub(&t.leaf(o.clone()))?.square()?.sum())
                }),
                ("mul_broadcast", {
                    let row = row.clone();
                    Box::new(move |t: &Tape, v: &Var| {
                        v.mul(&t.leaf(row.clone()))?.square()?.sum()
                    })
                }),
                ("scale", Box::new(|_, v| v.scale(-1.7)?.square()?.sum())),
                ("sum_to", {
                    Box::new(move |_t: &Tape, v: &Var| {
                        let cols = v.shape()[1];
                        v.sum_to(&[cols])?.square()?.sum()
                    })
                }),
                ("matmul", {
                    let mm = mm.clone();
                    Box::new(move |t: &Tape, v: &Var| {
                        v.matmul(&t.leaf(mm.clone()), false, false)?.square()?.sum()
                    })
                }),
                ("matmul_tt", {
                    let mm = mm.clone();
                    Box::new(move |t: &Tape, v: &Var| {
                        t.leaf(mm.clone()).matmul(v, true, true)?.square()?.sum()
                    })
                }),
                ("sigmoid", Box::new(|_, v| v.sigmoid()?.square()?.sum())),
                ("reshape", {
                    Box::new(move |_t: &Tape, v: &Var| {
                        let n = v.value().numel();
                        v.reshape(&[n])?.square()?.sum()
                    })
                }),
                ("softmax", Box::new(|_, v| v.softmax()?.square()?.sum())),
                ("logsumexp", Box::new(|_, v| v.logsumexp()?.square()?.sum())),
                ("gather", {
                    Box::new(move |_t: &Tape, v: &Var| {
                        let n = v.value().numel();
                        let idx: Vec<i64> =
                            (0..n as i64).rev().chain(std::iter::once(-1)).collect();
                        v.reshape(&[n])?
                            .gather(Rc::new(idx), &[n + 1])?
                            .square()?
                            .sum()
                    })
                }),
                ("scatter_add", {
                    Box::new(move |_t: &Tape, v: &Var| {
                        let n = v.value().numel();
                        // Collide a few indices to exercise accumulation.
                        let idx: Vec<i64> = (0..n).map(|i| (i % (n / 2 + 1)) as i64).collect();
                        v.reshape(&[n])?
                            .scatter_add(Rc::new(idx), &[n / 2 + 1])?
                            .square()?
                            .sum()
                    })
                }),
            ];
            for (name, f) in cases {
                let err = grad_check(&*f, &x, 1e-5).unwrap();
                assert!(err < 1e-5, "{name} seed {seed}: err = {err}");
            }
        }
    }

    #[test]
    fn grad_check_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        // w.r.t. input
        let err = grad_check(
            |t, v| conv2d(v, &t.leaf(w.clone()), &t.leaf(b.clone()), 2, 1)?.square()?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input err = {err}");
        // w.r.t. weights
        let err = grad_check(
            |t, v| conv2d(&t.leaf(x.clone()), v, &t.leaf(b.clone()), 2, 1)?.square()?.sum(),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "weight err = {err}");
    }

    #[test]
    fn second_order_gradient_norm_matches_finite_differences() {
        // g(x) = ||∇ₓ f(x) − c||² with f = sum(sigmoid(x·m)²); check ∇ₓ g
        // against finite differences of g itself.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&[3, 3], &mut rng);
        let m = rand_tensor(&[3, 3], &mut rng);
        let c = rand_tensor(&[3, 3], &mut rng);

        let g_of = |xt: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let f = xv
                .matmul(&tape.leaf(m.clone()), false, false)?
                .sigmoid()?
                .square()?
                .sum()?;
            let grad = backward(&f, &[xv], true)?.remove(0);
            let diff = grad.sub(&tape.leaf(c.clone()))?;
            Ok(diff.square()?.sum()?.value().item())
        };

        // Analytic ∇g via reverse-over-reverse.
        let tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let f = xv
            .matmul(&tape.leaf(m.clone()), false, false)
            .unwrap()
            .sigmoid()
            .unwrap()
            .square()
            .unwrap()
            .sum()
            .unwrap();
        let grad = backward(&f, &[xv.clone()], true).unwrap().remove(0);
        let gexpr = grad
            .sub(&tape.leaf(c.clone()))
            .unwrap()
            .square()
            .unwrap()
            .sum()
            .unwrap();
        let analytic = backward(&gexpr, &[xv], false).unwrap()[0].value();

        let eps = 1e-5;
        for i in 0..x0.numel() {
            let mut hi = x0.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x0.clone();
            lo.data_mut()[i] -= eps;
            let numeric = (g_of(&hi).unwrap() - g_of(&lo).unwrap()) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3, "element {i}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&[4], &mut rng);
        let (a, b) = (1.7, -0.4);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let f = x.sigmoid().unwrap().sum().unwrap();
        let h = x.square().unwrap().sum().unwrap();
        let combo = f.scale(a).unwrap().add(&h.scale(b).unwrap()).unwrap();
        let gc = backward(&combo, &[x.clone()], false).unwrap()[0].value();
        let gf = backward(&f, &[x.clone()], false).unwrap()[0].value();
        let gh = backward(&h, &[x], false).unwrap()[0].value();
        for i in 0..x0.numel() {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            let rel = (gc.data()[i] - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-12, "i={i}");
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[4, 4], &mut rng));
            let w = tape.leaf(rand_tensor(&[4, 4], &mut rng));
            let y = x
                .matmul(&w, false, false)
                .unwrap()
                .sigmoid()
                .unwrap()
                .square()
                .unwrap()
                .sum()
                .unwrap();
            let g = backward(&y, &[x], false).unwrap()[0].value();
            (y.value(), g)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn checkpoint_truncate_bounds_tape() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let mark = tape.checkpoint();
        let _ = x.square().unwrap();
        assert!(tape.len() > mark);
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
    }
}

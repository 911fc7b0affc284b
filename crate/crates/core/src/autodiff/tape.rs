//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one node per forward operation. Nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep. Adjoints of nodes with more
//! than one consumer accumulate by addition.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable tensor, dense from zero in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Pointwise operations available through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    Sigmoid,
    Add,
    Hadamard,
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Mse(Var, Var),
    /// `weight * vector` where `weight` is a one-element node.
    Scale { vector: Var, weight: Var },
    /// Forward value is `vector`; backward behaves like [`OpKind::Scale`].
    StraightThrough { vector: Var, weight: Var },
    /// Forward value is `value`; the incoming gradient goes to `surrogate`.
    Detour { value: Var, surrogate: Var },
    Index(Var, usize),
    Dot(Var, Var),
    Mean(Vec<Var>),
}

impl OpKind {
    /// Nodes this operation reads.
    pub fn parents(&self) -> Vec<Var> {
        use OpKind::*;
        match self {
            Input | Param(_) => vec![],
            Tanh(a) | Sigmoid(a) | Softmax(a) | Index(a, _) => vec![*a],
            MatMul(a, b) | Add(a, b) | Hadamard(a, b) | Mse(a, b) | Dot(a, b) => vec![*a, *b],
            Scale { vector, weight } | StraightThrough { vector, weight } => {
                vec![*vector, *weight]
            }
            Concat(v) | Mean(v) => v.clone(),
            Detour { value, surrogate } => vec![*value, *surrogate],
        }
    }
}

#[derive(Debug)]
pub struct TapeNode<'a, T: Scalar> {
    pub op: OpKind,
    pub value: Cow<'a, Tensor<T>>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over all parameters.
    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .map(|g| g.sum_squares())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Adds `other` into `self`; both must cover the same parameters.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::dim("gradients", "parameter sets differ"));
        }
        for (id, g) in &other.grads {
            let mine = self
                .grads
                .get_mut(id)
                .ok_or_else(|| Error::dim("gradients", format!("missing {id:?}")))?;
            if mine.shape() != g.shape() {
                return Err(Error::dim("gradients", format!("shape of {id:?}")));
            }
            mine.add_assign(g);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.grads.values_mut().for_each(|g| g.scale_in_place(factor));
    }
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<TapeNode<'a, T>>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

/// Views a tensor as a matrix: vectors are rows when `row` is set, columns otherwise.
fn as_matrix<T: Scalar>(t: &Tensor<T>, row: bool) -> Option<(usize, usize)> {
    match t.shape() {
        [n] if row => Some((1, *n)),
        [n] => Some((*n, 1)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Plain row-major product of an `r x k` and a `k x c` buffer.
fn gemm<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode<'a, T>] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: OpKind, value: Cow<'a, Tensor<T>>) -> Var {
        self.nodes.push(TapeNode { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, op: OpKind, value: Tensor<T>) -> Var {
        self.push(op, Cow::Owned(value))
    }

    /// Records a constant input; it receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_owned(OpKind::Input, value)
    }

    /// Records a borrowed constant input.
    pub fn input_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(OpKind::Input, Cow::Borrowed(value))
    }

    /// Registers a trainable tensor. Each id may be registered once per tape.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor<T>) -> Var {
        debug_assert!(self.params.iter().all(|(p, _)| *p != id));
        let v = self.push(OpKind::Param(id), Cow::Borrowed(value));
        self.params.push((id, v));
        v
    }

    /// Matrix product. Rank-1 left operands act as rows and rank-1 right
    /// operands as columns; the corresponding unit extent is dropped from the
    /// result. Two vectors are rejected (use [`Tape::dot`]).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_vector() && tb.is_vector() {
            return Err(Error::dim("matmul", "both operands are vectors"));
        }
        let (r, k) = as_matrix(ta, true).ok_or_else(|| shape_err("matmul", ta, tb))?;
        let (k2, c) = as_matrix(tb, false).ok_or_else(|| shape_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = gemm(ta.as_slice(), tb.as_slice(), r, k, c);
        let shape = match (ta.is_vector(), tb.is_vector()) {
            (true, false) => vec![c],
            (false, true) => vec![r],
            _ => vec![r, c],
        };
        Ok(self.push_owned(OpKind::MatMul(a, b), Tensor::from_raw(shape, out)))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Tanh | Elementwise::Sigmoid => 1,
            Elementwise::Add | Elementwise::Hadamard => 2,
        };
        if args.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Hadamard => self.hadamard(args[0], args[1]),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        kind: OpKind,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .as_slice()
            .iter()
            .zip(tb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push_owned(kind, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, OpKind::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, OpKind::Hadamard(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push_owned(OpKind::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_owned(OpKind::Sigmoid(a), out)
    }

    /// Softmax over a vector, shifted by its maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_vector() {
            return Err(Error::dim("softmax", format!("expected vector, got {:?}", t.shape())));
        }
        let out = Tensor::from_raw(t.shape().to_vec(), softmax(t.as_slice()));
        Ok(self.push_owned(OpKind::Softmax(a), out))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(Error::dim("concat", format!("non-vector part {:?}", t.shape())));
            }
            data.extend_from_slice(t.as_slice());
        }
        let n = data.len();
        Ok(self.push_owned(OpKind::Concat(parts.to_vec()), Tensor::from_raw(vec![n], data)))
    }

    /// Mean squared error between two equally shaped tensors, as a `[1]` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("mse", tp, tt));
        }
        let k = T::lit(tp.len() as f64);
        let s: T = tp
            .as_slice()
            .iter()
            .zip(tt.as_slice())
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum();
        Ok(self.push_owned(OpKind::Mse(pred, target), Tensor::from_raw(vec![1], vec![s / k])))
    }

    fn check_weight(&self, op: &'static str, weight: Var) -> Result<T> {
        let w = self.value(weight);
        if w.len() != 1 {
            return Err(Error::dim(op, format!("weight must have one element, got {:?}", w.shape())));
        }
        Ok(w.item())
    }

    /// `weight * vector` with a one-element `weight`.
    pub fn scale(&mut self, vector: Var, weight: Var) -> Result<Var> {
        let w = self.check_weight("scale", weight)?;
        let out = self.value(vector).map(|x| x * w);
        Ok(self.push_owned(OpKind::Scale { vector, weight }, out))
    }

    /// Passes `vector` through unchanged while routing gradients as if the
    /// result were `weight * vector`.
    pub fn straight_through(&mut self, vector: Var, weight: Var) -> Result<Var> {
        self.check_weight("straight_through", weight)?;
        let out = self.value(vector).clone();
        Ok(self.push_owned(OpKind::StraightThrough { vector, weight }, out))
    }

    /// Forwards the value of `value` and sends the whole gradient to
    /// `surrogate`, which must have the same shape.
    pub fn detour(&mut self, value: Var, surrogate: Var) -> Result<Var> {
        let (a, b) = (self.value(value), self.value(surrogate));
        if a.shape() != b.shape() {
            return Err(Error::dim("detour", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.clone();
        Ok(self.push_owned(OpKind::Detour { value, surrogate }, out))
    }

    /// Element `k` of a vector as a `[1]` node.
    pub fn index(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_vector() || k >= t.len() {
            return Err(Error::dim("index", format!("{k} out of {:?}", t.shape())));
        }
        let out = Tensor::from_raw(vec![1], vec![t.as_slice()[k]]);
        Ok(self.push_owned(OpKind::Index(a, k), out))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("dot", ta, tb));
        }
        let s: T = ta.as_slice().iter().zip(tb.as_slice()).map(|(&x, &y)| x * y).sum();
        Ok(self.push_owned(OpKind::Dot(a, b), Tensor::from_raw(vec![1], vec![s])))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero parts".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(shape_err("mean", &acc, t));
            }
            acc.add_assign(t);
        }
        acc.scale_in_place(T::one() / T::lit(parts.len() as f64));
        Ok(self.push_owned(OpKind::Mean(parts.to_vec()), acc))
    }

    /// Reverse sweep from a one-element `loss` node.
    ///
    /// Returns a gradient for every parameter registered on this tape; a
    /// parameter that does not influence the loss gets zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", lt.shape())));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_raw(lt.shape().to_vec(), vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            for (parent, contrib) in self.local_grads(&node.op, &node.value, &g) {
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Parameters keep their adjoint for collection below.
            if matches!(node.op, OpKind::Param(_)) {
                adj[i] = Some(g);
            }
        }

        let mut grads = BTreeMap::new();
        for &(id, var) in &self.params {
            let g = match adj.get_mut(var.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(var).shape()),
            };
            grads.insert(id, g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &OpKind, out: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        use OpKind::*;
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            Tensor::from_raw(
                a.shape().to_vec(),
                a.as_slice().iter().zip(g.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        match op {
            Input | Param(_) => vec![],
            MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k) = as_matrix(ta, true).expect("checked in forward");
                let (_, c) = as_matrix(tb, false).expect("checked in forward");
                // dA = G * B^T, dB = A^T * G
                let gs = g.as_slice();
                let (av, bv) = (ta.as_slice(), tb.as_slice());
                let mut da = vec![T::zero(); r * k];
                for i in 0..r {
                    for p in 0..k {
                        let mut s = T::zero();
                        for j in 0..c {
                            s = s + gs[i * c + j] * bv[p * c + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![T::zero(); k * c];
                for i in 0..r {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == T::zero() {
                            continue;
                        }
                        for j in 0..c {
                            db[p * c + j] = db[p * c + j] + aip * gs[i * c + j];
                        }
                    }
                }
                vec![
                    (*a, Tensor::from_raw(ta.shape().to_vec(), da)),
                    (*b, Tensor::from_raw(tb.shape().to_vec(), db)),
                ]
            }
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![(*a, zip(tb, &|x, y| x * y)), (*b, zip(ta, &|x, y| x * y))]
            }
            Tanh(a) => vec![(*a, zip(out, &|y, gy| gy * (T::one() - y * y)))],
            Sigmoid(a) => vec![(*a, zip(out, &|y, gy| gy * y * (T::one() - y)))],
            Softmax(a) => {
                let dotp: T = out.as_slice().iter().zip(g.as_slice()).map(|(&y, &gy)| y * gy).sum();
                vec![(*a, zip(out, &|y, gy| y * (gy - dotp)))]
            }
            Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.value(*p).len();
                        let slice = g.as_slice()[offset..offset + n].to_vec();
                        offset += n;
                        (*p, Tensor::from_raw(vec![n], slice))
                    })
                    .collect()
            }
            Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let k = T::lit(tp.len() as f64);
                let two = T::lit(2.0);
                let gy = g.item();
                let dp: Vec<T> = tp
                    .as_slice()
                    .iter()
                    .zip(tt.as_slice())
                    .map(|(&x, &y)| two * (x - y) / k * gy)
                    .collect();
                let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                vec![
                    (*p, Tensor::from_raw(tp.shape().to_vec(), dp)),
                    (*t, Tensor::from_raw(tt.shape().to_vec(), dt)),
                ]
            }
            Scale { vector, weight } | StraightThrough { vector, weight } => {
                let tv = self.value(*vector);
                let w = self.value(*weight).item();
                let dw: T = tv.as_slice().iter().zip(g.as_slice()).map(|(&x, &y)| x * y).sum();
                vec![
                    (*vector, g.map(|y| y * w)),
                    (*weight, Tensor::from_raw(vec![1], vec![dw])),
                ]
            }
            Detour { surrogate, .. } => vec![(*surrogate, g.clone())],
            Index(a, k) => {
                let ta = self.value(*a);
                let mut d = vec![T::zero(); ta.len()];
                d[*k] = g.item();
                vec![(*a, Tensor::from_raw(ta.shape().to_vec(), d))]
            }
            Dot(a, b) => {
                let gy = g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![(*a, tb.map(|x| x * gy)), (*b, ta.map(|x| x * gy))]
            }
            Mean(parts) => {
                let inv = T::one() / T::lit(parts.len() as f64);
                let share = g.map(|y| y * inv);
                parts.iter().map(|p| (*p, share.clone())).collect()
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax of a non-empty slice.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

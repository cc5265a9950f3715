//! Reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and enough
//! saved state to compute the vector-Jacobian product. Nodes are only ever
//! appended, so inputs always precede the ops that consume them and the
//! backward sweep is a single reverse pass over the node list.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter-free forward op kinds, for uniform dispatch through
/// [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Concat {
        axis: usize,
    },
    Relu,
    Softmax,
    /// Inputs: x, gamma, beta. Normalizes over the last axis.
    LayerNorm,
    MaxOverAxis {
        axis: usize,
    },
    MeanOverAxis {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Abs,
    Sum,
    Mean,
    Scale {
        factor: f64,
    },
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>, usize),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaxAxis { .. } => "max_over_axis",
            Op::MeanAxis { .. } => "mean_over_axis",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros if `var` does not
    /// reach the loss.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_nonzero(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::ZeroExtent {
            op,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// How an operand of shape `inp` maps onto the broadcast output `out`.
enum Bcast {
    Same,
    /// operand repeats with period `n` over the output
    Suffix(usize),
    Strided(Vec<usize>),
}

impl Bcast {
    fn new(inp: &[usize], out: &[usize]) -> Self {
        let n_in: usize = inp.iter().product();
        let n_out: usize = out.iter().product();
        if n_in == n_out {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = {
            let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
            inp[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Suffix(n_in.max(1));
        }
        let offset = out.len() - inp.len();
        let mut strides = vec![0; out.len()];
        let mut s = 1;
        for i in (0..inp.len()).rev() {
            strides[offset + i] = if inp[i] == 1 { 0 } else { s };
            s *= inp[i];
        }
        Bcast::Strided(strides)
    }
}

/// Flat operand index for each flat output index.
enum IndexMap {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Table(v) => v[i],
        }
    }
}

fn bcast_indices(map: &Bcast, out: &[usize]) -> IndexMap {
    match map {
        Bcast::Same => IndexMap::Identity,
        Bcast::Suffix(n) => IndexMap::Modulo(*n),
        Bcast::Strided(strides) => {
            let total: usize = out.iter().product();
            let mut idx = Vec::with_capacity(total);
            let mut counter = vec![0usize; out.len()];
            let mut flat = 0usize;
            for _ in 0..total {
                idx.push(flat);
                for d in (0..out.len()).rev() {
                    counter[d] += 1;
                    flat += strides[d];
                    if counter[d] < out[d] {
                        break;
                    }
                    flat -= strides[d] * out[d];
                    counter[d] = 0;
                }
            }
            IndexMap::Table(idx)
        }
    }
}

fn permute_index_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    // out[j] = in[src[j]]
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut src = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        src.push(flat);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, src)
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Dispatch a parameter-free op by kind.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidShape {
                    op,
                    detail: format!("expected {} inputs, got {}", n, inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::BatchMatMul => {
                arity(2, "batch_matmul")?;
                self.batch_matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2, "sub")?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Relu => {
                arity(1, "relu")?;
                self.relu(inputs[0])
            }
            OpKind::Softmax => {
                arity(1, "softmax")?;
                self.softmax(inputs[0])
            }
            OpKind::LayerNorm => {
                arity(3, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            OpKind::MaxOverAxis { axis } => {
                arity(1, "max_over_axis")?;
                self.max_over_axis(inputs[0], *axis)
            }
            OpKind::MeanOverAxis { axis } => {
                arity(1, "mean_over_axis")?;
                self.mean_over_axis(inputs[0], *axis)
            }
            OpKind::Slice { axis, start, len } => {
                arity(1, "slice")?;
                self.slice(inputs[0], *axis, *start, *len)
            }
            OpKind::Reshape { shape } => {
                arity(1, "reshape")?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Permute { perm } => {
                arity(1, "permute")?;
                self.permute(inputs[0], perm)
            }
            OpKind::Abs => {
                arity(1, "abs")?;
                self.abs(inputs[0])
            }
            OpKind::Sum => {
                arity(1, "sum")?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                arity(1, "mean")?;
                self.mean(inputs[0])
            }
            OpKind::Scale { factor } => {
                arity(1, "scale")?;
                self.scale(inputs[0], *factor)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        check_nonzero("matmul", &sa)?;
        check_nonzero("matmul", &sb)?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        check_nonzero("batch_matmul", &sa)?;
        check_nonzero("batch_matmul", &sb)?;
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                k as isize,
                1,
                &bv[i * k * n..],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_nonzero(name, &sa)?;
        check_nonzero(name, &sb)?;
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let ia = bcast_indices(&Bcast::new(&sa, &out_shape), &out_shape);
        let ib = bcast_indices(&Bcast::new(&sb, &out_shape), &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: usize = out_shape.iter().product();
        let data = (0..total).map(|i| f(av[ia.get(i)], bv[ib.get(i)])).collect();
        Ok((Tensor::new(out_shape, data)?, self.rg(&[a, b])))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::from_f64(factor);
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&e| e * c).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Scale(x, c), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, base),
            });
        }
        let mut total_axis = 0;
        for v in inputs {
            let s = self.shape(*v);
            check_nonzero("concat", s)?;
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("relu", t.shape())?;
        let v = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&e| if e > T::zero() { e } else { T::zero() })
                .collect(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Relu(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("softmax", t.shape())?;
        if t.ndim() == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                detail: "scalar input".into(),
            });
        }
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_nonzero("layer_norm", &sx)?;
        let n = *sx.last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64(LN_EPS);
        let nt = T::from_f64(n as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Max over one axis (removed from the output). Ties resolve to the
    /// first index in memory order.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_nonzero("max_over_axis", &s)?;
        if axis >= s.len() {
            return Err(Error::InvalidShape {
                op: "max_over_axis",
                detail: format!("axis {} out of range for {:?}", axis, s),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            let mut best: Vec<(T, usize)> = (0..inner).map(|i| (xv[base + i], base + i)).collect();
            for l in 1..len {
                let row = base + l * inner;
                for (i, slot) in best.iter_mut().enumerate() {
                    let e = xv[row + i];
                    if e > slot.0 {
                        *slot = (e, row + i);
                    }
                }
            }
            for (v, ix) in best {
                out.push(v);
                argmax.push(ix);
            }
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, argmax }, rg))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_nonzero("mean_over_axis", &s)?;
        if axis >= s.len() {
            return Err(Error::InvalidShape {
                op: "mean_over_axis",
                detail: format!("axis {} out of range for {:?}", axis, s),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let lt = T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[row + i];
                }
            }
        }
        for e in out.iter_mut() {
            *e /= lt;
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, outer, len, inner }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_nonzero("slice", &s)?;
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("range {}..{} on axis {} invalid for {:?}", start, start + len, axis, s),
            });
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                x,
                outer,
                full,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("reshape", shape)?;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let v = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_nonzero("permute", &s)?;
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm
                .iter()
                .all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("permutation {:?} invalid for {:?}", perm, s),
            });
        }
        let (out_shape, src) = permute_index_map(&s, perm);
        let xv = self.value(x).data();
        let data = src.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("need at least 2 axes, got {:?}", self.shape(x)),
            });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("abs", t.shape())?;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|e| e.abs()).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Abs(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("sum", t.shape())?;
        let s = t.data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_nonzero("mean", t.shape())?;
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Row lookup: `table` is `[V, d]`, result is `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("table must be 2-D, got {:?}", s),
            });
        }
        if ids.is_empty() {
            return Err(Error::ZeroExtent {
                op: "gather",
                shape: vec![0, s[1]],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("id {} out of range for table of {} rows", bad, s[0]),
            });
        }
        let d = s[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("l1_loss", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let a = self.abs(d)?;
        self.mean(a)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward: loss does not depend on any trainable tensor; all grads are zero");
        } else {
            grads[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                self.node_backward(node, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn node_backward(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // ga += g · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        bv,
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb += aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..],
                            n as isize,
                            1,
                            &bv[i * k * n..],
                            1,
                            n as isize,
                            T::one(),
                            &mut ga[i * m * k..],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * m * k..],
                            1,
                            k as isize,
                            &g[i * m * n..],
                            n as isize,
                            1,
                            T::one(),
                            &mut gb[i * k * n..],
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let ia = bcast_indices(&Bcast::new(self.shape(*a), out_shape), out_shape);
                let ib = bcast_indices(&Bcast::new(self.shape(*b), out_shape), out_shape);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &e) in g.iter().enumerate() {
                        ga[ia.get(i)] += e;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &e) in g.iter().enumerate() {
                        gb[ib.get(i)] += sign * e;
                    }
                }
            }
            Op::Mul(a, b) => {
                let ia = bcast_indices(&Bcast::new(self.shape(*a), out_shape), out_shape);
                let ib = bcast_indices(&Bcast::new(self.shape(*b), out_shape), out_shape);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &e) in g.iter().enumerate() {
                        ga[ia.get(i)] += e * bv[ib.get(i)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &e) in g.iter().enumerate() {
                        gb[ib.get(i)] += e * av[ia.get(i)];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &e) in gx.iter_mut().zip(g) {
                        *d += e * *c;
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if let Some(gv) = self.acc(grads, *v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *out_shape.last().unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *out_shape.last().unwrap();
                let rows = xhat.len() / n;
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nt = T::from_f64(n as f64);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + j];
                        }
                        mean_d /= nt;
                        mean_dx /= nt;
                        for j in 0..n {
                            let d = g[r * n + j] * gam[j];
                            gx[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let lt = T::from_f64(*len as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let row = (o * len + l) * inner;
                            for i in 0..*inner {
                                gx[row + i] += g[o * inner + i] / lt;
                            }
                        }
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                full,
                start,
                len,
                inner,
            } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &e) in gx.iter_mut().zip(g) {
                        *d += e;
                    }
                }
            }
            Op::Permute(x, perm) => {
                let (_, src) = permute_index_map(self.shape(*x), perm);
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &s) in src.iter().enumerate() {
                        gx[s] += g[i];
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        let s = if xv[i] > T::zero() {
                            T::one()
                        } else if xv[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[i] += g[i] * s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).to_f64_vec(), vec![3.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_over_axis_hand_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 5.0, 7.0, 2.0, 3.0, 3.0]));
        let m = tape.max_over_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).to_f64_vec(), vec![7.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn zero_extent_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(tape.relu(a), Err(Error::ZeroExtent { .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn l1_subgradient_sign() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(5.0));
        let two = tape.constant(Tensor::scalar(2.0));
        let l = tape.l1_loss(x, two).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let two = tape.constant(Tensor::scalar(2.0));
        let l = tape.l1_loss(x, two).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[0.0]);
    }

    #[test]
    fn l1_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[2], &[0.0, 2.0]));
        let q = tape.constant(t(&[2], &[1.0, 0.0]));
        let l = tape.l1_loss(p, q).unwrap();
        assert_eq!(tape.value(l).data(), &[1.5]);

        let p = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let q = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let l = tape.l1_loss(p, q).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
        let l = tape.l1_loss(p, p).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);

        let r = tape.constant(t(&[3, 2], &[0.0; 6]));
        assert!(tape.l1_loss(p, r).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.param(t(&[2], &[1.0, 1.0]));
        let l = tape.mul(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(!g.reached(y));
        assert_eq!(g.get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_row_and_middle() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 2, 3], &[0.0; 12]));
        let bias = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let mid = tape.param(t(&[2, 1, 3], &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]));
        let s = tape.add(a, bias).unwrap();
        let s = tape.add(s, mid).unwrap();
        assert_eq!(
            tape.value(s).to_f64_vec(),
            vec![11., 12., 13., 11., 12., 13., 21., 22., 23., 21., 22., 23.]
        );
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(bias).to_f64_vec(), vec![4.0, 4.0, 4.0]);
        assert_eq!(g.get(mid).to_f64_vec(), vec![2.0; 6]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}

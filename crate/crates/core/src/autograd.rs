//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape; node ids are assigned in
//! creation order, so inputs always precede outputs and the reverse sweep in
//! [`Tape::backward`] visits each node once in a fixed order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Boolean attention mask, `true` where a query may attend to a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(Error::Dimension {
                op: "mask",
                lhs: vec![queries, keys],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            queries,
            keys,
            allowed,
        })
    }

    /// Causal mask for `n_new` queries over `n_cache` cached keys followed by
    /// the `n_new` new keys. Row `i` sees every cached key and new keys `0..=i`.
    pub fn causal_with_cache(n_new: usize, n_cache: usize) -> Self {
        let keys = n_cache + n_new;
        let allowed = (0..n_new)
            .flat_map(|i| (0..keys).map(move |j| j <= n_cache + i))
            .collect();
        Self {
            queries: n_new,
            keys,
            allowed,
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.keys..(query + 1) * self.keys]
    }

    /// Additive form: `0` where allowed, `-inf` where masked.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data).expect("mask shape")
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor<T>),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    ConcatGroups {
        a: usize,
        b: usize,
        groups: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<T>,
        spec: AttnSpec,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy)]
struct AttnSpec {
    groups: usize,
    heads: usize,
    queries: usize,
    keys: usize,
    width: usize,
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    dot_products: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            dot_products: Cell::new(0),
        }
    }

    /// Number of query·key products computed by attention on this tape.
    pub fn dot_products(&self) -> u64 {
        self.dot_products.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
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

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gather rows of `table: [V×d]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[u32]) -> Result<Var<'t, T>> {
        let t = table.value();
        let (v, d) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            table.requires_grad(),
        ))
    }

    /// Concatenate two row-blocked tensors group by group: `a: [g·m×d]` and
    /// `b: [g·n×d]` give `[g·(m+n)×d]` where each group holds its `a` rows
    /// followed by its `b` rows.
    pub fn concat_groups<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
        let (av, bv) = (a.value(), b.value());
        let (ar, ad) = av.dims2()?;
        let (br, bd) = bv.dims2()?;
        if ad != bd || groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(Error::Dimension {
                op: "concat_groups",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, n) = (ar / groups, br / groups);
        let mut out = Vec::with_capacity((ar + br) * ad);
        for g in 0..groups {
            out.extend_from_slice(&av.data()[g * m * ad..(g + 1) * m * ad]);
            out.extend_from_slice(&bv.data()[g * n * ad..(g + 1) * n * ad]);
        }
        let out = Tensor::new(vec![ar + br, ad], out)?;
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.push(out, Op::ConcatGroups { a: a.id, b: b.id, groups }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [g·n×d]`, `k, v: [g·m×d]` for `g` independent groups; `mask` is
    /// `n×m` and shared by every group and head. Masked keys get zero weight,
    /// which is the `-inf` additive mask evaluated exactly. Adds
    /// `g · heads · n · m` to the tape's dot-product counter.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        mask: &Mask,
        groups: usize,
        heads: usize,
    ) -> Result<Var<'t, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (qr, width) = qv.dims2()?;
        let (kr, kd) = kv.dims2()?;
        let (vr, vd) = vv.dims2()?;
        let shape_err = || Error::Dimension {
            op: "attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        };
        if kd != width || vd != width || kr != vr || groups == 0 || heads == 0 || width % heads != 0 {
            return Err(shape_err());
        }
        if qr != groups * mask.queries || kr != groups * mask.keys {
            return Err(shape_err());
        }
        let spec = AttnSpec {
            groups,
            heads,
            queries: mask.queries,
            keys: mask.keys,
            width,
        };
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), mask, spec);
        self.dot_products
            .set(self.dot_products.get() + (groups * heads * spec.queries * spec.keys) as u64);
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let out = Tensor::new(vec![qr, width], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                probs,
                spec,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mut send = |target: usize, g: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            backward_node(&nodes, node, &upstream, &mut send)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        tensor::matmul_nt(a.data(), b.data(), m, k, n, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, out, Op::MatMulNT(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    /// Adds a `[c]` row vector to every row of a `[r×c]` tensor.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), bias.value());
        let (_, c) = a.dims2()?;
        if b.len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + b.data()[i % c])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(self, factor: Tensor<T>) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape() != factor.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: a.shape().to_vec(),
                rhs: factor.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(factor.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(out, Op::MulConst(self.id, factor)))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * factor);
        self.unary(out, Op::Scale(self.id, factor))
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(out, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    /// Layer normalisation over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let cols = *x.shape().last().ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if cols == 0 || g.len() != cols || b.len() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (out, xhat, inv_std) = tensor::layer_norm_forward(x.data(), cols, g.data(), b.data(), eps);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        Ok(self.unary(out, Op::Softmax { x: self.id, axis }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self: [t×V]`.
    pub fn cross_entropy(self, targets: &[u32]) -> Result<Var<'t, T>> {
        let logits = self.value();
        let (t, v) = logits.dims2()?;
        if t != targets.len() || t == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = logits.data().to_vec();
        softmax_rows(&mut probs, v);
        let mut total = T::zero();
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt as usize >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: tgt as usize,
                    size: v,
                });
            }
            total -= tensor::log_softmax_at(logits.row(i), tgt as usize);
        }
        let loss = Tensor::scalar(total / T::lit(t as f64));
        Ok(self.unary(
            loss,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    let rows = data.len() / cols;
    tensor::softmax_strided(data, rows, cols, 1);
}

fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], mask: &Mask, s: AttnSpec) -> (Vec<T>, Vec<T>) {
    let dh = s.width / s.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); s.groups * s.queries * s.width];
    let mut probs = vec![T::zero(); s.groups * s.heads * s.queries * s.keys];
    for g in 0..s.groups {
        for h in 0..s.heads {
            let col = h * dh;
            for i in 0..s.queries {
                let qrow = (g * s.queries + i) * s.width + col;
                let qi = &q[qrow..qrow + dh];
                let p = &mut probs[((g * s.heads + h) * s.queries + i) * s.keys..][..s.keys];
                let allowed = mask.row(i);
                let mut max = T::neg_infinity();
                for j in 0..s.keys {
                    if allowed[j] {
                        let krow = (g * s.keys + j) * s.width + col;
                        let score = tensor::dot(qi, &k[krow..krow + dh]) * scale;
                        p[j] = score;
                        max = max.max(score);
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for j in 0..s.keys {
                    if allowed[j] {
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        total += e;
                    }
                }
                let o = &mut out[qrow..qrow + dh];
                for j in 0..s.keys {
                    if allowed[j] {
                        p[j] = p[j] / total;
                        let vrow = (g * s.keys + j) * s.width + col;
                        for (oc, vc) in o.iter_mut().zip(&v[vrow..vrow + dh]) {
                            *oc += p[j] * *vc;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    up: &Tensor<T>,
    send: &mut impl FnMut(usize, Tensor<T>),
) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    let like = |id: usize, data: Vec<T>| Tensor::new(val(id).shape().to_vec(), data);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            if needs(*a) {
                let mut ga = vec![T::zero(); m * k];
                tensor::matmul_nt(up.data(), val(*b).data(), m, n, k, &mut ga);
                send(*a, like(*a, ga)?);
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); k * n];
                tensor::matmul_tn(val(*a).data(), up.data(), m, k, n, &mut gb);
                send(*b, like(*b, gb)?);
            }
        }
        Op::MatMulNT(a, b) => {
            // out = a·bᵀ, a: [m×k], b: [n×k]
            let (m, k) = val(*a).dims2()?;
            let (n, _) = val(*b).dims2()?;
            if needs(*a) {
                let mut ga = vec![T::zero(); m * k];
                tensor::matmul_nn(up.data(), val(*b).data(), m, n, k, &mut ga);
                send(*a, like(*a, ga)?);
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); n * k];
                tensor::matmul_tn(up.data(), val(*a).data(), m, n, k, &mut gb);
                send(*b, like(*b, gb)?);
            }
        }
        Op::Add(a, b) => {
            send(*a, up.clone());
            send(*b, up.clone());
        }
        Op::AddRow(a, b) => {
            send(*a, up.clone());
            if needs(*b) {
                let c = val(*b).len();
                let mut gb = vec![T::zero(); c];
                for (i, g) in up.data().iter().enumerate() {
                    gb[i % c] += *g;
                }
                send(*b, like(*b, gb)?);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d = up.data().iter().zip(val(*b).data()).map(|(g, y)| *g * *y).collect();
                send(*a, like(*a, d)?);
            }
            if needs(*b) {
                let d = up.data().iter().zip(val(*a).data()).map(|(g, x)| *g * *x).collect();
                send(*b, like(*b, d)?);
            }
        }
        Op::MulConst(a, factor) => {
            let d = up.data().iter().zip(factor.data()).map(|(g, f)| *g * *f).collect();
            send(*a, like(*a, d)?);
        }
        Op::Scale(a, c) => send(*a, up.map(|g| g * *c)),
        Op::Relu(a) => {
            let d = up
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect();
            send(*a, like(*a, d)?);
        }
        Op::Gelu(a) => {
            let d = up
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| *g * gelu_grad(*x))
                .collect();
            send(*a, like(*a, d)?);
        }
        Op::Sum(a) => {
            let g = up.data()[0];
            send(*a, Tensor::full(val(*a).shape(), g));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let cols = val(*gain).len();
            let rows = xhat.len() / cols;
            let g = val(*gain).data();
            let dy = up.data();
            if needs(*gain) || needs(*bias) {
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] += dy[r * cols + c] * xhat[r * cols + c];
                        db[c] += dy[r * cols + c];
                    }
                }
                send(*gain, like(*gain, dg)?);
                send(*bias, like(*bias, db)?);
            }
            if needs(*x) {
                let n = T::lit(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        let d = dy[r * cols + c] * g[c];
                        sum_d += d;
                        sum_dx += d * xhat[r * cols + c];
                    }
                    for c in 0..cols {
                        let d = dy[r * cols + c] * g[c];
                        dx[r * cols + c] = inv_std[r] / n * (n * d - sum_d - xhat[r * cols + c] * sum_dx);
                    }
                }
                send(*x, like(*x, dx)?);
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = tensor::split_axis(y.shape(), *axis)?;
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut s = T::zero();
                    for j in 0..n {
                        s += up.data()[base + j * inner] * y.data()[base + j * inner];
                    }
                    for j in 0..n {
                        let idx = base + j * inner;
                        dx[idx] = y.data()[idx] * (up.data()[idx] - s);
                    }
                }
            }
            send(*x, like(*x, dx)?);
        }
        Op::Embedding { table, ids } => {
            let (v, d) = val(*table).dims2()?;
            let mut gt = vec![T::zero(); v * d];
            for (r, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for c in 0..d {
                    gt[id * d + c] += up.data()[r * d + c];
                }
            }
            send(*table, like(*table, gt)?);
        }
        Op::ConcatGroups { a, b, groups } => {
            let (ar, d) = val(*a).dims2()?;
            let (br, _) = val(*b).dims2()?;
            let (m, n) = (ar / groups, br / groups);
            let mut ga = Vec::with_capacity(ar * d);
            let mut gb = Vec::with_capacity(br * d);
            for g in 0..*groups {
                let base = g * (m + n) * d;
                ga.extend_from_slice(&up.data()[base..base + m * d]);
                gb.extend_from_slice(&up.data()[base + m * d..base + (m + n) * d]);
            }
            send(*a, like(*a, ga)?);
            send(*b, like(*b, gb)?);
        }
        Op::Attention { q, k, v, probs, spec } => {
            let (gq, gk, gv) = attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                up.data(),
                *spec,
            );
            send(*q, like(*q, gq)?);
            send(*k, like(*k, gk)?);
            send(*v, like(*v, gv)?);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (t, v) = val(*logits).dims2()?;
            let scale = up.data()[0] / T::lit(t as f64);
            let mut g: Vec<T> = probs.iter().map(|p| *p * scale).collect();
            for (i, &tgt) in targets.iter().enumerate() {
                g[i * v + tgt as usize] -= scale;
            }
            send(*logits, like(*logits, g)?);
        }
    }
    Ok(())
}

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    up: &[T],
    s: AttnSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = s.width / s.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); s.keys];
    for g in 0..s.groups {
        for h in 0..s.heads {
            let col = h * dh;
            for i in 0..s.queries {
                let qrow = (g * s.queries + i) * s.width + col;
                let p = &probs[((g * s.heads + h) * s.queries + i) * s.keys..][..s.keys];
                let dout = &up[qrow..qrow + dh];
                let mut weighted = T::zero();
                for j in 0..s.keys {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vrow = (g * s.keys + j) * s.width + col;
                    dp[j] = tensor::dot(dout, &v[vrow..vrow + dh]);
                    weighted += p[j] * dp[j];
                    for (gvc, dc) in gv[vrow..vrow + dh].iter_mut().zip(dout) {
                        *gvc += p[j] * *dc;
                    }
                }
                for j in 0..s.keys {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let krow = (g * s.keys + j) * s.width + col;
                    for c in 0..dh {
                        gq[qrow + c] += ds * k[krow + c];
                        gk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = x.mul(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = c.sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get_or_zeros(x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let y = x.relu();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_mask_shapes() {
        let m = Mask::causal_with_cache(3, 0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), j <= i);
            }
        }
        let one = Mask::causal_with_cache(1, 4);
        assert_eq!(one.row(0), &[true; 5]);
        let m = Mask::causal_with_cache(5, 3);
        for i in 0..5 {
            assert_eq!(m.row(i).iter().filter(|a| **a).count(), 3 + i + 1);
        }
        let add = Mask::causal_with_cache(2, 0).additive::<f32>();
        assert_eq!(add.data()[1], f32::NEG_INFINITY);
        assert_eq!(add.data()[2], 0.0);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 2], vec![5.0, -6.0]).unwrap());
        let out = tape.attention(q, k, v, &Mask::causal_with_cache(1, 0), 1, 1).unwrap();
        assert_eq!(out.value().data(), &[5.0, -6.0]);
        assert_eq!(tape.dot_products(), 1);
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[2, 2]));
        let k = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0]).unwrap());
        // query 0 sees keys 0..=1, query 1 sees all three
        let mask = Mask::causal_with_cache(2, 1);
        let out = tape.attention(q, k, v, &mask, 1, 2).unwrap();
        let o = out.value();
        assert!((o.data()[0] - 1.5).abs() < 1e-12);
        assert!((o.data()[1] - 15.0).abs() < 1e-12);
        assert!((o.data()[2] - 3.0).abs() < 1e-12);
        assert!((o.data()[3] - 30.0).abs() < 1e-12);
        assert_eq!(tape.dot_products(), 2 * 2 * 3);
    }

    #[test]
    fn attention_matches_loop_oracle() {
        // 2 queries, 3 keys, one head of width 2, fully visible
        let qd = [0.1, 0.2, -0.3, 0.4];
        let kd = [0.5, -0.1, 0.2, 0.3, -0.4, 0.6];
        let vd = [1.0, 2.0, 3.0, -1.0, 0.5, 0.25];
        let scale = 1.0 / 2f64.sqrt();
        let mut expect = [0.0; 4];
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (qd[2 * i] * kd[2 * j] + qd[2 * i + 1] * kd[2 * j + 1]) * scale)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                let w = scores[j].exp() / z;
                expect[2 * i] += w * vd[2 * j];
                expect[2 * i + 1] += w * vd[2 * j + 1];
            }
        }
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![2, 2], qd.to_vec()).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 2], kd.to_vec()).unwrap());
        let v = tape.constant(Tensor::new(vec![3, 2], vd.to_vec()).unwrap());
        let mask = Mask::new(2, 3, vec![true; 6]).unwrap();
        let out = tape.attention(q, k, v, &mask, 1, 1).unwrap();
        for (a, b) in out.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 4]));
        let v = tape.constant(Tensor::zeros(&[2, 4]));
        let mask = Mask::causal_with_cache(2, 1);
        assert!(matches!(
            tape.attention(q, k, v, &mask, 1, 2),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn embedding_checks_ids() {
        let tape = Tape::<f32>::new();
        let t = tape.param(Tensor::zeros(&[3, 2]));
        assert!(tape.embedding(t, &[0, 2]).is_ok());
        assert!(matches!(tape.embedding(t, &[3]), Err(Error::Index { .. })));
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive computes its value eagerly and appends a node to the tape.
//! Nodes are only ever appended, so the tape is in topological order by
//! construction and the backward sweep is a single reverse scan.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{inverse_perm, numel, permute_data, Real, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    /// `a + b` where `b` is broadcast over the leading axes of `a`.
    Add { a: Var, b: Var },
    /// Elementwise product, `b` broadcast over the leading axes of `a`.
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    ScaleRows { a: Var, factors: Vec<F> },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum { a: Var },
    MeanAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Slice {
        a: Var,
        outer: usize,
        len: usize,
        start: usize,
        take: usize,
        inner: usize,
    },
    IndexSelect { a: Var, indices: Vec<usize>, row: usize },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, keyed by leaf handle.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: HashMap<Var, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Single-owner record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

pub fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let u = c * (x + F::lit(GELU_CUBIC) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let a = F::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; a rank-2 right operand
    /// is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if !b_shared && lead_a != lead_b {
            return Err(err());
        }
        let batch: usize = lead_a.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = &av[bi * m * k..(bi + 1) * m * k];
            let bo = if b_shared {
                bv
            } else {
                &bv[bi * k * n..(bi + 1) * k * n]
            };
            let co = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul_into(ao, bo, co, m, k, n);
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !suffix_broadcast(sa, sb) {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !suffix_broadcast(sa, sb) {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// Multiplies each block along axis 0 by its own constant factor.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<F>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s[0] != factors.len() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: s,
                rhs: vec![factors.len()],
            });
        }
        let inner = numel(&s[1..]);
        let mut out = self.value(a).data().to_vec();
        for (chunk, &f) in out.chunks_mut(inner).zip(&factors) {
            chunk.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::ScaleRows { a, factors }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Softmax over the last axis with max subtraction. `-inf` entries are
    /// allowed (masked positions) as long as each row keeps one finite entry.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row)?;
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = F::from_usize(d).unwrap();
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
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

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::Shape {
                op: "mean_axis",
                lhs: s,
                rhs: vec![axis],
            });
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(a).data();
        let mut out = vec![F::zero(); outer * inner];
        let ln = F::from_usize(len).unwrap();
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / ln);
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..s.len()).collect::<Vec<_>>() {
            return Err(Error::Shape {
                op: "permute",
                lhs: s,
                rhs: perm.to_vec(),
            });
        }
        let (data, shape) = permute_data(self.value(a).data(), &s, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == first.len() && axis < s.len();
            if !same_rank
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let v = self.value(p).data();
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                sizes,
                inner,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, take: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || take == 0 || start + take > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, take],
            });
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&v[base..base + take * inner]);
        }
        let mut shape = s;
        shape[axis] = take;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                a,
                outer,
                len,
                start,
                take,
                inner,
            },
            rg,
        ))
    }

    /// Gathers rows along axis 0; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: s,
                rhs: indices.to_vec(),
            });
        }
        let row = numel(&s[1..]);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
                row,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            loss += lse - row[l];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss = loss / F::from_usize(labels.len()).unwrap();
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`. The tape is consumed: a
    /// second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| {
                    for bi in 0..batch {
                        let bo = if b_shared {
                            bv
                        } else {
                            &bv[bi * k * n..(bi + 1) * k * n]
                        };
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let gao = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = F::zero();
                                for j in 0..n {
                                    acc += go[r * n + j] * bo[c * n + j];
                                }
                                gao[r * k + c] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for bi in 0..batch {
                        let ao = &av[bi * m * k..(bi + 1) * m * k];
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let gbo = if b_shared {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        for r in 0..m {
                            for c in 0..k {
                                let x = ao[r * k + c];
                                if x == F::zero() {
                                    continue;
                                }
                                let row = &mut gbo[c * n..(c + 1) * n];
                                for (o, &gv) in row.iter_mut().zip(&go[r * n..(r + 1) * n]) {
                                    *o += x * gv;
                                }
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| {
                    let inner = gb.len();
                    for chunk in g.chunks(inner) {
                        add_into(gb, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let inner = bv.len();
                self.accumulate(grads, a, |ga| {
                    for (j, (o, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gv * bv[j % inner];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for (j, (&gv, &x)) in g.iter().zip(av).enumerate() {
                        gb[j % inner] += gv * x;
                    }
                });
            }
            &Op::Scale { a, c } => {
                self.accumulate(grads, a, |ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::ScaleRows { a, factors } => {
                let inner = g.len() / factors.len();
                self.accumulate(grads, *a, |ga| {
                    for (j, (o, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gv * factors[j / inner];
                    }
                });
            }
            &Op::Gelu { a } => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.accumulate(grads, a, |ga| {
                    for ((go, yo), gao) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: F = go.iter().zip(yo).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gao[j] += yo[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let dn = F::from_usize(d).unwrap();
                let gv = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            gx[r * d + j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += gv * h;
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                });
            }
            &Op::Sum { a } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            &Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            } => {
                let ln = F::from_usize(len).unwrap();
                self.accumulate(grads, a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv / ln;
                            }
                        }
                    }
                });
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
            }
            Op::Permute { a, perm } => {
                let inv = inverse_perm(perm);
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                self.accumulate(grads, *a, |ga| add_into(ga, &back));
            }
            Op::Concat {
                parts,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    self.accumulate(grads, p, |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut gp[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    });
                    offset += sz;
                }
            }
            &Op::Slice {
                a,
                outer,
                len,
                start,
                take,
                inner,
            } => {
                self.accumulate(grads, a, |ga| {
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        add_into(
                            &mut ga[base..base + take * inner],
                            &g[o * take * inner..(o + 1) * take * inner],
                        );
                    }
                });
            }
            Op::IndexSelect { a, indices, row } => {
                self.accumulate(grads, *a, |ga| {
                    for (j, &src) in indices.iter().enumerate() {
                        add_into(&mut ga[src * row..(src + 1) * row], &g[j * row..(j + 1) * row]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / F::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { F::one() } else { F::zero() };
                            gl[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for kk in 0..k {
            let x = a[r * k + kk];
            if x == F::zero() {
                continue;
            }
            for (o, &bv) in crow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += x * bv;
            }
        }
    }
}

pub(crate) fn softmax_row<F: Real>(row: &mut [F]) -> Result<()> {
    if row.iter().any(|x| x.is_nan() || *x == F::infinity()) {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(Error::Numeric("softmax row fully masked".into()));
    }
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let i = tape.constant(Tensor::eye(3));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12 && (v[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(t(&[4], &[5.0; 4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x) => dW[i, j] = x[j]
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), true);
        let x = tape.constant(t(&[3, 1], &[1.0, -2.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[5], &[0.3, -1.0, 2.0, 0.0, 4.0]), true);
        let y = tape.softmax(x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_is_single_shot_and_scalar_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(logits, &[0, 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, f64::NEG_INFINITY, 2.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Node indices are
//! therefore a topological order of the computation, and [`Graph::backward`]
//! sweeps them once in reverse.

use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`,
/// with `d` split evenly across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embed { table: Var, ids: Vec<usize> },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    GatherRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    SumRows(Var),
    Sum(Var),
    DotConst { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation; also the gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("shape mismatch in {op}: {a:?} vs {b:?}")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and the nodes computed from them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of `v`; zeros when nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            shape_panic(name, sa, sb);
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("add", a, b);
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("sub", a, b);
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("mul", a, b);
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x[.., c] + bias[c]`, broadcasting `bias` over all leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != vx.cols() {
            shape_panic("add_row", vx.shape(), vb.shape());
        }
        let c = vx.cols();
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            shape_panic("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        if sa.len() != 2 {
            shape_panic("transpose", sa, &[]);
        }
        let (r, c) = (sa[0], sa[1]);
        let out = Tensor::new(vec![c, r], transpose_data(self.value(a).data(), r, c));
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            shape_panic("reshape", self.shape(a), shape);
        }
        let out = self.value(a).clone().reshaped(shape.to_vec());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`; output `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            shape_panic("embed", vt.shape(), &[ids.len()]);
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embed id {id} out of range for table {:?}", vt.shape());
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data);
        self.push(out, Op::Embed { table, ids: ids.to_vec() }, &[table])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Tanh approximation of GELU; smooth everywhere.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let out = self.map(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    /// Log-softmax along `axis`, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            shape_panic("log_softmax", &shape, &[axis]);
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner].as_f64());
                }
                // accumulate in f64 so that f32 rows still normalize to 1e-6
                let mut s = 0.0f64;
                for j in 0..len {
                    s += (src[base + j * inner].as_f64() - mx).exp();
                }
                let lse = mx + s.ln();
                for j in 0..len {
                    out[base + j * inner] = T::from_f64(src[base + j * inner].as_f64() - lse);
                }
            }
        }
        let out = Tensor::new(shape, out);
        self.push(out, Op::LogSoftmax { x, outer, len, inner }, &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            shape_panic("layer_norm", vx.shape(), self.shape(gain));
        }
        let rows = vx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Inverted dropout. With `p == 0` this is the identity and draws
    /// nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Fused scaled dot-product attention over `heads` heads.
    ///
    /// `key_valid[b * k_len + j]` marks key `j` of sequence `b` as attendable.
    /// There is no causal restriction.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims, key_valid: &[bool]) -> Var {
        let AttnDims { batch, q_len, k_len, heads } = dims;
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sq[0] != batch * q_len {
            shape_panic("attention(query)", sq, &[batch * q_len]);
        }
        if sk != sv || sk.len() != 2 || sk[0] != batch * k_len || sk[1] != sq[1] {
            shape_panic("attention(key/value)", sk, sv);
        }
        assert_eq!(key_valid.len(), batch * k_len, "attention key mask length");
        let d = sq[1];
        assert!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); batch * q_len * d];
        let ds = d as isize;
        for b in 0..batch {
            let valid = &key_valid[b * k_len..(b + 1) * k_len];
            for h in 0..heads {
                let p = &mut probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
                let q_off = b * q_len * d + h * dh;
                let k_off = b * k_len * d + h * dh;
                T::gemm(
                    q_len,
                    dh,
                    k_len,
                    &qd[q_off..],
                    (ds, 1),
                    &kd[k_off..],
                    (1, ds),
                    T::zero(),
                    p,
                    (k_len as isize, 1),
                );
                for row in p.chunks_mut(k_len) {
                    let mut mx = T::neg_infinity();
                    for j in 0..k_len {
                        if valid[j] {
                            row[j] *= scale;
                            mx = mx.max(row[j]);
                        }
                    }
                    if mx == T::neg_infinity() {
                        row.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    let mut s = T::zero();
                    for j in 0..k_len {
                        if valid[j] {
                            row[j] = (row[j] - mx).exp();
                            s += row[j];
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    let inv = T::one() / s;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
                T::gemm(
                    q_len,
                    k_len,
                    dh,
                    p,
                    (k_len as isize, 1),
                    &vd[k_off..],
                    (ds, 1),
                    T::zero(),
                    &mut out[q_off..],
                    (ds, 1),
                );
            }
        }
        let out = Tensor::new(vec![batch * q_len, d], out);
        self.push(out, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    /// Selects rows (over the last axis) of `x`; output `[rows.len(), cols]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < vx.rows(), "gather_rows index {r} out of range for {:?}", vx.shape());
            data.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data);
        self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// `out[r] = x[r, cols[r]]` for a `[rows, c]` input.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let vx = self.value(x);
        if vx.rows() != cols.len() {
            shape_panic("pick", vx.shape(), &[cols.len()]);
        }
        let c = vx.cols();
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < c, "pick column {j} out of range for {:?}", vx.shape());
                vx.data()[r * c + j]
            })
            .collect();
        let out = Tensor::new(vec![cols.len()], data);
        self.push(out, Op::Pick { x, cols: cols.to_vec() }, &[x])
    }

    /// Sum over the last axis.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let data = vx.data().chunks(c.max(1)).map(|r| r.iter().copied().sum()).collect();
        let mut shape = vx.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data);
        self.push(out, Op::SumRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// `sum_i x[i] * weights[i]` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[T]) -> Var {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            shape_panic("dot_const", vx.shape(), &[weights.len()]);
        }
        let s = vx.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::DotConst { x, weights: weights.to_vec() }, &[x])
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Each recorded node is visited at
    /// most once, in reverse recording order.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar, got shape {:?}",
            self.shape(loss)
        );
        self.zero_grad();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, cg) in contributions {
                let node = &mut self.nodes[p.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &c)| *a += c),
                    None => node.grad = Some(cg),
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        out.push((p, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|&x| x * *c).collect()));
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::zero(),
                        &mut gb,
                        (n as isize, 1),
                    );
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let s = node.value.shape();
                    out.push((*a, transpose_data(g, s[0], s[1])));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let mut gt = vec![T::zero(); vt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*table, gt));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let va = self.value(*a).data();
                    out.push((
                        *a,
                        g.iter().zip(va).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect(),
                    ));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_K);
                    let half = T::from_f64(0.5);
                    let three_k = T::from_f64(3.0 * GELU_K);
                    let va = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(va)
                        .map(|(&gy, &x)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three_k * x * x);
                            gy * (half * (T::one() + t) + half * x * dt)
                        })
                        .collect();
                    out.push((*a, ga));
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    out.push((*a, g.iter().zip(y).map(|(&x, &e)| x * e).collect()));
                }
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut s = T::zero();
                            for j in 0..*len {
                                s += g[base + j * inner];
                            }
                            for j in 0..*len {
                                let idx = base + j * inner;
                                gx[idx] = g[idx] - y[idx].exp() * s;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let inv_c = T::from_f64(1.0 / c as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            gx[r * c + j] = rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                out.extend(self.attention_backward(*q, *k, *v, *dims, probs, g));
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let c = vx.cols();
                    let mut gx = vec![T::zero(); vx.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*x, gx));
                }
            }
            Op::Pick { x, cols } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let c = vx.cols();
                    let mut gx = vec![T::zero(); vx.numel()];
                    for (r, &j) in cols.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                    out.push((*x, gx));
                }
            }
            Op::SumRows(x) => {
                if self.needs(*x) {
                    let c = self.value(*x).cols();
                    let mut gx = Vec::with_capacity(self.value(*x).numel());
                    for &gr in g {
                        gx.extend(std::iter::repeat_n(gr, c));
                    }
                    out.push((*x, gx));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).numel()]));
                }
            }
            Op::DotConst { x, weights } => {
                if self.needs(*x) {
                    out.push((*x, weights.iter().map(|&w| w * g[0]).collect()));
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: &[T],
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let AttnDims { batch, q_len, k_len, heads } = dims;
        let d = self.shape(q)[1];
        let dh = d / heads;
        let ds = d as isize;
        let kl = k_len as isize;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (need_q, need_k, need_v) = (self.needs(q), self.needs(k), self.needs(v));
        let mut gq = if need_q { vec![T::zero(); qd.len()] } else { Vec::new() };
        let mut gk = if need_k { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut gv = if need_v { vec![T::zero(); vd.len()] } else { Vec::new() };
        let mut dp = vec![T::zero(); q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
                let q_off = b * q_len * d + h * dh;
                let k_off = b * k_len * d + h * dh;
                if need_v {
                    // dV = P^T dO
                    T::gemm(k_len, q_len, dh, p, (1, kl), &g[q_off..], (ds, 1), T::one(), &mut gv[k_off..], (ds, 1));
                }
                if !(need_q || need_k) {
                    continue;
                }
                // dP = dO V^T
                T::gemm(q_len, dh, k_len, &g[q_off..], (ds, 1), &vd[k_off..], (1, ds), T::zero(), &mut dp, (kl, 1));
                for (dr, pr) in dp.chunks_mut(k_len).zip(p.chunks(k_len)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k_len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if need_q {
                    // dQ = dS K
                    T::gemm(q_len, k_len, dh, &dp, (kl, 1), &kd[k_off..], (ds, 1), T::one(), &mut gq[q_off..], (ds, 1));
                }
                if need_k {
                    // dK = dS^T Q
                    T::gemm(k_len, q_len, dh, &dp, (1, kl), &qd[q_off..], (ds, 1), T::one(), &mut gk[k_off..], (ds, 1));
                }
            }
        }
        let mut out = Vec::new();
        if need_q {
            out.push((q, gq));
        }
        if need_k {
            out.push((k, gk));
        }
        if need_v {
            out.push((v, gv));
        }
        out
    }
}

fn transpose_data<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

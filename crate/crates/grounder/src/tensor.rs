//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! A `Tape` records every primitive applied during one forward pass and
//! replays them in reverse to accumulate gradients. Tensors are immutable
//! once created; the tape is built per forward pass and dropped afterwards.
//! Layout is row-major. Broadcasting is limited to scalar and
//! trailing-dimension cases.

use std::sync::Arc;

use crate::scalar::Scalar;

/// Handle into a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    /// C = A · Bᵀ with A: [m,k], B: [n,k].
    MatmulNT { a: TensorId, b: TensorId },
    /// C = X · W + b with X: [m,k], W: [k,n], b: [n].
    Affine { x: TensorId, w: TensorId, b: TensorId },
    /// Multi-head scaled-dot-product attention over projected q/k/v, with
    /// saved per-head attention probabilities for backward and tracing.
    AttnCore { q: TensorId, k: TensorId, v: TensorId, heads: usize, probs: Arc<Vec<S>> },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Maximum { a: TensorId, b: TensorId },
    Minimum { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Neg { a: TensorId },
    Abs { a: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Sqrt { a: TensorId },
    Recip { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    Concat { parts: Vec<TensorId>, axis: usize },
    SliceAxis { a: TensorId, axis: usize, start: usize, len: usize },
    GatherRows { a: TensorId, rows: Vec<usize> },
    ScaleRows { a: TensorId, s: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Upsample { a: TensorId, in_h: usize, in_w: usize, out_h: usize, out_w: usize, bilinear: bool },
}

struct Node<S> {
    data: Arc<Vec<S>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── Raw matmul kernels ──────────────────────────────────────────────
// Three variants cover forward and both backward products without ever
// materializing a transpose.

pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = S::ZERO);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// A·B appended to `out` without pre-zeroing the destination; the row
/// accumulator stays L1-resident.
pub fn mm_nn_append<S: Scalar>(a: &[S], b: &[S], out: &mut Vec<S>, m: usize, k: usize, n: usize) {
    out.reserve(m * n);
    let mut row = vec![S::ZERO; n];
    for i in 0..m {
        row.iter_mut().for_each(|x| *x = S::ZERO);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
        out.extend_from_slice(&row);
    }
}

/// A·Bᵀ appended to `out`, again via an explicit transpose of B.
pub fn mm_nt_append<S: Scalar>(a: &[S], b: &[S], out: &mut Vec<S>, m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    mm_nn_append(a, &bt, out, m, k, n);
}

/// C = A · Bᵀ with A: [m,k], B: [n,k], C: [m,n]. B is transposed up front
/// so the accumulation loop vectorizes instead of chaining serial dots.
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    mm_nn(a, &bt, c, m, k, n);
}

fn transpose<S: Scalar>(b: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut bt = Vec::with_capacity(rows * cols);
    for p in 0..cols {
        for j in 0..rows {
            bt.push(b[j * cols + p]);
        }
    }
    bt
}

/// C += Aᵀ · B with A: [m,k], B: [m,n], C: [k,n].
pub fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Additive logit applied to masked attention keys.
pub const ATTN_MASK_NEG: f64 = -1e9;

/// Column-block gather that rebuilds `dst` append-only (clears first).
fn gather_cols_append<S: Scalar>(src: &[S], dst: &mut Vec<S>, rows: usize, width: usize, at: usize, n: usize) {
    dst.clear();
    dst.reserve(rows * n);
    for r in 0..rows {
        dst.extend_from_slice(&src[r * width + at..r * width + at + n]);
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, PartialEq)]
enum BShape {
    Same,
    ScalarRhs,
    /// rhs is [m] against lhs [.., m].
    TrailingRhs,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data: Arc::new(data), shape, requires_grad, op });
        id
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf: data length {} does not match shape {}",
            data.len(),
            shape_str(shape)
        );
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Leaf sharing existing storage (no copy).
    pub fn leaf_shared(&mut self, data: Arc<Vec<S>>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf: data length {} does not match shape {}",
            data.len(),
            shape_str(shape)
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape: shape.to_vec(), requires_grad, op: Op::Leaf });
        id
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.leaf(vec![S::ZERO; numel(shape)], shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![S::from_f64(v)], &[1], false)
    }

    // ── Matrix products ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: inner extents differ: {} · {}",
            shape_str(&sa),
            shape_str(&sb)
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(m * n);
        mm_nn_append(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, vec![m, n], rg, Op::Matmul { a, b })
    }

    /// Fused linear layer: x·W + b with the bias applied in-pass.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[0],
            "affine: inner extents differ: {} · {}",
            shape_str(&sx),
            shape_str(&sw)
        );
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        assert_eq!(
            numel(self.shape(b)),
            n,
            "affine: bias {} does not match output width {n}",
            shape_str(self.shape(b))
        );
        // bias seeds each row accumulator, so no destination zeroing happens
        let mut out = Vec::with_capacity(m * n);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            let mut row = vec![S::ZERO; n];
            for i in 0..m {
                row.copy_from_slice(bv);
                let xrow = &xv[i * k..(i + 1) * k];
                for (p, &xp) in xrow.iter().enumerate() {
                    let wrow = &wv[p * n..(p + 1) * n];
                    for j in 0..n {
                        row[j] += xp * wrow[j];
                    }
                }
                out.extend_from_slice(&row);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, vec![m, n], rg, Op::Affine { x, w, b })
    }

    /// Multi-head scaled-dot-product attention. `q` is [tq, d], `k`/`v` are
    /// [tk, d] with d divisible by `heads`; an optional key mask zeroes
    /// attention to masked keys. Per-head probabilities are saved on the
    /// node for backward and tracing.
    pub fn attn_core(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> TensorId {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        assert!(
            sq.len() == 2 && sk.len() == 2 && sk == sv && sq[1] == sk[1],
            "attention: incompatible q {} k {} v {}",
            shape_str(&sq),
            shape_str(&sk),
            shape_str(&sv)
        );
        let (tq, d) = (sq[0], sq[1]);
        let tk = sk[0];
        assert!(d % heads == 0, "attention dim {d} not divisible by {heads} heads");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), tk, "key mask length {} vs {} keys", m.len(), tk);
        }
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let neg = S::from_f64(ATTN_MASK_NEG);

        let mut probs = Vec::with_capacity(heads * tq * tk);
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        // all head outputs kept so the final matrix assembles append-only
        let mut oh_all = Vec::with_capacity(heads * tq * dh);
        let (qv, kv, vv) = (
            self.nodes[q.0].data.clone(),
            self.nodes[k.0].data.clone(),
            self.nodes[v.0].data.clone(),
        );
        for h in 0..heads {
            gather_cols_append(&qv, &mut qh, tq, d, h * dh, dh);
            gather_cols_append(&kv, &mut kh, tk, d, h * dh, dh);
            gather_cols_append(&vv, &mut vh, tk, d, h * dh, dh);
            let pbase = h * tq * tk;
            mm_nt_append(&qh, &kh, &mut probs, tq, dh, tk);
            for row in probs[pbase..].chunks_exact_mut(tk) {
                for (c, val) in row.iter_mut().enumerate() {
                    *val = *val * scale;
                    if let Some(m) = key_mask {
                        if !m[c] {
                            *val += neg;
                        }
                    }
                }
                // stable softmax in place; separate passes vectorize
                let mut mx = row[0];
                for &x in row.iter().skip(1) {
                    mx = mx.maxv(x);
                }
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                }
                let mut denom = S::ZERO;
                for &x in row.iter() {
                    denom += x;
                }
                let inv = S::ONE / denom;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
            mm_nn_append(&probs[pbase..pbase + tq * tk], &vh, &mut oh_all, tq, tk, dh);
        }
        let mut out = Vec::with_capacity(tq * d);
        for r in 0..tq {
            for h in 0..heads {
                let at = h * tq * dh + r * dh;
                out.extend_from_slice(&oh_all[at..at + dh]);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, vec![tq, d], rg, Op::AttnCore { q, k, v, heads, probs: Arc::new(probs) })
    }

    /// Saved attention probabilities of an `attn_core` node:
    /// (probs, heads, tq, tk) with probs laid out head-major.
    pub fn attn_probs(&self, id: TensorId) -> Option<(&[S], usize, usize, usize)> {
        match &self.nodes[id.0].op {
            Op::AttnCore { q, k, heads, probs, .. } => {
                let tq = self.nodes[q.0].shape[0];
                let tk = self.nodes[k.0].shape[0];
                Some((probs.as_slice(), *heads, tq, tk))
            }
            _ => None,
        }
    }

    /// a · bᵀ for a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_nt: trailing extents differ: {} · {}ᵀ",
            shape_str(&sa),
            shape_str(&sb)
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Vec::with_capacity(m * n);
        mm_nt_append(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, vec![m, n], rg, Op::MatmulNT { a, b })
    }

    // ── Elementwise binary ──────────────────────────────────────────

    fn bshape(&self, a: TensorId, b: TensorId, opname: &str) -> BShape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let trailing = !sa.is_empty()
            && numel(sb) == sa[sa.len() - 1]
            && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1));
        if sa == sb {
            BShape::Same
        } else if numel(sb) == 1 {
            BShape::ScalarRhs
        } else if trailing {
            BShape::TrailingRhs
        } else {
            panic!("{opname}: incompatible shapes {} vs {}", shape_str(sa), shape_str(sb));
        }
    }

    fn binary(&mut self, a: TensorId, b: TensorId, opname: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> TensorId {
        let bs = self.bshape(a, b, opname);
        let out_shape = self.shape(a).to_vec();
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<S> = match bs {
            BShape::Same => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
            BShape::ScalarRhs => {
                let y = bv[0];
                av.iter().map(|&x| f(x, y)).collect()
            }
            BShape::TrailingRhs => {
                let m = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % m])).collect()
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(data, out_shape, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "maximum: shapes differ: {} vs {}",
            shape_str(self.shape(a)),
            shape_str(self.shape(b))
        );
        self.binary(a, b, "maximum", |x, y| x.maxv(y), Op::Maximum { a, b })
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "minimum: shapes differ: {} vs {}",
            shape_str(self.shape(a)),
            shape_str(self.shape(b))
        );
        self.binary(a, b, "minimum", |x, y| x.minv(y), Op::Minimum { a, b })
    }

    // ── Elementwise unary ───────────────────────────────────────────

    fn unary(&mut self, a: TensorId, f: impl Fn(S) -> S, op: Op<S>) -> TensorId {
        let data: Vec<S> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(data, shape, rg, op)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        self.unary(a, |x| x * cs, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.abs(), Op::Abs { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| S::ONE / (S::ONE + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.maxv(S::ZERO), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        // sigmoid form of the GELU curve; exp is markedly faster than tanh here
        let c = S::from_f64(1.702);
        self.unary(a, |x| x / (S::ONE + (-(c * x)).exp()), Op::Gelu { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.ln(), Op::Ln { a })
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt { a })
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| S::ONE / x, Op::Recip { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        self.unary(a, |x| x.maxv(l).minv(h), Op::Clamp { a, lo, hi })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: S = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let n = S::from_f64(v.len() as f64);
        let s: S = v.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s / n], vec![1], rg, Op::MeanAll { a })
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "reduce: axis {axis} out of range for {}", shape_str(&shape));
        let (outer, ax, inner) = Self::axis_split(&shape, axis);
        let v = self.value(a);
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for x in 0..ax {
                let base = (o * ax + x) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += v[base + i];
                }
            }
        }
        if mean {
            let d = S::from_f64(ax as f64);
            out.iter_mut().for_each(|x| *x = *x / d);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        self.push(out, out_shape, rg, op)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(a, axis, true)
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat: no parts");
        assert!(axis < 2, "concat: only 2-d tensors supported, axis {axis}");
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 2, "concat: parts must be 2-d, got {}", shape_str(&first));
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), 2, "concat: parts must be 2-d, got {}", shape_str(s));
            if axis == 0 {
                assert_eq!(
                    s[1], first[1],
                    "concat axis 0: column mismatch {} vs {}",
                    shape_str(s),
                    shape_str(&first)
                );
                rows += s[0];
                cols = s[1];
            } else {
                assert_eq!(
                    s[0], first[0],
                    "concat axis 1: row mismatch {} vs {}",
                    shape_str(s),
                    shape_str(&first)
                );
                rows = s[0];
                cols += s[1];
            }
        }
        let mut out = vec![S::ZERO; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let v = self.value(p);
                out[at..at + v.len()].copy_from_slice(v);
                at += v.len();
            }
        } else {
            let mut col_at = 0;
            for &p in parts {
                let pc = self.shape(p)[1];
                let v = self.value(p);
                for r in 0..rows {
                    out[r * cols + col_at..r * cols + col_at + pc]
                        .copy_from_slice(&v[r * pc..(r + 1) * pc]);
                }
                col_at += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, vec![rows, cols], rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "slice: axis {axis} out of range for {}", shape_str(&shape));
        assert!(
            start + len <= shape[axis],
            "slice: range {start}..{} exceeds extent {} of {}",
            start + len,
            shape[axis],
            shape_str(&shape)
        );
        let v = self.value(a);
        let (data, out_shape) = if shape.len() == 1 {
            (v[start..start + len].to_vec(), vec![len])
        } else {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 0 {
                (v[start * cols..(start + len) * cols].to_vec(), vec![len, cols])
            } else {
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
                }
                (out, vec![rows, len])
            }
        };
        let rg = self.rg(a);
        self.push(data, out_shape, rg, Op::SliceAxis { a, axis, start, len })
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "gather_rows: need 2-d input, got {}", shape_str(&shape));
        let cols = shape[1];
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < shape[0], "gather_rows: row {r} out of range for {}", shape_str(&shape));
            out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(out, vec![rows.len(), cols], rg, Op::GatherRows { a, rows: rows.to_vec() })
    }

    /// Multiply each row of `a` [n,m] by the per-row factor `s` [n].
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(s).to_vec();
        assert!(
            sa.len() == 2 && numel(&ss) == sa[0],
            "scale_rows: {} rows vs factor {}",
            shape_str(&sa),
            shape_str(&ss)
        );
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a);
        let sv = self.value(s);
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let f = sv[r];
            for c in 0..cols {
                out[r * cols + c] = av[r * cols + c] * f;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(out, sa, rg, Op::ScaleRows { a, s })
    }

    // ── Normalization / attention primitives ────────────────────────

    /// Max-subtracted softmax along `axis`; rows sum to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {}", shape_str(&shape));
        let (outer, ax, inner) = Self::axis_split(&shape, axis);
        let v = self.value(a);
        let mut out = vec![S::ZERO; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |x: usize| (o * ax + x) * inner + i;
                let mut mx = v[idx(0)];
                for x in 1..ax {
                    mx = mx.maxv(v[idx(x)]);
                }
                for x in 0..ax {
                    out[idx(x)] = (v[idx(x)] - mx).exp();
                }
                let mut denom = S::ZERO;
                for x in 0..ax {
                    denom += out[idx(x)];
                }
                let inv = S::ONE / denom;
                for x in 0..ax {
                    out[idx(x)] = out[idx(x)] * inv;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, shape, rg, Op::Softmax { a, axis })
    }

    /// Per-row normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm: empty shape");
        assert!(
            numel(self.shape(gain)) == d && numel(self.shape(bias)) == d,
            "layer_norm: gain {} / bias {} must match last extent {d}",
            shape_str(self.shape(gain)),
            shape_str(self.shape(bias))
        );
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let rows = xv.len() / d;
        let mut out = vec![S::ZERO; xv.len()];
        let dn = S::from_f64(d as f64);
        let epss = S::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var / dn;
            let inv_std = S::ONE / (var + epss).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * inv_std * gv[i] + bv[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, shape, rg, Op::LayerNorm { x, gain, bias, eps })
    }

    // ── Grid resampling ─────────────────────────────────────────────

    /// Each row of `a` is a flattened in_h×in_w grid, resampled to
    /// out_h×out_w. Bilinear uses half-pixel centers; nearest is the
    /// ablation alternative.
    pub fn upsample_grid(
        &mut self,
        a: TensorId,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        bilinear: bool,
    ) -> TensorId {
        let shape = self.shape(a).to_vec();
        assert!(
            shape.len() == 2 && shape[1] == in_h * in_w,
            "upsample: row length {} of {} does not match {}x{} grid",
            shape[1],
            shape_str(&shape),
            in_h,
            in_w
        );
        let rows = shape[0];
        let v = self.value(a);
        let mut out = vec![S::ZERO; rows * out_h * out_w];
        let taps = upsample_taps(in_h, in_w, out_h, out_w, bilinear);
        for r in 0..rows {
            let src = &v[r * in_h * in_w..(r + 1) * in_h * in_w];
            let dst = &mut out[r * out_h * out_w..(r + 1) * out_h * out_w];
            for (di, tap) in taps.iter().enumerate() {
                let mut acc = S::ZERO;
                for &(si, w) in tap.iter() {
                    acc += src[si] * S::from_f64(w);
                }
                dst[di] = acc;
            }
        }
        let rg = self.rg(a);
        self.push(out, vec![rows, out_h * out_w], rg, Op::Upsample { a, in_h, in_w, out_h, out_w, bilinear })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss into every reachable node
    /// with `requires_grad`. Repeated calls accumulate until
    /// `clear_grads`.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            numel(self.shape(loss)),
            1,
            "backward: loss must be scalar, got {}",
            shape_str(self.shape(loss))
        );
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let n = self.nodes.len();
        // local gradient stream for this call; merged into self.grads at the end
        let mut g: Vec<Option<Vec<S>>> = vec![None; n];
        g[loss.0] = Some(vec![S::ONE]);

        for i in (0..n).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    // park it back; merged below
                    g[i] = Some(gi);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nn = self.nodes[b.0].shape[1];
                    if self.rg(a) {
                        let mut da = Vec::with_capacity(m * k);
                        mm_nt_append(&gi, &self.nodes[b.0].data, &mut da, m, nn, k);
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let db = g[b.0].get_or_insert_with(|| vec![S::ZERO; k * nn]);
                        mm_tn_acc(&self.nodes[a.0].data, &gi, db, m, k, nn);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nn = self.nodes[b.0].shape[0];
                    if self.rg(a) {
                        let mut da = Vec::with_capacity(m * k);
                        mm_nn_append(&gi, &self.nodes[b.0].data, &mut da, m, nn, k);
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let db = g[b.0].get_or_insert_with(|| vec![S::ZERO; nn * k]);
                        mm_tn_acc(&gi, &self.nodes[a.0].data, db, m, nn, k);
                    }
                }
                Op::Affine { x, w, b } => {
                    let (m, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let n = self.nodes[w.0].shape[1];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(m * k);
                        mm_nt_append(&gi, &self.nodes[w.0].data, &mut dx, m, n, k);
                        acc_move(&mut g[x.0], dx);
                    }
                    if self.rg(w) {
                        let dw = g[w.0].get_or_insert_with(|| vec![S::ZERO; k * n]);
                        mm_tn_acc(&self.nodes[x.0].data, &gi, dw, m, k, n);
                    }
                    if self.rg(b) {
                        let db = g[b.0].get_or_insert_with(|| vec![S::ZERO; n]);
                        for r in 0..m {
                            for c in 0..n {
                                db[c] += gi[r * n + c];
                            }
                        }
                    }
                }
                Op::AttnCore { q, k, v, heads, probs } => {
                    let (tq, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
                    let tk = self.nodes[k.0].shape[0];
                    let dh = d / heads;
                    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                    // per-head gradient blocks, interleaved at the end
                    let mut dq_all = Vec::with_capacity(heads * tq * dh);
                    let mut dk_all = Vec::with_capacity(heads * tk * dh);
                    let mut dv_all = Vec::with_capacity(heads * tk * dh);
                    let mut qh = Vec::new();
                    let mut kh = Vec::new();
                    let mut vh = Vec::new();
                    let mut doh = Vec::new();
                    let mut dp = vec![S::ZERO; tq * tk];
                    let (qv, kv, vv) = (
                        self.nodes[q.0].data.clone(),
                        self.nodes[k.0].data.clone(),
                        self.nodes[v.0].data.clone(),
                    );
                    for h in 0..heads {
                        gather_cols_append(&qv, &mut qh, tq, d, h * dh, dh);
                        gather_cols_append(&kv, &mut kh, tk, d, h * dh, dh);
                        gather_cols_append(&vv, &mut vh, tk, d, h * dh, dh);
                        gather_cols_append(&gi, &mut doh, tq, d, h * dh, dh);
                        let ph = &probs[h * tq * tk..(h + 1) * tq * tk];

                        let dv_base = dv_all.len();
                        dv_all.resize(dv_base + tk * dh, S::ZERO);
                        mm_tn_acc(ph, &doh, &mut dv_all[dv_base..], tq, tk, dh);

                        mm_nt(&doh, &vh, &mut dp, tq, dh, tk);
                        // softmax backward per row, then fold in the scale
                        for r in 0..tq {
                            let prow = &ph[r * tk..(r + 1) * tk];
                            let drow = &mut dp[r * tk..(r + 1) * tk];
                            let mut dot = S::ZERO;
                            for (dd, &pp) in drow.iter().zip(prow.iter()) {
                                dot += *dd * pp;
                            }
                            for (dd, &pp) in drow.iter_mut().zip(prow.iter()) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        mm_nn_append(&dp, &kh, &mut dq_all, tq, tk, dh);
                        let dk_base = dk_all.len();
                        dk_all.resize(dk_base + tk * dh, S::ZERO);
                        mm_tn_acc(&dp, &qh, &mut dk_all[dk_base..], tq, tk, dh);
                    }
                    let interleave = |blocks: &[S], rows: usize| {
                        let mut full = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            for h in 0..heads {
                                let at = h * rows * dh + r * dh;
                                full.extend_from_slice(&blocks[at..at + dh]);
                            }
                        }
                        full
                    };
                    if self.rg(q) {
                        acc_move(&mut g[q.0], interleave(&dq_all, tq));
                    }
                    if self.rg(k) {
                        acc_move(&mut g[k.0], interleave(&dk_all, tk));
                    }
                    if self.rg(v) {
                        acc_move(&mut g[v.0], interleave(&dv_all, tk));
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(a) {
                        acc_into(&mut g[a.0], &gi);
                    }
                    if self.rg(b) {
                        let red = self.reduce_to_operand(&gi, a, b);
                        acc_move(&mut g[b.0], red);
                    }
                }
                Op::Sub { a, b } => {
                    if self.rg(a) {
                        acc_into(&mut g[a.0], &gi);
                    }
                    if self.rg(b) {
                        let neg: Vec<S> = gi.iter().map(|&x| -x).collect();
                        let red = self.reduce_to_operand(&neg, a, b);
                        acc_move(&mut g[b.0], red);
                    }
                }
                Op::Mul { a, b } => {
                    let bs = self.bshape(a, b, "mul");
                    if self.rg(a) {
                        let bv = &self.nodes[b.0].data;
                        let da: Vec<S> = match bs {
                            BShape::Same => gi.iter().zip(bv.iter()).map(|(&gg, &y)| gg * y).collect(),
                            BShape::ScalarRhs => gi.iter().map(|&gg| gg * bv[0]).collect(),
                            BShape::TrailingRhs => {
                                let m = bv.len();
                                gi.iter().enumerate().map(|(idx, &gg)| gg * bv[idx % m]).collect()
                            }
                        };
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let av = &self.nodes[a.0].data;
                        let full: Vec<S> = gi.iter().zip(av.iter()).map(|(&gg, &x)| gg * x).collect();
                        let red = self.reduce_to_operand(&full, a, b);
                        acc_move(&mut g[b.0], red);
                    }
                }
                Op::Div { a, b } => {
                    let bs = self.bshape(a, b, "div");
                    let bv = self.nodes[b.0].data.clone();
                    if self.rg(a) {
                        let da: Vec<S> = match bs {
                            BShape::Same => gi.iter().zip(bv.iter()).map(|(&gg, &y)| gg / y).collect(),
                            BShape::ScalarRhs => gi.iter().map(|&gg| gg / bv[0]).collect(),
                            BShape::TrailingRhs => {
                                let m = bv.len();
                                gi.iter().enumerate().map(|(idx, &gg)| gg / bv[idx % m]).collect()
                            }
                        };
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let av = &self.nodes[a.0].data;
                        let full: Vec<S> = match bs {
                            BShape::Same => gi
                                .iter()
                                .zip(av.iter())
                                .zip(bv.iter())
                                .map(|((&gg, &x), &y)| -gg * x / (y * y))
                                .collect(),
                            BShape::ScalarRhs => gi
                                .iter()
                                .zip(av.iter())
                                .map(|(&gg, &x)| -gg * x / (bv[0] * bv[0]))
                                .collect(),
                            BShape::TrailingRhs => {
                                let m = bv.len();
                                gi.iter()
                                    .zip(av.iter())
                                    .enumerate()
                                    .map(|(idx, (&gg, &x))| {
                                        let y = bv[idx % m];
                                        -gg * x / (y * y)
                                    })
                                    .collect()
                            }
                        };
                        let red = self.reduce_to_operand(&full, a, b);
                        acc_move(&mut g[b.0], red);
                    }
                }
                Op::Maximum { a, b } => {
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    if self.rg(a) {
                        let da: Vec<S> = gi
                            .iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(&gg, (&x, &y))| if x >= y { gg } else { S::ZERO })
                            .collect();
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let db: Vec<S> = gi
                            .iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(&gg, (&x, &y))| if x >= y { S::ZERO } else { gg })
                            .collect();
                        acc_move(&mut g[b.0], db);
                    }
                }
                Op::Minimum { a, b } => {
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    if self.rg(a) {
                        let da: Vec<S> = gi
                            .iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(&gg, (&x, &y))| if x <= y { gg } else { S::ZERO })
                            .collect();
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(b) {
                        let db: Vec<S> = gi
                            .iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(&gg, (&x, &y))| if x <= y { S::ZERO } else { gg })
                            .collect();
                        acc_move(&mut g[b.0], db);
                    }
                }
                Op::Scale { a, c } => {
                    let cs = S::from_f64(c);
                    let da: Vec<S> = gi.iter().map(|&gg| gg * cs).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Neg { a } => {
                    let da: Vec<S> = gi.iter().map(|&gg| -gg).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Abs { a } => {
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi
                        .iter()
                        .zip(av.iter())
                        .map(|(&gg, &x)| if x >= S::ZERO { gg } else { -gg })
                        .collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Sigmoid { a } => {
                    let ov = &self.nodes[i].data;
                    let da: Vec<S> =
                        gi.iter().zip(ov.iter()).map(|(&gg, &s)| gg * s * (S::ONE - s)).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Relu { a } => {
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi
                        .iter()
                        .zip(av.iter())
                        .map(|(&gg, &x)| if x > S::ZERO { gg } else { S::ZERO })
                        .collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Gelu { a } => {
                    let c = S::from_f64(1.702);
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi
                        .iter()
                        .zip(av.iter())
                        .map(|(&gg, &x)| {
                            let s = S::ONE / (S::ONE + (-(c * x)).exp());
                            gg * (s + x * c * s * (S::ONE - s))
                        })
                        .collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Exp { a } => {
                    let ov = &self.nodes[i].data;
                    let da: Vec<S> = gi.iter().zip(ov.iter()).map(|(&gg, &e)| gg * e).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Ln { a } => {
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi.iter().zip(av.iter()).map(|(&gg, &x)| gg / x).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Sqrt { a } => {
                    let ov = &self.nodes[i].data;
                    let two = S::from_f64(2.0);
                    let da: Vec<S> = gi.iter().zip(ov.iter()).map(|(&gg, &s)| gg / (two * s)).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Recip { a } => {
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi.iter().zip(av.iter()).map(|(&gg, &x)| -gg / (x * x)).collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::Clamp { a, lo, hi } => {
                    let (l, h) = (S::from_f64(lo), S::from_f64(hi));
                    let av = &self.nodes[a.0].data;
                    let da: Vec<S> = gi
                        .iter()
                        .zip(av.iter())
                        .map(|(&gg, &x)| if x > l && x < h { gg } else { S::ZERO })
                        .collect();
                    acc_move(&mut g[a.0], da);
                }
                Op::SumAll { a } => {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![gi[0]; n];
                    acc_move(&mut g[a.0], da);
                }
                Op::MeanAll { a } => {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![gi[0] / S::from_f64(n as f64); n];
                    acc_move(&mut g[a.0], da);
                }
                Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                    let mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                    let in_shape = self.nodes[a.0].shape.clone();
                    let (outer, ax, inner) = Self::axis_split(&in_shape, axis);
                    let scale = if mean { S::ONE / S::from_f64(ax as f64) } else { S::ONE };
                    let mut da = vec![S::ZERO; outer * ax * inner];
                    for o in 0..outer {
                        for x in 0..ax {
                            for ii in 0..inner {
                                da[(o * ax + x) * inner + ii] = gi[o * inner + ii] * scale;
                            }
                        }
                    }
                    acc_move(&mut g[a.0], da);
                }
                Op::Concat { parts, axis } => {
                    let out_cols = self.nodes[i].shape[1];
                    if axis == 0 {
                        let mut at = 0;
                        for &p in &parts {
                            let len = self.nodes[p.0].data.len();
                            if self.rg(p) {
                                acc_into(&mut g[p.0], &gi[at..at + len]);
                            }
                            at += len;
                        }
                    } else {
                        let rows = self.nodes[i].shape[0];
                        let mut col_at = 0;
                        for &p in &parts {
                            let pc = self.nodes[p.0].shape[1];
                            if self.rg(p) {
                                let mut dp = vec![S::ZERO; rows * pc];
                                for r in 0..rows {
                                    dp[r * pc..(r + 1) * pc].copy_from_slice(
                                        &gi[r * out_cols + col_at..r * out_cols + col_at + pc],
                                    );
                                }
                                acc_move(&mut g[p.0], dp);
                            }
                            col_at += pc;
                        }
                    }
                }
                Op::SliceAxis { a, axis, start, len } => {
                    let in_shape = self.nodes[a.0].shape.clone();
                    let mut da = vec![S::ZERO; numel(&in_shape)];
                    if in_shape.len() == 1 {
                        da[start..start + len].copy_from_slice(&gi);
                    } else {
                        let (rows, cols) = (in_shape[0], in_shape[1]);
                        if axis == 0 {
                            da[start * cols..(start + len) * cols].copy_from_slice(&gi);
                        } else {
                            for r in 0..rows {
                                da[r * cols + start..r * cols + start + len]
                                    .copy_from_slice(&gi[r * len..(r + 1) * len]);
                            }
                        }
                    }
                    acc_move(&mut g[a.0], da);
                }
                Op::GatherRows { a, rows } => {
                    let cols = self.nodes[a.0].shape[1];
                    let da = g[a.0].get_or_insert_with(|| vec![S::ZERO; self.nodes[a.0].data.len()]);
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            da[r * cols + c] += gi[k * cols + c];
                        }
                    }
                }
                Op::ScaleRows { a, s } => {
                    let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    if self.rg(a) {
                        let sv = &self.nodes[s.0].data;
                        let mut da = vec![S::ZERO; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] = gi[r * cols + c] * sv[r];
                            }
                        }
                        acc_move(&mut g[a.0], da);
                    }
                    if self.rg(s) {
                        let av = &self.nodes[a.0].data;
                        let mut ds = vec![S::ZERO; rows];
                        for r in 0..rows {
                            let mut acc = S::ZERO;
                            for c in 0..cols {
                                acc += gi[r * cols + c] * av[r * cols + c];
                            }
                            ds[r] = acc;
                        }
                        acc_move(&mut g[s.0], ds);
                    }
                }
                Op::Softmax { a, axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let (outer, ax, inner) = Self::axis_split(&shape, axis);
                    let ov = &self.nodes[i].data;
                    let mut da = vec![S::ZERO; ov.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |x: usize| (o * ax + x) * inner + ii;
                            let mut dot = S::ZERO;
                            for x in 0..ax {
                                dot += gi[idx(x)] * ov[idx(x)];
                            }
                            for x in 0..ax {
                                da[idx(x)] = ov[idx(x)] * (gi[idx(x)] - dot);
                            }
                        }
                    }
                    acc_move(&mut g[a.0], da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let xv = self.nodes[x.0].data.clone();
                    let gv = self.nodes[gain.0].data.clone();
                    let rows = xv.len() / d;
                    let dn = S::from_f64(d as f64);
                    let epss = S::from_f64(eps);
                    let mut dx = vec![S::ZERO; xv.len()];
                    let mut dgain = vec![S::ZERO; d];
                    let mut dbias = vec![S::ZERO; d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let grow = &gi[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<S>() / dn;
                        let mut var = S::ZERO;
                        for &v in row {
                            let c = v - mean;
                            var += c * c;
                        }
                        var = var / dn;
                        let inv_std = S::ONE / (var + epss).sqrt();
                        let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![S::ZERO; d];
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let sum_dxhat = dxhat.iter().copied().sum::<S>();
                        let mut sum_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] = inv_std / dn
                                * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.rg(x) {
                        acc_move(&mut g[x.0], dx);
                    }
                    if self.rg(gain) {
                        acc_move(&mut g[gain.0], dgain);
                    }
                    if self.rg(bias) {
                        acc_move(&mut g[bias.0], dbias);
                    }
                }
                Op::Upsample { a, in_h, in_w, out_h, out_w, bilinear } => {
                    let rows = self.nodes[a.0].shape[0];
                    let taps = upsample_taps(in_h, in_w, out_h, out_w, bilinear);
                    let mut da = vec![S::ZERO; rows * in_h * in_w];
                    for r in 0..rows {
                        let gsrc = &gi[r * out_h * out_w..(r + 1) * out_h * out_w];
                        let dst = &mut da[r * in_h * in_w..(r + 1) * in_h * in_w];
                        for (di, tap) in taps.iter().enumerate() {
                            for &(si, w) in tap.iter() {
                                dst[si] += gsrc[di] * S::from_f64(w);
                            }
                        }
                    }
                    acc_move(&mut g[a.0], da);
                }
            }
        }

        // fold leaf gradients into the persistent accumulators
        for i in 0..n {
            if let Some(gi) = g[i].take() {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                    acc_into(&mut self.grads[i], &gi);
                }
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc_move<S: Scalar>(slot: &mut Option<Vec<S>>, src: Vec<S>) {
    match slot {
        Some(dst) => {
            for (d, s) in dst.iter_mut().zip(src.into_iter()) {
                *d += s;
            }
        }
        None => *slot = Some(src),
    }
}

fn acc_into<S: Scalar>(slot: &mut Option<Vec<S>>, src: &[S]) {
    match slot {
        Some(dst) => {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

impl<S: Scalar> Tape<S> {
    /// Reduce a gradient shaped like the lhs operand down to operand `b`'s
    /// shape per the broadcast rule used in the forward op.
    fn reduce_to_operand(&self, grad: &[S], _a: TensorId, b: TensorId) -> Vec<S> {
        let target = numel(self.shape(b));
        if grad.len() == target {
            return grad.to_vec();
        }
        if target == 1 {
            return vec![grad.iter().copied().sum()];
        }
        // trailing broadcast: sum over leading rows
        let mut out = vec![S::ZERO; target];
        for (i, &gv) in grad.iter().enumerate() {
            out[i % target] += gv;
        }
        out
    }
}

fn upsample_taps(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    bilinear: bool,
) -> Vec<Vec<(usize, f64)>> {
    let mut taps = Vec::with_capacity(out_h * out_w);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for oy in 0..out_h {
        for ox in 0..out_w {
            if bilinear {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let y1 = (y0 + 1).min(in_h - 1);
                let x1 = (x0 + 1).min(in_w - 1);
                let wy = fy - y0 as f64;
                let wx = fx - x0 as f64;
                let mut tap = Vec::with_capacity(4);
                let mut push = |si: usize, w: f64| {
                    if w != 0.0 {
                        if let Some(e) = tap.iter_mut().find(|(i, _): &&mut (usize, f64)| *i == si) {
                            e.1 += w;
                        } else {
                            tap.push((si, w));
                        }
                    }
                };
                push(y0 * in_w + x0, (1.0 - wy) * (1.0 - wx));
                push(y0 * in_w + x1, (1.0 - wy) * wx);
                push(y1 * in_w + x0, wy * (1.0 - wx));
                push(y1 * in_w + x1, wy * wx);
                if tap.is_empty() {
                    tap.push((y0 * in_w + x0, 1.0));
                }
                taps.push(tap);
            } else {
                let y = (((oy as f64 + 0.5) * sy) as usize).min(in_h - 1);
                let x = (((ox as f64 + 0.5) * sx) as usize).min(in_w - 1);
                taps.push(vec![(y * in_w + x, 1.0)]);
            }
        }
    }
    taps
}

// ── Finite-difference gradient oracle ───────────────────────────────

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `h`. `f` must be deterministic
/// and return a scalar. Relative error uses `floor` as a denominator
/// guard for near-zero gradients.
pub fn grad_check<S, F>(f: F, x: &[S], shape: &[usize], h: f64, floor: f64) -> f64
where
    S: Scalar,
    F: Fn(&mut Tape<S>, TensorId) -> TensorId,
{
    assert!(h > 0.0, "grad_check: step must be positive");
    let mut tape = Tape::new();
    let xid = tape.leaf(x.to_vec(), shape, true);
    let y = f(&mut tape, xid);
    assert_eq!(numel(tape.shape(y)), 1, "grad_check: f must return a scalar");
    tape.backward(y);
    let analytic: Vec<f64> = match tape.grad(xid) {
        Some(gr) => gr.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |xs: &[S]| -> f64 {
        let mut t = Tape::new();
        let id = t.leaf(xs.to_vec(), shape, false);
        let out = f(&mut t, id);
        t.value(out)[0].to_f64()
    };

    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        xp[i] = S::from_f64(orig.to_f64() + h);
        let fp = eval(&xp);
        xp[i] = S::from_f64(orig.to_f64() - h);
        let fm = eval(&xp);
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_vec(rng: &mut CounterRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(lo, hi)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let i2 = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false);
        let c = t.matmul(i2, a);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_evaluated() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], false);
        let b = t.leaf(vec![3.0, 4.0], &[2, 1], false);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false);
        let b = t.leaf(vec![0.0; 8], &[4, 2], false);
        t.matmul(a, b);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = CounterRng::new(11);
        let bdata = rand_vec(&mut rng, 8, -1.0, 1.0);
        let adata = rand_vec(&mut rng, 12, -1.0, 1.0);
        let err = grad_check(
            |t: &mut Tape<f64>, a| {
                let b = t.leaf(bdata.clone(), &[4, 2], false);
                let c = t.matmul(a, b);
                t.sum_all(c)
            },
            &adata,
            &[3, 4],
            1e-5,
            1e-8,
        );
        assert!(err < 1e-5, "matmul grad err {err}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = CounterRng::new(4);
        let a = rand_vec(&mut rng, 6, -1.0, 1.0);
        let b = rand_vec(&mut rng, 10, -1.0, 1.0);
        let mut t: Tape<f64> = Tape::new();
        let aid = t.leaf(a.clone(), &[3, 2], false);
        let bid = t.leaf(b.clone(), &[5, 2], false);
        let c = t.matmul_nt(aid, bid);
        // manual bᵀ
        let mut bt = vec![0.0; 10];
        for i in 0..5 {
            for j in 0..2 {
                bt[j * 5 + i] = b[i * 2 + j];
            }
        }
        let btid = t.leaf(bt, &[2, 5], false);
        let c2 = t.matmul(aid, btid);
        assert_eq!(t.value(c), t.value(c2));
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = CounterRng::new(5);
        for _ in 0..20 {
            let a: Vec<f32> = (0..16).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let b: Vec<f32> = (0..16).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let c: Vec<f32> = (0..16).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let mut t: Tape<f32> = Tape::new();
            let (ai, bi, ci) = (
                t.leaf(a.clone(), &[4, 4], false),
                t.leaf(b.clone(), &[4, 4], false),
                t.leaf(c.clone(), &[4, 4], false),
            );
            let ab = t.matmul(ai, bi);
            let abc1 = t.matmul(ab, ci);
            let bc = t.matmul(bi, ci);
            let abc2 = t.matmul(ai, bc);
            let worst = t
                .value(abc1)
                .iter()
                .zip(t.value(abc2).iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(worst < 1e-4, "associativity violation {worst}");
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![0.0, 0.0], &[2], false);
        let s = t.softmax(a, 0);
        assert_eq!(t.value(s), &[0.5, 0.5]);

        let b = t.leaf(vec![3.0f64.ln(), 0.0], &[2], false);
        let sb = t.softmax(b, 0);
        assert!((t.value(sb)[0] - 0.75).abs() < 1e-12);
        assert!((t.value(sb)[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![1000.0, 0.0], &[2], false);
        let s = t.softmax(a, 0);
        assert!((t.value(s)[0] - 1.0).abs() < 1e-6);
        assert!(t.value(s)[1] < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = CounterRng::new(7);
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 6, -3.0, 3.0);
            let c = rng.uniform(-10.0, 10.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let mut t: Tape<f64> = Tape::new();
            let a = t.leaf(x, &[6], false);
            let b = t.leaf(shifted, &[6], false);
            let sa = t.softmax(a, 0);
            let sb = t.softmax(b, 0);
            let total: f64 = t.value(sa).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for (x, y) in t.value(sa).iter().zip(t.value(sb).iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![5.0, 5.0, 5.0, 5.0], &[1, 4], false);
        let g = t.leaf(vec![1.0; 4], &[4], false);
        let b = t.leaf(vec![0.0; 4], &[4], false);
        let y = t.layer_norm(x, g, b, 1e-5);
        for &v in t.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 3.0], &[1, 2], false);
        let g = t.leaf(vec![1.0, 1.0], &[2], false);
        let b = t.leaf(vec![0.0, 0.0], &[2], false);
        let y = t.layer_norm(x, g, b, 1e-12);
        assert!((t.value(y)[0] - -1.0).abs() < 1e-5);
        assert!((t.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = CounterRng::new(21);
        let x = rand_vec(&mut rng, 12, -2.0, 2.0);
        let gain = rand_vec(&mut rng, 4, 0.5, 1.5);
        let bias = rand_vec(&mut rng, 4, -0.5, 0.5);
        let err = grad_check(
            |t: &mut Tape<f64>, xid| {
                let g = t.leaf(gain.clone(), &[4], true);
                let b = t.leaf(bias.clone(), &[4], true);
                let y = t.layer_norm(xid, g, b, 1e-5);
                // weigh elements unevenly so the check is not trivially zero
                let w: Vec<f64> = (0..12).map(|i| 0.3 + 0.1 * i as f64).collect();
                let wid = t.leaf(w, &[3, 4], false);
                let yw = t.mul(y, wid);
                t.sum_all(yw)
            },
            &x,
            &[3, 4],
            1e-5,
            1e-8,
        );
        assert!(err < 1e-4, "layer_norm grad err {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![0.0], &[1], false);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s), &[0.5]);
    }

    #[test]
    fn concat_axis1_shape_contract() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false);
        let b = t.leaf(vec![1.0; 10], &[2, 5], false);
        let c = t.concat(&[a, b], 1);
        assert_eq!(t.shape(c), &[2, 8]);
        assert_eq!(t.value(c)[3..8], [1.0; 5]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[4], true);
        let m = t.mean_all(x);
        t.backward(m);
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![7.0, -1.0, 2.0], &[3], true);
        let s = t.sum_all(x);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true);
        let sq = t.mul(x, x);
        let s = t.sum_all(sq);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true);
        let s = t.sum_all(x);
        t.backward(s);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.clear_grads();
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true);
        t.backward(x);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> Vec<u64> {
            let mut rng = CounterRng::new(99);
            let x: Vec<f32> = (0..12).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let w: Vec<f32> = (0..12).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let mut t: Tape<f32> = Tape::new();
            let xid = t.leaf(x, &[3, 4], true);
            let wid = t.leaf(w, &[4, 3], true);
            let y = t.matmul(xid, wid);
            let sm = t.softmax(y, 1);
            let s = t.sum_all(sm);
            t.backward(s);
            t.grad(xid).unwrap().iter().map(|v| v.to_bits() as u64).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_leaf_never_accumulates() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], false);
        let y = t.leaf(vec![3.0, 4.0], &[2], true);
        let p = t.mul(x, y);
        let s = t.sum_all(p);
        t.backward(s);
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_add_trailing_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], true);
        let b = t.leaf(vec![10.0, 20.0, 30.0], &[3], true);
        let y = t.add(x, b);
        assert_eq!(t.value(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = t.sum_all(y);
        t.backward(s);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "incompatible shapes")]
    fn broadcast_rejects_mismatch() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![0.0; 6], &[2, 3], false);
        let b = t.leaf(vec![0.0; 2], &[2], false);
        t.add(x, b);
    }

    #[test]
    fn gather_rows_forward_and_scatter_backward() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true);
        let gth = t.gather_rows(x, &[2, 0, 2]);
        assert_eq!(t.value(gth), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum_all(gth);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_backward_scatters() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], true);
        let sl = t.slice(x, 1, 1, 2);
        assert_eq!(t.value(sl), &[2.0, 3.0, 5.0, 6.0]);
        let s = t.sum_all(sl);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let mut rng = CounterRng::new(31);
        type Build = fn(&mut Tape<f64>, TensorId) -> TensorId;
        let cases: Vec<(&str, Build, f64, f64)> = vec![
            ("sigmoid", |t, x| t.sigmoid(x), -3.0, 3.0),
            ("gelu", |t, x| t.gelu(x), -3.0, 3.0),
            ("exp", |t, x| t.exp(x), -2.0, 2.0),
            ("ln", |t, x| t.ln(x), 0.3, 4.0),
            ("sqrt", |t, x| t.sqrt(x), 0.3, 4.0),
            ("recip", |t, x| t.recip(x), 0.4, 3.0),
            ("abs", |t, x| t.abs(x), 0.2, 3.0),
            ("relu", |t, x| t.relu(x), 0.2, 3.0),
            ("neg", |t, x| t.neg(x), -2.0, 2.0),
            ("tape_softmax", |t, x| t.softmax(x, 0), -2.0, 2.0),
        ];
        for (name, build, lo, hi) in cases {
            for probe in 0..20 {
                let x = rand_vec(&mut rng.derive(probe), 5, lo, hi);
                let err = grad_check(
                    |t: &mut Tape<f64>, xi| {
                        let y = build(t, xi);
                        let w = t.leaf(vec![0.7, -1.3, 0.4, 2.0, -0.2], &[5], false);
                        let yw = t.mul(y, w);
                        t.sum_all(yw)
                    },
                    &x,
                    &[5],
                    1e-6,
                    1e-8,
                );
                assert!(err < 1e-4, "{name} probe {probe}: grad err {err}");
            }
        }
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        // integer data and a dyadic step make the central difference exact
        let err = grad_check(
            |t: &mut Tape<f64>, x| t.sum_all(x),
            &[1.0, 2.0, 3.0],
            &[3],
            0.25,
            1e-12,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softmax_sum_is_constant() {
        // rows always sum to 1, so both gradients vanish; the floor keeps
        // the relative error meaningful for a near-zero denominator
        let err = grad_check(
            |t: &mut Tape<f64>, x| {
                let s = t.softmax(x, 0);
                t.sum_all(s)
            },
            &[0.3, -1.2, 0.8, 0.1],
            &[4],
            1e-5,
            1e-3,
        );
        assert!(err < 1e-7, "constant function should have ~zero error, got {err}");
    }

    #[test]
    fn upsample_constant_grid_stays_constant() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![0.7; 8 * 8], &[1, 64], false);
        let up = t.upsample_grid(x, 8, 8, 64, 64, true);
        for &v in t.value(up) {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let mut t2: Tape<f64> = Tape::new();
        let x2 = t2.leaf(vec![0.7; 64], &[1, 64], false);
        let up2 = t2.upsample_grid(x2, 8, 8, 64, 64, false);
        for &v in t2.value(up2) {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let mut rng = CounterRng::new(44);
        let x = rand_vec(&mut rng, 16, -1.0, 1.0);
        let err = grad_check(
            |t: &mut Tape<f64>, xi| {
                let up = t.upsample_grid(xi, 4, 4, 8, 8, true);
                let w: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 * 0.1 - 0.6).collect();
                let wid = t.leaf(w, &[1, 64], false);
                let z = t.mul(up, wid);
                t.sum_all(z)
            },
            &x,
            &[1, 16],
            1e-6,
            1e-8,
        );
        assert!(err < 1e-6, "upsample grad err {err}");
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut rng = CounterRng::new(61);
        for probe in 0..20 {
            let mut r = rng.derive(probe);
            let x = rand_vec(&mut r, 6, 0.5, 2.0);
            let other = rand_vec(&mut r, 6, 0.5, 2.0);
            for opi in 0..6 {
                let other2 = other.clone();
                let err = grad_check(
                    move |t: &mut Tape<f64>, xi| {
                        let o = t.leaf(other2.clone(), &[6], false);
                        let y = match opi {
                            0 => t.add(xi, o),
                            1 => t.sub(xi, o),
                            2 => t.mul(xi, o),
                            3 => t.div(xi, o),
                            4 => t.maximum(xi, o),
                            _ => t.minimum(xi, o),
                        };
                        let w = t.leaf(vec![1.0, -0.5, 0.3, 0.9, -1.1, 0.6], &[6], false);
                        let yw = t.mul(y, w);
                        t.sum_all(yw)
                    },
                    &x,
                    &[6],
                    1e-6,
                    1e-8,
                );
                assert!(err < 1e-4, "binary op {opi} probe {probe}: err {err}");
            }
        }
    }

    #[test]
    fn scale_rows_gradients() {
        let mut rng = CounterRng::new(77);
        let x = rand_vec(&mut rng, 6, -1.0, 1.0);
        let err = grad_check(
            |t: &mut Tape<f64>, xi| {
                let s = t.leaf(vec![0.5, -2.0], &[2], true);
                let y = t.scale_rows(xi, s);
                let w = t.leaf(vec![0.3, 1.0, -0.4, 0.8, 0.2, -1.5], &[2, 3], false);
                let yw = t.mul(y, w);
                t.sum_all(yw)
            },
            &x,
            &[2, 3],
            1e-6,
            1e-8,
        );
        assert!(err < 1e-6, "scale_rows grad err {err}");
    }
}

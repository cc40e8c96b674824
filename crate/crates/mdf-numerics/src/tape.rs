//! Reverse-mode autodiff over a flat operation tape.
//!
//! Nodes are appended in topological order (every input of a node precedes
//! it), and `backward` walks the tape exactly once in reverse. All gradient
//! accumulation is sequential, so runs are bitwise reproducible.

use crate::kernels::{mm_nn, softmax_rows, transposed};
use crate::real::{cast, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    MaskedMeanPool { x: Var, mask: Vec<T>, inv_counts: Vec<T> },
    MaskedMaxPool { x: Var, arg: Vec<usize> },
    SumAll(Var),
}

struct Node<T: Real> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, requires_grad, op });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Insert a tensor as a constant (no gradient regardless of its flag).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one was tracked.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if self.grads[v.0].is_empty() {
            None
        } else {
            Some(&self.grads[v.0])
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "add: shape mismatch {:?} vs {:?}", sa, sb);
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, shape, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "sub: shape mismatch {:?} vs {:?}", sa, sb);
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, shape, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "mul: shape mismatch {:?} vs {:?}", sa, sb);
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, shape, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    /// x: [rows, d] plus a broadcast bias [d].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let d = *self.shape(x).last().expect("add_bias: scalar input");
        assert_eq!(
            self.shape(bias),
            &[d],
            "add_bias: bias shape {:?} does not match last axis of {:?}",
            self.shape(bias),
            self.shape(x)
        );
        let bvals = self.value(bias).to_vec();
        let data: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bvals[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push(data, shape, rg, Op::AddBias(x, bias))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| gelu_tanh(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(data, shape, rg, Op::Gelu(x))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Standard 2D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: expected 2D operands, got {:?} and {:?}",
            sa,
            sb
        );
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions disagree: {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        mm_nn(self.value(a), self.value(b), &mut data, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, vec![m, n], rg, Op::Matmul(a, b))
    }

    /// Per-last-axis normalization to zero mean and unit variance, then a
    /// learned affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let d = *self.shape(x).last().expect("layer_norm: scalar input");
        assert!(d >= 1, "layer_norm: empty last axis in shape {:?}", self.shape(x));
        assert!(eps > T::zero(), "layer_norm: eps must be positive");
        assert_eq!(self.shape(gain), &[d], "layer_norm: gain shape {:?}, want [{}]", self.shape(gain), d);
        assert_eq!(self.shape(bias), &[d], "layer_norm: bias shape {:?}, want [{}]", self.shape(bias), d);
        let rows = self.value(x).len() / d;
        let mut data = vec![T::zero(); rows * d];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            let dn = cast::<T>(d as f64);
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let mean = xr.iter().copied().fold(T::zero(), |s, v| s + v) / dn;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |s, v| s + v) / dn;
                let inv = T::one() / (var + eps).sqrt();
                let out = &mut data[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = (xr[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(data, shape, rg, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Scaled dot-product attention over [B,H,T,dh] tiles. `mask` is an
    /// optional additive [T,T] matrix with entries in {0, -inf}; attention is
    /// bidirectional when it is absent.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor<T>>) -> Var {
        let s = self.shape(q).to_vec();
        assert_eq!(s.len(), 4, "softmax_attention: expected [B,H,T,dh], got {:?}", s);
        assert_eq!(self.shape(k), &s[..], "softmax_attention: k shape {:?} vs q {:?}", self.shape(k), s);
        assert_eq!(self.shape(v), &s[..], "softmax_attention: v shape {:?} vs q {:?}", self.shape(v), s);
        let (bsz, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            assert!(
                self.value(var).iter().all(|x| x.is_finite()),
                "softmax_attention: non-finite values in {name}"
            );
        }
        if let Some(m) = mask {
            assert_eq!(m.shape(), &[t, t], "softmax_attention: mask shape {:?}, want [{t},{t}]", m.shape());
        }
        let tiles = bsz * heads;
        let scale = cast::<T>(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); tiles * t * dh];
        let mut probs = vec![T::zero(); tiles * t * t];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for tile in 0..tiles {
                let o = tile * t * dh;
                let qt = &qv[o..o + t * dh];
                let kt = &kv[o..o + t * dh];
                let vt = &vv[o..o + t * dh];
                let ktr = transposed(kt, t, dh);
                let scores = &mut probs[tile * t * t..(tile + 1) * t * t];
                mm_nn(qt, &ktr, scores, t, dh, t);
                for sv in scores.iter_mut() {
                    *sv = *sv * scale;
                }
                if let Some(m) = mask {
                    for (sv, &mv) in scores.iter_mut().zip(m.data()) {
                        *sv = *sv + mv;
                    }
                }
                softmax_rows(scores, t, t);
                mm_nn(scores, vt, &mut out[o..o + t * dh], t, t, dh);
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        self.push(out, s, rg, Op::Attention { q, k, v, probs })
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.value(x).len(),
            "reshape: {:?} incompatible with {:?}",
            self.shape(x),
            shape
        );
        let data = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(data, shape, rg, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), in_shape.len(), "permute: rank mismatch {:?} vs {:?}", perm, in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_copy(self.value(x), &in_shape, perm);
        let rg = self.requires_grad(x);
        self.push(data, out_shape, rg, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Concatenate [rows, d_i] blocks along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0])[0];
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), 2, "concat_cols: expected 2D inputs, got {:?}", s);
            assert_eq!(s[0], rows, "concat_cols: row mismatch {:?} vs {}", s, rows);
            total += s[1];
        }
        let mut data = vec![T::zero(); rows * total];
        let mut col = 0usize;
        for &p in parts {
            let d = self.shape(p)[1];
            let src = self.value(p);
            for r in 0..rows {
                data[r * total + col..r * total + col + d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
            col += d;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(data, vec![rows, total], rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup into a [rows, d] table; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table);
        assert_eq!(s.len(), 2, "gather_rows: table must be 2D, got {:?}", s);
        let (rows, d) = (s[0], s[1]);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {} out of {} rows", i, rows);
        }
        let src = self.value(table);
        let mut data = vec![T::zero(); idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(data, vec![idx.len(), d], rg, Op::GatherRows { table, idx: idx.to_vec() })
    }

    /// Repeat each row of x [b, d] `times` times consecutively -> [b*times, d].
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "repeat_rows: expected 2D input, got {:?}", s);
        let (b, d) = (s[0], s[1]);
        let src = self.value(x);
        let mut data = vec![T::zero(); b * times * d];
        for r in 0..b {
            for rep in 0..times {
                data[(r * times + rep) * d..(r * times + rep + 1) * d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let rg = self.requires_grad(x);
        self.push(data, vec![b * times, d], rg, Op::RepeatRows { x, times })
    }

    /// Segment-wise masked mean over x [sets*per, d] -> [sets, d]. Rows with
    /// mask 0 contribute nothing; every segment must keep at least one active
    /// row.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[T], sets: usize) -> Var {
        let (rows, d, per) = self.pool_dims(x, mask.len(), sets, "masked_mean_pool");
        let mut inv_counts = vec![T::zero(); sets];
        for s in 0..sets {
            let count = mask[s * per..(s + 1) * per]
                .iter()
                .copied()
                .fold(T::zero(), |acc, v| acc + v);
            assert!(count > T::zero(), "masked_mean_pool: segment {} has no active rows", s);
            inv_counts[s] = T::one() / count;
        }
        let xv = self.value(x);
        let mut data = vec![T::zero(); sets * d];
        for r in 0..rows {
            let s = r / per;
            let w = mask[r] * inv_counts[s];
            if w == T::zero() {
                continue;
            }
            let out = &mut data[s * d..(s + 1) * d];
            for (o, &v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o = *o + v * w;
            }
        }
        let rg = self.requires_grad(x);
        self.push(data, vec![sets, d], rg, Op::MaskedMeanPool { x, mask: mask.to_vec(), inv_counts })
    }

    /// Segment-wise masked max over x [sets*per, d] -> [sets, d]. Gradient
    /// flows to the first row attaining each maximum.
    pub fn masked_max_pool(&mut self, x: Var, mask: &[T], sets: usize) -> Var {
        let (rows, d, per) = self.pool_dims(x, mask.len(), sets, "masked_max_pool");
        let xv = self.value(x);
        let mut data = vec![T::zero(); sets * d];
        let mut arg = vec![usize::MAX; sets * d];
        for r in 0..rows {
            if mask[r] <= T::zero() {
                continue;
            }
            let s = r / per;
            for j in 0..d {
                let v = xv[r * d + j];
                let slot = s * d + j;
                if arg[slot] == usize::MAX || v > data[slot] {
                    data[slot] = v;
                    arg[slot] = r * d + j;
                }
            }
        }
        for (s, chunk) in arg.chunks(d).enumerate() {
            assert!(
                chunk.iter().all(|&a| a != usize::MAX),
                "masked_max_pool: segment {} has no active rows",
                s
            );
        }
        let rg = self.requires_grad(x);
        self.push(data, vec![sets, d], rg, Op::MaskedMaxPool { x, arg })
    }

    fn pool_dims(&self, x: Var, mask_len: usize, sets: usize, what: &str) -> (usize, usize, usize) {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "{}: expected 2D input, got {:?}", what, s);
        let (rows, d) = (s[0], s[1]);
        assert!(sets >= 1 && rows % sets == 0, "{}: {} rows not divisible into {} segments", what, rows, sets);
        assert_eq!(mask_len, rows, "{}: mask length {} vs {} rows", what, mask_len, rows);
        (rows, d, rows / sets)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().fold(T::zero(), |acc, v| acc + v);
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![1], rg, Op::SumAll(x))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits every node exactly once.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let n = self.nodes.len();
        for i in 0..n {
            self.grads[i] = if self.nodes[i].requires_grad {
                vec![T::zero(); self.nodes[i].data.len()]
            } else {
                Vec::new()
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0][0] = T::one();

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.grads.split_at_mut(i);
            let g: &[T] = &tail[0];
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut head[a.0], g, T::one());
                    axpy(&mut head[b.0], g, T::one());
                }
                Op::Sub(a, b) => {
                    axpy(&mut head[a.0], g, T::one());
                    axpy(&mut head[b.0], g, -T::one());
                }
                Op::Mul(a, b) => {
                    if !head[a.0].is_empty() {
                        let bv = &self.nodes[b.0].data;
                        for ((da, &gv), &bv) in head[a.0].iter_mut().zip(g).zip(bv) {
                            *da = *da + gv * bv;
                        }
                    }
                    if !head[b.0].is_empty() {
                        let av = &self.nodes[a.0].data;
                        for ((db, &gv), &av) in head[b.0].iter_mut().zip(g).zip(av) {
                            *db = *db + gv * av;
                        }
                    }
                }
                Op::Scale(a, c) => axpy(&mut head[a.0], g, *c),
                Op::AddBias(x, bias) => {
                    axpy(&mut head[x.0], g, T::one());
                    if !head[bias.0].is_empty() {
                        let d = self.nodes[bias.0].data.len();
                        let db = &mut head[bias.0];
                        for (i, &gv) in g.iter().enumerate() {
                            db[i % d] = db[i % d] + gv;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if !head[a.0].is_empty() {
                        let bt = transposed(&self.nodes[b.0].data, k, nn);
                        let mut da = vec![T::zero(); m * k];
                        mm_nn(g, &bt, &mut da, m, nn, k);
                        axpy(&mut head[a.0], &da, T::one());
                    }
                    if !head[b.0].is_empty() {
                        let at = transposed(&self.nodes[a.0].data, m, k);
                        let mut db = vec![T::zero(); k * nn];
                        mm_nn(&at, g, &mut db, k, m, nn);
                        axpy(&mut head[b.0], &db, T::one());
                    }
                }
                Op::Gelu(x) => {
                    if !head[x.0].is_empty() {
                        let xv = &self.nodes[x.0].data;
                        for ((dx, &gv), &xv) in head[x.0].iter_mut().zip(g).zip(xv) {
                            *dx = *dx + gv * gelu_tanh_grad(xv);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let rows = self.nodes[x.0].data.len() / d;
                    let xv = &self.nodes[x.0].data;
                    let gv = &self.nodes[gain.0].data;
                    let dn = cast::<T>(d as f64);
                    let (xi, gi, bi) = (x.0, gain.0, bias.0);
                    let mut dx = vec![T::zero(); if head[xi].is_empty() { 0 } else { xv.len() }];
                    let mut dgain = vec![T::zero(); if head[gi].is_empty() { 0 } else { d }];
                    let mut dbias = vec![T::zero(); if head[bi].is_empty() { 0 } else { d }];
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().copied().fold(T::zero(), |s, v| s + v) / dn;
                        let var = xr
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .fold(T::zero(), |s, v| s + v)
                            / dn;
                        let inv = T::one() / (var + *eps).sqrt();
                        if !dgain.is_empty() || !dbias.is_empty() {
                            for j in 0..d {
                                let xhat = (xr[j] - mean) * inv;
                                if !dgain.is_empty() {
                                    dgain[j] = dgain[j] + gr[j] * xhat;
                                }
                                if !dbias.is_empty() {
                                    dbias[j] = dbias[j] + gr[j];
                                }
                            }
                        }
                        if !dx.is_empty() {
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for j in 0..d {
                                let xhat = (xr[j] - mean) * inv;
                                let dxhat = gr[j] * gv[j];
                                sum_dxhat = sum_dxhat + dxhat;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            }
                            for j in 0..d {
                                let xhat = (xr[j] - mean) * inv;
                                let dxhat = gr[j] * gv[j];
                                dx[r * d + j] = dx[r * d + j]
                                    + inv / dn * (dn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                    if !dx.is_empty() {
                        axpy(&mut head[xi], &dx, T::one());
                    }
                    if !dgain.is_empty() {
                        axpy(&mut head[gi], &dgain, T::one());
                    }
                    if !dbias.is_empty() {
                        axpy(&mut head[bi], &dbias, T::one());
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let s = &node.shape;
                    let (bsz, heads, t, dh) = (s[0], s[1], s[2], s[3]);
                    let tiles = bsz * heads;
                    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
                    let qv = &self.nodes[q.0].data;
                    let kv = &self.nodes[k.0].data;
                    let vv = &self.nodes[v.0].data;
                    let mut dq = vec![T::zero(); qv.len()];
                    let mut dk = vec![T::zero(); kv.len()];
                    let mut dv = vec![T::zero(); vv.len()];
                    let mut dp = vec![T::zero(); t * t];
                    let mut ds = vec![T::zero(); t * t];
                    let mut tmp = vec![T::zero(); t * dh];
                    for tile in 0..tiles {
                        let o = tile * t * dh;
                        let go = &g[o..o + t * dh];
                        let p = &probs[tile * t * t..(tile + 1) * t * t];
                        // dV = P^T dO
                        let pt = transposed(p, t, t);
                        mm_nn(&pt, go, &mut tmp, t, t, dh);
                        axpy(&mut dv[o..o + t * dh], &tmp, T::one());
                        // dP = dO V^T
                        let vt = transposed(&vv[o..o + t * dh], t, dh);
                        mm_nn(go, &vt, &mut dp, t, dh, t);
                        // softmax backward rows: dS = P .* (dP - rowdot(dP, P))
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dpr = &dp[r * t..(r + 1) * t];
                            let dot = pr
                                .iter()
                                .zip(dpr)
                                .map(|(&pv, &dv)| pv * dv)
                                .fold(T::zero(), |s, v| s + v);
                            for c in 0..t {
                                ds[r * t + c] = pr[c] * (dpr[c] - dot) * scale;
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        mm_nn(&ds, &kv[o..o + t * dh], &mut tmp, t, t, dh);
                        axpy(&mut dq[o..o + t * dh], &tmp, T::one());
                        let dst = transposed(&ds, t, t);
                        mm_nn(&dst, &qv[o..o + t * dh], &mut tmp, t, t, dh);
                        axpy(&mut dk[o..o + t * dh], &tmp, T::one());
                    }
                    if !head[q.0].is_empty() {
                        axpy(&mut head[q.0], &dq, T::one());
                    }
                    if !head[k.0].is_empty() {
                        axpy(&mut head[k.0], &dk, T::one());
                    }
                    if !head[v.0].is_empty() {
                        axpy(&mut head[v.0], &dv, T::one());
                    }
                }
                Op::Permute { x, perm } => {
                    if !head[x.0].is_empty() {
                        let inv = inverse_perm(perm);
                        let dg = permute_copy(g, &node.shape, &inv);
                        axpy(&mut head[x.0], &dg, T::one());
                    }
                }
                Op::Reshape(x) => axpy(&mut head[x.0], g, T::one()),
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut col = 0usize;
                    for &p in parts {
                        let d = self.nodes[p.0].shape[1];
                        if !head[p.0].is_empty() {
                            let dst = &mut head[p.0];
                            for r in 0..rows {
                                for j in 0..d {
                                    dst[r * d + j] = dst[r * d + j] + g[r * total + col + j];
                                }
                            }
                        }
                        col += d;
                    }
                }
                Op::GatherRows { table, idx } => {
                    if !head[table.0].is_empty() {
                        let d = self.nodes[table.0].shape[1];
                        let dst = &mut head[table.0];
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                dst[i * d + j] = dst[i * d + j] + g[r * d + j];
                            }
                        }
                    }
                }
                Op::RepeatRows { x, times } => {
                    if !head[x.0].is_empty() {
                        let d = self.nodes[x.0].shape[1];
                        let b = self.nodes[x.0].shape[0];
                        let dst = &mut head[x.0];
                        for r in 0..b {
                            for rep in 0..*times {
                                let src = &g[(r * times + rep) * d..(r * times + rep + 1) * d];
                                for j in 0..d {
                                    dst[r * d + j] = dst[r * d + j] + src[j];
                                }
                            }
                        }
                    }
                }
                Op::MaskedMeanPool { x, mask, inv_counts } => {
                    if !head[x.0].is_empty() {
                        let d = node.shape[1];
                        let per = mask.len() / node.shape[0];
                        let dst = &mut head[x.0];
                        for r in 0..mask.len() {
                            let s = r / per;
                            let w = mask[r] * inv_counts[s];
                            if w == T::zero() {
                                continue;
                            }
                            for j in 0..d {
                                dst[r * d + j] = dst[r * d + j] + g[s * d + j] * w;
                            }
                        }
                    }
                }
                Op::MaskedMaxPool { x, arg } => {
                    if !head[x.0].is_empty() {
                        let dst = &mut head[x.0];
                        for (slot, &a) in arg.iter().enumerate() {
                            dst[a] = dst[a] + g[slot];
                        }
                    }
                }
                Op::SumAll(x) => {
                    if !head[x.0].is_empty() {
                        let gv = g[0];
                        for dx in head[x.0].iter_mut() {
                            *dx = *dx + gv;
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    if dst.is_empty() {
        return;
    }
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s * c;
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_copy<T: Real>(x: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let numel: usize = in_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    if rank == 4 {
        // hot path for head split/merge: nested loops instead of per-element
        // index arithmetic
        let (s0, s1, s2, s3) = (
            in_strides[perm[0]],
            in_strides[perm[1]],
            in_strides[perm[2]],
            in_strides[perm[3]],
        );
        let mut oi = 0;
        for i0 in 0..out_shape[0] {
            for i1 in 0..out_shape[1] {
                for i2 in 0..out_shape[2] {
                    let base = i0 * s0 + i1 * s1 + i2 * s2;
                    for i3 in 0..out_shape[3] {
                        out[oi] = x[base + i3 * s3];
                        oi += 1;
                    }
                }
            }
        }
        return out;
    }
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut ii = 0usize;
        for d in 0..rank {
            ii += coords[d] * in_strides[perm[d]];
        }
        *slot = x[ii];
    }
    out
}

fn gelu_tanh<T: Real>(x: T) -> T {
    let c = cast::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = cast::<T>(0.044715);
    let inner = c * (x + a * x * x * x);
    cast::<T>(0.5) * x * (T::one() + crate::kernels::fast_tanh(inner))
}

fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = cast::<T>(0.797_884_560_802_865_4);
    let a = cast::<T>(0.044715);
    let inner = c * (x + a * x * x * x);
    let th = crate::kernels::fast_tanh(inner);
    let sech2 = T::one() - th * th;
    let dinner = c * (T::one() + cast::<T>(3.0) * a * x * x);
    cast::<T>(0.5) * (T::one() + th) + cast::<T>(0.5) * x * sech2 * dinner
}

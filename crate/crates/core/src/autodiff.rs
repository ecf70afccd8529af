//! Coarse-grained reverse-mode tape.
//!
//! Nodes are 2-D tensors; the operations are the batched building blocks of
//! the network (channel-mixing matmuls, TFN convolutions over an edge set,
//! attention scores, segment softmax, equivariant layer norm, ...), each with
//! a hand-written backward pass.
//!
//! Fibers of one irrep type `l` over `T` tokens are stored as a `T x (2l+1)·mult`
//! tensor in `m`-major order (`m * mult + c`), so that a Schur-constrained map
//! is a single matmul on the `(T·(2l+1)) x mult` view.

use std::sync::Arc;

use crate::fibers::SELF_EPS;
use crate::params::{ParamId, ParamStore};
use crate::real::{dot, Real};
use crate::so3::{contract_cg, sh_unchecked, CgStack, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Directed edges `source token -> target token` grouped by target (CSR),
/// with the geometry the TFN kernels need.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub n_targets: usize,
    pub n_sources: usize,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Edges of target `t` are `seg[t]..seg[t + 1]`.
    pub seg: Vec<usize>,
    /// `|x_source - x_target| / r_bar`.
    pub radius: Vec<f64>,
    /// Real harmonics of the edge direction for `J = 0, 1, 2`, each
    /// `E x (2J+1)`; zero for `J > 0` on self edges.
    pub sh: [Vec<f64>; 3],
}

impl EdgeSet {
    /// `lists[t]` holds the source tokens of target `t` in the order they are
    /// to be reduced.
    pub fn new(target_pos: &[Vec3], source_pos: &[Vec3], lists: &[Vec<usize>], radius_scale: f64) -> Self {
        assert_eq!(target_pos.len(), lists.len());
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        let mut seg = Vec::with_capacity(lists.len() + 1);
        let mut radius = Vec::new();
        let mut sh: [Vec<f64>; 3] = Default::default();
        seg.push(0);
        for (t, list) in lists.iter().enumerate() {
            for &s in list {
                let p = source_pos[s];
                let q = target_pos[t];
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                sources.push(s);
                targets.push(t);
                radius.push(r / radius_scale);
                if r < SELF_EPS {
                    sh[0].extend(sh_unchecked(0, [0.0, 0.0, 1.0]));
                    sh[1].extend([0.0; 3]);
                    sh[2].extend([0.0; 5]);
                } else {
                    let u = [d[0] / r, d[1] / r, d[2] / r];
                    for (j, buf) in sh.iter_mut().enumerate() {
                        buf.extend(sh_unchecked(j, u));
                    }
                }
            }
            seg.push(sources.len());
        }
        Self {
            n_targets: lists.len(),
            n_sources: source_pos.len(),
            sources,
            targets,
            seg,
            radius,
            sh,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Angular factors `C_J(x̂_e)` of one CG stack for every edge, each
    /// `(2k+1) x (2l+1)`.
    fn angular<T: Real>(&self, cg: &CgStack) -> Vec<T> {
        let dj = 2 * cg.j + 1;
        let per = cg.rows() * cg.cols();
        let mut out = Vec::with_capacity(self.len() * per);
        for e in 0..self.len() {
            let y = &self.sh[cg.j][e * dj..(e + 1) * dj];
            out.extend(contract_cg(cg, y).into_iter().map(T::of));
        }
        out
    }
}

/// One `(l, J)` input path of a TFN convolution into a fixed output type.
#[derive(Debug, Clone)]
pub struct TfnInput {
    pub l: usize,
    pub mult_in: usize,
    /// Source-token features, `n_sources x (2l+1)·mult_in`.
    pub feat: NodeId,
    /// Per-edge radial coefficients, `E x mult_out·mult_in` (`c_out`-major).
    pub radial: NodeId,
    pub cg: Arc<CgStack>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    /// `x` viewed as `(len / inner) x inner` times `w: inner x out`.
    MatMul {
        x: NodeId,
        w: NodeId,
        inner: usize,
    },
    /// Broadcast add of a `1 x n` row over the `(len / n) x n` view.
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tfn {
        k: usize,
        mult_out: usize,
        inputs: Vec<TfnInput>,
        edges: Arc<EdgeSet>,
        angular: Vec<Vec<T>>,
    },
    AttnScores {
        q: Vec<(NodeId, usize)>,
        k: Vec<NodeId>,
        edges: Arc<EdgeSet>,
        heads: usize,
        scale: T,
    },
    SegmentSoftmax {
        x: NodeId,
        edges: Arc<EdgeSet>,
    },
    AttnAggregate {
        alpha: NodeId,
        v: NodeId,
        d: usize,
        edges: Arc<EdgeSet>,
        heads: usize,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        d: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        d: usize,
    },
    /// Max over contiguous row groups of a `n x 1` column.
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Bce {
        p: NodeId,
        y: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of every node with respect to one scalar output.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Graph<T> {
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Node for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&(_, n)) = self.params.iter().find(|(p, _)| *p == id) {
            return n;
        }
        let n = self.push(store.tensor(id).clone(), Op::Param);
        self.params.push((id, n));
        n
    }

    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId, inner: usize) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.rows, inner, "matmul weight rows must equal the inner dimension");
        assert_eq!(xv.cols % inner, 0, "matmul inner dimension must divide the columns");
        let out = wv.cols;
        let rows = xv.len() / inner;
        let mut y = Tensor::zeros(xv.rows, xv.cols / inner * out);
        T::gemm(
            rows,
            inner,
            out,
            T::ONE,
            &xv.data,
            inner as isize,
            1,
            &wv.data,
            out as isize,
            1,
            T::ZERO,
            &mut y.data,
            out as isize,
            1,
        );
        self.push(y, Op::MatMul { x, w, inner })
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        assert_eq!(xv.len() % n, 0, "bias width must divide the tensor");
        let mut y = xv.clone();
        for chunk in y.data.chunks_mut(n) {
            for (a, c) in chunk.iter_mut().zip(&bv.data) {
                *a += *c;
            }
        }
        self.push(y, Op::AddBias { x, b })
    }

    /// `x · w + b` on the `(len / w.rows) x w.rows` view.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let inner = self.value(w).rows;
        let h = self.matmul(x, w, inner);
        self.add_bias(h, b)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            *v = softplus(*v);
        }
        self.push(y, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            *v = sigmoid(*v);
        }
        self.push(y, Op::Sigmoid(x))
    }

    /// TFN convolution into output type `k`: for every edge `e = (s -> t)`,
    /// `sum_{(l,J)} phi_J(r_e) C_J(x̂_e) f_l[s]`. Output is per edge.
    pub fn tfn(&mut self, k: usize, mult_out: usize, inputs: Vec<TfnInput>, edges: Arc<EdgeSet>) -> NodeId {
        let ne = edges.len();
        let dk = 2 * k + 1;
        let mut y = Tensor::zeros(ne, dk * mult_out);
        let mut angular = Vec::with_capacity(inputs.len());
        let mut g = Vec::new();
        for inp in &inputs {
            assert_eq!(inp.cg.k, k);
            assert_eq!(inp.cg.l, inp.l);
            let ang: Vec<T> = edges.angular(&inp.cg);
            let dl = 2 * inp.l + 1;
            let mi = inp.mult_in;
            let f = self.value(inp.feat);
            let phi = self.value(inp.radial);
            assert_eq!(f.cols, dl * mi, "tfn feature width");
            assert_eq!(phi.cols, mult_out * mi, "tfn radial width");
            assert_eq!(phi.rows, ne, "tfn radial rows");
            g.resize(dk * mi, T::ZERO);
            for e in 0..ne {
                let a = &ang[e * dk * dl..(e + 1) * dk * dl];
                let fs = f.row(edges.sources[e]);
                // g[M, c] = sum_m C[M, m] f[m, c]
                for mk in 0..dk {
                    let gr = &mut g[mk * mi..(mk + 1) * mi];
                    gr.iter_mut().for_each(|v| *v = T::ZERO);
                    for ml in 0..dl {
                        let c = a[mk * dl + ml];
                        if c == T::ZERO {
                            continue;
                        }
                        for (gv, fv) in gr.iter_mut().zip(&fs[ml * mi..(ml + 1) * mi]) {
                            *gv += c * *fv;
                        }
                    }
                }
                // y[e, M, o] += sum_c phi[e, o, c] g[M, c]
                let ph = phi.row(e);
                let yr = &mut y.data[e * dk * mult_out..(e + 1) * dk * mult_out];
                for mk in 0..dk {
                    let gr = &g[mk * mi..(mk + 1) * mi];
                    for o in 0..mult_out {
                        yr[mk * mult_out + o] += dot(&ph[o * mi..(o + 1) * mi], gr);
                    }
                }
            }
            angular.push(ang);
        }
        self.push(
            y,
            Op::Tfn {
                k,
                mult_out,
                inputs,
                edges,
                angular,
            },
        )
    }

    /// Scaled dot products between target-token queries and per-edge keys,
    /// split into heads by multiplicity ranges. `q` lists `(node, l)` per
    /// type, `k` the matching per-edge key nodes. Output `E x heads`.
    pub fn attn_scores(&mut self, q: Vec<(NodeId, usize)>, k: Vec<NodeId>, edges: Arc<EdgeSet>, heads: usize) -> NodeId {
        assert_eq!(q.len(), k.len());
        let mut dim = 0usize;
        for &(qn, l) in &q {
            dim += self.value(qn).cols;
            assert_eq!(self.value(qn).cols % (2 * l + 1), 0);
        }
        let scale = T::of(1.0 / ((dim / heads) as f64).sqrt());
        let ne = edges.len();
        let mut s = Tensor::zeros(ne, heads);
        for (&(qn, l), &kn) in q.iter().zip(&k) {
            let (qv, kv) = (self.value(qn), self.value(kn));
            let d = 2 * l + 1;
            let mult = qv.cols / d;
            assert_eq!(mult % heads, 0, "multiplicity must be divisible by heads");
            let hw = mult / heads;
            for e in 0..ne {
                let qr = qv.row(edges.targets[e]);
                let kr = kv.row(e);
                for m in 0..d {
                    for h in 0..heads {
                        let a = m * mult + h * hw;
                        s.data[e * heads + h] += dot(&qr[a..a + hw], &kr[a..a + hw]);
                    }
                }
            }
        }
        for v in &mut s.data {
            *v *= scale;
        }
        self.push(s, Op::AttnScores { q, k, edges, heads, scale })
    }

    /// Softmax over the edges of each target, per column.
    pub fn segment_softmax(&mut self, x: NodeId, edges: Arc<EdgeSet>) -> NodeId {
        let xv = self.value(x);
        let h = xv.cols;
        let mut y = xv.clone();
        for t in 0..edges.n_targets {
            let (a, b) = (edges.seg[t], edges.seg[t + 1]);
            for c in 0..h {
                let mut mx = T::of(f64::NEG_INFINITY);
                for e in a..b {
                    mx = mx.max(xv.data[e * h + c]);
                }
                let mut sum = T::ZERO;
                for e in a..b {
                    let v = (xv.data[e * h + c] - mx).exp();
                    y.data[e * h + c] = v;
                    sum += v;
                }
                for e in a..b {
                    y.data[e * h + c] = y.data[e * h + c] / sum;
                }
            }
        }
        self.push(y, Op::SegmentSoftmax { x, edges })
    }

    /// `out[t, m, c] = sum_{e -> t} alpha[e, head(c)] v[e, m, c]`.
    pub fn attn_aggregate(&mut self, alpha: NodeId, v: NodeId, d: usize, edges: Arc<EdgeSet>) -> NodeId {
        let (av, vv) = (self.value(alpha), self.value(v));
        let heads = av.cols;
        let mult = vv.cols / d;
        assert_eq!(mult % heads, 0, "multiplicity must be divisible by heads");
        let hw = mult / heads;
        let mut y = Tensor::zeros(edges.n_targets, vv.cols);
        for t in 0..edges.n_targets {
            let yr = &mut y.data[t * vv.cols..(t + 1) * vv.cols];
            for e in edges.seg[t]..edges.seg[t + 1] {
                let vr = vv.row(e);
                for m in 0..d {
                    for h in 0..heads {
                        let w = av.data[e * heads + h];
                        let a = m * mult + h * hw;
                        for c in a..a + hw {
                            yr[c] += w * vr[c];
                        }
                    }
                }
            }
        }
        self.push(y, Op::AttnAggregate { alpha, v, d, edges, heads })
    }

    /// Per-token, per-`m` concatenation of channels (`a` first).
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId, d: usize) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows);
        let (ma, mb) = (av.cols / d, bv.cols / d);
        let mut y = Tensor::zeros(av.rows, d * (ma + mb));
        for t in 0..av.rows {
            for m in 0..d {
                let dst = t * y.cols + m * (ma + mb);
                y.data[dst..dst + ma].copy_from_slice(&av.data[t * av.cols + m * ma..t * av.cols + (m + 1) * ma]);
                y.data[dst + ma..dst + ma + mb].copy_from_slice(&bv.data[t * bv.cols + m * mb..t * bv.cols + (m + 1) * mb]);
            }
        }
        self.push(y, Op::ConcatChannels { a, b, d })
    }

    /// Equivariant layer norm of one type block per token.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, d: usize) -> NodeId {
        let xv = self.value(x);
        let mult = xv.cols / d;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(g.len(), mult);
        assert_eq!(b.len(), mult);
        let mut y = xv.clone();
        let mut st = LnStats::new(mult);
        for t in 0..xv.rows {
            let row = xv.row(t);
            st.compute(row, d, g, b);
            let yr = &mut y.data[t * xv.cols..(t + 1) * xv.cols];
            for m in 0..d {
                for c in 0..mult {
                    yr[m * mult + c] *= st.s[c];
                }
            }
        }
        self.push(y, Op::LayerNorm { x, gamma, beta, d })
    }

    /// Max over row groups `starts[i]..starts[i + 1]` of an `n x 1` column;
    /// ties go to the lowest row.
    pub fn segment_max(&mut self, x: NodeId, starts: &[usize]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols, 1);
        let mut argmax = Vec::with_capacity(starts.len() - 1);
        let mut y = Tensor::zeros(starts.len() - 1, 1);
        for g in 0..starts.len() - 1 {
            let mut best = starts[g];
            for i in starts[g] + 1..starts[g + 1] {
                if xv.data[i] > xv.data[best] {
                    best = i;
                }
            }
            argmax.push(best);
            y.data[g] = xv.data[best];
        }
        self.push(y, Op::SegmentMax { x, argmax })
    }

    /// Mean binary cross-entropy of clamped probabilities.
    pub fn bce(&mut self, p: NodeId, y: &[f64]) -> NodeId {
        let pv = self.value(p);
        assert_eq!(pv.len(), y.len(), "prediction and label counts differ");
        let y: Vec<T> = y.iter().map(|&v| T::of(v)).collect();
        let loss = bce_value(&pv.data, &y);
        self.push(Tensor::scalar(loss), Op::Bce { p, y })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: NodeId) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        self.backward_with(out, Tensor::scalar(T::ONE))
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: NodeId, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads.resize(self.nodes.len(), None);
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { x, w, inner } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let inner = *inner;
                let out = wv.cols;
                let rows = xv.len() / inner;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                T::gemm(
                    rows,
                    out,
                    inner,
                    T::ONE,
                    &dy.data,
                    out as isize,
                    1,
                    &wv.data,
                    1,
                    out as isize,
                    T::ZERO,
                    &mut dx.data,
                    inner as isize,
                    1,
                );
                accumulate(grads, *x, dx);
                let mut dw = Tensor::zeros(wv.rows, wv.cols);
                T::gemm(
                    inner,
                    rows,
                    out,
                    T::ONE,
                    &xv.data,
                    1,
                    inner as isize,
                    &dy.data,
                    out as isize,
                    1,
                    T::ZERO,
                    &mut dw.data,
                    out as isize,
                    1,
                );
                accumulate(grads, *w, dw);
            }
            Op::AddBias { x, b } => {
                let bv = self.value(*b);
                let n = bv.len();
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                for chunk in dy.data.chunks(n) {
                    for (a, c) in db.data.iter_mut().zip(chunk) {
                        *a += *c;
                    }
                }
                accumulate(grads, *b, db);
                accumulate(grads, *x, dy.clone());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (d, v) in dx.data.iter_mut().zip(&xv.data) {
                    *d *= sigmoid(*v);
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = dy.clone();
                for (d, s) in dx.data.iter_mut().zip(&node.value.data) {
                    *d *= *s * (T::ONE - *s);
                }
                accumulate(grads, *x, dx);
            }
            Op::Tfn {
                k,
                mult_out,
                inputs,
                edges,
                angular,
            } => self.backward_tfn(*k, *mult_out, inputs, edges, angular, dy, grads),
            Op::AttnScores { q, k, edges, heads, scale } => {
                let heads = *heads;
                for (&(qn, l), &kn) in q.iter().zip(k) {
                    let (qv, kv) = (self.value(qn), self.value(kn));
                    let d = 2 * l + 1;
                    let mult = qv.cols / d;
                    let hw = mult / heads;
                    let mut dq = Tensor::zeros(qv.rows, qv.cols);
                    let mut dk = Tensor::zeros(kv.rows, kv.cols);
                    for e in 0..edges.len() {
                        let t = edges.targets[e];
                        let qr = qv.row(t);
                        let kr = kv.row(e);
                        let dqr = &mut dq.data[t * qv.cols..(t + 1) * qv.cols];
                        let dkr = &mut dk.data[e * kv.cols..(e + 1) * kv.cols];
                        for h in 0..heads {
                            let g = dy.data[e * heads + h] * *scale;
                            for m in 0..d {
                                let a = m * mult + h * hw;
                                for c in a..a + hw {
                                    dqr[c] += g * kr[c];
                                    dkr[c] += g * qr[c];
                                }
                            }
                        }
                    }
                    accumulate(grads, qn, dq);
                    accumulate(grads, kn, dk);
                }
            }
            Op::SegmentSoftmax { x, edges } => {
                let y = &node.value;
                let h = y.cols;
                let mut dx = Tensor::zeros(y.rows, h);
                for t in 0..edges.n_targets {
                    let (a, b) = (edges.seg[t], edges.seg[t + 1]);
                    for c in 0..h {
                        let mut dot = T::ZERO;
                        for e in a..b {
                            dot += y.data[e * h + c] * dy.data[e * h + c];
                        }
                        for e in a..b {
                            dx.data[e * h + c] = y.data[e * h + c] * (dy.data[e * h + c] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::AttnAggregate { alpha, v, d, edges, heads } => {
                let (av, vv) = (self.value(*alpha), self.value(*v));
                let heads = *heads;
                let mult = vv.cols / d;
                let hw = mult / heads;
                let mut da = Tensor::zeros(av.rows, av.cols);
                let mut dv = Tensor::zeros(vv.rows, vv.cols);
                for t in 0..edges.n_targets {
                    let dyr = dy.row(t);
                    for e in edges.seg[t]..edges.seg[t + 1] {
                        let vr = vv.row(e);
                        let dvr = &mut dv.data[e * vv.cols..(e + 1) * vv.cols];
                        for h in 0..heads {
                            let w = av.data[e * heads + h];
                            let mut acc = T::ZERO;
                            for m in 0..*d {
                                let a = m * mult + h * hw;
                                for c in a..a + hw {
                                    acc += dyr[c] * vr[c];
                                    dvr[c] += w * dyr[c];
                                }
                            }
                            da.data[e * heads + h] += acc;
                        }
                    }
                }
                accumulate(grads, *alpha, da);
                accumulate(grads, *v, dv);
            }
            Op::ConcatChannels { a, b, d } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ma, mb) = (av.cols / d, bv.cols / d);
                let mut da = Tensor::zeros(av.rows, av.cols);
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                for t in 0..av.rows {
                    for m in 0..*d {
                        let src = t * dy.cols + m * (ma + mb);
                        da.data[t * av.cols + m * ma..t * av.cols + (m + 1) * ma].copy_from_slice(&dy.data[src..src + ma]);
                        db.data[t * bv.cols + m * mb..t * bv.cols + (m + 1) * mb].copy_from_slice(&dy.data[src + ma..src + ma + mb]);
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::LayerNorm { x, gamma, beta, d } => {
                let xv = self.value(*x);
                let d = *d;
                let mult = xv.cols / d;
                let (g, b) = (&self.value(*gamma).data, &self.value(*beta).data);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dg = Tensor::zeros(1, mult);
                let mut db = Tensor::zeros(1, mult);
                let mut st = LnStats::new(mult);
                let mut dz = vec![T::ZERO; mult];
                let mut dn = vec![T::ZERO; mult];
                let inv_m = T::of(1.0 / mult as f64);
                let eps = T::of(crate::fibers::LN_EPS);
                for t in 0..xv.rows {
                    let row = xv.row(t);
                    let dyr = dy.row(t);
                    st.compute(row, d, g, b);
                    let dxr = &mut dx.data[t * xv.cols..(t + 1) * xv.cols];
                    for c in 0..mult {
                        let mut ds = T::ZERO;
                        for m in 0..d {
                            let idx = m * mult + c;
                            ds += dyr[idx] * row[idx];
                            dxr[idx] = st.s[c] * dyr[idx];
                        }
                        let ne = st.n[c] + eps;
                        let da = ds / ne;
                        dn[c] = -ds * st.a[c] / (ne * ne);
                        let du = if st.u[c] > T::ZERO { da } else { T::ZERO };
                        dg.data[c] += du * st.z[c];
                        db.data[c] += du;
                        dz[c] = du * g[c];
                    }
                    let mean_dz = dz.iter().copied().sum::<T>() * inv_m;
                    let mean_dzz = dz.iter().zip(&st.z).map(|(a, b)| *a * *b).sum::<T>() * inv_m;
                    for c in 0..mult {
                        let dnc = dn[c] + st.inv * (dz[c] - mean_dz - st.z[c] * mean_dzz);
                        if st.n[c] > T::ZERO {
                            let f = dnc / st.n[c];
                            for m in 0..d {
                                let idx = m * mult + c;
                                dxr[idx] += f * row[idx];
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, 1);
                for (g, &i) in argmax.iter().enumerate() {
                    dx.data[i] += dy.data[g];
                }
                accumulate(grads, *x, dx);
            }
            Op::Bce { p, y } => {
                let pv = self.value(*p);
                let n = T::of(pv.len() as f64);
                let lo = T::of(BCE_CLAMP);
                let hi = T::ONE - lo;
                let mut dp = Tensor::zeros(pv.rows, pv.cols);
                for ((d, &pi), &yi) in dp.data.iter_mut().zip(&pv.data).zip(y) {
                    if pi >= lo && pi <= hi {
                        *d = -(yi / pi - (T::ONE - yi) / (T::ONE - pi)) / n * dy.data[0];
                    }
                }
                accumulate(grads, *p, dp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_tfn(
        &self,
        k: usize,
        mult_out: usize,
        inputs: &[TfnInput],
        edges: &EdgeSet,
        angular: &[Vec<T>],
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let dk = 2 * k + 1;
        let ne = edges.len();
        for (inp, ang) in inputs.iter().zip(angular) {
            let dl = 2 * inp.l + 1;
            let mi = inp.mult_in;
            let f = self.value(inp.feat);
            let phi = self.value(inp.radial);
            let mut df = Tensor::zeros(f.rows, f.cols);
            let mut dphi = Tensor::zeros(phi.rows, phi.cols);
            let mut g = vec![T::ZERO; dk * mi];
            let mut dg = vec![T::ZERO; dk * mi];
            for e in 0..ne {
                let a = &ang[e * dk * dl..(e + 1) * dk * dl];
                let s = edges.sources[e];
                let fs = f.row(s);
                for mk in 0..dk {
                    let gr = &mut g[mk * mi..(mk + 1) * mi];
                    gr.iter_mut().for_each(|v| *v = T::ZERO);
                    for ml in 0..dl {
                        let c = a[mk * dl + ml];
                        if c == T::ZERO {
                            continue;
                        }
                        for (gv, fv) in gr.iter_mut().zip(&fs[ml * mi..(ml + 1) * mi]) {
                            *gv += c * *fv;
                        }
                    }
                }
                let ph = phi.row(e);
                let dyr = dy.row(e);
                let dph = &mut dphi.data[e * mult_out * mi..(e + 1) * mult_out * mi];
                dg.iter_mut().for_each(|v| *v = T::ZERO);
                for mk in 0..dk {
                    let gr = &g[mk * mi..(mk + 1) * mi];
                    let dgr = &mut dg[mk * mi..(mk + 1) * mi];
                    for o in 0..mult_out {
                        let go = dyr[mk * mult_out + o];
                        if go == T::ZERO {
                            continue;
                        }
                        let pr = &ph[o * mi..(o + 1) * mi];
                        let dpr = &mut dph[o * mi..(o + 1) * mi];
                        for c in 0..mi {
                            dpr[c] += go * gr[c];
                            dgr[c] += go * pr[c];
                        }
                    }
                }
                let dfs = &mut df.data[s * f.cols..(s + 1) * f.cols];
                for mk in 0..dk {
                    let dgr = &dg[mk * mi..(mk + 1) * mi];
                    for ml in 0..dl {
                        let c = a[mk * dl + ml];
                        if c == T::ZERO {
                            continue;
                        }
                        for (dv, gv) in dfs[ml * mi..(ml + 1) * mi].iter_mut().zip(dgr) {
                            *dv += c * *gv;
                        }
                    }
                }
            }
            accumulate(grads, inp.feat, df);
            accumulate(grads, inp.radial, dphi);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct LnStats<T> {
    n: Vec<T>,
    z: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
    s: Vec<T>,
    inv: T,
}

impl<T: Real> LnStats<T> {
    fn new(mult: usize) -> Self {
        Self {
            n: vec![T::ZERO; mult],
            z: vec![T::ZERO; mult],
            u: vec![T::ZERO; mult],
            a: vec![T::ZERO; mult],
            s: vec![T::ZERO; mult],
            inv: T::ZERO,
        }
    }

    fn compute(&mut self, row: &[T], d: usize, g: &[T], b: &[T]) {
        let mult = self.n.len();
        let eps = T::of(crate::fibers::LN_EPS);
        let inv_m = T::of(1.0 / mult as f64);
        for c in 0..mult {
            let mut acc = T::ZERO;
            for m in 0..d {
                let v = row[m * mult + c];
                acc += v * v;
            }
            self.n[c] = acc.sqrt();
        }
        let mean = self.n.iter().copied().sum::<T>() * inv_m;
        let var = self.n.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        self.inv = T::ONE / (var + eps).sqrt();
        for c in 0..mult {
            self.z[c] = (self.n[c] - mean) * self.inv;
            self.u[c] = g[c] * self.z[c] + b[c];
            self.a[c] = self.u[c].max(T::ZERO);
            self.s[c] = self.a[c] / (self.n[c] + eps);
        }
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else if x < T::of(-30.0) {
        x.exp()
    } else {
        (T::ONE + x.exp()).ln()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_value<T: Real>(p: &[T], y: &[T]) -> T {
    let lo = T::of(BCE_CLAMP);
    let hi = T::ONE - lo;
    let mut acc = T::ZERO;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = if pi < lo {
            lo
        } else if pi > hi {
            hi
        } else {
            pi
        };
        acc += yi * pc.ln() + (T::ONE - yi) * (T::ONE - pc).ln();
    }
    -acc / T::of(p.len() as f64)
}

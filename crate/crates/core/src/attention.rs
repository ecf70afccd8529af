//! Equivariant self- and cross-attention blocks.
//!
//! A block maps query-token fibers and source-token fibers to new query-token
//! fibers: `W_Q` on the query, TFN kernels for keys and values on the
//! displacement `x_source - x_query`, scaled dot-product scores per head,
//! softmax over each neighborhood, head merge, output projection `W_P`, skip
//! concatenation with the query input, projection to the block output type
//! and equivariant layer norm.
//!
//! Two implementations live here: a per-token `f64` reference built from
//! [`crate::fibers`], and a batched builder on the autodiff tape used by the
//! model. Tests hold them to each other.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{EdgeSet, Graph, NodeId, Tensor, TfnInput};
use crate::error::{contract, Error, Result};
use crate::fibers::{
    apply_kernel, equiv_layer_norm, head_merge, head_split, kernel_paths, skip_concat, tfn_kernel_eval, EquivLinear, FiberType, FiberVec,
    KernelPath, LayerNormAffine, RadialMlp, TfnKernelParams, RADIAL_HIDDEN,
};
use crate::geometry::{sub, Neighborhood, PointCloud};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::so3::{CgTable, Vec3};

/// Initial shift of the layer-norm affine map.
pub const LN_BETA_INIT: f64 = 0.5;

/// Fiber types of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub heads: usize,
    /// Fiber of the query token (also the skip input).
    pub query_in: FiberType,
    /// Fiber of the key/value source tokens.
    pub source_in: FiberType,
    /// Query and key type: the query input's irrep types at the block width.
    pub qk: FiberType,
    pub value: FiberType,
    pub out: FiberType,
}

impl BlockSpec {
    /// Block of width `mult` producing `out_types`; values carry exactly the
    /// output types.
    pub fn new(heads: usize, mult: usize, query_in: FiberType, source_in: FiberType, out: FiberType) -> Result<Self> {
        if heads == 0 || mult % heads != 0 {
            return Err(Error::Config(format!("width {mult} is not divisible by {heads} heads")));
        }
        let qk = FiberType::new(query_in.types().map(|l| (l, mult)).collect())?;
        let value = FiberType::new(out.types().map(|l| (l, mult)).collect())?;
        let concat = value.concat(&query_in);
        if out.types().any(|l| concat.mult(l).is_none()) {
            return Err(Error::Config("block output type not reachable from values and skip".into()));
        }
        Ok(Self {
            heads,
            query_in,
            source_in,
            qk,
            value,
            out,
        })
    }

    pub fn skip_type(&self) -> FiberType {
        self.value.concat(&self.query_in)
    }
}

/// Reference parameters of one block.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub spec: BlockSpec,
    pub w_q: EquivLinear,
    pub key: TfnKernelParams,
    pub value: TfnKernelParams,
    pub w_p: EquivLinear,
    pub w_skip: EquivLinear,
    pub norm: LayerNormAffine,
}

impl AttentionBlockParams {
    pub fn random(spec: BlockSpec, radius_scale: f64, rng: &mut Rng) -> Self {
        let gamma = spec
            .out
            .entries()
            .iter()
            .map(|&(l, m)| (l, (0..m).map(|_| rng.random_range(0.5..1.5)).collect()));
        let gamma = gamma.collect();
        let beta = spec
            .out
            .entries()
            .iter()
            .map(|&(l, m)| (l, (0..m).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        Self {
            w_q: EquivLinear::random(spec.query_in.clone(), spec.qk.clone(), rng),
            key: TfnKernelParams::random(spec.source_in.clone(), spec.qk.clone(), radius_scale, rng),
            value: TfnKernelParams::random(spec.source_in.clone(), spec.value.clone(), radius_scale, rng),
            w_p: EquivLinear::random(spec.value.clone(), spec.value.clone(), rng),
            w_skip: EquivLinear::random(spec.skip_type(), spec.out.clone(), rng),
            norm: LayerNormAffine { gamma, beta },
            spec,
        }
    }

    pub fn with_cg(mut self, cg: Arc<CgTable>) -> Self {
        self.key.cg = cg.clone();
        self.value.cg = cg;
        self
    }
}

/// `<q, k> / sqrt(dim q)`.
pub fn attention_kernel(q: &FiberVec, k: &FiberVec) -> Result<f64> {
    if q.ftype != k.ftype {
        return Err(contract(format!("attention kernel on {} and {}", q.ftype, k.ftype)));
    }
    let dot: f64 = q.data.iter().zip(&k.data).map(|(a, b)| a * b).sum();
    Ok(dot / (q.ftype.dim() as f64).sqrt())
}

/// Per-neighbor attention weights of one output token, one list per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub neighbors: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One output token: query `(pos, f)` attending over `sources`.
fn attend(
    p: &AttentionBlockParams,
    query_pos: Vec3,
    query_feat: &FiberVec,
    sources: &[(usize, Vec3, &FiberVec)],
) -> Result<(FiberVec, AttentionWeights)> {
    if sources.is_empty() {
        return Err(contract("attention over an empty neighborhood"));
    }
    let heads = p.spec.heads;
    let q = p.w_q.apply(query_feat)?;
    let qh = head_split(&q, heads)?;
    let mut scores = vec![Vec::with_capacity(sources.len()); heads];
    let mut values = Vec::with_capacity(sources.len());
    for &(_, pos, f) in sources {
        let dx = sub(pos, query_pos);
        let k = apply_kernel(&p.key, &tfn_kernel_eval(&p.key, dx), f)?;
        let v = apply_kernel(&p.value, &tfn_kernel_eval(&p.value, dx), f)?;
        for (h, kh) in head_split(&k, heads)?.iter().enumerate() {
            scores[h].push(attention_kernel(&qh[h], kh)?);
        }
        values.push(head_split(&v, heads)?);
    }
    let weights: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
    let mut parts = Vec::with_capacity(heads);
    for (h, w) in weights.iter().enumerate() {
        let mut acc = FiberVec::zeros(values[0][h].ftype.clone());
        for (j, v) in values.iter().enumerate() {
            for (a, b) in acc.data.iter_mut().zip(&v[h].data) {
                *a += w[j] * b;
            }
        }
        parts.push(acc);
    }
    let merged = head_merge(&parts)?;
    let projected = p.w_p.apply(&merged)?;
    let skipped = skip_concat(&projected, query_feat);
    let out = equiv_layer_norm(&p.w_skip.apply(&skipped)?, &p.norm);
    let attn = AttentionWeights {
        neighbors: sources.iter().map(|s| s.0).collect(),
        weights,
    };
    Ok((out, attn))
}

/// Self-attention over every point's neighborhood.
pub fn self_attention_layer(feats: &[FiberVec], x: &PointCloud, nbrs: &[Neighborhood], p: &AttentionBlockParams) -> Result<Vec<FiberVec>> {
    Ok(self_attention_with_weights(feats, x, nbrs, p)?.into_iter().map(|r| r.0).collect())
}

pub fn self_attention_with_weights(
    feats: &[FiberVec],
    x: &PointCloud,
    nbrs: &[Neighborhood],
    p: &AttentionBlockParams,
) -> Result<Vec<(FiberVec, AttentionWeights)>> {
    if feats.len() != x.len() || nbrs.len() != x.len() {
        return Err(contract("one fiber and one neighborhood per point expected"));
    }
    let pts = x.points();
    (0..x.len())
        .map(|i| {
            let sources: Vec<(usize, Vec3, &FiberVec)> = nbrs[i].indices.iter().map(|&j| (j, pts[j], &feats[j])).collect();
            attend(p, pts[i], &feats[i], &sources)
        })
        .collect()
}

/// Cross-attention of the query token `(q, f_q)` over the neighborhood `nbr`.
pub fn cross_attention_layer(
    pc_feats: &[FiberVec],
    x: &PointCloud,
    q: Vec3,
    f_q: &FiberVec,
    nbr: &Neighborhood,
    p: &AttentionBlockParams,
) -> Result<FiberVec> {
    let pts = x.points();
    let sources: Vec<(usize, Vec3, &FiberVec)> = nbr.indices.iter().map(|&j| (j, pts[j], &pc_feats[j])).collect();
    Ok(attend(p, q, f_q, &sources)?.0)
}

/// Stored parameters of one radial MLP path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathIds {
    pub k: usize,
    pub l: usize,
    pub j: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Stored parameters of one block. Equivariant-linear blocks are kept as
/// `in_mult x out_mult` matrices (the transpose of [`EquivLinear`] blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub spec: BlockSpec,
    pub w_q: BTreeMap<usize, ParamId>,
    pub key: Vec<PathIds>,
    pub value: Vec<PathIds>,
    pub w_p: BTreeMap<usize, ParamId>,
    pub w_skip: BTreeMap<usize, ParamId>,
    pub ln_gamma: BTreeMap<usize, ParamId>,
    pub ln_beta: BTreeMap<usize, ParamId>,
}

fn uniform<T: Real>(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(rng.random_range(-a..a))).collect())
}

fn register_linear<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    from: &FiberType,
    to: &FiberType,
    rng: &mut Rng,
) -> Result<BTreeMap<usize, ParamId>> {
    let mut out = BTreeMap::new();
    for &(l, mo) in to.entries() {
        if let Some(mi) = from.mult(l) {
            out.insert(l, store.add(format!("{name}.l{l}"), uniform(rng, mi, mo, mi))?);
        }
    }
    Ok(out)
}

fn register_kernel<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    from: &FiberType,
    to: &FiberType,
    rng: &mut Rng,
) -> Result<Vec<PathIds>> {
    let h = RADIAL_HIDDEN;
    kernel_paths(from, to)
        .into_iter()
        .map(|(k, l, j)| {
            let n = to.mult(k).unwrap() * from.mult(l).unwrap();
            let p = format!("{name}.k{k}l{l}j{j}");
            Ok(PathIds {
                k,
                l,
                j,
                w1: store.add(format!("{p}.w1"), uniform(rng, 1, h, 1))?,
                b1: store.add(format!("{p}.b1"), uniform(rng, 1, h, 1))?,
                w2: store.add(format!("{p}.w2"), uniform(rng, h, h, h))?,
                b2: store.add(format!("{p}.b2"), uniform(rng, 1, h, h))?,
                w3: store.add(format!("{p}.w3"), uniform(rng, h, n, h))?,
                b3: store.add(format!("{p}.b3"), uniform(rng, 1, n, h))?,
            })
        })
        .collect()
}

impl BlockIds {
    /// Create and initialize every parameter of a block under `prefix`.
    pub fn register<T: Real>(spec: &BlockSpec, prefix: &str, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        let w_q = register_linear(store, &format!("{prefix}.w_q"), &spec.query_in, &spec.qk, rng)?;
        let key = register_kernel(store, &format!("{prefix}.key"), &spec.source_in, &spec.qk, rng)?;
        let value = register_kernel(store, &format!("{prefix}.value"), &spec.source_in, &spec.value, rng)?;
        let w_p = register_linear(store, &format!("{prefix}.w_p"), &spec.value, &spec.value, rng)?;
        let w_skip = register_linear(store, &format!("{prefix}.w_skip"), &spec.skip_type(), &spec.out, rng)?;
        let mut ln_gamma = BTreeMap::new();
        let mut ln_beta = BTreeMap::new();
        for &(l, m) in spec.out.entries() {
            let g = Tensor::from_vec(1, m, vec![T::ONE; m]);
            let b = Tensor::from_vec(1, m, vec![T::of(LN_BETA_INIT); m]);
            ln_gamma.insert(l, store.add(format!("{prefix}.ln.l{l}.gamma"), g)?);
            ln_beta.insert(l, store.add(format!("{prefix}.ln.l{l}.beta"), b)?);
        }
        Ok(Self {
            spec: spec.clone(),
            w_q,
            key,
            value,
            w_p,
            w_skip,
            ln_gamma,
            ln_beta,
        })
    }

    /// Look up the parameters of a block registered under `prefix`.
    pub fn lookup<T: Real>(spec: &BlockSpec, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        let get = |name: String| store.id(&name).ok_or_else(|| Error::Format(format!("missing parameter {name}")));
        let linear = |name: &str, from: &FiberType, to: &FiberType| -> Result<BTreeMap<usize, ParamId>> {
            let mut out = BTreeMap::new();
            for &(l, _) in to.entries() {
                if from.mult(l).is_some() {
                    out.insert(l, get(format!("{prefix}.{name}.l{l}"))?);
                }
            }
            Ok(out)
        };
        let kernel = |name: &str, from: &FiberType, to: &FiberType| -> Result<Vec<PathIds>> {
            kernel_paths(from, to)
                .into_iter()
                .map(|(k, l, j)| {
                    let p = format!("{prefix}.{name}.k{k}l{l}j{j}");
                    Ok(PathIds {
                        k,
                        l,
                        j,
                        w1: get(format!("{p}.w1"))?,
                        b1: get(format!("{p}.b1"))?,
                        w2: get(format!("{p}.w2"))?,
                        b2: get(format!("{p}.b2"))?,
                        w3: get(format!("{p}.w3"))?,
                        b3: get(format!("{p}.b3"))?,
                    })
                })
                .collect()
        };
        let mut ln_gamma = BTreeMap::new();
        let mut ln_beta = BTreeMap::new();
        for l in spec.out.types() {
            ln_gamma.insert(l, get(format!("{prefix}.ln.l{l}.gamma"))?);
            ln_beta.insert(l, get(format!("{prefix}.ln.l{l}.beta"))?);
        }
        Ok(Self {
            spec: spec.clone(),
            w_q: linear("w_q", &spec.query_in, &spec.qk)?,
            key: kernel("key", &spec.source_in, &spec.qk)?,
            value: kernel("value", &spec.source_in, &spec.value)?,
            w_p: linear("w_p", &spec.value, &spec.value)?,
            w_skip: linear("w_skip", &spec.skip_type(), &spec.out)?,
            ln_gamma,
            ln_beta,
        })
    }

    /// The reference-form parameters held in `store`.
    pub fn reference<T: Real>(&self, store: &ParamStore<T>, radius_scale: f64, cg: Arc<CgTable>) -> AttentionBlockParams {
        let vals = |id: ParamId| store.tensor(id).to_f64();
        let linear = |ids: &BTreeMap<usize, ParamId>, from: &FiberType, to: &FiberType| {
            let blocks = ids
                .iter()
                .map(|(&l, &id)| {
                    let t = store.tensor(id);
                    let (mi, mo) = (t.rows, t.cols);
                    let mut b = vec![0.0; mi * mo];
                    for i in 0..mi {
                        for o in 0..mo {
                            b[o * mi + i] = t.data[i * mo + o].to_f64();
                        }
                    }
                    (l, b)
                })
                .collect();
            EquivLinear::new(from.clone(), to.clone(), blocks).expect("stored block shapes")
        };
        let kernel = |paths: &[PathIds], from: &FiberType, to: &FiberType| TfnKernelParams {
            in_type: from.clone(),
            out_type: to.clone(),
            paths: paths
                .iter()
                .map(|p| KernelPath {
                    k: p.k,
                    l: p.l,
                    j: p.j,
                    radial: RadialMlp {
                        out_mult: to.mult(p.k).unwrap(),
                        in_mult: from.mult(p.l).unwrap(),
                        w1: vals(p.w1),
                        b1: vals(p.b1),
                        w2: vals(p.w2),
                        b2: vals(p.b2),
                        w3: vals(p.w3),
                        b3: vals(p.b3),
                    },
                })
                .collect(),
            radius_scale,
            cg: cg.clone(),
        };
        let s = &self.spec;
        AttentionBlockParams {
            spec: s.clone(),
            w_q: linear(&self.w_q, &s.query_in, &s.qk),
            key: kernel(&self.key, &s.source_in, &s.qk),
            value: kernel(&self.value, &s.source_in, &s.value),
            w_p: linear(&self.w_p, &s.value, &s.value),
            w_skip: linear(&self.w_skip, &s.skip_type(), &s.out),
            norm: LayerNormAffine {
                gamma: self.ln_gamma.iter().map(|(&l, &id)| (l, vals(id))).collect(),
                beta: self.ln_beta.iter().map(|(&l, &id)| (l, vals(id))).collect(),
            },
        }
    }
}

/// Fibers of a set of tokens on the tape: one `tokens x (2l+1)·mult` node per
/// entry of `ftype`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatNodes {
    pub ftype: FiberType,
    pub nodes: Vec<NodeId>,
}

impl FeatNodes {
    pub fn node(&self, l: usize) -> Option<NodeId> {
        self.ftype.types().position(|t| t == l).map(|i| self.nodes[i])
    }

    /// Leaves holding the given fibers (one per token).
    pub fn leaves<T: Real>(g: &mut Graph<T>, ftype: &FiberType, fibers: &[FiberVec]) -> Self {
        let nodes = ftype
            .entries()
            .iter()
            .map(|&(l, m)| {
                let width = (2 * l + 1) * m;
                let mut data = Vec::with_capacity(fibers.len() * width);
                for f in fibers {
                    data.extend(f.m_major(l).into_iter().map(T::of));
                }
                g.leaf(Tensor::from_vec(fibers.len(), width, data))
            })
            .collect();
        Self {
            ftype: ftype.clone(),
            nodes,
        }
    }

    /// Read the fibers of every token back.
    pub fn fibers<T: Real>(&self, g: &Graph<T>) -> Vec<FiberVec> {
        let rows = self.nodes.first().map(|&n| g.value(n).rows).unwrap_or(0);
        (0..rows)
            .map(|t| {
                let blocks: Vec<Vec<f64>> = self
                    .nodes
                    .iter()
                    .map(|&n| g.value(n).row(t).iter().map(|v| v.to_f64()).collect())
                    .collect();
                FiberVec::from_m_major(self.ftype.clone(), &blocks).expect("node widths match the fiber type")
            })
            .collect()
    }
}

fn radial_mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, p: &PathIds, radius: NodeId) -> NodeId {
    let (w1, b1, w2, b2, w3, b3) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
        g.param(store, p.w3),
        g.param(store, p.b3),
    );
    let h = g.affine(radius, w1, b1);
    let h = g.softplus(h);
    let h = g.affine(h, w2, b2);
    let h = g.softplus(h);
    g.affine(h, w3, b3)
}

#[allow(clippy::too_many_arguments)]
fn tfn_kernel_nodes<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    paths: &[PathIds],
    from: &FiberType,
    to: &FiberType,
    source: &FeatNodes,
    edges: &Arc<EdgeSet>,
    radius: NodeId,
    cg: &CgTable,
) -> Vec<NodeId> {
    to.entries()
        .iter()
        .map(|&(k, mo)| {
            let inputs = paths
                .iter()
                .filter(|p| p.k == k)
                .map(|p| TfnInput {
                    l: p.l,
                    mult_in: from.mult(p.l).unwrap(),
                    feat: source.node(p.l).expect("source fiber carries the path input type"),
                    radial: radial_mlp(g, store, p, radius),
                    cg: Arc::new(cg.get(p.k, p.l, p.j).clone()),
                })
                .collect();
            g.tfn(k, mo, inputs, edges.clone())
        })
        .collect()
}

fn linear_nodes<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &BTreeMap<usize, ParamId>,
    x: &FeatNodes,
    to: &FiberType,
) -> FeatNodes {
    let nodes = to
        .types()
        .map(|l| {
            let w = g.param(store, ids[&l]);
            let xn = x.node(l).expect("linear input carries the output type");
            g.matmul(xn, w, x.ftype.mult(l).unwrap())
        })
        .collect();
    FeatNodes { ftype: to.clone(), nodes }
}

/// Batched block on the tape. `edges` runs from source tokens to query
/// tokens; `radius` is the `E x 1` leaf of normalized edge lengths.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &BlockIds,
    query: &FeatNodes,
    source: &FeatNodes,
    edges: &Arc<EdgeSet>,
    radius: NodeId,
    cg: &CgTable,
) -> FeatNodes {
    let s = &ids.spec;
    debug_assert_eq!(query.ftype, s.query_in);
    debug_assert_eq!(source.ftype, s.source_in);
    let q = linear_nodes(g, store, &ids.w_q, query, &s.qk);
    let k = tfn_kernel_nodes(g, store, &ids.key, &s.source_in, &s.qk, source, edges, radius, cg);
    let v = tfn_kernel_nodes(g, store, &ids.value, &s.source_in, &s.value, source, edges, radius, cg);
    let qs: Vec<(NodeId, usize)> = q.nodes.iter().copied().zip(s.qk.types()).collect();
    let scores = g.attn_scores(qs, k, edges.clone(), s.heads);
    let alpha = g.segment_softmax(scores, edges.clone());
    let agg = FeatNodes {
        ftype: s.value.clone(),
        nodes: s
            .value
            .types()
            .zip(&v)
            .map(|(l, &vn)| g.attn_aggregate(alpha, vn, 2 * l + 1, edges.clone()))
            .collect(),
    };
    let proj = linear_nodes(g, store, &ids.w_p, &agg, &s.value);
    let skip_type = s.skip_type();
    let skip = FeatNodes {
        ftype: skip_type.clone(),
        nodes: skip_type
            .types()
            .map(|l| match (proj.node(l), query.node(l)) {
                (Some(a), Some(b)) => g.concat_channels(a, b, 2 * l + 1),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            })
            .collect(),
    };
    let pre = linear_nodes(g, store, &ids.w_skip, &skip, &s.out);
    let nodes = s
        .out
        .types()
        .zip(&pre.nodes)
        .map(|(l, &x)| {
            let gamma = g.param(store, ids.ln_gamma[&l]);
            let beta = g.param(store, ids.ln_beta[&l]);
            g.layer_norm(x, gamma, beta, 2 * l + 1)
        })
        .collect();
    FeatNodes {
        ftype: s.out.clone(),
        nodes,
    }
}

/// Edge set and normalized radius leaf for neighborhood lists.
pub fn edges_on_graph<T: Real>(
    g: &mut Graph<T>,
    target_pos: &[Vec3],
    source_pos: &[Vec3],
    lists: &[Vec<usize>],
    radius_scale: f64,
) -> (Arc<EdgeSet>, NodeId) {
    let edges = Arc::new(EdgeSet::new(target_pos, source_pos, lists, radius_scale));
    let radius = g.leaf(Tensor::from_f64(edges.len(), 1, &edges.radius));
    (edges, radius)
}

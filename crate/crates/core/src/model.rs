//! The occupancy network: a self-attention encoder producing one type-1
//! feature per point, and a cross-attention decoder turning a query point
//! into an occupancy score.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{block_forward, edges_on_graph, BlockIds, BlockSpec, FeatNodes};
use crate::autodiff::{EdgeSet, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::fibers::{euclid_to_sh, FiberType, FiberVec, RADIAL_HIDDEN};
use crate::geometry::{BoundingBox, CloudIndex, PointCloud};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::recon::{marching_cubes, Mesh, OccupancyGrid};
use crate::rng::{Rng, SeedStream};
use crate::so3::{CgTable, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mult: usize,
    pub irrep_types: Vec<usize>,
    pub k: usize,
    pub dec_out_scalars: usize,
    pub head_hidden: usize,
    pub occ_threshold: f64,
    pub radial_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The published architecture.
    pub fn paper() -> Self {
        Self {
            enc_layers: 10,
            dec_layers: 2,
            heads: 8,
            mult: 32,
            irrep_types: vec![0, 1],
            k: 15,
            dec_out_scalars: 32,
            head_hidden: 64,
            occ_threshold: 0.2,
            radial_hidden: RADIAL_HIDDEN,
            seed: 0,
        }
    }

    /// A reduced architecture that trains on a single CPU core.
    pub fn desk() -> Self {
        Self {
            enc_layers: 3,
            dec_layers: 2,
            heads: 2,
            mult: 8,
            dec_out_scalars: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer each".into());
        }
        if self.heads == 0 || self.mult == 0 || self.mult % self.heads != 0 {
            return bad(format!("mult {} must be a positive multiple of heads {}", self.mult, self.heads));
        }
        if !self.irrep_types.contains(&1) || self.irrep_types.iter().any(|&l| l > 2) {
            return bad("irrep types must include 1 and lie in 0..=2".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.dec_out_scalars == 0 || self.head_hidden == 0 {
            return bad("output head widths must be positive".into());
        }
        if !(self.occ_threshold > 0.0 && self.occ_threshold < 1.0) {
            return bad(format!("occupancy threshold {} outside (0, 1)", self.occ_threshold));
        }
        if self.radial_hidden != RADIAL_HIDDEN {
            return bad(format!("radial hidden width is fixed at {RADIAL_HIDDEN}"));
        }
        Ok(())
    }

    fn hidden(&self) -> FiberType {
        FiberType::new(self.irrep_types.iter().map(|&l| (l, self.mult)).collect()).expect("validated irrep types")
    }

    /// Type of the encoder output `f_P`.
    pub fn point_feature_type(&self) -> FiberType {
        FiberType::single(1, self.mult)
    }

    pub fn encoder_specs(&self) -> Result<Vec<BlockSpec>> {
        let input = FiberType::single(1, 1);
        (0..self.enc_layers)
            .map(|i| {
                let q = if i == 0 { input.clone() } else { self.hidden() };
                let out = if i + 1 == self.enc_layers {
                    self.point_feature_type()
                } else {
                    self.hidden()
                };
                BlockSpec::new(self.heads, self.mult, q.clone(), q, out)
            })
            .collect()
    }

    pub fn decoder_specs(&self) -> Result<Vec<BlockSpec>> {
        (0..self.dec_layers)
            .map(|i| {
                let q = if i == 0 { FiberType::single(1, 1) } else { self.hidden() };
                let out = if i + 1 == self.dec_layers {
                    FiberType::single(0, self.dec_out_scalars)
                } else {
                    self.hidden()
                };
                BlockSpec::new(self.heads, self.mult, q, self.point_feature_type(), out)
            })
            .collect()
    }
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub enc: Vec<BlockIds>,
    pub dec: Vec<BlockIds>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

impl Architecture {
    pub fn register<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg
            .encoder_specs()?
            .iter()
            .enumerate()
            .map(|(i, s)| BlockIds::register(s, &format!("enc.{i}"), store, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec = cfg
            .decoder_specs()?
            .iter()
            .enumerate()
            .map(|(i, s)| BlockIds::register(s, &format!("dec.{i}"), store, rng))
            .collect::<Result<Vec<_>>>()?;
        let (d, h) = (cfg.dec_out_scalars, cfg.head_hidden);
        let mut u = |rows: usize, cols: usize, fan_in: usize| {
            use rand::Rng as _;
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(rng.random_range(-a..a))).collect())
        };
        let (w1, b1, w2, b2) = (u(d, h, d), u(1, h, d), u(h, 1, h), u(1, 1, h));
        Ok(Self {
            enc,
            dec,
            head_w1: store.add("head.w1", w1)?,
            head_b1: store.add("head.b1", b1)?,
            head_w2: store.add("head.w2", w2)?,
            head_b2: store.add("head.b2", b2)?,
        })
    }

    /// Resolve the parameters of `cfg` in an existing store, checking shapes.
    pub fn lookup<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut fresh: ParamStore<T> = ParamStore::new();
        Architecture::register(cfg, &mut fresh, &mut crate::rng::rng_from_seed(0))?;
        if !fresh.same_layout(store) {
            let detail = fresh
                .iter()
                .zip(store.iter())
                .find(|((na, ta), (nb, tb))| na != nb || ta.rows != tb.rows || ta.cols != tb.cols)
                .map(|((na, _), (nb, _))| format!(" (first difference: {na} vs {nb})"))
                .unwrap_or_default();
            return Err(Error::Format(format!(
                "parameters do not match the model configuration: expected {} tensors, found {}{detail}",
                fresh.len(),
                store.len()
            )));
        }
        let enc = cfg
            .encoder_specs()?
            .iter()
            .enumerate()
            .map(|(i, s)| BlockIds::lookup(s, &format!("enc.{i}"), store))
            .collect::<Result<Vec<_>>>()?;
        let dec = cfg
            .decoder_specs()?
            .iter()
            .enumerate()
            .map(|(i, s)| BlockIds::lookup(s, &format!("dec.{i}"), store))
            .collect::<Result<Vec<_>>>()?;
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Format(format!("missing parameter {n}")));
        Ok(Self {
            enc,
            dec,
            head_w1: get("head.w1")?,
            head_b1: get("head.b1")?,
            head_w2: get("head.w2")?,
            head_b2: get("head.b2")?,
        })
    }
}

/// Trainable weights plus the radius normalizer `r_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub radius_scale: f64,
}

/// Fan-in scaled uniform initialization, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut store = ParamStore::new();
    let mut rng = SeedStream::new(seed).rng("init");
    Architecture::register(cfg, &mut store, &mut rng)?;
    Ok(ModelParams {
        config: cfg.clone(),
        store,
        radius_scale: 1.0,
    })
}

/// Query tokens of a batch: one per tied closest point of each query.
#[derive(Debug, Clone)]
pub struct QueryTokens {
    pub positions: Vec<Vec3>,
    pub features: Vec<Vec3>,
    pub lists: Vec<Vec<usize>>,
    /// Tokens of query `i` are `starts[i]..starts[i + 1]`.
    pub starts: Vec<usize>,
}

impl QueryTokens {
    pub fn new(index: &CloudIndex, queries: &[Vec3]) -> Self {
        let mut t = QueryTokens {
            positions: Vec::new(),
            features: Vec::new(),
            lists: Vec::new(),
            starts: vec![0],
        };
        for &q in queries {
            for c in index.query(q) {
                t.positions.push(q);
                t.features.push(c.feature);
                t.lists.push(c.neighborhood.indices);
            }
            t.starts.push(t.positions.len());
        }
        t
    }
}

fn type1_leaf<T: Real>(g: &mut Graph<T>, vs: &[Vec3]) -> FeatNodes {
    let data: Vec<T> = vs.iter().flat_map(|v| euclid_to_sh(*v)).map(T::of).collect();
    FeatNodes {
        ftype: FiberType::single(1, 1),
        nodes: vec![g.leaf(Tensor::from_vec(vs.len(), 3, data))],
    }
}

/// Encoder on the tape; returns the `(1, mult)` point features.
pub fn encoder_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    arch: &Architecture,
    index: &CloudIndex,
    radius_scale: f64,
    cg: &CgTable,
) -> FeatNodes {
    let pts = index.cloud.points();
    let lists: Vec<Vec<usize>> = index.neighborhoods.iter().map(|n| n.indices.clone()).collect();
    let (edges, radius) = edges_on_graph(g, pts, pts, &lists, radius_scale);
    let mut f = type1_leaf(g, &index.features);
    for block in &arch.enc {
        f = block_forward(g, store, block, &f, &f, &edges, radius, cg);
    }
    f
}

/// Decoder on the tape; returns the `Q x 1` occupancy column (max over tied
/// tokens of each query).
#[allow(clippy::too_many_arguments)]
pub fn decoder_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    arch: &Architecture,
    index: &CloudIndex,
    point_feats: &FeatNodes,
    tokens: &QueryTokens,
    radius_scale: f64,
    cg: &CgTable,
) -> NodeId {
    let (edges, radius) = edges_on_graph(g, &tokens.positions, index.cloud.points(), &tokens.lists, radius_scale);
    let mut f = type1_leaf(g, &tokens.features);
    for block in &arch.dec {
        f = block_forward(g, store, block, &f, point_feats, &edges, radius, cg);
    }
    output_head(g, store, arch, f.nodes[0], &tokens.starts)
}

/// Scalar MLP, logistic squashing and max over tied tokens.
fn output_head<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, arch: &Architecture, s: NodeId, starts: &[usize]) -> NodeId {
    let (w1, b1, w2, b2) = (
        g.param(store, arch.head_w1),
        g.param(store, arch.head_b1),
        g.param(store, arch.head_w2),
        g.param(store, arch.head_b2),
    );
    let h = g.affine(s, w1, b1);
    let h = g.softplus(h);
    let o = g.affine(h, w2, b2);
    let p = g.sigmoid(o);
    g.segment_max(p, starts)
}

/// Token fibers handed from one single-layer graph to the next.
struct Carried<T> {
    ftype: FiberType,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Carried<T> {
    fn type1(vs: &[Vec3]) -> Self {
        let data: Vec<T> = vs.iter().flat_map(|v| euclid_to_sh(*v)).map(T::of).collect();
        Self {
            ftype: FiberType::single(1, 1),
            tensors: vec![Tensor::from_vec(vs.len(), 3, data)],
        }
    }

    fn take(g: &Graph<T>, f: &FeatNodes) -> Self {
        Self {
            ftype: f.ftype.clone(),
            tensors: f.nodes.iter().map(|&n| g.value(n).clone()).collect(),
        }
    }

    fn leaves(&self, g: &mut Graph<T>) -> FeatNodes {
        FeatNodes {
            ftype: self.ftype.clone(),
            nodes: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Evaluation-ready model.
#[derive(Debug, Clone)]
pub struct OccupancyModel {
    pub params: ModelParams,
    arch: Architecture,
    store64: ParamStore<f64>,
    cg: Arc<CgTable>,
    pub precision: Precision,
    /// Queries per decoder graph.
    pub chunk: usize,
}

/// Point cloud with cached neighborhoods and encoder output.
#[derive(Debug, Clone)]
pub struct EncodedCloud {
    pub index: CloudIndex,
    pub features: Tensor<f64>,
}

impl OccupancyModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        let arch = Architecture::lookup(&params.config, &params.store)?;
        if !(params.radius_scale > 0.0 && params.radius_scale.is_finite()) {
            return Err(Error::Config(format!("radius scale {} must be positive", params.radius_scale)));
        }
        Ok(Self {
            store64: params.store.cast(),
            arch,
            params,
            cg: CgTable::standard(),
            precision: Precision::Double,
            chunk: 256,
        })
    }

    /// Replace the Clebsch-Gordan table (used to inject faults in checks).
    pub fn with_cg(mut self, cg: Arc<CgTable>) -> Self {
        self.cg = cg;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Neighborhood size actually used for a cloud of `n` points.
    pub fn effective_k(&self, n: usize) -> usize {
        self.params.config.k.min(n)
    }

    pub fn index(&self, cloud: &PointCloud) -> Result<CloudIndex> {
        CloudIndex::new(cloud.clone(), self.effective_k(cloud.len()))
    }

    pub fn encode_cloud(&self, cloud: &PointCloud) -> Result<EncodedCloud> {
        let index = self.index(cloud)?;
        let features = match self.precision {
            Precision::Double => self.encode_with::<f64>(&self.store64, &index),
            Precision::Single => self.encode_with::<f32>(&self.params.store, &index),
        };
        Ok(EncodedCloud { index, features })
    }

    // Inference runs one block per graph so only a single layer's
    // intermediates are alive at a time.
    fn encode_with<T: Real>(&self, store: &ParamStore<T>, index: &CloudIndex) -> Tensor<f64> {
        let pts = index.cloud.points();
        let lists: Vec<Vec<usize>> = index.neighborhoods.iter().map(|n| n.indices.clone()).collect();
        let edges = Arc::new(EdgeSet::new(pts, pts, &lists, self.params.radius_scale));
        let mut f = Carried::type1(&index.features);
        for block in &self.arch.enc {
            let mut g = Graph::new();
            let radius = g.leaf(Tensor::from_f64(edges.len(), 1, &edges.radius));
            let x = f.leaves(&mut g);
            let y = block_forward(&mut g, store, block, &x, &x, &edges, radius, &self.cg);
            f = Carried::take(&g, &y);
        }
        let v = &f.tensors[0];
        Tensor::from_vec(v.rows, v.cols, v.to_f64())
    }

    /// Per-point encoder output as type-`(1, mult)` fibers.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Vec<FiberVec>> {
        let enc = self.encode_cloud(cloud)?;
        let t = self.params.config.point_feature_type();
        (0..enc.features.rows)
            .map(|i| FiberVec::from_m_major(t.clone(), &[enc.features.row(i).to_vec()]))
            .collect()
    }

    fn decode_with<T: Real>(&self, store: &ParamStore<T>, enc: &EncodedCloud, queries: &[Vec3]) -> Vec<f64> {
        let tokens = QueryTokens::new(&enc.index, queries);
        let feats = &enc.features;
        let feats = Tensor::from_vec(feats.rows, feats.cols, feats.data.iter().map(|&v| T::of(v)).collect());
        let edges = Arc::new(EdgeSet::new(
            &tokens.positions,
            enc.index.cloud.points(),
            &tokens.lists,
            self.params.radius_scale,
        ));
        let mut f = Carried::type1(&tokens.features);
        for (i, block) in self.arch.dec.iter().enumerate() {
            let mut g = Graph::new();
            let radius = g.leaf(Tensor::from_f64(edges.len(), 1, &edges.radius));
            let x = f.leaves(&mut g);
            let pf = FeatNodes {
                ftype: self.params.config.point_feature_type(),
                nodes: vec![g.leaf(feats.clone())],
            };
            let y = block_forward(&mut g, store, block, &x, &pf, &edges, radius, &self.cg);
            if i + 1 == self.arch.dec.len() {
                let out = output_head(&mut g, store, &self.arch, y.nodes[0], &tokens.starts);
                return g.value(out).to_f64();
            }
            f = Carried::take(&g, &y);
        }
        unreachable!("decoder has at least one layer")
    }

    /// Occupancy at many queries against one encoded cloud. Chunks are
    /// evaluated in parallel; results keep the query order.
    pub fn occupancy_batch(&self, enc: &EncodedCloud, queries: &[Vec3]) -> Vec<f64> {
        queries
            .par_chunks(self.chunk.max(1))
            .map(|qs| match self.precision {
                Precision::Double => self.decode_with::<f64>(&self.store64, enc, qs),
                Precision::Single => self.decode_with::<f32>(&self.params.store, enc, qs),
            })
            .collect::<Vec<_>>()
            .concat()
    }

    pub fn occupancy(&self, cloud: &PointCloud, q: Vec3) -> Result<f64> {
        let enc = self.encode_cloud(cloud)?;
        Ok(self.occupancy_batch(&enc, &[q])[0])
    }

    /// Scores on the `res[0] x res[1] x res[2]` lattice spanning `bbox`
    /// (corners included), x fastest.
    pub fn occupancy_grid(&self, cloud: &PointCloud, bbox: &BoundingBox, res: [usize; 3]) -> Result<OccupancyGrid> {
        if res.iter().any(|&r| r < 2) {
            return Err(Error::InvalidInput(format!("grid resolution {res:?} must be at least 2 per axis")));
        }
        let bbox = BoundingBox::new(bbox.min, bbox.max)?;
        let enc = self.encode_cloud(cloud)?;
        let pts = OccupancyGrid::lattice(&bbox, res);
        let values = self.occupancy_batch(&enc, &pts).into_iter().map(|v| v as f32).collect();
        OccupancyGrid::new(bbox, res, values)
    }

    /// Like [`Self::occupancy_grid`], but evaluates the network densely only
    /// near the `iso` level set; see [`OccupancyGrid::refined`].
    pub fn occupancy_grid_refined(
        &self,
        cloud: &PointCloud,
        bbox: &BoundingBox,
        res: [usize; 3],
        iso: f64,
        refine: Refinement,
    ) -> Result<OccupancyGrid> {
        let bbox = BoundingBox::new(bbox.min, bbox.max)?;
        let enc = self.encode_cloud(cloud)?;
        OccupancyGrid::refined(bbox, res, iso, refine.step, refine.halo, |pts| self.occupancy_batch(&enc, pts))
    }

    /// Mesh of the decision surface over the cloud's bounding box grown by
    /// `cfg.padding` of its extent per side.
    pub fn reconstruct(&self, cloud: &PointCloud, cfg: &ReconstructConfig) -> Result<Mesh> {
        let bbox = BoundingBox::of_points(cloud.points())?.padded(cfg.padding);
        let iso = cfg.iso.unwrap_or(self.params.config.occ_threshold);
        let res = [cfg.res; 3];
        let grid = match cfg.refine {
            Some(r) => self.occupancy_grid_refined(cloud, &bbox, res, iso, r)?,
            None => self.occupancy_grid(cloud, &bbox, res)?,
        };
        marching_cubes(&grid, iso)
    }
}

/// Coarse lattice stride and the rings of coarse cells around the level set
/// that are evaluated densely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub step: usize,
    pub halo: usize,
}

impl Default for Refinement {
    fn default() -> Self {
        Self { step: 4, halo: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub res: usize,
    /// Decision threshold; the model's own when `None`.
    pub iso: Option<f64>,
    pub padding: f64,
    /// Dense evaluation everywhere when `None`.
    pub refine: Option<Refinement>,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            res: 64,
            iso: None,
            padding: 0.1,
            refine: Some(Refinement::default()),
        }
    }
}

pub fn encode(x: &PointCloud, params: &ModelParams) -> Result<Vec<FiberVec>> {
    OccupancyModel::new(params.clone())?.encode(x)
}

pub fn occupancy(x: &PointCloud, q: Vec3, params: &ModelParams) -> Result<f64> {
    OccupancyModel::new(params.clone())?.occupancy(x, q)
}

pub fn occupancy_grid(x: &PointCloud, bbox: &BoundingBox, res: [usize; 3], params: &ModelParams) -> Result<OccupancyGrid> {
    OccupancyModel::new(params.clone())?.occupancy_grid(x, bbox, res)
}

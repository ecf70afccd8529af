//! Loss, optimizer, data sampling, the training loop and finite-difference
//! gradient verification.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[cfg(test)]
use crate::autodiff::Tensor;
use crate::autodiff::{bce_value, Graph, NodeId};
use crate::checkpoint;
use crate::data_io::{ShapeFamily, ShapeOracle};
use crate::error::{contract, invalid, Error, Result};
use crate::geometry::{CloudIndex, PointCloud};
use crate::model::{decoder_graph, encoder_graph, init_params, Architecture, ModelConfig, ModelParams, QueryTokens};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::recon::GroundTruth;
use crate::rng::{Rng, SeedStream};
use crate::so3::{CgTable, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch: usize,
    pub iterations: usize,
    pub queries_per_item: usize,
    pub input_points: usize,
    pub noise: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Query box padding as a fraction of the shape's extent, per side.
    pub padding: f64,
    pub families: Vec<ShapeFamily>,
    /// Iterations between checkpoints (0 disables intermediate ones).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// The published protocol.
    pub fn paper() -> Self {
        Self {
            lr_start: 2e-4,
            lr_end: 1e-5,
            batch: 64,
            iterations: 200_000,
            queries_per_item: 2048,
            input_points: 300,
            noise: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            padding: 0.1,
            families: ShapeFamily::ALL.to_vec(),
            checkpoint_every: 1000,
            log_every: 100,
        }
    }

    /// Small batches and a higher rate so the reduced model converges on one
    /// core in about an hour.
    pub fn desk() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch: 2,
            iterations: 5000,
            queries_per_item: 512,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch == 0 || self.iterations == 0 || self.queries_per_item == 0 || self.input_points == 0 {
            return bad("batch, iterations, queries and input points must be positive".into());
        }
        if !(self.noise >= 0.0 && self.padding >= 0.0) {
            return bad("noise and padding must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.families.is_empty() {
            return bad("at least one shape family is required".into());
        }
        Ok(())
    }

    /// Learning rate at iteration `t` of `iterations`, linear between the
    /// endpoints.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t >= self.iterations {
            return self.lr_end;
        }
        self.lr_start + (self.lr_end - self.lr_start) * t as f64 / self.iterations as f64
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(contract(format!("{} predictions for {} labels", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(invalid("loss over an empty batch"));
    }
    Ok(bce_value(pred, target))
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        Self {
            m: store.zeros_like(),
            v: store.zeros_like(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One bias-corrected step at iteration `t >= 1`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &ParamStore<f32>, t: usize, lr: f64) -> Result<()> {
        if t == 0 {
            return Err(invalid("Adam iterations count from 1"));
        }
        if !store.same_layout(grads) || !store.same_layout(&self.m) {
            return Err(contract("gradient layout differs from the parameters"));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let g = &grads.tensor(id).data;
            let m = &mut self.m.tensor_mut(id).data;
            let v = &mut self.v.tensor_mut(id).data;
            let w = &mut store.tensor_mut(id).data;
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                w[i] = (w[i] as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

/// One step at the scheduled learning rate of iteration `t`.
pub fn adam_step(store: &mut ParamStore<f32>, grads: &ParamStore<f32>, adam: &mut Adam, t: usize, cfg: &TrainConfig) -> Result<()> {
    adam.step(store, grads, t, cfg.lr_at(t))
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub cloud: PointCloud,
    pub queries: Vec<Vec3>,
    pub labels: Vec<f64>,
}

/// Noisy surface samples as input, uniform queries in the padded bounds
/// with exact labels.
pub fn sample_training_item(oracle: &dyn GroundTruth, cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainingItem> {
    let mut pts = oracle.sample_surface(cfg.input_points, rng);
    crate::data_io::add_noise(&mut pts, cfg.noise, rng)?;
    let bbox = oracle.bounds().padded(cfg.padding);
    let queries: Vec<Vec3> = (0..cfg.queries_per_item).map(|_| bbox.sample(rng)).collect();
    let labels = queries.iter().map(|q| f64::from(u8::from(oracle.occupied(*q)))).collect();
    Ok(TrainingItem {
        cloud: PointCloud::new(pts)?,
        queries,
        labels,
    })
}

/// Shape and item for batch slot `b` of iteration `t`: a family drawn
/// uniformly, then a randomized member in canonical pose.
pub fn training_item_at(cfg: &TrainConfig, t: usize, b: usize) -> Result<(ShapeOracle, TrainingItem)> {
    let mut rng = SeedStream::new(cfg.seed)
        .child("iteration", t as u64)
        .child("item", b as u64)
        .rng("data");
    let family = cfg.families[rng.random_range(0..cfg.families.len())];
    let shape = family.random(&mut rng);
    let item = sample_training_item(&shape, cfg, &mut rng)?;
    Ok((shape, item))
}

/// Radius normalizer: median mean-neighbor distance over a few training
/// clouds, rounded to `f32` so checkpoints reproduce it exactly.
pub fn estimate_radius_scale(model: &ModelConfig, cfg: &TrainConfig) -> Result<f64> {
    let mut d: Vec<f64> = (0..16)
        .map(|i| {
            let (_, item) = training_item_at(cfg, 0, i)?;
            let k = model.k.min(item.cloud.len());
            Ok(CloudIndex::new(item.cloud, k)?.mean_neighbor_distance())
        })
        .collect::<Result<_>>()?;
    d.sort_by(f64::total_cmp);
    let r = d[d.len() / 2];
    if !(r > 0.0) {
        return Err(Error::DegenerateGeometry("training clouds have coincident points".into()));
    }
    Ok(r as f32 as f64)
}

/// Mean BCE of one item and its gradient.
pub fn item_loss_and_grad<T: Real>(
    store: &ParamStore<T>,
    arch: &Architecture,
    model: &ModelConfig,
    radius_scale: f64,
    cg: &CgTable,
    item: &TrainingItem,
) -> Result<(f64, ParamStore<T>)> {
    let mut g = Graph::new();
    let loss = item_loss_node(&mut g, store, arch, model, radius_scale, cg, item)?;
    let grads = g.backward(loss);
    let mut out = store.zeros_like();
    out.accumulate(&g, &grads);
    Ok((g.value(loss).data[0].to_f64(), out))
}

fn item_loss_node<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    arch: &Architecture,
    model: &ModelConfig,
    radius_scale: f64,
    cg: &CgTable,
    item: &TrainingItem,
) -> Result<NodeId> {
    if item.queries.len() != item.labels.len() {
        return Err(contract("one label per query required"));
    }
    let index = CloudIndex::new(item.cloud.clone(), model.k.min(item.cloud.len()))?;
    let feats = encoder_graph(g, store, arch, &index, radius_scale, cg);
    let tokens = QueryTokens::new(&index, &item.queries);
    let p = decoder_graph(g, store, arch, &index, &feats, &tokens, radius_scale, cg);
    Ok(g.bce(p, &item.labels))
}

/// Loss of one item in `f64` without a backward pass.
pub fn item_loss(
    store: &ParamStore<f64>,
    arch: &Architecture,
    model: &ModelConfig,
    radius_scale: f64,
    cg: &CgTable,
    item: &TrainingItem,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = item_loss_node(&mut g, store, arch, model, radius_scale, cg, item)?;
    Ok(g.value(loss).data[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Where and how the loop reports.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Directory for `checkpoint.bin`, `config.json` and `loss.csv`.
    pub dir: Option<PathBuf>,
    /// Print a progress line every `log_every` iterations.
    pub verbose: bool,
}

pub const LOSS_FILE: &str = "loss.csv";

/// Minimize the mean BCE over freshly sampled items. Items of a batch are
/// evaluated in parallel and their gradients are summed in batch order, so
/// a run is bit-reproducible for a fixed seed. A non-finite loss or gradient
/// aborts with a numerical error; the last written checkpoint is kept.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, init: Option<ModelParams>, out: &TrainOutput) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => {
            let mut p = init_params(model, model.seed)?;
            p.radius_scale = estimate_radius_scale(model, cfg)?;
            p
        }
    };
    let arch = Architecture::lookup(model, &params.store)?;
    let cg = CgTable::standard();
    let mut adam = Adam::new(&params.store, cfg);
    let mut csv = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(LOSS_FILE))?);
            writeln!(f, "iteration,loss,lr")?;
            Some(f)
        }
        None => None,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let items: Vec<TrainingItem> = (0..cfg.batch)
            .map(|b| training_item_at(cfg, t, b).map(|x| x.1))
            .collect::<Result<_>>()?;
        let results: Vec<(f64, ParamStore<f32>)> = items
            .par_iter()
            .map(|item| item_loss_and_grad(&params.store, &arch, model, params.radius_scale, &cg, item))
            .collect::<Result<_>>()?;
        let mut grads = params.store.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_scaled(g, 1.0);
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        let mut mean = params.store.zeros_like();
        mean.add_scaled(&grads, scale as f32);
        if !loss.is_finite() || !mean.all_finite() {
            if let Some(f) = csv.as_mut() {
                f.flush()?;
            }
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {t}")));
        }
        let lr = cfg.lr_at(t);
        adam.step(&mut params.store, &mean, t, lr)?;
        let row = TraceRow { iteration: t, loss, lr };
        trace.push(row);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{},{},{}", row.iteration, row.loss, row.lr)?;
        }
        if out.verbose && cfg.log_every > 0 && t % cfg.log_every == 0 {
            let window = &trace[trace.len().saturating_sub(cfg.log_every)..];
            let avg = window.iter().map(|r| r.loss).sum::<f64>() / window.len() as f64;
            eprintln!("iter {t:>6}  loss {avg:.5}  lr {lr:.3e}");
        }
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t != cfg.iterations {
                if let Some(f) = csv.as_mut() {
                    f.flush()?;
                }
                checkpoint::save_dir(&params, dir)?;
            }
        }
    }
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = &out.dir {
        checkpoint::save_dir(&params, dir)?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Loss trace averaged over consecutive windows of `w` iterations.
pub fn smoothed(trace: &[TraceRow], w: usize) -> Vec<f64> {
    trace
        .chunks(w.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("iteration,loss,lr\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.lr));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Agreement of one parameter tensor with central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_abs_err: f64,
    /// Largest error relative to `max(|analytic|, |numeric|)` among scalars
    /// that fail the absolute tolerance.
    pub max_rel_err: f64,
    /// Scalars re-checked at a smaller step because the first step crossed a
    /// kink of the network.
    pub refined: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Smaller steps tried, in order, when the first one disagrees.
    pub refine: [f64; 2],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            refine: [1e-4, 1e-5],
        }
    }
}

fn agrees(a: f64, n: f64, cfg: &GradCheckConfig) -> bool {
    let d = (a - n).abs();
    d <= cfg.abs_tol || d <= cfg.rel_tol * a.abs().max(n.abs())
}

/// Compare reverse-mode gradients of the item loss against central
/// differences for every scalar of every parameter, in `f64`.
///
/// The network is piecewise smooth (the layer norm gate and the max over
/// tied candidates have kinks). A scalar whose difference quotient at the
/// configured step disagrees is re-checked at the smaller steps of
/// `cfg.refine`; the count of such scalars is reported per tensor.
pub fn gradient_check(params: &ModelParams, item: &TrainingItem, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = &params.config;
    let store: ParamStore<f64> = params.store.cast();
    let arch = Architecture::lookup(model, &store)?;
    let cg = CgTable::standard();
    let rs = params.radius_scale;
    let (_, analytic) = item_loss_and_grad(&store, &arch, model, rs, &cg, item)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let checks = ids
        .par_iter()
        .map(|&id| {
            let mut work = store.clone();
            let n = work.tensor(id).len();
            let mut max_abs: f64 = 0.0;
            let mut max_rel: f64 = 0.0;
            let mut refined = 0;
            let mut passed = true;
            let numeric = |work: &mut ParamStore<f64>, i: usize, h: f64| -> Result<f64> {
                let w0 = work.tensor(id).data[i];
                work.tensor_mut(id).data[i] = w0 + h;
                let lp = item_loss(work, &arch, model, rs, &cg, item)?;
                work.tensor_mut(id).data[i] = w0 - h;
                let lm = item_loss(work, &arch, model, rs, &cg, item)?;
                work.tensor_mut(id).data[i] = w0;
                Ok((lp - lm) / (2.0 * h))
            };
            for i in 0..n {
                let a = analytic.tensor(id).data[i];
                let mut num = numeric(&mut work, i, cfg.step)?;
                if !agrees(a, num, cfg) {
                    refined += 1;
                    for &h in &cfg.refine {
                        num = numeric(&mut work, i, h)?;
                        if agrees(a, num, cfg) {
                            break;
                        }
                    }
                }
                let d = (a - num).abs();
                max_abs = max_abs.max(d);
                if d > cfg.abs_tol {
                    max_rel = max_rel.max(d / a.abs().max(num.abs()));
                }
                passed &= agrees(a, num, cfg);
            }
            Ok(ParamCheck {
                name: store.name(id).to_string(),
                scalars: n,
                max_abs_err: max_abs,
                max_rel_err: max_rel,
                refined,
                passed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        step: cfg.step,
        rel_tol: cfg.rel_tol,
        abs_tol: cfg.abs_tol,
        params: checks,
    })
}

/// A small random item for gradient checks: `n` points with uniform
/// coordinates, `queries` uniform queries and alternating labels.
pub fn random_check_item(n: usize, queries: usize, rng: &mut Rng) -> Result<TrainingItem> {
    let pts: Vec<Vec3> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5))).collect();
    let qs: Vec<Vec3> = (0..queries).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.6..0.6))).collect();
    Ok(TrainingItem {
        cloud: PointCloud::new(pts)?,
        queries: qs,
        labels: (0..queries).map(|i| (i % 2) as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn scalar_store(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!((bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(matches!(bce_loss(&[0.5], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn one_adam_step_by_hand() {
        let mut s = scalar_store(0.0);
        let g = scalar_store(1.0);
        let cfg = TrainConfig::desk();
        let mut adam = Adam::new(&s, &cfg);
        adam.step(&mut s, &g, 1, 0.1).unwrap();
        let w = s.get("w").unwrap().data[0] as f64;
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-7);
        assert!(adam.step(&mut s, &g, 0, 0.1).is_err());
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = scalar_store(0.7);
        let g = scalar_store(0.0);
        let mut adam = Adam::new(&s, &TrainConfig::desk());
        for t in 1..5 {
            adam.step(&mut s, &g, t, 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data[0], 0.7);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            iterations: 1000,
            ..TrainConfig::paper()
        };
        assert_eq!(cfg.lr_at(1000), cfg.lr_end);
        assert_eq!(cfg.lr_at(0), cfg.lr_start);
        assert!((cfg.lr_at(500) - 0.5 * (cfg.lr_start + cfg.lr_end)).abs() < 1e-15);
        let bad = TrainConfig { lr_start: 1e-6, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sphere_items() {
        let cfg = TrainConfig {
            noise: 0.0,
            queries_per_item: 20_000,
            ..TrainConfig::desk()
        };
        let sphere = ShapeOracle::sphere(1.0).unwrap();
        let item = sample_training_item(&sphere, &cfg, &mut rng_from_seed(1)).unwrap();
        for p in item.cloud.points() {
            assert!((crate::so3::norm(*p) - 1.0).abs() < 1e-12);
        }
        // Padded box has side 2.4.
        let expect = 4.0 / 3.0 * std::f64::consts::PI / 2.4f64.powi(3);
        let frac = item.labels.iter().sum::<f64>() / item.labels.len() as f64;
        let sd = (expect * (1.0 - expect) / item.labels.len() as f64).sqrt();
        assert!((frac - expect).abs() < 3.0 * sd, "{frac} vs {expect}");
        assert_eq!(item, sample_training_item(&sphere, &cfg, &mut rng_from_seed(1)).unwrap());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            mult: 2,
            dec_out_scalars: 2,
            head_hidden: 3,
            k: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn gradient_check_on_a_tiny_model() {
        let mut p = init_params(&tiny(), 5).unwrap();
        p.radius_scale = 0.3;
        let item = random_check_item(6, 3, &mut rng_from_seed(6)).unwrap();
        let report = gradient_check(&p, &item, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert_eq!(report.params.len(), p.store.len());
    }

    #[test]
    fn training_is_reproducible_and_finite() {
        let model = tiny();
        let cfg = TrainConfig {
            iterations: 3,
            batch: 2,
            queries_per_item: 16,
            input_points: 20,
            lr_start: 1e-3,
            ..TrainConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: Some(dir.path().to_path_buf()),
            verbose: false,
        };
        let a = train(&model, &cfg, None, &out).unwrap();
        let csv_a = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        let b = train(&model, &cfg, None, &TrainOutput::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(csv_a.lines().count(), 4);
        assert!(a.trace.iter().all(|r| r.loss.is_finite()));
        assert_eq!(checkpoint::load_dir(dir.path()).unwrap(), a.params);
    }
}

//! Property suites behind the `verify` command: each check draws random
//! inputs, measures the worst deviation from an exact identity and compares
//! it with a tolerance.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_layer, self_attention_layer, AttentionBlockParams, BlockSpec};
use crate::error::{Error, Result};
use crate::fibers::{apply_kernel, equiv_layer_norm, tfn_kernel_eval, EquivLinear, FiberType, FiberVec, LayerNormAffine, TfnKernelParams};
use crate::geometry::{all_neighborhoods, apply_se3, knn_neighborhood, PointCloud, SE3Transform};
use crate::model::{init_params, ModelConfig, ModelParams, OccupancyModel};
use crate::rng::{Rng, SeedStream};
use crate::so3::{angular_kernel_basis, real_spherical_harmonics, wigner_d, CgTable, Rotation, Vec3};
use crate::training::{gradient_check, random_check_item, GradCheckConfig};

/// Random draws per identity in the `so3` suite.
pub const SO3_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    So3,
    Layers,
    Model,
    Grad,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::So3, Suite::Layers, Suite::Model, Suite::Grad];

    pub fn name(self) -> &'static str {
        match self {
            Suite::So3 => "so3",
            Suite::Layers => "layers",
            Suite::Model => "model",
            Suite::Grad => "grad",
        }
    }

    /// Max deviation accepted when no tolerance is given. For `grad` this is
    /// the relative tolerance of the finite-difference comparison.
    pub fn default_tol(self) -> f64 {
        match self {
            Suite::So3 | Suite::Layers | Suite::Model => 1e-8,
            Suite::Grad => 1e-4,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}' (expected so3, layers, model or grad)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub draws: usize,
    pub max_deviation: f64,
    pub tol: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, draws: usize, max_deviation: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            draws,
            max_deviation,
            tol,
            // NaN deviations fail.
            passed: max_deviation <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: Suite,
    pub seed: u64,
    pub tol: f64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(suite: Suite, seed: u64, tol: f64, checks: Vec<Check>) -> Self {
        Self {
            suite,
            seed,
            tol,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Inputs of the `model` suite beyond seed and tolerance.
#[derive(Debug, Clone, Default)]
pub struct ModelSuiteOptions {
    /// Parameters to check; a small random model when `None`.
    pub params: Option<ModelParams>,
    /// Clebsch-Gordan table to use instead of the standard one.
    pub cg: Option<Arc<CgTable>>,
}

pub fn run(suite: Suite, seed: u64, tol: Option<f64>) -> Result<Report> {
    run_with(suite, seed, tol, &ModelSuiteOptions::default())
}

pub fn run_with(suite: Suite, seed: u64, tol: Option<f64>, opts: &ModelSuiteOptions) -> Result<Report> {
    let tol = tol.unwrap_or(suite.default_tol());
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("tolerance {tol} must be non-negative")));
    }
    match suite {
        Suite::So3 => so3_suite(seed, tol),
        Suite::Layers => layers_suite(seed, tol),
        Suite::Model => model_suite(seed, tol, opts),
        Suite::Grad => grad_suite(seed, tol, &grad_config()),
    }
}

fn unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v: Vec3 = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `D_a M D_bᵀ` for a row-major `(2a+1) x (2b+1)` matrix.
fn conjugate(m: &[f64], a: usize, b: usize, r: &Rotation) -> Vec<f64> {
    let (da, db) = (wigner_d(a, r), wigner_d(b, r));
    let (ra, rb) = (2 * a + 1, 2 * b + 1);
    let mut out = vec![0.0; ra * rb];
    for i in 0..ra {
        for j in 0..rb {
            let mut s = 0.0;
            for p in 0..ra {
                for q in 0..rb {
                    s += da.get(i, p) * m[p * rb + q] * db.get(j, q);
                }
            }
            out[i * rb + j] = s;
        }
    }
    out
}

pub fn so3_suite(seed: u64, tol: f64) -> Result<Report> {
    let seeds = SeedStream::new(seed);
    let cg = CgTable::standard();
    let paths: Vec<(usize, usize, usize)> = (0..=cg.lmax())
        .flat_map(|k| (0..=cg.lmax()).flat_map(move |l| (k.abs_diff(l)..=k + l).map(move |j| (k, l, j))))
        .collect();
    let lmax_d = 2 * cg.lmax();

    let mut rng = seeds.rng("wigner");
    let mut dev: f64 = 0.0;
    for _ in 0..SO3_DRAWS {
        let (r1, r2) = (Rotation::random(&mut rng), Rotation::random(&mut rng));
        for l in 0..=lmax_d {
            let lhs = wigner_d(l, &r1.compose(&r2));
            dev = dev.max(lhs.max_abs_diff(&wigner_d(l, &r1).matmul(&wigner_d(l, &r2))));
        }
    }
    let wigner = Check::new("wigner_homomorphism", SO3_DRAWS, dev, tol);

    let mut rng = seeds.rng("intertwiner");
    let mut dev: f64 = 0.0;
    for _ in 0..SO3_DRAWS {
        let r = Rotation::random(&mut rng);
        for &(k, l, j) in &paths {
            dev = dev.max(cg.get(k, l, j).intertwiner_residual(&r));
        }
    }
    let intertwiner = Check::new("cg_intertwiner", SO3_DRAWS, dev, tol);

    let mut rng = seeds.rng("harmonics");
    let mut dev: f64 = 0.0;
    for _ in 0..SO3_DRAWS {
        let (r, x) = (Rotation::random(&mut rng), unit(&mut rng));
        for j in 0..=lmax_d {
            let lhs = real_spherical_harmonics(j, r.apply(x))?;
            let rhs = wigner_d(j, &r).apply(&real_spherical_harmonics(j, x)?);
            dev = dev.max(max_diff(&lhs, &rhs));
        }
    }
    let harmonics = Check::new("harmonic_equivariance", SO3_DRAWS, dev, tol);

    let mut rng = seeds.rng("kernel");
    let mut dev: f64 = 0.0;
    for _ in 0..SO3_DRAWS {
        let (r, x) = (Rotation::random(&mut rng), unit(&mut rng));
        for &(k, l, j) in &paths {
            let stack = cg.get(k, l, j);
            let lhs = angular_kernel_basis(stack, r.apply(x))?.m;
            let rhs = conjugate(&angular_kernel_basis(stack, x)?.m, k, l, &r);
            dev = dev.max(max_diff(&lhs, &rhs));
        }
    }
    let kernel = Check::new("angular_kernel_equivariance", SO3_DRAWS, dev, tol);

    Ok(Report::new(Suite::So3, seed, tol, vec![wigner, intertwiner, harmonics, kernel]))
}

fn hidden(m: usize) -> FiberType {
    FiberType::new(vec![(0, m), (1, m), (2, m)]).expect("valid fiber type")
}

fn random_cloud(n: usize, rng: &mut Rng) -> Result<PointCloud> {
    PointCloud::new((0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5))).collect())
}

fn fibers_diff(a: &[FiberVec], b: &[FiberVec]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

pub fn layers_suite(seed: u64, tol: f64) -> Result<Report> {
    let seeds = SeedStream::new(seed);
    let draws = SO3_DRAWS;
    let mut checks = Vec::new();

    let mut rng = seeds.rng("linear");
    let mut dev: f64 = 0.0;
    for _ in 0..draws {
        let lin = EquivLinear::random(hidden(3), hidden(2), &mut rng);
        let f = FiberVec::random(hidden(3), &mut rng);
        let r = Rotation::random(&mut rng);
        dev = dev.max(lin.apply(&f.rotate(&r))?.max_abs_diff(&lin.apply(&f)?.rotate(&r)));
    }
    checks.push(Check::new("equivariant_linear", draws, dev, tol));

    let mut rng = seeds.rng("tfn");
    let mut dev: f64 = 0.0;
    for _ in 0..draws {
        let p = TfnKernelParams::random(hidden(2), hidden(2), 0.3, &mut rng);
        let f = FiberVec::random(hidden(2), &mut rng);
        let r = Rotation::random(&mut rng);
        let x = unit(&mut rng).map(|c| c * rng.random_range(0.05..1.0));
        let lhs = apply_kernel(&p, &tfn_kernel_eval(&p, r.apply(x)), &f.rotate(&r))?;
        let rhs = apply_kernel(&p, &tfn_kernel_eval(&p, x), &f)?.rotate(&r);
        dev = dev.max(lhs.max_abs_diff(&rhs));
    }
    checks.push(Check::new("tfn_kernel", draws, dev, tol));

    let mut rng = seeds.rng("norm");
    let mut dev: f64 = 0.0;
    for _ in 0..draws {
        let aff = LayerNormAffine::constant(&hidden(3), rng.random_range(0.5..1.5), rng.random_range(0.0..1.0));
        let f = FiberVec::random(hidden(3), &mut rng);
        let r = Rotation::random(&mut rng);
        dev = dev.max(equiv_layer_norm(&f.rotate(&r), &aff).max_abs_diff(&equiv_layer_norm(&f, &aff).rotate(&r)));
    }
    checks.push(Check::new("layer_norm", draws, dev, tol));

    let attn_draws = 10;
    let t = FiberType::new(vec![(0, 2), (1, 2)])?;
    let mut rng = seeds.rng("self_attention");
    let mut dev: f64 = 0.0;
    for _ in 0..attn_draws {
        let x = random_cloud(16, &mut rng)?;
        let feats: Vec<FiberVec> = (0..x.len()).map(|_| FiberVec::random(t.clone(), &mut rng)).collect();
        let spec = BlockSpec::new(2, 4, t.clone(), t.clone(), hidden(4).restrict(&[0, 1]))?;
        let p = AttentionBlockParams::random(spec, 0.3, &mut rng);
        let g = SE3Transform::random(&mut rng, 1.0);
        let gx = apply_se3(&x, &g);
        let nb = all_neighborhoods(&x, 6)?;
        let rotated: Vec<FiberVec> = feats.iter().map(|f| f.rotate(&g.r)).collect();
        let lhs = self_attention_layer(&rotated, &gx, &all_neighborhoods(&gx, 6)?, &p)?;
        let rhs: Vec<FiberVec> = self_attention_layer(&feats, &x, &nb, &p)?.iter().map(|f| f.rotate(&g.r)).collect();
        dev = dev.max(fibers_diff(&lhs, &rhs));
    }
    checks.push(Check::new("self_attention", attn_draws, dev, tol));

    let mut rng = seeds.rng("cross_attention");
    let mut dev: f64 = 0.0;
    for _ in 0..attn_draws {
        let x = random_cloud(16, &mut rng)?;
        let feats: Vec<FiberVec> = (0..x.len()).map(|_| FiberVec::random(t.clone(), &mut rng)).collect();
        let qt = FiberType::single(1, 1);
        let spec = BlockSpec::new(2, 4, qt.clone(), t.clone(), hidden(4).restrict(&[0, 1]))?;
        let p = AttentionBlockParams::random(spec, 0.3, &mut rng);
        let q: Vec3 = [0, 1, 2].map(|_| rng.random_range(-0.5..0.5));
        let fq = FiberVec::random(qt, &mut rng);
        let g = SE3Transform::random(&mut rng, 1.0);
        let gx = apply_se3(&x, &g);
        let gq = g.apply(q);
        let nb = nearest(&x, q, 6)?;
        let gnb = nearest(&gx, gq, 6)?;
        let rotated: Vec<FiberVec> = feats.iter().map(|f| f.rotate(&g.r)).collect();
        let lhs = cross_attention_layer(&rotated, &gx, gq, &fq.rotate(&g.r), &gnb, &p)?;
        let rhs = cross_attention_layer(&feats, &x, q, &fq, &nb, &p)?.rotate(&g.r);
        dev = dev.max(lhs.max_abs_diff(&rhs));
    }
    checks.push(Check::new("cross_attention", attn_draws, dev, tol));

    Ok(Report::new(Suite::Layers, seed, tol, checks))
}

/// Tie-inclusive neighborhood of an arbitrary point: the cloud with `q`
/// appended, with `q` itself removed from the result.
fn nearest(x: &PointCloud, q: Vec3, k: usize) -> Result<crate::geometry::Neighborhood> {
    let mut pts = x.points().to_vec();
    pts.push(q);
    let n = x.len();
    let mut nb = knn_neighborhood(&PointCloud::new(pts)?, n, k + 1)?;
    nb.indices.retain(|&j| j != n);
    Ok(nb)
}

/// Small model used when the `model` suite is run without a checkpoint.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        mult: 4,
        dec_out_scalars: 4,
        head_hidden: 8,
        k: 6,
        ..ModelConfig::desk()
    }
}

pub fn model_suite(seed: u64, tol: f64, opts: &ModelSuiteOptions) -> Result<Report> {
    let seeds = SeedStream::new(seed);
    let params = match &opts.params {
        Some(p) => p.clone(),
        None => {
            let mut p = init_params(&small_model_config(), seeds.seed_for("init"))?;
            p.radius_scale = 0.3;
            p
        }
    };
    let mut model = OccupancyModel::new(params)?;
    if let Some(cg) = &opts.cg {
        model = model.with_cg(cg.clone());
    }
    let draws = 5;
    let mut rng = seeds.rng("inputs");
    let x = random_cloud(40, &mut rng)?;
    let queries: Vec<Vec3> = (0..16).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.6..0.6))).collect();
    let enc = model.encode_cloud(&x)?;
    let base = model.occupancy_batch(&enc, &queries);
    let feats = model.encode(&x)?;

    let mut occ_dev: f64 = 0.0;
    let mut enc_dev: f64 = 0.0;
    for _ in 0..draws {
        let g = SE3Transform::random(&mut rng, 1.0);
        let gx = apply_se3(&x, &g);
        let genc = model.encode_cloud(&gx)?;
        let gq: Vec<Vec3> = queries.iter().map(|&q| g.apply(q)).collect();
        occ_dev = occ_dev.max(max_diff(&model.occupancy_batch(&genc, &gq), &base));
        let rotated: Vec<FiberVec> = feats.iter().map(|f| f.rotate(&g.r)).collect();
        enc_dev = enc_dev.max(fibers_diff(&model.encode(&gx)?, &rotated));
    }

    // Reordering the cloud must not change a single bit.
    let mut perm_dev: f64 = 0.0;
    for _ in 0..draws {
        let mut perm: Vec<usize> = (0..x.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let px = x.permuted(&perm);
        let got = model.occupancy_batch(&model.encode_cloud(&px)?, &queries);
        let bits_differ = got.iter().zip(&base).any(|(a, b)| a.to_bits() != b.to_bits());
        perm_dev = perm_dev.max(if bits_differ {
            max_diff(&got, &base).max(f64::MIN_POSITIVE)
        } else {
            0.0
        });
    }

    Ok(Report::new(
        Suite::Model,
        seed,
        tol,
        vec![
            Check::new("occupancy_se3_invariance", draws, occ_dev, tol),
            Check::new("encoder_rotation_equivariance", draws, enc_dev, tol),
            Check::new("permutation_invariance", draws, perm_dev, 0.0),
        ],
    ))
}

/// Sizes of the `grad` suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteConfig {
    pub model: ModelConfig,
    pub points: usize,
    pub queries: usize,
    pub radius_scale: f64,
}

/// Two encoder layers of width 8 with two heads, ten points and four
/// queries.
pub fn grad_config() -> GradSuiteConfig {
    GradSuiteConfig {
        model: ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            mult: 8,
            dec_out_scalars: 4,
            head_hidden: 8,
            k: 6,
            ..ModelConfig::desk()
        },
        points: 10,
        queries: 4,
        radius_scale: 0.3,
    }
}

pub fn grad_suite(seed: u64, tol: f64, cfg: &GradSuiteConfig) -> Result<Report> {
    let seeds = SeedStream::new(seed);
    let mut params = init_params(&cfg.model, seeds.seed_for("init"))?;
    params.radius_scale = cfg.radius_scale;
    let item = random_check_item(cfg.points, cfg.queries, &mut seeds.rng("item"))?;
    let gc = GradCheckConfig {
        rel_tol: tol,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&params, &item, &gc)?;
    // A tensor passes when every scalar is within the absolute or the
    // relative tolerance; the reported deviation is the relative one.
    let checks = report
        .params
        .iter()
        .map(|p| Check {
            name: p.name.clone(),
            draws: p.scalars,
            max_deviation: p.max_rel_err,
            tol,
            passed: p.passed,
        })
        .collect();
    Ok(Report::new(Suite::Grad, seed, tol, checks))
}

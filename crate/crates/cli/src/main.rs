//! `ngif`: generate a synthetic dataset, train, reconstruct and evaluate.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad configuration or input
//! (including frame or skeleton mismatches), 3 training diverged, 4 empty
//! surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ngif::data::{read_pose_list, BodyConfig, DataConfig, Dataset, LabelMode, BODY_FILE, BODY_KEYS};
use ngif::fields::{WeightMode, WeightPrior};
use ngif::kv::KeyValues;
use ngif::metrics::MetricConfig;
use ngif::pipeline::{
    body_prior, evaluate_pairs, generate, read_mesh_dir, reconstruct, reconstruct_heldout, ReconOptions,
};
use ngif::train::{load_checkpoint, resolve_checkpoint, train, TrainConfig, TrainOptions};
use ngif::{Error, Mesh, MeshFormat};

const THREADS_ENV: &str = "NGIF_THREADS";
const LOCK_FILE: &str = ".lock";

#[derive(Parser)]
#[command(name = "ngif", version, about = "Pose-conditioned implicit surfaces of a synthetic articulated body")]
struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample poses, build ground-truth frames and labeled training points.
    Generate(GenerateArgs),
    /// Run the staged training schedule on a dataset.
    Train(TrainArgs),
    /// Extract meshes of a trained model in given poses.
    Reconstruct(ReconstructArgs),
    /// Score predicted meshes against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file with body and data settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    poses: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Surface samples per frame.
    #[arg(long)]
    n_surface: Option<usize>,
    /// Marching-cubes resolution of the ground-truth frames.
    #[arg(long)]
    frame_res: Option<usize>,
    #[arg(long, value_enum)]
    labels: Option<Labels>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Oracle,
    Mesh,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Blend weights from the body at the nearest surface point instead of the mapping network.
    NnWeights,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints, loss.csv and a copy of the body config go here.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs of the three stages, e.g. `10,40,40`.
    #[arg(long, value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Keep every epoch's checkpoint.
    #[arg(long)]
    keep_all: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Narrow-band lattice stride; 0 evaluates every voxel.
    #[arg(long, default_value_t = 0)]
    band: usize,
    /// Keep surface pieces that enclose no posed joint.
    #[arg(long)]
    keep_floaters: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Checkpoint file, or a training directory for its latest checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pose list; meshes are named by position in the list.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    poses: Option<PathBuf>,
    /// Dataset whose held-out frames to reconstruct, named by frame id.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Extract a closed shell around the `|d| = tau` level set.
    #[arg(long)]
    thin: bool,
    #[arg(long, default_value_t = 0.01, requires = "thin")]
    tau: f64,
    #[arg(long, value_enum, default_value = "obj")]
    format: Format,
    /// Skip the normal network and keep face normals.
    #[arg(long)]
    no_normals: bool,
    /// Body config for nearest-surface weights; defaults to the one next to the checkpoint.
    #[arg(long)]
    body: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Obj,
    Ply,
    PlyAscii,
}

impl From<Format> for MeshFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Obj => MeshFormat::Obj,
            Format::Ply => MeshFormat::PlyBinary,
            Format::PlyAscii => MeshFormat::PlyAscii,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted meshes, matched to references by file stem.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    /// Reconstruct the dataset's held-out frames from this checkpoint instead.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Directory of reference meshes.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    gt: Option<PathBuf>,
    /// Dataset whose held-out frame meshes are the references.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reports go here.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate the checkpoint with nearest-surface blend weights.
    #[arg(long, value_enum, requires = "checkpoint")]
    ablation: Option<Ablation>,
    #[command(flatten)]
    grid: GridArgs,
    /// F-score distance threshold.
    #[arg(long, default_value_t = 0.01)]
    tau_f: f64,
    #[arg(long, default_value_t = 64)]
    iou_res: usize,
    /// Surface samples per mesh for distances and F-score.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exclusive use of an output directory for the life of the guard.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(
                "out",
                format!("{} is in use by another run (remove {} if it is stale)", dir.display(), path.display()),
            )
            .into()),
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn read_config(path: Option<&Path>) -> anyhow::Result<KeyValues> {
    Ok(match path {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::default(),
    })
}

fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let kv = read_config(a.config.as_deref())?;
    let body = BodyConfig::from_kv(&kv.only(&BODY_KEYS))?;
    let mut data = DataConfig::from_kv(&kv, &BODY_KEYS)?;
    if let Some(v) = a.poses {
        data.poses = v;
    }
    if let Some(v) = a.seed {
        data.seed = v;
    }
    if let Some(v) = a.n_surface {
        data.n_surface = v;
    }
    if let Some(v) = a.frame_res {
        data.frame_res = v;
    }
    if let Some(l) = a.labels {
        data.labels = match l {
            Labels::Oracle => LabelMode::Oracle,
            Labels::Mesh => LabelMode::Mesh,
        };
    }
    body.validate()?;
    data.validate()?;
    let _lock = DirLock::acquire(&a.out)?;
    let m = generate(&body, &data, &a.out)?;
    println!(
        "{} frames ({} train, {} held-out), {} samples per frame, seed {}, config {}",
        m.frame_count,
        m.train.len(),
        m.heldout.len(),
        m.samples_per_frame,
        m.seed,
        &m.config_hash[..12]
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = &a.epochs {
        cfg.epochs = <[usize; 3]>::try_from(&e[..])
            .map_err(|_| Error::config("epochs", format!("expected three values, got {}", e.len())))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.ablation == Some(Ablation::NnWeights) {
        cfg.weight_mode = WeightMode::NearestSurface;
    }
    cfg.validate()?;
    let dataset = Dataset::load(&a.data)?;
    let _lock = DirLock::acquire(&a.out)?;
    fs::write(a.out.join(BODY_FILE), dataset.body_config.to_text()).with_context(|| format!("writing into {}", a.out.display()))?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        keep_all: a.keep_all,
    };
    let r = train(&dataset, &cfg, &opts)?;
    if let Some(last) = r.curve.last() {
        println!(
            "finished epoch {} (stage {}), validation L_SDF {:.5}",
            last.epoch,
            last.stage,
            last.val_sdf.unwrap_or(f64::NAN)
        );
    }
    if let Some(p) = &r.last_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn load_body(explicit: Option<&Path>, ckpt: &Path) -> anyhow::Result<BodyConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(BODY_FILE),
    };
    Ok(BodyConfig::from_kv(&KeyValues::read(&path)?)?)
}

fn cmd_reconstruct(a: &ReconstructArgs) -> anyhow::Result<()> {
    let ckpt = resolve_checkpoint(&a.checkpoint)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let opts = ReconOptions {
        res: a.grid.res,
        band_stride: a.grid.band,
        thin: a.thin.then_some(a.tau),
        normals: !a.no_normals,
        bounds: None,
        keep_floaters: a.grid.keep_floaters,
    };
    let format = MeshFormat::from(a.format);
    let _lock = DirLock::acquire(&a.out)?;
    let write = |name: &str, m: &Mesh<f32>| -> anyhow::Result<()> {
        let p = a.out.join(format!("{name}.{}", format.extension()));
        ngif::mesh::write_mesh(m, &p, format)?;
        log::info!("{}: {} vertices, {} triangles", p.display(), m.vertices.len(), m.triangles.len());
        Ok(())
    };
    let mut count = 0;
    if let Some(dir) = &a.data {
        let dataset = Dataset::load(dir)?;
        ngif::train::check_skeleton(&model.skeleton, &dataset.skeleton)?;
        for (id, m) in reconstruct_heldout(&model, &dataset, &opts)? {
            write(&id.to_string(), &m)?;
            count += 1;
        }
    } else {
        let poses = read_pose_list(a.poses.as_deref().expect("clap requires poses or data"))?;
        let prior = match model.weight_mode {
            WeightMode::Learned => None,
            WeightMode::NearestSurface => body_prior(&model, &load_body(a.body.as_deref(), &ckpt)?)?,
        };
        for (i, (pose, shape)) in poses.iter().enumerate() {
            let shape: Vec<f32> = shape.iter().map(|v| *v as f32).collect();
            let (m, stats) = reconstruct(
                &model,
                prior.as_ref().map(|p| p as &dyn WeightPrior<f32>),
                &pose.cast(),
                (!shape.is_empty()).then_some(&shape[..]),
                &opts,
            )?;
            if stats.singular_voxels > 0 {
                log::warn!("pose {i}: {} singular voxels", stats.singular_voxels);
            }
            if stats.dropped_components > 0 {
                log::info!("pose {i}: dropped {} detached surface pieces", stats.dropped_components);
            }
            write(&format!("pose_{i}"), &m)?;
            count += 1;
        }
    }
    println!("wrote {count} meshes to {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let metric = MetricConfig {
        n_samples: a.samples,
        iou_res: a.iou_res,
        tau_f: a.tau_f,
        seed: a.seed,
        ..MetricConfig::default()
    };
    let dataset = a.data.as_deref().map(Dataset::load).transpose()?;
    let _lock = DirLock::acquire(&a.out)?;
    let pred: Vec<(String, Mesh<f32>)> = match (&a.pred, &a.checkpoint) {
        (Some(dir), _) => read_mesh_dir(dir)?,
        (None, Some(c)) => {
            let ds = dataset.as_ref().expect("clap requires data with checkpoint");
            let (mut model, _) = load_checkpoint(&resolve_checkpoint(c)?)?;
            ngif::train::check_skeleton(&model.skeleton, &ds.skeleton)?;
            if a.ablation == Some(Ablation::NnWeights) {
                if model.weight_mode == WeightMode::Learned {
                    log::warn!("the canonical fields of this checkpoint were trained with learned weights");
                }
                model.weight_mode = WeightMode::NearestSurface;
            }
            let opts = ReconOptions {
                res: a.grid.res,
                band_stride: a.grid.band,
                keep_floaters: a.grid.keep_floaters,
                ..ReconOptions::default()
            };
            let meshes = reconstruct_heldout(&model, ds, &opts)?;
            let dir = a.out.join("meshes");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (id, m) in &meshes {
                ngif::mesh::write_mesh(m, &dir.join(format!("{id}.obj")), MeshFormat::Obj)?;
            }
            meshes.into_iter().map(|(id, m)| (id.to_string(), m)).collect()
        }
        (None, None) => unreachable!("clap requires pred or checkpoint"),
    };
    let gt: Vec<(String, Mesh<f32>)> = match (&a.gt, &dataset) {
        (Some(dir), _) => read_mesh_dir(dir)?,
        (None, Some(ds)) => ds
            .manifest
            .heldout
            .iter()
            .map(|&id| Ok((id.to_string(), ds.mesh(id)?)))
            .collect::<ngif::Result<_>>()?,
        (None, None) => unreachable!("clap requires gt or data"),
    };
    let report = evaluate_pairs(&pred, &gt, &metric)?;
    let csv = a.out.join("report.csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let text = report.to_text();
    fs::write(a.out.join("report.txt"), &text).with_context(|| format!("writing into {}", a.out.display()))?;
    print!("{text}");
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("`{v}` is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let run = || -> anyhow::Result<()> {
        init_threads()?;
        match &cli.command {
            Command::Generate(a) => cmd_generate(a),
            Command::Train(a) => cmd_train(a),
            Command::Reconstruct(a) => cmd_reconstruct(a),
            Command::Evaluate(a) => cmd_evaluate(a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

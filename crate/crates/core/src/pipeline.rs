//! End-to-end steps shared by the command line and the acceptance suite:
//! dataset generation, per-pose reconstruction and evaluation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_dataset, write_pose_list, make_synthetic_body, sample_poses, stream_seed, BodyConfig, CapsuleBody, DataConfig, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::fields::{NeuralGif, WeightMode, WeightPrior};
use crate::geometry::Aabb;
use crate::mesh::Mesh;
use crate::metrics::{evaluate_frame, EvalReport, MetricConfig};
use crate::recon::{
    attach_normals, auto_bounds, eval_grid, eval_grid_banded, keep_anchored_components, marching_cubes, thin_surface_mesh, ModelField, AUTO_BOUNDS_MARGIN,
    DEFAULT_CHUNK,
};
use crate::skeleton::Pose;

pub const TRAIN_POSES_FILE: &str = "train.poses";
pub const HELDOUT_POSES_FILE: &str = "heldout.poses";

/// Samples `data.poses` poses from the data seed and builds the dataset,
/// plus pose lists of both splits.
pub fn generate(body: &BodyConfig, data: &DataConfig, dir: &Path) -> Result<Manifest> {
    body.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(data.seed, u64::MAX, 1));
    let poses = sample_poses(body.joint_count, data.poses, &mut rng);
    let manifest = build_dataset(body, data, &poses, dir)?;
    for (file, ids) in [(TRAIN_POSES_FILE, &manifest.train), (HELDOUT_POSES_FILE, &manifest.heldout)] {
        let list: Vec<_> = ids.iter().map(|&i| (poses[i].clone(), data.shape_of(i))).collect();
        write_pose_list(&dir.join(file), &list)?;
    }
    Ok(manifest)
}

/// Grid and extraction settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconOptions {
    pub res: usize,
    /// Lattice stride of the narrow-band evaluation; below 2 evaluates every voxel.
    pub band_stride: usize,
    /// Extract the `|d*| = tau` shell instead of the zero level set.
    pub thin: Option<f64>,
    pub normals: bool,
    pub bounds: Option<Aabb<f32>>,
    /// Keep surface pieces that enclose no posed joint. Thin shells are never filtered.
    pub keep_floaters: bool,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions {
            res: 128,
            band_stride: 0,
            thin: None,
            normals: true,
            bounds: None,
            keep_floaters: false,
        }
    }
}

/// Counters of one reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReconStats {
    pub singular_voxels: usize,
    pub fallback_normals: usize,
    /// Border samples inside the surface, raised to close the mesh.
    pub capped_border: usize,
    /// Components dropped for enclosing no posed joint.
    pub dropped_components: usize,
}

/// The body prior a nearest-surface model needs, or `None` for learned weights.
pub fn body_prior(model: &NeuralGif<f32>, body: &BodyConfig) -> Result<Option<CapsuleBody<f32>>> {
    match model.weight_mode {
        WeightMode::Learned => Ok(None),
        WeightMode::NearestSurface => Ok(Some(make_synthetic_body(body)?)),
    }
}

/// Mesh of the learned surface in one pose.
pub fn reconstruct(
    model: &NeuralGif<f32>,
    prior: Option<&dyn WeightPrior<f32>>,
    pose: &Pose<f32>,
    shape: Option<&[f32]>,
    opts: &ReconOptions,
) -> Result<(Mesh<f32>, ReconStats)> {
    let ctx = model.context(pose, shape)?;
    let bounds = opts
        .bounds
        .unwrap_or_else(|| auto_bounds(&ctx.posed_joints, AUTO_BOUNDS_MARGIN as f32));
    let src = ModelField {
        model,
        context: &ctx,
        prior,
    };
    let mut g = match opts.thin {
        None if opts.band_stride >= 2 => eval_grid_banded(&src, bounds, opts.res, opts.band_stride, DEFAULT_CHUNK)?,
        _ => eval_grid(&src, bounds, opts.res, DEFAULT_CHUNK)?,
    };
    let h = g.field.voxel_size();
    let floor = h[0].min(h[1]).min(h[2]) * 0.5 + opts.thin.map_or(0.0, |t| t as f32);
    let capped_border = g.field.cap_border(floor);
    if capped_border > 0 {
        log::debug!("surface leaves the grid bounds at {capped_border} border samples; capping it there");
    }
    let mut mesh = match opts.thin {
        Some(tau) => thin_surface_mesh(&g.field, tau as f32)?,
        None => marching_cubes(&g.field, 0.0)?,
    };
    let mut stats = ReconStats {
        singular_voxels: g.singular,
        capped_border,
        ..Default::default()
    };
    // a thin shell encloses no joints
    if !opts.keep_floaters && opts.thin.is_none() {
        let (kept, dropped) = keep_anchored_components(&mesh, &ctx.posed_joints)?;
        mesh = kept;
        stats.dropped_components = dropped;
    }
    if opts.normals {
        stats.fallback_normals = attach_normals(&mut mesh, model, &ctx, prior);
    }
    Ok((mesh, stats))
}

/// Reconstructs every held-out frame of a dataset.
pub fn reconstruct_heldout(model: &NeuralGif<f32>, dataset: &Dataset, opts: &ReconOptions) -> Result<Vec<(usize, Mesh<f32>)>> {
    let prior = body_prior(model, &dataset.body_config)?;
    dataset
        .manifest
        .heldout
        .iter()
        .map(|&id| {
            let f = &dataset.frames[id];
            let shape: Vec<f32> = f.shape.iter().map(|v| *v as f32).collect();
            let (m, stats) = reconstruct(
                model,
                prior.as_ref().map(|p| p as &dyn WeightPrior<f32>),
                &f.pose.cast(),
                (!shape.is_empty()).then_some(&shape[..]),
                opts,
            )?;
            if stats.singular_voxels > 0 {
                log::warn!("frame {id}: {} singular voxels", stats.singular_voxels);
            }
            Ok((id, m))
        })
        .collect()
}

/// Metrics of predicted meshes against references with the same ids.
/// Ids missing on either side are a configuration error naming them.
pub fn evaluate_pairs(pred: &[(String, Mesh<f32>)], gt: &[(String, Mesh<f32>)], cfg: &MetricConfig) -> Result<EvalReport> {
    let missing: Vec<&str> = gt
        .iter()
        .filter(|(id, _)| !pred.iter().any(|(p, _)| p == id))
        .chain(pred.iter().filter(|(id, _)| !gt.iter().any(|(g, _)| g == id)))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::config("frames", format!("missing frame ids: {}", missing.join(", "))));
    }
    let frames = pred
        .iter()
        .map(|(id, p)| {
            let g = &gt.iter().find(|(i, _)| i == id).expect("checked above").1;
            evaluate_frame(id.clone(), p, g, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        frames,
        tau_f: cfg.tau_f,
    })
}

/// Held-out reconstructions scored against the dataset's frame meshes.
pub fn evaluate_heldout(pred: &[(usize, Mesh<f32>)], dataset: &Dataset, cfg: &MetricConfig) -> Result<EvalReport> {
    let gt = pred
        .iter()
        .map(|(id, _)| Ok((id.to_string(), dataset.mesh(*id)?)))
        .collect::<Result<Vec<_>>>()?;
    let pred: Vec<(String, Mesh<f32>)> = pred.iter().map(|(id, m)| (id.to_string(), m.clone())).collect();
    evaluate_pairs(&pred, &gt, cfg)
}

/// Mesh files of a directory keyed by file stem, sorted by stem.
pub fn read_mesh_dir(dir: &Path) -> Result<Vec<(String, Mesh<f32>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("obj") || e.eq_ignore_ascii_case("ply"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((stem, crate::mesh::read_mesh(p)?))
        })
        .collect()
}

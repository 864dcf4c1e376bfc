//! Surface and volume agreement between a predicted and a reference mesh.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{sign_by_ray_parity, stream_seed};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::mesh::{Mesh, MeshIndex};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    /// Surface samples per mesh for distances and F-score.
    pub n_samples: usize,
    pub iou_res: usize,
    /// F-score distance threshold in model units.
    pub tau_f: f64,
    pub n_rays: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_samples: 10_000,
            iou_res: 64,
            tau_f: 0.01,
            n_rays: 5,
            seed: 0,
        }
    }
}

fn non_empty<T: Real>(m: &Mesh<T>, what: &str) -> Result<Mesh<f64>> {
    if m.is_empty() || !(m.area() > T::zero()) {
        return Err(Error::invalid(format!("{what} mesh is empty")));
    }
    Ok(m.cast())
}

/// Unsigned distances from `n` area-uniform samples of `from` to `to`.
pub fn surface_distances(from: &Mesh<f64>, to: &MeshIndex, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = from.sample_surface(n, &mut rng)?;
    Ok(pts.par_iter().map(|(p, _)| to.nearest(*p).distance_squared.sqrt()).collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean distance from samples on `gt` to the surface of `pred`.
pub fn point_to_surface<T: Real>(pred: &Mesh<T>, gt: &Mesh<T>, n_samples: usize, seed: u64) -> Result<f64> {
    let (pred, gt) = (non_empty(pred, "predicted")?, non_empty(gt, "reference")?);
    Ok(mean(&surface_distances(&gt, &MeshIndex::new(&pred)?, n_samples, seed)?))
}

/// Inside flags of the voxel centers of a `res³` grid over `bounds`.
fn voxelize(mesh: &Mesh<f64>, bounds: &Aabb<f64>, res: usize, n_rays: usize, seed: u64) -> Result<Vec<bool>> {
    let index = MeshIndex::new(mesh)?;
    let h = bounds.extent().scale(1.0 / res as f64);
    (0..res)
        .into_par_iter()
        .map(|i| {
            // one stream per slab, shared by every mesh voxelized with this seed
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64, 0));
            let mut out = Vec::with_capacity(res * res);
            for j in 0..res {
                for k in 0..res {
                    let p = bounds.min
                        + Vec3::new((i as f64 + 0.5) * h[0], (j as f64 + 0.5) * h[1], (k as f64 + 0.5) * h[2]);
                    out.push(sign_by_ray_parity(&index, p, n_rays, &mut rng)? < 0.0);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

/// Volumetric intersection over union on a shared grid over both boxes.
pub fn iou<T: Real>(pred: &Mesh<T>, gt: &Mesh<T>, res: usize, n_rays: usize, seed: u64) -> Result<f64> {
    if res < 2 {
        return Err(Error::config("iou_res", format!("{res} is too small")));
    }
    let (pred, gt) = (non_empty(pred, "predicted")?, non_empty(gt, "reference")?);
    pred.check_watertight()
        .map_err(|e| Error::NotWatertight(format!("predicted mesh: {e}")))?;
    gt.check_watertight()
        .map_err(|e| Error::NotWatertight(format!("reference mesh: {e}")))?;
    let bounds = pred.bounds().union(&gt.bounds());
    let a = voxelize(&pred, &bounds, res, n_rays, seed)?;
    let b = voxelize(&gt, &bounds, res, n_rays, seed)?;
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Precision and recall at `tau` combined into a percentage.
pub fn fscore<T: Real>(pred: &Mesh<T>, gt: &Mesh<T>, tau: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let (pred, gt) = (non_empty(pred, "predicted")?, non_empty(gt, "reference")?);
    let (ip, ig) = (MeshIndex::new(&pred)?, MeshIndex::new(&gt)?);
    Ok(fscore_from(
        &surface_distances(&pred, &ig, n_samples, seed)?,
        &surface_distances(&gt, &ip, n_samples, seed ^ 1)?,
        tau,
    ))
}

fn fscore_from(pred_to_gt: &[f64], gt_to_pred: &[f64], tau: f64) -> f64 {
    let frac = |d: &[f64]| d.iter().filter(|x| **x <= tau).count() as f64 / d.len().max(1) as f64;
    let (p, r) = (frac(pred_to_gt), frac(gt_to_pred));
    if p + r == 0.0 {
        0.0
    } else {
        200.0 * p * r / (p + r)
    }
}

/// Metrics of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub id: String,
    /// Mean distance from reference samples to the prediction.
    pub point2surface: f64,
    /// Mean distance from predicted samples to the reference.
    pub point2surface_reverse: f64,
    pub iou: f64,
    pub fscore: f64,
}

pub fn evaluate_frame<T: Real>(id: impl Into<String>, pred: &Mesh<T>, gt: &Mesh<T>, cfg: &MetricConfig) -> Result<FrameMetrics> {
    let (p, g) = (non_empty(pred, "predicted")?, non_empty(gt, "reference")?);
    let (ip, ig) = (MeshIndex::new(&p)?, MeshIndex::new(&g)?);
    let gt_to_pred = surface_distances(&g, &ip, cfg.n_samples, cfg.seed)?;
    let pred_to_gt = surface_distances(&p, &ig, cfg.n_samples, cfg.seed ^ 1)?;
    Ok(FrameMetrics {
        id: id.into(),
        point2surface: mean(&gt_to_pred),
        point2surface_reverse: mean(&pred_to_gt),
        iou: iou(&p, &g, cfg.iou_res, cfg.n_rays, cfg.seed)?,
        fscore: fscore_from(&pred_to_gt, &gt_to_pred, cfg.tau_f),
    })
}

/// Per-frame metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub tau_f: f64,
}

impl EvalReport {
    pub fn aggregate(&self) -> FrameMetrics {
        let m = |f: fn(&FrameMetrics) -> f64| mean(&self.frames.iter().map(f).collect::<Vec<_>>());
        FrameMetrics {
            id: "mean".into(),
            point2surface: m(|f| f.point2surface),
            point2surface_reverse: m(|f| f.point2surface_reverse),
            iou: m(|f| f.iou),
            fscore: m(|f| f.fscore),
        }
    }

    /// One row per frame plus the aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,point2surface,point2surface_reverse,iou,fscore\n");
        for f in self.frames.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.6},{:.4}",
                f.id, f.point2surface, f.point2surface_reverse, f.iou, f.fscore
            );
        }
        s
    }

    /// Distances are shown ×1000, i.e. millimetres on a unit-height body.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>12} {:>8} {:>10}\n",
            "frame", "p2s (mm)", "rev (mm)", "IoU", format!("F@{}", self.tau_f)
        );
        for f in self.frames.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "{:<12} {:>12.3} {:>12.3} {:>8.4} {:>10.2}",
                f.id,
                f.point2surface * 1000.0,
                f.point2surface_reverse * 1000.0,
                f.iou,
                f.fscore
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    #[test]
    fn fscore_of_separated_samples() {
        assert_eq!(fscore_from(&[1.0, 1.0], &[1.0], 0.5), 0.0);
        assert_eq!(fscore_from(&[0.1], &[0.1], 0.5), 100.0);
        assert!((fscore_from(&[0.1, 1.0], &[0.1], 0.5) - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_has_an_aggregate_row() {
        let s = icosphere(Vec3::zero(), 1.0, 2);
        let cfg = MetricConfig {
            n_samples: 200,
            iou_res: 16,
            ..MetricConfig::default()
        };
        let f = evaluate_frame("0", &s, &s, &cfg).unwrap();
        let r = EvalReport {
            frames: vec![f.clone(), FrameMetrics { id: "1".into(), ..f }],
            tau_f: 0.01,
        };
        assert_eq!(r.to_csv().lines().count(), 1 + 3);
        assert!(r.to_text().contains("mean"));
    }
}

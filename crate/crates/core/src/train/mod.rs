//! Losses and the staged optimization: weight pretraining, joint training of
//! the mapping and SDF, then displacement and normals with the mapping frozen.

mod config;
mod loss;
mod store;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::TrainConfig;
pub use loss::{cross_entropy, loss_normal, loss_sdf, reg_displacement, UNIT_TOLERANCE};
pub use store::{
    checkpoint_name, latest_checkpoint, load_adam, load_checkpoint, meta_path, remove_checkpoint, resolve_checkpoint,
    save_checkpoint, Progress,
};

use crate::data::{stream_seed, Band, CapsuleBody, Dataset, FrameRecord};
use crate::error::{check_dim, Error, Result};
use crate::fields::{ModelGrads, NeuralGif, PoseContext, Query, Trace, Trainable, WeightMode, NET_NAMES};
use crate::geometry::Vec3;
use crate::nets::{AdamConfig, AdamState, MlpGrads};
use crate::skeleton::Skeleton;

/// Labeled posed points, each tied to one of a shared list of pose contexts.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: Vec<Vec3<f32>>,
    pub context: Vec<usize>,
    pub sdf: Vec<f32>,
    pub normals: Vec<Vec3<f32>>,
    pub bands: Vec<Band>,
    /// Prior blend weights per point, for models without a mapping network.
    pub weights: Option<Array2<f32>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Samples of `frames`; `per_frame > 0` keeps an evenly strided subset.
    /// `context_of(i)` gives the context slot of the `i`-th frame.
    pub fn from_frames(frames: &[&FrameRecord], per_frame: usize) -> Self {
        let mut s = SampleSet {
            points: Vec::new(),
            context: Vec::new(),
            sdf: Vec::new(),
            normals: Vec::new(),
            bands: Vec::new(),
            weights: None,
        };
        for (slot, f) in frames.iter().enumerate() {
            let n = f.samples.len();
            let stride = if per_frame == 0 || per_frame >= n { 1 } else { n / per_frame };
            for x in f.samples.iter().step_by(stride.max(1)).take(if per_frame == 0 { n } else { per_frame }) {
                s.points.push(x.p);
                s.context.push(slot);
                s.sdf.push(x.d);
                s.normals.push(x.n);
                s.bands.push(x.band);
            }
        }
        s
    }

    /// Fills [`SampleSet::weights`] from the body's nearest-surface prior.
    pub fn attach_prior_weights(&mut self, body: &CapsuleBody<f64>, contexts: &[PoseContext<f64>]) {
        let k = body.joint_count();
        let rows: Vec<Vec<f64>> = self
            .points
            .par_iter()
            .zip(self.context.par_iter())
            .map(|(p, c)| body.nearest_surface_weights(p.cast(), &contexts[*c]).0)
            .collect();
        let mut a = Array2::zeros((self.len(), k));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..k {
                a[[i, j]] = r[j] as f32;
            }
        }
        self.weights = Some(a);
    }

    fn gather(&self, idx: &[u32]) -> SampleSet {
        let pick = |i: &u32| *i as usize;
        SampleSet {
            points: idx.iter().map(|i| self.points[pick(i)]).collect(),
            context: idx.iter().map(|i| self.context[pick(i)]).collect(),
            sdf: idx.iter().map(|i| self.sdf[pick(i)]).collect(),
            normals: idx.iter().map(|i| self.normals[pick(i)]).collect(),
            bands: idx.iter().map(|i| self.bands[pick(i)]).collect(),
            weights: self.weights.as_ref().map(|w| {
                let rows: Vec<usize> = idx.iter().map(pick).collect();
                w.select(Axis(0), &rows)
            }),
        }
    }

    fn query<'a>(&'a self, contexts: &'a [PoseContext<f32>], lo: usize, hi: usize) -> Query<'a, f32> {
        Query {
            points: &self.points[lo..hi],
            contexts,
            context: &self.context[lo..hi],
            fixed_weights: self.weights.as_ref().map(|w| w.slice(s![lo..hi, ..])),
        }
    }
}

/// Pose contexts of `frames` in the given precision.
pub fn frame_contexts<T: crate::Real>(skeleton: &Skeleton<T>, frames: &[&FrameRecord]) -> Result<Vec<PoseContext<T>>> {
    frames
        .iter()
        .map(|f| {
            let shape: Vec<T> = f.shape.iter().map(|v| T::lit(*v)).collect();
            PoseContext::new(skeleton, &f.pose.cast(), (!shape.is_empty()).then_some(&shape[..]))
        })
        .collect()
}

/// Surface points with analytic blend weights, for weight pretraining.
#[derive(Clone, Debug)]
pub struct WeightTargets {
    pub points: Vec<Vec3<f32>>,
    pub context: Vec<usize>,
    pub weights: Array2<f32>,
}

/// The body's weights at up to `per_frame` surface samples of each frame.
pub fn weight_targets(body: &CapsuleBody<f64>, frames: &[&FrameRecord], per_frame: usize) -> Result<WeightTargets> {
    let contexts = frame_contexts(&body.skeleton, frames)?;
    let mut pts = Vec::new();
    let mut ctx = Vec::new();
    for (slot, f) in frames.iter().enumerate() {
        let surf: Vec<_> = f.samples.iter().filter(|s| s.band == Band::Surface).collect();
        let stride = (surf.len() / per_frame.max(1)).max(1);
        for s in surf.iter().step_by(stride).take(per_frame) {
            pts.push(s.p);
            ctx.push(slot);
        }
    }
    let k = body.joint_count();
    let rows: Vec<Vec<f64>> = pts
        .par_iter()
        .zip(ctx.par_iter())
        .map(|(p, c)| body.nearest_surface_weights(p.cast(), &contexts[*c]).0)
        .collect();
    let mut weights = Array2::zeros((pts.len(), k));
    for (i, r) in rows.iter().enumerate() {
        for j in 0..k {
            weights[[i, j]] = r[j] as f32;
        }
    }
    Ok(WeightTargets {
        points: pts,
        context: ctx,
        weights,
    })
}

fn chunk_bounds(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(chunk).map(|lo| (lo, (lo + chunk).min(n))).collect()
}

fn sum_grads(a: &mut Option<MlpGrads<f32>>, b: Option<MlpGrads<f32>>) {
    match (a.as_mut(), b) {
        (Some(x), Some(y)) => x.add_assign(&y),
        (None, Some(y)) => *a = Some(y),
        _ => {}
    }
}

fn sum_model_grads(parts: Vec<ModelGrads<f32>>) -> ModelGrads<f32> {
    let mut out = ModelGrads {
        weights: None,
        displacement: None,
        sdf: None,
        normal: None,
        shape: None,
    };
    // fixed order keeps the sum independent of scheduling
    for g in parts {
        sum_grads(&mut out.weights, g.weights);
        sum_grads(&mut out.displacement, g.displacement);
        sum_grads(&mut out.sdf, g.sdf);
        sum_grads(&mut out.normal, g.normal);
        sum_grads(&mut out.shape, g.shape);
    }
    out
}

/// One Adam state per network, in [`NET_NAMES`] order.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub states: Vec<Option<AdamState<f32>>>,
}

impl Optimizers {
    pub fn new(model: &NeuralGif<f32>) -> Self {
        let mut states: Vec<Option<AdamState<f32>>> = model.named_nets().iter().map(|(_, m)| Some(AdamState::new(m))).collect();
        states.resize(NET_NAMES.len(), None);
        Optimizers { states }
    }

    fn restore(model: &NeuralGif<f32>, saved: Vec<(String, AdamState<f32>)>) -> Self {
        let mut o = Self::new(model);
        for (name, st) in saved {
            if let Some(i) = NET_NAMES.iter().position(|n| *n == name) {
                o.states[i] = Some(st);
            }
        }
        o
    }

    fn named(&self) -> Vec<(&str, &AdamState<f32>)> {
        NET_NAMES
            .iter()
            .zip(&self.states)
            .filter_map(|(n, s)| s.as_ref().map(|s| (*n, s)))
            .collect()
    }

    fn apply(&mut self, model: &mut NeuralGif<f32>, g: &ModelGrads<f32>, cfg: &AdamConfig, lr: f64) -> Result<()> {
        let st = &mut self.states;
        let pairs: [(usize, Option<&MlpGrads<f32>>); 5] = [
            (0, g.weights.as_ref()),
            (1, g.displacement.as_ref()),
            (2, g.sdf.as_ref()),
            (3, g.normal.as_ref()),
            (4, g.shape.as_ref()),
        ];
        for (i, grads) in pairs {
            let Some(grads) = grads else { continue };
            let net = match i {
                0 => &mut model.weight_net,
                1 => &mut model.displacement_net,
                2 => &mut model.sdf_net,
                3 => &mut model.normal_net,
                _ => model.shape_net.as_mut().expect("shape grads imply a shape net"),
            };
            st[i].as_mut().expect("optimizer for every network").step(net, grads, cfg, lr)?;
        }
        Ok(())
    }
}

/// Mean losses of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub sdf: f64,
    pub normal: f64,
    /// Mean `‖Δ‖²` whether or not it is penalized.
    pub reg: f64,
    /// Samples inside the normal band.
    pub near: usize,
    pub count: usize,
}

fn diverged(stage: u32, epoch: usize, detail: impl Into<String>) -> Error {
    Error::Diverged {
        stage,
        epoch,
        detail: detail.into(),
    }
}

/// Per-point loss gradients of a forward pass over a whole batch.
struct BatchGrads {
    sdf: Vec<f32>,
    displacement: Option<Array2<f32>>,
    normal: Option<Vec<Vec3<f32>>>,
}

fn batch_losses(
    batch: &SampleSet,
    traces: &[(usize, usize, Trace<f32>)],
    cfg: &TrainConfig,
    train: Trainable,
) -> Result<(LossStats, BatchGrads)> {
    let n = batch.len();
    let inv = 1.0 / n.max(1) as f32;
    let mut st = LossStats {
        count: n,
        ..Default::default()
    };
    let mut g_sdf = vec![0f32; n];
    let mut g_disp = (train.displacement && cfg.lambda_reg > 0.0).then(|| Array2::zeros((n, 3)));
    let mut g_norm = train.normal.then(|| vec![Vec3::<f32>::zero(); n]);
    let (lam_sdf, lam_reg, lam_n) = (cfg.lambda_sdf as f32, cfg.lambda_reg as f32, cfg.lambda_norm as f32);
    let delta = cfg.delta as f32;
    let mut near = Vec::new();
    for (lo, _, t) in traces {
        for (j, d) in t.sdf.iter().enumerate() {
            let i = lo + j;
            let (l, g) = loss_sdf(*d, batch.sdf[i]);
            st.sdf += f64::from(l);
            g_sdf[i] = lam_sdf * g * inv;
            let dv = Vec3([t.displacement[[j, 0]], t.displacement[[j, 1]], t.displacement[[j, 2]]]);
            let (r, gr) = reg_displacement(dv);
            st.reg += f64::from(r);
            if let Some(gd) = g_disp.as_mut() {
                for c in 0..3 {
                    gd[[i, c]] = lam_reg * gr[c] * inv;
                }
            }
            if let Some(normals) = &t.normals {
                if d.abs() < delta && t.valid[j] {
                    near.push((i, normals[j]));
                }
            }
        }
    }
    if let Some(gn) = g_norm.as_mut() {
        let inv_near = 1.0 / near.len().max(1) as f32;
        for (i, pred) in &near {
            let (l, g) = loss_normal(*pred, batch.normals[*i])?;
            st.normal += f64::from(l);
            gn[*i] = g.scale(lam_n * inv_near);
        }
        st.near = near.len();
    }
    Ok((
        st,
        BatchGrads {
            sdf: g_sdf,
            displacement: g_disp,
            normal: g_norm,
        },
    ))
}

/// One optimizer step on `batch`; returns summed (not averaged) losses.
fn train_step(
    model: &mut NeuralGif<f32>,
    opt: &mut Optimizers,
    batch: &SampleSet,
    contexts: &[PoseContext<f32>],
    cfg: &TrainConfig,
    train: Trainable,
    lr: f64,
    (stage, epoch): (u32, usize),
) -> Result<LossStats> {
    let bounds = chunk_bounds(batch.len(), cfg.chunk);
    let m: &NeuralGif<f32> = model;
    let traces: Vec<(usize, usize, Trace<f32>)> = bounds
        .par_iter()
        .map(|&(lo, hi)| Ok((lo, hi, m.forward(&batch.query(contexts, lo, hi), train.normal)?)))
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::DegenerateNormal(v) => diverged(stage, epoch, format!("degenerate normal ({v})")),
            e => e,
        })?;
    if traces.iter().any(|(_, _, t)| t.sdf.iter().any(|d| !d.is_finite())) {
        return Err(diverged(stage, epoch, "non-finite SDF prediction"));
    }
    let (stats, g) = batch_losses(batch, &traces, cfg, train)?;
    let parts: Vec<ModelGrads<f32>> = traces
        .par_iter()
        .map(|(lo, hi, t)| {
            let gd = g.displacement.as_ref().map(|a| a.slice(s![*lo..*hi, ..]).to_owned());
            m.backward(
                &batch.query(contexts, *lo, *hi),
                t,
                &g.sdf[*lo..*hi],
                gd.as_ref(),
                g.normal.as_ref().map(|v| &v[*lo..*hi]),
                train,
            )
        })
        .collect::<Result<_>>()?;
    let grads = sum_model_grads(parts);
    for (name, gr) in [
        ("f_w", &grads.weights),
        ("f_def", &grads.displacement),
        ("f_csdf", &grads.sdf),
        ("f_norm", &grads.normal),
        ("f_def_shape", &grads.shape),
    ] {
        if gr.as_ref().is_some_and(|x| !x.is_finite()) {
            return Err(diverged(stage, epoch, format!("non-finite gradient in {name}")));
        }
    }
    opt.apply(model, &grads, &cfg.adam, lr)?;
    let mut s = stats;
    // callers average over the epoch
    s.count = batch.len();
    Ok(s)
}

/// Forward-only losses over a sample set; normals when `with_normals`.
pub fn evaluate_losses(
    model: &NeuralGif<f32>,
    set: &SampleSet,
    contexts: &[PoseContext<f32>],
    delta: f64,
    chunk: usize,
    with_normals: bool,
) -> Result<LossStats> {
    let parts: Vec<LossStats> = chunk_bounds(set.len(), chunk)
        .par_iter()
        .map(|&(lo, hi)| {
            let t = model.forward(&set.query(contexts, lo, hi), with_normals)?;
            let mut st = LossStats::default();
            for (j, d) in t.sdf.iter().enumerate() {
                let i = lo + j;
                st.sdf += f64::from(loss_sdf(*d, set.sdf[i]).0);
                let dv = Vec3([t.displacement[[j, 0]], t.displacement[[j, 1]], t.displacement[[j, 2]]]);
                st.reg += f64::from(reg_displacement(dv).0);
                if let Some(n) = &t.normals {
                    if f64::from(d.abs()) < delta && t.valid[j] {
                        st.normal += f64::from(loss_normal(n[j], set.normals[i])?.0);
                        st.near += 1;
                    }
                }
            }
            st.count = hi - lo;
            Ok(st)
        })
        .collect::<Result<_>>()?;
    let mut t = LossStats::default();
    for p in parts {
        t.sdf += p.sdf;
        t.normal += p.normal;
        t.reg += p.reg;
        t.near += p.near;
        t.count += p.count;
    }
    Ok(finish(t))
}

fn finish(mut t: LossStats) -> LossStats {
    let n = t.count.max(1) as f64;
    t.sdf /= n;
    t.reg /= n;
    t.normal /= t.near.max(1) as f64;
    t
}

fn weight_loss_chunk(model: &NeuralGif<f32>, targets: &WeightTargets, contexts: &[PoseContext<f32>], lo: usize, hi: usize, grad: bool) -> Result<(f64, Option<MlpGrads<f32>>)> {
    let x = model.weight_input(&targets.points[lo..hi], contexts, &targets.context[lo..hi]);
    let cache = model.weight_net.forward_batch(x.view())?;
    let y = cache.output();
    let k = y.ncols();
    let mut g = Array2::zeros((hi - lo, k));
    let mut l = 0.0;
    for i in 0..hi - lo {
        let t = targets.weights.row(lo + i);
        let mut row = vec![0f32; k];
        l += f64::from(cross_entropy(
            y.row(i).as_slice().expect("row-major"),
            t.as_slice().expect("row-major"),
            &mut row,
        ));
        for j in 0..k {
            g[[i, j]] = row[j];
        }
    }
    if !grad {
        return Ok((l, None));
    }
    Ok((l, Some(model.weight_net.backward_batch(&cache, g.view(), false)?.0)))
}

fn pretrain_epoch(
    model: &mut NeuralGif<f32>,
    opt: &mut Optimizers,
    targets: &WeightTargets,
    contexts: &[PoseContext<f32>],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let n = targets.points.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1, epoch as u64)));
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let rows: Vec<usize> = batch.iter().map(|i| *i as usize).collect();
        let sub = WeightTargets {
            points: rows.iter().map(|i| targets.points[*i]).collect(),
            context: rows.iter().map(|i| targets.context[*i]).collect(),
            weights: targets.weights.select(Axis(0), &rows),
        };
        let m: &NeuralGif<f32> = model;
        let parts: Vec<(f64, Option<MlpGrads<f32>>)> = chunk_bounds(rows.len(), cfg.chunk)
            .par_iter()
            .map(|&(lo, hi)| weight_loss_chunk(m, &sub, contexts, lo, hi, true))
            .collect::<Result<_>>()?;
        let mut grads: Option<MlpGrads<f32>> = None;
        let mut l = 0.0;
        for (pl, pg) in parts {
            l += pl;
            sum_grads(&mut grads, pg);
        }
        let mut grads = grads.expect("non-empty batch");
        grads.scale(1.0 / rows.len() as f32);
        if !l.is_finite() || !grads.is_finite() {
            return Err(diverged(1, epoch, "non-finite weight loss"));
        }
        total += l;
        opt.states[0]
            .as_mut()
            .expect("weight optimizer")
            .step(&mut model.weight_net, &grads, &cfg.adam, lr)?;
    }
    Ok(total / n.max(1) as f64)
}

/// Fits the mapping network to analytic weights by cross-entropy; returns
/// the mean loss of each epoch.
pub fn pretrain_canonical(
    model: &mut NeuralGif<f32>,
    targets: &WeightTargets,
    contexts: &[PoseContext<f32>],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut opt = Optimizers::new(model);
    (1..=epochs)
        .map(|e| pretrain_epoch(model, &mut opt, targets, contexts, cfg, cfg.pretrain_lr * cfg.lr_decay.powi(e as i32 - 1), e))
        .collect()
}

/// Mean total-variation distance between predicted and target weights.
pub fn weight_tv_distance(model: &NeuralGif<f32>, targets: &WeightTargets, contexts: &[PoseContext<f32>]) -> Result<f64> {
    let x = model.weight_input(&targets.points, contexts, &targets.context);
    let y = model.weight_net.forward_batch(x.view())?;
    let tv: f64 = y
        .output()
        .rows()
        .into_iter()
        .zip(targets.weights.rows())
        .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(u, v)| f64::from((u - v).abs())).sum::<f64>())
        .sum();
    Ok(tv / targets.points.len().max(1) as f64)
}

/// One row of the loss curve. Unused terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub stage: u32,
    pub sdf: Option<f64>,
    pub normal: Option<f64>,
    pub reg: Option<f64>,
    pub val_sdf: Option<f64>,
    /// Weight cross-entropy of pretraining.
    pub weights: Option<f64>,
}

pub const LOSS_HEADER: &str = "epoch,stage,L_SDF,L_norm,L_reg,val_L_SDF,L_w";

impl LossRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            f(self.sdf),
            f(self.normal),
            f(self.reg),
            f(self.val_sdf),
            f(self.weights)
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 7 {
            return None;
        }
        let f = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(LossRow {
            epoch: c[0].parse().ok()?,
            stage: c[1].parse().ok()?,
            sdf: f(c[2])?,
            normal: f(c[3])?,
            reg: f(c[4])?,
            val_sdf: f(c[5])?,
            weights: f(c[6])?,
        })
    }
}

pub const LOSS_FILE: &str = "loss.csv";

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            LossRow::parse(l).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "malformed loss row".into(),
            })
        })
        .collect()
}

fn write_loss_curve(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Where and how the schedule persists itself.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and the loss curve go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir`.
    pub resume: bool,
    /// Keep every epoch's checkpoint instead of the last one per stage.
    pub keep_all: bool,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NeuralGif<f32>,
    pub curve: Vec<LossRow>,
    /// The model as it stood at the end of each stage that ran.
    pub stage_models: Vec<(u32, NeuralGif<f32>)>,
    /// Global epoch after which the normal network started training.
    pub normal_start: Option<usize>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Rejects a dataset whose skeleton differs from the model's.
pub fn check_skeleton(model: &Skeleton<f32>, data: &Skeleton<f64>) -> Result<()> {
    let same = model.parents() == data.parents()
        && model
            .rest_joints()
            .iter()
            .zip(data.rest_joints())
            .all(|(a, b)| (a.cast::<f64>() - *b).norm() < 1e-6);
    if same && model.joint_count() == data.joint_count() {
        Ok(())
    } else {
        Err(Error::config(
            "skeleton",
            format!(
                "model has {} joints, dataset has {} or a different layout",
                model.joint_count(),
                data.joint_count()
            ),
        ))
    }
}

fn lr_at(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32 - 1)
}

/// The full schedule on the dataset's training frames, validated on the
/// held-out frames.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let body = dataset.body()?;
    let frames: Vec<&FrameRecord> = dataset.manifest.train.iter().map(|i| &dataset.frames[*i]).collect();
    let val_frames: Vec<&FrameRecord> = dataset.manifest.heldout.iter().map(|i| &dataset.frames[*i]).collect();
    if frames.is_empty() {
        return Err(Error::invalid("dataset has no training frames"));
    }
    let val_frames = if val_frames.is_empty() { frames.clone() } else { val_frames };

    let mut model_cfg = cfg.model.clone();
    model_cfg.shape_dim = dataset.manifest.shape_dim;
    let skeleton32: Skeleton<f32> = dataset.skeleton.cast();
    let train_hash = cfg.hash();
    let dataset_hash = dataset.manifest.config_hash.clone();

    let mut resume_from = None;
    if opts.resume {
        let dir = opts
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::invalid("resuming needs an output directory"))?;
        resume_from = latest_checkpoint(dir)?;
        if resume_from.is_none() {
            log::warn!("no checkpoint in {}, starting fresh", dir.display());
        }
    }

    let (mut model, mut opt, start, mut curve) = match &resume_from {
        Some(path) => {
            let (m, p) = load_checkpoint(path)?;
            if p.train_hash != train_hash || p.dataset_hash != dataset_hash {
                return Err(Error::config(
                    "resume",
                    format!("{} was written with a different configuration or dataset", path.display()),
                ));
            }
            let saved = load_adam(path, &m)?;
            let o = Optimizers::restore(&m, saved);
            let dir = opts.out_dir.as_ref().expect("checked above");
            let curve: Vec<LossRow> = read_loss_curve(&dir.join(LOSS_FILE))?
                .into_iter()
                .filter(|r| r.epoch <= p.global_epoch)
                .collect();
            (m, o, Some(p), curve)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, 0));
            let mut m = NeuralGif::new(skeleton32.clone(), model_cfg, &mut rng)?;
            m.weight_mode = cfg.weight_mode;
            let o = Optimizers::new(&m);
            (m, o, None, Vec::new())
        }
    };
    check_skeleton(&model.skeleton, &dataset.skeleton)?;
    check_dim("model shape code", dataset.manifest.shape_dim, model.config.shape_dim)?;
    if model.weight_mode != cfg.weight_mode {
        return Err(Error::config("weight_mode", "checkpoint uses a different weight mode"));
    }

    let contexts = frame_contexts(&skeleton32, &frames)?;
    let val_contexts = frame_contexts(&skeleton32, &val_frames)?;
    let mut set = SampleSet::from_frames(&frames, 0);
    let mut val = SampleSet::from_frames(&val_frames, cfg.val_samples);
    let nn = cfg.weight_mode == WeightMode::NearestSurface;
    if nn {
        set.attach_prior_weights(&body, &frame_contexts(&body.skeleton, &frames)?);
        val.attach_prior_weights(&body, &frame_contexts(&body.skeleton, &val_frames)?);
    }

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("train.cfg"), cfg.to_text()).map_err(|e| Error::io(dir, e))?;
    }

    let (start_stage, start_epoch) = start.as_ref().map_or((1, 0), |p| (p.stage, p.epoch));
    let mut global = start.as_ref().map_or(0, |p| p.global_epoch);
    let mut normal_active = start.as_ref().is_some_and(|p| p.normal_active);
    let mut prev_val = start.as_ref().and_then(|p| p.val_sdf);
    let mut normal_start = curve
        .iter()
        .find(|r| r.normal.is_some())
        .map(|r| r.epoch.saturating_sub(1));
    let mut stage_models = Vec::new();
    let mut last_ckpt = resume_from.clone();
    let mut prev_ckpt: Option<PathBuf> = None;

    let mut persist = |model: &NeuralGif<f32>,
                       opt: &Optimizers,
                       curve: &[LossRow],
                       progress: Progress,
                       stage_done: bool|
     -> Result<Option<PathBuf>> {
        let Some(dir) = &opts.out_dir else { return Ok(None) };
        let path = dir.join(checkpoint_name(progress.stage, progress.epoch));
        save_checkpoint(&path, model, &progress, Some(&opt.named()))?;
        write_loss_curve(&dir.join(LOSS_FILE), curve)?;
        if let Some(old) = prev_ckpt.take() {
            if !opts.keep_all && old != path {
                remove_checkpoint(&old);
            }
        }
        if !stage_done {
            prev_ckpt = Some(path.clone());
        }
        Ok(Some(path))
    };

    // stage 1: weight pretraining
    if !nn && start_stage <= 1 && cfg.epochs[0] > 0 {
        let targets = weight_targets(&body, &frames, cfg.pretrain_points)?;
        for e in (start_epoch + 1)..=cfg.epochs[0] {
            let l = pretrain_epoch(&mut model, &mut opt, &targets, &contexts, cfg, lr_at(cfg.pretrain_lr, cfg.lr_decay, e), e)?;
            global += 1;
            let v = evaluate_losses(&model, &val, &val_contexts, cfg.delta, cfg.chunk, false)?.sdf;
            log::info!("stage 1 epoch {e}: L_w {l:.5} val {v:.5}");
            curve.push(LossRow {
                epoch: global,
                stage: 1,
                sdf: None,
                normal: None,
                reg: None,
                val_sdf: Some(v),
                weights: Some(l),
            });
            let p = Progress {
                stage: 1,
                epoch: e,
                global_epoch: global,
                normal_active,
                val_sdf: Some(v),
                train_hash: train_hash.clone(),
                dataset_hash: dataset_hash.clone(),
            };
            last_ckpt = persist(&model, &opt, &curve, p, e == cfg.epochs[0])?.or(last_ckpt);
        }
        stage_models.push((1, model.clone()));
    }

    for stage in [2u32, 3] {
        let epochs = cfg.epochs[stage as usize - 1];
        if start_stage > stage || epochs == 0 {
            continue;
        }
        let first = if start_stage == stage { start_epoch + 1 } else { 1 };
        let w_fingerprint = model.weight_net.fingerprint();
        for e in first..=epochs {
            let train_flags = Trainable {
                weights: stage == 2 && !nn,
                displacement: stage == 3,
                sdf: true,
                normal: stage == 3 && normal_active,
                shape: model.shape_net.is_some(),
            };
            let lr = lr_at(cfg.lr, cfg.lr_decay, e);
            let mut order: Vec<u32> = (0..set.len() as u32).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::from(stage), e as u64)));
            let mut acc = LossStats::default();
            for idx in order.chunks(cfg.batch_size) {
                let batch = set.gather(idx);
                let s = train_step(&mut model, &mut opt, &batch, &contexts, cfg, train_flags, lr, (stage, e))?;
                acc.sdf += s.sdf;
                acc.reg += s.reg;
                acc.normal += s.normal;
                acc.near += s.near;
                acc.count += s.count;
            }
            let acc = finish(acc);
            global += 1;
            let v = evaluate_losses(&model, &val, &val_contexts, cfg.delta, cfg.chunk, false)?.sdf;
            if !v.is_finite() {
                return Err(diverged(stage, e, "non-finite validation loss"));
            }
            log::info!(
                "stage {stage} epoch {e}: L_SDF {:.5} L_reg {:.2e} L_norm {:.4} val {v:.5}",
                acc.sdf,
                acc.reg,
                acc.normal
            );
            curve.push(LossRow {
                epoch: global,
                stage,
                sdf: Some(acc.sdf),
                normal: train_flags.normal.then_some(acc.normal),
                reg: (stage == 3).then_some(acc.reg),
                val_sdf: Some(v),
                weights: None,
            });
            if stage == 3 && !normal_active {
                let improvement = prev_val.map_or(f64::INFINITY, |p| (p - v) / p.abs().max(f64::MIN_POSITIVE));
                let late = epochs - e <= cfg.min_normal_epochs;
                if improvement < cfg.norm_trigger || late {
                    normal_active = true;
                    normal_start = Some(global);
                    log::info!("normal network starts after epoch {global}");
                }
            }
            prev_val = Some(v);
            let p = Progress {
                stage,
                epoch: e,
                global_epoch: global,
                normal_active,
                val_sdf: Some(v),
                train_hash: train_hash.clone(),
                dataset_hash: dataset_hash.clone(),
            };
            last_ckpt = persist(&model, &opt, &curve, p, e == epochs)?.or(last_ckpt);
        }
        if stage == 3 && model.weight_net.fingerprint() != w_fingerprint {
            return Err(Error::invalid("mapping network changed while frozen"));
        }
        stage_models.push((stage, model.clone()));
    }

    Ok(TrainOutcome {
        model,
        curve,
        stage_models,
        normal_start,
        last_checkpoint: last_ckpt,
    })
}

/// Mean loss terms of `model` on the held-out frames of `dataset`.
pub fn heldout_losses(model: &NeuralGif<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<LossStats> {
    let frames: Vec<&FrameRecord> = dataset.manifest.heldout.iter().map(|i| &dataset.frames[*i]).collect();
    let skeleton: Skeleton<f32> = dataset.skeleton.cast();
    let contexts = frame_contexts(&skeleton, &frames)?;
    let mut set = SampleSet::from_frames(&frames, 0);
    if model.weight_mode == WeightMode::NearestSurface {
        let body = dataset.body()?;
        set.attach_prior_weights(&body, &frame_contexts(&body.skeleton, &frames)?);
    }
    evaluate_losses(model, &set, &contexts, cfg.delta, cfg.chunk, true)
}

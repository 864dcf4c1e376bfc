//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The learning criteria share one dataset and one
//! training run per weight mode.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ngif::data::*;
use ngif::fields::{ModelConfig, NeuralGif, PoseContext, Query, SdfLossProbe, Trainable, WeightMode};
use ngif::mesh::{icosphere, nearest_brute_force};
use ngif::metrics::{evaluate_frame, EvalReport, MetricConfig};
use ngif::nets::{gradient_check, EncodingConfig, Mlp, MlpProbe};
use ngif::pipeline::{evaluate_heldout, generate, reconstruct_heldout, ReconOptions};
use ngif::recon::{eval_grid, marching_cubes, FnField, DEFAULT_CHUNK};
use ngif::skeleton::{forward_kinematics, unpose_point};
use ngif::train::{heldout_losses, train, LossStats, TrainConfig, TrainOptions};
use ngif::{Aabb, BlendWeights, Mesh, MeshIndex, Pose, Skeleton, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
// small enough that softplus curvature and the L1 kink stay out of the difference quotient
const FD_STEP: f64 = 1e-6;
const UNPOSE_TOL: f64 = 1e-6;
const UNPOSE_POINTS: usize = 10_000;
const UNPOSE_BUDGET: Duration = Duration::from_secs(5);
const SPHERE_RES: usize = 64;
const PARITY_POINTS: usize = 10_000;
const PARITY_AGREEMENT: f64 = 0.999;
const RECON_RES: usize = 128;
const MIN_IOU: f64 = 0.95;
const MAX_P2S: f64 = 0.02;
const MAX_NORMAL_LOSS: f64 = 0.1;
const SELF_P2S: f64 = 1e-6;
const BVH_TOL: f64 = 1e-9;
const BVH_PROBES: usize = 100;

// Learning run. Poses and split are the defaults; the rest is sized to
// finish within the runtime target on one core.
const E2E_SURFACE: usize = 5000;
const E2E_EPOCHS: [usize; 3] = [3, 10, 10];
const E2E_BAND: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------- gradients ----------

fn mini_config(shape_dim: usize) -> ModelConfig {
    ModelConfig {
        encoding: EncodingConfig {
            frequencies: 2,
            include_input: true,
        },
        weight_hidden: vec![16, 16],
        displacement_hidden: vec![16, 16],
        sdf_hidden: vec![16, 16],
        normal_hidden: vec![16, 16],
        shape_hidden: vec![16, 16],
        shape_dim,
        ..ModelConfig::default()
    }
}

fn two_joints() -> Skeleton<f64> {
    Skeleton::new(vec![None, Some(0)], vec![Vec3::zero(), Vec3::new(0.0, 0.4, 0.0)]).unwrap()
}

fn bent() -> Pose<f64> {
    let mut p = Pose::identity(2);
    p.rotations[0] = Vec3::new(0.1, -0.2, 0.05);
    p.rotations[1] = Vec3::new(0.3, 0.1, 0.8);
    p
}

fn mini_model(shape_dim: usize, rng: &mut ChaCha8Rng) -> NeuralGif<f64> {
    let mut m = NeuralGif::new(two_joints(), mini_config(shape_dim), rng).unwrap();
    // zero-initialized heads would hide every path behind them
    for net in [&mut m.displacement_net].into_iter().chain(m.shape_net.as_mut()) {
        let last = net.layers_mut().last_mut().unwrap();
        last.weight.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        last.bias.mapv_inplace(|_| rng.gen_range(-0.01..0.01));
    }
    m
}

fn check_net(name: &str, mlp: &Mlp<f64>, rng: &mut ChaCha8Rng) -> (String, f64) {
    let c: Vec<f64> = (0..mlp.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = move |y: &[f64]| (y.iter().zip(&c).map(|(a, b)| a * b).sum(), c.clone());
    let mut probe = MlpProbe {
        mlp: mlp.clone(),
        input: (0..mlp.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        loss: &loss,
    };
    (name.to_string(), gradient_check(&mut probe, usize::MAX, FD_STEP, 1).unwrap())
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errs = Vec::new();
    let m = mini_model(2, &mut rng);
    for (name, net) in m.named_nets() {
        errs.push(check_net(name, net, &mut rng));
    }
    for shape_dim in [0, 2] {
        let m = mini_model(shape_dim, &mut rng);
        let code = [0.4, -0.7];
        let shape = (shape_dim > 0).then_some(&code[..]);
        let contexts: Vec<PoseContext<f64>> =
            [bent(), Pose::identity(2)].iter().map(|p| m.context(p, shape).unwrap()).collect();
        let n = 8;
        let points: Vec<Vec3<f64>> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.8), rng.gen_range(-0.3..0.3)))
            .collect();
        let context: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let normals: Vec<Vec3<f64>> = (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0))
                    .try_normalize(1e-12)
                    .unwrap()
            })
            .collect();
        let mut probe = SdfLossProbe {
            model: m,
            points: &points,
            contexts: &contexts,
            context: &context,
            targets: &targets,
            reg_weight: 0.3,
            normal_targets: Some(&normals),
            train: Trainable {
                weights: true,
                displacement: true,
                sdf: true,
                normal: true,
                shape: shape_dim > 0,
            },
        };
        let name = if shape_dim > 0 { "composition+shape" } else { "composition" };
        errs.push((name.to_string(), gradient_check(&mut probe, 600, FD_STEP, 2).unwrap()));
    }
    let elapsed = t.elapsed();
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let list: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.2e} (< {GRAD_TOL:e}) in {elapsed:.1?}; {}", list.join(", ")),
    )
}

// ---------- un-posing ----------

fn unposing_exactness() -> Outcome {
    let t = Instant::now();
    let body: CapsuleBody<f32> = make_synthetic_body(&BodyConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = NeuralGif::new(body.skeleton.clone(), ModelConfig::default(), &mut rng).unwrap();
    let rest = model.context(&Pose::identity(6), None).unwrap();
    let poses = sample_poses(6, 16, &mut rng);
    let transforms: Vec<_> = poses
        .iter()
        .map(|p| forward_kinematics(&body.skeleton, &p.cast()).unwrap())
        .collect();
    let points: Vec<Vec3<f32>> = (0..UNPOSE_POINTS)
        .map(|_| Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.2..1.2), rng.gen_range(-0.4..0.4)))
        .collect();
    let trace = model
        .forward(
            &Query {
                points: &points,
                contexts: std::slice::from_ref(&rest),
                context: &vec![0; points.len()],
                fixed_weights: None,
            },
            false,
        )
        .unwrap();
    let (mut id_err, mut hot_err) = (0.0f64, 0.0f64);
    for (i, p) in points.iter().enumerate() {
        id_err = id_err.max(f64::from((trace.canonical[i] - *p).norm()));
        let k = i % 6;
        let b = &transforms[i % transforms.len()];
        let posed = b.transforms[k].transform_point(*p);
        let back = unpose_point(posed, &BlendWeights::one_hot(6, k), b).unwrap();
        hot_err = hot_err.max(f64::from((back - *p).norm()));
    }
    let elapsed = t.elapsed();
    outcome(
        trace.singular_count() == 0 && id_err <= UNPOSE_TOL && hot_err <= UNPOSE_TOL && elapsed < UNPOSE_BUDGET,
        format!("identity {id_err:.1e}, one-hot {hot_err:.1e} (<= {UNPOSE_TOL:e}, f32) over {UNPOSE_POINTS} points in {elapsed:.1?}"),
    )
}

// ---------- geometry ----------

fn geometry_oracles() -> Outcome {
    let bounds = Aabb {
        min: Vec3::splat(-1.0),
        max: Vec3::splat(1.0),
    };
    let sphere = FnField(|p: Vec3<f64>| p.norm() - 0.5);
    let field = eval_grid(&sphere, bounds, SPHERE_RES, DEFAULT_CHUNK).unwrap().field;
    let h = field.voxel_size()[0];
    let mesh = marching_cubes(&field, 0.0).unwrap();
    let watertight = mesh.check_watertight().is_ok();
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);

    let reference = icosphere(Vec3::zero(), 0.5, 5);
    let index = MeshIndex::new(&reference).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    for _ in 0..PARITY_POINTS {
        let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let sign = sign_by_ray_parity(&index, p, 5, &mut rng).unwrap();
        if (sign < 0.0) == (p.norm() < 0.5) {
            agree += 1;
        }
    }
    let rate = agree as f64 / PARITY_POINTS as f64;
    outcome(
        watertight && worst <= 2.0 * h && rate >= PARITY_AGREEMENT,
        format!(
            "watertight {watertight}, worst vertex {:.2} voxels (<= 2), ray parity {:.2}% (>= {:.1}%)",
            worst / h,
            rate * 100.0,
            PARITY_AGREEMENT * 100.0
        ),
    )
}

// ---------- learning ----------

struct Learned {
    stage2: EvalReport,
    stage3: EvalReport,
    heldout: LossStats,
    nearest: EvalReport,
    elapsed: Duration,
}

fn e2e_train_config() -> TrainConfig {
    let w = 128;
    let narrow = 64;
    TrainConfig {
        epochs: E2E_EPOCHS,
        model: ModelConfig {
            weight_hidden: vec![narrow; 3],
            displacement_hidden: vec![narrow; 2],
            sdf_hidden: vec![w; 4],
            normal_hidden: vec![narrow; 2],
            shape_hidden: vec![narrow; 2],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn recon_options() -> ReconOptions {
    ReconOptions {
        res: RECON_RES,
        band_stride: E2E_BAND,
        ..ReconOptions::default()
    }
}

fn learned() -> &'static Learned {
    static RUN: OnceLock<Learned> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("data");
        let data = DataConfig {
            n_surface: E2E_SURFACE,
            ..DataConfig::default()
        };
        generate(&BodyConfig::default(), &data, &dir).unwrap();
        let dataset = Dataset::load(&dir).unwrap();
        let metric = MetricConfig::default();
        let cfg = e2e_train_config();
        let run = train(&dataset, &cfg, &TrainOptions::default()).unwrap();
        let report = |m: &NeuralGif<f32>| {
            let meshes = reconstruct_heldout(m, &dataset, &recon_options()).unwrap();
            evaluate_heldout(&meshes, &dataset, &metric).unwrap()
        };
        let stage = |s: u32| &run.stage_models.iter().find(|(k, _)| *k == s).unwrap().1;
        let stage2 = report(stage(2));
        let stage3 = report(&run.model);
        let heldout = heldout_losses(&run.model, &dataset, &cfg).unwrap();

        let nn_cfg = TrainConfig {
            weight_mode: WeightMode::NearestSurface,
            ..cfg
        };
        let nn = train(&dataset, &nn_cfg, &TrainOptions::default()).unwrap();
        let nearest = report(&nn.model);
        Learned {
            stage2,
            stage3,
            heldout,
            nearest,
            elapsed: t.elapsed(),
        }
    })
}

fn end_to_end() -> Outcome {
    let r = learned();
    let a = r.stage3.aggregate();
    outcome(
        a.iou >= MIN_IOU && a.point2surface <= MAX_P2S,
        format!(
            "held-out IoU {:.4} (>= {MIN_IOU}), point2surface {:.5} (<= {MAX_P2S}); both runs, all reconstructions and evaluation took {:.1?}",
            a.iou, a.point2surface, r.elapsed
        ),
    )
}

fn displacement_value() -> Outcome {
    let r = learned();
    let (s2, s3) = (r.stage2.aggregate().point2surface, r.stage3.aggregate().point2surface);
    outcome(s3 < s2, format!("stage-3 point2surface {s3:.5} vs stage-2 {s2:.5}"))
}

fn learned_weights_beat_nearest() -> Outcome {
    let r = learned();
    let (l, n) = (r.stage3.aggregate().iou, r.nearest.aggregate().iou);
    outcome(l > n, format!("learned IoU {l:.4} vs nearest-surface weights {n:.4}"))
}

fn normal_quality() -> Outcome {
    let h = &learned().heldout;
    outcome(
        h.normal < MAX_NORMAL_LOSS,
        format!(
            "held-out near-surface normal loss {:.4} (< {MAX_NORMAL_LOSS}) over {} samples",
            h.normal, h.near
        ),
    )
}

// ---------- metrics ----------

fn metric_sanity() -> Outcome {
    let body: CapsuleBody<f64> = make_synthetic_body(&BodyConfig::default()).unwrap();
    let pose = sample_poses(6, 1, &mut ChaCha8Rng::seed_from_u64(5)).pop().unwrap();
    let mesh: Mesh<f64> = frame_mesh(&body, &pose, &[], 64).unwrap();
    let f = evaluate_frame("self", &mesh, &mesh, &MetricConfig::default()).unwrap();
    let self_ok = f.point2surface < SELF_P2S && f.iou == 1.0 && f.fscore == 100.0;

    let index = MeshIndex::new(&mesh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = mesh.bounds().expanded(0.2);
    let mut worst = 0.0f64;
    for _ in 0..BVH_PROBES {
        let p = Vec3::new(
            rng.gen_range(b.min[0]..b.max[0]),
            rng.gen_range(b.min[1]..b.max[1]),
            rng.gen_range(b.min[2]..b.max[2]),
        );
        let (fast, slow) = (index.nearest(p), nearest_brute_force(&mesh, p));
        worst = worst.max((fast.distance_squared.sqrt() - slow.distance_squared.sqrt()).abs());
    }
    outcome(
        self_ok && worst <= BVH_TOL,
        format!(
            "self point2surface {:.1e}, IoU {}, F-score {}; BVH vs brute force max diff {worst:.1e} over {BVH_PROBES} probes",
            f.point2surface, f.iou, f.fscore
        ),
    )
}

// ---------- determinism ----------

fn small_train_config() -> TrainConfig {
    TrainConfig {
        epochs: [1, 2, 2],
        batch_size: 512,
        val_samples: 500,
        pretrain_points: 500,
        min_normal_epochs: 1,
        model: ModelConfig {
            weight_hidden: vec![32, 32],
            displacement_hidden: vec![32],
            sdf_hidden: vec![64, 64],
            normal_hidden: vec![32],
            shape_hidden: vec![32],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn pipeline_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let cfg = DataConfig {
        poses: 6,
        n_surface: 1000,
        frame_res: 48,
        ..DataConfig::default()
    };
    generate(&BodyConfig::default(), &cfg, &data).unwrap();
    let dataset = Dataset::load(&data).unwrap();
    let run = root.join("run");
    let out = train(
        &dataset,
        &small_train_config(),
        &TrainOptions {
            out_dir: Some(run.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let opts = ReconOptions {
        res: 48,
        ..ReconOptions::default()
    };
    let meshes = reconstruct_heldout(&out.model, &dataset, &opts).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut add_dir = |dir: &Path, tag: &str| {
        let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((format!("{tag}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
        }
    };
    add_dir(&data.join("samples"), "samples");
    let last = out.last_checkpoint.unwrap();
    files.push(("checkpoint".into(), std::fs::read(last).unwrap()));
    for (id, m) in meshes {
        let mut buf = Vec::new();
        ngif::mesh::write_obj(&m, &mut buf).unwrap();
        files.push((format!("mesh/{id}"), buf));
    }
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline_bytes(a.path()), pipeline_bytes(b.path()));
    let names: Vec<&str> = x.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = x
        .iter()
        .zip(&y)
        .filter(|((na, da), (nb, db))| na != nb || da != db)
        .map(|((n, _), _)| n.as_str())
        .collect();
    outcome(
        x.len() == y.len() && differing.is_empty(),
        format!(
            "{} files compared (sample files, final checkpoint, held-out meshes); differing: {:?}",
            names.len(),
            differing
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradient_integrity),
        ("un-posing exactness", unposing_exactness),
        ("geometry oracles", geometry_oracles),
        ("metric sanity", metric_sanity),
        ("determinism", determinism),
        ("end-to-end learning", end_to_end),
        ("displacement field value", displacement_value),
        ("learned vs nearest-surface weights", learned_weights_beat_nearest),
        ("normal quality", normal_quality),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

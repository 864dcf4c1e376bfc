use std::path::Path;

use ngif::data::*;
use ngif::mesh::icosphere;
use ngif::{MeshIndex, Pose, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn body() -> CapsuleBody<f64> {
    make_synthetic_body(&BodyConfig::default()).unwrap()
}

fn random_pose(seed: u64) -> Pose<f64> {
    sample_poses(6, 1, &mut ChaCha8Rng::seed_from_u64(seed)).pop().unwrap()
}

fn small_data(poses: usize) -> DataConfig {
    DataConfig {
        poses,
        n_surface: 300,
        frame_res: 40,
        ..DataConfig::default()
    }
}

#[test]
fn oracle_distance_off_an_axis() {
    let b = body();
    for (i, c) in b.capsules.iter().enumerate() {
        let mid = (c.a + c.b).scale(0.5);
        let dir = (c.b - c.a).any_orthogonal().try_normalize(1e-12).unwrap();
        let p = mid + dir.scale(c.radius + 0.1);
        let (d, n) = posed_sdf_oracle(&b, &Pose::identity(6), p).unwrap();
        // the head and torso overlap other parts, so only check non-shadowed hits
        if d < 0.1 - 1e-12 {
            continue;
        }
        assert!((d - 0.1).abs() < 1e-12, "part {i}: {d}");
        assert!((n.norm() - 1.0).abs() < 1e-12);
        assert!(posed_sdf_oracle(&b, &Pose::identity(6), mid).unwrap().0 < 0.0);
    }
}

#[test]
fn identity_oracle_is_the_canonical_union() {
    let b = body();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let p = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.3..0.3));
        let union = b
            .capsules
            .iter()
            .map(|c| c.axis_distance(p) - c.radius)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(posed_sdf_oracle(&b, &Pose::identity(6), p).unwrap().0, union);
    }
}

#[test]
fn rigid_oracle_has_unit_gradient() {
    let b = body();
    let pose = random_pose(11);
    let posed = b.posed(&pose, &[], false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 500 {
        let p = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.4..0.4));
        let part = posed.sdf(p).part;
        let mut g = Vec3::zero();
        let mut medial = false;
        for k in 0..3 {
            let mut a = p;
            let mut c = p;
            a[k] += h;
            c[k] -= h;
            let (sa, sc) = (posed.sdf(a), posed.sdf(c));
            medial |= sa.part != part || sc.part != part;
            g[k] = (sa.distance - sc.distance) / (2.0 * h);
        }
        let m = &posed.transforms[part];
        let local = m.linear().transpose().mul_vec(p - m.translation_part());
        if medial || b.capsules[part].axis_distance(local) < 1e-3 {
            continue;
        }
        assert!((g.norm() - 1.0).abs() < 1e-3, "|grad| = {} at {:?}", g.norm(), p.0);
        checked += 1;
    }
}

#[test]
fn oracle_matches_a_dense_mesh() {
    let b = body();
    let pose = random_pose(2);
    let mesh = frame_mesh(&b, &pose, &[], 96).unwrap();
    let index = MeshIndex::new(&mesh).unwrap();
    let edge = (0..mesh.triangles.len())
        .flat_map(|t| {
            let c = mesh.corners(t);
            [(c[0] - c[1]).norm(), (c[1] - c[2]).norm(), (c[2] - c[0]).norm()]
        })
        .fold(0.0, f64::max);
    let posed = b.posed(&pose, &[], true).unwrap();
    let bb = posed.bounds().expanded(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let p = Vec3::new(
            rng.gen_range(bb.min[0]..bb.max[0]),
            rng.gen_range(bb.min[1]..bb.max[1]),
            rng.gen_range(bb.min[2]..bb.max[2]),
        );
        let d = posed.distance(p);
        let sign = sign_by_ray_parity(&index, p, 5, &mut rng).unwrap();
        let m = sign * index.nearest(p).distance_squared.sqrt();
        assert!((d - m).abs() < 2.0 * edge, "oracle {d} vs mesh {m}");
    }
}

#[test]
fn frame_mesh_is_closed_and_on_the_surface() {
    let b = body();
    let mesh = frame_mesh(&b, &Pose::identity(6), &[], 64).unwrap();
    mesh.check_watertight().unwrap();
    assert!(mesh.signed_volume() > 0.0);
    let posed = b.posed(&Pose::identity(6), &[], true).unwrap();
    // the grid spans the body box plus four voxels on each side
    let extent = posed.bounds().extent().0.iter().fold(0.0f64, |m, v| m.max(*v));
    let voxel = extent * (1.0 + 8.0 / 64.0) / 64.0;
    for v in &mesh.vertices {
        assert!(posed.distance(*v).abs() < 2.0 * voxel);
    }
}

#[test]
fn frame_mesh_refines() {
    let b = body();
    let pose = random_pose(4);
    let coarse = frame_mesh(&b, &pose, &[], 64).unwrap();
    let fine = frame_mesh(&b, &pose, &[], 128).unwrap();
    let extent = coarse.bounds().extent().0.iter().fold(0.0f64, |m, v| m.max(*v));
    let voxel = extent / 64.0;
    let (ic, ifi) = (MeshIndex::new(&coarse).unwrap(), MeshIndex::new(&fine).unwrap());
    let h1 = fine.vertices.iter().map(|v| ic.nearest(*v).distance_squared).fold(0.0, f64::max);
    let h2 = coarse.vertices.iter().map(|v| ifi.nearest(*v).distance_squared).fold(0.0, f64::max);
    assert!(h1.max(h2).sqrt() < voxel, "hausdorff {} vs voxel {voxel}", h1.max(h2).sqrt());
}

#[test]
fn frame_mesh_rejects_low_resolution() {
    assert!(frame_mesh(&body(), &Pose::identity(6), &[], 16).is_err());
}

#[test]
fn ray_parity_on_an_icosphere() {
    let s = icosphere(Vec3::zero(), 1.0, 3);
    let index = MeshIndex::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sign_by_ray_parity(&index, Vec3::zero(), 5, &mut rng).unwrap(), -1.0);
    assert_eq!(sign_by_ray_parity(&index, Vec3::new(2.0, 0.3, 0.0), 5, &mut rng).unwrap(), 1.0);
    assert!(sign_by_ray_parity(&index, Vec3::zero(), 4, &mut rng).is_err());
}

#[test]
fn ray_parity_is_translation_invariant() {
    let t = Vec3::new(3.0, -1.0, 7.5);
    let s = icosphere(Vec3::zero(), 1.0, 2);
    let moved = icosphere(t, 1.0, 2);
    let (a, b) = (MeshIndex::new(&s).unwrap(), MeshIndex::new(&moved).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let sa = sign_by_ray_parity(&a, p, 5, &mut rng).unwrap();
        let sb = sign_by_ray_parity(&b, p + t, 5, &mut rng).unwrap();
        assert_eq!(sa, sb);
    }
}

fn frame(seed: u64) -> Frame {
    let b = body();
    let pose = random_pose(seed);
    Frame {
        id: 0,
        mesh: frame_mesh(&b, &pose, &[], 64).unwrap(),
        pose,
        shape: Vec::new(),
    }
}

#[test]
fn samples_have_the_documented_bands() {
    let b = body();
    let f = frame(9);
    let n = 10_000;
    let s = sample_training_points(&f, Some(&b), LabelMode::Oracle, n, [0.01, 0.1], 5, 3).unwrap();
    assert_eq!(s.len(), 3 * n);
    check_samples(&s, 0.01).unwrap();
    let (surf, rest) = s.split_at(n);
    let (near, far) = rest.split_at(n);
    assert!(surf.iter().all(|x| x.band == Band::Surface && x.d.abs() < 1e-6));
    for (band, sigma) in [(near, 0.01f64), (far, 0.1)] {
        let ms: f64 = band
            .iter()
            .zip(surf)
            .map(|(a, b)| (a.p - b.p).cast::<f64>().norm_squared())
            .sum::<f64>()
            / n as f64;
        let rms = ms.sqrt();
        assert!((rms / (sigma * 3f64.sqrt()) - 1.0).abs() < 0.1, "σ {sigma}: rms {rms}");
    }
}

#[test]
fn mesh_labels_agree_with_the_oracle_sign() {
    let b = body();
    let f = frame(12);
    let posed = b.posed(&f.pose, &[], true).unwrap();
    let s = sample_training_points(&f, None, LabelMode::Mesh, 1000, [0.01, 0.1], 5, 1).unwrap();
    check_samples(&s, 0.01).unwrap();
    let mut agree = 0;
    let mut total = 0;
    for x in s.iter().filter(|x| x.band != Band::Surface) {
        let d = posed.distance(x.p.cast());
        if d.abs() > 0.01 {
            total += 1;
            agree += usize::from(d.signum() == f64::from(x.d).signum());
        }
    }
    assert!(agree as f64 >= 0.999 * total as f64, "{agree}/{total}");
}

#[test]
fn oracle_labels_need_a_body() {
    let f = frame(1);
    assert!(sample_training_points(&f, None, LabelMode::Oracle, 10, [0.01, 0.1], 5, 1).is_err());
}

#[test]
fn dataset_is_deterministic_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data(10);
    let poses = sample_poses(6, cfg.poses, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = build_dataset(&BodyConfig::default(), &cfg, &poses, &a).unwrap();
    let mb = build_dataset(&BodyConfig::default(), &cfg, &poses, &b).unwrap();
    assert_eq!(ma, mb);
    assert_eq!((ma.train.len(), ma.heldout.len()), (8, 2));
    for id in 0..10 {
        let rel = format!("samples/{id}.bin");
        assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap());
    }
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.frames.len(), 10);
    assert!(ds.frames.iter().all(|f| f.samples.len() == 900));
    assert_eq!(ds.frames[3].pose, poses[3]);
    assert_eq!(ds.body().unwrap(), body());
}

#[test]
fn fifty_poses_split_forty_ten() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(50);
    cfg.n_surface = 20;
    cfg.frame_res = 32;
    let poses = sample_poses(6, 50, &mut ChaCha8Rng::seed_from_u64(0));
    let m = build_dataset(&BodyConfig::default(), &cfg, &poses, dir.path()).unwrap();
    assert_eq!((m.frame_count, m.train.len(), m.heldout.len()), (50, 40, 10));
    assert!(m.train.iter().all(|i| !m.heldout.contains(i)));
}

#[test]
fn pose_list_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pose");
    let poses: Vec<_> = sample_poses(6, 3, &mut ChaCha8Rng::seed_from_u64(2))
        .into_iter()
        .map(|p| (p, Vec::new()))
        .collect();
    write_pose_list(&path, &poses).unwrap();
    assert_eq!(read_pose_list(&path).unwrap(), poses);
    assert!(pose_from_text("joint_count 2\nrotation 0 0 0 0\n", Path::new("x")).is_err());
}

#[test]
fn body_config_round_trip() {
    let c = BodyConfig::default();
    let kv = ngif::kv::KeyValues::parse(&c.to_text(), Path::new("b")).unwrap();
    assert_eq!(BodyConfig::from_kv(&kv).unwrap(), c);
    let bad = ngif::kv::KeyValues::parse("radius = 1", Path::new("b")).unwrap();
    assert!(BodyConfig::from_kv(&bad).is_err());
}

proptest! {
    #[test]
    fn analytic_weights_are_a_simplex(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
        let w = body().analytic_weights(Vec3::new(x, y, z));
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_prefix_body_has_unit_height(k in 1usize..=6) {
        let kv = ngif::kv::KeyValues::parse(&format!("joint_count = {k}"), Path::new("b")).unwrap();
        let b = make_synthetic_body::<f64>(&BodyConfig::from_kv(&kv).unwrap()).unwrap();
        prop_assert_eq!(b.capsules.len(), k);
        let posed = b.posed(&Pose::identity(k), &[], false).unwrap();
        prop_assert!((posed.bounds().extent()[1] - 1.0).abs() < 1e-12);
    }
}

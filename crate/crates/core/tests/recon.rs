use ngif::data::{make_synthetic_body, posed_sdf_oracle, sample_poses, BodyConfig, CapsuleBody};
use ngif::fields::{ModelConfig, NeuralGif};
use ngif::nets::EncodingConfig;
use ngif::recon::*;
use ngif::{Aabb, Mesh, MeshFormat, Pose, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cube(h: f64) -> Aabb<f64> {
    Aabb {
        min: Vec3::splat(-h),
        max: Vec3::splat(h),
    }
}

fn sphere(r: f64) -> FnField<impl Fn(Vec3<f64>) -> f64 + Sync> {
    FnField(move |p: Vec3<f64>| p.norm() - r)
}

fn small_model() -> (NeuralGif<f32>, Pose<f32>) {
    let body: CapsuleBody<f32> = make_synthetic_body(&BodyConfig::default()).unwrap();
    let cfg = ModelConfig {
        encoding: EncodingConfig {
            frequencies: 3,
            include_input: true,
        },
        weight_hidden: vec![16],
        displacement_hidden: vec![16],
        sdf_hidden: vec![32, 32],
        normal_hidden: vec![16],
        shape_hidden: vec![16],
        ..ModelConfig::default()
    };
    let model = NeuralGif::new(body.skeleton.clone(), cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let pose = sample_poses(6, 1, &mut ChaCha8Rng::seed_from_u64(9)).pop().unwrap().cast();
    (model, pose)
}

#[test]
fn sphere_vertices_lie_within_two_voxels() {
    let f = eval_grid(&sphere(0.5), cube(1.0), 64, DEFAULT_CHUNK).unwrap().field;
    let h = f.voxel_size()[0];
    let m = marching_cubes(&f, 0.0).unwrap();
    m.check_watertight().unwrap();
    assert!(m.vertices.iter().all(|v| (v.norm() - 0.5).abs() < 2.0 * h));
    let shifted = marching_cubes(&f, 0.1).unwrap();
    assert!(shifted.vertices.iter().all(|v| (v.norm() - 0.6).abs() < 2.0 * h));
}

#[test]
fn tripled_resolution_nests_the_coarse_centers() {
    let (model, pose) = small_model();
    let ctx = model.context(&pose, None).unwrap();
    let bounds = auto_bounds(&ctx.posed_joints, AUTO_BOUNDS_MARGIN as f32);
    let coarse = eval_model_grid(&model, &ctx, None, Some(bounds), 8).unwrap().field;
    let fine = eval_model_grid(&model, &ctx, None, Some(bounds), 24).unwrap().field;
    for i in 0..8 {
        for j in 0..8 {
            for k in 0..8 {
                // the two grids compute the same center with different rounding
                let (a, b) = (coarse.get(i, j, k), fine.get(3 * i + 1, 3 * j + 1, 3 * k + 1));
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn chunking_never_changes_values() {
    let (model, pose) = small_model();
    let ctx = model.context(&pose, None).unwrap();
    let src = ModelField {
        model: &model,
        context: &ctx,
        prior: None,
    };
    let b = auto_bounds(&ctx.posed_joints, 0.3f32);
    let a = eval_grid(&src, b, 12, 7).unwrap().field;
    let c = eval_grid(&src, b, 12, 1000).unwrap().field;
    assert_eq!(a, c);
}

#[test]
fn banded_grid_reproduces_the_dense_mesh_of_an_sdf() {
    let body: CapsuleBody<f64> = make_synthetic_body(&BodyConfig::default()).unwrap();
    let pose = sample_poses(6, 1, &mut ChaCha8Rng::seed_from_u64(2)).pop().unwrap();
    let posed = body.posed(&pose, &[], true).unwrap();
    let field = FnField(|p: Vec3<f64>| posed.distance(p));
    let bounds = posed.bounds().expanded(0.1);
    let dense = eval_grid(&field, bounds, 64, DEFAULT_CHUNK).unwrap().field;
    let banded = eval_grid_banded(&field, bounds, 64, 4, DEFAULT_CHUNK).unwrap().field;
    for (d, b) in dense.values.iter().zip(&banded.values) {
        assert_eq!(d.signum(), b.signum());
    }
    let (m1, m2) = (marching_cubes(&dense, 0.0).unwrap(), marching_cubes(&banded, 0.0).unwrap());
    assert_eq!(m1.triangles, m2.triangles);
    assert_eq!(m1.vertices, m2.vertices);
}

#[test]
fn banded_grid_with_unit_stride_is_the_dense_grid() {
    let a = eval_grid(&sphere(0.4), cube(1.0), 16, 64).unwrap().field;
    let b = eval_grid_banded(&sphere(0.4), cube(1.0), 16, 1, 64).unwrap().field;
    assert_eq!(a, b);
}

#[test]
fn oracle_grid_signs_match_the_oracle() {
    let body: CapsuleBody<f64> = make_synthetic_body(&BodyConfig::default()).unwrap();
    let pose = sample_poses(6, 1, &mut ChaCha8Rng::seed_from_u64(5)).pop().unwrap();
    let field = FnField(|p: Vec3<f64>| posed_sdf_oracle(&body, &pose, p).unwrap().0);
    let g = eval_grid(&field, cube(0.7), 24, DEFAULT_CHUNK).unwrap();
    assert_eq!(g.singular, 0);
    let m = marching_cubes(&g.field, 0.0).unwrap();
    m.check_watertight().unwrap();
    assert!(m.signed_volume() > 0.0);
}

#[test]
fn attached_normals_are_unit_length() {
    let (model, pose) = small_model();
    let ctx = model.context(&pose, None).unwrap();
    let mut m = marching_cubes(&eval_model_grid(&model, &ctx, None, None, 16).unwrap().field, 0.0f32);
    if let Ok(mesh) = m.as_mut() {
        attach_normals(mesh, &model, &ctx, None);
        for n in mesh.normals.as_ref().unwrap() {
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn thin_shell_rejects_bad_thresholds() {
    // unsigned distance to a disk of radius 0.5 in the z = 0 plane
    let disk = FnField(|p: Vec3<f64>| {
        let radial = (p[0].hypot(p[1]) - 0.5).max(0.0);
        radial.hypot(p[2])
    });
    let f = eval_grid(&disk, cube(1.0), 32, DEFAULT_CHUNK).unwrap().field;
    assert!(thin_surface_mesh(&f, 0.0).is_err());
    assert!(matches!(thin_surface_mesh(&f, 5.0), Err(ngif::Error::EmptySurface(_))));
    let shell = thin_surface_mesh(&f, 0.1).unwrap();
    shell.check_watertight().unwrap();
}

fn export_round_trip(m: &Mesh<f64>, format: MeshFormat) -> Mesh<f32> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(format!("m.{}", format.extension()));
    export_mesh(m, &path, format).unwrap();
    read_mesh(&path).unwrap()
}

#[test]
fn export_formats_agree() {
    let mut m = eval_grid(&sphere(0.5), cube(1.0), 16, DEFAULT_CHUNK)
        .map(|g| marching_cubes(&g.field, 0.0).unwrap())
        .unwrap();
    m.normals = Some(m.vertex_normals_from_faces());
    let obj = export_round_trip(&m, MeshFormat::Obj);
    let ascii = export_round_trip(&m, MeshFormat::PlyAscii);
    let binary = export_round_trip(&m, MeshFormat::PlyBinary);
    assert_eq!(obj.triangles, m.triangles);
    for r in [&obj, &ascii, &binary] {
        assert_eq!(r.vertices.len(), m.vertices.len());
        for (a, b) in r.vertices.iter().zip(&m.vertices) {
            assert_eq!(a.0, b.cast::<f32>().0);
        }
    }
    assert_eq!(ascii, binary);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn extraction_is_a_closed_manifold(r in 0.2..0.8f64, cx in -0.1..0.1f64, res in 10usize..24) {
        let f = eval_grid(&FnField(move |p: Vec3<f64>| (p - Vec3::new(cx, 0.0, 0.0)).norm() - r), cube(1.0), res, 128)
            .unwrap()
            .field;
        let m = marching_cubes(&f, 0.0).unwrap();
        prop_assert!(m.check_watertight().is_ok());
        prop_assert!(m.signed_volume() > 0.0);
    }
}

#[test]
fn capping_the_border_closes_a_clipped_surface() {
    // a sphere wider than the grid
    let mut f = eval_grid(&sphere(1.2), cube(1.0), 16, DEFAULT_CHUNK).unwrap().field;
    assert!(marching_cubes(&f, 0.0).map_or(true, |m| m.check_watertight().is_err()));
    assert!(f.cap_border(0.01) > 0);
    let m = marching_cubes(&f, 0.0).unwrap();
    m.check_watertight().unwrap();
    assert_eq!(f.cap_border(0.01), 0);
}

#[test]
fn automatic_bounds_enclose_the_posed_body() {
    let body: CapsuleBody<f64> = make_synthetic_body(&BodyConfig::default()).unwrap();
    for pose in sample_poses(6, 20, &mut ChaCha8Rng::seed_from_u64(12)) {
        let posed = body.posed(&pose, &[], true).unwrap();
        let joints = body.skeleton.rest_joints().len();
        let ctx = ngif::fields::PoseContext::new(&body.skeleton, &pose, None).unwrap();
        assert_eq!(ctx.posed_joints.len(), joints);
        let b = auto_bounds(&ctx.posed_joints, AUTO_BOUNDS_MARGIN);
        let tight = posed.bounds();
        for c in 0..3 {
            assert!(b.min[c] < tight.min[c] - 0.05 && b.max[c] > tight.max[c] + 0.05, "axis {c}: {b:?} vs {tight:?}");
        }
    }
}

#[test]
fn detached_pieces_without_an_anchor_are_dropped() {
    let two = FnField(|p: Vec3<f64>| {
        let a = (p - Vec3::new(-0.5, 0.0, 0.0)).norm() - 0.3;
        let b = (p - Vec3::new(0.5, 0.0, 0.0)).norm() - 0.2;
        a.min(b)
    });
    let m = marching_cubes(&eval_grid(&two, cube(1.0), 32, DEFAULT_CHUNK).unwrap().field, 0.0).unwrap();
    assert_eq!(m.component_triangles().len(), 2);
    let (kept, dropped) = keep_anchored_components(&m, &[Vec3::new(-0.5, 0.0, 0.0)]).unwrap();
    assert_eq!(dropped, 1);
    kept.check_watertight().unwrap();
    assert!(kept.vertices.iter().all(|v| v[0] < 0.0));
    let (all, none) = keep_anchored_components(&m, &[Vec3::new(0.0, 0.9, 0.0)]).unwrap();
    assert_eq!((all, none), (m.clone(), 0));
    let (both, _) = keep_anchored_components(&m, &[Vec3::new(-0.5, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)]).unwrap();
    assert_eq!(both.triangles.len(), m.triangles.len());
}

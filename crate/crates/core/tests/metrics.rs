use ngif::geometry::{Mat3, Mat4};
use ngif::mesh::{icosphere, nearest_brute_force};
use ngif::metrics::*;
use ngif::{Mesh, MeshIndex, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere(r: f64, c: Vec3<f64>) -> Mesh<f64> {
    icosphere(c, r, 4)
}

#[test]
fn self_evaluation_is_perfect() {
    let s = sphere(1.0, Vec3::zero());
    let cfg = MetricConfig::default();
    let f = evaluate_frame("s", &s, &s, &cfg).unwrap();
    assert!(f.point2surface < 1e-6 && f.point2surface_reverse < 1e-6);
    assert_eq!(f.iou, 1.0);
    assert_eq!(f.fscore, 100.0);
}

#[test]
fn concentric_spheres() {
    let (a, b) = (sphere(1.0, Vec3::zero()), sphere(1.1, Vec3::zero()));
    let d = point_to_surface(&a, &b, 5000, 1).unwrap();
    assert!((d / 0.1 - 1.0).abs() < 0.05, "{d}");
    assert!(fscore(&a, &b, 0.1 + 2e-3, 5000, 1).unwrap() > 99.0);
    assert!(fscore(&a, &b, 0.05, 5000, 1).unwrap() < 1.0);
}

#[test]
fn nested_spheres_iou_is_the_volume_ratio() {
    let (a, b) = (sphere(1.0, Vec3::zero()), sphere(2.0, Vec3::zero()));
    let v = iou(&a, &b, 64, 5, 0).unwrap();
    assert!((v - 0.125).abs() < 0.01, "{v}");
    assert_eq!(v, iou(&b, &a, 64, 5, 0).unwrap());
}

#[test]
fn disjoint_copies_do_not_overlap() {
    let (a, b) = (sphere(1.0, Vec3::zero()), sphere(1.0, Vec3::new(3.0, 0.0, 0.0)));
    assert_eq!(iou(&a, &b, 32, 5, 0).unwrap(), 0.0);
    assert_eq!(fscore(&a, &b, 0.01, 1000, 0).unwrap(), 0.0);
}

#[test]
fn iou_rejects_open_meshes() {
    let s = sphere(1.0, Vec3::zero());
    let mut open = s.clone();
    open.triangles.pop();
    assert!(matches!(iou(&open, &s, 16, 5, 0), Err(ngif::Error::NotWatertight(_))));
}

#[test]
fn empty_meshes_are_rejected() {
    let s = sphere(1.0, Vec3::zero());
    let e = Mesh::new(Vec::new(), Vec::new(), None).unwrap();
    assert!(point_to_surface(&e, &s, 10, 0).is_err());
    assert!(fscore(&s, &e, 0.01, 10, 0).is_err());
}

#[test]
fn accelerated_distance_equals_brute_force() {
    let s = sphere(1.0, Vec3::zero());
    let index = MeshIndex::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let fast = index.nearest(p).distance_squared.sqrt();
        let slow = nearest_brute_force(&s, p).distance_squared.sqrt();
        assert!((fast - slow).abs() < 1e-9);
    }
}

#[test]
fn metrics_survive_a_shared_rigid_motion() {
    let (a, b) = (sphere(1.0, Vec3::zero()), sphere(1.1, Vec3::new(0.05, 0.0, 0.0)));
    let m = Mat4::from_rotation_translation(&Mat3::from_axis_angle(Vec3::new(0.3, -0.7, 0.2)), Vec3::new(1.0, 2.0, -3.0));
    let (ta, tb) = (a.transformed(&m), b.transformed(&m));
    let d0 = point_to_surface(&a, &b, 5000, 3).unwrap();
    let d1 = point_to_surface(&ta, &tb, 5000, 3).unwrap();
    assert!((d0 / d1 - 1.0).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fscore_is_monotone_in_tau(t1 in 0.0..0.2f64, t2 in 0.0..0.2f64) {
        let (a, b) = (icosphere(Vec3::zero(), 1.0, 2), icosphere(Vec3::new(0.05, 0.0, 0.0), 1.05, 2));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        prop_assert!(fscore(&a, &b, lo, 500, 0).unwrap() <= fscore(&a, &b, hi, 500, 0).unwrap());
    }
}

//! Synthetic capsule bodies with exact posed SDFs, training-sample
//! generation and the on-disk dataset.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{PoseContext, WeightPrior};
use crate::geometry::{Aabb, Mat4, Vec3};
use crate::kv::{join, KeyValues};
use crate::mesh::{read_mesh, write_mesh, Mesh, MeshFormat, MeshIndex};
use crate::recon::{eval_grid, marching_cubes, FnField};
use crate::scalar::Real;
use crate::skeleton::{forward_kinematics, Pose, Skeleton};

/// Joint names of the default layout, in index order.
pub const JOINT_NAMES: [&str; 6] = ["torso", "head", "left_upper_arm", "left_forearm", "right_upper_arm", "right_forearm"];

// (parent, rest joint, capsule start, capsule end) before normalization
const LAYOUT: [(Option<usize>, [f64; 3], [f64; 3], [f64; 3]); 6] = [
    (None, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.42, 0.0]),
    (Some(0), [0.0, 0.54, 0.0], [0.0, 0.62, 0.0], [0.0, 0.66, 0.0]),
    (Some(0), [0.2, 0.38, 0.0], [0.2, 0.38, 0.0], [0.44, 0.38, 0.0]),
    (Some(2), [0.44, 0.38, 0.0], [0.44, 0.38, 0.0], [0.62, 0.38, 0.0]),
    (Some(0), [-0.2, 0.38, 0.0], [-0.2, 0.38, 0.0], [-0.44, 0.38, 0.0]),
    (Some(4), [-0.44, 0.38, 0.0], [-0.44, 0.38, 0.0], [-0.62, 0.38, 0.0]),
];

/// Offset added to axis distances before taking logarithms.
const AXIS_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BodyConfig {
    /// Number of joints of the default layout to keep (1 to 6).
    pub joint_count: usize,
    pub radii: Vec<f64>,
    /// Radius gain at full bend: part `i` grows by `bulge[i]·sin²(|θ_i|/2)`.
    pub bulge: Vec<f64>,
    /// Exponent of the inverse-distance weight profile.
    pub sharpness: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig {
            joint_count: 6,
            radii: vec![0.2, 0.12, 0.09, 0.08, 0.09, 0.08],
            bulge: vec![0.0, 0.0, 0.03, 0.04, 0.03, 0.04],
            sharpness: 6.0,
        }
    }
}

pub const BODY_KEYS: [&str; 4] = ["joint_count", "radii", "bulge", "sharpness"];

impl BodyConfig {
    pub fn to_text(&self) -> String {
        format!(
            "joint_count = {}\nradii = {}\nbulge = {}\nsharpness = {}\n",
            self.joint_count,
            join(&self.radii),
            join(&self.bulge),
            self.sharpness
        )
    }

    /// Missing keys keep their defaults, truncated to `joint_count`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&BODY_KEYS)?;
        let d = BodyConfig::default();
        let k = kv.get("joint_count")?.unwrap_or(d.joint_count);
        Ok(BodyConfig {
            joint_count: k,
            radii: kv.list("radii")?.unwrap_or_else(|| d.radii[..k.min(6)].to_vec()),
            bulge: kv.list("bulge")?.unwrap_or_else(|| d.bulge[..k.min(6)].to_vec()),
            sharpness: kv.get("sharpness")?.unwrap_or(d.sharpness),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.joint_count;
        if !(1..=6).contains(&k) {
            return Err(Error::config("joint_count", format!("{k} is outside 1..=6")));
        }
        if self.radii.len() != k {
            return Err(Error::config("radii", format!("expected {k} values, got {}", self.radii.len())));
        }
        if let Some(r) = self.radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::config("radii", format!("radius {r} is not positive")));
        }
        if self.bulge.len() != k {
            return Err(Error::config("bulge", format!("expected {k} values, got {}", self.bulge.len())));
        }
        if let Some(b) = self.bulge.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::config("bulge", format!("amplitude {b} is negative")));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::config("sharpness", "must be positive"));
        }
        Ok(())
    }
}

/// A segment swept by a sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule<T> {
    pub a: Vec3<T>,
    pub b: Vec3<T>,
    pub radius: T,
}

impl<T: Real> Capsule<T> {
    /// Closest point on the axis segment.
    #[inline]
    pub fn axis_point(&self, q: Vec3<T>) -> Vec3<T> {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        if len2 == T::zero() {
            return self.a;
        }
        let t = ((q - self.a).dot(ab) / len2).max(T::zero()).min(T::one());
        self.a + ab.scale(t)
    }

    #[inline]
    pub fn axis_distance(&self, q: Vec3<T>) -> T {
        (q - self.axis_point(q)).norm()
    }

    /// Signed distance and outward unit normal for radius `radius`.
    pub fn sdf(&self, q: Vec3<T>, radius: T) -> (T, Vec3<T>) {
        let c = self.axis_point(q);
        let v = q - c;
        let len = v.norm();
        let n = v
            .try_normalize(T::lit(1e-12))
            .unwrap_or_else(|| (self.b - self.a).any_orthogonal().try_normalize(T::lit(1e-30)).unwrap_or(Vec3::new(T::zero(), T::one(), T::zero())));
        (len - radius, n)
    }
}

/// Union of rigid capsules, one per joint, with analytic skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleBody<T> {
    pub skeleton: Skeleton<T>,
    pub capsules: Vec<Capsule<T>>,
    pub bulge: Vec<T>,
    pub sharpness: T,
}

/// The default biped normalized to unit height and centered at the origin.
pub fn make_synthetic_body<T: Real>(config: &BodyConfig) -> Result<CapsuleBody<T>> {
    config.validate()?;
    let k = config.joint_count;
    let layout = &LAYOUT[..k];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((_, _, a, b), r) in layout.iter().zip(&config.radii) {
        lo = lo.min(a[1].min(b[1]) - r);
        hi = hi.max(a[1].max(b[1]) + r);
    }
    let scale = 1.0 / (hi - lo);
    let mid = 0.5 * (lo + hi);
    let norm = |p: [f64; 3]| Vec3::<T>::from_f64([p[0] * scale, (p[1] - mid) * scale, p[2] * scale]);
    let skeleton = Skeleton::new(
        layout.iter().map(|(p, ..)| *p).collect(),
        layout.iter().map(|(_, j, ..)| norm(*j)).collect(),
    )?;
    let capsules = layout
        .iter()
        .zip(&config.radii)
        .map(|((_, _, a, b), r)| Capsule {
            a: norm(*a),
            b: norm(*b),
            radius: T::lit(r * scale),
        })
        .collect();
    Ok(CapsuleBody {
        skeleton,
        capsules,
        bulge: config.bulge.iter().map(|b| T::lit(b * scale)).collect(),
        sharpness: T::lit(config.sharpness),
    })
}

/// Exact distance sample of a posed body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample<T> {
    pub distance: T,
    pub normal: Vec3<T>,
    pub part: usize,
}

/// A body fixed in one pose, ready for repeated oracle queries.
#[derive(Clone, Debug)]
pub struct PosedBody<T> {
    pub transforms: Vec<Mat4<T>>,
    inverse: Vec<Mat4<T>>,
    capsules: Vec<Capsule<T>>,
    radii: Vec<T>,
}

impl<T: Real> PosedBody<T> {
    pub fn sdf(&self, p: Vec3<T>) -> SdfSample<T> {
        let mut best = SdfSample {
            distance: T::infinity(),
            normal: Vec3::zero(),
            part: 0,
        };
        for (i, cap) in self.capsules.iter().enumerate() {
            let q = self.inverse[i].transform_point(p);
            let (d, n) = cap.sdf(q, self.radii[i]);
            if d < best.distance {
                best = SdfSample {
                    distance: d,
                    normal: n,
                    part: i,
                };
            }
        }
        best.normal = self.transforms[best.part].transform_vector(best.normal);
        best
    }

    pub fn distance(&self, p: Vec3<T>) -> T {
        self.sdf(p).distance
    }

    /// Box around every posed capsule.
    pub fn bounds(&self) -> Aabb<T> {
        let mut b = Aabb::empty();
        for (i, cap) in self.capsules.iter().enumerate() {
            let r = self.radii[i];
            for e in [cap.a, cap.b] {
                let p = self.transforms[i].transform_point(e);
                b.grow(p - Vec3::splat(r));
                b.grow(p + Vec3::splat(r));
            }
        }
        b
    }

    /// Moves `p` onto the zero level set along the gradient.
    pub fn project(&self, mut p: Vec3<T>) -> Vec3<T> {
        for _ in 0..3 {
            let s = self.sdf(p);
            p -= s.normal.scale(s.distance);
        }
        p
    }
}

impl<T: Real> CapsuleBody<T> {
    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    /// Radius multiplier of a shape code: `1 + β₀`, or 1 without one.
    pub fn shape_scale(shape: &[T]) -> T {
        shape.first().map_or(T::one(), |b| T::one() + *b)
    }

    fn posed_radius(&self, i: usize, rotation: Vec3<T>, scale: T, bulge: bool) -> T {
        let mut r = self.capsules[i].radius * scale;
        if bulge {
            let s = (rotation.norm() * T::lit(0.5)).sin();
            r += self.bulge[i] * s * s;
        }
        r
    }

    /// Poses the body; `bulge = false` keeps every part rigid.
    pub fn posed(&self, pose: &Pose<T>, shape: &[T], bulge: bool) -> Result<PosedBody<T>> {
        let b = forward_kinematics(&self.skeleton, pose)?;
        self.posed_with(&b.transforms, pose, shape, bulge)
    }

    fn posed_with(&self, transforms: &[Mat4<T>], pose: &Pose<T>, shape: &[T], bulge: bool) -> Result<PosedBody<T>> {
        let scale = Self::shape_scale(shape);
        if !(scale > T::zero()) {
            return Err(Error::invalid(format!("shape code gives radius scale {scale}")));
        }
        let inverse = transforms
            .iter()
            .map(|m| {
                let r = m.linear().transpose();
                Mat4::from_rotation_translation(&r, -r.mul_vec(m.translation_part()))
            })
            .collect();
        Ok(PosedBody {
            transforms: transforms.to_vec(),
            inverse,
            capsules: self.capsules.clone(),
            radii: (0..self.joint_count())
                .map(|i| self.posed_radius(i, pose.rotations[i], scale, bulge))
                .collect(),
        })
    }

    /// Convex weights from the inverse-distance profile to each capsule axis,
    /// at a canonical point.
    pub fn analytic_weights(&self, q: Vec3<T>) -> Vec<T> {
        let eps = T::lit(AXIS_EPS);
        let logits: Vec<T> = self
            .capsules
            .iter()
            .map(|c| -self.sharpness * (c.axis_distance(q) + eps).ln())
            .collect();
        let m = logits.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let e: Vec<T> = logits.iter().map(|l| (*l - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Analytic weights carried by the nearest point of the rigid posed
    /// surface, and that point in canonical space.
    pub fn nearest_surface_weights(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> (Vec<T>, Vec3<T>) {
        let posed = self
            .posed_with(&ctx.transforms, &ctx.pose, &ctx.shape, false)
            .expect("context transforms match the skeleton");
        let s = posed.sdf(p);
        let i = s.part;
        let q = posed.inverse[i].transform_point(p);
        let c = self.capsules[i].axis_point(q);
        let (_, n) = self.capsules[i].sdf(q, posed.radii[i]);
        let on_surface = c + n.scale(posed.radii[i]);
        (self.analytic_weights(on_surface), on_surface)
    }

    pub fn cast<U: Real>(&self) -> CapsuleBody<U> {
        CapsuleBody {
            skeleton: self.skeleton.cast(),
            capsules: self
                .capsules
                .iter()
                .map(|c| Capsule {
                    a: c.a.cast(),
                    b: c.b.cast(),
                    radius: U::lit(c.radius.as_f64()),
                })
                .collect(),
            bulge: self.bulge.iter().map(|b| U::lit(b.as_f64())).collect(),
            sharpness: U::lit(self.sharpness.as_f64()),
        }
    }
}

impl<T: Real> WeightPrior<T> for CapsuleBody<T> {
    fn weights(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> Vec<T> {
        self.nearest_surface_weights(p, ctx).0
    }
}

/// `(d, n)` of the posed body at `p`, bulge included.
pub fn posed_sdf_oracle<T: Real>(body: &CapsuleBody<T>, pose: &Pose<T>, p: Vec3<T>) -> Result<(T, Vec3<T>)> {
    let s = body.posed(pose, &[], true)?.sdf(p);
    Ok((s.distance, s.normal))
}

/// Random poses with independent limb motion.
pub fn sample_poses<R: Rng + ?Sized>(joint_count: usize, count: usize, rng: &mut R) -> Vec<Pose<f64>> {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rotations = Vec::with_capacity(joint_count);
        for j in 0..joint_count {
            let r = match j {
                0 => Vec3::new(u(-0.15, 0.15), u(-0.15, 0.15), u(-0.15, 0.15)),
                1 => Vec3::new(u(-0.35, 0.35), u(-0.35, 0.35), u(-0.35, 0.35)),
                2 | 4 => Vec3::new(u(-0.4, 0.4), u(-0.7, 0.7), u(-0.9, 0.9)),
                _ => {
                    // elbow bends forward: the left arm about -y, the right about +y
                    let side = if j == 3 { -1.0 } else { 1.0 };
                    Vec3::new(u(-0.2, 0.2), side * u(0.0, 1.7), u(-0.2, 0.2))
                }
            };
            rotations.push(r);
        }
        out.push(Pose {
            rotations,
            root_translation: Vec3::zero(),
        });
    }
    out
}

/// Marching-cubes surface of the exact posed SDF, standing in for a scan.
pub fn frame_mesh<T: Real>(body: &CapsuleBody<T>, pose: &Pose<T>, shape: &[T], res: usize) -> Result<Mesh<T>> {
    if res < 32 {
        return Err(Error::config("frame_res", format!("{res} is below the minimum of 32")));
    }
    let posed = body.posed(pose, shape, true)?;
    let b = posed.bounds();
    let pad = b.extent().0.iter().fold(T::zero(), |m, v| m.max(*v)) * T::lit(4.0) / T::from_usize_lossy(res);
    let field = eval_grid(&FnField(|p| posed.distance(p)), b.expanded(pad), res, 1 << 14)?.field;
    let mesh = marching_cubes(&field, T::zero())?;
    mesh.check_watertight()?;
    Ok(mesh)
}

/// Which distance band a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Band {
    Surface = 0,
    Near = 1,
    Far = 2,
}

impl Band {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Band::Surface),
            1 => Some(Band::Near),
            2 => Some(Band::Far),
            _ => None,
        }
    }
}

/// A labeled posed-space point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub p: Vec3<f32>,
    pub d: f32,
    pub n: Vec3<f32>,
    pub band: Band,
}

/// Bytes per sample record: position, distance, normal, band.
pub const SAMPLE_RECORD_BYTES: usize = 29;

impl TrainingSample {
    pub fn encode(&self, out: &mut Vec<u8>) {
        for v in self.p.0.iter().chain([&self.d]).chain(&self.n.0) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.band as u8);
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != SAMPLE_RECORD_BYTES {
            return None;
        }
        let f = |i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        Some(TrainingSample {
            p: Vec3([f(0), f(1), f(2)]),
            d: f(3),
            n: Vec3([f(4), f(5), f(6)]),
            band: Band::from_u8(b[28])?,
        })
    }
}

pub fn write_samples(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * SAMPLE_RECORD_BYTES);
    for s in samples {
        s.encode(&mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainingSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % SAMPLE_RECORD_BYTES != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("length {} is not a multiple of {SAMPLE_RECORD_BYTES}", bytes.len()),
        });
    }
    bytes
        .chunks(SAMPLE_RECORD_BYTES)
        .enumerate()
        .map(|(i, c)| {
            TrainingSample::decode(c).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i,
                reason: "bad band tag".into(),
            })
        })
        .collect()
}

/// Sign from `n_rays` random rays: odd crossing counts vote inside (−1).
/// A ray that grazes an edge or vertex is re-cast.
pub fn sign_by_ray_parity<R: Rng + ?Sized>(index: &MeshIndex, p: Vec3<f64>, n_rays: usize, rng: &mut R) -> Result<f64> {
    if n_rays % 2 == 0 {
        return Err(Error::config("n_rays", format!("{n_rays} is not odd")));
    }
    const RETRIES: usize = 16;
    let (mut inside, mut outside) = (0, 0);
    for _ in 0..n_rays {
        for _ in 0..RETRIES {
            let d = Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let Some(d) = d.try_normalize(1e-9) else { continue };
            if let Some(c) = index.ray_crossings(p, d) {
                if c % 2 == 1 {
                    inside += 1;
                } else {
                    outside += 1;
                }
                break;
            }
        }
    }
    if inside + outside == 0 {
        return Err(Error::invalid(format!("every ray from {:?} hit a mesh edge", p.0)));
    }
    Ok(if inside > outside { -1.0 } else { 1.0 })
}

/// How ground-truth distances are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Exact posed SDF of the capsule body.
    Oracle,
    /// Nearest-triangle distance with ray-parity sign.
    Mesh,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Oracle => "oracle",
            LabelMode::Mesh => "mesh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(LabelMode::Oracle),
            "mesh" => Some(LabelMode::Mesh),
            _ => None,
        }
    }
}

/// One posed frame: pose, optional shape code and its surface mesh.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: usize,
    pub pose: Pose<f64>,
    pub shape: Vec<f64>,
    pub mesh: Mesh<f64>,
}

pub(crate) fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

const LABEL_BLOCK: usize = 1024;

/// `n_surface` area-uniform surface samples, then the same points displaced
/// by isotropic Gaussian noise for each of `sigmas` (near, far).
pub fn sample_training_points(
    frame: &Frame,
    body: Option<&CapsuleBody<f64>>,
    mode: LabelMode,
    n_surface: usize,
    sigmas: [f64; 2],
    n_rays: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    if frame.mesh.is_empty() {
        return Err(Error::invalid(format!("frame {} has an empty mesh", frame.id)));
    }
    let posed = match (mode, body) {
        (LabelMode::Oracle, Some(b)) => Some(b.posed(&frame.pose, &frame.shape, true)?),
        (LabelMode::Oracle, None) => return Err(Error::invalid("oracle labels need the body")),
        (LabelMode::Mesh, _) => None,
    };
    let index = MeshIndex::new(&frame.mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, frame.id as u64, u64::MAX));
    let base: Vec<Vec3<f64>> = frame
        .mesh
        .sample_surface(n_surface, &mut rng)?
        .into_iter()
        .map(|(p, _)| posed.as_ref().map_or(p, |b| b.project(p)))
        .collect();

    let jobs: Vec<(Band, f64)> = vec![(Band::Surface, 0.0), (Band::Near, sigmas[0]), (Band::Far, sigmas[1])];
    let mut out = Vec::with_capacity(3 * n_surface);
    for (bi, (band, sigma)) in jobs.into_iter().enumerate() {
        let blocks: Vec<Result<Vec<TrainingSample>>> = base
            .par_chunks(LABEL_BLOCK)
            .enumerate()
            .map(|(blk, pts)| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, frame.id as u64, (bi * 1_000_000 + blk) as u64));
                pts.iter()
                    .map(|&p0| {
                        let mut p = p0;
                        if sigma > 0.0 {
                            for c in 0..3 {
                                p[c] += sigma * rng.sample::<f64, _>(StandardNormal);
                            }
                        }
                        let pf = p.cast::<f32>();
                        let p = pf.cast::<f64>();
                        let (d, n) = match &posed {
                            Some(b) => {
                                let s = b.sdf(p);
                                (s.distance, s.normal)
                            }
                            None => {
                                let near = index.nearest(p);
                                let sign = if band == Band::Surface {
                                    1.0
                                } else {
                                    sign_by_ray_parity(&index, p, n_rays, &mut rng)?
                                };
                                let n = frame.mesh.face_cross(near.triangle);
                                (sign * near.distance_squared.sqrt(), n)
                            }
                        };
                        let n = n
                            .try_normalize(1e-30)
                            .ok_or_else(|| Error::DegenerateNormal(n.norm()))?;
                        Ok(TrainingSample {
                            p: pf,
                            d: d as f32,
                            n: n.cast(),
                            band,
                        })
                    })
                    .collect()
            })
            .collect();
        for b in blocks {
            out.extend(b?);
        }
    }
    Ok(out)
}

/// Everything that controls dataset generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub poses: usize,
    /// Fraction of frames used for training; the rest are held out.
    pub train_fraction: f64,
    pub n_surface: usize,
    pub sigma_near: f64,
    pub sigma_far: f64,
    pub frame_res: usize,
    pub labels: LabelMode,
    pub n_rays: usize,
    /// Radius multipliers of a shape family; empty for a single subject.
    pub radius_scales: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            poses: 50,
            train_fraction: 0.8,
            n_surface: 10_000,
            sigma_near: 0.01,
            sigma_far: 0.1,
            frame_res: 96,
            labels: LabelMode::Oracle,
            n_rays: 5,
            radius_scales: Vec::new(),
        }
    }
}

const DATA_KEYS: [&str; 10] = [
    "seed",
    "poses",
    "train_fraction",
    "n_surface",
    "sigma_near",
    "sigma_far",
    "frame_res",
    "labels",
    "n_rays",
    "radius_scales",
];

impl DataConfig {
    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\nposes = {}\ntrain_fraction = {}\nn_surface = {}\nsigma_near = {}\nsigma_far = {}\nframe_res = {}\nlabels = {}\nn_rays = {}\nradius_scales = {}\n",
            self.seed,
            self.poses,
            self.train_fraction,
            self.n_surface,
            self.sigma_near,
            self.sigma_far,
            self.frame_res,
            self.labels.as_str(),
            self.n_rays,
            join(&self.radius_scales),
        )
    }

    /// Reads the keys present, keeping defaults for the rest. Keys outside
    /// `extra` and the data keys are rejected.
    pub fn from_kv(kv: &KeyValues, extra: &[&str]) -> Result<Self> {
        let known: Vec<&str> = DATA_KEYS.iter().chain(extra).copied().collect();
        kv.reject_unknown(&known)?;
        let d = DataConfig::default();
        let labels = match kv.raw("labels") {
            None => d.labels,
            Some(s) => LabelMode::parse(s).ok_or_else(|| Error::config("labels", format!("`{s}` is not oracle or mesh")))?,
        };
        let c = DataConfig {
            seed: kv.get("seed")?.unwrap_or(d.seed),
            poses: kv.get("poses")?.unwrap_or(d.poses),
            train_fraction: kv.get("train_fraction")?.unwrap_or(d.train_fraction),
            n_surface: kv.get("n_surface")?.unwrap_or(d.n_surface),
            sigma_near: kv.get("sigma_near")?.unwrap_or(d.sigma_near),
            sigma_far: kv.get("sigma_far")?.unwrap_or(d.sigma_far),
            frame_res: kv.get("frame_res")?.unwrap_or(d.frame_res),
            labels,
            n_rays: kv.get("n_rays")?.unwrap_or(d.n_rays),
            radius_scales: kv.list("radius_scales")?.unwrap_or_default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses == 0 {
            return Err(Error::config("poses", "need at least one pose"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1]"));
        }
        if self.n_surface == 0 {
            return Err(Error::config("n_surface", "must be positive"));
        }
        if !(self.sigma_near > 0.0 && self.sigma_far > 0.0) {
            return Err(Error::config("sigma_near", "noise scales must be positive"));
        }
        if self.frame_res < 32 {
            return Err(Error::config("frame_res", "must be at least 32"));
        }
        if self.n_rays % 2 == 0 {
            return Err(Error::config("n_rays", "must be odd"));
        }
        if let Some(s) = self.radius_scales.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::config("radius_scales", format!("{s} is not positive")));
        }
        Ok(())
    }

    pub fn shape_dim(&self) -> usize {
        usize::from(!self.radius_scales.is_empty())
    }

    /// Shape code of frame `i`.
    pub fn shape_of(&self, i: usize) -> Vec<f64> {
        if self.radius_scales.is_empty() {
            Vec::new()
        } else {
            vec![self.radius_scales[i % self.radius_scales.len()] - 1.0]
        }
    }
}

pub fn pose_to_text(pose: &Pose<f64>, shape: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "joint_count {}", pose.joint_count());
    let [x, y, z] = pose.root_translation.0;
    let _ = writeln!(s, "root_translation {x:?} {y:?} {z:?}");
    for (i, r) in pose.rotations.iter().enumerate() {
        let [x, y, z] = r.0;
        let _ = writeln!(s, "rotation {i} {x:?} {y:?} {z:?}");
    }
    if !shape.is_empty() {
        let v: Vec<String> = shape.iter().map(|b| format!("{b:?}")).collect();
        let _ = writeln!(s, "shape {}", v.join(" "));
    }
    s
}

/// Parses a pose record; returns the pose and its shape code.
pub fn pose_from_text(text: &str, path: &Path) -> Result<(Pose<f64>, Vec<f64>)> {
    let perr = |line: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    };
    let mut count = None;
    let mut trans = Vec3::zero();
    let mut rots: Vec<(usize, Vec3<f64>)> = Vec::new();
    let mut shape = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let nums = |xs: &[&str]| -> Result<Vec<f64>> {
            xs.iter().map(|v| v.parse().map_err(|_| perr(ln, "bad number"))).collect()
        };
        match toks.first().copied() {
            None | Some("#") => {}
            Some("joint_count") => count = Some(toks.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| perr(ln, "bad joint_count"))?),
            Some("root_translation") => {
                let v = nums(&toks[1..])?;
                if v.len() != 3 {
                    return Err(perr(ln, "root_translation needs three values"));
                }
                trans = Vec3([v[0], v[1], v[2]]);
            }
            Some("rotation") => {
                if toks.len() != 5 {
                    return Err(perr(ln, "expected `rotation <index> <x> <y> <z>`"));
                }
                let i = toks[1].parse().map_err(|_| perr(ln, "bad joint index"))?;
                let v = nums(&toks[2..])?;
                rots.push((i, Vec3([v[0], v[1], v[2]])));
            }
            Some("shape") => shape = nums(&toks[1..])?,
            Some(_) => return Err(perr(ln, "unknown record")),
        }
    }
    let count: usize = count.ok_or_else(|| perr(0, "missing joint_count"))?;
    rots.sort_by_key(|(i, _)| *i);
    if rots.len() != count || rots.iter().enumerate().any(|(k, (i, _))| k != *i) {
        return Err(perr(0, "rotations do not cover 0..joint_count"));
    }
    let pose = Pose {
        rotations: rots.into_iter().map(|(_, r)| r).collect(),
        root_translation: trans,
    };
    if !pose.is_finite() {
        return Err(perr(0, "non-finite pose"));
    }
    Ok((pose, shape))
}

/// Reads a file holding one or more pose records separated by `---` lines.
pub fn read_pose_list(path: &Path) -> Result<Vec<(Pose<f64>, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split("\n---")
        .map(|chunk| chunk.trim_start_matches('-'))
        .filter(|c| !c.trim().is_empty())
        .map(|c| pose_from_text(c, path))
        .collect()
}

pub fn write_pose_list(path: &Path, poses: &[(Pose<f64>, Vec<f64>)]) -> Result<()> {
    let text: Vec<String> = poses.iter().map(|(p, s)| pose_to_text(p, s)).collect();
    fs::write(path, text.join("---\n")).map_err(|e| Error::io(path, e))
}

/// Summary written next to the frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub frame_count: usize,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub samples_per_frame: usize,
    pub shape_dim: usize,
    pub labels: LabelMode,
    pub config_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest";
pub const BODY_FILE: &str = "body.cfg";
pub const DATA_FILE: &str = "data.cfg";
pub const SKELETON_FILE: &str = "skeleton.txt";
const MANIFEST_KEYS: [&str; 9] = [
    "format",
    "seed",
    "frame_count",
    "train",
    "heldout",
    "samples_per_frame",
    "shape_dim",
    "labels",
    "config_hash",
];

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "format = ngif-dataset-1\nseed = {}\nframe_count = {}\ntrain = {}\nheldout = {}\nsamples_per_frame = {}\nshape_dim = {}\nlabels = {}\nconfig_hash = {}\n",
            self.seed,
            self.frame_count,
            join(&self.train),
            join(&self.heldout),
            self.samples_per_frame,
            self.shape_dim,
            self.labels.as_str(),
            self.config_hash
        )
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&MANIFEST_KEYS)?;
        if kv.raw("format") != Some("ngif-dataset-1") {
            return Err(Error::config("format", "not an ngif dataset manifest"));
        }
        let labels = kv.require::<String>("labels")?;
        Ok(Manifest {
            seed: kv.require("seed")?,
            frame_count: kv.require("frame_count")?,
            train: kv.list("train")?.unwrap_or_default(),
            heldout: kv.list("heldout")?.unwrap_or_default(),
            samples_per_frame: kv.require("samples_per_frame")?,
            shape_dim: kv.require("shape_dim")?,
            labels: LabelMode::parse(&labels).ok_or_else(|| Error::config("labels", labels.clone()))?,
            config_hash: kv.require("config_hash")?,
        })
    }
}

pub fn config_hash(body: &BodyConfig, data: &DataConfig) -> String {
    let mut h = Sha256::new();
    h.update(body.to_text());
    h.update(data.to_text());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Paths inside a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }
    pub fn mesh(&self, id: usize) -> PathBuf {
        self.root.join("frames").join(format!("{id}.obj"))
    }
    pub fn pose(&self, id: usize) -> PathBuf {
        self.root.join("frames").join(format!("{id}.pose"))
    }
    pub fn samples(&self, id: usize) -> PathBuf {
        self.root.join("samples").join(format!("{id}.bin"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(p, e))
}

/// Generates frames and samples for every pose and writes the dataset.
pub fn build_dataset(body_cfg: &BodyConfig, data: &DataConfig, poses: &[Pose<f64>], dir: &Path) -> Result<Manifest> {
    data.validate()?;
    if poses.is_empty() {
        return Err(Error::invalid("build_dataset needs at least one pose"));
    }
    let body = make_synthetic_body::<f64>(body_cfg)?;
    let layout = DatasetLayout::new(dir);
    create_dir(&dir.join("frames"))?;
    create_dir(&dir.join("samples"))?;
    write_text(&dir.join(SKELETON_FILE), &body.skeleton.to_text())?;
    write_text(&dir.join(BODY_FILE), &body_cfg.to_text())?;
    write_text(&dir.join(DATA_FILE), &data.to_text())?;

    let counts: Vec<Result<usize>> = poses
        .par_iter()
        .enumerate()
        .map(|(id, pose)| {
            let shape = data.shape_of(id);
            let mesh = frame_mesh(&body, pose, &shape, data.frame_res)?;
            let frame = Frame {
                id,
                pose: pose.clone(),
                shape,
                mesh,
            };
            let samples = sample_training_points(
                &frame,
                Some(&body),
                data.labels,
                data.n_surface,
                [data.sigma_near, data.sigma_far],
                data.n_rays,
                data.seed,
            )?;
            write_mesh(&frame.mesh, &layout.mesh(id), MeshFormat::Obj)?;
            write_text(&layout.pose(id), &pose_to_text(&frame.pose, &frame.shape))?;
            write_samples(&layout.samples(id), &samples)?;
            log::debug!("frame {id}: {} triangles, {} samples", frame.mesh.triangles.len(), samples.len());
            Ok(samples.len())
        })
        .collect();
    let mut per_frame = 0;
    for c in counts {
        per_frame = c?;
    }

    let mut ids: Vec<usize> = (0..poses.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(data.seed, u64::MAX, 0)));
    let n_train = ((poses.len() as f64) * data.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, poses.len());
    let mut train = ids[..n_train].to_vec();
    let mut heldout = ids[n_train..].to_vec();
    train.sort_unstable();
    heldout.sort_unstable();
    let manifest = Manifest {
        seed: data.seed,
        frame_count: poses.len(),
        train,
        heldout,
        samples_per_frame: per_frame,
        shape_dim: data.shape_dim(),
        labels: data.labels,
        config_hash: config_hash(body_cfg, data),
    };
    write_text(&layout.manifest(), &manifest.to_text())?;
    Ok(manifest)
}

/// A frame as stored on disk, without its mesh.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub id: usize,
    pub pose: Pose<f64>,
    pub shape: Vec<f64>,
    pub samples: Vec<TrainingSample>,
}

/// A dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: DatasetLayout,
    pub manifest: Manifest,
    pub skeleton: Skeleton<f64>,
    pub body_config: BodyConfig,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let layout = DatasetLayout::new(dir);
        let manifest = Manifest::from_kv(&KeyValues::read(&layout.manifest())?)?;
        let sk_path = dir.join(SKELETON_FILE);
        let sk_text = fs::read_to_string(&sk_path).map_err(|e| Error::io(&sk_path, e))?;
        let skeleton = Skeleton::from_text(&sk_text, &sk_path)?;
        let body_config = BodyConfig::from_kv(&KeyValues::read(&dir.join(BODY_FILE))?)?;
        let frames = (0..manifest.frame_count)
            .into_par_iter()
            .map(|id| {
                let p = layout.pose(id);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let (pose, shape) = pose_from_text(&text, &p)?;
                if pose.joint_count() != skeleton.joint_count() {
                    return Err(Error::DimensionMismatch {
                        context: "frame pose joints",
                        expected: skeleton.joint_count(),
                        actual: pose.joint_count(),
                    });
                }
                Ok(FrameRecord {
                    id,
                    pose,
                    shape,
                    samples: read_samples(&layout.samples(id))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            layout,
            manifest,
            skeleton,
            body_config,
            frames,
        })
    }

    pub fn body(&self) -> Result<CapsuleBody<f64>> {
        make_synthetic_body(&self.body_config)
    }

    pub fn mesh(&self, id: usize) -> Result<Mesh<f32>> {
        read_mesh(&self.layout.mesh(id))
    }
}

/// Checks every sample invariant of a frame; returns the first violation.
pub fn check_samples(samples: &[TrainingSample], sigma_near: f32) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let bad = |why: &str| Err(Error::invalid(format!("sample {i}: {why}")));
        if !(s.p.is_finite() && s.d.is_finite()) {
            return bad("non-finite");
        }
        if (s.n.norm() - 1.0).abs() > 1e-6 {
            return bad("normal is not unit length");
        }
        if s.band == Band::Surface && s.d.abs() > 3.0 * sigma_near {
            return bad("surface sample too far from the surface");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body() -> CapsuleBody<f64> {
        make_synthetic_body(&BodyConfig::default()).unwrap()
    }

    #[test]
    fn default_body_has_unit_height() {
        let b = body();
        assert_eq!(b.capsules.len(), 6);
        let posed = b.posed(&Pose::identity(6), &[], true).unwrap();
        let bb = posed.bounds();
        assert!((bb.max.y() - bb.min.y() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_radius() {
        let mut c = BodyConfig::default();
        c.radii[2] = 0.0;
        assert!(matches!(make_synthetic_body::<f64>(&c), Err(Error::Config { field, .. }) if field == "radii"));
    }

    #[test]
    fn capsule_distance_cases() {
        let b = body();
        let c = b.capsules[2];
        let mid = (c.a + c.b).scale(0.5);
        let p = mid + Vec3::new(0.0, 0.0, c.radius + 0.1);
        let posed = b.posed(&Pose::identity(6), &[], false).unwrap();
        let s = posed.sdf(p);
        assert!((s.distance - 0.1).abs() < 1e-12);
        assert!(posed.distance(mid) < 0.0);
    }

    #[test]
    fn weights_sharpen_to_one_hot() {
        let mut b = body();
        let c = b.capsules[3];
        let mid = (c.a + c.b).scale(0.5);
        b.sharpness = 200.0;
        let w = b.analytic_weights(mid);
        assert!(w[3] > 1.0 - 1e-9);
    }

    #[test]
    fn pose_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_poses(6, 1, &mut rng).pop().unwrap();
        let t = pose_to_text(&p, &[0.2]);
        let (q, s) = pose_from_text(&t, Path::new("p")).unwrap();
        assert_eq!(p, q);
        assert_eq!(s, vec![0.2]);
    }

    #[test]
    fn sample_record_round_trip() {
        let s = TrainingSample {
            p: Vec3([0.1, -0.2, 0.3]),
            d: -0.01,
            n: Vec3([0.0, 1.0, 0.0]),
            band: Band::Near,
        };
        let mut buf = Vec::new();
        s.encode(&mut buf);
        assert_eq!(buf.len(), SAMPLE_RECORD_BYTES);
        assert_eq!(TrainingSample::decode(&buf), Some(s));
    }

    #[test]
    fn nearest_surface_weights_of_a_surface_point() {
        let b = body();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = sample_poses(6, 1, &mut rng).pop().unwrap();
        let ctx = PoseContext::new(&b.skeleton, &pose, None).unwrap();
        let posed = b.posed(&pose, &[], false).unwrap();
        // a point just off the posed forearm maps back onto the canonical forearm surface
        let c = b.capsules[3];
        let mid = posed.transforms[3].transform_point((c.a + c.b).scale(0.5));
        let p = posed.project(mid + Vec3::new(0.0, 0.5, 0.0));
        let (w, q) = b.nearest_surface_weights(p, &ctx);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((c.axis_distance(q) - c.radius).abs() < 1e-9);
    }
}

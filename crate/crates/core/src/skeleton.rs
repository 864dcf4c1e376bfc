//! Kinematic chain, rigid joint transforms, linear blending and un-posing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Mat3, Mat4, Vec3};
use crate::scalar::Real;

/// Condition number above which a blended transform is treated as singular.
pub const MAX_BLEND_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton<T> {
    parents: Vec<Option<usize>>,
    rest_joints: Vec<Vec3<T>>,
}

impl<T: Real> Skeleton<T> {
    /// Builds a chain; every non-root parent must precede its child and joint 0 is the only root.
    pub fn new(parents: Vec<Option<usize>>, rest_joints: Vec<Vec3<T>>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::invalid("skeleton needs at least one joint"));
        }
        check_dim("skeleton rest joints", parents.len(), rest_joints.len())?;
        if parents[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::invalid(format!("joint {i} is a second root"))),
                Some(p) if *p >= i => {
                    return Err(Error::invalid(format!(
                        "joint {i} has parent {p}, which does not precede it"
                    )))
                }
                _ => {}
            }
        }
        if rest_joints.iter().any(|j| !j.is_finite()) {
            return Err(Error::invalid("non-finite rest joint"));
        }
        Ok(Skeleton {
            parents,
            rest_joints,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_joints(&self) -> &[Vec3<T>] {
        &self.rest_joints
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(joint))
            .map(|(i, _)| i)
    }

    pub fn cast<U: Real>(&self) -> Skeleton<U> {
        Skeleton {
            parents: self.parents.clone(),
            rest_joints: self.rest_joints.iter().map(|j| j.cast()).collect(),
        }
    }

    /// Text form: a `joint_count` line, a `parents` line (`-1` for the root),
    /// then one `joint <index> <x> <y> <z>` line per joint.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "joint_count {}", self.joint_count());
        let parents: Vec<String> = self
            .parents
            .iter()
            .map(|p| p.map_or("-1".to_string(), |p| p.to_string()))
            .collect();
        let _ = writeln!(s, "parents {}", parents.join(" "));
        for (i, j) in self.rest_joints.iter().enumerate() {
            let [x, y, z] = j.to_f64();
            let _ = writeln!(s, "joint {i} {x:?} {y:?} {z:?}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut count: Option<usize> = None;
        let mut parents: Option<Vec<Option<usize>>> = None;
        let mut joints: Vec<(usize, Vec3<T>)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            match key {
                "joint_count" => {
                    let n = rest
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| perr(ln + 1, "bad joint_count".into()))?;
                    count = Some(n);
                }
                "parents" => {
                    let ps = rest
                        .iter()
                        .map(|v| match v.parse::<i64>() {
                            Ok(-1) => Ok(None),
                            Ok(p) if p >= 0 => Ok(Some(p as usize)),
                            _ => Err(perr(ln + 1, format!("bad parent index `{v}`"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    parents = Some(ps);
                }
                "joint" => {
                    if rest.len() != 4 {
                        return Err(perr(ln + 1, "expected `joint <index> <x> <y> <z>`".into()));
                    }
                    let idx: usize = rest[0]
                        .parse()
                        .map_err(|_| perr(ln + 1, "bad joint index".into()))?;
                    let mut c = [0.0f64; 3];
                    for (k, v) in rest[1..].iter().enumerate() {
                        c[k] = v
                            .parse()
                            .map_err(|_| perr(ln + 1, format!("bad coordinate `{v}`")))?;
                    }
                    joints.push((idx, Vec3::from_f64(c)));
                }
                other => return Err(perr(ln + 1, format!("unknown key `{other}`"))),
            }
        }
        let count = count.ok_or_else(|| perr(0, "missing joint_count".into()))?;
        let parents = parents.ok_or_else(|| perr(0, "missing parents".into()))?;
        check_dim("skeleton parents", count, parents.len())?;
        check_dim("skeleton joints", count, joints.len())?;
        joints.sort_by_key(|(i, _)| *i);
        if joints.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(perr(0, "joint indices are not 0..joint_count".into()));
        }
        Skeleton::new(parents, joints.into_iter().map(|(_, j)| j).collect())
    }
}

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T> {
    pub rotations: Vec<Vec3<T>>,
    pub root_translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity(joints: usize) -> Self {
        Pose {
            rotations: vec![Vec3::zero(); joints],
            root_translation: Vec3::zero(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Flat `3K` parameter vector.
    pub fn flat(&self) -> Vec<T> {
        self.rotations.iter().flat_map(|r| r.0).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.rotations.iter().all(|r| r.is_finite()) && self.root_translation.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotations: self.rotations.iter().map(|r| r.cast()).collect(),
            root_translation: self.root_translation.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms<T> {
    pub transforms: Vec<Mat4<T>>,
}

impl<T: Real> JointTransforms<T> {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Posed joint positions `B_i j̄_i`.
    pub fn posed_joints(&self, skeleton: &Skeleton<T>) -> Vec<Vec3<T>> {
        self.transforms
            .iter()
            .zip(skeleton.rest_joints())
            .map(|(b, j)| b.transform_point(*j))
            .collect()
    }
}

/// Convex per-joint weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights<T>(Vec<T>);

impl<T: Real> BlendWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("empty blend weights"));
        }
        let tol = T::lit(1e-6);
        if weights
            .iter()
            .any(|w| !w.is_finite() || *w < -tol || *w > T::one() + tol)
        {
            return Err(Error::invalid("blend weight outside [0, 1]"));
        }
        let sum: T = weights.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::invalid(format!("blend weights sum to {sum}")));
        }
        Ok(BlendWeights(weights))
    }

    pub fn one_hot(joints: usize, k: usize) -> Self {
        let mut w = vec![T::zero(); joints];
        w[k] = T::one();
        BlendWeights(w)
    }

    pub fn uniform(joints: usize) -> Self {
        BlendWeights(vec![T::one() / T::from_usize_lossy(joints); joints])
    }

    /// Wraps weights already known to be normalized (a simplex head output).
    pub(crate) fn from_simplex_unchecked(weights: Vec<T>) -> Self {
        BlendWeights(weights)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Offsets from a query point to every joint, `K × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEncoding<T> {
    pub offsets: Vec<Vec3<T>>,
}

impl<T: Real> PoseEncoding<T> {
    pub fn flat(&self) -> Vec<T> {
        self.offsets.iter().flat_map(|o| o.0).collect()
    }
}

/// Rigid per-joint transforms from canonical to posed space.
///
/// The root composes its rotation about the rest root joint with the root
/// translation; every child rotates about its own rest joint inside the
/// parent frame.
pub fn forward_kinematics<T: Real>(skeleton: &Skeleton<T>, pose: &Pose<T>) -> Result<JointTransforms<T>> {
    check_dim("pose rotations", skeleton.joint_count(), pose.joint_count())?;
    if !pose.is_finite() {
        return Err(Error::invalid("non-finite pose"));
    }
    let mut out: Vec<Mat4<T>> = Vec::with_capacity(skeleton.joint_count());
    for (i, (rot, rest)) in pose.rotations.iter().zip(skeleton.rest_joints()).enumerate() {
        let r = Mat3::from_axis_angle(*rot);
        // rotate about the rest joint: x -> R (x - j) + j
        let pivot = *rest - r.mul_vec(*rest);
        let local = Mat4::from_rotation_translation(&r, pivot);
        let global = match skeleton.parents()[i] {
            None => Mat4::translation(pose.root_translation).mul(&local),
            Some(p) => out[p].mul(&local),
        };
        out.push(global);
    }
    Ok(JointTransforms { transforms: out })
}

/// `Σ_i w_i B_i`.
pub fn blend_transform<T: Real>(w: &BlendWeights<T>, b: &JointTransforms<T>) -> Result<Mat4<T>> {
    check_dim("blend weights", b.len(), w.as_slice().len())?;
    Ok(blend_raw(w.as_slice(), &b.transforms))
}

pub(crate) fn blend_raw<T: Real>(w: &[T], b: &[Mat4<T>]) -> Mat4<T> {
    let mut m = Mat4::zero();
    for (wi, bi) in w.iter().zip(b) {
        if *wi != T::zero() {
            m.add_scaled(bi, *wi);
        }
    }
    m
}

/// A point mapped back to canonical space together with what its
/// vector-Jacobian products need.
#[derive(Clone, Copy, Debug)]
pub struct Unposed<T> {
    pub point: Vec3<T>,
    pub blend_inverse: Mat4<T>,
}

impl<T: Real> Unposed<T> {
    /// Pulls `g = ∂L/∂p̄` back to `(∂L/∂p, ∂L/∂w)`.
    ///
    /// With `M = Σ w_i B_i`, `∂p̄/∂w_i = -M⁻¹ B_i p̄` and `∂p̄/∂p = M⁻¹` (linear block).
    pub fn vjp(&self, g: Vec3<T>, b: &[Mat4<T>], grad_w: &mut [T]) -> Vec3<T> {
        let u = self.blend_inverse.transpose().mul_homogeneous([g[0], g[1], g[2], T::zero()]);
        let ph = [self.point[0], self.point[1], self.point[2], T::one()];
        for (gw, bi) in grad_w.iter_mut().zip(b) {
            let bp = bi.mul_homogeneous(ph);
            *gw -= u[0] * bp[0] + u[1] * bp[1] + u[2] * bp[2] + u[3] * bp[3];
        }
        Vec3([u[0], u[1], u[2]])
    }
}

pub(crate) fn unpose_raw<T: Real>(p: Vec3<T>, w: &[T], b: &[Mat4<T>]) -> Result<Unposed<T>> {
    let m = blend_raw(w, b);
    let singular = |condition: f64| {
        let [x, y, z] = p.to_f64();
        Error::SingularBlend { x, y, z, condition }
    };
    let (inv, cond) = m.inverse_with_condition().ok_or_else(|| singular(f64::INFINITY))?;
    if !(cond.as_f64() <= MAX_BLEND_CONDITION) {
        return Err(singular(cond.as_f64()));
    }
    Ok(Unposed {
        point: inv.transform_point(p),
        blend_inverse: inv,
    })
}

/// `p̄ = (Σ w_i B_i)⁻¹ p`, rejecting blends whose condition number exceeds [`MAX_BLEND_CONDITION`].
pub fn unpose_point<T: Real>(p: Vec3<T>, w: &BlendWeights<T>, b: &JointTransforms<T>) -> Result<Vec3<T>> {
    check_dim("blend weights", b.len(), w.as_slice().len())?;
    unpose_raw(p, w.as_slice(), &b.transforms).map(|u| u.point)
}

/// Same as [`unpose_point`] but keeps the inverse for gradient pull-back.
pub fn unpose_point_with_grad<T: Real>(
    p: Vec3<T>,
    w: &BlendWeights<T>,
    b: &JointTransforms<T>,
) -> Result<Unposed<T>> {
    check_dim("blend weights", b.len(), w.as_slice().len())?;
    unpose_raw(p, w.as_slice(), &b.transforms)
}

pub fn pose_encoding<T: Real>(p: Vec3<T>, joints: &[Vec3<T>]) -> PoseEncoding<T> {
    PoseEncoding {
        offsets: joints.iter().map(|j| p - *j).collect(),
    }
}

/// `w ∘ θ`: each joint's axis-angle scaled by its weight, flattened to `3K`.
pub fn weighted_pose<T: Real>(w: &BlendWeights<T>, pose: &Pose<T>) -> Result<Vec<T>> {
    check_dim("weighted pose", pose.joint_count(), w.as_slice().len())?;
    Ok(weighted_pose_raw(w.as_slice(), &pose.rotations))
}

pub(crate) fn weighted_pose_raw<T: Real>(w: &[T], rotations: &[Vec3<T>]) -> Vec<T> {
    w.iter()
        .zip(rotations)
        .flat_map(|(wi, r)| r.0.map(|c| c * *wi))
        .collect()
}

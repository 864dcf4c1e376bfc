//! Small fixed-size vector and homogeneous-matrix types.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    #[inline]
    pub fn zero() -> Self {
        Vec3([T::zero(); 3])
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Vec3([v; 3])
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3([T::lit(v[0]), T::lit(v[1]), T::lit(v[2])])
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.0[0].as_f64(), self.0[1].as_f64(), self.0[2].as_f64()]
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::from_f64(self.to_f64())
    }

    #[inline]
    pub fn x(self) -> T {
        self.0[0]
    }
    #[inline]
    pub fn y(self) -> T {
        self.0[1]
    }
    #[inline]
    pub fn z(self) -> T {
        self.0[2]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Vec3([b * f - c * e, c * d - a * f, a * e - b * d])
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction, or `None` below `eps` length.
    pub fn try_normalize(self, eps: T) -> Option<Self> {
        let n = self.norm();
        (n > eps).then(|| self * (T::one() / n))
    }

    #[inline]
    pub fn scale(self, s: T) -> Self {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    #[inline]
    pub fn component_min(self, o: Self) -> Self {
        Vec3([self.0[0].min(o.0[0]), self.0[1].min(o.0[1]), self.0[2].min(o.0[2])])
    }

    #[inline]
    pub fn component_max(self, o: Self) -> Self {
        Vec3([self.0[0].max(o.0[0]), self.0[1].max(o.0[1]), self.0[2].max(o.0[2])])
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Some unit vector orthogonal to `self` (which must be non-zero).
    pub fn any_orthogonal(self) -> Self {
        let a = self.0.map(|v| v.abs());
        let axis = if a[0] <= a[1] && a[0] <= a[2] {
            Vec3::new(T::one(), T::zero(), T::zero())
        } else if a[1] <= a[2] {
            Vec3::new(T::zero(), T::one(), T::zero())
        } else {
            Vec3::new(T::zero(), T::zero(), T::one())
        };
        let c = self.cross(axis);
        c.scale(T::one() / c.norm())
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Vec3(self.0.map(|v| -v))
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ])
    }

    #[inline]
    pub fn transpose_mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ])
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = [[T::zero(); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation matrix for an axis-angle vector (Rodrigues).
    pub fn from_axis_angle(aa: Vec3<T>) -> Self {
        let angle = aa.norm();
        if angle < T::lit(1e-12) {
            return Self::identity();
        }
        let k = aa.scale(T::one() / angle);
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        let [x, y, z] = k.0;
        Mat3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }
}

/// Row-major 4×4 homogeneous matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4<T>(pub [[T; 4]; 4]);

impl<T: Real> Mat4<T> {
    pub fn zero() -> Self {
        Mat4([[T::zero(); 4]; 4])
    }

    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..4 {
            m.0[i][i] = T::one();
        }
        m
    }

    pub fn from_rotation_translation(r: &Mat3<T>, t: Vec3<T>) -> Self {
        let mut m = Self::identity();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = r.0[i][j];
            }
            m.0[i][3] = t[i];
        }
        m
    }

    pub fn translation(t: Vec3<T>) -> Self {
        Self::from_rotation_translation(&Mat3::identity(), t)
    }

    pub fn linear(&self) -> Mat3<T> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ])
    }

    pub fn translation_part(&self) -> Vec3<T> {
        Vec3([self.0[0][3], self.0[1][3], self.0[2][3]])
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                r.0[i][j] = (0..4).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        r
    }

    /// Applies the full matrix to `(p, 1)` and returns all four components.
    #[inline]
    pub fn mul_homogeneous(&self, p: [T; 4]) -> [T; 4] {
        let m = &self.0;
        let mut out = [T::zero(); 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3] * p[3];
        }
        out
    }

    #[inline]
    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        let h = self.mul_homogeneous([p[0], p[1], p[2], T::one()]);
        Vec3([h[0], h[1], h[2]])
    }

    #[inline]
    pub fn transform_vector(&self, v: Vec3<T>) -> Vec3<T> {
        self.linear().mul_vec(v)
    }

    pub fn transpose(&self) -> Self {
        let mut r = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                r.0[i][j] = self.0[j][i];
            }
        }
        r
    }

    pub fn scaled(&self, s: T) -> Self {
        Mat4(self.0.map(|row| row.map(|v| v * s)))
    }

    pub fn add_scaled(&mut self, o: &Self, s: T) {
        for i in 0..4 {
            for j in 0..4 {
                self.0[i][j] += o.0[i][j] * s;
            }
        }
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> T {
        (0..4)
            .map(|j| (0..4).map(|i| self.0[i][j].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    /// Gauss-Jordan inverse with partial pivoting; `None` when a pivot vanishes.
    pub fn try_inverse(&self) -> Option<Self> {
        let mut a = self.0;
        let mut inv = Self::identity().0;
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))?;
            if a[pivot][col].abs() <= T::min_positive_value() || !a[pivot][col].is_finite() {
                return None;
            }
            a.swap(col, pivot);
            inv.swap(col, pivot);
            let d = T::one() / a[col][col];
            for j in 0..4 {
                a[col][j] *= d;
                inv[col][j] *= d;
            }
            for i in 0..4 {
                if i != col {
                    let f = a[i][col];
                    if f != T::zero() {
                        for j in 0..4 {
                            a[i][j] -= f * a[col][j];
                            inv[i][j] -= f * inv[col][j];
                        }
                    }
                }
            }
        }
        Some(Mat4(inv))
    }

    /// Inverse together with its 1-norm condition number.
    pub fn inverse_with_condition(&self) -> Option<(Self, T)> {
        let inv = self.try_inverse()?;
        let cond = self.norm_one() * inv.norm_one();
        Some((inv, cond))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::splat(T::infinity()),
            max: Vec3::splat(T::neg_infinity()),
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec3<T>>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.grow(*p);
        }
        b
    }

    #[inline]
    pub fn grow(&mut self, p: Vec3<T>) {
        self.min = self.min.component_min(p);
        self.max = self.max.component_max(p);
    }

    pub fn union(&self, o: &Self) -> Self {
        Aabb {
            min: self.min.component_min(o.min),
            max: self.max.component_max(o.max),
        }
    }

    pub fn expanded(&self, margin: T) -> Self {
        Aabb {
            min: self.min - Vec3::splat(margin),
            max: self.max + Vec3::splat(margin),
        }
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max).scale(T::lit(0.5))
    }

    /// Squared distance from `p` to the box (zero inside).
    #[inline]
    pub fn distance_squared(&self, p: Vec3<T>) -> T {
        let mut d = T::zero();
        for i in 0..3 {
            let v = (self.min[i] - p[i]).max(p[i] - self.max[i]).max(T::zero());
            d += v * v;
        }
        d
    }

    /// Slab test; returns whether the ray hits the box within `[0, t_max]`.
    #[inline]
    pub fn ray_hits(&self, origin: Vec3<T>, inv_dir: Vec3<T>, t_max: T) -> bool {
        let mut t0 = T::zero();
        let mut t1 = t_max;
        for i in 0..3 {
            let mut a = (self.min[i] - origin[i]) * inv_dir[i];
            let mut b = (self.max[i] - origin[i]) * inv_dir[i];
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            // NaN from 0 * inf means the ray lies in the slab plane; keep the interval.
            if a.is_nan() || b.is_nan() {
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = Mat3::<f64>::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let v = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        let r = Mat3::<f64>::from_axis_angle(Vec3::new(0.3, -0.2, 0.9));
        let m = Mat4::from_rotation_translation(&r, Vec3::new(1.0, 2.0, -3.0));
        let (inv, cond) = m.inverse_with_condition().unwrap();
        let id = m.mul(&inv);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id.0[i][j] - e).abs() < 1e-12);
            }
        }
        assert!(cond < 100.0);
        assert!(Mat4::<f64>::zero().try_inverse().is_none());
    }

    #[test]
    fn ray_box_slab() {
        let b = Aabb {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let inv = Vec3::new(1.0, f64::INFINITY, f64::INFINITY);
        assert!(b.ray_hits(Vec3::new(-5.0, 0.0, 0.0), inv, f64::INFINITY));
        assert!(!b.ray_hits(Vec3::new(-5.0, 2.0, 0.0), inv, f64::INFINITY));
        assert!(!b.ray_hits(Vec3::new(5.0, 0.0, 0.0), inv, f64::INFINITY));
    }
}

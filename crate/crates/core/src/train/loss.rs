use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scalar::Real;

/// `|d* - d|` and its derivative in `d*` (zero at a zero residual).
pub fn loss_sdf<T: Real>(pred: T, gt: T) -> (T, T) {
    let r = pred - gt;
    let g = if r > T::zero() {
        T::one()
    } else if r < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    (r.abs(), g)
}

/// Tolerance on the unit length of normals fed to [`loss_normal`].
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// `1 - n·n*` and its derivative in `n*`.
pub fn loss_normal<T: Real>(pred: Vec3<T>, gt: Vec3<T>) -> Result<(T, Vec3<T>)> {
    for (name, n) in [("predicted", pred), ("reference", gt)] {
        if !((n.norm().as_f64() - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::invalid(format!("{name} normal has length {}", n.norm())));
        }
    }
    Ok((T::one() - gt.dot(pred), -gt))
}

/// `‖Δ‖²` and its derivative `2Δ`.
pub fn reg_displacement<T: Real>(delta: Vec3<T>) -> (T, Vec3<T>) {
    (delta.norm_squared(), delta.scale(T::lit(2.0)))
}

/// Cross-entropy `-Σ t log w` of simplex weights and its derivative in `w`.
pub fn cross_entropy<T: Real>(pred: &[T], target: &[T], grad: &mut [T]) -> T {
    let tiny = T::min_positive_value();
    let mut l = T::zero();
    for ((w, t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let w = w.max(tiny);
        if *t > T::zero() {
            l -= *t * w.ln();
        }
        *g = -*t / w;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        assert_eq!(loss_sdf(0.5, 0.5).0, 0.0);
        assert!((loss_sdf(0.2, -0.1).0 - 0.3f64).abs() < 1e-15);
        let x = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(loss_normal(x, x).unwrap().0, 0.0);
        assert_eq!(loss_normal(x, Vec3::new(0.0, 1.0, 0.0)).unwrap().0, 1.0);
        assert_eq!(loss_normal(x, -x).unwrap().0, 2.0);
        assert!(loss_normal(x.scale(2.0), x).is_err());
        assert_eq!(reg_displacement(Vec3::<f64>::zero()).0, 0.0);
        assert!((reg_displacement(Vec3::new(0.1, 0.0, 0.0)).0 - 0.01f64).abs() < 1e-15);
    }
}

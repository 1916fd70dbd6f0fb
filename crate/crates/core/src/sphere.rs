//! Geometry of the unit sphere `S^{q-1}` (the rank-one Stiefel manifold),
//! used to move right-factor estimates along geodesics and to linearize
//! perturbations in their tangent spaces.
//!
//! All operations take base points that are unit vectors; callers get a
//! `ConstraintViolation` if the norm drifts beyond `UNIT_TOL`.

use crate::error::{Result, SofariError};
use crate::scalar::Scalar;
use crate::Col;

pub const UNIT_TOL: f64 = 1e-8;

fn check_unit<T: Scalar>(v: &Col<T>, name: &str) -> Result<()> {
    let dev = (v.norm().to_f64() - 1.0).abs();
    if dev > UNIT_TOL {
        return Err(SofariError::ConstraintViolation(format!(
            "{name} is off the unit sphere by {dev:.3e}"
        )));
    }
    Ok(())
}

/// Orthogonal projection of `xi` onto the tangent space at `v`:
/// `xi - v (v' xi)`.
pub fn project_tangent<T: Scalar>(v: &Col<T>, xi: &Col<T>) -> Result<Col<T>> {
    check_unit(v, "base point")?;
    if v.len() != xi.len() {
        return Err(SofariError::Dimension(
            "tangent vector dimension mismatch".into(),
        ));
    }
    Ok(xi - v * v.dot(xi))
}

/// Geodesic exponential: `exp_v(xi) = v cos||xi|| + (xi/||xi||) sin||xi||`.
///
/// Requires `xi` tangent at `v`; `xi = 0` returns `v`.
pub fn exp_map<T: Scalar>(v: &Col<T>, xi: &Col<T>) -> Result<Col<T>> {
    check_unit(v, "base point")?;
    if v.len() != xi.len() {
        return Err(SofariError::Dimension(
            "tangent vector dimension mismatch".into(),
        ));
    }
    let norm = xi.norm();
    let tangency = v.dot(xi).to_f64().abs();
    if tangency > UNIT_TOL * (1.0 + norm.to_f64()) {
        return Err(SofariError::ConstraintViolation(format!(
            "vector is not tangent at the base point (v'xi = {tangency:.3e})"
        )));
    }
    if norm == T::zero() {
        return Ok(v.clone());
    }
    Ok(v * norm.cos() + xi * (norm.sin() / norm))
}

/// Geodesic logarithm: the tangent `xi` at `v` with `exp_v(xi) = w`,
/// `||xi|| = arccos(v'w)`. Antipodal pairs have no unique geodesic and are
/// rejected with `AntipodalPoint`.
pub fn log_map<T: Scalar>(v: &Col<T>, w: &Col<T>) -> Result<Col<T>> {
    check_unit(v, "base point")?;
    check_unit(w, "target point")?;
    if v.len() != w.len() {
        return Err(SofariError::Dimension("point dimension mismatch".into()));
    }
    let mut c = v.dot(w);
    // clamp against rounding outside [-1, 1]
    if c > T::one() {
        c = T::one();
    } else if c < -T::one() {
        c = -T::one();
    }
    if (c + T::one()).to_f64() <= UNIT_TOL {
        return Err(SofariError::AntipodalPoint);
    }
    let theta = c.acos();
    if theta == T::zero() {
        return Ok(Col::zeros(v.len()));
    }
    Ok((w - v * c) * (theta / theta.sin()))
}

/// Geodesic distance `arccos(v'w)`.
pub fn geodesic_distance<T: Scalar>(v: &Col<T>, w: &Col<T>) -> Result<T> {
    check_unit(v, "base point")?;
    check_unit(w, "target point")?;
    let mut c = v.dot(w);
    if c > T::one() {
        c = T::one();
    } else if c < -T::one() {
        c = -T::one();
    }
    Ok(c.acos())
}

/// Retraction by normalization: `(v + xi) / ||v + xi||`. First-order
/// agreement with `exp_map`, cheaper, no trigonometry.
pub fn retract<T: Scalar>(v: &Col<T>, xi: &Col<T>) -> Result<Col<T>> {
    check_unit(v, "base point")?;
    if v.len() != xi.len() {
        return Err(SofariError::Dimension(
            "tangent vector dimension mismatch".into(),
        ));
    }
    let moved = v + xi;
    let norm = moved.norm();
    if norm.to_f64() <= UNIT_TOL {
        return Err(SofariError::ConstraintViolation(
            "retraction collapsed to the origin".into(),
        ));
    }
    Ok(moved / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;
    use crate::testutil::{random_unit, seeded_rng};
    use approx::assert_relative_eq;

    type C = Col<f64>;

    fn e(i: usize, dim: usize) -> C {
        let mut v = C::zeros(dim);
        v[i] = 1.0;
        v
    }

    #[test]
    fn exp_quarter_turn() {
        // exp_{e1}((pi/2) e2) = e2
        let v = e(0, 3);
        let xi = e(1, 3) * (std::f64::consts::FRAC_PI_2);
        let w = exp_map(&v, &xi).unwrap();
        assert_relative_eq!(w, e(1, 3), epsilon = 1e-15);
    }

    #[test]
    fn exp_zero_is_identity() {
        let v = e(2, 4);
        let w = exp_map(&v, &C::zeros(4)).unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn log_recovers_quarter_turn() {
        let v = e(0, 3);
        let xi = log_map(&v, &e(1, 3)).unwrap();
        assert_relative_eq!(xi, e(1, 3) * std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn round_trip_random_pairs() {
        let mut rng = seeded_rng(21);
        for _ in 0..200 {
            let v = random_unit::<f64>(6, &mut rng);
            let w = random_unit::<f64>(6, &mut rng);
            if v.dot(&w) < -1.0 + 1e-6 {
                continue;
            }
            let xi = log_map(&v, &w).unwrap();
            let back = exp_map(&v, &xi).unwrap();
            assert_relative_eq!(back, w, epsilon = 1e-12);
            // and the reverse composition
            let w2 = exp_map(&v, &xi).unwrap();
            let xi2 = log_map(&v, &w2).unwrap();
            assert_relative_eq!(xi2, xi, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_output_is_tangent_with_geodesic_norm() {
        let mut rng = seeded_rng(22);
        for _ in 0..100 {
            let v = random_unit::<f64>(5, &mut rng);
            let w = random_unit::<f64>(5, &mut rng);
            let xi = log_map(&v, &w).unwrap();
            assert!(v.dot(&xi).abs() < 1e-12);
            let theta = v.dot(&w).clamp(-1.0, 1.0).acos();
            assert_relative_eq!(xi.norm(), theta, epsilon = 1e-12);
            assert_relative_eq!(
                geodesic_distance(&v, &w).unwrap(),
                theta,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn exp_stays_on_sphere() {
        let mut rng = seeded_rng(23);
        for _ in 0..100 {
            let v = random_unit::<f64>(7, &mut rng);
            let raw = C::from_fn(7, |_, _| f64::std_normal(&mut rng));
            let xi = project_tangent(&v, &raw).unwrap();
            let w = exp_map(&v, &xi).unwrap();
            assert_relative_eq!(w.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn antipodal_is_rejected() {
        let v = e(0, 3);
        let err = log_map(&v, &(-&v)).unwrap_err();
        assert!(matches!(err, SofariError::AntipodalPoint));
    }

    #[test]
    fn non_unit_base_is_rejected() {
        let v = e(0, 3) * 2.0;
        assert!(exp_map(&v, &C::zeros(3)).is_err());
        assert!(log_map(&v, &e(1, 3)).is_err());
    }

    #[test]
    fn non_tangent_exp_is_rejected() {
        let v = e(0, 3);
        // radial component makes it non-tangent
        let err = exp_map(&v, &(e(0, 3) * 0.5)).unwrap_err();
        assert!(matches!(err, SofariError::ConstraintViolation(_)));
    }

    #[test]
    fn retract_first_order_agreement() {
        let mut rng = seeded_rng(24);
        for _ in 0..50 {
            let v = random_unit::<f64>(5, &mut rng);
            let raw = C::from_fn(5, |_, _| f64::std_normal(&mut rng));
            let mut xi = project_tangent(&v, &raw).unwrap();
            xi *= 1e-4 / xi.norm();
            let a = exp_map(&v, &xi).unwrap();
            let b = retract(&v, &xi).unwrap();
            assert!((a - b).norm() < 1e-8, "retraction deviates at first order");
        }
    }

    #[test]
    fn projection_is_idempotent_and_tangent() {
        let mut rng = seeded_rng(25);
        for _ in 0..50 {
            let v = random_unit::<f64>(6, &mut rng);
            let raw = C::from_fn(6, |_, _| f64::std_normal(&mut rng));
            let p1 = project_tangent(&v, &raw).unwrap();
            let p2 = project_tangent(&v, &p1).unwrap();
            assert_relative_eq!(p1, p2, epsilon = 1e-13);
            assert!(v.dot(&p1).abs() < 1e-12);
        }
    }
}

//! Axis-angle rotations: the exponential map, its derivative and its inverse.
//!
//! `R(ω) = I + a(θ)·[ω]× + b(θ)·[ω]×²` with `θ = |ω|`, `a = sin θ / θ` and
//! `b = (1 − cos θ) / θ²`. Both coefficients are replaced by their Taylor
//! series close to the origin so value and Jacobian stay smooth at `ω = 0`.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::{Error, Mat3, Result, Vec3};

/// Below this norm the value coefficients use their second-order series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this norm the derivative coefficients use their series.
const SMALL_ANGLE_DERIV: f64 = 1e-3;

/// 9x3 Jacobian of the row-major flattened rotation matrix.
pub type RotationJacobian = SMatrix<f64, 9, 3>;

/// `[v]×` such that `[v]× u = v × u`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Mat3) -> Vec3 {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn check_finite(w: &Vec3) -> Result<()> {
    if w.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "non-finite axis-angle ({}, {}, {})",
            w.x, w.y, w.z
        )))
    }
}

/// `(sin θ / θ, (1 − cos θ) / θ²)`.
fn value_coeffs(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / (theta * theta))
    }
}

/// `(a'(θ)/θ, b'(θ)/θ)`.
fn deriv_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE_DERIV {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rodrigues' formula. Fails only on non-finite input.
pub fn rodrigues(axis_angle: &Vec3) -> Result<Mat3> {
    check_finite(axis_angle)?;
    Ok(rodrigues_unchecked(axis_angle))
}

pub(crate) fn rodrigues_unchecked(w: &Vec3) -> Mat3 {
    let (a, b) = value_coeffs(w.norm());
    let k = skew(w);
    Mat3::identity() + k * a + k * k * b
}

/// Derivative of the row-major flattened rotation with respect to the
/// three axis-angle components. Row `3r + c` holds `∂R[r,c]/∂ω`.
pub fn rodrigues_jacobian(axis_angle: &Vec3) -> Result<RotationJacobian> {
    check_finite(axis_angle)?;
    Ok(rodrigues_with_jacobian(axis_angle).1)
}

/// Rotation matrix together with its 9x3 Jacobian.
pub(crate) fn rodrigues_with_jacobian(w: &Vec3) -> (Mat3, RotationJacobian) {
    let theta = w.norm();
    let (a, b) = value_coeffs(theta);
    let (c, d) = deriv_coeffs(theta);
    let k = skew(w);
    let k2 = k * k;
    let r = Mat3::identity() + k * a + k2 * b;
    let mut jac = RotationJacobian::zeros();
    for axis in 0..3 {
        let ek = skew(&Vec3::ith(axis, 1.0));
        let d_r = ek * a + (ek * k + k * ek) * b + (k * c + k2 * d) * w[axis];
        for row in 0..3 {
            for col in 0..3 {
                jac[(3 * row + col, axis)] = d_r[(row, col)];
            }
        }
    }
    (r, jac)
}

/// Contracts a 3x3 upstream gradient with a rotation Jacobian.
pub fn pullback(jac: &RotationJacobian, grad_r: &Mat3) -> Vec3 {
    let mut out = Vec3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            let g = grad_r[(row, col)];
            if g != 0.0 {
                for axis in 0..3 {
                    out[axis] += jac[(3 * row + col, axis)] * g;
                }
            }
        }
    }
    out
}

/// Inverse of [`rodrigues`]: returns the axis-angle with norm in `[0, π]`.
pub fn log_map(r: &Mat3) -> Vec3 {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let asym = vee(&(r - r.transpose())) * 0.5;
    if theta < 1e-6 {
        // sin θ ≈ θ, so the antisymmetric part is already the axis-angle.
        return asym;
    }
    if theta < std::f64::consts::PI - 1e-4 {
        return asym * (theta / theta.sin());
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part `(R + I) / 2 ≈ n nᵀ`.
    let sym = (r + Mat3::identity()) * 0.5;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3 = sym.column(best).into();
    axis /= axis.norm();
    // Fix the sign with the (tiny) antisymmetric part when it is informative.
    if axis.dot(&asym) < 0.0 {
        axis = -axis;
    }
    let sin_theta = asym.norm();
    let theta = sin_theta.atan2(cos_theta);
    axis * theta
}

/// Wraps the rotation angle of an axis-angle into `[0, π]` while keeping the
/// represented rotation.
pub fn canonicalize(w: &Vec3) -> Vec3 {
    let theta = w.norm();
    if theta <= std::f64::consts::PI {
        return *w;
    }
    let tau = std::f64::consts::TAU;
    let wrapped = theta - tau * ((theta + std::f64::consts::PI) / tau).floor();
    // wrapped ∈ [−π, π); a negative angle flips the axis.
    *w * (wrapped / theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn fd_jacobian(w: &Vec3, h: f64) -> RotationJacobian {
        let mut jac = RotationJacobian::zeros();
        for axis in 0..3 {
            let mut wp = *w;
            let mut wm = *w;
            wp[axis] += h;
            wm[axis] -= h;
            let d = (rodrigues_unchecked(&wp) - rodrigues_unchecked(&wm)) / (2.0 * h);
            for row in 0..3 {
                for col in 0..3 {
                    jac[(3 * row + col, axis)] = d[(row, col)];
                }
            }
        }
        jac
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues(&Vec3::zeros()).unwrap(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&Vec3::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-15);
    }

    #[test]
    fn trace_identity_for_fixed_angle() {
        let axis = Vec3::new(0.3, -0.8, 0.52).normalize();
        let r = rodrigues(&(axis * 0.7)).unwrap();
        assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
        assert!((r.trace() - (1.0 + 2.0 * 0.7f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(rodrigues(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(rodrigues_jacobian(&Vec3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn jacobian_at_origin_is_generator() {
        let jac = rodrigues_jacobian(&Vec3::zeros()).unwrap();
        for axis in 0..3 {
            let gen = skew(&Vec3::ith(axis, 1.0));
            for row in 0..3 {
                for col in 0..3 {
                    assert_eq!(jac[(3 * row + col, axis)], gen[(row, col)]);
                }
            }
        }
    }

    #[test]
    fn jacobian_along_z_at_quarter_turn() {
        let phi = FRAC_PI_2;
        let jac = rodrigues_jacobian(&Vec3::new(0.0, 0.0, phi)).unwrap();
        // d/dφ of [[cos, −sin, 0], [sin, cos, 0], [0, 0, 1]]
        let expected = [-phi.sin(), -phi.cos(), 0.0, phi.cos(), -phi.sin(), 0.0, 0.0, 0.0, 0.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((jac[(i, 2)] - e).abs() < 1e-14, "entry {i}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_across_scales() {
        for w in [
            Vec3::new(0.3, -0.2, 0.9),
            Vec3::new(1e-4, 2e-4, -3e-4),
            Vec3::new(2e-9, -1e-9, 0.0),
            Vec3::new(2.9, 0.4, -1.0),
        ] {
            let analytic = rodrigues_jacobian(&w).unwrap();
            let numeric = fd_jacobian(&w, 1e-5);
            assert!((analytic - numeric).abs().max() < 1e-9, "at {w:?}");
        }
    }

    #[test]
    fn log_inverts_exp() {
        for w in [
            Vec3::new(0.1, 0.2, -0.3),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(PI - 1e-6, 0.0, 0.0),
            Vec3::new(0.0, 3.0, 0.5),
            Vec3::new(1e-9, 0.0, 0.0),
        ] {
            let back = log_map(&rodrigues_unchecked(&w));
            let diff = rodrigues_unchecked(&back) - rodrigues_unchecked(&w);
            assert!(diff.abs().max() < 1e-9, "{w:?} -> {back:?}");
            assert!(back.norm() <= PI + 1e-12);
        }
    }

    #[test]
    fn canonicalize_keeps_rotation() {
        for w in [Vec3::new(4.0, 0.0, 0.0), Vec3::new(-3.0, 5.0, 1.0), Vec3::new(0.1, 0.1, 0.1)] {
            let c = canonicalize(&w);
            assert!(c.norm() <= PI + 1e-12);
            let diff = rodrigues_unchecked(&c) - rodrigues_unchecked(&w);
            assert!(diff.abs().max() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn always_a_proper_rotation(x in -20.0..20.0f64, y in -20.0..20.0f64, z in -20.0..20.0f64) {
                let r = rodrigues(&Vec3::new(x, y, z)).unwrap();
                let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
                prop_assert!(ortho < 1e-12);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn jacobian_close_to_central_differences(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
                let w = Vec3::new(x, y, z);
                let analytic = rodrigues_jacobian(&w).unwrap();
                let numeric = fd_jacobian(&w, 1e-5);
                for (a, n) in analytic.iter().zip(numeric.iter()) {
                    let scale = a.abs().max(n.abs()).max(1e-3);
                    prop_assert!((a - n).abs() / scale < 1e-5);
                }
            }
        }
    }
}

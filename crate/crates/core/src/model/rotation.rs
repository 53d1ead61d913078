use crate::autodiff::Real;
use crate::error::{HamrError, Result};
use crate::math::{mat_identity, M3, V3};

/// Below this angle the Taylor expansion replaces sin/cos ratios.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotation matrix of an axis-angle (Rodrigues) vector.
pub fn rodrigues(axis_angle: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    if axis_angle.iter().any(|c| !c.is_finite()) {
        return Err(HamrError::invalid(format!("non-finite axis-angle {axis_angle:?}")));
    }
    Ok(rodrigues_generic(&axis_angle))
}

/// `R = I + a [w]x + b [w]x^2` with `a = sin t / t`, `b = (1 - cos t) / t^2`.
pub(crate) fn rodrigues_generic<T: Real>(w: &V3<T>) -> M3<T> {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if t2.re() < SMALL_ANGLE * SMALL_ANGLE {
        (T::cst(1.0) - t2 / 6.0, T::cst(0.5) - t2 / 24.0)
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (T::cst(1.0) - t.cos()) / t2)
    };
    let k = [
        [T::zero(), -w[2], w[1]],
        [w[2], T::zero(), -w[0]],
        [-w[1], w[0], T::zero()],
    ];
    let mut r = mat_identity::<T>();
    for i in 0..3 {
        for j in 0..3 {
            let k2 = k[i][0] * k[0][j] + k[i][1] * k[1][j] + k[i][2] * k[2][j];
            r[i][j] += a * k[i][j] + b * k2;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;

    use super::*;
    use crate::math::{det, mat_mul, mat_vec, transpose};

    fn close(a: &M3<f64>, b: &M3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues([0.0; 3]).unwrap(), mat_identity::<f64>());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, FRAC_PI_2]).unwrap();
        let p = mat_vec(&r, &[1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn half_turn_about_x() {
        let r = rodrigues([PI, 0.0, 0.0]).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(close(&r, &expect, 1e-12), "{r:?}");
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(rodrigues([f64::NAN, 0.0, 0.0]).is_err());
        assert!(rodrigues([0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn taylor_branch_is_continuous() {
        let w = [3e-9, -2e-9, 4e-9];
        let small = rodrigues(w).unwrap();
        let s = 1.0 + 1e-7;
        let above = rodrigues([w[0] * s * 3.0, w[1] * s * 3.0, w[2] * s * 3.0]).unwrap();
        // both sides agree with the expansion I + [w]x + [w]x^2 / 2
        assert!((small[1][0] - (w[2] + 0.5 * w[0] * w[1])).abs() < 1e-24);
        assert!((above[1][0] - 3.0 * s * w[2]).abs() < 1e-16);
    }

    proptest! {
        #[test]
        fn output_is_a_proper_rotation(x in -6.0f64..6.0, y in -6.0f64..6.0, z in -6.0f64..6.0) {
            let r = rodrigues([x, y, z]).unwrap();
            let rtr = mat_mul(&transpose(&r), &r);
            prop_assert!(close(&rtr, &mat_identity(), 1e-12));
            prop_assert!((det(&r) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn axis_is_fixed(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let r = rodrigues([x, y, z]).unwrap();
            let p = mat_vec(&r, &[x, y, z]);
            prop_assert!((p[0] - x).abs() < 1e-12 && (p[1] - y).abs() < 1e-12 && (p[2] - z).abs() < 1e-12);
        }
    }
}

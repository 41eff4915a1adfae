//! Gaze-angle geometry: the pitch/yaw to unit-vector convention and the
//! angular error metric in degrees.

use crate::error::StageError;

/// (pitch, yaw) -> unit vector with negative-z forward:
/// g = (-cos p * sin y, -sin p, -cos p * cos y).
pub fn pitch_yaw_to_vec(pitch: f64, yaw: f64) -> [f64; 3] {
    [-pitch.cos() * yaw.sin(), -pitch.sin(), -pitch.cos() * yaw.cos()]
}

/// Analytic inverse for |pitch| < pi/2.
pub fn vec_to_pitch_yaw(g: &[f64; 3]) -> (f64, f64) {
    ((-g[1]).asin(), (-g[0]).atan2(-g[2]))
}

const ARCCOS_EPS: f64 = 1e-7;

/// (180/pi) * arccos(g.ghat / (|g||ghat|)) with the clamped arccos.
pub fn angular_error_deg(g: &[f64; 3], ghat: &[f64; 3]) -> Result<f64, StageError> {
    let ng = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let nh = (ghat[0] * ghat[0] + ghat[1] * ghat[1] + ghat[2] * ghat[2]).sqrt();
    if ng < 1e-12 || nh < 1e-12 {
        return Err(StageError::Numeric("angular error of a zero-norm vector".into()));
    }
    let cos = (g[0] * ghat[0] + g[1] * ghat[1] + g[2] * ghat[2]) / (ng * nh);
    Ok(cos.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos().to_degrees())
}

/// Angular error between two (pitch, yaw) pairs, in degrees.
pub fn angular_error_angles_deg(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let g = pitch_yaw_to_vec(a[0], a[1]);
    let h = pitch_yaw_to_vec(b[0], b[1]);
    angular_error_deg(&g, &h).expect("constructed unit vectors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn conversion_anchors() {
        let g = pitch_yaw_to_vec(0.0, 0.0);
        assert_relative_eq!(g[0], 0.0);
        assert_relative_eq!(g[1], 0.0);
        assert_relative_eq!(g[2], -1.0);
        let g = pitch_yaw_to_vec(FRAC_PI_2, 0.0);
        assert!(g[1] + 1.0 < 1e-12 && g[0].abs() < 1e-12);
        let g = pitch_yaw_to_vec(0.0, FRAC_PI_2);
        assert_relative_eq!(g[0], -1.0);
    }

    #[test]
    fn metric_basics() {
        // the clamp floor at exact equality is acos(1 - 1e-7) ~ 0.026 deg
        let a = pitch_yaw_to_vec(0.1, -0.4);
        assert!(angular_error_deg(&a, &a).unwrap() < 0.05);
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        assert_relative_eq!(angular_error_deg(&x, &y).unwrap(), 90.0, epsilon = 1e-4);
        assert!(angular_error_deg(&[0.0; 3], &x).is_err());
    }

    #[test]
    fn small_yaw_offset_in_degrees() {
        let e = angular_error_angles_deg(&[0.0, 0.0], &[0.0, 0.2]);
        assert_relative_eq!(e, 0.2_f64.to_degrees(), epsilon = 1e-4);
        assert!((e - 11.459).abs() < 1e-2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn symmetry_and_triangle(
            p1 in -1.2f64..1.2, y1 in -3.0f64..3.0,
            p2 in -1.2f64..1.2, y2 in -3.0f64..3.0,
            p3 in -1.2f64..1.2, y3 in -3.0f64..3.0,
        ) {
            let a = pitch_yaw_to_vec(p1, y1);
            let b = pitch_yaw_to_vec(p2, y2);
            let c = pitch_yaw_to_vec(p3, y3);
            let ab = angular_error_deg(&a, &b).unwrap();
            let ba = angular_error_deg(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let ac = angular_error_deg(&a, &c).unwrap();
            let bc = angular_error_deg(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
        }

        #[test]
        fn round_trip_recovers_angles(p in -1.5697f64..1.5697, y in -3.1f64..3.1) {
            let g = pitch_yaw_to_vec(p, y);
            let n: f64 = g.iter().map(|v| v * v).sum::<f64>();
            prop_assert!((n.sqrt() - 1.0).abs() < 1e-9);
            let (p2, y2) = vec_to_pitch_yaw(&g);
            prop_assert!((p - p2).abs() < 1e-9);
            prop_assert!((y - y2).abs() < 1e-9);
        }
    }
}

//! Rotation parameterizations: exponential map (axis times angle) and
//! Euler angles in any of the six Tait-Bryan orders.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::KinematicsError;
use crate::bvh::Axis;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula. Total over finite inputs.
pub fn expmap_to_rotation(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    // sin(t)/t and (1 - cos(t))/t^2, with series near zero
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`expmap_to_rotation`] on the canonical branch (norm at most pi).
pub fn rotation_to_expmap(r: &Matrix3<f64>) -> Result<Vector3<f64>, KinematicsError> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(ortho <= 1e-4 && (det - 1.0).abs() <= 1e-4) {
        return Err(KinematicsError::NotARotation { ortho, det });
    }
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * w.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta < 1e-6 {
        return Ok(0.5 * w);
    }
    if theta < PI - 1e-3 {
        return Ok(w * (theta / (2.0 * sin)));
    }
    // Near pi the antisymmetric part vanishes; the axis is read off the
    // symmetric part (R + R^T)/2 - cos I = (1 - cos) n n^T.
    let s = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let mut best = 0;
    for i in 1..3 {
        if s[(i, i)] > s[(best, best)] {
            best = i;
        }
    }
    let mut n: Vector3<f64> = s.column(best).into();
    n /= n.norm();
    if n.dot(&w) < 0.0 {
        n = -n;
    }
    Ok(n * theta)
}

pub fn axis_rotation(axis: Axis, radians: f64) -> Matrix3<f64> {
    let (s, c) = radians.sin_cos();
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Intrinsic rotation applied in declared order: `R = R_a0 * R_a1 * R_a2`.
pub fn euler_to_matrix(order: [Axis; 3], degrees: [f64; 3]) -> Matrix3<f64> {
    order
        .iter()
        .zip(degrees)
        .fold(Matrix3::identity(), |acc, (&axis, d)| {
            acc * axis_rotation(axis, d.to_radians())
        })
}

/// Decomposes `r` into Euler angles (degrees) for the given order.
pub fn matrix_to_euler(order: [Axis; 3], r: &Matrix3<f64>) -> [f64; 3] {
    let (i, j, k) = (order[0].index(), order[1].index(), order[2].index());
    // +1 for cyclic orders (XYZ, YZX, ZXY), -1 otherwise
    let parity = if (j + 3 - i) % 3 == 1 { 1.0 } else { -1.0 };
    let sin_b = (parity * r[(i, k)]).clamp(-1.0, 1.0);
    let b = sin_b.asin();
    let (a, c) = if sin_b.abs() < 1.0 - 1e-9 {
        (
            (-parity * r[(j, k)]).atan2(r[(k, k)]),
            (-parity * r[(i, j)]).atan2(r[(i, i)]),
        )
    } else {
        // gimbal lock: only a +/- c is determined, put it all in a
        ((parity * r[(k, j)]).atan2(r[(j, j)]), 0.0)
    };
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

/// Rotation about the vertical (y) axis.
pub fn heading_rotation(heading: f64) -> Matrix3<f64> {
    axis_rotation(Axis::Y, heading)
}

/// Heading of a rotation: yaw of its forward (+z) axis projected onto the
/// ground plane.
pub fn heading_of(r: &Matrix3<f64>) -> f64 {
    let f = r * Vector3::z();
    f.x.atan2(f.z)
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ORDERS: [[Axis; 3]; 6] = [
        [Axis::X, Axis::Y, Axis::Z],
        [Axis::X, Axis::Z, Axis::Y],
        [Axis::Y, Axis::X, Axis::Z],
        [Axis::Y, Axis::Z, Axis::X],
        [Axis::Z, Axis::X, Axis::Y],
        [Axis::Z, Axis::Y, Axis::X],
    ];

    fn random_axis_angle(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let axis = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        axis * rng.random_range(0.0..PI)
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(expmap_to_rotation(&Vector3::zeros()), Matrix3::identity());
        assert_eq!(rotation_to_expmap(&Matrix3::identity()).unwrap(), Vector3::zeros());
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = expmap_to_rotation(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let y = r * Vector3::y();
        assert!((y - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn matches_quaternion_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let v = random_axis_angle(&mut rng) * 1.3;
            let r = expmap_to_rotation(&v);
            // q = (cos |v|/2, sin |v|/2 * v/|v|)
            let q = UnitQuaternion::from_scaled_axis(v);
            let rq = q.to_rotation_matrix().into_inner();
            assert!((r - rq).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-6);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let v = random_axis_angle(&mut rng);
            let back = rotation_to_expmap(&expmap_to_rotation(&v)).unwrap();
            assert!(back.norm() <= PI + 1e-12);
            worst = worst.max((back - v).norm());
        }
        assert!(worst < 1e-5, "worst {worst}");
    }

    #[test]
    fn angle_pi_branch() {
        for v in [
            Vector3::new(0.0, 0.0, PI),
            Vector3::new(0.0, PI, 0.0),
            Vector3::new(PI, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0).normalize() * PI,
            Vector3::new(1.0, -2.0, 0.5).normalize() * (PI - 1e-4),
        ] {
            let r = expmap_to_rotation(&v);
            let back = rotation_to_expmap(&r).unwrap();
            assert!(back.norm() <= PI + 1e-9);
            assert!((expmap_to_rotation(&back) - r).abs().max() < 1e-5);
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::identity() * 2.0;
        assert!(rotation_to_expmap(&m).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(rotation_to_expmap(&reflection).is_err());
    }

    #[test]
    fn euler_round_trip_all_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for order in ORDERS {
            for _ in 0..200 {
                let angles = [
                    rng.random_range(-179.0..179.0),
                    rng.random_range(-89.0..89.0),
                    rng.random_range(-179.0..179.0),
                ];
                let r = euler_to_matrix(order, angles);
                let back = matrix_to_euler(order, &r);
                let r2 = euler_to_matrix(order, back);
                assert!((r - r2).abs().max() < 1e-9, "{order:?} {angles:?} {back:?}");
            }
            // gimbal lock
            for pitch in [90.0, -90.0] {
                let r = euler_to_matrix(order, [30.0, pitch, 10.0]);
                let r2 = euler_to_matrix(order, matrix_to_euler(order, &r));
                assert!((r - r2).abs().max() < 1e-6, "{order:?} {pitch}");
            }
        }
    }

    #[test]
    fn heading_extraction() {
        for h in [-3.0, -1.0, 0.0, 0.5, 2.9] {
            let tilt = axis_rotation(Axis::X, 0.3);
            assert!((heading_of(&(heading_rotation(h) * tilt)) - h).abs() < 1e-12);
        }
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}

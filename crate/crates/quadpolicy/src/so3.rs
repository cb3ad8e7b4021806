//! SO(3) helpers: exponential and logarithm maps, skew operator and
//! re-orthonormalization for rotation matrices integrated over long runs.

use nalgebra::{Matrix3, Vector3};

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula: rotation matrix for the axis-angle vector `v`.
pub fn exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = hat(v);
    if theta2 < 1e-16 {
        // Second-order Taylor expansion; exact enough below the threshold.
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * (k * k)
}

/// Euler vector (axis times angle) of a rotation matrix.
///
/// At angle exactly pi the axis sign is ambiguous; the tie-break is
/// deterministic: the axis is taken from the column of `R + I` selected by
/// the largest-magnitude diagonal element, with the sign fixed so that the
/// largest-magnitude axis component is positive.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // vee(R - R^T) / 2 == sin(theta) * axis
    let w = Vector3::new(
        (r[(2, 1)] - r[(1, 2)]) * 0.5,
        (r[(0, 2)] - r[(2, 0)]) * 0.5,
        (r[(1, 0)] - r[(0, 1)]) * 0.5,
    );
    if cos_theta > 1.0 - 1e-10 {
        // theta ~ 0: w is already theta*axis to third order.
        return w;
    }
    if cos_theta < -1.0 + 1e-8 {
        // theta ~ pi: recover the axis from R + I, which equals
        // 2*(1 - cos)/2 ... a a^T scaled; its largest diagonal picks the
        // best-conditioned column.
        let s = r + Matrix3::identity();
        let k = (0..3)
            .max_by(|&a, &b| s[(a, a)].partial_cmp(&s[(b, b)]).unwrap())
            .unwrap();
        let col = s.column(k);
        let mut axis = Vector3::new(col[0], col[1], col[2]);
        axis /= axis.norm();
        let sin_theta = w.norm();
        let theta = std::f64::consts::PI - sin_theta.clamp(-1.0, 1.0).asin();
        if sin_theta > 1e-12 {
            if axis.dot(&w) < 0.0 {
                axis = -axis;
            }
        } else {
            let imax = (0..3)
                .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap())
                .unwrap();
            if axis[imax] < 0.0 {
                axis = -axis;
            }
        }
        return theta * axis;
    }
    let theta = cos_theta.acos();
    (theta / theta.sin()) * w
}

/// Max-norm deviation of `R^T R` from the identity.
pub fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Project a near-rotation matrix back onto SO(3) by Gram-Schmidt on the
/// columns (x kept, y straightened, z = x cross y).
pub fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.column(0).into_owned().normalize();
    let mut y = r.column(1).into_owned();
    y -= x * x.dot(&y);
    let y = y.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

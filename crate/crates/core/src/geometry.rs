//! Small fixed-size vector and rotation helpers generic over [`Scalar`].
//!
//! Matrices are row-major `[[T; 3]; 3]`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::autodiff::Scalar;

pub type V3<T> = [T; 3];
pub type M3<T> = [[T; 3]; 3];

#[inline]
pub fn v3c<T: Scalar>(v: [f64; 3]) -> V3<T> {
    [T::cst(v[0]), T::cst(v[1]), T::cst(v[2])]
}

#[inline]
pub fn vals(v: &V3<impl Scalar>) -> [f64; 3] {
    [v[0].value(), v[1].value(), v[2].value()]
}

#[inline]
pub fn add<T: Scalar>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: &V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn scale_f<T: Scalar>(a: &V3<T>, s: f64) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Scalar>(a: &V3<T>, b: &V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &V3<T>) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Scalar>(a: &V3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn mat_vec<T: Scalar>(m: &M3<T>, v: &V3<T>) -> V3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Scalar>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(m: &M3<T>) -> M3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn m3c<T: Scalar>(m: &[[f64; 3]; 3]) -> M3<T> {
    [v3c(m[0]), v3c(m[1]), v3c(m[2])]
}

pub fn m3_vals<T: Scalar>(m: &M3<T>) -> [[f64; 3]; 3] {
    [vals(&m[0]), vals(&m[1]), vals(&m[2])]
}

pub fn identity<T: Scalar>() -> M3<T> {
    let (o, z) = (T::cst(1.0), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation by `angle` about the unit `axis` (Rodrigues).
pub fn axis_angle<T: Scalar>(axis: [f64; 3], angle: T) -> M3<T> {
    let (s, c) = (angle.sin(), angle.cos());
    let t = T::cst(1.0) - c;
    let [x, y, z] = axis;
    [
        [t * (x * x) + c, t * (x * y) - s * z, t * (x * z) + s * y],
        [t * (x * y) + s * z, t * (y * y) + c, t * (y * z) - s * x],
        [t * (x * z) - s * y, t * (y * z) + s * x, t * (z * z) + c],
    ]
}

/// Intrinsic X-Y-Z Euler angles: `R = Rx(a) · Ry(b) · Rz(c)`.
pub fn euler_xyz<T: Scalar>(a: T, b: T, c: T) -> M3<T> {
    let rx = axis_angle([1.0, 0.0, 0.0], a);
    let ry = axis_angle([0.0, 1.0, 0.0], b);
    let rz = axis_angle([0.0, 0.0, 1.0], c);
    mat_mul(&mat_mul(&rx, &ry), &rz)
}

/// Inverse of [`euler_xyz`] for `f64` matrices; returns `(a, b, c)` in radians.
pub fn euler_xyz_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 3] {
    // R = Rx(a)Ry(b)Rz(c): R[0][2] = sin b, R[0][0] = cos b cos c,
    // R[0][1] = -cos b sin c, R[1][2] = -sin a cos b, R[2][2] = cos a cos b
    let sb = m[0][2].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-m[1][2]).atan2(m[2][2]);
        let c = (-m[0][1]).atan2(m[0][0]);
        [a, b, c]
    } else {
        // gimbal lock: fold c into a
        let a = m[2][1].atan2(m[1][1]);
        [a, b, 0.0]
    }
}

pub fn to_na(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    )
}

pub fn from_na(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub fn vec_na(v: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let rel = to_na(a).transpose() * to_na(b);
    let c = (rel.trace() - 1.0) * 0.5;
    let s = 0.5
        * Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

/// Unit quaternion `[w, x, y, z]` of a rotation matrix.
pub fn quaternion(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let rot = Rotation3::from_matrix_unchecked(to_na(m));
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    [q.w, q.i, q.j, q.k]
}

pub fn from_quaternion(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    from_na(uq.to_rotation_matrix().matrix())
}

/// Checks `R Rᵀ = I` within `tol` and `det R = +1`.
pub fn is_rotation(m: &[[f64; 3]; 3], tol: f64) -> bool {
    let r = to_na(m);
    (r * r.transpose() - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
}

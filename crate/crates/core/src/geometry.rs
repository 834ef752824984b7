//! Small fixed-size 3D helpers: row-major 3×3 matrices and random rotations.

use rand::Rng;
use rand_distr::StandardNormal;

pub type Vec3 = [f64; 3];
/// Row-major: `m[row][col]`.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&a[0], v), dot(&a[1], v), dot(&a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    dot(&a[0], &cross(&a[1], &a[2]))
}

pub fn column(a: &Mat3, j: usize) -> Vec3 {
    [a[0][j], a[1][j], a[2][j]]
}

pub fn from_columns(c0: &Vec3, c1: &Vec3, c2: &Vec3) -> Mat3 {
    [
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ]
}

/// Frobenius norm of `a - b`.
pub fn frobenius_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

/// `‖AᵀA − I‖_F`
pub fn orthogonality_error(a: &Mat3) -> f64 {
    frobenius_diff(&mat_mul(&transpose(a), a), &IDENTITY)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Haar-random proper rotation: QR of a Gaussian matrix with the sign of
/// R's diagonal folded into Q, then a column flip if det(Q) = −1.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let mut cols = [[0.0; 3]; 3];
        for c in cols.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        // Modified Gram-Schmidt; r_jj > 0 by construction, which is the
        // sign convention that makes Q Haar-distributed.
        let mut q = [[0.0; 3]; 3];
        let mut ok = true;
        for j in 0..3 {
            let mut v = cols[j];
            for qk in q.iter().take(j) {
                let r = dot(qk, &v);
                for d in 0..3 {
                    v[d] -= r * qk[d];
                }
            }
            let n = norm(&v);
            if n < 1e-8 {
                ok = false;
                break;
            }
            q[j] = [v[0] / n, v[1] / n, v[2] / n];
        }
        if !ok {
            continue;
        }
        let mut m = from_columns(&q[0], &q[1], &q[2]);
        if det(&m) < 0.0 {
            for row in m.iter_mut() {
                row[2] = -row[2];
            }
        }
        return m;
    }
}

/// Applies `r` to every point.
pub fn rotate_points(r: &Mat3, pts: &[Vec3]) -> Vec<Vec3> {
    pts.iter().map(|p| mat_vec(r, p)).collect()
}

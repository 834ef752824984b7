//! Per-molecule local frames from the eigenbasis of the coordinate covariance.

use serde::{Deserialize, Serialize};

use crate::autodiff::ExactSum;
use crate::error::{Error, Result};
use crate::geometry::{cross, det, dot, from_columns, norm, Mat3, Vec3, IDENTITY};

/// Relative eigenvalue gap below which eigenvectors are not trusted.
pub const DEGENERATE_GAP: f64 = 1e-8;
const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 30;

/// How the sign of each principal axis is fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameMode {
    /// Signs as returned by the eigensolver; third axis flipped if det = −1.
    /// Not rotation-equivariant.
    Standard,
    /// Among the four right-handed sign assignments, the one maximizing the
    /// summed cubed point coordinates in the frame. Rotation-equivariant
    /// whenever the choice is unambiguous.
    #[default]
    Strict,
    /// Among the four right-handed sign assignments, the one maximizing the
    /// sum of the basis matrix entries. Deterministic but depends on the
    /// ambient orientation, so not rotation-equivariant.
    EntrySum,
}

/// Right-handed orthonormal basis; columns are the principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub basis: Mat3,
    /// Descending covariance eigenvalues.
    pub eigenvalues: [f64; 3],
}

/// How close a frame is to an ambiguous construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameDiagnostics {
    /// Smallest eigenvalue gap, relative to the largest eigenvalue.
    pub min_relative_gap: f64,
    /// Score margin between the selected sign assignment and the runner-up,
    /// relative to the score scale. Zero in standard mode.
    pub sign_margin: f64,
}

/// `(1/N) Σ x xᵀ` with correctly rounded sums.
pub fn covariance(coords: &[Vec3]) -> Mat3 {
    let n = coords.len().max(1) as f64;
    let mut c = [[0.0; 3]; 3];
    let mut acc = ExactSum::new();
    for i in 0..3 {
        for j in i..3 {
            acc.clear();
            for p in coords {
                acc.add(p[i] * p[j]);
            }
            c[i][j] = acc.value() / n;
            c[j][i] = c[i][j];
        }
    }
    c
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and eigenvectors as the matching
/// columns. Equal eigenvalues are ordered by their eigenvectors,
/// lexicographically descending.
pub fn eig_sym3(c: &Mat3) -> Result<([f64; 3], Mat3)> {
    let scale = c.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..3 {
        for j in i + 1..3 {
            if (c[i][j] - c[j][i]).abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::Contract(format!(
                    "eig_sym3: matrix not symmetric at ({i},{j}): {} vs {}",
                    c[i][j], c[j][i]
                )));
            }
        }
    }
    let mut a = *c;
    for i in 0..3 {
        for j in i + 1..3 {
            let m = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = m;
            a[j][i] = m;
        }
    }
    let mut v = IDENTITY;
    let frob = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2)).sqrt();
        if off <= JACOBI_TOL * frob {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let cs = 1.0 / (t * t + 1.0).sqrt();
            let sn = t * cs;
            // A <- Jᵀ A J with J the (p,q) Givens rotation.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = cs * akp - sn * akq;
                a[k][q] = sn * akp + cs * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = cs * apk - sn * aqk;
                a[q][k] = sn * apk + cs * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = cs * vp - sn * vq;
                row[q] = sn * vp + cs * vq;
            }
        }
    }
    let mut pairs: Vec<(f64, Vec3)> = (0..3)
        .map(|k| (a[k][k], [v[0][k], v[1][k], v[2][k]]))
        .collect();
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_desc(&x.1, &y.1))
    });
    let vals = [pairs[0].0, pairs[1].0, pairs[2].0];
    Ok((vals, from_columns(&pairs[0].1, &pairs[1].1, &pairs[2].1)))
}

fn lex_desc(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.partial_cmp(x) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn columns(m: &Mat3) -> [Vec3; 3] {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

/// Keeps eigenvectors whose eigenvalue is separated from the others and
/// rebuilds the rest from the canonical axes by Gram-Schmidt.
fn complete_degenerate(vals: &[f64; 3], vecs: &Mat3) -> Mat3 {
    let scale = vals[0].abs().max(vals[2].abs());
    let tol = DEGENERATE_GAP * scale;
    let distinct = |k: usize| {
        scale > 0.0 && (0..3).filter(|&j| j != k).all(|j| (vals[k] - vals[j]).abs() >= tol)
    };
    let cols = columns(vecs);
    let mut basis: [Option<Vec3>; 3] = [None; 3];
    for k in 0..3 {
        if distinct(k) {
            basis[k] = Some(cols[k]);
        }
    }
    if basis.iter().all(Option::is_some) {
        return *vecs;
    }
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for k in 0..3 {
        if basis[k].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec3)> = None;
        for axis in &axes {
            let mut r = *axis;
            for b in basis.iter().flatten() {
                let d = dot(b, &r);
                for i in 0..3 {
                    r[i] -= d * b[i];
                }
            }
            let n = norm(&r);
            if best.map_or(true, |(bn, _)| n > bn) {
                best = Some((n, r));
            }
        }
        let (n, r) = best.unwrap();
        basis[k] = Some([r[0] / n, r[1] / n, r[2] / n]);
    }
    let b = basis.map(Option::unwrap);
    from_columns(&b[0], &b[1], &b[2])
}

fn with_signs(m: &Mat3, s: [f64; 3]) -> Mat3 {
    let mut out = *m;
    for row in out.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    out
}

/// Sign patterns that keep det(F·diag(s)) = +1 for a basis with `det_sign`.
fn proper_sign_patterns(det_sign: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(4);
    for bits in 0..8u8 {
        let s = [0, 1, 2].map(|k| if bits >> k & 1 == 1 { -1.0 } else { 1.0 });
        if s[0] * s[1] * s[2] == det_sign {
            out.push(s);
        }
    }
    out
}

fn flatten(m: &Mat3) -> [f64; 9] {
    let mut f = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            f[i * 3 + j] = m[i][j];
        }
    }
    f
}

/// Picks the highest-scoring sign pattern; exact ties go to the
/// lexicographically greatest flattened matrix. Returns the basis and the
/// margin over the runner-up.
fn select_signs(basis: &Mat3, score: impl Fn(&[f64; 3]) -> f64) -> (Mat3, f64) {
    let det_sign = if det(basis) < 0.0 { -1.0 } else { 1.0 };
    let mut cands: Vec<(f64, Mat3)> = proper_sign_patterns(det_sign)
        .into_iter()
        .map(|s| (score(&s), with_signs(basis, s)))
        .collect();
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_desc(&flatten(&a.1), &flatten(&b.1)))
    });
    (cands[0].1, cands[0].0 - cands[1].0)
}

/// Summed cubed coordinates of the points along each axis.
fn third_moments(basis: &Mat3, coords: &[Vec3]) -> ([f64; 3], f64) {
    let cols = columns(basis);
    let mut mu = [0.0; 3];
    let mut scale = 0.0;
    let mut acc = ExactSum::new();
    for k in 0..3 {
        acc.clear();
        for p in coords {
            let c = dot(&cols[k], p);
            acc.add(c * c * c);
            scale += (c * c * c).abs();
        }
        mu[k] = acc.value();
    }
    (mu, scale)
}

/// Builds the local frame of a centered point set.
pub fn construct_frame(coords: &[Vec3], mode: FrameMode) -> Frame {
    construct_frame_with_diagnostics(coords, mode).0
}

pub fn construct_frame_with_diagnostics(
    coords: &[Vec3],
    mode: FrameMode,
) -> (Frame, FrameDiagnostics) {
    let cov = covariance(coords);
    // The covariance is symmetric by construction.
    let (vals, vecs) = eig_sym3(&cov).expect("covariance is symmetric");
    let basis = complete_degenerate(&vals, &vecs);
    let top = vals[0].abs();
    let min_relative_gap = if top > 0.0 {
        ((vals[0] - vals[1]).min(vals[1] - vals[2])) / top
    } else {
        0.0
    };
    let (basis, sign_margin) = match mode {
        FrameMode::Standard => {
            let mut b = basis;
            if det(&b) < 0.0 {
                for row in b.iter_mut() {
                    row[2] = -row[2];
                }
            }
            (b, 0.0)
        }
        FrameMode::Strict => {
            let (mu, scale) = third_moments(&basis, coords);
            let (b, margin) = select_signs(&basis, |s| s[0] * mu[0] + s[1] * mu[1] + s[2] * mu[2]);
            (b, if scale > 0.0 { margin / scale } else { 0.0 })
        }
        FrameMode::EntrySum => {
            let cols = columns(&basis);
            let sums = cols.map(|c| c[0] + c[1] + c[2]);
            select_signs(&basis, |s| s[0] * sums[0] + s[1] * sums[1] + s[2] * sums[2])
        }
    };
    (
        Frame {
            basis,
            eigenvalues: vals,
        },
        FrameDiagnostics {
            min_relative_gap,
            sign_margin,
        },
    )
}

/// Whether a strict frame for these points is stable under rotation, i.e.
/// has separated eigenvalues and an unambiguous sign selection.
pub fn is_well_conditioned(diag: &FrameDiagnostics) -> bool {
    diag.min_relative_gap > 1e-6 && diag.sign_margin > 1e-6
}

/// Right-handedness helper used by callers that build bases by hand.
pub fn right_handed_from(a: &Vec3, b: &Vec3) -> Mat3 {
    let c = cross(a, b);
    from_columns(a, b, &c)
}

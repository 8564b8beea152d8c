//! Fixed-size 4x4 helpers. The mixtures live in the 4-D pairwise feature
//! space, so there is no need for a general matrix library.

pub type Vec4 = [f64; 4];
pub type Mat4 = [[f64; 4]; 4];

pub const DIM: usize = 4;

pub fn identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Lower Cholesky factor `L` with `L L^T = a`. `None` if `a` is not
/// numerically positive definite.
pub fn cholesky(a: &Mat4) -> Option<Mat4> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..DIM {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn forward_solve(l: &Mat4, b: &Vec4) -> Vec4 {
    let mut z = [0.0; 4];
    for i in 0..DIM {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    z
}

/// Inverse of a lower-triangular matrix (itself lower-triangular).
pub fn lower_inverse(l: &Mat4) -> Mat4 {
    let mut inv = [[0.0; 4]; 4];
    for c in 0..DIM {
        let mut e = [0.0; 4];
        e[c] = 1.0;
        let col = forward_solve(l, &e);
        for r in 0..DIM {
            inv[r][c] = col[r];
        }
    }
    inv
}

pub fn dot(a: &Vec4, b: &Vec4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn sub(a: &Vec4, b: &Vec4) -> Vec4 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

pub fn mat_vec(m: &Mat4, v: &Vec4) -> Vec4 {
    let mut out = [0.0; 4];
    for (o, row) in out.iter_mut().zip(m) {
        *o = dot(row, v);
    }
    out
}

pub fn is_symmetric(m: &Mat4, tol: f64) -> bool {
    (0..DIM).all(|i| (0..i).all(|j| (m[i][j] - m[j][i]).abs() <= tol))
}

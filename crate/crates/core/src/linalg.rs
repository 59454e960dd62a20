//! Fixed-size 2×2 and 4×4 helpers.

pub type M2 = [[f64; 2]; 2];
pub type M4 = [[f64; 4]; 4];

pub const I2: M2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn eye4() -> M4 {
    let mut m = [[0.0; 4]; 4];
    for (i, r) in m.iter_mut().enumerate() {
        r[i] = 1.0;
    }
    m
}

pub fn mul2(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn add2(a: &M2, b: &M2) -> M2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn mv2(a: &M2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

pub fn transpose2(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn det2(a: &M2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

pub fn inv2(a: &M2) -> Option<M2> {
    let d = det2(a);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some([[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]])
}

/// Singular values `(σ_max, σ_min)` of a 2×2 matrix.
pub fn singular_values2(a: &M2) -> (f64, f64) {
    let p = a[0][0] * a[0][0] + a[0][1] * a[0][1] + a[1][0] * a[1][0] + a[1][1] * a[1][1];
    let d = det2(a).abs();
    let disc = (p * p - 4.0 * d * d).max(0.0).sqrt();
    let smax = (0.5 * (p + disc)).sqrt();
    let smin = if smax > 0.0 { d / smax } else { 0.0 };
    (smax, smin)
}

/// Right singular vector of the smallest singular value.
pub fn null_vector2(a: &M2) -> [f64; 2] {
    // eigenvector of AᵀA for the smaller eigenvalue
    let ata = mul2(&transpose2(a), a);
    let (smax, _) = singular_values2(a);
    let lmax = smax * smax;
    // (AᵀA − λmax I) v_min = 0 ⇒ v_min ⟂ rows of that matrix rotated
    let r0 = [ata[0][0] - lmax, ata[0][1]];
    let r1 = [ata[1][0], ata[1][1] - lmax];
    // v_max spans the null space of (AᵀA − λmax); v_min ⟂ v_max
    let r = if r0[0].hypot(r0[1]) >= r1[0].hypot(r1[1]) { r0 } else { r1 };
    let n = r[0].hypot(r[1]);
    if n == 0.0 {
        return [0.0, 1.0];
    }
    // r is orthogonal to v_max, hence parallel to v_min; fix the sign
    let s = if r[0].abs() >= r[1].abs() { r[0].signum() } else { r[1].signum() };
    [s * r[0] / n, s * r[1] / n]
}

pub fn rot2(theta: f64) -> M2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn mul4(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            let aik = a[i][k];
            for j in 0..4 {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

pub fn transpose4(a: &M4) -> M4 {
    let mut t = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn block(a: &M4, bi: usize, bj: usize) -> M2 {
    let (r, c) = (2 * bi, 2 * bj);
    [[a[r][c], a[r][c + 1]], [a[r + 1][c], a[r + 1][c + 1]]]
}

pub fn from_blocks(w1: &M2, w2: &M2, w3: &M2, w4: &M2) -> M4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = w1[i][j];
            m[i][j + 2] = w2[i][j];
            m[i + 2][j] = w3[i][j];
            m[i + 2][j + 2] = w4[i][j];
        }
    }
    m
}

/// Standard symplectic form `[[0, I], [−I, 0]]`.
pub fn symplectic_j() -> M4 {
    let z = [[0.0; 2]; 2];
    from_blocks(&z, &I2, &[[-1.0, 0.0], [0.0, -1.0]], &z)
}

/// `‖ΠᵀJΠ − J‖∞` (max-abs entry).
pub fn symplectic_defect(p: &M4) -> f64 {
    let j = symplectic_j();
    let s = mul4(&transpose4(p), &mul4(&j, p));
    let mut d: f64 = 0.0;
    for r in 0..4 {
        for c in 0..4 {
            d = d.max((s[r][c] - j[r][c]).abs());
        }
    }
    d
}

/// Gaussian elimination inverse with partial pivoting.
pub fn inv4(a: &M4) -> Option<M4> {
    let mut m = *a;
    let mut inv = eye4();
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = m[col][col];
        for j in 0..4 {
            m[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for j in 0..4 {
                        m[r][j] -= f * m[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

pub fn max_abs_diff4(a: &M4, b: &M4) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

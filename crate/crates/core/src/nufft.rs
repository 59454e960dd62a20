//! Adjoint (type-2) nonuniform Fourier sums `g(x) = Σ_l e^{i⟨x − x_o, ξ_l⟩} ĝ_l`
//! for spectra sampled on a rectangle of a regular frequency lattice.
//!
//! Large problems go through exponential-of-semicircle gridding on a twice
//! oversampled grid; small ones are summed directly with separable phases.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Field, C64};

/// Spectrum samples `values[l]` at frequencies `dxi · (lo + (l / dims[1], l % dims[1]))`.
/// Phases are measured from `x_origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSpectrum {
    pub dxi: f64,
    pub lo: [i64; 2],
    pub dims: [usize; 2],
    pub values: Vec<C64>,
    pub x_origin: [f64; 2],
    pub box_id: Option<usize>,
}

impl SampledSpectrum {
    pub fn zeros_like(&self) -> Self {
        Self { values: vec![C64::new(0.0, 0.0); self.values.len()], ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bin(&self, l: usize) -> [i64; 2] {
        [self.lo[0] + (l / self.dims[1]) as i64, self.lo[1] + (l % self.dims[1]) as i64]
    }

    pub fn xi(&self, l: usize) -> [f64; 2] {
        let b = self.bin(l);
        [self.dxi * b[0] as f64, self.dxi * b[1] as f64]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Whole-grid spectrum of `u` over bins `[-n/2, n/2)²`, scaled so that
    /// evaluation at grid points reproduces `u`.
    pub fn from_field(u: &Field) -> Self {
        let g = u.grid;
        let n = g.n;
        let spec = fft::forward(&u.data, n);
        let nn = (n * n) as f64;
        let lo = -((n / 2) as i64);
        let values = (0..n * n)
            .map(|l| {
                let (b1, b2) = (lo + (l / n) as i64, lo + (l % n) as i64);
                spec[g.bin_index(b1) * n + g.bin_index(b2)] / nn
            })
            .collect();
        Self { dxi: g.dxi(), lo: [lo, lo], dims: [n, n], values, x_origin: g.origin, box_id: None }
    }

    /// Same lattice, values multiplied pointwise by `f(ξ_l)`.
    pub fn weighted(&self, mut f: impl FnMut([f64; 2]) -> C64) -> Self {
        let values = self.values.iter().enumerate().map(|(l, v)| if *v == C64::new(0.0, 0.0) { *v } else { v * f(self.xi(l)) }).collect();
        Self { values, ..self.clone() }
    }
}

struct EsKernel {
    w: usize,
    beta: f64,
}

impl EsKernel {
    fn for_tolerance(tol: f64) -> Self {
        let w = ((1.0 / tol).log10().ceil() as usize + 2).clamp(4, 16);
        Self { w, beta: 2.30 * w as f64 }
    }

    /// Kernel at offset `z` in fine-grid units.
    fn eval(&self, z: f64) -> f64 {
        let a = 0.5 * self.w as f64;
        let q = z / a;
        if q.abs() >= 1.0 {
            0.0
        } else {
            (self.beta * ((1.0 - q * q).sqrt() - 1.0)).exp()
        }
    }

    /// `∫ φ(z) e^{-i ω z} dz` in fine-grid units.
    fn fourier(&self, omega: f64) -> f64 {
        let (x, wt) = gauss_legendre_64();
        let a = 0.5 * self.w as f64;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(wt) {
            let z = 0.5 * a * (xi + 1.0);
            s += wi * self.eval(z) * (omega * z).cos();
        }
        s * a
    }
}

fn gauss_legendre_64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let d = n as f64 * (z * q1 - q0) / (z * z - 1.0);
                w[i] = 2.0 / ((1.0 - z * z) * d * d);
                break;
            }
        }
        x[i] = z;
    }
    (x, w)
}

fn validate(s: &SampledSpectrum, targets: &[[f64; 2]], tol: f64) -> Result<()> {
    if !(tol > 1e-14 && tol < 1e-2) {
        return Err(Error::InvalidParameter(format!("nufft tolerance {tol:e} outside (1e-14, 1e-2)")));
    }
    if s.values.len() != s.dims[0] * s.dims[1] {
        return Err(Error::InvalidParameter("spectrum values do not match lattice dims".into()));
    }
    if !s.dxi.is_finite() || s.dxi <= 0.0 || !s.x_origin.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("spectrum lattice".into()));
    }
    if s.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("spectrum values".into()));
    }
    if targets.iter().any(|x| !x[0].is_finite() || !x[1].is_finite()) {
        return Err(Error::NonFinite("target points".into()));
    }
    Ok(())
}

/// Evaluate `Σ_l e^{i⟨x_j − x_o, ξ_l⟩} ĝ_l` at every target.
pub fn eval_adjoint(s: &SampledSpectrum, targets: &[[f64; 2]], tol: f64) -> Result<Vec<C64>> {
    validate(s, targets, tol)?;
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    if s.values.iter().all(|v| *v == C64::new(0.0, 0.0)) {
        return Ok(vec![C64::new(0.0, 0.0); targets.len()]);
    }
    let k = EsKernel::for_tolerance(tol);
    let m = (s.dims[0] * s.dims[1]) as f64;
    let nf = fine_dims(s.dims, k.w);
    let fine = (nf[0] * nf[1]) as f64;
    let t = targets.len() as f64;
    let direct_cost = t * m;
    let gridded_cost = t * ((k.w * k.w) as f64 + 60.0 * k.w as f64) + 5.0 * fine * fine.log2() + 4.0 * m;
    if direct_cost <= gridded_cost {
        Ok(eval_direct(s, targets))
    } else {
        Ok(eval_gridded(s, targets, &k, nf))
    }
}

fn fine_dims(dims: [usize; 2], w: usize) -> [usize; 2] {
    let f = |m: usize| {
        let n = (2 * m).max(2 * w);
        n + n % 2
    };
    [f(dims[0]), f(dims[1])]
}

fn centers(s: &SampledSpectrum) -> [i64; 2] {
    [s.lo[0] + (s.dims[0] / 2) as i64, s.lo[1] + (s.dims[1] / 2) as i64]
}

fn modulation(s: &SampledSpectrum, x: [f64; 2], c: [i64; 2]) -> (C64, [f64; 2]) {
    let d = [x[0] - s.x_origin[0], x[1] - s.x_origin[1]];
    let ph = s.dxi * (d[0] * c[0] as f64 + d[1] * c[1] as f64);
    let t = [(s.dxi * d[0]).rem_euclid(2.0 * PI), (s.dxi * d[1]).rem_euclid(2.0 * PI)];
    (C64::from_polar(1.0, ph), t)
}

/// Dense separable summation (exact up to rounding).
pub fn eval_direct(s: &SampledSpectrum, targets: &[[f64; 2]]) -> Vec<C64> {
    let [m1, m2] = s.dims;
    let c = centers(s);
    let h = [(s.dims[0] / 2) as i64, (s.dims[1] / 2) as i64];
    targets
        .par_iter()
        .map_init(
            || (vec![C64::new(0.0, 0.0); m1], vec![C64::new(0.0, 0.0); m2]),
            |(e1, e2), &x| {
                let (modu, t) = modulation(s, x, c);
                for (i, e) in e1.iter_mut().enumerate() {
                    *e = C64::from_polar(1.0, t[0] * (i as i64 - h[0]) as f64);
                }
                for (i, e) in e2.iter_mut().enumerate() {
                    *e = C64::from_polar(1.0, t[1] * (i as i64 - h[1]) as f64);
                }
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..m1 {
                    let row = &s.values[i * m2..(i + 1) * m2];
                    let mut r = C64::new(0.0, 0.0);
                    for (v, e) in row.iter().zip(e2.iter()) {
                        r += v * e;
                    }
                    acc += r * e1[i];
                }
                acc * modu
            },
        )
        .collect()
}

fn eval_gridded(s: &SampledSpectrum, targets: &[[f64; 2]], k: &EsKernel, nf: [usize; 2]) -> Vec<C64> {
    let [m1, m2] = s.dims;
    let half = [(m1 / 2) as i64, (m2 / 2) as i64];
    // deconvolution factors per dimension; fine spacing h_d = 2π/n_d, kernel in fine-grid units
    let deconv = |d: usize, mm: usize| -> Vec<f64> {
        let hd = 2.0 * PI / nf[d] as f64;
        (0..mm).map(|i| 1.0 / k.fourier((i as i64 - half[d]) as f64 * hd)).collect::<Vec<_>>()
    };
    let d1 = deconv(0, m1);
    let d2 = deconv(1, m2);
    let mut grid = vec![C64::new(0.0, 0.0); nf[0] * nf[1]];
    for i in 0..m1 {
        let r1 = (i as i64 - half[0]).rem_euclid(nf[0] as i64) as usize;
        for j in 0..m2 {
            let v = s.values[i * m2 + j];
            if v != C64::new(0.0, 0.0) {
                let r2 = (j as i64 - half[1]).rem_euclid(nf[1] as i64) as usize;
                grid[r1 * nf[1] + r2] = v * (d1[i] * d2[j]);
            }
        }
    }
    fft::fft2(&mut grid, nf[0], nf[1], true);
    let c = centers(s);
    let w = k.w;
    targets
        .par_iter()
        .map_init(
            || (vec![0.0; w], vec![0.0; w]),
            |(k1, k2), &x| {
                let (modu, t) = modulation(s, x, c);
                let u1 = t[0] * nf[0] as f64 / (2.0 * PI);
                let u2 = t[1] * nf[1] as f64 / (2.0 * PI);
                let l1 = (u1 - 0.5 * w as f64).ceil() as i64;
                let l2 = (u2 - 0.5 * w as f64).ceil() as i64;
                for a in 0..w {
                    k1[a] = k.eval(u1 - (l1 + a as i64) as f64);
                    k2[a] = k.eval(u2 - (l2 + a as i64) as f64);
                }
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..w {
                    let r = (l1 + a as i64).rem_euclid(nf[0] as i64) as usize * nf[1];
                    let mut row = C64::new(0.0, 0.0);
                    for b in 0..w {
                        let cidx = (l2 + b as i64).rem_euclid(nf[1] as i64) as usize;
                        row += grid[r + cidx] * k2[b];
                    }
                    acc += row * k1[a];
                }
                acc * modu
            },
        )
        .collect()
}

/// Gridded path regardless of problem size; exposed for accuracy tests.
pub fn eval_adjoint_gridded(s: &SampledSpectrum, targets: &[[f64; 2]], tol: f64) -> Result<Vec<C64>> {
    validate(s, targets, tol)?;
    let k = EsKernel::for_tolerance(tol);
    let nf = fine_dims(s.dims, k.w);
    Ok(eval_gridded(s, targets, &k, nf))
}

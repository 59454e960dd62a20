//! Dyadic parabolic tiling of the discrete frequency plane and the tight
//! wave-packet frame built on it.
//!
//! Scale `k ≥ 1` boxes live on the annulus `2^{k-1} r0 ≤ |ξ| ≤ 2^{k+1} r0` and
//! are split into `round(A·2^{k/2})` overlapping angular sectors. Windows are
//! square roots of a smooth squared-cosine partition, so the analysis and
//! synthesis windows coincide and `Σ w² = 1` holds identically.
//!
//! Coefficients of a box are samples on an `M1 × M2` spatial lattice, where
//! `M1 × M2` is the bounding rectangle of the box support in DFT bins. The
//! normalization makes the transform a Parseval frame: `Σ|c|² = Σ|u|²`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Field, Grid, C64};
use crate::nufft::SampledSpectrum;

/// Degree-7 smooth step on `[0, 1]` with `ν(t) + ν(1 − t) = 1`.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t.powi(4) * (35.0 - 84.0 * t + 70.0 * t * t - 20.0 * t.powi(3))
    }
}

/// `cos(π/2·ν(t))`, the descending half of a squared-cosine pair.
pub fn fall(t: f64) -> f64 {
    if t >= 1.0 {
        return 0.0;
    }
    (0.5 * PI * smooth_step(t)).cos()
}

/// `sin(π/2·ν(t))`, pairs with [`fall`] to `fall² + rise² = 1`.
pub fn rise(t: f64) -> f64 {
    if t >= 1.0 {
        return 1.0;
    }
    (0.5 * PI * smooth_step(t)).sin()
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Dense rectangle of integer DFT bins `lo .. lo + dims`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxLattice {
    pub lo: [i64; 2],
    pub dims: [usize; 2],
}

impl BoxLattice {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bin(&self, l: usize) -> [i64; 2] {
        [self.lo[0] + (l / self.dims[1]) as i64, self.lo[1] + (l % self.dims[1]) as i64]
    }
}

#[derive(Clone, Debug)]
pub struct FrequencyBox {
    pub id: usize,
    /// 0 for the isotropic low-pass box.
    pub scale_k: u32,
    pub orientation_index: usize,
    /// Angle of the orientation `ν`.
    pub theta: f64,
    pub nu: [f64; 2],
    /// Radius where the radial window peaks (rad per unit length).
    pub center_radius: f64,
    pub length_parallel: f64,
    pub length_perp: f64,
    /// Rows `ν` and `ν^⊥`; maps `ν` to `e1`.
    pub rotation: [[f64; 2]; 2],
    pub dilation: [f64; 2],
    pub volume: f64,
    /// Angular half-width of the window support (π for the coarse box).
    pub half_angle: f64,
    pub r_inner: f64,
    pub r_outer: f64,
    pub lattice: BoxLattice,
    /// `(grid storage index, lattice index, window value)` for every bin with `w > 0`.
    pub support: Vec<(usize, usize, f64)>,
}

impl FrequencyBox {
    /// Frequency of lattice entry `l`.
    pub fn xi(&self, l: usize, dxi: f64) -> [f64; 2] {
        let b = self.lattice.bin(l);
        [dxi * b[0] as f64, dxi * b[1] as f64]
    }

    pub fn angular_offset(&self, phi: f64) -> f64 {
        wrap_angle(phi - self.theta)
    }
}

#[derive(Clone, Debug)]
pub struct Tiling {
    pub grid: Grid,
    pub k_max: u32,
    pub angular_constant: f64,
    pub angle_offset: f64,
    /// Base radius: the coarse box ends at `2 r0`.
    pub r0: f64,
    /// Orientation count per scale (index 0 = coarse = 1).
    pub orientations: Vec<usize>,
    pub boxes: Vec<FrequencyBox>,
}

/// Wave-packet coefficients grouped per box, each an `M1 × M2` row-major array.
/// Absent boxes count as zero.
#[derive(Clone, Debug, Default)]
pub struct PacketCoefficients {
    pub boxes: BTreeMap<usize, Vec<C64>>,
}

impl PacketCoefficients {
    pub fn energy(&self) -> f64 {
        self.boxes.values().flat_map(|c| c.iter()).map(|v| v.norm_sqr()).sum()
    }

    pub fn box_energy(&self, id: usize) -> f64 {
        self.boxes.get(&id).map(|c| c.iter().map(|v| v.norm_sqr()).sum()).unwrap_or(0.0)
    }

    pub fn restrict(&self, ids: &[usize]) -> Self {
        let boxes = ids.iter().filter_map(|id| self.boxes.get(id).map(|c| (*id, c.clone()))).collect();
        Self { boxes }
    }
}

fn radial_window(k: u32, k_max: u32, s: f64) -> f64 {
    if k == 0 {
        return if s <= 0.0 { 1.0 } else { fall(s) };
    }
    let kf = k as f64;
    if s <= kf - 1.0 {
        0.0
    } else if s <= kf {
        rise(s - kf + 1.0)
    } else if k == k_max {
        1.0
    } else {
        fall(s - kf)
    }
}

fn angular_window(offset: f64, half: f64) -> f64 {
    let u = offset.abs() / half;
    if u >= 1.0 {
        0.0
    } else {
        fall(u)
    }
}

pub fn orientation_count(k: u32, angular_constant: f64) -> usize {
    (angular_constant * 2f64.powf(k as f64 / 2.0)).round() as usize
}

/// Tiling with the first orientation of every scale at angle 0.
pub fn build_tiling(grid: Grid, k_max: u32, angular_constant: f64) -> Result<Tiling> {
    build_tiling_with_offset(grid, k_max, angular_constant, 0.0)
}

/// Tiling whose orientation `j` at scale `k` has angle `angle_offset + 2πj/n_k`.
pub fn build_tiling_with_offset(grid: Grid, k_max: u32, angular_constant: f64, angle_offset: f64) -> Result<Tiling> {
    if k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    if !(angular_constant > 0.0 && angular_constant.is_finite()) || !angle_offset.is_finite() {
        return Err(Error::InvalidParameter("angular constant must be positive".into()));
    }
    let n = grid.n;
    let dxi = grid.dxi();
    let nyquist = dxi * (n / 2) as f64;
    let r0 = nyquist / 2f64.powi(k_max as i32 + 1);
    if r0 < 2.0 * dxi {
        return Err(Error::TilingExceedsNyquist(format!(
            "k_max = {k_max} needs N >= {} (got N = {n})",
            1usize << (k_max + 3)
        )));
    }
    let mut orientations = vec![1usize];
    for k in 1..=k_max {
        let nk = orientation_count(k, angular_constant);
        if nk < 4 {
            return Err(Error::InvalidParameter(format!("angular constant gives {nk} orientations at scale {k}")));
        }
        orientations.push(nk);
    }

    // polar coordinates of every bin, shared by all boxes
    let bins: Vec<(f64, f64)> = (0..n * n)
        .map(|g| {
            let b1 = grid.signed_bin(g / n) as f64 * dxi;
            let b2 = grid.signed_bin(g % n) as f64 * dxi;
            (b1.hypot(b2), b2.atan2(b1))
        })
        .collect();

    let mut specs = vec![(0u32, 0usize)];
    for k in 1..=k_max {
        for j in 0..orientations[k as usize] {
            specs.push((k, j));
        }
    }

    let boxes: Vec<FrequencyBox> = specs
        .par_iter()
        .enumerate()
        .map(|(id, &(k, j))| {
            let nk = orientations[k as usize];
            let (theta, half) = if k == 0 { (0.0, PI) } else { (wrap_angle(angle_offset + 2.0 * PI * j as f64 / nk as f64), 2.0 * PI / nk as f64) };
            let mut raw = Vec::new();
            let (mut lo, mut hi) = ([i64::MAX; 2], [i64::MIN; 2]);
            for (g, &(r, phi)) in bins.iter().enumerate() {
                let s = if r > 0.0 { (r / r0).log2() } else { f64::NEG_INFINITY };
                let mut w = radial_window(k, k_max, s);
                if k > 0 && w > 0.0 {
                    w *= angular_window(wrap_angle(phi - theta), half);
                }
                if w > 0.0 {
                    let b = [grid.signed_bin(g / n), grid.signed_bin(g % n)];
                    for d in 0..2 {
                        lo[d] = lo[d].min(b[d]);
                        hi[d] = hi[d].max(b[d]);
                    }
                    raw.push((g, b, w));
                }
            }
            let dims = if raw.is_empty() {
                lo = [0, 0];
                [0, 0]
            } else {
                [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize]
            };
            let lattice = BoxLattice { lo, dims };
            let support = raw
                .into_iter()
                .map(|(g, b, w)| (g, ((b[0] - lo[0]) as usize) * dims[1] + (b[1] - lo[1]) as usize, w))
                .collect();
            let nu = [theta.cos(), theta.sin()];
            let (r_inner, r_outer, center) = if k == 0 {
                (0.0, 2.0 * r0, 0.0)
            } else {
                let kf = 2f64.powi(k as i32);
                (0.5 * kf * r0, 2.0 * kf * r0, kf * r0)
            };
            let lp = r_outer - r_inner;
            let lpp = if k == 0 { 2.0 * r_outer } else { 2.0 * r_outer * half.sin() };
            FrequencyBox {
                id,
                scale_k: k,
                orientation_index: j,
                theta,
                nu,
                center_radius: center,
                length_parallel: lp,
                length_perp: lpp,
                rotation: [[nu[0], nu[1]], [-nu[1], nu[0]]],
                dilation: [lp / (2.0 * PI), lpp / (2.0 * PI)],
                volume: lp * lpp,
                half_angle: half,
                r_inner,
                r_outer,
                lattice,
                support,
            }
        })
        .collect();

    Ok(Tiling { grid, k_max, angular_constant, angle_offset, r0, orientations, boxes })
}

impl Tiling {
    pub fn boxes_at_scale(&self, k: u32) -> impl Iterator<Item = &FrequencyBox> {
        self.boxes.iter().filter(move |b| b.scale_k == k)
    }

    /// Box at scale `k` whose orientation is closest to the direction angle `phi`.
    pub fn nearest_box(&self, k: u32, phi: f64) -> &FrequencyBox {
        self.boxes_at_scale(k)
            .min_by(|a, b| a.angular_offset(phi).abs().total_cmp(&b.angular_offset(phi).abs()))
            .expect("scale present")
    }

    /// Window value `w_b(ξ)` at arbitrary continuous frequency.
    pub fn window_at(&self, b: &FrequencyBox, xi: [f64; 2]) -> f64 {
        let r = xi[0].hypot(xi[1]);
        let s = if r > 0.0 { (r / self.r0).log2() } else { f64::NEG_INFINITY };
        let mut w = radial_window(b.scale_k, self.k_max, s);
        if b.scale_k > 0 && w > 0.0 {
            w *= angular_window(b.angular_offset(xi[1].atan2(xi[0])), b.half_angle);
        }
        w
    }

    /// `Σ_b w_b²` on every grid bin.
    pub fn copartition_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.grid.len()];
        for b in &self.boxes {
            for &(g, _, w) in &b.support {
                s[g] += w * w;
            }
        }
        s
    }

    fn box_scale(b: &FrequencyBox, n: usize) -> f64 {
        1.0 / (n as f64 * (b.lattice.len() as f64).sqrt())
    }

    /// Spatial position of coefficient `m` of box `b`.
    pub fn coefficient_position(&self, b: &FrequencyBox, m: usize) -> [f64; 2] {
        let d = b.lattice.dims;
        let l = self.grid.length;
        [
            self.grid.origin[0] + l * (m / d[1]) as f64 / d[0] as f64,
            self.grid.origin[1] + l * (m % d[1]) as f64 / d[1] as f64,
        ]
    }

    fn analyze_box(&self, spec: &[C64], b: &FrequencyBox) -> Vec<C64> {
        let mut c = vec![C64::new(0.0, 0.0); b.lattice.len()];
        if c.is_empty() {
            return c;
        }
        for &(g, l, w) in &b.support {
            c[l] = spec[g] * w;
        }
        fft::fft2(&mut c, b.lattice.dims[0], b.lattice.dims[1], true);
        let s = Self::box_scale(b, self.grid.n);
        for v in &mut c {
            *v *= s;
        }
        c
    }

    /// Lattice values `w_b · s · DFT_M(c)`; the box's contribution to the grid spectrum.
    fn synth_box_lattice(&self, c: &[C64], b: &FrequencyBox) -> Result<Vec<C64>> {
        if c.len() != b.lattice.len() {
            return Err(Error::GridMismatch(format!("box {} expects {} coefficients, got {}", b.id, b.lattice.len(), c.len())));
        }
        let mut v = c.to_vec();
        fft::fft2(&mut v, b.lattice.dims[0], b.lattice.dims[1], false);
        let s = Self::box_scale(b, self.grid.n);
        let mut out = vec![C64::new(0.0, 0.0); v.len()];
        for &(_, l, w) in &b.support {
            out[l] = v[l] * (w * s);
        }
        Ok(out)
    }

    /// Windowed spectrum `û w_b² / N²` of `u` on the box lattice.
    pub fn box_spectrum(&self, u: &Field, b: &FrequencyBox) -> Result<SampledSpectrum> {
        u.check_grid(&self.grid)?;
        let spec = fft::forward(&u.data, self.grid.n);
        Ok(self.box_spectrum_from_dft(&spec, b))
    }

    /// As [`Tiling::box_spectrum`] from a precomputed DFT of the field.
    pub fn box_spectrum_from_dft(&self, spec: &[C64], b: &FrequencyBox) -> SampledSpectrum {
        let nn = (self.grid.n * self.grid.n) as f64;
        let mut values = vec![C64::new(0.0, 0.0); b.lattice.len()];
        for &(g, l, w) in &b.support {
            values[l] = spec[g] * (w * w / nn);
        }
        self.lattice_spectrum(b, values)
    }

    /// Spectrum of the synthesis of one box's coefficients.
    pub fn box_spectrum_from_coefficients(&self, c: &[C64], b: &FrequencyBox) -> Result<SampledSpectrum> {
        Ok(self.lattice_spectrum(b, self.synth_box_lattice(c, b)?))
    }

    fn lattice_spectrum(&self, b: &FrequencyBox, values: Vec<C64>) -> SampledSpectrum {
        SampledSpectrum {
            dxi: self.grid.dxi(),
            lo: b.lattice.lo,
            dims: b.lattice.dims,
            values,
            x_origin: self.grid.origin,
            box_id: Some(b.id),
        }
    }

    /// Minimum-norm coefficients of box `b` whose synthesis matches the field
    /// with DFT `spec` on the box support; bins with `w < 1e-6` are treated as empty.
    pub fn box_coefficients_from_dft(&self, spec: &[C64], b: &FrequencyBox) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); b.lattice.len()];
        if v.is_empty() {
            return v;
        }
        let s = Self::box_scale(b, self.grid.n) * (self.grid.n * self.grid.n) as f64;
        for &(g, l, w) in &b.support {
            if w > 1e-6 {
                v[l] = spec[g] / (w * s);
            }
        }
        fft::fft2(&mut v, b.lattice.dims[0], b.lattice.dims[1], true);
        let m = v.len() as f64;
        for c in &mut v {
            *c /= m;
        }
        v
    }

    /// Per-box window values on the box lattice (zero off the support).
    pub fn window_on_lattice(&self, b: &FrequencyBox) -> Vec<f64> {
        let mut w = vec![0.0; b.lattice.len()];
        for &(_, l, v) in &b.support {
            w[l] = v;
        }
        w
    }

    pub fn metadata_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[tiling]");
        let _ = writeln!(s, "n = {}", self.grid.n);
        let _ = writeln!(s, "length = {}", self.grid.length);
        let _ = writeln!(s, "k_max = {}", self.k_max);
        let _ = writeln!(s, "angular_constant = {}", self.angular_constant);
        let _ = writeln!(s, "angle_offset = {}", self.angle_offset);
        let _ = writeln!(s, "r0 = {}", self.r0);
        let _ = writeln!(s, "orientations = {:?}", self.orientations);
        let _ = writeln!(s, "box_count = {}", self.boxes.len());
        for b in &self.boxes {
            let _ = writeln!(s, "\n[[box]]");
            let _ = writeln!(s, "id = {}", b.id);
            let _ = writeln!(s, "k = {}", b.scale_k);
            let _ = writeln!(s, "orientation = {}", b.orientation_index);
            let _ = writeln!(s, "nu = [{:.12}, {:.12}]", b.nu[0], b.nu[1]);
            let _ = writeln!(s, "center_radius = {:.12}", b.center_radius);
            let _ = writeln!(s, "length_parallel = {:.12}", b.length_parallel);
            let _ = writeln!(s, "length_perp = {:.12}", b.length_perp);
            let _ = writeln!(s, "lattice_lo = [{}, {}]", b.lattice.lo[0], b.lattice.lo[1]);
            let _ = writeln!(s, "lattice_dims = [{}, {}]", b.lattice.dims[0], b.lattice.dims[1]);
            let _ = writeln!(s, "support_bins = {}", b.support.len());
        }
        s
    }
}

pub fn forward_transform(u: &Field, t: &Tiling) -> Result<PacketCoefficients> {
    u.check_grid(&t.grid)?;
    let spec = fft::forward(&u.data, t.grid.n);
    Ok(forward_from_dft(&spec, t))
}

pub fn forward_from_dft(spec: &[C64], t: &Tiling) -> PacketCoefficients {
    let boxes = t.boxes.par_iter().map(|b| (b.id, t.analyze_box(spec, b))).collect();
    PacketCoefficients { boxes }
}

/// Synthesis `Σ_γ u_γ φ_γ`; boxes missing from `c` contribute nothing.
pub fn inverse_transform(c: &PacketCoefficients, t: &Tiling) -> Result<Field> {
    let mut spec = vec![C64::new(0.0, 0.0); t.grid.len()];
    for (&id, coeffs) in &c.boxes {
        let b = t.boxes.get(id).ok_or_else(|| Error::GridMismatch(format!("unknown box id {id}")))?;
        let lat = t.synth_box_lattice(coeffs, b)?;
        for &(g, l, _) in &b.support {
            spec[g] += lat[l];
        }
    }
    let mut data = spec;
    fft::fft2(&mut data, t.grid.n, t.grid.n, true);
    Field::from_vec(t.grid, data)
}

/// Single frame element `φ_γ` for box `b` and lattice index `m`.
pub fn frame_element(t: &Tiling, b: &FrequencyBox, m: usize) -> Result<Field> {
    let mut c = vec![C64::new(0.0, 0.0); b.lattice.len()];
    if m >= c.len() {
        return Err(Error::InvalidParameter(format!("coefficient index {m} outside box {}", b.id)));
    }
    c[m] = C64::new(1.0, 0.0);
    let mut pc = PacketCoefficients::default();
    pc.boxes.insert(b.id, c);
    inverse_transform(&pc, t)
}

/// Lattice index of box `b` whose coefficient position is nearest to `x` (periodic).
pub fn nearest_coefficient(t: &Tiling, b: &FrequencyBox, x: [f64; 2]) -> usize {
    let d = b.lattice.dims;
    let l = t.grid.length;
    let idx = |v: f64, o: f64, m: usize| -> usize { (((v - o) / l * m as f64).round() as i64).rem_euclid(m as i64) as usize };
    idx(x[0], t.grid.origin[0], d[0]) * d[1] + idx(x[1], t.grid.origin[1], d[1])
}

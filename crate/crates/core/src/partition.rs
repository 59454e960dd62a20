//! Partition of unity over the cover of `Λ` and its cone-window separation.
//!
//! All weights live on the caustic lattice, which parametrizes `Λ` by its
//! source point `(x, θ)`. A weight of a sheared set at `(x̃, ξ̃)` is read back
//! through `C_Q⁻¹`.

use std::f64::consts::FRAC_PI_2;

use crate::caustic::{CausticLattice, CausticMap, SetKind};
use crate::diffeo::DiffeoParams;
use crate::error::{Error, Result};
use crate::frame::FrequencyBox;
use crate::linalg;

/// Double-exponential cutoff `exp(−exp(s·d + b))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffParams {
    pub s: f64,
    pub b: f64,
    pub eps: f64,
}

impl CutoffParams {
    /// `s = 4/overlap`, `b = 0`.
    pub fn from_overlap(overlap: f64, eps: f64) -> Self {
        Self { s: 4.0 / overlap, b: 0.0, eps }
    }

    /// Same slope, offset so that the weight is below `eps` from `d = -½` outward.
    pub fn inside_support(self) -> Self {
        Self { b: (1.0 / self.eps).ln().ln() + 0.5 * self.s + 1e-9, ..self }
    }
}

/// Smooth monotone cutoff of a signed distance (negative inside).
pub fn cutoff_weight(d: f64, p: &CutoffParams) -> f64 {
    if d == f64::NEG_INFINITY {
        return 1.0;
    }
    if d == f64::INFINITY {
        return 0.0;
    }
    let w = (-(p.s * d + p.b).exp()).exp();
    if w < p.eps {
        0.0
    } else if w > 1.0 - p.eps {
        1.0
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionOptions {
    /// Overlap width in lattice cells.
    pub overlap: f64,
    pub eps_trunc: f64,
    /// Minimum `σ_min/σ_max` of `W̌1` for a sheared set. Lower than the
    /// caustic threshold: the shear scales the transverse column by about `α·c·T`.
    pub sheared_tol: f64,
    /// Restrict each sheared set to a ball around its anchor.
    pub anchor_radius: Option<f64>,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self { overlap: 3.0, eps_trunc: 1e-8, sheared_tol: 0.05, anchor_radius: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverSet {
    /// `(i, j)`: `i` is the set-kind code (1 positive, 2 caustic, 3 negative); `j = 0` for `Q = I`.
    pub label: (usize, usize),
    pub kind: SetKind,
    /// Caustic-map component for identity sets.
    pub component: Option<usize>,
    /// Index into [`Cover::diffeos`] for sheared sets.
    pub diffeo: Option<usize>,
    /// Most frequent KMAH index over the set's samples.
    pub kmah: u32,
    pub admissible: Vec<bool>,
    /// Signed distance to the admissible boundary, in cells.
    pub distance: Vec<f64>,
    pub weight: Vec<f64>,
}

impl CoverSet {
    pub fn name(&self) -> String {
        if self.label.1 == 0 {
            format!("O{}", self.label.0)
        } else {
            format!("O{}{}", self.label.0, self.label.1)
        }
    }

    pub fn is_identity(&self) -> bool {
        self.diffeo.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct Cover {
    pub lattice: CausticLattice,
    pub sets: Vec<CoverSet>,
    pub diffeos: Vec<DiffeoParams>,
    pub cutoff: CutoffParams,
    /// Samples with no valid ray; every weight is zero there.
    pub masked: Vec<bool>,
}

/// Squared Euclidean distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Distance in cells from every sample to the nearest sample with `target` set.
fn distance_to(lat: &CausticLattice, target: &[bool]) -> Vec<f64> {
    let dims = [lat.nx[0], lat.nx[1], lat.ntheta];
    let mut g: Vec<f64> = target.iter().map(|t| if *t { 0.0 } else { f64::INFINITY }).collect();
    let idx = |i: [usize; 3]| lat.index(i[0], i[1], i[2]);
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let at = |q: usize| {
                    let mut i = [0; 3];
                    i[axis] = q;
                    i[others[0]] = a;
                    i[others[1]] = b;
                    idx(i)
                };
                for q in 0..n {
                    line[q] = g[at(q)];
                }
                edt_line(&line, &mut out, &mut v, &mut z);
                for q in 0..n {
                    g[at(q)] = out[q];
                }
            }
        }
    }
    g.iter().map(|d| d.sqrt()).collect()
}

/// Signed boundary distance: `−(dist_out − ½)` inside, `dist_in − ½` outside.
pub fn signed_distance(lat: &CausticLattice, inside: &[bool]) -> Vec<f64> {
    let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
    let to_out = distance_to(lat, &outside);
    let to_in = distance_to(lat, inside);
    inside
        .iter()
        .enumerate()
        .map(|(i, &ins)| if ins { -(to_out[i] - 0.5) } else { to_in[i] - 0.5 })
        .collect()
}

/// `σ_min/σ_max` of the upper-left block of `Π̌ = Π Π_Q⁻¹` at every lattice sample.
pub fn sheared_rank_ratio(cmap: &CausticMap, p: &DiffeoParams) -> Vec<f64> {
    cmap.samples
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            if s.masked {
                return 0.0;
            }
            let (x, th) = cmap.lattice.point(idx);
            let w = linalg::block(&p.composed(&s.propagator, x, [th.cos(), th.sin()]), 0, 0);
            let (smax, smin) = linalg::singular_values2(&w);
            if smax > 0.0 {
                smin / smax
            } else {
                0.0
            }
        })
        .collect()
}

/// Identity sets from the regular components, then one sheared set per anchor
/// covering what the identity weights leave over; weights normalized.
pub fn build_cover(cmap: &CausticMap, diffeos: &[DiffeoParams], opt: &PartitionOptions) -> Result<Cover> {
    if !(opt.overlap > 0.0 && opt.eps_trunc > 0.0 && opt.eps_trunc < 0.5) {
        return Err(Error::InvalidParameter("overlap must be positive and eps_trunc in (0, 0.5)".into()));
    }
    if !(opt.sheared_tol > 0.0 && opt.sheared_tol < 1.0) {
        return Err(Error::InvalidParameter("sheared_tol must lie in (0, 1)".into()));
    }
    let lat = cmap.lattice;
    let cutoff = CutoffParams::from_overlap(opt.overlap, opt.eps_trunc).inside_support();
    let masked: Vec<bool> = cmap.samples.iter().map(|s| s.masked).collect();
    let mut sets = Vec::new();
    for info in &cmap.sets {
        if info.kind == SetKind::Caustic {
            continue;
        }
        let admissible: Vec<bool> = cmap.component.iter().map(|c| *c == info.id).collect();
        sets.push(weighted_set((info.kind.code() as usize, 0), info.kind, Some(info.id), None, info.kmah, admissible, &lat, &cutoff));
    }
    let n_identity = sets.len();
    for (j, p) in diffeos.iter().enumerate() {
        let ratio = sheared_rank_ratio(cmap, p);
        let admissible: Vec<bool> = (0..lat.len())
            .map(|idx| {
                let near = opt.anchor_radius.is_none_or(|r| {
                    let (x, _) = lat.point(idx);
                    (x[0] - p.x0[0]).hypot(x[1] - p.x0[1]) <= r
                });
                !masked[idx] && near && ratio[idx] >= opt.sheared_tol
            })
            .collect();
        let kmah = dominant_kmah(cmap, &admissible);
        sets.push(weighted_set((SetKind::Caustic.code() as usize, j + 1), SetKind::Caustic, None, Some(j), kmah, admissible, &lat, &cutoff));
    }

    for idx in 0..lat.len() {
        let id_sum: f64 = sets[..n_identity].iter().map(|s| s.weight[idx]).sum();
        let rem = (1.0 - id_sum).max(0.0);
        for s in sets[n_identity..].iter_mut() {
            s.weight[idx] *= rem;
        }
    }
    let mut cover = Cover { lattice: lat, sets, diffeos: diffeos.to_vec(), cutoff, masked };
    normalize_partition(&mut cover)?;
    Ok(cover)
}

fn dominant_kmah(cmap: &CausticMap, mask: &[bool]) -> u32 {
    let mut hist = std::collections::BTreeMap::<u32, usize>::new();
    for (s, m) in cmap.samples.iter().zip(mask) {
        if *m {
            *hist.entry(s.kmah).or_default() += 1;
        }
    }
    hist.iter().max_by_key(|(_, c)| **c).map(|(k, _)| *k).unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
fn weighted_set(
    label: (usize, usize),
    kind: SetKind,
    component: Option<usize>,
    diffeo: Option<usize>,
    kmah: u32,
    admissible: Vec<bool>,
    lat: &CausticLattice,
    cutoff: &CutoffParams,
) -> CoverSet {
    let distance = signed_distance(lat, &admissible);
    let weight = distance
        .iter()
        .zip(&admissible)
        .map(|(d, a)| if *a { cutoff_weight(*d, cutoff) } else { 0.0 })
        .collect();
    CoverSet { label, kind, component, diffeo, kmah, admissible, distance, weight }
}

/// Divide by the pointwise sum; a valid sample with zero total is a cover gap.
pub fn normalize_partition(cover: &mut Cover) -> Result<()> {
    let lat = cover.lattice;
    let mut gaps = Vec::new();
    for idx in 0..lat.len() {
        let total: f64 = cover.sets.iter().map(|s| s.weight[idx]).sum();
        if cover.masked[idx] {
            cover.sets.iter_mut().for_each(|s| s.weight[idx] = 0.0);
        } else if total > 0.0 {
            cover.sets.iter_mut().for_each(|s| s.weight[idx] /= total);
        } else {
            gaps.push(idx);
        }
    }
    if let Some(&first) = gaps.first() {
        let (a, b, c) = lat.coords(first);
        return Err(Error::CoverGap { count: gaps.len(), first: [a, b, c] });
    }
    Ok(())
}

impl Cover {
    /// Pointwise sum of all weights (1 on valid samples after normalization).
    pub fn sum(&self) -> Vec<f64> {
        (0..self.lattice.len()).map(|i| self.sets.iter().map(|s| s.weight[i]).sum()).collect()
    }

    /// Valid samples outside every admissible set.
    pub fn gap_count(&self) -> usize {
        (0..self.lattice.len())
            .filter(|&i| !self.masked[i] && !self.sets.iter().any(|s| s.admissible[i]))
            .count()
    }

    /// Trilinear interpolation of set `si`'s weight at a source point, clamped to the lattice.
    pub fn weight_at(&self, si: usize, x: [f64; 2], theta: f64) -> f64 {
        let lat = &self.lattice;
        let f = lat.frac(x, theta);
        let dims = [lat.nx[0], lat.nx[1], lat.ntheta];
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let c = f[a].clamp(0.0, (dims[a] - 1) as f64);
            lo[a] = (c.floor() as usize).min(dims[a].saturating_sub(2));
            t[a] = if dims[a] > 1 { c - lo[a] as f64 } else { 0.0 };
        }
        let w = &self.sets[si].weight;
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut i = [0usize; 3];
            let mut c = 1.0;
            for a in 0..3 {
                let up = (corner >> a) & 1 == 1;
                if up && dims[a] == 1 {
                    c = 0.0;
                }
                i[a] = (lo[a] + up as usize).min(dims[a] - 1);
                c *= if up { t[a] } else { 1.0 - t[a] };
            }
            if c != 0.0 {
                acc += c * w[lat.index(i[0], i[1], i[2])];
            }
        }
        acc.clamp(0.0, 1.0)
    }

    /// `Γ̌` of set `si` at `(x̃, ν̃)`: for a sheared set the point is first mapped by `C_Q⁻¹`.
    pub fn weight_sheared(&self, si: usize, xt: [f64; 2], theta_t: f64) -> f64 {
        let nu = [theta_t.cos(), theta_t.sin()];
        match self.sets[si].diffeo {
            None => self.weight_at(si, xt, theta_t),
            Some(j) => {
                let (x, xi) = self.diffeos[j].cq_inv(xt, nu);
                self.weight_at(si, x, xi[1].atan2(xi[0]))
            }
        }
    }

    /// Map of labels per sample (index of the set with the largest weight, or `usize::MAX`).
    pub fn dominant(&self) -> Vec<usize> {
        (0..self.lattice.len())
            .map(|i| {
                self.sets
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.weight[i] > 0.0)
                    .max_by(|a, b| a.1.weight[i].total_cmp(&b.1.weight[i]))
                    .map(|(k, _)| k)
                    .unwrap_or(usize::MAX)
            })
            .collect()
    }

    pub fn metadata_text(&self) -> String {
        let mut s = format!(
            "lattice = {:?} x {}\ncutoff_s = {:.12}\ncutoff_b = {:.12}\neps_trunc = {:e}\nsets = {}\n",
            self.lattice.nx, self.lattice.ntheta, self.cutoff.s, self.cutoff.b, self.cutoff.eps, self.sets.len()
        );
        for set in &self.sets {
            let n = set.admissible.iter().filter(|a| **a).count();
            s.push_str(&format!("set {} kind={:?} kmah={} admissible={}\n", set.name(), set.kind, set.kmah, n));
        }
        s
    }
}

/// Squared-cosine partition of a box's angular range into `J` cones.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeWindows {
    pub centres: Vec<f64>,
    /// Spacing between adjacent centres.
    pub spacing: f64,
    /// Requested count when it had to be reduced.
    pub clamped_from: Option<usize>,
}

impl ConeWindows {
    pub fn count(&self) -> usize {
        self.centres.len()
    }

    /// Window `β` at angle `θ` (angles measured on the same branch as the centres).
    pub fn window(&self, beta: usize, theta: f64) -> f64 {
        let j = self.centres.len();
        if j == 1 {
            return 1.0;
        }
        let c = self.centres[beta];
        if (beta == 0 && theta <= c) || (beta == j - 1 && theta >= c) {
            return 1.0;
        }
        let r = (theta - c).abs() / self.spacing;
        if r >= 1.0 {
            0.0
        } else {
            (FRAC_PI_2 * r).cos().powi(2)
        }
    }
}

/// Cones over `[θ − half, θ + half]` of a box; `J` beyond the box's angular resolution is clamped.
pub fn cone_windows(b: &FrequencyBox, j: usize, dxi: f64) -> Result<ConeWindows> {
    if j == 0 {
        return Err(Error::InvalidParameter("J must be at least 1".into()));
    }
    let distinct = ((2.0 * b.half_angle * b.center_radius / dxi).ceil() as usize).max(1);
    let (j_eff, clamped_from) = if j > distinct { (distinct, Some(j)) } else { (j, None) };
    let spacing = 2.0 * b.half_angle / j_eff as f64;
    let lo = b.theta - b.half_angle;
    let centres = (0..j_eff).map(|k| lo + (k as f64 + 0.5) * spacing).collect();
    Ok(ConeWindows { centres, spacing, clamped_from })
}

/// Default cone count `max(1, round(J0·2^{−(k−k0)/2}))`.
pub fn default_cone_count(k: u32, j0: f64, k0: u32) -> usize {
    (j0 * 2f64.powf(-(k as f64 - k0 as f64) / 2.0)).round().max(1.0) as usize
}

/// Separated cutoff of one cover set on one box: cone windows `Γ2^β` and the
/// profiles `Γ1^β(x̃) = Γ̌(x̃, ν̃_β)`.
#[derive(Clone, Debug)]
pub struct SeparatedCutoff {
    pub set: usize,
    pub box_id: usize,
    pub cones: ConeWindows,
}

impl SeparatedCutoff {
    pub fn profile(&self, cover: &Cover, beta: usize, xt: [f64; 2]) -> f64 {
        cover.weight_sheared(self.set, xt, self.cones.centres[beta])
    }

    pub fn reconstruct(&self, cover: &Cover, xt: [f64; 2], theta_t: f64) -> f64 {
        (0..self.cones.count()).map(|b| self.profile(cover, b, xt) * self.cones.window(b, theta_t)).sum()
    }
}

pub fn separate(cover: &Cover, set: usize, b: &FrequencyBox, j: usize, dxi: f64) -> Result<SeparatedCutoff> {
    if set >= cover.sets.len() {
        return Err(Error::InvalidParameter(format!("no cover set {set}")));
    }
    Ok(SeparatedCutoff { set, box_id: b.id, cones: cone_windows(b, j, dxi)? })
}

/// `max |Γ̌ − Σ_β Γ1^β Γ2^β|` over lattice points `x` and angles in the box's range.
pub fn separation_error(cover: &Cover, sep: &SeparatedCutoff, b: &FrequencyBox, n_theta: usize) -> f64 {
    let lat = &cover.lattice;
    let mut err: f64 = 0.0;
    for i1 in 0..lat.nx[0] {
        for i2 in 0..lat.nx[1] {
            let x = lat.x(i1, i2);
            for it in 0..n_theta {
                let th = b.theta - b.half_angle + 2.0 * b.half_angle * (it as f64 + 0.5) / n_theta as f64;
                let exact = cover.weight_sheared(sep.set, x, th);
                err = err.max((exact - sep.reconstruct(cover, x, th)).abs());
            }
        }
    }
    err
}

//! Rank monitoring of `W1 = ∂y/∂x` over a sampled `(x, ν)` lattice, the
//! induced split into regular and caustic sets, and KMAH counting.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::FrequencyBox;
use crate::hamilton::{self, PropFrame, SymbolModel};
use crate::linalg::{self, M2, M4};

#[derive(Clone, Debug, PartialEq)]
pub struct RankProfile {
    /// 1-based coordinate indices spanning the null space; empty at full rank.
    pub deficient: Vec<usize>,
    pub null_basis: Vec<[f64; 2]>,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

pub fn rank_profile(w1: &M2, rank_tol: f64) -> Result<RankProfile> {
    if !(rank_tol > 1e-12 && rank_tol < 1e-2) {
        return Err(Error::InvalidParameter(format!("rank_tol {rank_tol:e} outside (1e-12, 1e-2)")));
    }
    if !w1.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("W1".into()));
    }
    let (smax, smin) = linalg::singular_values2(w1);
    let mut p = RankProfile { deficient: vec![], null_basis: vec![], sigma_max: smax, sigma_min: smin };
    if smax == 0.0 || smax <= rank_tol {
        p.deficient = vec![1, 2];
        p.null_basis = vec![[1.0, 0.0], [0.0, 1.0]];
    } else if smin <= rank_tol * smax {
        let v = linalg::null_vector2(w1);
        p.deficient = vec![if v[0].abs() > v[1].abs() { 1 } else { 2 }];
        p.null_basis = vec![v];
    }
    Ok(p)
}

/// Count sign changes of `det W1` sampled along a ray. A run of three or more
/// samples with `|det| ≤ zero_tol · max|det|` is a plateau and needs finer sampling.
pub fn kmah(det_samples: &[f64], zero_tol: f64) -> Result<u32> {
    if det_samples.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("det W1 samples".into()));
    }
    let scale = det_samples.iter().map(|d| d.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return if det_samples.len() < 3 { Ok(0) } else { Err(Error::RefineSampling("det W1 vanishes identically".into())) };
    }
    let thr = zero_tol * scale;
    let mut run = 0;
    let mut count = 0;
    let mut last = 0.0f64;
    for &d in det_samples {
        if d.abs() <= thr {
            run += 1;
            if run >= 3 {
                return Err(Error::RefineSampling("zero plateau of det W1".into()));
            }
        } else {
            run = 0;
        }
        if d != 0.0 {
            if last != 0.0 && d.signum() != last.signum() {
                count += 1;
            }
            last = d;
        }
    }
    Ok(count)
}

/// `(x1, x2, θ)` sample lattice; `θ` is the angle of the initial covector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausticLattice {
    pub x_lo: [f64; 2],
    pub dx: f64,
    pub nx: [usize; 2],
    pub theta_lo: f64,
    pub dtheta: f64,
    pub ntheta: usize,
}

impl CausticLattice {
    /// Lattice covering `[x_lo, x_hi]` and the angle range `[θ_lo, θ_hi]` with steps at most `δ_x`, `δ_ν`.
    pub fn covering(x_lo: [f64; 2], x_hi: [f64; 2], dx: f64, theta_lo: f64, theta_hi: f64, dtheta: f64) -> Result<Self> {
        if !(dx > 0.0 && dtheta > 0.0) || x_hi[0] < x_lo[0] || x_hi[1] < x_lo[1] || theta_hi < theta_lo {
            return Err(Error::InvalidParameter("degenerate caustic lattice".into()));
        }
        let n = |a: f64, b: f64| ((b - a) / dx).round() as usize + 1;
        let nt = ((theta_hi - theta_lo) / dtheta - 1e-9).ceil().max(0.0) as usize + 1;
        let dt = if nt > 1 { (theta_hi - theta_lo) / (nt - 1) as f64 } else { 0.0 };
        Ok(Self { x_lo, dx, nx: [n(x_lo[0], x_hi[0]), n(x_lo[1], x_hi[1])], theta_lo, dtheta: dt.max(f64::MIN_POSITIVE), ntheta: nt })
    }

    /// Lattice over the full angular support of a box.
    pub fn for_box(b: &FrequencyBox, x_lo: [f64; 2], x_hi: [f64; 2], dx: f64, dtheta: f64) -> Result<Self> {
        Self::covering(x_lo, x_hi, dx, b.theta - b.half_angle, b.theta + b.half_angle, dtheta)
    }

    pub fn len(&self) -> usize {
        self.nx[0] * self.nx[1] * self.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i1: usize, i2: usize, it: usize) -> usize {
        (it * self.nx[0] + i1) * self.nx[1] + i2
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i2 = idx % self.nx[1];
        let r = idx / self.nx[1];
        (r % self.nx[0], i2, r / self.nx[0])
    }

    pub fn x(&self, i1: usize, i2: usize) -> [f64; 2] {
        [self.x_lo[0] + self.dx * i1 as f64, self.x_lo[1] + self.dx * i2 as f64]
    }

    pub fn theta(&self, it: usize) -> f64 {
        self.theta_lo + self.dtheta * it as f64
    }

    pub fn point(&self, idx: usize) -> ([f64; 2], f64) {
        let (i1, i2, it) = self.coords(idx);
        (self.x(i1, i2), self.theta(it))
    }

    /// Face neighbours (4 in the `x` plane, 2 across `θ`).
    pub fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (i1, i2, it) = self.coords(idx);
        let cand = [
            (i1 as i64 - 1, i2 as i64, it as i64),
            (i1 as i64 + 1, i2 as i64, it as i64),
            (i1 as i64, i2 as i64 - 1, it as i64),
            (i1 as i64, i2 as i64 + 1, it as i64),
            (i1 as i64, i2 as i64, it as i64 - 1),
            (i1 as i64, i2 as i64, it as i64 + 1),
        ];
        cand.into_iter().filter_map(move |(a, b, c)| {
            if a < 0 || b < 0 || c < 0 || a >= self.nx[0] as i64 || b >= self.nx[1] as i64 || c >= self.ntheta as i64 {
                None
            } else {
                Some(self.index(a as usize, b as usize, c as usize))
            }
        })
    }

    /// Fractional lattice coordinates of a continuous point.
    pub fn frac(&self, x: [f64; 2], theta: f64) -> [f64; 3] {
        [(x[0] - self.x_lo[0]) / self.dx, (x[1] - self.x_lo[1]) / self.dx, (theta - self.theta_lo) / self.dtheta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausticSample {
    pub det_w1: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Bitmask of deficient Fermi coordinates (bit 0 → index 1).
    pub deficient: u8,
    pub y: [f64; 2],
    pub kmah: u32,
    pub masked: bool,
    /// Cartesian `Π(x, ν; t1, t0)` (zero when masked).
    pub propagator: M4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetKind {
    /// Regular set with `det W1 > 0`.
    Positive,
    /// Neighbourhood of the singular surface; needs a shear.
    Caustic,
    /// Regular set with `det W1 < 0`.
    Negative,
}

impl SetKind {
    pub fn code(self) -> u8 {
        match self {
            SetKind::Positive => 1,
            SetKind::Caustic => 2,
            SetKind::Negative => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetInfo {
    pub id: usize,
    pub kind: SetKind,
    pub count: usize,
    /// Most frequent KMAH index among its samples.
    pub kmah: u32,
}

/// Linear-interpolated zero of `det W1` between lattice samples `pair`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaPoint {
    pub x: [f64; 2],
    pub theta: f64,
    pub pair: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cusp {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub rank_tol: f64,
    /// Samples with `σ_min/σ_max` below this join the caustic set.
    pub admissibility_tol: f64,
    pub rtol: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { rank_tol: 1e-6, admissibility_tol: 0.3, rtol: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct CausticMap {
    pub lattice: CausticLattice,
    pub t0: f64,
    pub t1: f64,
    pub options: DetectOptions,
    pub samples: Vec<CausticSample>,
    pub labels: Vec<SetKind>,
    /// Connected-component id per sample, indexing `sets`.
    pub component: Vec<usize>,
    pub sets: Vec<SetInfo>,
    /// Sub-lattice sign-change points of `det W1`.
    pub sigma: Vec<SigmaPoint>,
    pub cusps: Vec<Cusp>,
}

impl CausticMap {
    pub fn has_cusp(&self) -> bool {
        !self.cusps.is_empty()
    }

    pub fn set_count(&self) -> usize {
        self.sets.len()
    }

    pub fn mask_of(&self, kind: SetKind) -> Vec<bool> {
        self.labels.iter().map(|l| *l == kind).collect()
    }

    pub fn count_of(&self, kind: SetKind) -> usize {
        self.labels.iter().filter(|l| **l == kind).count()
    }
}

/// Trace every lattice ray to time `t1`, label samples and find Σ and cusps.
pub fn detect(model: &SymbolModel, lat: &CausticLattice, t0: f64, t1: f64, opt: &DetectOptions) -> Result<CausticMap> {
    if !(opt.admissibility_tol > 0.0 && opt.admissibility_tol < 1.0) {
        return Err(Error::InvalidParameter("admissibility_tol must lie in (0, 1)".into()));
    }
    rank_profile(&linalg::I2, opt.rank_tol)?;
    let samples: Vec<CausticSample> = (0..lat.len())
        .into_par_iter()
        .map(|idx| {
            let (x, th) = lat.point(idx);
            trace_sample(model, x, th, t0, t1, opt)
        })
        .collect();

    let mut labels = vec![SetKind::Positive; samples.len()];
    for (idx, s) in samples.iter().enumerate() {
        let mut caustic = s.masked || s.deficient != 0 || s.sigma_min < opt.admissibility_tol * s.sigma_max;
        if !caustic {
            caustic = lat.neighbours(idx).any(|n| {
                let o = &samples[n];
                o.masked || o.det_w1.signum() != s.det_w1.signum()
            });
        }
        labels[idx] = if caustic {
            SetKind::Caustic
        } else if s.det_w1 > 0.0 {
            SetKind::Positive
        } else {
            SetKind::Negative
        };
    }

    let (component, sets) = components(lat, &labels, &samples);
    let sigma = sign_changes(lat, &samples);
    let cusps = find_cusps(model, lat, &samples, t0, t1, opt.rtol)?;
    Ok(CausticMap { lattice: *lat, t0, t1, options: *opt, samples, labels, component, sets, sigma, cusps })
}

fn trace_sample(model: &SymbolModel, x: [f64; 2], th: f64, t0: f64, t1: f64, opt: &DetectOptions) -> CausticSample {
    let masked = CausticSample {
        det_w1: 0.0,
        sigma_max: 0.0,
        sigma_min: 0.0,
        deficient: 3,
        y: [f64::NAN; 2],
        kmah: 0,
        masked: true,
        propagator: [[0.0; 4]; 4],
    };
    let Ok((tr, p)) = hamilton::propagator(model, x, [th.cos(), th.sin()], t0, t1, opt.rtol, PropFrame::Fermi) else {
        return masked;
    };
    if tr.truncated {
        return masked;
    }
    let w1 = p.w1();
    let Ok(rp) = rank_profile(&w1, opt.rank_tol) else {
        return masked;
    };
    let deficient = rp.deficient.iter().fold(0u8, |m, i| m | (1 << (i - 1)));
    let kmah = kmah(&tr.det_w1_samples(), 1e-12).unwrap_or(0);
    let propagator = tr.propagator_end(PropFrame::Cartesian).m;
    CausticSample { det_w1: linalg::det2(&w1), sigma_max: rp.sigma_max, sigma_min: rp.sigma_min, deficient, y: tr.end().y, kmah, masked: false, propagator }
}

fn components(lat: &CausticLattice, labels: &[SetKind], samples: &[CausticSample]) -> (Vec<usize>, Vec<SetInfo>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sets = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sets.len();
        let kind = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut count = 0;
        let mut hist = std::collections::BTreeMap::<u32, usize>::new();
        while let Some(i) = queue.pop_front() {
            count += 1;
            *hist.entry(samples[i].kmah).or_default() += 1;
            for n in lat.neighbours(i) {
                if comp[n] == usize::MAX && labels[n] == kind {
                    comp[n] = id;
                    queue.push_back(n);
                }
            }
        }
        let kmah = hist.iter().max_by_key(|(_, c)| **c).map(|(k, _)| *k).unwrap_or(0);
        sets.push(SetInfo { id, kind, count, kmah });
    }
    (comp, sets)
}

fn sign_changes(lat: &CausticLattice, s: &[CausticSample]) -> Vec<SigmaPoint> {
    let mut out = Vec::new();
    for it in 0..lat.ntheta {
        for i1 in 0..lat.nx[0] {
            for i2 in 0..lat.nx[1] {
                let a = &s[lat.index(i1, i2, it)];
                if a.masked {
                    continue;
                }
                let th = lat.theta(it);
                let ia = lat.index(i1, i2, it);
                let x = lat.x(i1, i2);
                for (ib, dir) in [(i1 + 1 < lat.nx[0], 0usize), (i2 + 1 < lat.nx[1], 1)]
                    .into_iter()
                    .filter(|(ok, _)| *ok)
                    .map(|(_, d)| (if d == 0 { lat.index(i1 + 1, i2, it) } else { lat.index(i1, i2 + 1, it) }, d))
                {
                    let b = &s[ib];
                    if !b.masked && a.det_w1 * b.det_w1 < 0.0 {
                        let f = a.det_w1 / (a.det_w1 - b.det_w1);
                        let mut p = x;
                        p[dir] += f * lat.dx;
                        out.push(SigmaPoint { x: p, theta: th, pair: (ia, ib) });
                    }
                }
            }
        }
    }
    out
}

/// Walk the singular curve of the central angle slice (one crossing per `x1`
/// column, first in increasing `x2`), map it to `y` and report tangent reversals.
fn find_cusps(model: &SymbolModel, lat: &CausticLattice, s: &[CausticSample], t0: f64, t1: f64, rtol: f64) -> Result<Vec<Cusp>> {
    let it = lat.ntheta / 2;
    let th = lat.theta(it);
    let mut curve = Vec::new();
    for i1 in 0..lat.nx[0] {
        for i2 in 0..lat.nx[1].saturating_sub(1) {
            let a = &s[lat.index(i1, i2, it)];
            let b = &s[lat.index(i1, i2 + 1, it)];
            if !a.masked && !b.masked && a.det_w1 * b.det_w1 < 0.0 {
                let f = a.det_w1 / (a.det_w1 - b.det_w1);
                let x = lat.x(i1, i2);
                curve.push([x[0], x[1] + f * lat.dx]);
                break;
            }
        }
    }
    let ys: Vec<Option<[f64; 2]>> = curve
        .par_iter()
        .map(|x| {
            let tr = hamilton::flow(model, *x, [th.cos(), th.sin()], t0, t1, rtol).ok()?;
            (!tr.truncated).then(|| tr.end().y)
        })
        .collect();
    let mut cusps = Vec::new();
    let pts: Vec<([f64; 2], [f64; 2])> = curve.iter().zip(&ys).filter_map(|(x, y)| y.map(|y| (*x, y))).collect();
    for w in pts.windows(3) {
        let t_a = [w[1].1[0] - w[0].1[0], w[1].1[1] - w[0].1[1]];
        let t_b = [w[2].1[0] - w[1].1[0], w[2].1[1] - w[1].1[1]];
        if t_a[0] * t_b[0] + t_a[1] * t_b[1] < 0.0 {
            cusps.push(Cusp { x: w[1].0, y: w[1].1, theta: th });
        }
    }
    Ok(cusps)
}

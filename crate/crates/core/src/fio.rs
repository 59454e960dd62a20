//! Box algorithm: generating-function tables per box direction, the low-rank
//! separation of the second-order phase kernel, and the assembled action of
//! the factorized operator `Σ_ij F̌_ij Q_ij`.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::caustic;
use crate::diffeo::{self, DiffeoParams, RedecomposeOptions, RedecompositionReport};
use crate::error::{Error, Result};
use crate::frame::{self, wrap_angle, FrequencyBox, Tiling};
use crate::grid::{Field, Grid, C64};
use crate::hamilton::{self, PropFrame, SymbolModel};
use crate::linalg::{self, M2, M4};
use crate::nufft::{self, SampledSpectrum};
use crate::partition::{self, ConeWindows, Cover};

/// Regular `y` grid of a table; node `(i1, i2)` is stored at `i1·n[1] + i2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableGrid {
    pub lo: [f64; 2],
    pub h: f64,
    pub n: [usize; 2],
}

impl TableGrid {
    pub fn covering(lo: [f64; 2], hi: [f64; 2], h: f64) -> Result<Self> {
        if !(h > 0.0) || hi[0] < lo[0] || hi[1] < lo[1] {
            return Err(Error::InvalidParameter("degenerate table grid".into()));
        }
        let n = |a: f64, b: f64| ((b - a) / h).ceil() as usize + 1;
        Ok(Self { lo, h, n: [n(lo[0], hi[0]), n(lo[1], hi[1])] })
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> [f64; 2] {
        [self.lo[0] + self.h * (idx / self.n[1]) as f64, self.lo[1] + self.h * (idx % self.n[1]) as f64]
    }

    pub fn hi(&self) -> [f64; 2] {
        [self.lo[0] + self.h * (self.n[0] - 1) as f64, self.lo[1] + self.h * (self.n[1] - 1) as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableNode {
    /// `T(y) = ∂Š/∂ξ̃(y, ν̃)`.
    pub t: [f64; 2],
    /// `∂²Š/∂ξ''²` at the unit direction.
    pub hess: f64,
    pub det_w1: f64,
    pub kmah: u32,
    /// `Γ1(y) = Γ̌(T(y), ν̃)`.
    pub gamma: f64,
}

/// Tables for one direction. A node holds one entry per branch of the inverse
/// map `y ↦ x̃`; beyond a cusp the same set can reach `y` along several rays.
#[derive(Clone, Debug)]
pub struct GeneratingTables {
    pub theta: f64,
    pub nu: [f64; 2],
    pub diffeo: Option<DiffeoParams>,
    pub grid: TableGrid,
    pub nodes: Vec<Vec<TableNode>>,
    pub kmah_phase: bool,
}

/// Table values interpolated at one output point on one branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableSample {
    pub t: [f64; 2],
    pub hess: f64,
    pub amp: C64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl GeneratingTables {
    /// `Š(y, ν̃) = ⟨T(y), ν̃⟩` on branch `br`.
    pub fn phase(&self, idx: usize, br: usize) -> Option<f64> {
        self.nodes[idx].get(br).map(|n| n.t[0] * self.nu[0] + n.t[1] * self.nu[1])
    }

    /// `Ǎ = Γ1 · |det W̌1|^{-1/2} · e^{−iπm/2}`.
    pub fn amplitude(&self, n: &TableNode) -> C64 {
        let a = n.gamma / n.det_w1.abs().sqrt();
        if self.kmah_phase {
            C64::from_polar(a, -0.5 * PI * n.kmah as f64)
        } else {
            C64::new(a, 0.0)
        }
    }

    /// Nodes with at least one branch.
    pub fn valid_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_empty()).count()
    }

    pub fn max_branches(&self) -> usize {
        self.nodes.iter().map(|n| n.len()).max().unwrap_or(0)
    }

    /// Bilinear interpolation per branch. Branches of the lower-left corner are
    /// continued to the other corners by nearest `T`; a branch missing at any
    /// corner, or matched ambiguously, is dropped for this cell.
    pub fn interpolate(&self, y: [f64; 2]) -> Vec<TableSample> {
        let g = &self.grid;
        let f = [(y[0] - g.lo[0]) / g.h, (y[1] - g.lo[1]) / g.h];
        if f[0] < 0.0 || f[1] < 0.0 || g.n[0] < 2 || g.n[1] < 2 {
            return Vec::new();
        }
        let i = [f[0].floor() as usize, f[1].floor() as usize];
        if i[0] + 1 >= g.n[0] || i[1] + 1 >= g.n[1] {
            return Vec::new();
        }
        let u = [f[0] - i[0] as f64, f[1] - i[1] as f64];
        let corner = |a: usize, b: usize| &self.nodes[(i[0] + a) * g.n[1] + i[1] + b];
        let mut out = Vec::new();
        'branch: for base in corner(0, 0) {
            let mut smp = TableSample { t: [0.0; 2], hess: 0.0, amp: C64::new(0.0, 0.0) };
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let list = corner(a, b);
                let mut best: Option<(&TableNode, f64)> = None;
                let mut second = f64::INFINITY;
                for n in list {
                    let d = dist(n.t, base.t);
                    match best {
                        Some((_, bd)) if d >= bd => second = second.min(d),
                        Some((_, bd)) => {
                            second = bd;
                            best = Some((n, d));
                        }
                        None => best = Some((n, d)),
                    }
                }
                let Some((n, d)) = best else { continue 'branch };
                if d > 0.5 * second {
                    continue 'branch;
                }
                let w = (if a == 1 { u[0] } else { 1.0 - u[0] }) * (if b == 1 { u[1] } else { 1.0 - u[1] });
                smp.t[0] += w * n.t[0];
                smp.t[1] += w * n.t[1];
                smp.hess += w * n.hess;
                smp.amp += self.amplitude(n) * w;
            }
            out.push(smp);
        }
        out
    }

    pub fn hess_values(&self) -> Vec<f64> {
        self.nodes.iter().flatten().map(|n| n.hess).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableOptions {
    pub rtol: f64,
    /// Table grid spacing in `y`.
    pub spacing: f64,
    /// Newton stops when `|y(x̃) − y| ≤ newton_tol`.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub kmah_phase: bool,
    /// Margin added around the image of the seeds.
    pub pad: f64,
    /// Output rectangle the table is restricted to.
    pub window: Option<([f64; 2], [f64; 2])>,
    /// Nodes with `σ_min/σ_max(W̌1)` below this are masked.
    pub min_rank_ratio: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, spacing: 0.2, newton_tol: 1e-8, max_newton: 12, kmah_phase: true, pad: 0.4, window: None, min_rank_ratio: 0.05 }
    }
}

/// Source points `x̃` used to locate the image of a set and to start Newton.
#[derive(Clone, Debug, PartialEq)]
pub struct Seeds {
    pub points: Vec<[f64; 2]>,
    pub spacing: f64,
}

impl Seeds {
    /// Regular lattice over `[lo, hi]`.
    pub fn lattice(lo: [f64; 2], hi: [f64; 2], spacing: f64) -> Self {
        let n = |a: f64, b: f64| ((b - a) / spacing).round() as usize + 1;
        let (n1, n2) = (n(lo[0], hi[0]), n(lo[1], hi[1]));
        let points = (0..n1 * n2).map(|i| [lo[0] + spacing * (i / n2) as f64, lo[1] + spacing * (i % n2) as f64]).collect();
        Self { points, spacing }
    }
}

struct RayEval {
    y: [f64; 2],
    w1: M2,
    w2: M2,
    kmah: u32,
}

fn eval_ray(model: &SymbolModel, t0: f64, t1: f64, xt: [f64; 2], nu: [f64; 2], diffeo: Option<&DiffeoParams>, rtol: f64) -> Option<RayEval> {
    let (x, xi, right): ([f64; 2], [f64; 2], M4) = match diffeo {
        None => (xt, nu, linalg::eye4()),
        Some(p) => {
            let (x, xi) = p.cq_inv(xt, nu);
            (x, xi, p.pi_q_inv(xt, nu))
        }
    };
    let (tr, pm) = hamilton::propagator(model, x, xi, t0, t1, rtol, PropFrame::Cartesian).ok()?;
    if tr.truncated {
        return None;
    }
    let pc = linalg::mul4(&pm.m, &right);
    let kmah = caustic::kmah(&tr.det_w1_composed(&right), 1e-12).ok()?;
    Some(RayEval { y: tr.end().y, w1: linalg::block(&pc, 0, 0), w2: linalg::block(&pc, 0, 1), kmah })
}

/// Newton starts per node; a canonical graph has at most a few preimages per output point.
const MAX_STARTS: usize = 4;

/// Tables of `F̌ = F Q⁻¹` (or `F` without a shear) for the direction `θ̃`.
/// `weight` is `Γ̌(·, ν̃)` as a function of `x̃`; nodes where it vanishes are masked.
#[allow(clippy::too_many_arguments)]
pub fn build_tables(
    model: &SymbolModel,
    t0: f64,
    t1: f64,
    theta: f64,
    diffeo: Option<&DiffeoParams>,
    seeds: &Seeds,
    weight: &(dyn Fn([f64; 2]) -> f64 + Sync),
    opt: &TableOptions,
) -> Result<GeneratingTables> {
    if !(opt.spacing > 0.0 && opt.newton_tol > 0.0 && opt.max_newton > 0) {
        return Err(Error::InvalidParameter("table spacing, Newton tolerance and iteration cap must be positive".into()));
    }
    let nu = [theta.cos(), theta.sin()];
    let traced: Vec<([f64; 2], RayEval)> = seeds
        .points
        .par_iter()
        .filter(|x| weight(**x) > 0.0)
        .filter_map(|&x| eval_ray(model, t0, t1, x, nu, diffeo, opt.rtol).map(|r| (x, r)))
        .collect();
    let empty = |grid| GeneratingTables { theta, nu, diffeo: diffeo.copied(), grid, nodes: vec![Vec::new()], kmah_phase: opt.kmah_phase };
    if traced.is_empty() {
        return Ok(empty(TableGrid { lo: [0.0; 2], h: opt.spacing, n: [1, 1] }));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (_, r) in &traced {
        for a in 0..2 {
            lo[a] = lo[a].min(r.y[a]);
            hi[a] = hi[a].max(r.y[a]);
        }
    }
    let snap = |v: f64, up: bool| {
        let s = v / opt.spacing;
        opt.spacing * if up { s.ceil() } else { s.floor() }
    };
    let mut lo = [lo[0] - opt.pad, lo[1] - opt.pad];
    let mut hi = [hi[0] + opt.pad, hi[1] + opt.pad];
    if let Some((wl, wh)) = opt.window {
        for a in 0..2 {
            lo[a] = lo[a].max(wl[a]);
            hi[a] = hi[a].min(wh[a]);
        }
        if lo[0] > hi[0] || lo[1] > hi[1] {
            return Ok(empty(TableGrid { lo: [0.0; 2], h: opt.spacing, n: [1, 1] }));
        }
    }
    let grid = TableGrid::covering([snap(lo[0], false), snap(lo[1], false)], [snap(hi[0], true), snap(hi[1], true)], opt.spacing)?;
    let reach: Vec<f64> = traced.iter().map(|(_, r)| 1.5 * seeds.spacing * linalg::singular_values2(&r.w1).0 + opt.spacing).collect();

    let inverses: Vec<Option<M2>> = traced.iter().map(|(_, r)| linalg::inv2(&r.w1)).collect();
    let cluster = (2.0 * seeds.spacing).max(0.5);
    let newton = |y: [f64; 2], mut xt: [f64; 2]| -> Option<TableNode> {
        for _ in 0..opt.max_newton {
            let r = eval_ray(model, t0, t1, xt, nu, diffeo, opt.rtol)?;
            let res = [y[0] - r.y[0], y[1] - r.y[1]];
            let inv = linalg::inv2(&r.w1)?;
            if res[0].hypot(res[1]) <= opt.newton_tol {
                let gamma = weight(xt);
                let (smax, smin) = linalg::singular_values2(&r.w1);
                if gamma <= 0.0 || smin < opt.min_rank_ratio * smax {
                    return None;
                }
                let perp = [-nu[1], nu[0]];
                let dx = linalg::mul2(&inv, &r.w2);
                let hess = -(perp[0] * (dx[0][0] * perp[0] + dx[0][1] * perp[1]) + perp[1] * (dx[1][0] * perp[0] + dx[1][1] * perp[1]));
                return Some(TableNode { t: xt, hess, det_w1: linalg::det2(&r.w1), kmah: r.kmah, gamma });
            }
            let mut s = linalg::mv2(&inv, res);
            let len = s[0].hypot(s[1]);
            if len > 1.0 {
                s = [s[0] / len, s[1] / len];
            }
            xt = [xt[0] + s[0], xt[1] + s[1]];
        }
        None
    };
    let nodes: Vec<Vec<TableNode>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let y = grid.point(idx);
            // linear predictions of the preimage from every seed in reach, nearest first;
            // a prediction is trusted when it stays inside the seed's own cell
            let local = 1.5 * seeds.spacing;
            let mut cands: Vec<(f64, [f64; 2], bool)> = traced
                .iter()
                .zip(&inverses)
                .zip(&reach)
                .filter_map(|(((x_s, r_s), inv), reach)| {
                    let d = dist(r_s.y, y);
                    if d > *reach {
                        return None;
                    }
                    let step = linalg::mv2(inv.as_ref()?, [y[0] - r_s.y[0], y[1] - r_s.y[1]]);
                    Some((d, [x_s[0] + step[0], x_s[1] + step[1]], step[0].hypot(step[1]) <= local))
                })
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            if cands.iter().any(|c| c.2) {
                cands.retain(|c| c.2);
            } else {
                cands.truncate(1);
            }
            let mut starts: Vec<[f64; 2]> = Vec::new();
            for (_, p, _) in cands {
                if starts.len() < MAX_STARTS && starts.iter().all(|s| dist(*s, p) > cluster) {
                    starts.push(p);
                }
            }
            let mut found: Vec<TableNode> = Vec::new();
            for s0 in starts {
                if found.iter().any(|f| dist(f.t, s0) <= 0.5 * cluster) {
                    continue;
                }
                if let Some(n) = newton(y, s0) {
                    if found.iter().all(|f| dist(f.t, n.t) > 1e-5) {
                        found.push(n);
                    }
                }
            }
            found
        })
        .collect();
    Ok(GeneratingTables { theta, nu, diffeo: diffeo.copied(), grid, nodes, kmah_phase: opt.kmah_phase })
}

/// Quadratic transverse variable `q = ξ''² / (2ξ')` relative to `ν̃`.
pub fn kernel_q(xi: [f64; 2], nu: [f64; 2]) -> f64 {
    let a = xi[0] * nu[0] + xi[1] * nu[1];
    let b = -xi[0] * nu[1] + xi[1] * nu[0];
    if a > 0.0 {
        b * b / (2.0 * a)
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
struct Cheb {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Cheb {
    fn new(lo: f64, hi: f64, n: usize) -> Self {
        let nodes = (0..n)
            .map(|i| {
                let c = (PI * (2 * i + 1) as f64 / (2 * n) as f64).cos();
                0.5 * (lo + hi) + 0.5 * (hi - lo) * c
            })
            .collect();
        let weights = (0..n)
            .map(|i| {
                let s = (PI * (2 * i + 1) as f64 / (2 * n) as f64).sin();
                if i % 2 == 0 {
                    s
                } else {
                    -s
                }
            })
            .collect();
        Self { nodes, weights }
    }

    /// Barycentric interpolation weights at `x`.
    fn basis(&self, x: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.nodes.len()];
        for (i, xi) in self.nodes.iter().enumerate() {
            if x == *xi {
                b[i] = 1.0;
                return b;
            }
        }
        let mut s = 0.0;
        for i in 0..b.len() {
            b[i] = self.weights[i] / (x - self.nodes[i]);
            s += b[i];
        }
        b.iter_mut().for_each(|v| *v /= s);
        b
    }

    fn eval(&self, vals: &[C64], x: f64) -> C64 {
        self.basis(x).iter().zip(vals).map(|(b, v)| v * *b).sum()
    }
}

fn node_count(bandwidth: f64) -> usize {
    ((1.3 * bandwidth).ceil() as usize + 18).clamp(8, 256)
}

#[derive(Clone, Debug)]
enum KernelFactors {
    /// `H ≡ h0`: one term, `α ≡ 1`, `θ(q) = e^{i h0 q}`.
    Constant(f64),
    Interpolated { h: Cheb, q: Cheb, alpha: Vec<Vec<C64>>, theta: Vec<Vec<C64>> },
}

/// `exp(i H q) ≈ Σ_r α_r(H) θ_r(q)`.
#[derive(Clone, Debug)]
pub struct LowRankKernel {
    pub rank: usize,
    pub eps: f64,
    /// Max error over the checked product lattice.
    pub achieved: f64,
    factors: KernelFactors,
}

impl LowRankKernel {
    pub fn alpha(&self, r: usize, h: f64) -> C64 {
        match &self.factors {
            KernelFactors::Constant(_) => C64::new(1.0, 0.0),
            KernelFactors::Interpolated { h: c, alpha, .. } => c.eval(&alpha[r], h),
        }
    }

    pub fn theta(&self, r: usize, q: f64) -> C64 {
        match &self.factors {
            KernelFactors::Constant(h0) => C64::from_polar(1.0, h0 * q),
            KernelFactors::Interpolated { q: c, theta, .. } => c.eval(&theta[r], q),
        }
    }

    pub fn eval(&self, h: f64, q: f64) -> C64 {
        (0..self.rank).map(|r| self.alpha(r, h) * self.theta(r, q)).sum()
    }
}

fn subsample(v: &[f64], cap: usize) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    if s.len() <= cap {
        return s;
    }
    (0..cap).map(|i| s[i * (s.len() - 1) / (cap - 1)]).collect()
}

/// Truncated-SVD separation of `exp(i H q)` over the ranges of `h_values`
/// and `q_values`; the smallest rank meeting `eps` on the sampled product lattice.
pub fn lowrank_kernel(h_values: &[f64], q_values: &[f64], eps: f64, rank_cap: usize) -> Result<LowRankKernel> {
    if !(eps > 1e-10 && eps < 1e-2) {
        return Err(Error::InvalidParameter(format!("kernel accuracy {eps:e} outside (1e-10, 1e-2)")));
    }
    if h_values.iter().chain(q_values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel samples".into()));
    }
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let (hmin, hmax) = range(h_values);
    if h_values.is_empty() || q_values.is_empty() || hmax - hmin <= 1e-14 * (1.0 + hmax.abs()) {
        let h0 = if h_values.is_empty() { 0.0 } else { hmin };
        return Ok(LowRankKernel { rank: 1, eps, achieved: 0.0, factors: KernelFactors::Constant(h0) });
    }
    let (qmin, qmax) = range(q_values);
    let qabs = qmin.abs().max(qmax.abs());
    let habs = hmin.abs().max(hmax.abs());
    let ch = Cheb::new(hmin, hmax, node_count(0.5 * (hmax - hmin) * qabs));
    let cq = if qmax - qmin > 1e-14 * (1.0 + qabs) { Cheb::new(qmin, qmax, node_count(0.5 * (qmax - qmin) * habs)) } else { Cheb::new(qmin, qmin, 1) };
    let (nh, nq) = (ch.nodes.len(), cq.nodes.len());
    let k = DMatrix::from_fn(nh, nq, |i, j| C64::from_polar(1.0, ch.nodes[i] * cq.nodes[j]));
    let svd = k.svd(true, true);
    let (u, vt) = (svd.u.as_ref().expect("u"), svd.v_t.as_ref().expect("v_t"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));

    let hs = subsample(h_values, 256);
    let qs = subsample(q_values, 2048);
    let bh: Vec<Vec<f64>> = hs.iter().map(|h| ch.basis(*h)).collect();
    let bq: Vec<Vec<f64>> = qs.iter().map(|q| cq.basis(*q)).collect();
    let exact: Vec<C64> = hs.iter().flat_map(|h| qs.iter().map(move |q| C64::from_polar(1.0, h * q))).collect();
    let mut approx = vec![C64::new(0.0, 0.0); exact.len()];
    let (mut alpha, mut theta) = (Vec::new(), Vec::new());
    let cap = rank_cap.min(order.len());
    let mut achieved = f64::INFINITY;
    for &r in order.iter().take(cap) {
        let s = svd.singular_values[r];
        let a: Vec<C64> = (0..nh).map(|i| u[(i, r)]).collect();
        let t: Vec<C64> = (0..nq).map(|j| vt[(r, j)] * s).collect();
        let av: Vec<C64> = bh.iter().map(|b| b.iter().zip(&a).map(|(w, v)| v * *w).sum()).collect();
        let tv: Vec<C64> = bq.iter().map(|b| b.iter().zip(&t).map(|(w, v)| v * *w).sum()).collect();
        achieved = 0.0;
        for (i, ai) in av.iter().enumerate() {
            for (j, tj) in tv.iter().enumerate() {
                let idx = i * qs.len() + j;
                approx[idx] += ai * tj;
                achieved = achieved.max((approx[idx] - exact[idx]).norm());
            }
        }
        alpha.push(a);
        theta.push(t);
        if achieved <= eps {
            let rank = alpha.len();
            return Ok(LowRankKernel { rank, eps, achieved, factors: KernelFactors::Interpolated { h: ch, q: cq, alpha, theta } });
        }
    }
    Err(Error::RankCap { rank: alpha.len(), achieved })
}

/// Angle of `ξ` on the branch of `centre`.
fn angle_near(xi: [f64; 2], centre: f64) -> f64 {
    centre + wrap_angle(xi[1].atan2(xi[0]) - centre)
}

/// Kernel for one (table, box, cone): `H` over the table, `q` over the cone's part of the box.
pub fn kernel_for(tables: &GeneratingTables, spec: &SampledSpectrum, b: &FrequencyBox, cone: Option<(&ConeWindows, usize)>, eps: f64, rank_cap: usize) -> Result<LowRankKernel> {
    let qs: Vec<f64> = (0..spec.len())
        .filter(|&l| spec.values[l] != C64::new(0.0, 0.0) || cone.is_none())
        .filter(|&l| cone.is_none_or(|(c, beta)| c.window(beta, angle_near(spec.xi(l), b.theta)) > 0.0))
        .map(|l| kernel_q(spec.xi(l), tables.nu))
        .collect();
    lowrank_kernel(&tables.hess_values(), &qs, eps, rank_cap)
}

/// `Ǎ(y) Σ_r α_r(y) Σ_ξ e^{i⟨T(y), ξ⟩} Γ2^β(ξ) θ_r(ξ) ĝ(ξ)` on the output grid,
/// where `ĝ` is the box spectrum (already carrying `|χ̂|²`).
pub fn apply_box(
    spec: &SampledSpectrum,
    b: &FrequencyBox,
    cone: Option<(&ConeWindows, usize)>,
    tables: &GeneratingTables,
    kernel: &LowRankKernel,
    out: &Grid,
    tol: f64,
) -> Result<Field> {
    let mut field = Field::zeros(*out);
    if spec.values.iter().all(|v| *v == C64::new(0.0, 0.0)) {
        return Ok(field);
    }
    let (lo, hi) = (tables.grid.lo, tables.grid.hi());
    let h = out.h();
    let range = |a: usize| {
        let i0 = ((lo[a] - out.origin[a]) / h).ceil().max(0.0) as usize;
        let i1 = (((hi[a] - out.origin[a]) / h).floor().max(-1.0) + 1.0).min(out.n as f64) as usize;
        i0..i1.max(i0)
    };
    let mut targets = Vec::new();
    let mut samples = Vec::new();
    for i1 in range(0) {
        for i2 in range(1) {
            for s in tables.interpolate(out.point(i1, i2)) {
                if s.amp != C64::new(0.0, 0.0) {
                    targets.push(s.t);
                    samples.push((i1 * out.n + i2, s));
                }
            }
        }
    }
    if targets.is_empty() {
        return Ok(field);
    }
    let windowed = match cone {
        None => spec.clone(),
        Some((c, beta)) => spec.weighted(|xi| C64::new(c.window(beta, angle_near(xi, b.theta)), 0.0)),
    };
    let mut acc = vec![C64::new(0.0, 0.0); targets.len()];
    for r in 0..kernel.rank {
        let s = windowed.weighted(|xi| kernel.theta(r, kernel_q(xi, tables.nu)));
        let g = nufft::eval_adjoint(&s, &targets, tol)?;
        for (j, (_, smp)) in samples.iter().enumerate() {
            acc[j] += kernel.alpha(r, smp.hess) * g[j];
        }
    }
    for (j, (idx, smp)) in samples.iter().enumerate() {
        field.data[*idx] += smp.amp * acc[j];
    }
    Ok(field)
}

/// Number of cones per box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConeCount {
    Fixed(usize),
    /// `max(1, round(J0·2^{−(k−k0)/2}))`.
    Default { j0: f64, k0: u32 },
}

impl ConeCount {
    pub fn at_scale(&self, k: u32) -> usize {
        match *self {
            ConeCount::Fixed(j) => j,
            ConeCount::Default { j0, k0 } => partition::default_cone_count(k, j0, k0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorOptions {
    pub cones: ConeCount,
    pub kernel_eps: f64,
    pub rank_cap: usize,
    pub nufft_tol: f64,
    pub table: TableOptions,
    /// Input boxes are taken in order of energy until the rest is below this fraction.
    pub box_precision: f64,
    /// `max_boxes == 0` picks [`diffeo::default_max_boxes`] per source scale.
    pub redecompose: RedecomposeOptions,
    /// Scale sheared contributions by `sqrt(total/synthesized)` of the re-decompositions.
    pub renormalize: bool,
    /// Seeds extend this far beyond the cover lattice. The partition is clamped
    /// there, so this is only safe where the continued weights are still right.
    pub seed_margin: f64,
    /// Seed spacing; Newton refines from the nearest seed image.
    pub seed_spacing: f64,
}

impl Default for OperatorOptions {
    fn default() -> Self {
        Self {
            cones: ConeCount::Fixed(1),
            kernel_eps: 1e-4,
            rank_cap: 48,
            nufft_tol: 1e-8,
            table: TableOptions::default(),
            box_precision: 1e-4,
            redecompose: RedecomposeOptions { max_boxes: 0, ..RedecomposeOptions::default() },
            renormalize: true,
            seed_margin: 0.0,
            seed_spacing: 0.4,
        }
    }
}

impl OperatorOptions {
    pub fn redecompose_at(&self, k: u32) -> RedecomposeOptions {
        let r = self.redecompose;
        if r.max_boxes == 0 {
            RedecomposeOptions { max_boxes: diffeo::default_max_boxes(k), ..r }
        } else {
            r
        }
    }
}

/// Per-(set, box, cone) preparation record.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEntry {
    pub set: usize,
    pub box_id: usize,
    pub beta: usize,
    pub theta: f64,
    pub rank: usize,
    pub kernel_error: f64,
    pub valid_nodes: usize,
}

#[derive(Clone, Debug)]
pub struct SetOutput {
    pub set: usize,
    pub name: String,
    pub field: Field,
    /// Source boxes that produced output.
    pub boxes: Vec<usize>,
    /// Re-decomposition reports of the sheared set, one per source box.
    pub reports: Vec<(usize, RedecompositionReport)>,
    pub renormalization: f64,
}

#[derive(Clone, Debug)]
pub struct ApplyResult {
    pub total: Field,
    pub sets: Vec<SetOutput>,
    pub input_boxes: Vec<usize>,
    /// Input energy fraction outside `input_boxes`.
    pub input_residual: f64,
}

impl ApplyResult {
    pub fn set(&self, name: &str) -> Option<&SetOutput> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn report_text(&self) -> String {
        let mut s = format!("input_boxes = {:?}\ninput_residual = {:.6e}\n", self.input_boxes, self.input_residual);
        for set in &self.sets {
            s.push_str(&format!("set {} boxes={} renormalization={:.9} energy={:.9e}\n", set.name, set.boxes.len(), set.renormalization, set.field.energy()));
            for (src, r) in &set.reports {
                s.push_str(&format!(
                    "  source {src}: selected={:?} captured={:.6} discarded={:.3e} residual={:.3e} reached={}\n",
                    r.selected, r.captured, r.discarded, r.residual, r.reached_precision
                ));
            }
        }
        s
    }
}

struct Prepared {
    tables: GeneratingTables,
    kernels: Option<LowRankKernel>,
}

/// Prepared operator `F = Σ F̌_ij Q_ij` over a cover; tables are built on first use and cached.
pub struct Operator<'a> {
    pub model: &'a SymbolModel,
    pub tiling: &'a Tiling,
    pub cover: &'a Cover,
    pub t0: f64,
    pub t1: f64,
    pub opt: OperatorOptions,
    cache: HashMap<(usize, usize, usize), Prepared>,
    pub log: Vec<PreparedEntry>,
}

/// Table spacing for box `b`: `cap`, but at most `2^{-k/2}` times the packet's transverse width `2π/L⊥`.
pub fn table_spacing(b: &FrequencyBox, cap: f64) -> f64 {
    let width = 2.0 * std::f64::consts::PI / b.length_perp;
    cap.min(width * 2f64.powf(-(b.scale_k as f64) / 2.0))
}

impl<'a> Operator<'a> {
    pub fn new(model: &'a SymbolModel, tiling: &'a Tiling, cover: &'a Cover, t0: f64, t1: f64, opt: OperatorOptions) -> Self {
        Self { model, tiling, cover, t0, t1, opt, cache: HashMap::new(), log: Vec::new() }
    }

    fn seeds(&self, set: usize) -> Seeds {
        let lat = &self.cover.lattice;
        let h = self.opt.seed_spacing;
        let ext = (self.opt.seed_margin.max(0.0) / h).ceil() as i64;
        let n = [((lat.dx * (lat.nx[0] - 1) as f64) / h).ceil() as i64, ((lat.dx * (lat.nx[1] - 1) as f64) / h).ceil() as i64];
        let mut pts = Vec::new();
        for i1 in -ext..=n[0] + ext {
            for i2 in -ext..=n[1] + ext {
                let x = [lat.x_lo[0] + h * i1 as f64, lat.x_lo[1] + h * i2 as f64];
                pts.push(match self.cover.sets[set].diffeo {
                    None => x,
                    Some(j) => self.cover.diffeos[j].q(x),
                });
            }
        }
        Seeds { points: pts, spacing: h }
    }

    pub fn cones(&self, b: &FrequencyBox) -> Result<ConeWindows> {
        partition::cone_windows(b, self.opt.cones.at_scale(b.scale_k), self.tiling.grid.dxi())
    }

    fn prepared(&mut self, set: usize, b: &FrequencyBox, cones: &ConeWindows, beta: usize) -> Result<&Prepared> {
        let key = (set, b.id, beta);
        if !self.cache.contains_key(&key) {
            let theta = cones.centres[beta];
            let cover = self.cover;
            let weight = |xt: [f64; 2]| cover.weight_sheared(set, xt, theta);
            let diffeo = cover.sets[set].diffeo.map(|j| &cover.diffeos[j]);
            let topt = TableOptions { spacing: table_spacing(b, self.opt.table.spacing), ..self.opt.table };
            let tables = build_tables(self.model, self.t0, self.t1, theta, diffeo, &self.seeds(set), &weight, &topt)?;
            let kernels = if tables.valid_count() > 0 {
                let full = self.tiling.box_spectrum_from_dft(&vec![C64::new(1.0, 0.0); self.tiling.grid.len()], b);
                Some(kernel_for(&tables, &full, b, Some((cones, beta)), self.opt.kernel_eps, self.opt.rank_cap)?)
            } else {
                None
            };
            self.log.push(PreparedEntry {
                set,
                box_id: b.id,
                beta,
                theta,
                rank: kernels.as_ref().map_or(0, |k| k.rank),
                kernel_error: kernels.as_ref().map_or(0.0, |k| k.achieved),
                valid_nodes: tables.valid_count(),
            });
            self.cache.insert(key, Prepared { tables, kernels });
        }
        Ok(&self.cache[&key])
    }

    /// Contribution of one set from one box spectrum, summed over the box's cones.
    fn apply_set_box(&mut self, set: usize, b: &FrequencyBox, spec: &SampledSpectrum, out: &mut Field) -> Result<bool> {
        let cones = self.cones(b)?;
        let grid = self.tiling.grid;
        let tol = self.opt.nufft_tol;
        let mut any = false;
        for beta in 0..cones.count() {
            let p = self.prepared(set, b, &cones, beta)?;
            let Some(kernel) = &p.kernels else { continue };
            let f = apply_box(spec, b, Some((&cones, beta)), &p.tables, kernel, &grid, tol)?;
            out.add_assign(&f);
            any = true;
        }
        Ok(any)
    }

    /// `F u` with per-set contributions.
    pub fn apply(&mut self, u: &Field) -> Result<ApplyResult> {
        let t = self.tiling;
        u.check_grid(&t.grid)?;
        if !(self.opt.box_precision > 0.0 && self.opt.box_precision < 1.0) {
            return Err(Error::InvalidParameter("box_precision must lie in (0, 1)".into()));
        }
        if !(self.opt.seed_spacing > 0.0) {
            return Err(Error::InvalidParameter("seed spacing must be positive".into()));
        }
        let spec = crate::fft::forward(&u.data, t.grid.n);
        let coeffs = frame::forward_from_dft(&spec, t);
        let total = coeffs.energy();
        let mut ranked: Vec<(usize, f64)> = coeffs.boxes.keys().map(|&id| (id, coeffs.box_energy(id))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut input_boxes = Vec::new();
        let mut kept = 0.0;
        for (id, e) in ranked {
            if total == 0.0 || 1.0 - kept / total <= self.opt.box_precision {
                break;
            }
            input_boxes.push(id);
            kept += e;
        }
        let input_residual = if total > 0.0 { 1.0 - kept / total } else { 0.0 };

        let mut sets = Vec::new();
        let mut grand = Field::zeros(t.grid);
        for si in 0..self.cover.sets.len() {
            let mut field = Field::zeros(t.grid);
            let mut boxes = Vec::new();
            let mut reports = Vec::new();
            let diffeo = self.cover.sets[si].diffeo.map(|j| self.cover.diffeos[j]);
            for &id in &input_boxes {
                let b = &t.boxes[id];
                let bs = t.box_spectrum_from_dft(&spec, b);
                match &diffeo {
                    None => {
                        if self.apply_set_box(si, b, &bs, &mut field)? {
                            boxes.push(id);
                        }
                    }
                    Some(p) => {
                        let ut = diffeo::pullback(&bs, p, &t.grid, self.opt.nufft_tol)?;
                        let (c, rep) = diffeo::redecompose(&ut, t, b, Some(p), &self.opt.redecompose_at(b.scale_k))?;
                        let mut used = false;
                        for (&bid, cb) in &c.boxes {
                            let bt = &t.boxes[bid];
                            let sb = t.box_spectrum_from_coefficients(cb, bt)?;
                            used |= self.apply_set_box(si, bt, &sb, &mut field)?;
                        }
                        if used {
                            boxes.push(id);
                        }
                        reports.push((id, rep));
                    }
                }
            }
            let mut renormalization = 1.0;
            if diffeo.is_some() && self.opt.renormalize {
                let tot: f64 = reports.iter().map(|(_, r)| r.total_energy).sum();
                let cap: f64 = reports.iter().map(|(_, r)| r.synthesized * r.total_energy).sum();
                if cap > 0.0 {
                    renormalization = (tot / cap).sqrt();
                    field.scale(C64::new(renormalization, 0.0));
                }
            }
            grand.add_assign(&field);
            sets.push(SetOutput { set: si, name: self.cover.sets[si].name(), field, boxes, reports, renormalization });
        }
        Ok(ApplyResult { total: grand, sets, input_boxes, input_residual })
    }
}

//! Pipeline stages wired from an [`ExperimentConfig`], and field comparison.

use rayon::prelude::*;

use crate::caustic::{detect, CausticMap};
use crate::config::{AnchorStrategy, ExperimentConfig};
use crate::diffeo::{greedy_anchors, DiffeoParams};
use crate::error::{Error, Result};
use crate::fdref::{solve_halfwave, FdOutput};
use crate::fft;
use crate::fio::{ApplyResult, Operator, PreparedEntry};
use crate::frame::{build_tiling_with_offset, forward_transform, frame_element, inverse_transform, nearest_coefficient, Tiling};
use crate::grid::{Field, Grid, C64};
use crate::hamilton::{integrate, FlowOptions, SymbolModel};
use crate::partition::{build_cover, Cover};

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub model: SymbolModel,
    pub grid: Grid,
}

/// Source wave packet restricted to its own frequency box.
pub struct Source {
    pub box_id: usize,
    pub coefficient: usize,
    /// Full frame element.
    pub packet: Field,
    /// Part of the packet carried by `box_id`.
    pub field: Field,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let model = SymbolModel::new(cfg.medium());
        Ok(Self { cfg, model, grid })
    }

    pub fn tiling(&self) -> Result<Tiling> {
        let t = &self.cfg.tiling;
        build_tiling_with_offset(self.grid, t.k_max, t.angular_constant, t.angle_offset)
    }

    pub fn source(&self, tiling: &Tiling) -> Result<Source> {
        let s = &self.cfg.source;
        let b = tiling.nearest_box(s.k, s.theta);
        let m = nearest_coefficient(tiling, b, s.center);
        let packet = frame_element(tiling, b, m)?;
        let field = inverse_transform(&forward_transform(&packet, tiling)?.restrict(&[b.id]), tiling)?;
        Ok(Source { box_id: b.id, coefficient: m, packet, field })
    }

    /// Rays from the source centre over the source box's directions, traced with the propagator.
    /// Rows are `(t, y1, y2, η1, η2, det W1)` at `samples` uniform times.
    pub fn ray_fan(&self, tiling: &Tiling, rays: usize, samples: usize) -> Result<Vec<Vec<[f64; 6]>>> {
        if rays == 0 || samples < 2 {
            return Err(Error::InvalidParameter("ray fan needs rays >= 1 and samples >= 2".into()));
        }
        let s = &self.cfg.source;
        let b = tiling.nearest_box(s.k, s.theta);
        let (t0, t1) = (self.cfg.time.t0, self.cfg.time.t1);
        (0..rays)
            .into_par_iter()
            .map(|i| {
                let u = if rays == 1 { 0.5 } else { i as f64 / (rays - 1) as f64 };
                let th = b.theta - b.half_angle + 2.0 * b.half_angle * u;
                let tr = integrate(&self.model, s.center, [th.cos(), th.sin()], t0, t1, FlowOptions::new(self.cfg.caustic.rtol, true))?;
                Ok((0..samples)
                    .map(|j| {
                        let t = t0 + (t1 - t0) * j as f64 / (samples - 1) as f64;
                        let st = tr.at(t);
                        let w = tr.propagator_at(t, crate::hamilton::PropFrame::Cartesian).w1();
                        [t, st.y[0], st.y[1], st.eta[0], st.eta[1], w[0][0] * w[1][1] - w[0][1] * w[1][0]]
                    })
                    .collect())
            })
            .collect()
    }

    pub fn caustics(&self) -> Result<CausticMap> {
        detect(&self.model, &self.cfg.lattice()?, self.cfg.time.t0, self.cfg.time.t1, &self.cfg.detect_options())
    }

    pub fn anchors(&self, cmap: &CausticMap) -> Result<Vec<DiffeoParams>> {
        let d = &self.cfg.diffeo;
        let s = &self.cfg.source;
        match d.anchor {
            AnchorStrategy::Source => d.alpha.iter().map(|a| DiffeoParams::from_angle(s.center, s.theta, *a)).collect(),
            AnchorStrategy::Greedy => {
                let mut out = Vec::new();
                for a in &d.alpha {
                    out.extend(greedy_anchors(cmap, d.anchor_radius, d.anchor_angle_scale, *a)?);
                }
                Ok(out)
            }
        }
    }

    /// Identity sets only when the map has no caustic samples.
    pub fn cover(&self, cmap: &CausticMap) -> Result<Cover> {
        let anchors = if cmap.set_count() > 1 || cmap.count_of(crate::caustic::SetKind::Caustic) > 0 { self.anchors(cmap)? } else { Vec::new() };
        build_cover(cmap, &anchors, &self.cfg.partition_options())
    }

    pub fn apply(&self, tiling: &Tiling, cover: &Cover, u: &Field) -> Result<(ApplyResult, Vec<PreparedEntry>)> {
        let mut op = Operator::new(&self.model, tiling, cover, self.cfg.time.t0, self.cfg.time.t1, self.cfg.operator_options());
        let res = op.apply(u)?;
        Ok((res, op.log))
    }

    pub fn fdref(&self, u: &Field) -> Result<FdOutput> {
        solve_halfwave(u, &self.model, self.cfg.time.t0, self.cfg.time.t1, &self.cfg.fd_config())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `‖a − b‖ / ‖b‖` over the comparison region.
    pub rel_l2: f64,
    /// `|⟨a, b⟩| / (‖a‖‖b‖)` at zero lag.
    pub correlation: f64,
    /// Largest normalized circular cross-correlation over all lags.
    pub peak_xcorr: f64,
    /// Shift `s` (km) maximizing `|Σ a(x) conj(b(x − s))|`.
    pub lag: [f64; 2],
    /// `arg ⟨a, b⟩`.
    pub phase: f64,
    /// `arg(a·conj(b))` where `|b|` exceeds `phase_floor·max|b|`, NaN elsewhere.
    pub phase_map: Vec<f64>,
}

pub const PHASE_FLOOR: f64 = 1e-2;

/// Compares `a` against the reference `b`, optionally restricted to a disc.
pub fn compare(a: &Field, b: &Field, disc: Option<([f64; 2], f64)>) -> Result<Comparison> {
    a.check_grid(&b.grid)?;
    let g = a.grid;
    let inside = |i1: usize, i2: usize| match disc {
        Some((c, r)) => {
            let p = g.point(i1, i2);
            (p[0] - c[0]).hypot(p[1] - c[1]) <= r
        }
        None => true,
    };
    let mut am = vec![C64::new(0.0, 0.0); g.len()];
    let mut bm = vec![C64::new(0.0, 0.0); g.len()];
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            if inside(i1, i2) {
                let i = i1 * g.n + i2;
                am[i] = a.data[i];
                bm[i] = b.data[i];
            }
        }
    }
    let na: f64 = am.iter().map(|v| v.norm_sqr()).sum();
    let nb: f64 = bm.iter().map(|v| v.norm_sqr()).sum();
    if nb == 0.0 {
        return Err(Error::Numerical("reference field vanishes on the comparison region".into()));
    }
    let diff: f64 = am.iter().zip(&bm).map(|(x, y)| (x - y).norm_sqr()).sum();
    let dot: C64 = am.iter().zip(&bm).map(|(x, y)| x * y.conj()).sum();
    let norm = (na * nb).sqrt();
    let (fa, fb) = (fft::forward(&am, g.n), fft::forward(&bm, g.n));
    let prod: Vec<C64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let xc = fft::inverse(&prod, g.n);
    let mut best = (0usize, -1.0f64);
    for (i, v) in xc.iter().enumerate() {
        if v.norm() > best.1 {
            best = (i, v.norm());
        }
    }
    let lag = [g.signed_bin(best.0 / g.n) as f64 * g.h(), g.signed_bin(best.0 % g.n) as f64 * g.h()];
    let bmax = bm.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let phase_map = am.iter().zip(&bm).map(|(x, y)| if y.norm() > PHASE_FLOOR * bmax { (x * y.conj()).arg() } else { f64::NAN }).collect();
    let safe = |v: f64| if norm > 0.0 { v / norm } else { 0.0 };
    Ok(Comparison { rel_l2: (diff / nb).sqrt(), correlation: safe(dot.norm()), peak_xcorr: safe(best.1), lag, phase: dot.arg(), phase_map })
}

/// Phase of `a` relative to `b` at the `count` largest local maxima of `|a|` inside the disc.
pub fn phase_at_maxima(a: &Field, b: &Field, disc: ([f64; 2], f64), count: usize) -> Result<Vec<([f64; 2], f64)>> {
    a.check_grid(&b.grid)?;
    let g = a.grid;
    let n = g.n;
    let (c, r) = disc;
    let mut peaks = Vec::new();
    for i1 in 1..n - 1 {
        for i2 in 1..n - 1 {
            let p = g.point(i1, i2);
            if (p[0] - c[0]).hypot(p[1] - c[1]) > r {
                continue;
            }
            let v = a.at(i1, i2).norm();
            let neighbours = [(i1 - 1, i2), (i1 + 1, i2), (i1, i2 - 1), (i1, i2 + 1)];
            if v > 0.0 && neighbours.iter().all(|&(j1, j2)| a.at(j1, j2).norm() <= v) {
                peaks.push((v, p, (a.at(i1, i2) * b.at(i1, i2).conj()).arg()));
            }
        }
    }
    peaks.sort_by(|x, y| y.0.total_cmp(&x.0));
    Ok(peaks.into_iter().take(count).map(|(_, p, ph)| (p, ph)).collect())
}

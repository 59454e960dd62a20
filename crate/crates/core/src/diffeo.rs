//! Singularity-resolving quadratic shears `Q` and their canonical lifts `C_Q`.
//!
//! Formulas are written in the anchor frame, where the anchor direction is
//! `e1` and the deficient coordinate is the second one. The anchor frame is
//! `x_a = R x` with `R` having rows `(ν0, ν0⊥)`, `ν0⊥ = (-ν0_2, ν0_1)`.
//! The methods on [`DiffeoParams`] work in global coordinates.

use rayon::prelude::*;

use crate::caustic::CausticMap;
use crate::caustic::SetKind;
use crate::error::{Error, Result};
use crate::frame::{self, FrequencyBox, PacketCoefficients, Tiling};
use crate::grid::{Field, Grid, C64};
use crate::hamilton::{self, PropFrame, SymbolModel};
use crate::linalg::{self, M2, M4};
use crate::nufft::{self, SampledSpectrum};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffeoParams {
    /// Anchor point, global coordinates.
    pub x0: [f64; 2],
    /// Unit anchor direction, global coordinates.
    pub xi0: [f64; 2],
    pub alpha: f64,
    /// Deficient coordinate in the anchor frame (1-based; always 2 in two dimensions).
    pub deficient: usize,
    pub rotation: M2,
}

impl DiffeoParams {
    pub fn new(x0: [f64; 2], xi0: [f64; 2], alpha: f64) -> Result<Self> {
        let r = xi0[0].hypot(xi0[1]);
        if !(r > 0.0 && r.is_finite()) || !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("anchor must be finite with nonzero direction".into()));
        }
        if alpha == 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidParameter("alpha must be finite and nonzero".into()));
        }
        let nu = [xi0[0] / r, xi0[1] / r];
        Ok(Self { x0, xi0: nu, alpha, deficient: 2, rotation: [[nu[0], nu[1]], [-nu[1], nu[0]]] })
    }

    /// Anchor given by a direction angle.
    pub fn from_angle(x0: [f64; 2], theta: f64, alpha: f64) -> Result<Self> {
        Self::new(x0, [theta.cos(), theta.sin()], alpha)
    }

    pub fn to_anchor(&self, v: [f64; 2]) -> [f64; 2] {
        linalg::mv2(&self.rotation, v)
    }

    pub fn from_anchor(&self, v: [f64; 2]) -> [f64; 2] {
        linalg::mv2(&linalg::transpose2(&self.rotation), v)
    }

    /// Anchor point in the anchor frame.
    pub fn x0_anchor(&self) -> [f64; 2] {
        self.to_anchor(self.x0)
    }

    pub fn q(&self, x: [f64; 2]) -> [f64; 2] {
        self.from_anchor(apply_q(self, self.to_anchor(x)))
    }

    pub fn q_inv(&self, xt: [f64; 2]) -> [f64; 2] {
        self.from_anchor(apply_q_inv(self, self.to_anchor(xt)))
    }

    pub fn cq(&self, x: [f64; 2], xi: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let (a, b) = apply_cq(self, self.to_anchor(x), self.to_anchor(xi));
        (self.from_anchor(a), self.from_anchor(b))
    }

    pub fn cq_inv(&self, xt: [f64; 2], xit: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let (a, b) = apply_cq_inv(self, self.to_anchor(xt), self.to_anchor(xit));
        (self.from_anchor(a), self.from_anchor(b))
    }

    /// Anchor-frame transverse offset `(R x)_2 − (R x0)_2` that drives the shear.
    pub fn transverse_offset(&self, x: [f64; 2]) -> f64 {
        self.to_anchor(x)[1] - self.x0_anchor()[1]
    }

    /// Covector `ξ` of `C_Q⁻¹` at a point whose transverse offset is `d`.
    pub fn covector_back(&self, d: f64, xit: [f64; 2]) -> [f64; 2] {
        let a = self.to_anchor(xit);
        self.from_anchor([a[0], a[1] - self.alpha * d * a[0]])
    }

    fn conjugate(&self, m: &M4) -> M4 {
        let r = &self.rotation;
        let z = [[0.0; 2]; 2];
        let big = linalg::from_blocks(r, &z, &z, r);
        linalg::mul4(&linalg::transpose4(&big), &linalg::mul4(m, &big))
    }

    /// `Π_Q` at `(x, ξ)` in global coordinates.
    pub fn pi_q(&self, x: [f64; 2], xi: [f64; 2]) -> M4 {
        let xa = self.to_anchor(x);
        let xia = self.to_anchor(xi);
        self.conjugate(&propagator_q(self, xa[1], xia[0]))
    }

    /// `Π_Q⁻¹` at `(x̃, ξ̃)` in global coordinates.
    pub fn pi_q_inv(&self, xt: [f64; 2], xit: [f64; 2]) -> M4 {
        let xa = self.to_anchor(xt);
        let xia = self.to_anchor(xit);
        self.conjugate(&propagator_q_inv(self, xa[1], xia[0]))
    }

    /// Propagator of `F Q⁻¹` at the point of `Λ` with source `(x, ξ)`, given `Π(x, ξ)`.
    pub fn composed(&self, pi: &M4, x: [f64; 2], xi: [f64; 2]) -> M4 {
        let (xt, xit) = self.cq(x, xi);
        linalg::mul4(pi, &self.pi_q_inv(xt, xit))
    }

    pub fn metadata_text(&self) -> String {
        format!(
            "x0 = [{:.12}, {:.12}]\nxi0 = [{:.12}, {:.12}]\nalpha = {:.12}\ndeficient = {}\n",
            self.x0[0], self.x0[1], self.xi0[0], self.xi0[1], self.alpha, self.deficient
        )
    }
}

/// `x ↦ x̃`, anchor frame.
pub fn apply_q(p: &DiffeoParams, x: [f64; 2]) -> [f64; 2] {
    let d = x[1] - p.x0_anchor()[1];
    [x[0] - 0.5 * p.alpha * d * d, x[1]]
}

/// `x̃ ↦ x`, anchor frame.
pub fn apply_q_inv(p: &DiffeoParams, xt: [f64; 2]) -> [f64; 2] {
    let d = xt[1] - p.x0_anchor()[1];
    [xt[0] + 0.5 * p.alpha * d * d, xt[1]]
}

/// `(x, ξ) ↦ (x̃, ξ̃)`, anchor frame.
pub fn apply_cq(p: &DiffeoParams, x: [f64; 2], xi: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let d = x[1] - p.x0_anchor()[1];
    (apply_q(p, x), [xi[0], xi[1] + p.alpha * d * xi[0]])
}

/// `(x̃, ξ̃) ↦ (x, ξ)`, anchor frame.
pub fn apply_cq_inv(p: &DiffeoParams, xt: [f64; 2], xit: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let d = xt[1] - p.x0_anchor()[1];
    (apply_q_inv(p, xt), [xit[0], xit[1] - p.alpha * d * xit[0]])
}

/// `Π_Q` from the anchor-frame entries `x2` and `ξ1`.
pub fn propagator_q(p: &DiffeoParams, x2: f64, xi1: f64) -> M4 {
    let d = x2 - p.x0_anchor()[1];
    let a = p.alpha;
    [[1.0, -a * d, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, a * xi1, a * d, 1.0]]
}

/// `Π_Q⁻¹` from the anchor-frame entries `x̃2` and `ξ̃1`.
pub fn propagator_q_inv(p: &DiffeoParams, xt2: f64, xit1: f64) -> M4 {
    let d = xt2 - p.x0_anchor()[1];
    let a = p.alpha;
    [[1.0, a * d, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, -a * xit1, -a * d, 1.0]]
}

/// `Q^* u_b` on `target`: the box data evaluated at `Q⁻¹(x̃)`.
pub fn pullback(spec: &SampledSpectrum, p: &DiffeoParams, target: &Grid, tol: f64) -> Result<Field> {
    let pts: Vec<[f64; 2]> = target.points().into_iter().map(|xt| p.q_inv(xt)).collect();
    Field::from_vec(*target, nufft::eval_adjoint(spec, &pts, tol)?)
}

/// `(Q⁻¹)^* ǔ`: the field evaluated at `Q(x)` on its own grid.
pub fn pushforward(u: &Field, p: &DiffeoParams, tol: f64) -> Result<Field> {
    let spec = SampledSpectrum::from_field(u);
    let pts: Vec<[f64; 2]> = u.grid.points().into_iter().map(|x| p.q(x)).collect();
    Field::from_vec(u.grid, nufft::eval_adjoint(&spec, &pts, tol)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedecomposeOptions {
    /// Box selection stops once `1 − captured ≤ precision`.
    pub precision: f64,
    /// Coefficients whose source window stays below this on the box are dropped.
    pub chi_threshold: f64,
    pub max_boxes: usize,
}

/// Box cap used when none is given: 9 up to scale 2, 11 above.
pub fn default_max_boxes(k: u32) -> usize {
    if k <= 2 {
        9
    } else {
        11
    }
}

impl Default for RedecomposeOptions {
    fn default() -> Self {
        Self { precision: 1e-2, chi_threshold: 1e-3, max_boxes: 9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedecompositionReport {
    pub selected: Vec<usize>,
    pub total_energy: f64,
    /// Fractions of `total_energy`; they sum to one.
    pub captured: f64,
    pub discarded: f64,
    pub residual: f64,
    pub discarded_coefficients: usize,
    /// Energy of the selected coefficients' synthesis over `total_energy`.
    /// The frame is redundant, so this is below `captured`.
    pub synthesized: f64,
    /// `synthesized^{-1/2}`.
    pub renormalization: f64,
    /// False when `max_boxes` stopped the selection first.
    pub reached_precision: bool,
}

impl RedecompositionReport {
    pub fn metadata_text(&self) -> String {
        format!(
            "selected = {:?}\ntotal_energy = {:.15e}\ncaptured = {:.15}\ndiscarded = {:.15e}\nresidual = {:.15e}\ndiscarded_coefficients = {}\nsynthesized = {:.15}\nrenormalization = {:.15}\nreached_precision = {}\n",
            self.selected,
            self.total_energy,
            self.captured,
            self.discarded,
            self.residual,
            self.discarded_coefficients,
            self.synthesized,
            self.renormalization,
            self.reached_precision
        )
    }
}

/// Packet coefficients of a pulled-back box field, restricted to the few
/// boxes that carry its energy. With `p = None` the field is taken to be a
/// synthesis of `source` alone and its exact source-box coefficients are returned.
pub fn redecompose(
    u: &Field,
    t: &Tiling,
    source: &FrequencyBox,
    p: Option<&DiffeoParams>,
    opt: &RedecomposeOptions,
) -> Result<(PacketCoefficients, RedecompositionReport)> {
    u.check_grid(&t.grid)?;
    if !(opt.precision > 1e-8 && opt.precision < 1e-1) {
        return Err(Error::InvalidParameter(format!("re-decomposition precision {} outside (1e-8, 1e-1)", opt.precision)));
    }
    if opt.max_boxes == 0 {
        return Err(Error::InvalidParameter("max_boxes must be positive".into()));
    }
    let spec = crate::fft::forward(&u.data, t.grid.n);
    let Some(p) = p else {
        let c = t.box_coefficients_from_dft(&spec, source);
        let e: f64 = c.iter().map(|v| v.norm_sqr()).sum();
        let mut pc = PacketCoefficients::default();
        pc.boxes.insert(source.id, c);
        let report = RedecompositionReport {
            selected: vec![source.id],
            total_energy: e,
            captured: 1.0,
            discarded: 0.0,
            residual: 0.0,
            discarded_coefficients: 0,
            synthesized: 1.0,
            renormalization: 1.0,
            reached_precision: true,
        };
        return Ok((pc, report));
    };

    let all = frame::forward_from_dft(&spec, t);
    let total = all.energy();
    if total == 0.0 {
        let report = RedecompositionReport {
            selected: vec![],
            total_energy: 0.0,
            captured: 0.0,
            discarded: 0.0,
            residual: 1.0,
            discarded_coefficients: 0,
            synthesized: 0.0,
            renormalization: 1.0,
            reached_precision: false,
        };
        return Ok((PacketCoefficients::default(), report));
    }
    let mut ranked: Vec<(usize, f64)> = all.boxes.keys().map(|&id| (id, all.box_energy(id))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected = Vec::new();
    let mut kept = 0.0;
    let mut reached = false;
    for &(id, e) in &ranked {
        if 1.0 - kept / total <= opt.precision {
            reached = true;
            break;
        }
        if selected.len() == opt.max_boxes {
            break;
        }
        selected.push(id);
        kept += e;
    }
    reached |= 1.0 - kept / total <= opt.precision;

    let masked: Vec<(usize, Vec<C64>, usize, f64)> = selected
        .par_iter()
        .map(|&id| {
            let b = &t.boxes[id];
            let mut c = all.boxes[&id].clone();
            let mut dropped = 0;
            let mut lost = 0.0;
            let bins: Vec<[f64; 2]> = b.support.iter().map(|&(_, l, _)| b.xi(l, t.grid.dxi())).collect();
            // a coefficient is visible if the source window is reached anywhere on its cell
            let h = [t.grid.length / b.lattice.dims[0] as f64, t.grid.length / b.lattice.dims[1] as f64];
            let half = 0.5 * (p.rotation[1][0].abs() * h[0] + p.rotation[1][1].abs() * h[1]);
            let mut cache = std::collections::HashMap::<i64, bool>::new();
            let mut visible = |d: f64| -> bool {
                *cache
                    .entry((d * 1e9).round() as i64)
                    .or_insert_with(|| bins.iter().any(|&xit| t.window_at(source, p.covector_back(d, xit)) >= opt.chi_threshold))
            };
            for (m, v) in c.iter_mut().enumerate() {
                if *v == C64::new(0.0, 0.0) {
                    continue;
                }
                let d = p.transverse_offset(t.coefficient_position(b, m));
                if !(visible(d) || visible(d - half) || visible(d + half)) {
                    dropped += 1;
                    lost += v.norm_sqr();
                    *v = C64::new(0.0, 0.0);
                }
            }
            (id, c, dropped, lost)
        })
        .collect();

    let mut pc = PacketCoefficients::default();
    let mut discarded = 0.0;
    let mut dropped = 0;
    for (id, c, d, lost) in masked {
        discarded += lost;
        dropped += d;
        pc.boxes.insert(id, c);
    }
    let captured_e = pc.energy();
    let residual_e: f64 = ranked.iter().filter(|(id, _)| !selected.contains(id)).map(|(_, e)| e).sum();
    let synth_e = if captured_e > 0.0 { frame::inverse_transform(&pc, t)?.energy() } else { 0.0 };
    let renormalization = if synth_e > 0.0 { (total / synth_e).sqrt() } else { 1.0 };
    let report = RedecompositionReport {
        selected,
        total_energy: total,
        captured: captured_e / total,
        discarded: discarded / total,
        residual: residual_e / total,
        discarded_coefficients: dropped,
        synthesized: synth_e / total,
        renormalization,
        reached_precision: reached,
    };
    Ok((pc, report))
}

/// Relative L2 error of `(Q⁻¹)^*` of the synthesized coefficients against
/// `reference`, measured on the disc of `radius` about the anchor.
pub fn round_trip_error(coeffs: &PacketCoefficients, t: &Tiling, p: &DiffeoParams, reference: &Field, radius: f64, tol: f64) -> Result<f64> {
    let ut = frame::inverse_transform(coeffs, t)?;
    let back = pushforward(&ut, p, tol)?;
    let g = reference.grid;
    back.check_grid(&g)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, x) in g.points().into_iter().enumerate() {
        if (x[0] - p.x0[0]).hypot(x[1] - p.x0[1]) <= radius {
            num += (back.data[i] - reference.data[i]).norm_sqr();
            den += reference.data[i].norm_sqr();
        }
    }
    if den == 0.0 {
        return Err(Error::Numerical("reference vanishes on the anchor neighbourhood".into()));
    }
    Ok((num / den).sqrt())
}

/// `W̌1` at the anchor for curvature `alpha`, composed with the flow from `t0` to `t1`.
pub fn anchor_w1(model: &SymbolModel, p: &DiffeoParams, t0: f64, t1: f64, rtol: f64) -> Result<M2> {
    let (tr, pi) = hamilton::propagator(model, p.x0, p.xi0, t0, t1, rtol, PropFrame::Cartesian)?;
    if tr.truncated {
        return Err(Error::RayTruncated(format!("anchor ray from {:?}", p.x0)));
    }
    Ok(linalg::block(&p.composed(&pi.m, p.x0, p.xi0), 0, 0))
}

/// Reference curvature `1 / (c(x0) (t1 − t0))`.
pub fn alpha_geom(model: &SymbolModel, x0: [f64; 2], t0: f64, t1: f64) -> f64 {
    1.0 / (model.medium.speed(x0) * (t1 - t0).abs())
}

pub const ALPHA_FACTORS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Curvature among `ALPHA_FACTORS · α_geom` maximizing the smallest singular
/// value of `W̌1` at the anchor. Returns the choice and the scanned `(α, σ_min)`.
pub fn choose_alpha(model: &SymbolModel, x0: [f64; 2], xi0: [f64; 2], t0: f64, t1: f64, rtol: f64) -> Result<(f64, Vec<(f64, f64)>)> {
    let ag = alpha_geom(model, x0, t0, t1);
    let mut scan = Vec::new();
    for f in ALPHA_FACTORS {
        let p = DiffeoParams::new(x0, xi0, f * ag)?;
        let w = anchor_w1(model, &p, t0, t1, rtol)?;
        scan.push((p.alpha, linalg::singular_values2(&w).1));
    }
    let best = scan.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).map(|s| s.0).unwrap_or(ag);
    Ok((best, scan))
}

/// Greedy cover of the caustic-labelled samples by balls of `radius` (in
/// `x`, with angle differences scaled by `angle_scale` length per radian).
/// Ball centres are chosen among the singular-set points, most uncovered first.
pub fn greedy_anchors(cmap: &CausticMap, radius: f64, angle_scale: f64, alpha: f64) -> Result<Vec<DiffeoParams>> {
    let lat = &cmap.lattice;
    let targets: Vec<([f64; 2], f64)> = (0..lat.len()).filter(|&i| cmap.labels[i] == SetKind::Caustic && !cmap.samples[i].masked).map(|i| lat.point(i)).collect();
    let centres: Vec<([f64; 2], f64)> = if cmap.sigma.is_empty() {
        targets.clone()
    } else {
        cmap.sigma.iter().map(|s| (s.x, s.theta)).collect()
    };
    let dist = |a: &([f64; 2], f64), b: &([f64; 2], f64)| -> f64 {
        let dx = a.0[0] - b.0[0];
        let dy = a.0[1] - b.0[1];
        let dt = angle_scale * (a.1 - b.1);
        (dx * dx + dy * dy + dt * dt).sqrt()
    };
    let mut covered = vec![false; targets.len()];
    let mut out = Vec::new();
    while covered.iter().any(|c| !c) {
        let best = centres
            .par_iter()
            .enumerate()
            .map(|(ci, c)| (ci, targets.iter().zip(&covered).filter(|(t, cv)| !**cv && dist(t, c) <= radius).count()))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if best.1 == 0 {
            // remaining samples are far from the singular set; centre on them directly
            let i = covered.iter().position(|c| !c).unwrap();
            let c = targets[i];
            for (t, cv) in targets.iter().zip(covered.iter_mut()) {
                if dist(t, &c) <= radius {
                    *cv = true;
                }
            }
            out.push(DiffeoParams::from_angle(c.0, c.1, alpha)?);
            continue;
        }
        let c = centres[best.0];
        for (t, cv) in targets.iter().zip(covered.iter_mut()) {
            if dist(t, &c) <= radius {
                *cv = true;
            }
        }
        out.push(DiffeoParams::from_angle(c.0, c.1, alpha)?);
    }
    Ok(out)
}

//! Finite-difference reference for `[∂_t + iP]u = 0`, `P = c(x)|D|`.
//!
//! The half-wave problem is replaced by `v_tt = c²Δv` with `v(t0) = u0` and
//! `v_t(t0) = −i c(x) IFT[|ξ| û0]` (exact for constant `c`). Leapfrog in time,
//! a 2nd or 4th order Laplacian on a spectrally refined copy of the grid, and an
//! exponential sponge along the four edges. The complex field is stepped directly,
//! which is the same as stepping its real and imaginary parts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Field, Grid, C64};
use crate::hamilton::SymbolModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Fine grid has `refine · N` points per axis.
    pub refine: usize,
    pub cfl: f64,
    /// Spatial order, 2 or 4.
    pub order: usize,
    pub sponge_cells: usize,
    /// Per-step damping exponent at the outer edge of the sponge.
    pub sponge_strength: f64,
    /// Fixed time step; `None` derives it from `cfl`.
    pub dt: Option<f64>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { refine: 2, cfl: 0.1, order: 4, sponge_cells: 20, sponge_strength: 0.05, dt: None }
    }
}

impl FdConfig {
    /// Largest stable `c·Δt/h` of the leapfrog scheme in 2-D.
    pub fn stability_limit(&self) -> f64 {
        match self.order {
            2 => 1.0 / 2f64.sqrt(),
            // max |symbol| of the 4th order stencil is 16/3 per axis
            _ => 2.0 / (32.0f64 / 3.0).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 2 && self.order != 4 {
            return Err(Error::InvalidParameter(format!("stencil order {} must be 2 or 4", self.order)));
        }
        if self.refine == 0 || !self.refine.is_power_of_two() {
            return Err(Error::InvalidParameter("refinement factor must be a power of two".into()));
        }
        if !(self.cfl > 0.0) || self.cfl > 0.7 {
            return Err(Error::Cfl(format!("CFL number {} outside (0, 0.7]", self.cfl)));
        }
        if !(self.sponge_strength >= 0.0) {
            return Err(Error::InvalidParameter("sponge strength must be non-negative".into()));
        }
        Ok(())
    }
}

/// Spectral interpolation of `u` onto a grid `r` times finer.
pub fn refine(u: &Field, r: usize) -> Result<Field> {
    let g = u.grid;
    let fine = Grid::new(g.n * r, g.length, g.origin)?;
    let spec = fft::forward(&u.data, g.n);
    let mut out = vec![C64::new(0.0, 0.0); fine.len()];
    let s = (r * r) as f64;
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            let (b1, b2) = (g.signed_bin(i1), g.signed_bin(i2));
            out[fine.bin_index(b1) * fine.n + fine.bin_index(b2)] = spec[i1 * g.n + i2] * s;
        }
    }
    Field::from_vec(fine, fft::inverse(&out, fine.n))
}

/// Keep the bins of `coarse` and return to that grid.
pub fn decimate(u: &Field, coarse: Grid) -> Result<Field> {
    let g = u.grid;
    if g.n % coarse.n != 0 || g.length != coarse.length || g.origin != coarse.origin {
        return Err(Error::GridMismatch("decimation target must share extent and origin".into()));
    }
    let spec = fft::forward(&u.data, g.n);
    let s = ((coarse.n * coarse.n) as f64) / ((g.n * g.n) as f64);
    let mut out = vec![C64::new(0.0, 0.0); coarse.len()];
    for i1 in 0..coarse.n {
        for i2 in 0..coarse.n {
            let (b1, b2) = (coarse.signed_bin(i1), coarse.signed_bin(i2));
            out[i1 * coarse.n + i2] = spec[g.bin_index(b1) * g.n + g.bin_index(b2)] * s;
        }
    }
    Field::from_vec(coarse, fft::inverse(&out, coarse.n))
}

/// `IFT[|ξ| û]`.
pub fn abs_derivative(u: &Field) -> Field {
    let g = u.grid;
    let mut spec = fft::forward(&u.data, g.n);
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            let xi = [g.signed_bin(i1) as f64 * g.dxi(), g.signed_bin(i2) as f64 * g.dxi()];
            spec[i1 * g.n + i2] *= xi[0].hypot(xi[1]);
        }
    }
    Field { grid: g, data: fft::inverse(&spec, g.n) }
}

/// Energy-weighted mean `|ξ|` converted to points per wavelength on `grid`.
pub fn points_per_wavelength(u: &Field, grid: &Grid) -> f64 {
    let g = u.grid;
    let spec = fft::forward(&u.data, g.n);
    let (mut num, mut den) = (0.0, 0.0);
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            let xi = [g.signed_bin(i1) as f64 * g.dxi(), g.signed_bin(i2) as f64 * g.dxi()];
            let e = spec[i1 * g.n + i2].norm_sqr();
            num += e * xi[0].hypot(xi[1]);
            den += e;
        }
    }
    if num == 0.0 {
        return f64::INFINITY;
    }
    2.0 * std::f64::consts::PI / (num / den * grid.h())
}

#[derive(Clone, Debug)]
pub struct FdSolver {
    pub grid: Grid,
    pub cfg: FdConfig,
    pub dt: f64,
    pub t: f64,
    pub steps: usize,
    c2: Vec<f64>,
    damp: Vec<f64>,
    prev: Vec<C64>,
    cur: Vec<C64>,
}

fn laplacian(u: &[C64], n: usize, h: f64, order: usize, out: &mut [C64]) {
    let ih2 = 1.0 / (h * h);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let at = |a: isize, b: usize| u[((i as isize + a).rem_euclid(n as isize) as usize) * n + b];
        for (j, o) in row.iter_mut().enumerate() {
            let jp = |d: isize| ((j as isize + d).rem_euclid(n as isize)) as usize;
            let c = u[i * n + j];
            *o = if order == 2 {
                (at(1, j) + at(-1, j) + u[i * n + jp(1)] + u[i * n + jp(-1)] - c * 4.0) * ih2
            } else {
                let d1 = (at(1, j) + at(-1, j)) * 16.0 - (at(2, j) + at(-2, j)) - c * 30.0;
                let d2 = (u[i * n + jp(1)] + u[i * n + jp(-1)]) * 16.0 - (u[i * n + jp(2)] + u[i * n + jp(-2)]) - c * 30.0;
                (d1 + d2) * (ih2 / 12.0)
            };
        }
    });
}

impl FdSolver {
    /// State at `t0` on the refined grid.
    pub fn new(u0: &Field, model: &SymbolModel, t0: f64, cfg: FdConfig) -> Result<Self> {
        cfg.validate()?;
        if u0.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("initial field".into()));
        }
        let fine = refine(u0, cfg.refine)?;
        let grid = fine.grid;
        let n = grid.n;
        let c: Vec<f64> = grid.points().iter().map(|x| model.medium.speed(*x)).collect();
        let cmax = c.iter().cloned().fold(0.0, f64::max);
        let limit = cfg.cfl.min(cfg.stability_limit());
        let dt = match cfg.dt {
            Some(dt) => {
                if !(dt > 0.0) || cmax * dt / grid.h() > cfg.stability_limit() {
                    return Err(Error::Cfl(format!("Δt = {dt} exceeds the stability limit {:.4}·h/c_max", cfg.stability_limit())));
                }
                dt
            }
            None => limit * grid.h() / cmax,
        };
        let w = cfg.sponge_cells.min(n / 4);
        let profile = |i: usize| {
            let d = i.min(n - 1 - i);
            if d < w {
                let s = (w - d) as f64 / w as f64;
                (-cfg.sponge_strength * s * s).exp()
            } else {
                1.0
            }
        };
        let mut damp = vec![1.0; grid.len()];
        for i1 in 0..n {
            for i2 in 0..n {
                damp[i1 * n + i2] = profile(i1) * profile(i2);
            }
        }
        let mut vel = abs_derivative(&fine);
        for (v, ci) in vel.data.iter_mut().zip(&c) {
            *v *= C64::new(0.0, -ci);
        }
        let c2: Vec<f64> = c.iter().map(|v| v * v).collect();
        Ok(Self { grid, cfg, dt, t: t0, steps: 0, c2, damp, prev: vel.data, cur: fine.data })
    }

    fn started(&self) -> bool {
        self.steps > 0
    }

    /// One leapfrog step; the first step uses the Taylor start `u + Δt v + Δt²/2 c²Δu`.
    pub fn step(&mut self, dt: f64) {
        let n = self.grid.n;
        let mut lap = vec![C64::new(0.0, 0.0); self.grid.len()];
        laplacian(&self.cur, n, self.grid.h(), self.cfg.order, &mut lap);
        let next: Vec<C64> = if !self.started() {
            (0..lap.len()).into_par_iter().map(|i| self.cur[i] + self.prev[i] * dt + lap[i] * (0.5 * dt * dt * self.c2[i])).collect()
        } else {
            (0..lap.len()).into_par_iter().map(|i| self.cur[i] * 2.0 - self.prev[i] + lap[i] * (dt * dt * self.c2[i])).collect()
        };
        self.prev = std::mem::replace(&mut self.cur, next);
        if self.cfg.sponge_cells > 0 {
            for ((p, c), d) in self.prev.iter_mut().zip(self.cur.iter_mut()).zip(&self.damp) {
                *p *= *d;
                *c *= *d;
            }
        }
        self.t += dt;
        self.steps += 1;
    }

    /// Advance to `t1`. The first call fixes a uniform step no larger than the
    /// CFL step that lands on `t1`; later calls keep it and round the step count.
    pub fn run_to(&mut self, t1: f64) -> Result<()> {
        if t1 < self.t {
            return Err(Error::InvalidParameter("the reference only runs forward in time".into()));
        }
        let k = if self.started() {
            ((t1 - self.t) / self.dt).round() as usize
        } else {
            let k = ((t1 - self.t) / self.dt * (1.0 - 1e-12)).ceil() as usize;
            if k > 0 {
                self.dt = (t1 - self.t) / k as f64;
            }
            k
        };
        for _ in 0..k {
            self.step(self.dt);
        }
        Ok(())
    }

    /// Discrete energy `Σ c⁻²|Δ_t u|² − Re⟨u^{n+1}, Δ_h u^n⟩` between the last two levels.
    pub fn energy(&self) -> f64 {
        let n = self.grid.n;
        let mut lap = vec![C64::new(0.0, 0.0); self.grid.len()];
        laplacian(&self.prev, n, self.grid.h(), self.cfg.order, &mut lap);
        let h2 = self.grid.h() * self.grid.h();
        let mut e = 0.0;
        for i in 0..lap.len() {
            let dv = (self.cur[i] - self.prev[i]) / self.dt;
            e += (dv.norm_sqr() / self.c2[i] - (self.cur[i].conj() * lap[i]).re) * h2;
        }
        e
    }

    pub fn fine_field(&self) -> Field {
        Field { grid: self.grid, data: self.cur.clone() }
    }

    pub fn field_on(&self, coarse: Grid) -> Result<Field> {
        decimate(&self.fine_field(), coarse)
    }
}

#[derive(Clone, Debug)]
pub struct FdOutput {
    pub field: Field,
    pub dt: f64,
    pub steps: usize,
    pub fine_n: usize,
    pub ppw: f64,
    pub warnings: Vec<String>,
}

impl FdOutput {
    pub fn metadata_text(&self, cfg: &FdConfig) -> String {
        let mut s = format!(
            "fd_refine = {}\nfd_cfl = {}\nfd_order = {}\nfd_sponge_cells = {}\nfd_dt = {:.12e}\nfd_steps = {}\nfd_fine_n = {}\nfd_ppw = {:.4}\n",
            cfg.refine, cfg.cfl, cfg.order, cfg.sponge_cells, self.dt, self.steps, self.fine_n, self.ppw
        );
        s.push_str(&format!("fd_warnings = {:?}\n", self.warnings));
        s
    }
}

/// `u(t1)` for `u(t0) = u0`, returned on the grid of `u0`.
pub fn solve_halfwave(u0: &Field, model: &SymbolModel, t0: f64, t1: f64, cfg: &FdConfig) -> Result<FdOutput> {
    let mut solver = FdSolver::new(u0, model, t0, *cfg)?;
    let ppw = points_per_wavelength(u0, &solver.grid);
    let threshold = if cfg.order == 4 { 8.0 } else { 16.0 };
    let mut warnings = Vec::new();
    if ppw < threshold {
        warnings.push(format!("{ppw:.2} points per wavelength below {threshold} for order {}", cfg.order));
    }
    solver.run_to(t1)?;
    Ok(FdOutput { field: solver.field_on(u0.grid)?, dt: solver.dt, steps: solver.steps, fine_n: solver.grid.n, ppw, warnings })
}

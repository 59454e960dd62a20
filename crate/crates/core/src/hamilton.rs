//! Hamiltonian ray tracing for the isotropic half-wave symbol `p = c(x)|ξ|`,
//! together with the propagator matrix `Π = ∂(y, η)/∂(x, ξ)`.
//!
//! The integrator is classical RK4 with step-doubling error control and
//! Richardson extrapolation. Accepted nodes store state and derivative so the
//! trajectory can be evaluated anywhere with cubic Hermite interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, M2, M4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Medium {
    Constant { c0: f64 },
    /// `c(x) = c0 + κ exp(−|x − x_c|²/σ²)`.
    Lens { c0: f64, kappa: f64, sigma: f64, center: [f64; 2] },
    /// Background `c0` plus two Gaussian anomalies `[κ, σ, x_c1, x_c2]`.
    DoubleLens { c0: f64, first: [f64; 4], second: [f64; 4] },
}

fn gaussian(kappa: f64, sigma: f64, center: [f64; 2], x: [f64; 2]) -> SpeedSample {
    let d = [x[0] - center[0], x[1] - center[1]];
    let s2 = sigma * sigma;
    let g = kappa * (-(d[0] * d[0] + d[1] * d[1]) / s2).exp();
    let grad = [-2.0 * d[0] / s2 * g, -2.0 * d[1] / s2 * g];
    let mut hess = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let delta = if i == j { 1.0 } else { 0.0 };
            hess[i][j] = g * (4.0 * d[i] * d[j] / (s2 * s2) - 2.0 * delta / s2);
        }
    }
    SpeedSample { c: g, grad, hess }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedSample {
    pub c: f64,
    pub grad: [f64; 2],
    pub hess: M2,
}

impl Medium {
    pub fn eval(&self, x: [f64; 2]) -> SpeedSample {
        match *self {
            Medium::Constant { c0 } => SpeedSample { c: c0, grad: [0.0; 2], hess: [[0.0; 2]; 2] },
            Medium::Lens { c0, kappa, sigma, center } => {
                let mut s = gaussian(kappa, sigma, center, x);
                s.c += c0;
                s
            }
            Medium::DoubleLens { c0, first: a, second: b } => {
                let p = gaussian(a[0], a[1], [a[2], a[3]], x);
                let q = gaussian(b[0], b[1], [b[2], b[3]], x);
                let hess = linalg::add2(&p.hess, &q.hess);
                SpeedSample { c: c0 + p.c + q.c, grad: [p.grad[0] + q.grad[0], p.grad[1] + q.grad[1]], hess }
            }
        }
    }

    pub fn speed(&self, x: [f64; 2]) -> f64 {
        self.eval(x).c
    }

    pub fn reference_speed(&self) -> f64 {
        match *self {
            Medium::Constant { c0 } | Medium::Lens { c0, .. } | Medium::DoubleLens { c0, .. } => c0,
        }
    }

    /// Upper bound of `c` over the plane.
    pub fn max_speed(&self) -> f64 {
        match *self {
            Medium::Constant { c0 } => c0,
            Medium::Lens { c0, kappa, .. } => c0 + kappa.max(0.0),
            Medium::DoubleLens { c0, first, second } => c0 + first[0].max(0.0) + second[0].max(0.0),
        }
    }

    pub fn min_speed(&self) -> f64 {
        match *self {
            Medium::Constant { c0 } => c0,
            Medium::Lens { c0, kappa, .. } => c0 + kappa.min(0.0),
            Medium::DoubleLens { c0, first, second } => c0 + first[0].min(0.0) + second[0].min(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Medium::Constant { c0 } => c0 > 0.0 && c0.is_finite(),
            Medium::Lens { c0, kappa, sigma, center } => {
                c0.is_finite() && kappa.is_finite() && sigma > 0.0 && center.iter().all(|v| v.is_finite()) && c0 + kappa.min(0.0) > 0.0
            }
            Medium::DoubleLens { c0, first, second } => {
                c0.is_finite()
                    && first.iter().chain(&second).all(|v| v.is_finite())
                    && first[1] > 0.0
                    && second[1] > 0.0
                    && self.min_speed() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("medium {self:?} must have positive finite speed")))
        }
    }
}

/// Symbol `p(y, η) = c(y)|η|` with a rectangular computational domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymbolModel {
    pub medium: Medium,
    /// `(lower corner, upper corner)`; `None` for the whole plane.
    pub domain: Option<([f64; 2], [f64; 2])>,
}

impl SymbolModel {
    pub fn new(medium: Medium) -> Self {
        Self { medium, domain: None }
    }

    pub fn with_domain(medium: Medium, lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { medium, domain: Some((lo, hi)) }
    }

    pub fn symbol(&self, y: [f64; 2], eta: [f64; 2]) -> f64 {
        self.medium.speed(y) * eta[0].hypot(eta[1])
    }

    fn inside(&self, y: [f64; 2]) -> bool {
        match self.domain {
            None => true,
            Some((lo, hi)) => y[0] >= lo[0] && y[0] <= hi[0] && y[1] >= lo[1] && y[1] <= hi[1],
        }
    }

    fn rhs(&self, s: &[f64; STATE], with_pi: bool) -> [f64; STATE] {
        let mut d = [0.0; STATE];
        let y = [s[0], s[1]];
        let eta = [s[2], s[3]];
        let sp = self.medium.eval(y);
        let r = eta[0].hypot(eta[1]);
        let nu = [eta[0] / r, eta[1] / r];
        d[0] = sp.c * nu[0];
        d[1] = sp.c * nu[1];
        d[2] = -r * sp.grad[0];
        d[3] = -r * sp.grad[1];
        if with_pi {
            // A = [[p_ηy, p_ηη], [−p_yy, −p_yη]]
            let mut a = [[0.0; 4]; 4];
            for i in 0..2 {
                for j in 0..2 {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    a[i][j] = nu[i] * sp.grad[j];
                    a[i][j + 2] = sp.c * (delta - nu[i] * nu[j]) / r;
                    a[i + 2][j] = -r * sp.hess[i][j];
                    a[i + 2][j + 2] = -sp.grad[i] * nu[j];
                }
            }
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += a[i][k] * s[4 + 4 * k + j];
                    }
                    d[4 + 4 * i + j] = acc;
                }
            }
        }
        d
    }
}

const STATE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayState {
    pub t: f64,
    pub y: [f64; 2],
    pub eta: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropFrame {
    Cartesian,
    /// Blocks rotated so that the current (and initial) covector is along `e1`.
    Fermi,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagatorMatrix {
    pub m: M4,
    pub frame: PropFrame,
}

impl PropagatorMatrix {
    pub fn w1(&self) -> M2 {
        linalg::block(&self.m, 0, 0)
    }
    pub fn w2(&self) -> M2 {
        linalg::block(&self.m, 0, 1)
    }
    pub fn w3(&self) -> M2 {
        linalg::block(&self.m, 1, 0)
    }
    pub fn w4(&self) -> M2 {
        linalg::block(&self.m, 1, 1)
    }
    pub fn symplectic_defect(&self) -> f64 {
        linalg::symplectic_defect(&self.m)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    t: f64,
    s: [f64; STATE],
    ds: [f64; STATE],
}

/// Accepted integration nodes with dense output.
#[derive(Clone, Debug)]
pub struct Trajectory {
    nodes: Vec<Node>,
    pub truncated: bool,
    pub with_propagator: bool,
}

fn rotation_to_e1(v: [f64; 2]) -> M2 {
    let r = v[0].hypot(v[1]);
    let nu = [v[0] / r, v[1] / r];
    [[nu[0], nu[1]], [-nu[1], nu[0]]]
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.nodes[0].t
    }

    pub fn t_end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1].t
    }

    pub fn node_times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.t).collect()
    }

    fn state_at(&self, t: f64) -> [f64; STATE] {
        let n = &self.nodes;
        let fwd = self.t_end() >= self.t0();
        let key = |v: f64| if fwd { v } else { -v };
        let tk = key(t);
        let i = match n.binary_search_by(|p| key(p.t).total_cmp(&tk)) {
            Ok(i) => return n[i].s,
            Err(i) => i,
        };
        if i == 0 {
            return n[0].s;
        }
        if i >= n.len() {
            return n[n.len() - 1].s;
        }
        let (a, b) = (&n[i - 1], &n[i]);
        let h = b.t - a.t;
        let u = (t - a.t) / h;
        let (h00, h10, h01, h11) = (
            2.0 * u * u * u - 3.0 * u * u + 1.0,
            u * u * u - 2.0 * u * u + u,
            -2.0 * u * u * u + 3.0 * u * u,
            u * u * u - u * u,
        );
        let mut s = [0.0; STATE];
        for k in 0..STATE {
            s[k] = h00 * a.s[k] + h10 * h * a.ds[k] + h01 * b.s[k] + h11 * h * b.ds[k];
        }
        s
    }

    pub fn at(&self, t: f64) -> RayState {
        let s = self.state_at(t);
        RayState { t, y: [s[0], s[1]], eta: [s[2], s[3]] }
    }

    pub fn end(&self) -> RayState {
        let s = &self.nodes[self.nodes.len() - 1];
        RayState { t: s.t, y: [s.s[0], s.s[1]], eta: [s.s[2], s.s[3]] }
    }

    pub fn start(&self) -> RayState {
        let s = &self.nodes[0];
        RayState { t: s.t, y: [s.s[0], s.s[1]], eta: [s.s[2], s.s[3]] }
    }

    fn pi_of(&self, s: &[f64; STATE], frame: PropFrame) -> PropagatorMatrix {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = s[4 + 4 * i + j];
            }
        }
        if frame == PropFrame::Fermi {
            let s0 = &self.nodes[0].s;
            let r0 = rotation_to_e1([s0[2], s0[3]]);
            let rt = rotation_to_e1([s[2], s[3]]);
            let z = [[0.0; 2]; 2];
            let left = linalg::from_blocks(&rt, &z, &z, &rt);
            let r0t = linalg::transpose2(&r0);
            let right = linalg::from_blocks(&r0t, &z, &z, &r0t);
            m = linalg::mul4(&left, &linalg::mul4(&m, &right));
        }
        PropagatorMatrix { m, frame }
    }

    /// Propagator at time `t` (interpolated); requires a traced propagator.
    pub fn propagator_at(&self, t: f64, frame: PropFrame) -> PropagatorMatrix {
        assert!(self.with_propagator, "trajectory traced without propagator");
        self.pi_of(&self.state_at(t), frame)
    }

    pub fn propagator_end(&self, frame: PropFrame) -> PropagatorMatrix {
        assert!(self.with_propagator, "trajectory traced without propagator");
        self.pi_of(&self.nodes[self.nodes.len() - 1].s, frame)
    }

    /// `(t, y1, y2, η1, η2, det W1)` per accepted node.
    pub fn export_rows(&self) -> Vec<[f64; 6]> {
        self.nodes
            .iter()
            .map(|n| {
                let d = if self.with_propagator { n.s[4] * n.s[9] - n.s[5] * n.s[8] } else { f64::NAN };
                [n.t, n.s[0], n.s[1], n.s[2], n.s[3], d]
            })
            .collect()
    }

    /// `det W1` at every accepted node.
    pub fn det_w1_samples(&self) -> Vec<f64> {
        self.export_rows().iter().map(|r| r[5]).collect()
    }

    /// `det` of the upper-left block of `Π(t)·M` at every accepted node.
    pub fn det_w1_composed(&self, right: &M4) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| {
                let p = self.pi_of(&n.s, PropFrame::Cartesian).m;
                let q = linalg::mul4(&p, right);
                q[0][0] * q[1][1] - q[0][1] * q[1][0]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    pub rtol: f64,
    pub with_propagator: bool,
    pub max_step: f64,
    pub max_steps: usize,
}

impl FlowOptions {
    pub fn new(rtol: f64, with_propagator: bool) -> Self {
        Self { rtol, with_propagator, max_step: 0.25, max_steps: 100_000 }
    }
}

fn rk4_step(model: &SymbolModel, s: &[f64; STATE], f0: &[f64; STATE], h: f64, with_pi: bool) -> [f64; STATE] {
    let n = if with_pi { STATE } else { 4 };
    let mut tmp = *s;
    for k in 0..n {
        tmp[k] = s[k] + 0.5 * h * f0[k];
    }
    let k2 = model.rhs(&tmp, with_pi);
    for k in 0..n {
        tmp[k] = s[k] + 0.5 * h * k2[k];
    }
    let k3 = model.rhs(&tmp, with_pi);
    for k in 0..n {
        tmp[k] = s[k] + h * k3[k];
    }
    let k4 = model.rhs(&tmp, with_pi);
    let mut out = *s;
    for k in 0..n {
        out[k] = s[k] + h / 6.0 * (f0[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
    }
    out
}

fn check_inputs(x: [f64; 2], xi: [f64; 2], t0: f64, t1: f64, rtol: f64) -> Result<()> {
    if !(rtol > 1e-12 && rtol < 1e-4) {
        return Err(Error::InvalidParameter(format!("rtol {rtol:e} outside (1e-12, 1e-4)")));
    }
    if !(x.iter().chain(&xi).all(|v| v.is_finite()) && t0.is_finite() && t1.is_finite()) {
        return Err(Error::NonFinite("ray initial data".into()));
    }
    if xi[0] == 0.0 && xi[1] == 0.0 {
        return Err(Error::InvalidParameter("covector must be nonzero".into()));
    }
    Ok(())
}

/// Integrate from `(x, ξ)` at `t0` to time `t1` (either direction).
pub fn integrate(model: &SymbolModel, x: [f64; 2], xi: [f64; 2], t0: f64, t1: f64, opt: FlowOptions) -> Result<Trajectory> {
    check_inputs(x, xi, t0, t1, opt.rtol)?;
    let mut s = [0.0; STATE];
    s[..2].copy_from_slice(&x);
    s[2..4].copy_from_slice(&xi);
    if opt.with_propagator {
        for i in 0..4 {
            s[4 + 5 * i] = 1.0;
        }
    }
    let n = if opt.with_propagator { STATE } else { 4 };
    let f = model.rhs(&s, opt.with_propagator);
    let mut nodes = vec![Node { t: t0, s, ds: f }];
    let span = t1 - t0;
    let dir = span.signum();
    let mut t = t0;
    let mut h = (0.05 * span.abs()).min(opt.max_step).max(1e-6) * dir;
    let mut truncated = !model.inside(x);
    let atol = opt.rtol;
    let mut steps = 0;
    while !truncated && (t1 - t) * dir > 1e-14 * span.abs().max(1.0) {
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        let cur = *nodes.last().unwrap();
        let full = rk4_step(model, &cur.s, &cur.ds, h, opt.with_propagator);
        let mid = rk4_step(model, &cur.s, &cur.ds, 0.5 * h, opt.with_propagator);
        let fm = model.rhs(&mid, opt.with_propagator);
        let two = rk4_step(model, &mid, &fm, 0.5 * h, opt.with_propagator);
        let mut err: f64 = 0.0;
        for k in 0..n {
            let sc = atol + opt.rtol * cur.s[k].abs().max(two[k].abs());
            err = err.max((two[k] - full[k]).abs() / 15.0 / sc);
        }
        if !err.is_finite() {
            return Err(Error::Numerical("non-finite ray state".into()));
        }
        if err <= 1.0 {
            let mut ns = two;
            for k in 0..n {
                ns[k] += (two[k] - full[k]) / 15.0;
            }
            t += h;
            let ds = model.rhs(&ns, opt.with_propagator);
            nodes.push(Node { t, s: ns, ds });
            if !model.inside([ns[0], ns[1]]) {
                truncated = true;
            }
        }
        let fac = if err == 0.0 { 2.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 2.0) };
        h = (h * fac).abs().min(opt.max_step) * dir;
        steps += 1;
        if steps > opt.max_steps {
            return Err(Error::Numerical("ray integration exceeded step budget".into()));
        }
    }
    Ok(Trajectory { nodes, truncated, with_propagator: opt.with_propagator })
}

/// Ray `(y, η)(t)` from `(x, ξ)` at `t0` to `t1`.
pub fn flow(model: &SymbolModel, x: [f64; 2], xi: [f64; 2], t0: f64, t1: f64, rtol: f64) -> Result<Trajectory> {
    integrate(model, x, xi, t0, t1, FlowOptions::new(rtol, false))
}

/// Ray plus propagator matrix; returns the trajectory and `Π(t1)` in the requested frame.
pub fn propagator(
    model: &SymbolModel,
    x: [f64; 2],
    xi: [f64; 2],
    t0: f64,
    t1: f64,
    rtol: f64,
    frame: PropFrame,
) -> Result<(Trajectory, PropagatorMatrix)> {
    let tr = integrate(model, x, xi, t0, t1, FlowOptions::new(rtol, true))?;
    let p = tr.propagator_end(frame);
    Ok((tr, p))
}

/// Position and covector at `t0` of the ray that reaches `(y, ξ)` at time `t_end`.
pub fn backward_state(model: &SymbolModel, y: [f64; 2], xi: [f64; 2], t_end: f64, t0: f64, rtol: f64) -> Result<RayState> {
    let tr = integrate(model, y, xi, t_end, t0, FlowOptions::new(rtol, false))?;
    if tr.truncated {
        return Err(Error::RayTruncated(format!("backward ray from {y:?}")));
    }
    Ok(tr.end())
}

/// Starting point `x` of the ray that arrives at `(y, ξ)` at time `t_end`.
pub fn backward(model: &SymbolModel, y: [f64; 2], xi: [f64; 2], t_end: f64, t0: f64, rtol: f64) -> Result<[f64; 2]> {
    Ok(backward_state(model, y, xi, t_end, t0, rtol)?.y)
}

mod common;

use proptest::prelude::*;
use rand::Rng;
use wpfio::hamilton::{backward, flow, propagator, Medium, PropFrame, SymbolModel};
use wpfio::linalg::{self, M4};

use common::rng;

fn lens() -> SymbolModel {
    SymbolModel::new(Medium::Lens { c0: 2.0, kappa: -0.4, sigma: 3.0, center: [0.0, 14.0] })
}

fn endpoint(m: &SymbolModel, x: [f64; 2], xi: [f64; 2], t: f64) -> [f64; 4] {
    let e = flow(m, x, xi, 0.0, t, 1e-11).unwrap().end();
    [e.y[0], e.y[1], e.eta[0], e.eta[1]]
}

/// Central differences of the flow map with step `h` in each initial coordinate.
fn fd_jacobian(m: &SymbolModel, x: [f64; 2], xi: [f64; 2], t: f64, h: f64) -> M4 {
    let mut jac = [[0.0; 4]; 4];
    for c in 0..4 {
        let mut p = [x[0], x[1], xi[0], xi[1]];
        let mut q = p;
        p[c] += h;
        q[c] -= h;
        let a = endpoint(m, [p[0], p[1]], [p[2], p[3]], t);
        let b = endpoint(m, [q[0], q[1]], [q[2], q[3]], t);
        for r in 0..4 {
            jac[r][c] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn constant_medium_straight_rays() {
    let m = SymbolModel::new(Medium::Constant { c0: 2.0 });
    let x = [0.3, -1.0];
    let xi = [1.5, -2.0];
    let t = 3.5;
    let (tr, p) = propagator(&m, x, xi, 0.5, t, 1e-9, PropFrame::Cartesian).unwrap();
    let e = tr.end();
    let r = xi[0].hypot(xi[1]);
    let nu = [xi[0] / r, xi[1] / r];
    for i in 0..2 {
        assert!((e.y[i] - (x[i] + 3.0 * 2.0 * nu[i])).abs() < 1e-9);
        assert!((e.eta[i] - xi[i]).abs() < 1e-12);
    }
    let (w1, w2, w3, w4) = (p.w1(), p.w2(), p.w3(), p.w4());
    for i in 0..2 {
        for j in 0..2 {
            let d = if i == j { 1.0 } else { 0.0 };
            assert!((w1[i][j] - d).abs() < 1e-10);
            assert!(w3[i][j].abs() < 1e-12);
            assert!((w4[i][j] - d).abs() < 1e-10);
            let expect = 3.0 * 2.0 * (d - nu[i] * nu[j]) / r;
            assert!((w2[i][j] - expect).abs() < 1e-9);
        }
    }
    assert!(backward(&m, e.y, xi, t, 0.5, 1e-9).unwrap().iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
    assert_eq!(tr.det_w1_samples().iter().filter(|d| **d <= 0.0).count(), 0);
}

#[test]
fn lens_symplectic_along_100_rays() {
    let m = lens();
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = [r.gen_range(-2.0..2.0), r.gen_range(3.0..7.0)];
        let th = std::f64::consts::FRAC_PI_2 + r.gen_range(-0.4..0.4);
        let (tr, _) = propagator(&m, x, [th.cos(), th.sin()], 0.0, 7.0, 1e-9, PropFrame::Cartesian).unwrap();
        for t in tr.node_times() {
            worst = worst.max(tr.propagator_at(t, PropFrame::Cartesian).symplectic_defect());
            worst = worst.max(tr.propagator_at(t, PropFrame::Fermi).symplectic_defect());
        }
    }
    assert!(worst < 1e-6, "defect {worst:e}");
}

#[test]
fn propagator_matches_finite_differences() {
    let m = lens();
    let mut r = rng(12);
    for _ in 0..10 {
        let x = [r.gen_range(-2.0..2.0), r.gen_range(3.0..7.0)];
        let th = std::f64::consts::FRAC_PI_2 + r.gen_range(-0.3..0.3);
        let k = r.gen_range(0.5..3.0);
        let xi = [k * th.cos(), k * th.sin()];
        let (_, p) = propagator(&m, x, xi, 0.0, 7.0, 1e-9, PropFrame::Cartesian).unwrap();
        let fd = fd_jacobian(&m, x, xi, 7.0, 1e-5);
        let scale = fd.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let err = linalg::max_abs_diff4(&p.m, &fd) / scale;
        assert!(err < 1e-3, "relative error {err:e}");
    }
}

#[test]
fn time_reversal_returns_start() {
    let m = lens();
    let rtol = 1e-9;
    let mut r = rng(13);
    for _ in 0..20 {
        let x = [r.gen_range(-3.0..3.0), r.gen_range(2.0..8.0)];
        let th = r.gen_range(0.8..2.3f64);
        let xi = [th.cos(), th.sin()];
        let e = flow(&m, x, xi, 0.0, 7.0, rtol).unwrap().end();
        let back = backward(&m, e.y, e.eta, 7.0, 0.0, rtol).unwrap();
        let d = (back[0] - x[0]).hypot(back[1] - x[1]);
        assert!(d < 10.0 * rtol * x[0].hypot(x[1]).max(1.0), "distance {d:e}");
    }
}

#[test]
fn hamiltonian_is_conserved() {
    let m = lens();
    let rtol = 1e-9;
    let tr = flow(&m, [0.4, 5.0], [0.1, 1.0], 0.0, 7.0, rtol).unwrap();
    let p0 = m.symbol([0.4, 5.0], [0.1, 1.0]);
    for t in tr.node_times() {
        let s = tr.at(t);
        assert!((m.symbol(s.y, s.eta) - p0).abs() < 10.0 * rtol * p0);
    }
}

#[test]
fn lens_rays_focus_beyond_the_lens() {
    let m = lens();
    let up = [0.0, 1.0];
    let d_before = propagator(&m, [0.0, 4.5], up, 0.0, 7.0, 1e-9, PropFrame::Fermi).unwrap().1;
    let d_after = propagator(&m, [0.0, 6.5], up, 0.0, 7.0, 1e-9, PropFrame::Fermi).unwrap().1;
    assert!(linalg::det2(&d_before.w1()) > 0.0);
    assert!(linalg::det2(&d_after.w1()) < 0.0);
    // along-ray column stays regular; the deficiency is transverse
    let w = d_after.w1();
    assert!(w[1][0].abs() < 1e-6 && w[0][0] > 0.5);
}

#[test]
fn truncation_is_flagged() {
    let m = SymbolModel::with_domain(Medium::Constant { c0: 2.0 }, [-1.0, -1.0], [1.0, 1.0]);
    let tr = flow(&m, [0.0, 0.0], [1.0, 0.0], 0.0, 5.0, 1e-8).unwrap();
    assert!(tr.truncated);
    assert!(backward(&m, [0.0, 0.0], [1.0, 0.0], 5.0, 0.0, 1e-8).is_err());
    assert!(flow(&m, [0.0, 0.0], [0.0, 0.0], 0.0, 1.0, 1e-8).is_err());
    assert!(flow(&m, [0.0, 0.0], [1.0, 0.0], 0.0, 1.0, 1e-3).is_err());
}

#[test]
fn trajectory_export_has_det_column() {
    let (tr, _) = propagator(&lens(), [0.0, 6.5], [0.0, 1.0], 0.0, 7.0, 1e-8, PropFrame::Cartesian).unwrap();
    let rows = tr.export_rows();
    assert_eq!(rows[0][5], 1.0);
    assert!(rows.last().unwrap()[5] < 0.0);
    assert!((rows.last().unwrap()[0] - 7.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn degree_zero_homogeneity(x1 in -2.0f64..2.0, x2 in 3.0f64..7.0, th in 1.2f64..1.9, lam in 0.2f64..5.0) {
        let m = lens();
        let xi = [th.cos(), th.sin()];
        let a = flow(&m, [x1, x2], xi, 0.0, 7.0, 1e-10).unwrap().end();
        let b = flow(&m, [x1, x2], [lam * xi[0], lam * xi[1]], 0.0, 7.0, 1e-10).unwrap().end();
        for i in 0..2 {
            prop_assert!((a.y[i] - b.y[i]).abs() < 1e-7);
            prop_assert!((a.eta[i] * lam - b.eta[i]).abs() < 1e-7 * lam);
        }
        let xa = backward(&m, a.y, a.eta, 7.0, 0.0, 1e-10).unwrap();
        let xb = backward(&m, a.y, [lam * a.eta[0], lam * a.eta[1]], 7.0, 0.0, 1e-10).unwrap();
        prop_assert!((xa[0] - xb[0]).abs() < 1e-7 && (xa[1] - xb[1]).abs() < 1e-7);
    }
}

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use wpfio::caustic::{detect, CausticLattice, DetectOptions};
use wpfio::diffeo::DiffeoParams;
use wpfio::fio::*;
use wpfio::frame::build_tiling;
use wpfio::hamilton::{flow, Medium, SymbolModel};
use wpfio::partition::{build_cover, cone_windows, Cover, PartitionOptions};
use wpfio::{Error, Field, Grid, C64};

mod common;

fn constant() -> SymbolModel {
    SymbolModel::new(Medium::Constant { c0: 2.0 })
}

fn lattice() -> CausticLattice {
    CausticLattice::covering([-2.0, 3.5], [2.0, 7.0], 0.2, FRAC_PI_2 - 0.27, FRAC_PI_2 + 0.27, 0.03).unwrap()
}

fn cover_for(model: &SymbolModel, anchors: &[DiffeoParams]) -> Cover {
    let cm = detect(model, &lattice(), 0.0, 7.0, &DetectOptions::default()).unwrap();
    build_cover(&cm, anchors, &PartitionOptions::default()).unwrap()
}

fn anchor() -> DiffeoParams {
    DiffeoParams::from_angle([0.0, 5.0], FRAC_PI_2, 1.0).unwrap()
}

/// `e^{−i T c0 |D|} u` evaluated with the DFT.
fn exact_constant(u: &Field, c0: f64, t: f64) -> Field {
    let g = u.grid;
    let mut s = wpfio::fft::forward(&u.data, g.n);
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            let xi = [g.signed_bin(i1) as f64 * g.dxi(), g.signed_bin(i2) as f64 * g.dxi()];
            s[i1 * g.n + i2] *= C64::from_polar(1.0, -c0 * t * xi[0].hypot(xi[1]));
        }
    }
    Field::from_vec(g, wpfio::fft::inverse(&s, g.n)).unwrap()
}

#[test]
fn constant_medium_tables_are_analytic() {
    let m = constant();
    let seeds = Seeds::lattice([-1.0, 4.0], [1.0, 6.0], 0.2);
    let theta = FRAC_PI_2 + 0.1;
    let tab = build_tables(&m, 0.0, 7.0, theta, None, &seeds, &|_| 1.0, &TableOptions::default()).unwrap();
    let nu = [theta.cos(), theta.sin()];
    assert!(tab.valid_count() > 100);
    for (i, n) in tab.nodes.iter().enumerate() {
        assert!(n.len() <= 1);
        let Some(n) = n.first() else { continue };
        let y = tab.grid.point(i);
        let t = [y[0] - 14.0 * nu[0], y[1] - 14.0 * nu[1]];
        assert!((n.t[0] - t[0]).abs() < 1e-8 && (n.t[1] - t[1]).abs() < 1e-8);
        assert!((n.hess + 14.0).abs() < 1e-7, "{}", n.hess);
        assert!((n.det_w1 - 1.0).abs() < 1e-8);
        assert_eq!(n.kmah, 0);
        assert!((tab.amplitude(n) - C64::new(1.0, 0.0)).norm() < 1e-8);
    }
}

// ∂Š/∂y must equal the output covector of the ray from (T(y), ν̃)
#[test]
fn table_phase_gradient_is_the_output_covector() {
    let m = common::lens_model();
    let theta = FRAC_PI_2 - 0.05;
    let h = 1e-3;
    let seeds = Seeds::lattice([0.3 - 2.0 * h, 5.0 - 2.0 * h], [0.3 + 2.0 * h, 5.0 + 2.0 * h], h);
    let opt = TableOptions { spacing: h, pad: 2.0 * h, newton_tol: 1e-11, rtol: 1e-11, ..TableOptions::default() };
    let tab = build_tables(&m, 0.0, 7.0, theta, None, &seeds, &|_| 1.0, &opt).unwrap();
    let g = tab.grid;
    let mut checked = 0;
    for i1 in 1..g.n[0] - 1 {
        for i2 in 1..g.n[1] - 1 {
            let at = |a: usize, b: usize| tab.phase(a * g.n[1] + b, 0);
            let (Some(_), Some(e), Some(w), Some(n), Some(s)) = (at(i1, i2), at(i1 + 1, i2), at(i1 - 1, i2), at(i1, i2 + 1), at(i1, i2 - 1)) else { continue };
            let grad = [(e - w) / (2.0 * h), (n - s) / (2.0 * h)];
            let node = tab.nodes[i1 * g.n[1] + i2][0];
            let end = flow(&m, node.t, tab.nu, 0.0, 7.0, 1e-11).unwrap().end();
            let y = g.point(i1 * g.n[1] + i2);
            assert!((end.y[0] - y[0]).hypot(end.y[1] - y[1]) < 1e-8);
            assert!((grad[0] - end.eta[0]).abs() < 1e-5 && (grad[1] - end.eta[1]).abs() < 1e-5, "{grad:?} {:?}", end.eta);
            checked += 1;
        }
    }
    assert!(checked >= 4, "{checked}");
}

#[test]
fn sheared_tables_have_regular_w1_on_the_fold() {
    let m = common::lens_model();
    let cover = cover_for(&m, &[anchor()]);
    let si = cover.sets.iter().position(|s| s.name() == "O21").unwrap();
    let p = cover.diffeos[0];
    let lat = &cover.lattice;
    let pts = (0..lat.nx[0] * lat.nx[1]).map(|i| p.q(lat.x(i / lat.nx[1], i % lat.nx[1]))).collect();
    let seeds = Seeds { points: pts, spacing: lat.dx };
    let theta = FRAC_PI_2;
    let w = |xt: [f64; 2]| cover.weight_sheared(si, xt, theta);
    let tab = build_tables(&m, 0.0, 7.0, theta, Some(&p), &seeds, &w, &TableOptions::default()).unwrap();
    assert!(tab.valid_count() > 50, "{}", tab.valid_count());
    let dets: Vec<f64> = tab.nodes.iter().flatten().map(|n| n.det_w1.abs()).collect();
    let min = dets.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min > 1e-2, "{min}");
    let gmax = tab.nodes.iter().flatten().map(|n| n.gamma).fold(0.0, f64::max);
    assert!(tab.nodes.iter().flatten().all(|n| n.gamma > 0.0 && n.gamma <= 1.0), "{gmax}");
}

#[test]
fn lens_identity_tables_count_kmah_per_ray() {
    let m = common::lens_model();
    let seeds = Seeds::lattice([-2.0, 3.5], [2.0, 7.0], 0.2);
    let tab = build_tables(&m, 0.0, 7.0, FRAC_PI_2, None, &seeds, &|_| 1.0, &TableOptions::default()).unwrap();
    let ms: Vec<u32> = tab.nodes.iter().flatten().map(|n| n.kmah).collect();
    assert!(ms.contains(&0) && ms.contains(&1), "{:?}", ms.iter().max());
    for n in tab.nodes.iter().flatten() {
        let a = tab.amplitude(n);
        let expect = -0.5 * PI * n.kmah as f64;
        assert!((wpfio::frame::wrap_angle(a.arg() - expect)).abs() < 1e-12);
    }
    let off = GeneratingTables { kmah_phase: false, ..tab.clone() };
    assert!(off.nodes.iter().flatten().all(|n| off.amplitude(n).im == 0.0));
}

#[test]
fn zero_h_and_constant_h_give_rank_one() {
    let q: Vec<f64> = (0..50).map(|i| 0.01 * i as f64).collect();
    let k = lowrank_kernel(&[0.0; 8], &q, 1e-6, 32).unwrap();
    assert_eq!(k.rank, 1);
    assert!(q.iter().all(|q| (k.eval(0.3, *q) - C64::new(1.0, 0.0)).norm() < 1e-15));
    let k = lowrank_kernel(&[-14.0; 8], &q, 1e-6, 32).unwrap();
    assert_eq!(k.rank, 1);
    for q in &q {
        assert!((k.eval(-14.0, *q) - C64::from_polar(1.0, -14.0 * q)).norm() < 1e-14);
    }
}

fn lens_like_samples() -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = (0..200).map(|i| -16.0 + 8.0 * i as f64 / 199.0).collect();
    let q: Vec<f64> = (0..400).map(|i| 0.5 * (i as f64 / 399.0).powi(2)).collect();
    (h, q)
}

#[test]
fn rank_grows_as_accuracy_tightens() {
    let (h, q) = lens_like_samples();
    let ranks: Vec<usize> = [1e-3, 1e-5, 1e-7, 1e-9].iter().map(|e| lowrank_kernel(&h, &q, *e, 64).unwrap().rank).collect();
    assert!(ranks.windows(2).all(|w| w[1] >= w[0]), "{ranks:?}");
    assert!(ranks[0] > 1);
}

#[test]
fn kernel_error_is_within_eps_against_dense_evaluation() {
    let (h, q) = lens_like_samples();
    let mut r = common::rng(11);
    use rand::Rng;
    for eps in [1e-3, 1e-5] {
        let k = lowrank_kernel(&h, &q, eps, 64).unwrap();
        assert!(k.achieved <= eps);
        let mut worst = 0.0f64;
        for _ in 0..4000 {
            let (a, b) = (r.gen_range(-16.0..-8.0), r.gen_range(0.0..0.5));
            worst = worst.max((k.eval(a, b) - C64::from_polar(1.0, a * b)).norm());
        }
        assert!(worst <= eps, "eps {eps}: {worst}");
    }
}

#[test]
fn rank_cap_is_reported() {
    let (h, q) = lens_like_samples();
    match lowrank_kernel(&h, &q, 1e-9, 2) {
        Err(Error::RankCap { rank, achieved }) => {
            assert_eq!(rank, 2);
            assert!(achieved > 1e-9);
        }
        other => panic!("{other:?}"),
    }
    assert!(lowrank_kernel(&h, &q, 0.5, 8).is_err());
}

#[test]
fn rank_does_not_grow_when_cones_subdivide() {
    let grid = Grid::new(256, 25.6, [-12.8, 0.0]).unwrap();
    let t = build_tiling(grid, 4, 5.0).unwrap();
    let b = t.nearest_box(4, FRAC_PI_2);
    let full = t.box_spectrum_from_dft(&vec![C64::new(1.0, 0.0); grid.len()], b);
    let h: Vec<f64> = (0..100).map(|i| -15.0 + 6.0 * i as f64 / 99.0).collect();
    let mut last = usize::MAX;
    for j in [1, 3, 5, 11] {
        let c = cone_windows(b, j, grid.dxi()).unwrap();
        let mut worst = 0;
        for beta in 0..c.count() {
            let nu = [c.centres[beta].cos(), c.centres[beta].sin()];
            let q: Vec<f64> = (0..full.len())
                .filter(|&l| {
                    let xi = full.xi(l);
                    c.window(beta, b.theta + wpfio::frame::wrap_angle(xi[1].atan2(xi[0]) - b.theta)) > 0.0
                })
                .map(|l| kernel_q(full.xi(l), nu))
                .collect();
            worst = worst.max(lowrank_kernel(&h, &q, 1e-4, 64).unwrap().rank);
        }
        assert!(worst <= last, "J={j}: {worst} > {last}");
        last = worst;
    }
}

#[test]
fn zero_box_spectrum_gives_zero() {
    let m = constant();
    let grid = Grid::new(128, 12.8, [-6.4, 0.0]).unwrap();
    let t = build_tiling(grid, 3, 5.0).unwrap();
    let b = t.nearest_box(2, FRAC_PI_2);
    let seeds = Seeds::lattice([-1.0, 2.0], [1.0, 4.0], 0.2);
    let tab = build_tables(&m, 0.0, 2.0, FRAC_PI_2, None, &seeds, &|_| 1.0, &TableOptions::default()).unwrap();
    let spec = t.box_spectrum_from_dft(&vec![C64::new(0.0, 0.0); grid.len()], b);
    let k = lowrank_kernel(&tab.hess_values(), &[0.0, 0.1], 1e-4, 8).unwrap();
    let f = apply_box(&spec, b, None, &tab, &k, &grid, 1e-8).unwrap();
    assert!(f.data.iter().all(|v| *v == C64::new(0.0, 0.0)));
}

#[test]
fn kernel_q_vanishes_on_the_axis_and_behind() {
    assert_eq!(kernel_q([0.0, 3.0], [0.0, 1.0]), 0.0);
    assert_eq!(kernel_q([1.0, -3.0], [0.0, 1.0]), 0.0);
    assert!((kernel_q([1.0, 2.0], [0.0, 1.0]) - 0.25).abs() < 1e-15);
}

fn constant_setup() -> (SymbolModel, wpfio::frame::Tiling, Cover) {
    let m = constant();
    let grid = Grid::new(256, 25.6, [-12.8, 0.0]).unwrap();
    let t = build_tiling(grid, 4, 5.0).unwrap();
    let cover = cover_for(&m, &[]);
    (m, t, cover)
}

fn disc_error(f: &Field, reference: &Field, c: [f64; 2], r: f64) -> f64 {
    let g = f.grid;
    let (mut num, mut den) = (0.0, 0.0);
    for i1 in 0..g.n {
        for i2 in 0..g.n {
            let p = g.point(i1, i2);
            if (p[0] - c[0]).hypot(p[1] - c[1]) <= r {
                num += (f.at(i1, i2) - reference.at(i1, i2)).norm_sqr();
                den += reference.at(i1, i2).norm_sqr();
            }
        }
    }
    (num / den).sqrt()
}

#[test]
fn constant_medium_pipeline_matches_the_half_wave_solution() {
    let (m, t, cover) = constant_setup();
    let lp = common::lens_packet(3);
    let exact = exact_constant(&lp.portion, 2.0, 7.0);
    let mut errs = Vec::new();
    for j in [1, 5] {
        let table = TableOptions { window: Some(([-4.0, 15.0], [4.0, 23.0])), ..TableOptions::default() };
        // the single constant set has unit weight everywhere, so seeding past the lattice is exact
        let opt = OperatorOptions { cones: ConeCount::Fixed(j), table, seed_margin: 8.0, ..OperatorOptions::default() };
        let mut op = Operator::new(&m, &t, &cover, 0.0, 7.0, opt);
        let res = op.apply(&lp.portion).unwrap();
        assert_eq!(res.sets.len(), 1);
        assert!(op.log.iter().all(|e| e.rank == 1));
        errs.push(disc_error(&res.total, &exact, [0.0, 19.0], 3.0));
    }
    assert!(errs[0] < 2e-2 && errs[1] < 1.5e-3, "{errs:?}");
}

#[test]
fn operator_is_linear() {
    let (m, t, cover) = constant_setup();
    let a = common::lens_packet(3).portion;
    let mut b = common::lens_packet(2).portion;
    b.scale(C64::new(0.0, 2.0));
    let mut sum = a.clone();
    sum.add_assign(&b);
    let opt = OperatorOptions { box_precision: 1e-12, ..OperatorOptions::default() };
    let mut op = Operator::new(&m, &t, &cover, 0.0, 7.0, opt);
    let fa = op.apply(&a).unwrap().total;
    let fb = op.apply(&b).unwrap().total;
    let fs = op.apply(&sum).unwrap().total;
    let mut lin = fa.clone();
    lin.add_assign(&fb);
    assert!(fs.rel_error(&lin) < 1e-10, "{}", fs.rel_error(&lin));
}

#[test]
fn zero_input_gives_zero_output() {
    let (m, t, cover) = constant_setup();
    let mut op = Operator::new(&m, &t, &cover, 0.0, 7.0, OperatorOptions::default());
    let res = op.apply(&Field::zeros(t.grid)).unwrap();
    assert!(res.total.data.iter().all(|v| *v == C64::new(0.0, 0.0)));
    assert!(res.input_boxes.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_meets_eps_on_its_samples(h0 in -20.0f64..0.0, dh in 0.1f64..6.0, qmax in 0.01f64..0.6) {
        let h: Vec<f64> = (0..40).map(|i| h0 + dh * i as f64 / 39.0).collect();
        let q: Vec<f64> = (0..60).map(|i| qmax * i as f64 / 59.0).collect();
        let k = lowrank_kernel(&h, &q, 1e-5, 64).unwrap();
        for a in &h {
            for b in &q {
                prop_assert!((k.eval(*a, *b) - C64::from_polar(1.0, a * b)).norm() <= 1e-5);
            }
        }
    }

    #[test]
    fn table_interpolation_reproduces_nodes(i in 0usize..400) {
        let seeds = Seeds::lattice([-1.0, 4.0], [1.0, 6.0], 0.2);
        let tab = build_tables(&constant(), 0.0, 3.0, FRAC_PI_2, None, &seeds, &|_| 1.0, &TableOptions::default()).unwrap();
        let idx = i % tab.grid.len();
        let samples = tab.interpolate(tab.grid.point(idx));
        prop_assert!(tab.nodes[idx].len() <= 1);
        if let (Some(n), Some(s)) = (tab.nodes[idx].first(), samples.first()) {
            prop_assert_eq!(samples.len(), 1);
            prop_assert!((s.t[0] - n.t[0]).abs() < 1e-12 && (s.t[1] - n.t[1]).abs() < 1e-12);
            prop_assert!((s.hess - n.hess).abs() < 1e-9);
        }
    }
}

#[test]
fn box_algorithm_is_the_second_order_phase_model() {
    let (_, dev) = common::constant_box_error(3, 3);
    assert!(dev < 1e-9, "{dev}");
}

#[test]
fn cone_subdivision_reduces_the_box_error() {
    let errs: Vec<f64> = [1, 3, 5].iter().map(|&j| common::constant_box_error(3, j).0).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[2] < 1e-3, "{errs:?}");
}

#[test]
fn constant_medium_box_error_decreases_with_scale() {
    let errs: Vec<f64> = [2, 3, 4].iter().map(|&k| common::constant_box_error(k, 1).0).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use wpfio::caustic::{detect, kmah, rank_profile, CausticLattice, DetectOptions, SetKind};
use wpfio::hamilton::{propagator, Medium, PropFrame, SymbolModel};

fn lens() -> SymbolModel {
    SymbolModel::new(Medium::Lens { c0: 2.0, kappa: -0.4, sigma: 3.0, center: [0.0, 14.0] })
}

fn lens_lattice(dx: f64) -> CausticLattice {
    CausticLattice::covering([-2.0, 3.5], [2.0, 7.0], dx, FRAC_PI_2 - 0.27, FRAC_PI_2 + 0.27, 0.03).unwrap()
}

#[test]
fn rank_profile_examples() {
    let p = rank_profile(&[[1.0, 0.0], [0.0, 1.0]], 1e-6).unwrap();
    assert!(p.deficient.is_empty());
    let p = rank_profile(&[[1.0, 0.0], [0.0, 0.0]], 1e-6).unwrap();
    assert_eq!(p.deficient, vec![2]);
    assert_eq!(p.null_basis, vec![[0.0, 1.0]]);
    assert!(rank_profile(&[[f64::NAN, 0.0], [0.0, 1.0]], 1e-6).is_err());
    assert!(rank_profile(&[[1.0, 0.0], [0.0, 1.0]], 0.5).is_err());
}

#[test]
fn lens_deficiency_is_transverse_at_the_cusp() {
    let m = lens();
    let cm = detect(&m, &lens_lattice(0.1), 0.0, 7.0, &DetectOptions::default()).unwrap();
    let c = &cm.cusps[0];
    let (_, p) = propagator(&m, c.x, [c.theta.cos(), c.theta.sin()], 0.0, 7.0, 1e-10, PropFrame::Fermi).unwrap();
    let prof = rank_profile(&p.w1(), 5e-3).unwrap();
    assert_eq!(prof.deficient, vec![2]);
}

#[test]
fn constant_medium_has_one_set() {
    let m = SymbolModel::new(Medium::Constant { c0: 2.0 });
    let cm = detect(&m, &lens_lattice(0.25), 0.0, 7.0, &DetectOptions::default()).unwrap();
    assert_eq!(cm.set_count(), 1);
    assert_eq!(cm.sets[0].kind, SetKind::Positive);
    assert!(cm.sigma.is_empty());
    assert!(!cm.has_cusp());
    assert!(cm.samples.iter().all(|s| s.deficient == 0 && s.kmah == 0));
}

#[test]
fn lens_has_three_sets_and_a_cusp() {
    let m = lens();
    let coarse = detect(&m, &lens_lattice(0.2), 0.0, 7.0, &DetectOptions::default()).unwrap();
    let fine = detect(&m, &lens_lattice(0.1), 0.0, 7.0, &DetectOptions::default()).unwrap();
    for cm in [&coarse, &fine] {
        assert_eq!(cm.set_count(), 3);
        let kinds: Vec<SetKind> = cm.sets.iter().map(|s| s.kind).collect();
        assert!(kinds.contains(&SetKind::Positive) && kinds.contains(&SetKind::Caustic) && kinds.contains(&SetKind::Negative));
        assert!(cm.has_cusp());
        let neg = cm.sets.iter().find(|s| s.kind == SetKind::Negative).unwrap();
        assert_eq!(neg.kmah, 1);
        // every sample carries exactly one label and one component
        assert_eq!(cm.labels.len(), cm.lattice.len());
        assert!(cm.component.iter().all(|c| *c < cm.sets.len()));
    }
    // cusp image sits on the axis beyond the lens
    let c = &fine.cusps[0];
    assert!(c.y[0].abs() < 0.5 && (17.0..19.5).contains(&c.y[1]), "{c:?}");
    assert!(c.x[0].abs() < 0.5 && (5.0..6.0).contains(&c.x[1]), "{c:?}");
}

#[test]
fn sigma_points_lie_between_opposite_signs() {
    let cm = detect(&lens(), &lens_lattice(0.2), 0.0, 7.0, &DetectOptions::default()).unwrap();
    assert!(!cm.sigma.is_empty());
    let lat = cm.lattice;
    for p in &cm.sigma {
        let (a, b) = p.pair;
        assert!(cm.samples[a].det_w1 * cm.samples[b].det_w1 < 0.0);
        assert_eq!(cm.labels[a], SetKind::Caustic);
        assert_eq!(cm.labels[b], SetKind::Caustic);
        let (xa, ta) = lat.point(a);
        let (xb, _) = lat.point(b);
        assert_eq!(p.theta, ta);
        for d in 0..2 {
            assert!(p.x[d] >= xa[d].min(xb[d]) - 1e-12 && p.x[d] <= xa[d].max(xb[d]) + 1e-12);
        }
    }
}

#[test]
fn kmah_counts() {
    assert_eq!(kmah(&[1.0, 0.5, 0.2], 1e-9).unwrap(), 0);
    assert_eq!(kmah(&[1.0, 0.5, -0.2, -1.0], 1e-9).unwrap(), 1);
    assert_eq!(kmah(&[1.0, 0.0, -1.0, 0.3], 1e-9).unwrap(), 2);
    assert!(kmah(&[1.0, 0.0, 0.0, 0.0, -1.0], 1e-9).is_err());

    let constant = SymbolModel::new(Medium::Constant { c0: 2.0 });
    let (tr, _) = propagator(&constant, [0.0, 5.0], [0.0, 1.0], 0.0, 7.0, 1e-9, PropFrame::Cartesian).unwrap();
    assert_eq!(kmah(&tr.det_w1_samples(), 1e-9).unwrap(), 0);

    let (tr, _) = propagator(&lens(), [0.0, 6.5], [0.0, 1.0], 0.0, 7.0, 1e-9, PropFrame::Cartesian).unwrap();
    assert_eq!(kmah(&tr.det_w1_samples(), 1e-9).unwrap(), 1);
}

#[test]
fn kmah_two_crossings_and_monotone_in_time() {
    let m = SymbolModel::new(Medium::DoubleLens { c0: 2.0, first: [-0.4, 3.0, 0.0, 14.0], second: [-0.4, 3.0, 0.0, 34.0] });
    let mut last = 0;
    for t in [2.0, 5.0, 7.0, 10.0, 14.0, 17.0, 20.0, 24.0] {
        let (tr, _) = propagator(&m, [0.3, 6.5], [0.0, 1.0], 0.0, t, 1e-9, PropFrame::Cartesian).unwrap();
        let k = kmah(&tr.det_w1_samples(), 1e-9).unwrap();
        assert!(k >= last);
        last = k;
    }
    assert_eq!(last, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn kmah_nondecreasing_in_t(x1 in -2.0f64..2.0, x2 in 3.0f64..8.0, th in 1.3f64..1.85) {
        let m = lens();
        let mut last = 0;
        for t in [3.0, 5.0, 7.0, 9.0] {
            let (tr, _) = propagator(&m, [x1, x2], [th.cos(), th.sin()], 0.0, t, 1e-9, PropFrame::Cartesian).unwrap();
            let k = kmah(&tr.det_w1_samples(), 1e-12).unwrap();
            prop_assert!(k >= last);
            last = k;
        }
    }
}

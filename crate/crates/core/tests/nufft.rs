mod common;

use proptest::prelude::*;
use rand::Rng;
use wpfio::nufft::{eval_adjoint, eval_adjoint_gridded, eval_direct, SampledSpectrum};
use wpfio::{fft, C64};

use common::{max_abs, rng};

/// Plain double loop over samples and targets.
fn dense(s: &SampledSpectrum, x: &[[f64; 2]]) -> Vec<C64> {
    x.iter()
        .map(|p| {
            let mut acc = C64::new(0.0, 0.0);
            for l in 0..s.len() {
                let xi = s.xi(l);
                let ph = (p[0] - s.x_origin[0]) * xi[0] + (p[1] - s.x_origin[1]) * xi[1];
                acc += s.values[l] * C64::from_polar(1.0, ph);
            }
            acc
        })
        .collect()
}

fn random_spectrum(seed: u64, dims: [usize; 2], lo: [i64; 2]) -> SampledSpectrum {
    let mut r = rng(seed);
    SampledSpectrum {
        dxi: 2.0 * std::f64::consts::PI / 25.6,
        lo,
        dims,
        values: (0..dims[0] * dims[1]).map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect(),
        x_origin: [-12.8, 0.0],
        box_id: None,
    }
}

fn random_targets(seed: u64, n: usize) -> Vec<[f64; 2]> {
    let mut r = rng(seed);
    (0..n).map(|_| [r.gen_range(-20.0..20.0), r.gen_range(-5.0..30.0)]).collect()
}

fn rel_max(a: &[C64], b: &[C64]) -> f64 {
    let e = a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    e / max_abs(b)
}

#[test]
fn single_sample_is_exact_exponential() {
    let mut s = random_spectrum(1, [5, 4], [10, -3]);
    s.values.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    s.values[7] = C64::new(1.0, 0.0);
    let xi = s.xi(7);
    let x = random_targets(2, 200);
    let g = eval_adjoint(&s, &x, 1e-10).unwrap();
    for (p, v) in x.iter().zip(&g) {
        let e = C64::from_polar(1.0, (p[0] + 12.8) * xi[0] + p[1] * xi[1]);
        assert!((v - e).norm() < 1e-12);
    }
}

#[test]
fn regular_targets_match_inverse_dft() {
    let n = 64;
    let l = 25.6;
    let mut s = random_spectrum(3, [n, n], [-(n as i64) / 2, -(n as i64) / 2]);
    s.dxi = 2.0 * std::f64::consts::PI / l;
    s.x_origin = [0.0, 0.0];
    let h = l / n as f64;
    let x: Vec<[f64; 2]> = (0..n * n).map(|p| [h * (p / n) as f64, h * (p % n) as f64]).collect();
    // inverse DFT on the same bins, unnormalized
    let mut spec = vec![C64::new(0.0, 0.0); n * n];
    for li in 0..s.len() {
        let b = s.bin(li);
        spec[(b[0].rem_euclid(n as i64) as usize) * n + b[1].rem_euclid(n as i64) as usize] = s.values[li];
    }
    fft::fft2(&mut spec, n, n, true);
    for tol in [1e-6, 1e-10] {
        let g = eval_adjoint_gridded(&s, &x, tol).unwrap();
        assert!(rel_max(&g, &spec) < tol, "tol {tol}: {}", rel_max(&g, &spec));
    }
}

#[test]
fn thousand_by_thousand_matches_dense_sum() {
    let s = random_spectrum(5, [40, 25], [3, -12]);
    let x = random_targets(6, 1000);
    let want = dense(&s, &x);
    for tol in [1e-6, 1e-10] {
        let g = eval_adjoint_gridded(&s, &x, tol).unwrap();
        assert!(rel_max(&g, &want) < tol);
        let g = eval_adjoint(&s, &x, tol).unwrap();
        assert!(rel_max(&g, &want) < tol);
    }
    assert!(rel_max(&eval_direct(&s, &x), &want) < 1e-12);
}

#[test]
fn twenty_random_instances() {
    for i in 0..20u64 {
        let mut r = rng(100 + i);
        let dims = [r.gen_range(1..70), r.gen_range(1..70)];
        let lo = [r.gen_range(-80..40), r.gen_range(-80..40)];
        let s = random_spectrum(200 + i, dims, lo);
        let x = random_targets(300 + i, r.gen_range(1..400));
        let want = dense(&s, &x);
        for tol in [1e-6, 1e-10] {
            let g = eval_adjoint_gridded(&s, &x, tol).unwrap();
            let e = rel_max(&g, &want);
            assert!(e < tol, "instance {i} dims {dims:?} tol {tol}: {e:e}");
        }
    }
}

#[test]
fn empty_and_invalid_inputs() {
    let mut s = random_spectrum(1, [4, 4], [0, 0]);
    s.values.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    let g = eval_adjoint(&s, &random_targets(1, 10), 1e-8).unwrap();
    assert!(g.iter().all(|v| *v == C64::new(0.0, 0.0)));
    let s0 = SampledSpectrum { dims: [0, 0], values: vec![], ..s.clone() };
    assert_eq!(eval_adjoint(&s0, &random_targets(1, 3), 1e-8).unwrap().len(), 3);

    let mut bad = random_spectrum(1, [4, 4], [0, 0]);
    bad.values[3] = C64::new(f64::NAN, 0.0);
    assert!(eval_adjoint(&bad, &random_targets(1, 3), 1e-8).is_err());
    let good = random_spectrum(1, [4, 4], [0, 0]);
    assert!(eval_adjoint(&good, &[[f64::INFINITY, 0.0]], 1e-8).is_err());
    assert!(eval_adjoint(&good, &[[0.0, 0.0]], 1e-1).is_err());
    assert!(eval_adjoint(&good, &[[0.0, 0.0]], 1e-15).is_err());
}

#[test]
fn hermitian_spectrum_gives_real_output() {
    // symmetric bin range −m..=m with ĝ(−j) = conj ĝ(j)
    let m = 9i64;
    let d = (2 * m + 1) as usize;
    let mut s = random_spectrum(8, [d, d], [-m, -m]);
    for l in 0..s.len() {
        let b = s.bin(l);
        let lm = ((-b[0] + m) as usize) * d + (-b[1] + m) as usize;
        if lm > l {
            s.values[lm] = s.values[l].conj();
        } else if lm == l {
            s.values[l] = C64::new(s.values[l].re, 0.0);
        }
    }
    s.x_origin = [0.0, 0.0];
    let x = random_targets(9, 500);
    let tol = 1e-8;
    let g = eval_adjoint_gridded(&s, &x, tol).unwrap();
    let gmax = max_abs(&g);
    assert!(g.iter().all(|v| v.im.abs() < tol * gmax));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn linear_in_spectrum(seed in 0u64..10_000, re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let a = random_spectrum(seed, [17, 23], [-4, 30]);
        let b = random_spectrum(seed + 1, [17, 23], [-4, 30]);
        let c = C64::new(re, im);
        let mut ab = a.clone();
        for (v, w) in ab.values.iter_mut().zip(&b.values) {
            *v = c * *v + w;
        }
        let x = random_targets(seed + 2, 64);
        let ga = eval_adjoint_gridded(&a, &x, 1e-10).unwrap();
        let gb = eval_adjoint_gridded(&b, &x, 1e-10).unwrap();
        let gab = eval_adjoint_gridded(&ab, &x, 1e-10).unwrap();
        let comb: Vec<C64> = ga.iter().zip(&gb).map(|(p, q)| c * p + q).collect();
        prop_assert!(rel_max(&gab, &comb) < 1e-11);
    }
}

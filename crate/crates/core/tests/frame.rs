mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use wpfio::frame::{self, build_tiling, forward_transform, frame_element, inverse_transform, PacketCoefficients};
use wpfio::{Field, Grid, C64};

use common::{random_field, rel_l2};

fn grid(n: usize) -> Grid {
    Grid::new(n, n as f64 * 0.1, [0.0, 0.0]).unwrap()
}

#[test]
fn copartition_sums_to_one() {
    for (n, k) in [(64, 2), (64, 3), (128, 3), (256, 4)] {
        let t = build_tiling(grid(n), k, 8.0).unwrap();
        let worst = t.copartition_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "n={n} k={k}: {worst:e}");
    }
}

#[test]
fn orientation_counts_follow_parabolic_scaling() {
    let t = build_tiling(grid(256), 3, 8.0).unwrap();
    assert_eq!(t.orientations, vec![1, 11, 16, 23]);
    assert!(t.metadata_text().contains("orientations = [1, 11, 16, 23]"));
}

#[test]
fn nyquist_guard() {
    let e = build_tiling(grid(64), 4, 8.0).unwrap_err();
    assert!(e.to_string().contains("tiling exceeds Nyquist"));
    assert!(build_tiling(grid(64), 3, 8.0).is_ok());
}

#[test]
fn box_dimensions_scale_parabolically() {
    let t = build_tiling(grid(256), 4, 8.0).unwrap();
    for k in 1..4 {
        let a = t.boxes_at_scale(k).next().unwrap();
        let b = t.boxes_at_scale(k + 1).next().unwrap();
        let rp = b.length_parallel / a.length_parallel;
        let rq = b.length_perp / a.length_perp;
        assert!((1.8..=2.2).contains(&rp), "k={k} L' ratio {rp}");
        assert!((1.3..=1.5).contains(&rq), "k={k} L'' ratio {rq}");
        let det = a.dilation[0] * a.dilation[1];
        assert!((det - a.volume / (4.0 * PI * PI)).abs() < 1e-12 * det.max(1.0));
    }
}

#[test]
fn windows_live_inside_their_box() {
    let t = build_tiling(grid(128), 3, 8.0).unwrap();
    let dxi = t.grid.dxi();
    for b in t.boxes.iter().filter(|b| b.scale_k > 0) {
        for &(_, l, _) in &b.support {
            let xi = b.xi(l, dxi);
            let r = xi[0].hypot(xi[1]);
            assert!(r >= b.r_inner * (1.0 - 1e-12));
            if b.scale_k < t.k_max {
                assert!(r <= b.r_outer * (1.0 + 1e-12), "box {} k {} r {} outer {}", b.id, b.scale_k, r, b.r_outer);
            }
            assert!(b.angular_offset(xi[1].atan2(xi[0])).abs() <= b.half_angle);
        }
    }
}

#[test]
fn round_trip_white_noise() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    for seed in 0..5 {
        let u = random_field(t.grid, seed);
        let c = forward_transform(&u, &t).unwrap();
        let v = inverse_transform(&c, &t).unwrap();
        assert!(v.rel_error(&u) < 1e-10);
        // Parseval frame
        assert!((c.energy() / u.energy() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn zero_in_zero_out() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    let u = Field::zeros(t.grid);
    let c = forward_transform(&u, &t).unwrap();
    assert_eq!(c.energy(), 0.0);
    let v = inverse_transform(&PacketCoefficients::default(), &t).unwrap();
    assert_eq!(v.energy(), 0.0);
}

#[test]
fn wrong_grid_is_rejected() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    let u = Field::zeros(grid(128));
    assert!(forward_transform(&u, &t).is_err());
}

#[test]
fn single_box_synthesis_stays_in_box() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    let b = t.boxes_at_scale(2).nth(3).unwrap();
    let u = random_field(t.grid, 7);
    let c = forward_transform(&u, &t).unwrap().restrict(&[b.id]);
    let v = inverse_transform(&c, &t).unwrap();
    let spec = wpfio::fft::forward(&v.data, 64);
    let mut inside = vec![false; spec.len()];
    for &(g, _, _) in &b.support {
        inside[g] = true;
    }
    let leak: f64 = spec.iter().zip(&inside).filter(|(_, i)| !**i).map(|(s, _)| s.norm()).fold(0.0, f64::max);
    assert!(leak < 1e-10 * spec.iter().map(|s| s.norm()).fold(0.0, f64::max));
}

#[test]
fn frame_element_concentrates_in_its_box() {
    let t = build_tiling(grid(128), 3, 8.0).unwrap();
    let b = t.boxes_at_scale(3).nth(5).unwrap();
    let m = frame::nearest_coefficient(&t, b, [6.4, 6.4]);
    let phi = frame_element(&t, b, m).unwrap();
    let c = forward_transform(&phi, &t).unwrap();
    let own = c.box_energy(b.id);
    for (id, _) in c.boxes.iter() {
        if *id != b.id {
            assert!(c.box_energy(*id) < own);
        }
    }
    // coefficient peak at m
    let own_c = &c.boxes[&b.id];
    let peak = own_c.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).unwrap().0;
    assert_eq!(peak, m);
}

#[test]
fn box_spectrum_synthesis_recovers_field() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    let u = random_field(t.grid, 3);
    let mut acc = vec![C64::new(0.0, 0.0); t.grid.len()];
    for b in &t.boxes {
        let s = t.box_spectrum(&u, b).unwrap();
        for l in 0..s.len() {
            let bin = s.bin(l);
            let g = t.grid.bin_index(bin[0]) * 64 + t.grid.bin_index(bin[1]);
            acc[g] += s.values[l];
        }
    }
    let mut f = acc;
    wpfio::fft::fft2(&mut f, 64, 64, true);
    assert!(rel_l2(&f, &u.data) < 1e-12);
}

#[test]
fn plane_wave_box_spectrum_peak() {
    let t = build_tiling(grid(64), 2, 8.0).unwrap();
    let dxi = t.grid.dxi();
    let j = [9i64, 3];
    let u = Field::from_fn(t.grid, |x| C64::from_polar(1.0, dxi * (j[0] as f64 * x[0] + j[1] as f64 * x[1])));
    let xi = [dxi * j[0] as f64, dxi * j[1] as f64];
    for b in &t.boxes {
        let s = t.box_spectrum(&u, b).unwrap();
        let w = t.window_at(b, xi);
        let total: f64 = s.values.iter().map(|v| v.norm()).sum();
        assert!((total - w * w).abs() < 1e-10, "box {}: {} vs {}", b.id, total, w * w);
    }
}

/// Mass of `φ` outside `{2^k |⟨ν, x⟩| + 2^{k/2} |x| ≤ C}` with lengths measured in units of `1/r0`.
fn outside_mass(t: &frame::Tiling, phi: &Field, center: [f64; 2], nu: [f64; 2], k: u32, c: f64) -> f64 {
    let l = t.grid.length;
    let mut out = 0.0;
    for i1 in 0..t.grid.n {
        for i2 in 0..t.grid.n {
            let p = t.grid.point(i1, i2);
            let mut d = [p[0] - center[0], p[1] - center[1]];
            for v in &mut d {
                *v -= l * (*v / l).round();
            }
            let (a, r) = ((nu[0] * d[0] + nu[1] * d[1]) * t.r0, d[0].hypot(d[1]) * t.r0);
            if 2f64.powi(k as i32) * a.abs() + 2f64.powf(k as f64 / 2.0) * r > c {
                out += phi.at(i1, i2).norm_sqr();
            }
        }
    }
    out / phi.energy()
}

#[test]
fn packet_decay_is_monotone() {
    let t = build_tiling(grid(256), 3, 8.0).unwrap();
    for k in [2, 3] {
        let b = t.boxes_at_scale(k).nth(2).unwrap();
        let m = frame::nearest_coefficient(&t, b, [12.8, 12.8]);
        let center = t.coefficient_position(b, m);
        let phi = frame_element(&t, b, m).unwrap();
        let f: Vec<f64> = [5.0, 10.0, 20.0].iter().map(|&c| outside_mass(&t, &phi, center, b.nu, k, c)).collect();
        assert!(f[0] > f[1] && f[1] > f[2], "k={k}: {f:?}");
        assert!(f[2] < 0.05, "k={k}: {f:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn round_trip_any_offset(offset in -3.2f64..3.2, a in 6.0f64..10.0, seed in 0u64..1000) {
        let t = frame::build_tiling_with_offset(grid(64), 2, a, offset).unwrap();
        let s = t.copartition_sum();
        prop_assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let u = random_field(t.grid, seed);
        let v = inverse_transform(&forward_transform(&u, &t).unwrap(), &t).unwrap();
        prop_assert!(v.rel_error(&u) < 1e-10);
    }

    #[test]
    fn transform_is_linear(seed in 0u64..1000, re in -2.0f64..2.0, im in -2.0f64..2.0) {
        let t = build_tiling(grid(64), 2, 8.0).unwrap();
        let u = random_field(t.grid, seed);
        let v = random_field(t.grid, seed + 1);
        let a = C64::new(re, im);
        let w = Field::from_vec(t.grid, u.data.iter().zip(&v.data).map(|(x, y)| a * x + y).collect()).unwrap();
        let cu = forward_transform(&u, &t).unwrap();
        let cv = forward_transform(&v, &t).unwrap();
        let cw = forward_transform(&w, &t).unwrap();
        for (id, c) in &cw.boxes {
            let expect: Vec<C64> = cu.boxes[id].iter().zip(&cv.boxes[id]).map(|(x, y)| a * x + y).collect();
            let err: f64 = c.iter().zip(&expect).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-12);
        }
    }
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpfio::{Field, Grid, C64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(grid: Grid, seed: u64) -> Field {
    let mut r = rng(seed);
    Field::from_fn(grid, |_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
}

pub fn rel_l2(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(1e-300)).sqrt()
}

pub fn max_abs(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Lens-experiment grid with a scale-`k` vertical packet near `(0, 5)`.
pub struct LensPacket {
    pub tiling: wpfio::frame::Tiling,
    pub box_id: usize,
    pub m: usize,
    pub packet: Field,
    /// Source-box portion of the packet.
    pub portion: Field,
}

pub fn lens_packet(k: u32) -> LensPacket {
    let grid = Grid::new(256, 25.6, [-12.8, 0.0]).unwrap();
    let tiling = wpfio::frame::build_tiling(grid, 4, 5.0).unwrap();
    let b = tiling.nearest_box(k, std::f64::consts::FRAC_PI_2).clone();
    let m = wpfio::frame::nearest_coefficient(&tiling, &b, [0.0, 5.0]);
    let packet = wpfio::frame::frame_element(&tiling, &b, m).unwrap();
    let pc = wpfio::frame::forward_transform(&packet, &tiling).unwrap().restrict(&[b.id]);
    let portion = wpfio::frame::inverse_transform(&pc, &tiling).unwrap();
    LensPacket { tiling, box_id: b.id, m, packet, portion }
}

pub fn lens_model() -> wpfio::hamilton::SymbolModel {
    wpfio::hamilton::SymbolModel::new(wpfio::hamilton::Medium::Lens { c0: 2.0, kappa: -0.4, sigma: 3.0, center: [0.0, 14.0] })
}

/// Seeds covering the preimage of `grid` under the constant-medium shift `c0·T·ν`.
pub fn preimage_seeds(grid: Grid, shift: f64, theta: f64, h: f64) -> wpfio::fio::Seeds {
    let sh = [shift * theta.cos(), shift * theta.sin()];
    let up = grid.upper();
    wpfio::fio::Seeds::lattice([grid.origin[0] - sh[0] - 0.5, grid.origin[1] - sh[1] - 0.5], [up[0] - sh[0] + 0.5, up[1] - sh[1] + 0.5], h)
}

/// Box algorithm with `j` cones vs. direct quadrature of `Σ e^{i(⟨y,ξ⟩ − c0 T|ξ|)} ĝ(ξ)`
/// for the scale-`k` packet near `(0, 5)`; returns (relative L2 error, max deviation from
/// the second-order phase model of each cone relative to that cone's field).
pub fn constant_box_error(k: u32, j: usize) -> (f64, f64) {
    use wpfio::fio::{apply_box, build_tables, kernel_for, kernel_q, TableOptions};
    let (c0, t1) = (2.0, 7.0);
    let m = wpfio::hamilton::SymbolModel::new(wpfio::hamilton::Medium::Constant { c0 });
    let grid = Grid::new(256, 25.6, [-12.8, 0.0]).unwrap();
    let t = wpfio::frame::build_tiling(grid, 4, 5.0).unwrap();
    let b = t.nearest_box(k, std::f64::consts::FRAC_PI_2);
    let mc = wpfio::frame::nearest_coefficient(&t, b, [0.0, 5.0]);
    let pk = wpfio::frame::frame_element(&t, b, mc).unwrap();
    let spec = t.box_spectrum(&pk, b).unwrap();
    let pts = grid.points();
    let exact = wpfio::nufft::eval_direct(&spec.weighted(|xi| C64::from_polar(1.0, -c0 * t1 * xi[0].hypot(xi[1]))), &pts);
    let opt = TableOptions { spacing: 0.25, ..TableOptions::default() };
    let cones = wpfio::partition::cone_windows(b, j, grid.dxi()).unwrap();
    let mut total = vec![C64::new(0.0, 0.0); grid.len()];
    let mut model_dev = 0.0f64;
    for beta in 0..cones.count() {
        let th = cones.centres[beta];
        let seeds = preimage_seeds(grid, c0 * t1, th, 0.25);
        let tab = build_tables(&m, 0.0, t1, th, None, &seeds, &|_| 1.0, &opt).unwrap();
        let kern = kernel_for(&tab, &spec, b, Some((&cones, beta)), 1e-6, 32).unwrap();
        let part = apply_box(&spec, b, Some((&cones, beta)), &tab, &kern, &grid, 1e-10).unwrap();
        let nu = tab.nu;
        let windowed = spec.weighted(|xi| C64::new(cones.window(beta, b.theta + wpfio::frame::wrap_angle(xi[1].atan2(xi[0]) - b.theta)), 0.0));
        let model = wpfio::nufft::eval_direct(&windowed.weighted(|xi| C64::from_polar(1.0, -c0 * t1 * (xi[0] * nu[0] + xi[1] * nu[1]) - c0 * t1 * kernel_q(xi, nu))), &pts);
        model_dev = model_dev.max(rel_l2(&part.data, &model));
        for (a, p) in total.iter_mut().zip(&part.data) {
            *a += p;
        }
    }
    (rel_l2(&total, &exact), model_dev)
}

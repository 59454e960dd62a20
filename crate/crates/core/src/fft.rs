//! Thin 2-D wrappers over rustfft. Inverse transforms are unnormalized.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::grid::C64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place 2-D DFT of an `n1 × n2` row-major array (sign −i forward, +i inverse).
pub fn fft2(data: &mut [C64], n1: usize, n2: usize, inverse: bool) {
    assert_eq!(data.len(), n1 * n2);
    if n1 == 0 || n2 == 0 {
        return;
    }
    let rows = plan(n2, inverse);
    let mut scratch = vec![C64::new(0.0, 0.0); rows.get_inplace_scratch_len()];
    rows.process_with_scratch(data, &mut scratch);

    let cols = plan(n1, inverse);
    let mut t = vec![C64::new(0.0, 0.0); n1 * n2];
    for i in 0..n1 {
        for j in 0..n2 {
            t[j * n1 + i] = data[i * n2 + j];
        }
    }
    scratch.resize(cols.get_inplace_scratch_len(), C64::new(0.0, 0.0));
    cols.process_with_scratch(&mut t, &mut scratch);
    for i in 0..n1 {
        for j in 0..n2 {
            data[i * n2 + j] = t[j * n1 + i];
        }
    }
}

/// Forward DFT of a square field: `û_j = Σ_p u_p e^{-2πi j·p/n}`.
pub fn forward(data: &[C64], n: usize) -> Vec<C64> {
    let mut v = data.to_vec();
    fft2(&mut v, n, n, false);
    v
}

/// Normalized inverse of [`forward`].
pub fn inverse(spec: &[C64], n: usize) -> Vec<C64> {
    let mut v = spec.to_vec();
    fft2(&mut v, n, n, true);
    let s = 1.0 / (n * n) as f64;
    for a in &mut v {
        *a *= s;
    }
    v
}

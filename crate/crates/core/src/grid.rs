//! Periodic square sampling grids and complex fields living on them.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Square periodic grid, `n` points per axis, spacing `length / n`.
/// Point `(i1, i2)` sits at `origin + h * (i1, i2)`; storage is row-major in `i1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub length: f64,
    pub origin: [f64; 2],
}

impl Grid {
    pub fn new(n: usize, length: f64, origin: [f64; 2]) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("grid size {n} must be a power of two >= 4")));
        }
        if !(length > 0.0 && length.is_finite()) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("grid extent must be positive and finite".into()));
        }
        Ok(Self { n, length, origin })
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Frequency lattice spacing in rad per unit length.
    pub fn dxi(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.length
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn point(&self, i1: usize, i2: usize) -> [f64; 2] {
        let h = self.h();
        [self.origin[0] + h * i1 as f64, self.origin[1] + h * i2 as f64]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut v = Vec::with_capacity(self.len());
        for i1 in 0..self.n {
            for i2 in 0..self.n {
                v.push(self.point(i1, i2));
            }
        }
        v
    }

    /// Signed DFT bin for storage index `j` (range `[-n/2, n/2)`).
    pub fn signed_bin(&self, j: usize) -> i64 {
        let n = self.n as i64;
        let j = j as i64;
        if j < n / 2 {
            j
        } else {
            j - n
        }
    }

    /// Storage index of a signed bin (wrapped periodically).
    pub fn bin_index(&self, b: i64) -> usize {
        b.rem_euclid(self.n as i64) as usize
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.origin[0] + self.length, self.origin[1] + self.length]
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        let u = self.upper();
        x[0] >= self.origin[0] && x[0] <= u[0] && x[1] >= self.origin[1] && x[1] <= u[1]
    }

    /// Nearest grid index (clamped) to a physical point.
    pub fn nearest(&self, x: [f64; 2]) -> (usize, usize) {
        let h = self.h();
        let f = |v: f64, o: f64| (((v - o) / h).round().max(0.0) as usize).min(self.n - 1);
        (f(x[0], self.origin[0]), f(x[1], self.origin[1]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub data: Vec<C64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, data: vec![C64::new(0.0, 0.0); grid.len()] }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 2]) -> C64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for i1 in 0..grid.n {
            for i2 in 0..grid.n {
                data.push(f(grid.point(i1, i2)));
            }
        }
        Self { grid, data }
    }

    pub fn from_vec(grid: Grid, data: Vec<C64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} samples for a {}x{} grid", data.len(), grid.n, grid.n)));
        }
        Ok(Self { grid, data })
    }

    pub fn at(&self, i1: usize, i2: usize) -> C64 {
        self.data[i1 * self.grid.n + i2]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if &self.grid != grid {
            return Err(Error::GridMismatch(format!("field grid {:?} vs expected {:?}", self.grid, grid)));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Field) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: C64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// `‖self − other‖ / ‖other‖`.
    pub fn rel_error(&self, reference: &Field) -> f64 {
        let num: f64 = self.data.iter().zip(&reference.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den = reference.energy();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

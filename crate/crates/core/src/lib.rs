//! Wave-packet evaluation of Fourier integral operators on 2-D periodic grids.
//!
//! The crate is organized by pipeline stage: [`frame`] decomposes data into
//! wave packets, [`hamilton`] traces rays and propagator matrices, [`caustic`]
//! and [`partition`] split phase space into regions where a generating function
//! exists (directly or after a shear [`diffeo`]), and [`fio`] applies the
//! operator box by box. [`fdref`] is an independent finite-difference solver
//! used for validation; [`experiment`] wires the stages together.

pub mod caustic;
pub mod config;
pub mod diffeo;
pub mod error;
pub mod experiment;
pub mod fdref;
pub mod fft;
pub mod fgrid;
pub mod fio;
pub mod frame;
pub mod grid;
pub mod hamilton;
pub mod linalg;
pub mod nufft;
pub mod partition;

pub use error::{Error, Result};
pub use grid::{Field, Grid, C64};

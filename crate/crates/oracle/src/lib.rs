//! Naive reference implementations used as independent oracles in tests.
//!
//! Everything in this crate is written as plain loops over `f64` slices,
//! deliberately sharing no code with the main library. Tests compare the
//! optimized `f32` implementations against these.

pub mod bpe;
pub mod eigen;
pub mod kmeans;
pub mod model;
pub mod ops;

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

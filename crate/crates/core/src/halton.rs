//! One-dimensional Halton (radical-inverse) sequence.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Radical inverse of `index` in `base`. The sequence starts at index 1.
pub fn halton(index: u64, base: u64) -> Result<f64> {
    if base < 2 {
        return Err(Error::InvalidParameter(format!("Halton base must be at least 2, got {base}")));
    }
    if index == 0 {
        return Err(Error::InvalidParameter("Halton index starts at 1".into()));
    }
    let mut i = index;
    let mut f = 1.0;
    let mut value = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        value += f * (i % base) as f64;
        i /= base;
    }
    Ok(value)
}

/// The first `count` points of the sequence in `base`.
pub fn halton_points(count: usize, base: u64) -> Result<Vec<f64>> {
    (1..=count as u64).map(|k| halton(k, base)).collect()
}

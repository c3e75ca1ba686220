use std::f64::consts::PI;

use super::{DataError, Dataset, SplitMix64};
use crate::diffcore::Tensor;

/// Single-channel `size×size` images; sample `t` has label `t mod classes`.
///
/// Pixel `(i, j)` of a class-`c` sample is
/// `0.5 + 0.35·sin(2π((1+c)·i + (1+(3c mod K))·j)/S) + 0.15·u`, clamped to
/// `[0, 1]`, with `u ∈ [-1, 1)` drawn row-major from a SplitMix64 stream
/// seeded with `seed ^ t`.
pub fn make_synthetic(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || classes == 0 || size == 0 {
        return Err(DataError::Invalid(format!(
            "synthetic extents must be >= 1 (n={n}, classes={classes}, size={size})"
        )));
    }
    let s = size as f64;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let c = t % classes;
        let (fi, fj) = ((1 + c) as f64, (1 + (3 * c) % classes) as f64);
        let mut rng = SplitMix64::new(seed ^ t as u64);
        for i in 0..size {
            for j in 0..size {
                let u = rng.next_signed();
                let wave = (2.0 * PI * (fi * i as f64 + fj * j as f64) / s).sin();
                let v = (0.5 + 0.35 * wave + 0.15 * u).clamp(0.0, 1.0);
                data.push(v as f32);
            }
        }
        labels.push(c);
    }
    let images = Tensor::new([n, 1, size, size], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, classes)
}

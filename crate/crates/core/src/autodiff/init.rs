use rand::Rng;

use super::Array;
use crate::error::{MatrError, Result};

/// Fan-in / fan-out for a weight laid out as `[..., in, out]`; leading axes
/// (e.g. convolution taps) multiply both.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(MatrError::shape(
            "xavier_init",
            format!("weight shape {shape:?} needs at least 2 axes"),
        ));
    }
    let n = shape.len();
    let receptive: usize = shape[..n - 2].iter().product();
    Ok((shape[n - 2] * receptive, shape[n - 1] * receptive))
}

/// Glorot/Xavier uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Array> {
    let (fan_in, fan_out) = fans(shape)?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data)
}

//! Dense tensors, seeded randomness and the layer kernels.

pub mod kernels;
mod rng;
mod tensor;

pub use rng::{label, mix, SeededRng};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Tensor with i.i.d. `Normal(mean, variance)` entries.
pub fn gaussian_init(
    shape: &[usize],
    mean: f64,
    variance: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::Parameter(format!(
            "init variance must be >= 0, got {variance}"
        )));
    }
    let std = variance.sqrt();
    if std == 0.0 {
        return Ok(Tensor::full(shape, mean));
    }
    Ok(Tensor::from_fn(shape, |_| mean + std * rng.normal()))
}

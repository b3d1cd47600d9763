use rand::Rng;

use super::{Real, Tensor};

/// He-uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
/// The fan-in is the product of all extents after the first.
pub fn he_uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(rng.random_range(-bound..bound));
    }
    t
}

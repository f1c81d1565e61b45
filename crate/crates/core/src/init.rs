use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform draw in `[-bound, bound]`.
pub fn uniform(shape: (usize, usize), bound: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Fan-in scaled uniform init for a `fan_in x fan_out` weight.
pub fn linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    uniform((fan_in, fan_out), 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

use rand::Rng;

use super::Tensor;

/// Uniform Xavier bound `sqrt(6 / (fan_in + fan_out))`.
///
/// Fans are the last two extents; a vector has `fan_out = 1`.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [.., a, b] => (*b, *a),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    assert!(!shape.is_empty(), "xavier_init needs rank >= 1");
    let bound = xavier_bound(shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

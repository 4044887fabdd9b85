use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Xavier-uniform weights with the given fan-in and fan-out.
pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Dense weight `[out, in]`.
pub fn dense_weight(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Tensor {
    xavier(rng, &[out, inp], inp, out)
}

/// Convolution weight `[out, in, k, ...]` with `spatial` kernel axes.
pub fn conv_weight(
    rng: &mut ChaCha8Rng,
    inp: usize,
    out: usize,
    k: usize,
    spatial: usize,
) -> Tensor {
    let kn = k.pow(spatial as u32);
    let mut shape = vec![out, inp];
    shape.extend(std::iter::repeat_n(k, spatial));
    xavier(rng, &shape, inp * kn, out * kn)
}

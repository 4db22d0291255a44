//! Weight initialization helpers.

use ndarray::ArrayD;
use rand::Rng;

/// Standard-normal draws via the Box-Muller transform.
///
/// One (cosine-branch) normal per pair of uniforms keeps the stream a pure
/// function of the RNG state, independent of array shape factorization.
pub fn standard_normal<R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        data.push((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
    }
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/product mismatch")
}

/// Normal draws with the given mean and standard deviation.
pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> ArrayD<f64> {
    let mut a = standard_normal(rng, shape);
    a.mapv_inplace(|z| mean + std * z);
    a
}

/// He-normal conv kernel `[cout, cin, kh, kw]`, std = sqrt(2 / fan_in).
pub fn he_conv<R: Rng>(rng: &mut R, cout: usize, cin: usize, kh: usize, kw: usize) -> ArrayD<f64> {
    let std = (2.0 / (cin * kh * kw) as f64).sqrt();
    normal(rng, &[cout, cin, kh, kw], 0.0, std)
}

/// He-normal linear weight `[out, inp]`, std = sqrt(2 / inp).
pub fn he_linear<R: Rng>(rng: &mut R, out: usize, inp: usize) -> ArrayD<f64> {
    let std = (2.0 / inp as f64).sqrt();
    normal(rng, &[out, inp], 0.0, std)
}

/// All-zeros tensor (bias default).
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

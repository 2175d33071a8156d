use rand::Rng;

use crate::error::{Error, Result};
use crate::volgrad::{Scalar, Tensor};

/// Half-width of the He uniform distribution for a leaky-ReLU gain.
pub fn he_uniform_bound(fan_in: usize, negative_slope: f64) -> f64 {
    (6.0 / ((1.0 + negative_slope * negative_slope) * fan_in as f64)).sqrt()
}

/// He initialization, uniform variant: i.i.d. U(-b, b) with variance `2 / ((1 + slope^2) fan_in)`.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    negative_slope: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("he_init needs fan_in > 0".into()));
    }
    let b = he_uniform_bound(fan_in, negative_slope);
    Ok(Tensor::from_fn(shape, |_| T::of(rng.gen_range(-b..b))))
}

/// `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, learning_rate: f64, weight_decay: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("sgd_step", format!("param {:?} vs grad {:?}", param.shape(), grad.shape())));
    }
    let (lr, wd) = (T::of(learning_rate), T::of(weight_decay));
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * (g + wd * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(0.5), 0.1, 0.0).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-15);

        let mut p = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(0.0), 0.1, 1.0).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);

        // 2 - 0.05 * (-1 + 0.1 * 2) = 2.04
        let mut p = Tensor::<f64>::scalar(2.0);
        sgd_step(&mut p, &Tensor::scalar(-1.0), 0.05, 0.1).unwrap();
        assert!((p.item() - 2.04).abs() < 1e-15);

        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), 0.1, 0.0).is_err());
    }

    #[test]
    fn he_variance_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fan_in, slope) = (27usize, 0.01);
        let t: Tensor<f64> = he_init(&[1_000_000], fan_in, slope, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / ((1.0 + slope * slope) * fan_in as f64);
        assert!((var - target).abs() / target < 0.02, "var {var} target {target}");
        assert!(mean.abs() < 0.01 * target.sqrt() * 10.0);
    }

    #[test]
    fn he_is_deterministic_and_shrinks_with_fan_in() {
        let a: Tensor<f32> = he_init(&[64], 9, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Tensor<f32> = he_init(&[64], 9, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let bounds: Vec<f64> = [1, 10, 100, 1000, 10_000].iter().map(|&f| he_uniform_bound(f, 0.01)).collect();
        assert!(bounds.windows(2).all(|w| w[1] < w[0]));
        assert!(he_init::<f32, _>(&[4], 0, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}

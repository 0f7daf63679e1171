use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(y + u)/bins − 0.5` with `u ~ U[0,1)` per coordinate.
pub fn dequantize<R: Rng>(y: &Tensor, bins: u32, rng: &mut R) -> Result<Tensor> {
    if bins < 1 {
        return Err(Error::Invalid("bins must be positive".into()));
    }
    let b = bins as f64;
    if let Some(bad) = y
        .data()
        .iter()
        .find(|&&v| !(v >= 0.0 && v < b && v.fract() == 0.0))
    {
        return Err(Error::OutOfRange(format!(
            "discrete value {bad} outside {{0, ..., {}}}",
            bins - 1
        )));
    }
    let data = y.data().iter().map(|&v| (v + rng.random::<f64>()) / b - 0.5).collect();
    Tensor::new(y.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lands_in_lower_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::zeros(&[1000]);
        let d = dequantize(&y, 2, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| (-0.5..0.0).contains(&v)));
    }

    #[test]
    fn rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [2.0, -1.0, 0.5, f64::NAN] {
            let y = Tensor::from_vec(vec![0.0, bad]);
            assert!(matches!(dequantize(&y, 2, &mut rng), Err(Error::OutOfRange(_))));
        }
    }

    #[test]
    fn moments_and_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let d = dequantize(&Tensor::ones(&[n]), 2, &mut rng).unwrap();
        let v = d.data();
        // y=1, bins=2: uniform on [0, 0.5), mean 0.25
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.005, "{mean}");
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let cov = v
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        assert!((cov / var).abs() < 0.01);
    }
}

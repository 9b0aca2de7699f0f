use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RANGE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    /// `sign(x)` with `sign(0) = +1`.
    InferenceSign,
    /// `+1` with probability `(1 + x) / 2`, so `E[b] = x`.
    TrainStochastic,
    /// Leaves the pre-codes untouched. Only useful for gradient checking,
    /// where the quantizer must be differentiable.
    Identity,
}

pub fn binarize(
    pre_codes: &Tensor,
    mode: BinarizeMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Tensor> {
    if let Some(bad) = pre_codes
        .data()
        .iter()
        .find(|x| !(x.abs() <= 1.0 + RANGE_SLACK))
    {
        return Err(Error::invalid(format!(
            "binarizer input {bad} outside [-1, 1]"
        )));
    }
    match mode {
        BinarizeMode::InferenceSign => Ok(pre_codes.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })),
        BinarizeMode::Identity => Ok(pre_codes.clone()),
        BinarizeMode::TrainStochastic => {
            let rng = rng.ok_or_else(|| Error::invalid("stochastic binarization needs an rng"))?;
            Ok(pre_codes.map(|x| {
                if rng.gen::<f64>() < (1.0 + x) / 2.0 {
                    1.0
                } else {
                    -1.0
                }
            }))
        }
    }
}

/// Straight-through estimator: the incoming gradient passes unchanged.
pub fn binarize_backward(grad_out: &Tensor) -> Tensor {
    grad_out.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sign_with_positive_tie_break() {
        let b = binarize(&t(&[0.3, -0.7, 0.0, -0.0, 1.0]), BinarizeMode::InferenceSign, None).unwrap();
        assert_eq!(b.data(), &[1.0, -1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn stochastic_extremes_are_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = binarize(&Tensor::full(&[1000], 1.0), BinarizeMode::TrainStochastic, Some(&mut rng)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let neg = binarize(&Tensor::full(&[1000], -1.0), BinarizeMode::TrainStochastic, Some(&mut rng)).unwrap();
        assert!(neg.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn stochastic_mean_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for x in [-0.5, 0.0, 0.5] {
            let b = binarize(&Tensor::full(&[100_000], x), BinarizeMode::TrainStochastic, Some(&mut rng)).unwrap();
            assert!(b.data().iter().all(|&v| v == 1.0 || v == -1.0));
            let mean = b.sum() / 1e5;
            assert!((mean - x).abs() < 0.01, "x={x} mean={mean}");
        }
    }

    #[test]
    fn contract_violations() {
        assert!(binarize(&t(&[1.1]), BinarizeMode::InferenceSign, None).is_err());
        assert!(binarize(&t(&[f64::NAN]), BinarizeMode::InferenceSign, None).is_err());
        assert!(binarize(&t(&[0.1]), BinarizeMode::TrainStochastic, None).is_err());
        assert!(binarize(&t(&[1.0 + 1e-7]), BinarizeMode::InferenceSign, None).is_ok());
    }

    #[test]
    fn straight_through_is_identity() {
        let g = t(&[0.5, -2.0, 0.0, 1e-300]);
        let back = binarize_backward(&g);
        let bits: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = g.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }
}

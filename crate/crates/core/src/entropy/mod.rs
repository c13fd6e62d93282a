//! Quantisation, rate estimation and lossless coding of latents.

pub mod cdf;
pub mod models;
pub mod range_coder;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cdf::{gaussian_scale_index, gaussian_scale_table, CdfRow, CdfTable};
pub use range_coder::{range_decode, range_encode, ChunkModel, CodedChunk};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizationMode {
    /// `x + U(-0.5, 0.5)`; a differentiable proxy used during training.
    Noise,
    /// Mean-centred rounding; the only mode used when coding.
    Round,
    /// Forward pass rounds, gradients are passed straight through.
    StraightThrough,
}

impl std::str::FromStr for QuantizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "round" => Ok(Self::Round),
            "ste" | "straight-through" => Ok(Self::StraightThrough),
            _ => Err(Error::invalid(format!("unknown quantization mode {s:?}"))),
        }
    }
}

/// Quantise `x`. With `means`, rounding is done on `x - means` and the
/// means are added back. `rng` is only consumed in noise mode.
pub fn quantize<R: Rng + ?Sized>(
    x: &Tensor,
    mode: QuantizationMode,
    means: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    if let Some(m) = means {
        if m.shape() != x.shape() {
            return Err(Error::shape(format!("means {:?} vs values {:?}", m.shape(), x.shape())));
        }
    }
    let mut out = x.clone();
    match mode {
        QuantizationMode::Noise => {
            for v in out.data_mut() {
                *v += rng.random_range(-0.5f32..0.5);
            }
        }
        QuantizationMode::Round | QuantizationMode::StraightThrough => match means {
            Some(m) => {
                for (v, &mu) in out.data_mut().iter_mut().zip(m.data()) {
                    *v = (*v - mu).round() + mu;
                }
            }
            None => {
                for v in out.data_mut() {
                    *v = v.round();
                }
            }
        },
    }
    Ok(out)
}

/// Integer symbols `round(x - means)` as sent to the range coder.
pub fn symbols(x: &Tensor, means: Option<&Tensor>) -> Vec<i32> {
    match means {
        Some(m) => x.data().iter().zip(m.data()).map(|(&v, &mu)| (v - mu).round() as i32).collect(),
        None => x.data().iter().map(|&v| v.round() as i32).collect(),
    }
}

/// `-sum(log2 p)`. Any nonpositive (or NaN) likelihood is a model bug.
pub fn estimate_bits(likelihoods: &[f32]) -> Result<f64> {
    let mut bits = 0.0f64;
    for (index, &p) in likelihoods.iter().enumerate() {
        if !(p > 0.0) {
            return Err(Error::NonPositiveLikelihood { index, value: p as f64 });
        }
        bits -= (p as f64).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[1], vec![2.4]).unwrap();
        let q = quantize(&x, QuantizationMode::Round, None, &mut rng).unwrap();
        assert_eq!(q.data(), &[2.0]);
        let m = Tensor::from_vec(&[1], vec![0.4]).unwrap();
        let q = quantize(&x, QuantizationMode::Round, Some(&m), &mut rng).unwrap();
        assert!((q.data()[0] - 2.4).abs() < 1e-6);
    }

    #[test]
    fn bit_examples() {
        assert_eq!(estimate_bits(&[1.0; 7]).unwrap(), 0.0);
        assert_eq!(estimate_bits(&[0.5; 100]).unwrap(), 100.0);
        assert_eq!(estimate_bits(&[0.25, 0.5]).unwrap(), 3.0);
        assert!(matches!(
            estimate_bits(&[0.5, 0.0]),
            Err(Error::NonPositiveLikelihood { index: 1, .. })
        ));
        assert!(estimate_bits(&[f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn noise_stays_within_half(vals in proptest::collection::vec(-100f32..100.0, 1..64), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
            let q = quantize(&x, QuantizationMode::Noise, None, &mut rng).unwrap();
            for (a, b) in q.data().iter().zip(&vals) {
                prop_assert!((a - b).abs() <= 0.5 + 1e-4);
            }
        }

        #[test]
        fn bits_monotone_in_each_likelihood(ps in proptest::collection::vec(0.01f32..1.0, 1..32), k in any::<prop::sample::Index>()) {
            let i = k.index(ps.len());
            let mut lower = ps.clone();
            lower[i] *= 0.5;
            prop_assert!(estimate_bits(&lower).unwrap() > estimate_bits(&ps).unwrap());
        }
    }
}

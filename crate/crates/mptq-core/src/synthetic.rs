//! Seeded synthetic data for the toy pipeline: pre-embedded token tensors
//! shaped like the hard parts of real transformer activations, with
//! per-channel offsets and a few outlier channels so redistribution and
//! mixed precision have something to bite on.

use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

/// A `(samples, tokens, embed)` pool of calibration inputs. Channels get
/// Gaussian-mixture values with per-channel shifts; roughly one channel in
/// twelve is an outlier channel with several times the typical spread.
pub fn calibration_tokens(
    samples: usize,
    tokens: usize,
    embed: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let scale_dist = LogNormal::new(-0.3f64, 0.5).unwrap();
    let offsets: Vec<f64> = (0..embed).map(|_| 1.2 * normal.sample(&mut rng)).collect();
    let scales: Vec<f64> = (0..embed)
        .map(|_| {
            let s = scale_dist.sample(&mut rng);
            if rng.random_range(0.0..1.0) < 0.08 {
                s * 6.0
            } else {
                s
            }
        })
        .collect();
    let mixture_shift: Vec<f64> = (0..embed).map(|_| 1.5 * normal.sample(&mut rng)).collect();
    let mut data = Vec::with_capacity(samples * tokens * embed);
    for _ in 0..samples {
        for _ in 0..tokens {
            for c in 0..embed {
                let bump = if rng.random_range(0.0..1.0) < 0.3 {
                    mixture_shift[c]
                } else {
                    0.0
                };
                let v = offsets[c] + bump + scales[c] * normal.sample(&mut rng);
                data.push(v as f32);
            }
        }
    }
    Tensor::new(vec![samples, tokens, embed], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = calibration_tokens(3, 4, 16, 9).unwrap();
        let b = calibration_tokens(3, 4, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 4, 16]);
        assert!(a.is_all_finite());
        let c = calibration_tokens(3, 4, 16, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn channels_carry_asymmetry() {
        let t = calibration_tokens(16, 16, 32, 3).unwrap();
        // at least one channel mean is far from zero
        let c = t.last_dim();
        let rows = t.numel() / c;
        let mut means = vec![0.0f64; c];
        for row in t.rows() {
            for (j, &v) in row.iter().enumerate() {
                means[j] += v as f64 / rows as f64;
            }
        }
        let spread = means.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread > 0.5, "channel means too symmetric: {spread}");
    }
}

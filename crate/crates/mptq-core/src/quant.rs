//! Uniform symmetric fake-quantization and the SQNR measure.
//!
//! Codes live in `[-2^(b-1), 2^(b-1)-1]`; rounding is half-away-from-zero so
//! results are bit-exact across platforms. SQNR is reported in dB
//! (`10 * log10`) with explicit +/- infinity sentinels so callers always have
//! a total order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// A uniform symmetric quantizer: bit-width plus positive scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scale: f32,
}

impl QuantSpec {
    pub fn new(bits: u8, scale: f32) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Input(format!("bits must be in [2,8], got {bits}")));
        }
        if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
            return Err(Error::Input(format!("scale must be positive, got {scale}")));
        }
        Ok(QuantSpec { bits, scale })
    }

    /// Smallest representable code, `-2^(b-1)`.
    pub fn code_min(&self) -> i32 {
        -(1i32 << (self.bits - 1))
    }

    /// Largest representable code, `2^(b-1)-1`.
    pub fn code_max(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }
}

/// Integer codes plus the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i8>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

/// Round half away from zero, the fixed rounding mode for all quantizers.
pub fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Quantize elementwise: `clamp(round(x / scale), code_min, code_max)`.
/// Rejects non-finite inputs.
pub fn quantize(x: &Tensor, spec: QuantSpec) -> Result<QuantizedTensor> {
    let (lo, hi) = (spec.code_min(), spec.code_max());
    let mut codes = Vec::with_capacity(x.numel());
    for &v in x.data() {
        if !v.is_finite() {
            return Err(Error::Input(format!(
                "non-finite element {v} in quantize input"
            )));
        }
        let q = round_half_away(v as f64 / spec.scale as f64);
        codes.push(q.clamp(lo as f64, hi as f64) as i8);
    }
    Ok(QuantizedTensor {
        codes,
        spec,
        shape: x.shape().to_vec(),
    })
}

/// Reconstruct reals from codes: `scale * code`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.codes.iter().map(|&c| q.spec.scale * c as f32).collect();
    Tensor::new(q.shape.clone(), data).expect("codes carry a consistent shape")
}

/// Quantize-then-dequantize, simulating integer inference in floating point.
pub fn fake_quantize(x: &Tensor, spec: QuantSpec) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, spec)?))
}

/// Max-magnitude scale: `max(|x|) / 2^(b-1)`, falling back to 1 for the
/// all-zero tensor.
pub fn minmax_scale(x: &Tensor, bits: u8) -> Result<QuantSpec> {
    let m = x.max_abs();
    let scale = if m == 0.0 {
        1.0
    } else {
        m / (1u32 << (bits - 1)) as f32
    };
    QuantSpec::new(bits, scale)
}

/// Signal-to-quantization-noise ratio in dB:
/// `10 * log10(sum(x^2) / sum((x - x_hat)^2))`.
///
/// Returns `+inf` when the error power is zero and `-inf` when the signal
/// power is zero while the error power is not.
pub fn sqnr_db(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Dimension(format!(
            "sqnr_db: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mut signal = 0.0f64;
    let mut noise = 0.0f64;
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let a = a as f64;
        let d = a - b as f64;
        signal += a * a;
        noise += d * d;
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    if signal == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Mean squared error between two same-shaped tensors, the default stand-in
/// for the output-aware fitting metric.
pub fn mse(x: &Tensor, x_hat: &Tensor) -> f64 {
    debug_assert_eq!(x.shape(), x_hat.shape());
    let n = x.numel().max(1) as f64;
    x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Total squared magnitude lost to saturation at the quantizer's
/// representable boundaries.
pub fn clamping_loss(x: &Tensor, spec: QuantSpec) -> f64 {
    let hi = spec.scale as f64 * spec.code_max() as f64;
    let lo = spec.scale as f64 * spec.code_min() as f64;
    let mut loss = 0.0f64;
    for &v in x.data() {
        let v = v as f64;
        if v > hi {
            loss += (v - hi) * (v - hi);
        } else if v < lo {
            loss += (v - lo) * (v - lo);
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(vals: &[f32]) -> Tensor {
        Tensor::from_vec(vals.to_vec())
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::new(1, 0.5).is_err());
        assert!(QuantSpec::new(9, 0.5).is_err());
        assert!(QuantSpec::new(4, 0.0).is_err());
        assert!(QuantSpec::new(4, -1.0).is_err());
        let s = QuantSpec::new(4, 0.1).unwrap();
        assert_eq!(s.code_min(), -8);
        assert_eq!(s.code_max(), 7);
    }

    #[test]
    fn quantize_zero_is_zero() {
        let q = quantize(&t(&[0.0]), QuantSpec::new(5, 0.3).unwrap()).unwrap();
        assert_eq!(q.codes, vec![0]);
    }

    #[test]
    fn quantize_hand_cases() {
        // 0.73 / 0.1 = 7.3 -> 7, inside [-8, 7]
        let s = QuantSpec::new(4, 0.1).unwrap();
        let q = quantize(&t(&[0.73]), s).unwrap();
        assert_eq!(q.codes, vec![7]);
        // -2.0 / 0.1 = -20 -> clamped to -8
        let q = quantize(&t(&[-2.0]), s).unwrap();
        assert_eq!(q.codes, vec![-8]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let s = QuantSpec::new(4, 0.1).unwrap();
        assert!(matches!(quantize(&t(&[f32::NAN]), s), Err(Error::Input(_))));
        assert!(matches!(
            quantize(&t(&[f32::INFINITY]), s),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dequantize_hand_cases() {
        let s = QuantSpec::new(4, 0.1).unwrap();
        let q = QuantizedTensor {
            codes: vec![7, 0, -8],
            spec: s,
            shape: vec![3],
        };
        let x = dequantize(&q);
        assert!((x.data()[0] - 0.7).abs() < 1e-7);
        assert_eq!(x.data()[1], 0.0);
        assert!((x.data()[2] + 0.8).abs() < 1e-7);
    }

    #[test]
    fn minmax_scale_cases() {
        let s = minmax_scale(&t(&[8.0, -3.0]), 4).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-7);
        let s = minmax_scale(&t(&[0.0, 0.0]), 4).unwrap();
        assert_eq!(s.scale, 1.0);
        let s = minmax_scale(&t(&[12.4909, -1.0]), 6).unwrap();
        assert!((s.scale - 12.4909 / 32.0).abs() < 1e-6);
    }

    #[test]
    fn fake_quantize_hand_case() {
        let s = QuantSpec::new(4, 0.1).unwrap();
        let y = fake_quantize(&t(&[0.73]), s).unwrap();
        assert!((y.data()[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn fake_quantize_fixed_point_on_grid() {
        let s = QuantSpec::new(4, 0.25).unwrap();
        let x = t(&[0.5, -0.75, 1.75, 0.0, -2.0]);
        let y = fake_quantize(&x, s).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn sqnr_sentinels_and_values() {
        let x = t(&[3.0, 4.0]);
        assert_eq!(sqnr_db(&x, &x).unwrap(), f64::INFINITY);
        let db = sqnr_db(&x, &t(&[3.0, 3.0])).unwrap();
        assert!((db - 10.0 * (25.0f64).log10()).abs() < 1e-12, "{db}");
        let db = sqnr_db(&t(&[1.0]), &t(&[0.0])).unwrap();
        assert!(db.abs() < 1e-12);
        let db = sqnr_db(&t(&[0.0]), &t(&[1.0])).unwrap();
        assert_eq!(db, f64::NEG_INFINITY);
        assert!(sqnr_db(&x, &t(&[1.0])).is_err());
    }

    #[test]
    fn clamping_loss_cases() {
        let s = QuantSpec::new(4, 1.0).unwrap();
        assert_eq!(clamping_loss(&t(&[1.0, -2.0, 6.9]), s), 0.0);
        // boundary 7: (10 - 7)^2 = 9
        assert!((clamping_loss(&t(&[10.0]), s) - 9.0).abs() < 1e-9);
        // negative boundary is -8: (-10 - -8)^2 = 4
        assert!((clamping_loss(&t(&[-10.0]), s) - 4.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn round_trip_bound(vals in proptest::collection::vec(-1.0f32..1.0, 1..64), bits in 2u8..=8) {
            let scale = 0.01f32;
            let spec = QuantSpec::new(bits, scale).unwrap();
            let limit = scale * spec.code_max() as f32;
            let x = Tensor::from_vec(vals.iter().map(|v| v * limit).collect());
            let y = fake_quantize(&x, spec).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                prop_assert!((a - b).abs() <= scale / 2.0 + 1e-6);
            }
        }

        #[test]
        fn quantize_is_monotone(vals in proptest::collection::vec(-50.0f32..50.0, 2..64), bits in 2u8..=8) {
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let spec = QuantSpec::new(bits, 0.37).unwrap();
            let q = quantize(&Tensor::from_vec(sorted), spec).unwrap();
            for w in q.codes.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn quantize_symmetry_off_boundary(vals in proptest::collection::vec(-10.0f32..10.0, 1..64), bits in 2u8..=8) {
            let spec = QuantSpec::new(bits, 0.11).unwrap();
            let x = Tensor::from_vec(vals.clone());
            let neg = Tensor::from_vec(vals.iter().map(|v| -v).collect());
            let qp = quantize(&x, spec).unwrap();
            let qn = quantize(&neg, spec).unwrap();
            for (a, b) in qp.codes.iter().zip(&qn.codes) {
                // symmetric except at the asymmetric clamp code -2^(b-1)
                if *a != spec.code_min() as i8 && *b != spec.code_min() as i8 {
                    prop_assert_eq!(*a, -*b);
                }
            }
        }

        #[test]
        fn fake_quantize_idempotent(vals in proptest::collection::vec(-20.0f32..20.0, 1..64)) {
            let spec = QuantSpec::new(5, 0.23).unwrap();
            let x = Tensor::from_vec(vals);
            let once = fake_quantize(&x, spec).unwrap();
            let twice = fake_quantize(&once, spec).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }
    }

    #[test]
    fn sqnr_nondecreasing_in_bits_for_seeded_tensors() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_vec((0..256).map(|_| rng.random_range(-3.0f32..3.0)).collect());
            let mut prev = f64::NEG_INFINITY;
            for bits in MIN_BITS..=MAX_BITS {
                let spec = minmax_scale(&x, bits).unwrap();
                let db = sqnr_db(&x, &fake_quantize(&x, spec).unwrap()).unwrap();
                assert!(db >= prev, "seed {seed} bits {bits}: {db} < {prev}");
                prev = db;
            }
        }
    }
}

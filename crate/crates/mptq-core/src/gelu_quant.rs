//! Data-dependent three-region quantizer for post-GeLU activations.
//!
//! Post-GeLU values occupy a narrow negative band (bounded below by the GeLU
//! minimum, about -0.17) and an unbounded positive range. The quantizer
//! splits them into negative / small-positive / large-positive regions with
//! power-of-two-related scales `s0`, `s1 = s0 * 2^m0`, `s2 = s0 * 2^m1`, so
//! region alignment is a bit shift. `m1` comes from the calibration bounds,
//! `m0` from a metric search, and `s0` from a 100-point grid search.
//!
//! Bit layout of a `bits`-wide code (most significant bit first):
//!
//! | region         | prefix | magnitude field | scale |
//! |----------------|--------|-----------------|-------|
//! | negative       | `01`   | `bits - 2` bits | `s0`  |
//! | small positive | `00`   | `bits - 2` bits | `s1`  |
//! | large positive | `1`    | `bits - 1` bits | `s2`  |

use crate::error::{Error, Result};
use crate::quant::round_half_away;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Calibration bounds for the post-GeLU distribution: the average per-sample
/// minimum and the 99.95th percentile of the pooled values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeluStats {
    pub x_low: f64,
    pub x_up: f64,
}

impl GeluStats {
    /// `x_up` must be positive; post-GeLU data without positive values
    /// cannot drive the region split.
    pub fn new(x_low: f64, x_up: f64) -> Result<Self> {
        if x_up.is_nan() || x_up <= 0.0 {
            return Err(Error::Input(format!(
                "gelu stats require x_up > 0, got x_up = {x_up}"
            )));
        }
        Ok(GeluStats { x_low, x_up })
    }
}

/// Percentile with linear interpolation on the sorted sample, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = pos - i as f64;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// Pool calibration samples into distribution bounds: `x_low` averages the
/// per-sample minima, `x_up` is the 99.95th percentile of all pooled values.
pub fn collect_gelu_stats(samples: &[Tensor]) -> Result<GeluStats> {
    if samples.is_empty() || samples.iter().any(|s| s.numel() == 0) {
        return Err(Error::Input(
            "gelu stats need at least one non-empty sample".into(),
        ));
    }
    let mut min_sum = 0.0f64;
    let mut pooled: Vec<f64> = Vec::new();
    for s in samples {
        let mut min = f64::INFINITY;
        for &v in s.data() {
            let v = v as f64;
            min = min.min(v);
            pooled.push(v);
        }
        min_sum += min;
    }
    pooled.sort_by(|a, b| a.total_cmp(b));
    let x_up = percentile(&pooled, 99.95);
    GeluStats::new(min_sum / samples.len() as f64, x_up)
}

/// One of the three value regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Neg,
    SmallPos,
    LargePos,
}

/// A region tag plus an unsigned magnitude within that region's field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionCode {
    pub region: Region,
    pub magnitude: u32,
}

/// The fitted three-region quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionQuantizer {
    pub bits: u8,
    pub s0: f32,
    pub m0: u32,
    pub m1: u32,
}

impl RegionQuantizer {
    pub fn new(bits: u8, s0: f32, m0: u32, m1: u32) -> Result<Self> {
        if !(4..=8).contains(&bits) {
            return Err(Error::Input(format!(
                "region quantizer bits must be in [4,8], got {bits}"
            )));
        }
        if s0.is_nan() || s0 <= 0.0 || !s0.is_finite() {
            return Err(Error::Input(format!("s0 must be positive, got {s0}")));
        }
        if m1 <= m0 {
            return Err(Error::Input(format!(
                "require m1 > m0, got m0={m0} m1={m1}"
            )));
        }
        if m1 > bits as u32 + 2 {
            return Err(Error::Input(format!(
                "m1 = {m1} exceeds the cap {} for {bits}-bit codes",
                bits as u32 + 2
            )));
        }
        Ok(RegionQuantizer { bits, s0, m0, m1 })
    }

    /// Scale of the small-positive region, `s0 * 2^m0`.
    pub fn s1(&self) -> f32 {
        self.s0 * (1u32 << self.m0) as f32
    }

    /// Scale of the large-positive region, `s0 * 2^m1`.
    pub fn s2(&self) -> f32 {
        self.s0 * (1u32 << self.m1) as f32
    }

    /// Largest negative-region magnitude, `2^(bits-2) - 1`.
    pub fn neg_max(&self) -> u32 {
        (1u32 << (self.bits - 2)) - 1
    }

    /// Largest small-positive field value, `2^(bits-2) - 1`.
    pub fn small_max(&self) -> u32 {
        (1u32 << (self.bits - 2)) - 1
    }

    /// Largest large-positive magnitude, `2^(bits-1) - 1`.
    pub fn large_max(&self) -> u32 {
        (1u32 << (self.bits - 1)) - 1
    }

    /// Region-2/3 split in wide-code units: `x_q = 2^(m0 + bits - 3)`.
    pub fn boundary_code(&self) -> i64 {
        1i64 << (self.m0 + self.bits as u32 - 3)
    }

    /// The same split as a real value.
    pub fn boundary_value(&self) -> f32 {
        self.boundary_code() as f32 * self.s0
    }
}

/// Determine `m1` from the distribution bounds:
/// `m1 = round(log2((x_up / R3) / (x_low / -R1)))` with `R3 = 2^(bits-1)-1`
/// and `R1 = 2^(bits-2)-1`, clamped to `[1, bits + 2]`.
pub fn compute_m1(stats: GeluStats, bits: u8) -> Result<u32> {
    if !(4..=8).contains(&bits) {
        return Err(Error::Input(format!("bits must be in [4,8], got {bits}")));
    }
    if stats.x_low.is_nan() || stats.x_low >= 0.0 || stats.x_up <= 0.0 {
        return Err(Error::Fit(format!(
            "need x_low < 0 < x_up to split regions, got x_low={} x_up={}",
            stats.x_low, stats.x_up
        )));
    }
    let r3 = ((1u32 << (bits - 1)) - 1) as f64;
    let r1 = ((1u32 << (bits - 2)) - 1) as f64;
    let ratio = (stats.x_up / r3) / (-stats.x_low / r1);
    let m1 = round_half_away(ratio.log2());
    Ok(m1.clamp(1.0, bits as f64 + 2.0) as u32)
}

/// Encode one value: first quantize to the wide signed intermediate
/// `x_q = round(x / s0)` at `bits + m1` bits, then drop it into its region,
/// rounding the first truncated bit and clamping to the region field.
pub fn region_encode(x: f32, rq: &RegionQuantizer) -> Result<RegionCode> {
    if !x.is_finite() {
        return Err(Error::Input(format!(
            "non-finite value {x} in region encode"
        )));
    }
    let wide = rq.bits as u32 + rq.m1;
    let lo = -(1i64 << (wide - 1));
    let hi = (1i64 << (wide - 1)) - 1;
    let xq = (round_half_away(x as f64 / rq.s0 as f64) as i64).clamp(lo, hi);
    if xq < 0 {
        let magnitude = ((-xq) as u32).min(rq.neg_max());
        Ok(RegionCode {
            region: Region::Neg,
            magnitude,
        })
    } else if xq < rq.boundary_code() {
        let magnitude = if rq.m0 > 0 {
            ((xq + (1i64 << (rq.m0 - 1))) >> rq.m0) as u32
        } else {
            xq as u32
        };
        Ok(RegionCode {
            region: Region::SmallPos,
            magnitude: magnitude.min(rq.small_max()),
        })
    } else {
        let magnitude = ((xq + (1i64 << (rq.m1 - 1))) >> rq.m1) as u32;
        Ok(RegionCode {
            region: Region::LargePos,
            magnitude: magnitude.min(rq.large_max()),
        })
    }
}

/// Reconstruct a value by multiplying the magnitude with its region scale.
pub fn region_decode(code: RegionCode, rq: &RegionQuantizer) -> f32 {
    match code.region {
        Region::Neg => -(code.magnitude as f32) * rq.s0,
        Region::SmallPos => code.magnitude as f32 * rq.s1(),
        Region::LargePos => code.magnitude as f32 * rq.s2(),
    }
}

/// Encode-then-decode an entire tensor.
pub fn region_fake_quantize(x: &Tensor, rq: &RegionQuantizer) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.numel());
    for &v in x.data() {
        data.push(region_decode(region_encode(v, rq)?, rq));
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Search `m0` over `{0, ..., m1-1}` minimizing the fitting metric on the
/// calibration tensor; ties break toward smaller `m0`.
pub fn compute_m0<F>(calib: &Tensor, bits: u8, s0: f32, m1: u32, metric: F) -> Result<u32>
where
    F: Fn(&Tensor, &Tensor) -> f64,
{
    if m1 < 1 {
        return Err(Error::Fit("m1 must be at least 1".into()));
    }
    let mut best = (f64::INFINITY, 0u32);
    for m0 in 0..m1 {
        let rq = RegionQuantizer::new(bits, s0, m0, m1)?;
        let loss = metric(calib, &region_fake_quantize(calib, &rq)?);
        if loss < best.0 {
            best = (loss, m0);
        }
    }
    Ok(best.1)
}

/// Grid-search `s0` over 100 equally spaced values in `(0, 1.2 * s_minmax]`
/// where `s_minmax = max(|calib|) / 2^(bits-1)`. `m1` is fixed from the
/// stats; `m0` is re-searched per candidate. Candidates evaluate in parallel
/// and reduce with an index tie-break, so the result is run-order
/// independent.
pub fn fit_s0<F>(calib: &Tensor, bits: u8, stats: GeluStats, metric: F) -> Result<RegionQuantizer>
where
    F: Fn(&Tensor, &Tensor) -> f64 + Sync,
{
    use rayon::prelude::*;

    if calib.numel() == 0 {
        return Err(Error::Input("empty calibration tensor".into()));
    }
    let m1 = compute_m1(stats, bits)?;
    let max_abs = calib.max_abs();
    if max_abs == 0.0 {
        return Err(Error::Input("all-zero calibration tensor".into()));
    }
    let s_minmax = max_abs as f64 / (1u32 << (bits - 1)) as f64;
    const GRID: usize = 100;
    let evaluated: Vec<(f64, u32, f32)> = (1..=GRID)
        .into_par_iter()
        .map(|k| {
            let s0 = (1.2 * s_minmax * k as f64 / GRID as f64) as f32;
            let mut best = (f64::INFINITY, 0u32);
            for m0 in 0..m1 {
                let rq = RegionQuantizer::new(bits, s0, m0, m1)?;
                let loss = metric(calib, &region_fake_quantize(calib, &rq)?);
                if loss < best.0 {
                    best = (loss, m0);
                }
            }
            Ok((best.0, best.1, s0))
        })
        .collect::<Result<_>>()?;
    let (_, m0, s0) = evaluated
        .iter()
        .copied()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("non-empty grid");
    RegionQuantizer::new(bits, s0, m0, m1)
}

/// Squared magnitude lost to saturation outside the representable range
/// `[-neg_max * s0, large_max * s2]`.
pub fn region_clamping_loss(x: &Tensor, rq: &RegionQuantizer) -> f64 {
    let hi = rq.large_max() as f64 * rq.s2() as f64;
    let lo = -(rq.neg_max() as f64) * rq.s0 as f64;
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

/// Pack a code into the low `bits` bits of a byte, prefix first.
pub fn pack_bits(code: RegionCode, rq: &RegionQuantizer) -> Result<u8> {
    let b = rq.bits as u32;
    match code.region {
        Region::Neg => {
            if code.magnitude > rq.neg_max() {
                return Err(Error::Encoding(format!(
                    "negative magnitude {} exceeds field max {}",
                    code.magnitude,
                    rq.neg_max()
                )));
            }
            Ok(((0b01 << (b - 2)) | code.magnitude) as u8)
        }
        Region::SmallPos => {
            if code.magnitude > rq.small_max() {
                return Err(Error::Encoding(format!(
                    "small-positive magnitude {} exceeds field max {}",
                    code.magnitude,
                    rq.small_max()
                )));
            }
            Ok(code.magnitude as u8)
        }
        Region::LargePos => {
            if code.magnitude > rq.large_max() {
                return Err(Error::Encoding(format!(
                    "large-positive magnitude {} exceeds field max {}",
                    code.magnitude,
                    rq.large_max()
                )));
            }
            Ok(((1 << (b - 1)) | code.magnitude) as u8)
        }
    }
}

/// Inverse of [`pack_bits`]: the pattern must fit in `bits` bits.
pub fn unpack_bits(pattern: u8, bits: u8) -> Result<RegionCode> {
    if !(4..=8).contains(&bits) {
        return Err(Error::Input(format!("bits must be in [4,8], got {bits}")));
    }
    if bits < 8 && (pattern >> bits) != 0 {
        return Err(Error::Encoding(format!(
            "pattern {pattern:#010b} does not fit in {bits} bits"
        )));
    }
    let p = pattern as u32;
    let b = bits as u32;
    if p >> (b - 1) == 1 {
        Ok(RegionCode {
            region: Region::LargePos,
            magnitude: p & ((1 << (b - 1)) - 1),
        })
    } else if (p >> (b - 2)) & 1 == 1 {
        Ok(RegionCode {
            region: Region::Neg,
            magnitude: p & ((1 << (b - 2)) - 1),
        })
    } else {
        Ok(RegionCode {
            region: Region::SmallPos,
            magnitude: p & ((1 << (b - 2)) - 1),
        })
    }
}

/// Concatenate packed codes into a byte stream, most significant bit first,
/// zero-padded to a whole byte.
///
/// With the 6-bit layout, `[(Neg, 6), (SmallPos, 1), (LargePos, 7)]` packs to
/// the bit string `010110 000001 100111` and therefore the bytes
/// `[0x58, 0x19, 0xC0]`.
pub fn pack_stream(codes: &[RegionCode], rq: &RegionQuantizer) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity((codes.len() * rq.bits as usize).div_ceil(8));
    let mut acc: u32 = 0;
    let mut nbits: u32 = 0;
    for &c in codes {
        acc = (acc << rq.bits) | pack_bits(c, rq)? as u32;
        nbits += rq.bits as u32;
        while nbits >= 8 {
            out.push((acc >> (nbits - 8)) as u8);
            nbits -= 8;
            acc &= (1 << nbits) - 1;
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Read `count` codes back out of a packed stream.
pub fn unpack_stream(bytes: &[u8], count: usize, rq: &RegionQuantizer) -> Result<Vec<RegionCode>> {
    let total_bits = count * rq.bits as usize;
    if bytes.len() * 8 < total_bits {
        return Err(Error::Encoding(format!(
            "stream of {} bytes is too short for {count} {}-bit codes",
            bytes.len(),
            rq.bits
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut nbits: u32 = 0;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while nbits < rq.bits as u32 {
            acc = (acc << 8) | *iter.next().expect("length checked") as u32;
            nbits += 8;
        }
        let shift = nbits - rq.bits as u32;
        out.push(unpack_bits((acc >> shift) as u8, rq.bits)?);
        nbits = shift;
        acc &= (1 << nbits) - 1;
    }
    Ok(out)
}

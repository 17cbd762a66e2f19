//! Uniform affine and generalized logarithmic quantizers.
//!
//! All rounding is half-away-from-zero (`f64::round`). Uniform quantizers are
//! calibrated by min-max, either over the whole tensor or per slice along an
//! axis. Logarithmic quantizers map `x` to the code `k` minimizing
//! `|-log_a(x / s) - k|`, so the codebook is `s · a^(-k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{min_max, Tensor};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Default log-base candidates: `2`, `√2`, `2^(1/4)`.
pub fn default_log_bases() -> Vec<f64> {
    vec![2.0, std::f64::consts::SQRT_2, 2f64.powf(0.25)]
}

/// Default candidates plus finer roots `2^(2^-k)` for `3 ≤ k ≤ bits - 4`.
///
/// A base `2^(2^-k)` with `2^bits` codes spans `2^(-2^(bits-k))`, so the bound
/// on `k` keeps at least sixteen octaves of range. Below 7 bits this is
/// exactly the default set.
pub fn log_bases_for_bits(bits: u32) -> Vec<f64> {
    let mut bases = default_log_bases();
    for k in 3..=bits.saturating_sub(4) {
        bases.push(2f64.powf(0.5f64.powi(k as i32)));
    }
    bases
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub bits: u32,
    pub granularity: Granularity,
    /// One entry for `PerTensor`, one per slice along the axis for `PerChannel`.
    pub scales: Vec<f64>,
    pub zero_points: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogParams {
    pub scale: f64,
    pub base: f64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantScheme {
    Uniform(AffineParams),
    Logarithmic(LogParams),
}

/// Integer codes with the shape of the tensor they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u32>,
}

#[inline]
fn max_code(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

impl AffineParams {
    pub fn per_tensor(scale: f64, zero_point: u32, bits: u32) -> Result<Self> {
        let p = Self {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zero_points: vec![zero_point],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return Err(Error::InvalidParameter(
                "scale and zero-point counts differ or are empty".into(),
            ));
        }
        if matches!(self.granularity, Granularity::PerTensor) && self.scales.len() != 1 {
            return Err(Error::InvalidParameter(
                "per-tensor params must hold exactly one scale".into(),
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidParameter(format!("scale {s} must be positive")));
        }
        let hi = max_code(self.bits);
        if let Some(z) = self.zero_points.iter().find(|&&z| z > hi) {
            return Err(Error::InvalidParameter(format!(
                "zero point {z} outside [0, {hi}]"
            )));
        }
        Ok(())
    }

    /// Maps each flat element index of a tensor with `shape` to its (scale, zero-point) slot.
    fn channel_of(&self, shape: &[usize]) -> Result<ChannelMap> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelMap { stride: 1, count: 1 }),
            Granularity::PerChannel { axis } => {
                let count = *shape.get(axis).ok_or_else(|| {
                    Error::ShapeMismatch(format!("axis {axis} out of range for {shape:?}"))
                })?;
                if count != self.scales.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} channel params for axis of length {count}",
                        self.scales.len()
                    )));
                }
                let stride = shape[axis + 1..].iter().product();
                Ok(ChannelMap { stride, count })
            }
        }
    }

    /// Largest scale over channels; the round-trip error bound is half of it.
    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
struct ChannelMap {
    stride: usize,
    count: usize,
}

impl ChannelMap {
    #[inline]
    fn index(self, flat: usize) -> usize {
        if self.count == 1 {
            0
        } else {
            (flat / self.stride) % self.count
        }
    }
}

impl LogParams {
    pub fn new(scale: f64, base: f64, bits: u32) -> Result<Self> {
        let p = Self { scale, base, bits };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::InvalidParameter(format!("log base {} must exceed 1", self.base)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "log scale {} must be positive",
                self.scale
            )));
        }
        Ok(())
    }

    /// Every representable value, in code order.
    pub fn codebook(&self) -> Vec<f64> {
        (0..=max_code(self.bits)).map(|k| self.decode(k)).collect()
    }

    #[inline]
    fn encode(&self, x: f64) -> u32 {
        if x == 0.0 {
            return max_code(self.bits);
        }
        let k = (-(x / self.scale).ln() / self.base.ln()).round();
        k.clamp(0.0, max_code(self.bits) as f64) as u32
    }

    #[inline]
    fn decode(&self, k: u32) -> f64 {
        self.scale * self.base.powf(-(k as f64))
    }
}

impl QuantScheme {
    pub fn bits(&self) -> u32 {
        match self {
            QuantScheme::Uniform(p) => p.bits,
            QuantScheme::Logarithmic(p) => p.bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            QuantScheme::Uniform(p) => p.validate(),
            QuantScheme::Logarithmic(p) => p.validate(),
        }
    }
}

/// Scale and zero-point for a per-tensor range.
///
/// The range is widened to contain zero so that every value inside the
/// observed range stays within half a step of the grid. A collapsed range
/// (`max == min`) uses unit scale and `z = clip(round(-min))`.
pub fn affine_from_range(min: f64, max: f64, bits: u32) -> Result<(f64, u32)> {
    check_bits(bits)?;
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::NonFinite("calibration range"));
    }
    if min > max {
        return Err(Error::InvalidParameter(format!("empty range [{min}, {max}]")));
    }
    let hi = max_code(bits);
    if max == min {
        let z = (-min).round().clamp(0.0, hi as f64) as u32;
        return Ok((1.0, z));
    }
    let lo = min.min(0.0);
    let up = max.max(0.0);
    let scale = (up - lo) / hi as f64;
    let z = (-lo / scale).round().clamp(0.0, hi as f64) as u32;
    Ok((scale, z))
}

/// Min-max calibration of a uniform affine quantizer.
pub fn calibrate_uniform(
    samples: &Tensor,
    bits: u32,
    granularity: Granularity,
) -> Result<AffineParams> {
    check_bits(bits)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples"));
    }
    if !samples.is_finite() {
        return Err(Error::NonFinite("calibration samples"));
    }
    let (scales, zero_points) = match granularity {
        Granularity::PerTensor => {
            let (lo, hi) = samples.min_max();
            let (s, z) = affine_from_range(lo, hi, bits)?;
            (vec![s], vec![z])
        }
        Granularity::PerChannel { axis } => {
            let shape = samples.shape();
            let count = *shape.get(axis).ok_or_else(|| {
                Error::ShapeMismatch(format!("axis {axis} out of range for {shape:?}"))
            })?;
            let stride: usize = shape[axis + 1..].iter().product();
            let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); count];
            for (i, &v) in samples.data().iter().enumerate() {
                let r = &mut ranges[(i / stride) % count];
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
            let mut scales = Vec::with_capacity(count);
            let mut zps = Vec::with_capacity(count);
            for (lo, hi) in ranges {
                let (s, z) = affine_from_range(lo, hi, bits)?;
                scales.push(s);
                zps.push(z);
            }
            (scales, zps)
        }
    };
    Ok(AffineParams { bits, granularity, scales, zero_points })
}

pub fn quantize_uniform(x: &Tensor, p: &AffineParams) -> Result<QTensor> {
    p.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("quantizer input"));
    }
    let map = p.channel_of(x.shape())?;
    let hi = max_code(p.bits) as f64;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = map.index(i);
            ((v / p.scales[c]).round() + p.zero_points[c] as f64).clamp(0.0, hi) as u32
        })
        .collect();
    Ok(QTensor { shape: x.shape().to_vec(), codes })
}

pub fn dequantize_uniform(q: &QTensor, p: &AffineParams) -> Result<Tensor> {
    p.validate()?;
    let hi = max_code(p.bits);
    if let Some(&code) = q.codes.iter().find(|&&c| c > hi) {
        return Err(Error::CodeOutOfRange { code, bits: p.bits });
    }
    let map = p.channel_of(&q.shape)?;
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let c = map.index(i);
            p.scales[c] * (k as f64 - p.zero_points[c] as f64)
        })
        .collect();
    Tensor::new(q.shape.clone(), data)
}

pub fn quantize_log(x: &Tensor, p: &LogParams) -> Result<QTensor> {
    p.validate()?;
    let codes = x
        .data()
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                Err(Error::NonFinite("log quantizer input"))
            } else if v < 0.0 {
                Err(Error::NegativeInput(v))
            } else {
                Ok(p.encode(v))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QTensor { shape: x.shape().to_vec(), codes })
}

pub fn dequantize_log(q: &QTensor, p: &LogParams) -> Result<Tensor> {
    p.validate()?;
    let hi = max_code(p.bits);
    let data = q
        .codes
        .iter()
        .map(|&k| {
            if k > hi {
                Err(Error::CodeOutOfRange { code: k, bits: p.bits })
            } else {
                Ok(p.decode(k))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(q.shape.clone(), data)
}

/// Mean squared error of log fake-quantization over `samples`.
pub fn log_reconstruction_mse(samples: &[f64], p: &LogParams) -> f64 {
    let sum: f64 = samples
        .iter()
        .map(|&x| {
            let e = p.decode(p.encode(x)) - x;
            e * e
        })
        .sum();
    sum / samples.len() as f64
}

/// Picks the base with the lowest reconstruction MSE; the scale is `max(samples)`.
/// Exact ties go to the smaller base.
pub fn search_log_base(samples: &[f64], bits: u32, candidates: &[f64]) -> Result<LogParams> {
    check_bits(bits)?;
    if candidates.is_empty() {
        return Err(Error::EmptyInput("log-base candidates"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("log calibration samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log calibration samples"));
    }
    if let Some(&v) = samples.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeInput(v));
    }
    let (_, max) = min_max(samples);
    // All-zero samples: any positive scale reproduces them through the zero rule.
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut best: Option<(f64, LogParams)> = None;
    for &base in candidates {
        let p = LogParams::new(scale, base, bits)?;
        let mse = log_reconstruction_mse(samples, &p);
        best = match best {
            Some((m, b)) if m < mse || (m == mse && b.base <= base) => Some((m, b)),
            _ => Some((mse, p)),
        };
    }
    Ok(best.map(|(_, p)| p).expect("candidates non-empty"))
}

pub fn fake_quant(x: &Tensor, scheme: &QuantScheme) -> Result<Tensor> {
    match scheme {
        QuantScheme::Uniform(p) => dequantize_uniform(&quantize_uniform(x, p)?, p),
        QuantScheme::Logarithmic(p) => dequantize_log(&quantize_log(x, p)?, p),
    }
}

/// In-place fake quantization of a flat buffer under a per-tensor scheme.
///
/// This is the activation path of the forward pass; per-channel params are rejected.
pub(crate) fn fake_quant_slice(values: &mut [f64], scheme: &QuantScheme) -> Result<()> {
    match scheme {
        QuantScheme::Uniform(p) => {
            if p.scales.len() != 1 {
                return Err(Error::InvalidParameter(
                    "activation quantizers must be per-tensor".into(),
                ));
            }
            let (s, z) = (p.scales[0], p.zero_points[0] as f64);
            let hi = max_code(p.bits) as f64;
            for v in values.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("activation"));
                }
                let k = ((*v / s).round() + z).clamp(0.0, hi);
                *v = s * (k - z);
            }
        }
        QuantScheme::Logarithmic(p) => {
            for v in values.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("activation"));
                }
                if *v < 0.0 {
                    return Err(Error::NegativeInput(*v));
                }
                *v = p.decode(p.encode(*v));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn fq(x: f64, p: &AffineParams) -> f64 {
        fake_quant(&t(&[x]), &QuantScheme::Uniform(p.clone())).unwrap().data()[0]
    }

    #[test]
    fn bit_dependent_bases() {
        assert_eq!(log_bases_for_bits(4), default_log_bases());
        assert_eq!(log_bases_for_bits(6), default_log_bases());
        let b = log_bases_for_bits(8);
        assert_eq!(b.len(), 5);
        assert_eq!(b[4], 2f64.powf(1.0 / 16.0));
        assert_eq!(log_bases_for_bits(16).len(), 13);
    }

    #[test]
    fn calibrate_examples() {
        let p = calibrate_uniform(&t(&[0.0, 1.0, 2.0, 3.0]), 2, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        assert_eq!(p.zero_points, vec![0]);

        let p = calibrate_uniform(&t(&[-1.0, 0.3, 1.0]), 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales, vec![2.0 / 255.0]);
        assert_eq!(p.zero_points, vec![128]);
    }

    #[test]
    fn degenerate_range_round_trips_constant() {
        let p = calibrate_uniform(&t(&[5.0; 6]), 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        assert_eq!(p.zero_points, vec![0]);
        assert_eq!(fq(5.0, &p), 5.0);

        let p = calibrate_uniform(&t(&[-3.0; 2]), 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.zero_points, vec![3]);
        assert_eq!(fq(-3.0, &p), -3.0);
    }

    #[test]
    fn calibrate_errors() {
        assert!(matches!(
            calibrate_uniform(&t(&[f64::NAN]), 8, Granularity::PerTensor),
            Err(Error::NonFinite(_))
        ));
        assert!(calibrate_uniform(&t(&[1.0]), 1, Granularity::PerTensor).is_err());
        assert!(calibrate_uniform(&t(&[1.0]), 17, Granularity::PerTensor).is_err());
        assert!(calibrate_uniform(&t(&[1.0]), 8, Granularity::PerChannel { axis: 1 }).is_err());
    }

    #[test]
    fn quantize_uniform_examples() {
        let p = AffineParams::per_tensor(1.0, 0, 2).unwrap();
        assert_eq!(quantize_uniform(&t(&[1.4]), &p).unwrap().codes, vec![1]);
        assert_eq!(quantize_uniform(&t(&[100.0]), &p).unwrap().codes, vec![3]);
        let p = AffineParams::per_tensor(2.0 / 255.0, 128, 8).unwrap();
        // round(-63.75) = -64, + 128
        assert_eq!(quantize_uniform(&t(&[-0.5]), &p).unwrap().codes, vec![64]);
        assert!(quantize_uniform(&t(&[f64::INFINITY]), &p).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let p = AffineParams::per_tensor(1.0, 4, 4).unwrap();
        assert_eq!(quantize_uniform(&t(&[0.5, -0.5, 1.5, -1.5]), &p).unwrap().codes, vec![5, 3, 6, 2]);
    }

    #[test]
    fn dequantize_uniform_examples() {
        let p = AffineParams::per_tensor(1.0, 0, 2).unwrap();
        let q = QTensor { shape: vec![1], codes: vec![1] };
        assert_eq!(dequantize_uniform(&q, &p).unwrap().data(), &[1.0]);
        let p = AffineParams::per_tensor(2.0 / 255.0, 128, 8).unwrap();
        let q = QTensor { shape: vec![1], codes: vec![128] };
        assert_eq!(dequantize_uniform(&q, &p).unwrap().data(), &[0.0]);
        let q = QTensor { shape: vec![1], codes: vec![256] };
        assert!(matches!(dequantize_uniform(&q, &p), Err(Error::CodeOutOfRange { .. })));
    }

    #[test]
    fn zero_is_exact_when_representable() {
        let p = calibrate_uniform(&t(&[-0.73, 2.9]), 4, Granularity::PerTensor).unwrap();
        assert_eq!(fq(0.0, &p), 0.0);
    }

    #[test]
    fn log_quantize_examples() {
        let p = LogParams::new(1.0, 2.0, 4).unwrap();
        assert_eq!(quantize_log(&t(&[0.25]), &p).unwrap().codes, vec![2]);
        assert_eq!(quantize_log(&t(&[0.0]), &p).unwrap().codes, vec![15]);
        let p = LogParams::new(1.0, std::f64::consts::SQRT_2, 4).unwrap();
        assert_eq!(quantize_log(&t(&[0.5]), &p).unwrap().codes, vec![2]);
        assert!(matches!(quantize_log(&t(&[-0.1]), &p), Err(Error::NegativeInput(_))));
    }

    #[test]
    fn log_dequantize_examples() {
        let q = QTensor { shape: vec![1], codes: vec![2] };
        let p = LogParams::new(1.0, 2.0, 4).unwrap();
        assert_eq!(dequantize_log(&q, &p).unwrap().data(), &[0.25]);
        let p = LogParams::new(1.0, std::f64::consts::SQRT_2, 4).unwrap();
        assert!((dequantize_log(&q, &p).unwrap().data()[0] - 0.5).abs() < 1e-15);
        let p = LogParams::new(0.37, 2.0, 4).unwrap();
        let q0 = QTensor { shape: vec![1], codes: vec![0] };
        assert_eq!(dequantize_log(&q0, &p).unwrap().data(), &[0.37]);
        let bad = QTensor { shape: vec![1], codes: vec![16] };
        assert!(dequantize_log(&bad, &p).is_err());
    }

    #[test]
    fn log_params_validation() {
        assert!(LogParams::new(1.0, 1.0, 4).is_err());
        assert!(LogParams::new(0.0, 2.0, 4).is_err());
    }

    #[test]
    fn base_search_prefers_exactly_representable_base() {
        let pow2 = [1.0, 0.5, 0.25, 0.125];
        let p = search_log_base(&pow2, 2, &[2.0, std::f64::consts::SQRT_2]).unwrap();
        assert_eq!(p.base, 2.0);
        assert_eq!(p.scale, 1.0);
        assert_eq!(log_reconstruction_mse(&pow2, &p), 0.0);

        let half_pow = [1.0, 2f64.powf(-0.5), 0.5, 2f64.powf(-1.5)];
        let p = search_log_base(&half_pow, 2, &[2.0, std::f64::consts::SQRT_2]).unwrap();
        assert_eq!(p.base, std::f64::consts::SQRT_2);
    }

    #[test]
    fn base_search_ties_go_to_smaller_base() {
        // A single sample equal to the scale is exact under every base.
        let p = search_log_base(&[0.3], 4, &[2.0, 1.5, 3.0]).unwrap();
        assert_eq!(p.base, 1.5);
        assert!(search_log_base(&[0.3], 4, &[]).is_err());
    }

    #[test]
    fn base_search_matches_exhaustive_evaluation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut row: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0f64)).collect();
            crate::tensor::softmax_in_place(&mut row);
            let cands = default_log_bases();
            for bits in [2, 3, 4, 8] {
                let got = search_log_base(&row, bits, &cands).unwrap();
                let scale = row.iter().copied().fold(0.0, f64::max);
                // Independent brute force: evaluate every candidate from scratch.
                let mut best = (f64::INFINITY, 0.0);
                for &a in &cands {
                    let hi = ((1u32 << bits) - 1) as f64;
                    let mse = row
                        .iter()
                        .map(|&x| {
                            let k = (-(x / scale).log2() / a.log2()).round().clamp(0.0, hi);
                            let e = scale * a.powf(-k) - x;
                            e * e
                        })
                        .sum::<f64>()
                        / row.len() as f64;
                    if mse < best.0 - 1e-18 || ((mse - best.0).abs() <= 1e-18 && a < best.1) {
                        best = (mse, a);
                    }
                }
                assert_eq!(got.base, best.1, "bits {bits}");
            }
        }
    }

    #[test]
    fn per_channel_uses_axis_slices() {
        let w = Tensor::from_rows(&[vec![-1.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let p = calibrate_uniform(&w, 8, Granularity::PerChannel { axis: 0 }).unwrap();
        assert_eq!(p.scales, vec![2.0 / 255.0, 4.0 / 255.0]);
        assert_eq!(p.zero_points, vec![128, 0]);
        let p = calibrate_uniform(&w, 8, Granularity::PerChannel { axis: 1 }).unwrap();
        assert_eq!(p.scales, vec![1.0 / 255.0, 4.0 / 255.0]);
    }

    #[test]
    fn fake_quant_at_16_bits_is_within_half_step() {
        let x = t(&[-0.81, -0.2, 0.0, 0.33, 1.7]);
        let p = calibrate_uniform(&x, 16, Granularity::PerTensor).unwrap();
        let y = fake_quant(&x, &QuantScheme::Uniform(p.clone())).unwrap();
        assert!(y.max_abs_diff(&x) <= p.scales[0] / 2.0);
    }

    proptest! {
        #[test]
        fn uniform_round_trip_bound(
            lo in -50.0f64..0.0, width in 1e-3f64..100.0, bits in 2u32..=16,
            fracs in proptest::collection::vec(0.0f64..=1.0, 1..64),
        ) {
            let hi = lo + width;
            let mut vals: Vec<f64> = fracs.iter().map(|f| lo + f * width).collect();
            vals.push(lo);
            vals.push(hi);
            let x = t(&vals);
            let p = calibrate_uniform(&x, bits, Granularity::PerTensor).unwrap();
            let y = fake_quant(&x, &QuantScheme::Uniform(p.clone())).unwrap();
            let tol = p.scales[0] / 2.0 + 1e-9;
            prop_assert!(y.max_abs_diff(&x) <= tol);
        }

        #[test]
        fn one_sided_ranges_still_round_trip(
            lo in 0.5f64..10.0, width in 1e-2f64..10.0, bits in 2u32..=12,
            fracs in proptest::collection::vec(0.0f64..=1.0, 1..32),
        ) {
            let mut vals: Vec<f64> = fracs.iter().map(|f| lo + f * width).collect();
            vals.extend([lo, lo + width]);
            let x = t(&vals);
            let p = calibrate_uniform(&x, bits, Granularity::PerTensor).unwrap();
            let y = fake_quant(&x, &QuantScheme::Uniform(p.clone())).unwrap();
            prop_assert!(y.max_abs_diff(&x) <= p.scales[0] / 2.0 + 1e-9);
        }

        #[test]
        fn uniform_quantize_is_monotone(
            a in -10.0f64..10.0, b in -10.0f64..10.0, bits in 2u32..=8,
        ) {
            let p = calibrate_uniform(&t(&[-3.0, 4.0]), bits, Granularity::PerTensor).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize_uniform(&t(&[lo, hi]), &p).unwrap().codes;
            prop_assert!(q[0] <= q[1]);
            prop_assert!(q[1] < (1 << bits));
        }

        #[test]
        fn per_channel_on_identical_channels_equals_per_tensor(
            row in proptest::collection::vec(-5.0f64..5.0, 2..16), channels in 1usize..6, bits in 2u32..=8,
        ) {
            let rows: Vec<Vec<f64>> = std::iter::repeat_n(row.clone(), channels).collect();
            let w = Tensor::from_rows(&rows).unwrap();
            let pc = calibrate_uniform(&w, bits, Granularity::PerChannel { axis: 0 }).unwrap();
            let pt = calibrate_uniform(&t(&row), bits, Granularity::PerTensor).unwrap();
            prop_assert_eq!(pc.scales, vec![pt.scales[0]; channels]);
            prop_assert_eq!(pc.zero_points, vec![pt.zero_points[0]; channels]);
        }

        #[test]
        fn log_codes_in_range_and_codebook_geometric(
            xs in proptest::collection::vec(0.0f64..2.0, 1..64), bits in 2u32..=6,
        ) {
            let p = LogParams::new(1.0, std::f64::consts::SQRT_2, bits).unwrap();
            let q = quantize_log(&t(&xs), &p).unwrap();
            prop_assert!(q.codes.iter().all(|&c| c < (1 << bits)));
            let cb = p.codebook();
            prop_assert_eq!(cb.len(), 1usize << bits);
            for w in cb.windows(2) {
                prop_assert!((w[0] / w[1] - p.base).abs() < 1e-9);
            }
        }
    }
}

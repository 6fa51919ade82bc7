//! Piecewise linear quantization.
//!
//! `[-m, m]` is split at breakpoints `0 < p_1 < … < p_K < m` into `K + 1`
//! symmetric regions. The magnitude of a value in region `j` (bounds
//! `[lo_j, hi_j]`, closed on the low-magnitude side at `lo_j = 0` and at every
//! breakpoint from below) is quantized with a `(b-1)`-bit unsigned uniform
//! quantizer whose offset is `lo_j`; the sign supplies the remaining bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantized::{param_ids_for, region_index_bits, Encoding, Granularity, PackedBits, QuantizedTensor};
use crate::tensor::Tensor;
use crate::uniform::{QuantParams, Signedness, MAX_BIT_WIDTH};

/// A full PWLQ encoding of one channel or layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlqParams {
    pub bit_width: u8,
    /// Range bound `m`.
    pub bound: f64,
    pub breakpoints: Vec<f64>,
    /// One `(b-1)`-bit quantizer per region, center region first.
    pub regions: Vec<QuantParams>,
    /// Sign-independent decode shift; zero unless bias correction folded a
    /// channel-level offset in.
    #[serde(default)]
    pub shift: f64,
}

/// Encoded form of a single value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PwlqCode {
    pub region: u8,
    pub negative: bool,
    pub magnitude: i32,
}

impl PwlqCode {
    /// `sign(r) × magnitude`.
    pub fn signed(&self) -> i32 {
        if self.negative {
            -self.magnitude
        } else {
            self.magnitude
        }
    }
}

/// Largest supported breakpoint count.
pub const MAX_BREAKPOINTS: usize = 7;

impl PwlqParams {
    pub fn new(bit_width: u8, bound: f64, breakpoints: Vec<f64>) -> Result<Self> {
        if !(2..=MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(invalid(format!("PWLQ bit width must be in [2, {MAX_BIT_WIDTH}], got {bit_width}")));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(invalid(format!("range bound must be positive, got {bound}")));
        }
        if breakpoints.is_empty() || breakpoints.len() > MAX_BREAKPOINTS {
            return Err(invalid(format!(
                "breakpoint count must be in [1, {MAX_BREAKPOINTS}], got {}",
                breakpoints.len()
            )));
        }
        let mut prev = 0.0;
        for &p in &breakpoints {
            if !(p.is_finite() && p > prev && p < bound) {
                return Err(invalid(format!(
                    "breakpoints must be strictly increasing inside (0, {bound}), got {breakpoints:?}"
                )));
            }
            prev = p;
        }
        let edges: Vec<f64> = std::iter::once(0.0)
            .chain(breakpoints.iter().copied())
            .chain(std::iter::once(bound))
            .collect();
        let regions = edges
            .windows(2)
            .map(|w| QuantParams::new(bit_width - 1, w[0], w[1], Signedness::AsymmetricUnsigned))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bit_width, bound, breakpoints, regions, shift: 0.0 })
    }

    /// Single-breakpoint parameters.
    pub fn single(bit_width: u8, bound: f64, breakpoint: f64) -> Result<Self> {
        Self::new(bit_width, bound, vec![breakpoint])
    }

    pub fn breakpoint_count(&self) -> usize {
        self.breakpoints.len()
    }

    /// Storage bits for the region index of one element.
    pub fn region_bits(&self) -> u8 {
        region_index_bits(self.regions.len())
    }

    /// Region containing magnitude `a`; ties at a breakpoint go to the inner region.
    pub fn region_of(&self, magnitude: f64) -> usize {
        self.breakpoints.partition_point(|&p| p < magnitude)
    }

    pub fn encode(&self, r: f64) -> PwlqCode {
        let a = r.abs();
        let region = self.region_of(a);
        PwlqCode { region: region as u8, negative: r < 0.0, magnitude: self.regions[region].quantize(a) }
    }

    pub fn decode(&self, region: usize, negative: bool, magnitude: i32) -> f64 {
        let v = self.regions[region].dequantize(magnitude);
        (if negative { -v } else { v }) + self.shift
    }

    pub fn reconstruct(&self, r: f64) -> f64 {
        let c = self.encode(r);
        self.decode(usize::from(c.region), c.negative, c.magnitude)
    }

    /// Largest region step size.
    pub fn max_step(&self) -> f64 {
        self.regions.iter().map(|q| q.scale).fold(0.0, f64::max)
    }
}

/// Per-layer PWLQ of a whole tensor.
pub fn quantize_pwlq(t: &Tensor, params: &PwlqParams) -> Result<QuantizedTensor> {
    quantize_pwlq_with(t, Granularity::PerLayer, t.channel_axis(), vec![params.clone()])
}

/// Per-channel PWLQ, one parameter set per channel along `axis`.
pub fn quantize_pwlq_per_channel(t: &Tensor, axis: usize, params: Vec<PwlqParams>) -> Result<QuantizedTensor> {
    quantize_pwlq_with(t, Granularity::PerChannel, axis, params)
}

fn quantize_pwlq_with(
    t: &Tensor,
    granularity: Granularity,
    axis: usize,
    params: Vec<PwlqParams>,
) -> Result<QuantizedTensor> {
    if params.is_empty() {
        return Err(invalid("no PWLQ parameters given"));
    }
    let ids = param_ids_for(t, granularity, axis)?;
    if granularity == Granularity::PerChannel && params.len() != t.shape()[axis] {
        return Err(Error::ShapeMismatch(format!(
            "{} channels but {} parameter sets",
            t.shape()[axis],
            params.len()
        )));
    }
    let width = params.iter().map(PwlqParams::region_bits).max().unwrap_or(1);
    let mut regions = PackedBits::zeros(width, t.len());
    let mut negative = PackedBits::zeros(1, t.len());
    let mut codes = Vec::with_capacity(t.len());
    for (i, (&r, &pid)) in t.data().iter().zip(&ids).enumerate() {
        let c = params[pid].encode(f64::from(r));
        regions.set(i, c.region);
        negative.set(i, u8::from(c.negative));
        codes.push(c.signed());
    }
    QuantizedTensor::new(t.shape().to_vec(), axis, granularity, codes, Encoding::Pwlq { params, regions, negative })
}

/// Inverse of [`quantize_pwlq`].
pub fn dequantize_pwlq(q: &QuantizedTensor) -> Result<Tensor> {
    match q.encoding() {
        Encoding::Pwlq { .. } => q.dequantize(),
        Encoding::Uniform { .. } => Err(invalid("expected a piecewise quantized tensor")),
    }
}

/// A single quantizer applied element-wise, for error measurement.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Uniform(QuantParams),
    Pwlq(PwlqParams),
}

impl Scheme {
    pub fn reconstruct(&self, r: f64) -> f64 {
        match self {
            Scheme::Uniform(p) => p.reconstruct(r),
            Scheme::Pwlq(p) => p.reconstruct(r),
        }
    }
}

/// Mean of `(r̂ - r)²` over `values`: the brute-force oracle for every
/// analytic error formula.
pub fn empirical_mse(values: &[f32], scheme: &Scheme) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("MSE of an empty tensor".into()));
    }
    let sum: f64 = match scheme {
        Scheme::Uniform(p) => values
            .iter()
            .map(|&v| {
                let r = f64::from(v);
                (p.reconstruct(r) - r).powi(2)
            })
            .sum(),
        Scheme::Pwlq(p) if p.breakpoints.len() == 1 && p.shift == 0.0 => {
            // Single-breakpoint fast path: magnitudes only, no sign bookkeeping.
            let (center, tail, bp) = (p.regions[0], p.regions[1], p.breakpoints[0]);
            values
                .iter()
                .map(|&v| {
                    let a = f64::from(v).abs();
                    let q = if a <= bp { center } else { tail };
                    (q.reconstruct(a) - a).powi(2)
                })
                .sum()
        }
        Scheme::Pwlq(p) => values
            .iter()
            .map(|&v| {
                let r = f64::from(v);
                (p.reconstruct(r) - r).powi(2)
            })
            .sum(),
    };
    Ok(sum / values.len() as f64)
}

/// One point of an MSE-versus-breakpoint curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub breakpoint: f64,
    pub mse: f64,
}

/// The `n`-point breakpoint grid strictly inside `(0, m/2)`.
pub fn half_range_grid(bound: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 * bound * i as f64 / (n + 1) as f64).collect()
}

/// Empirical single-breakpoint PWLQ MSE over [`half_range_grid`].
pub fn breakpoint_sweep(values: &[f32], bit_width: u8, bound: f64, n: usize) -> Result<Vec<SweepPoint>> {
    half_range_grid(bound, n)
        .into_iter()
        .map(|p| {
            let params = PwlqParams::single(bit_width, bound, p)?;
            Ok(SweepPoint { breakpoint: p, mse: empirical_mse(values, &Scheme::Pwlq(params))? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uniform::quantize_uniform;

    fn params_3bit() -> PwlqParams {
        PwlqParams::single(3, 1.0, 0.5).unwrap()
    }

    #[test]
    fn center_region_example() {
        let p = params_3bit();
        assert!((p.regions[0].scale - 0.5 / 3.0).abs() < 1e-15);
        let c = p.encode(0.3);
        assert_eq!(c, PwlqCode { region: 0, negative: false, magnitude: 2 });
        let r = p.decode(0, false, 2);
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tail_region_example() {
        let p = params_3bit();
        let c = p.encode(0.8);
        assert_eq!(c, PwlqCode { region: 1, negative: false, magnitude: 2 });
        assert!((p.decode(1, false, 2) - (0.5 + 2.0 * 0.5 / 3.0)).abs() < 1e-15);
        assert!((p.reconstruct(0.8) - 0.833_333).abs() < 1e-6);
    }

    #[test]
    fn zero_and_boundary() {
        let p = params_3bit();
        assert_eq!(p.encode(0.0), PwlqCode { region: 0, negative: false, magnitude: 0 });
        assert_eq!(p.reconstruct(0.0), 0.0);
        // |r| = p belongs to the center region.
        assert_eq!(p.encode(0.5).region, 0);
        assert_eq!(p.encode(-0.5).region, 0);
        assert_eq!(p.encode(0.500_001).region, 1);
        // Tail magnitude 0 keeps its sign.
        let c = p.encode(-0.51);
        assert_eq!((c.region, c.negative, c.magnitude), (1, true, 0));
        assert!((p.reconstruct(-0.51) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_params() {
        assert!(PwlqParams::single(1, 1.0, 0.5).is_err());
        assert!(PwlqParams::single(4, 1.0, 0.0).is_err());
        assert!(PwlqParams::single(4, 1.0, 1.0).is_err());
        assert!(PwlqParams::new(4, 1.0, vec![0.5, 0.3]).is_err());
        assert!(PwlqParams::new(4, 1.0, vec![]).is_err());
        assert!(PwlqParams::single(4, -1.0, 0.5).is_err());
    }

    #[test]
    fn grid_points_roundtrip() {
        let p = PwlqParams::single(4, 2.0, 0.7).unwrap();
        for region in 0..2 {
            for mag in 0..8 {
                for neg in [false, true] {
                    let v = p.decode(region, neg, mag);
                    assert!((p.reconstruct(v) - v).abs() < 1e-12, "{region} {mag} {neg}");
                }
            }
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::new(vec![2, 2], vec![0.3, 0.8, -0.8, 0.0]).unwrap();
        let q = quantize_pwlq(&t, &params_3bit()).unwrap();
        assert_eq!(q.codes(), &[2, 2, -2, 0]);
        let d = dequantize_pwlq(&q).unwrap();
        assert!((d.data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((d.data()[2] + 5.0 / 6.0).abs() < 1e-7);
        assert!(dequantize_pwlq(&quantize_uniform(&t, &QuantParams::symmetric(4, 1.0).unwrap()).unwrap()).is_err());
    }

    #[test]
    fn all_center_matches_narrow_uniform() {
        // Every |r| < p: PWLQ is (b-1)-bit uniform on [0, p] plus a sign.
        let b = 4;
        let p = PwlqParams::single(b, 2.0, 0.6).unwrap();
        let center = QuantParams::new(b - 1, 0.0, 0.6, Signedness::AsymmetricUnsigned).unwrap();
        for i in 0..=1000 {
            let r = -0.599 + 1.198 * i as f64 / 1000.0;
            let expect = r.signum() * center.reconstruct(r.abs());
            assert!((p.reconstruct(r) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn level_count_matches_wider_uniform() {
        // 2 signs x (K+1) regions x 2^(b-1) magnitudes = 2^(b+1) codes for K = 1.
        for b in 2..=8u8 {
            let p = PwlqParams::single(b, 1.0, 0.3).unwrap();
            let codes = 2 * p.regions.len() * (1usize << (b - 1));
            assert_eq!(codes, 1usize << (b + 1));
        }
    }

    #[test]
    fn empirical_mse_of_grid_points_is_zero() {
        // Steps 0.25 (center) and 0.75 (tail) are exact in binary.
        let p = PwlqParams::single(3, 3.0, 0.75).unwrap();
        let values = [0.0f32, 0.25, -0.5, 0.75, -0.75, 1.5, -2.25, 3.0];
        assert_eq!(empirical_mse(&values, &Scheme::Pwlq(p)).unwrap(), 0.0);
    }

    #[test]
    fn fast_path_matches_general_path() {
        let mut p = PwlqParams::single(4, 3.0, 1.1).unwrap();
        let values: Vec<f32> = (0..2000).map(|i| ((i as f32) * 0.37).sin() * 3.2).collect();
        let fast = empirical_mse(&values, &Scheme::Pwlq(p.clone())).unwrap();
        p.shift = 1e-300;
        let slow = empirical_mse(&values, &Scheme::Pwlq(p)).unwrap();
        assert!((fast - slow).abs() <= 1e-15 * fast.max(1e-300));
    }
}

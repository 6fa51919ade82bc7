//! Affine uniform quantizer and its expected squared error.
//!
//! `r̂ = s · q + z` with `q = sat(round_half_even((clamp(r; r_l, r_u) - z) / s))`
//! and `s = (r_u - r_l) / (2^b - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantized::{param_ids_for, Encoding, Granularity, QuantizedTensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    /// `z = 0`, codes in `[-2^(b-1), 2^(b-1) - 1]`.
    SymmetricSigned,
    /// `z = r_l`, codes in `[0, 2^b - 1]`.
    AsymmetricUnsigned,
}

/// Parameters of one uniform affine quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bit_width: u8,
    pub range_low: f64,
    pub range_high: f64,
    pub scale: f64,
    pub offset: f64,
    pub signedness: Signedness,
}

/// Largest bit width any code container in this crate can hold.
pub const MAX_BIT_WIDTH: u8 = 16;

/// Uniform-residual error constant `C(b) = 1 / (12 (2^b - 1)^2)`.
pub fn error_constant(bit_width: u8) -> f64 {
    let levels = (1u64 << bit_width) as f64 - 1.0;
    1.0 / (12.0 * levels * levels)
}

impl QuantParams {
    /// Builds the quantizer for `[range_low, range_high]` at `bit_width` bits.
    ///
    /// Bit width 1 is accepted for the pieces of a 2-bit PWLQ quantizer.
    pub fn new(bit_width: u8, range_low: f64, range_high: f64, signedness: Signedness) -> Result<Self> {
        if !(1..=MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(invalid(format!("bit width must be in [1, {MAX_BIT_WIDTH}], got {bit_width}")));
        }
        if !(range_low.is_finite() && range_high.is_finite()) || range_low >= range_high {
            return Err(invalid(format!(
                "quantization range must satisfy r_l < r_u, got [{range_low}, {range_high}]"
            )));
        }
        let levels = (1u64 << bit_width) as f64;
        let scale = (range_high - range_low) / (levels - 1.0);
        let offset = match signedness {
            Signedness::SymmetricSigned => 0.0,
            Signedness::AsymmetricUnsigned => range_low,
        };
        Ok(Self { bit_width, range_low, range_high, scale, offset, signedness })
    }

    /// Symmetric signed quantizer over `[-absmax, absmax]`.
    ///
    /// An all-zero input (`absmax == 0`) gets the decodable degenerate form
    /// `s = 1`, `z = 0`, which sends every value to code 0.
    pub fn symmetric(bit_width: u8, absmax: f64) -> Result<Self> {
        if absmax == 0.0 {
            return Self::degenerate(bit_width, 0.0, Signedness::SymmetricSigned);
        }
        Self::new(bit_width, -absmax, absmax, Signedness::SymmetricSigned)
    }

    /// Asymmetric unsigned quantizer over `[low, high]`; `low == high`
    /// degenerates to `s = 1`, `z = low`.
    pub fn asymmetric(bit_width: u8, low: f64, high: f64) -> Result<Self> {
        if low == high {
            return Self::degenerate(bit_width, low, Signedness::AsymmetricUnsigned);
        }
        Self::new(bit_width, low, high, Signedness::AsymmetricUnsigned)
    }

    fn degenerate(bit_width: u8, at: f64, signedness: Signedness) -> Result<Self> {
        if !(1..=MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(invalid(format!("bit width must be in [1, {MAX_BIT_WIDTH}], got {bit_width}")));
        }
        if !at.is_finite() {
            return Err(invalid("degenerate range must be finite"));
        }
        let offset = match signedness {
            Signedness::SymmetricSigned => 0.0,
            Signedness::AsymmetricUnsigned => at,
        };
        Ok(Self { bit_width, range_low: at, range_high: at, scale: 1.0, offset, signedness })
    }

    pub fn is_degenerate(&self) -> bool {
        self.range_low == self.range_high
    }

    /// Inclusive integer code domain.
    pub fn code_range(&self) -> (i32, i32) {
        let b = u32::from(self.bit_width);
        match self.signedness {
            Signedness::SymmetricSigned => (-(1i32 << (b - 1)), (1i32 << (b - 1)) - 1),
            Signedness::AsymmetricUnsigned => (0, (1i32 << b) - 1),
        }
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.max(self.range_low).min(self.range_high)
    }

    pub fn quantize(&self, r: f64) -> i32 {
        let (lo, hi) = self.code_range();
        let q = ((self.clamp(r) - self.offset) / self.scale).round_ties_even();
        q.clamp(f64::from(lo), f64::from(hi)) as i32
    }

    pub fn dequantize(&self, code: i32) -> f64 {
        self.scale * f64::from(code) + self.offset
    }

    pub fn contains_code(&self, code: i32) -> bool {
        let (lo, hi) = self.code_range();
        (lo..=hi).contains(&code)
    }

    /// `r̂` for a real input.
    pub fn reconstruct(&self, r: f64) -> f64 {
        self.dequantize(self.quantize(r))
    }
}

/// Per-layer uniform quantization of a whole tensor.
pub fn quantize_uniform(t: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    quantize_uniform_with(t, Granularity::PerLayer, t.channel_axis(), vec![*params])
}

/// Per-channel uniform quantization, one parameter set per channel along `axis`.
pub fn quantize_uniform_per_channel(t: &Tensor, axis: usize, params: Vec<QuantParams>) -> Result<QuantizedTensor> {
    quantize_uniform_with(t, Granularity::PerChannel, axis, params)
}

fn quantize_uniform_with(
    t: &Tensor,
    granularity: Granularity,
    axis: usize,
    params: Vec<QuantParams>,
) -> Result<QuantizedTensor> {
    let ids = param_ids_for(t, granularity, axis)?;
    if granularity == Granularity::PerChannel && params.len() != t.shape()[axis] {
        return Err(Error::ShapeMismatch(format!(
            "{} channels but {} parameter sets",
            t.shape()[axis],
            params.len()
        )));
    }
    let codes = t.data().iter().zip(&ids).map(|(&r, &pid)| params[pid].quantize(f64::from(r))).collect();
    QuantizedTensor::new(t.shape().to_vec(), axis, granularity, codes, Encoding::Uniform { params })
}

/// Inverse of [`quantize_uniform`]: element-wise `s · code + z`.
pub fn dequantize_uniform(q: &QuantizedTensor) -> Result<Tensor> {
    match q.encoding() {
        Encoding::Uniform { .. } => q.dequantize(),
        Encoding::Pwlq { .. } => Err(invalid("expected a uniformly quantized tensor")),
    }
}

/// Expected squared error `C(b) Δ²` of `b`-bit uniform quantization on
/// `[range_low, range_high]` under the uniform-residual model.
pub fn expected_uniform_error(bit_width: u8, range_low: f64, range_high: f64) -> Result<f64> {
    if bit_width < 2 {
        return Err(invalid(format!("bit width must be at least 2, got {bit_width}")));
    }
    if !(range_low < range_high) {
        return Err(invalid(format!("invalid range [{range_low}, {range_high}]")));
    }
    let delta = range_high - range_low;
    Ok(error_constant(bit_width) * delta * delta)
}

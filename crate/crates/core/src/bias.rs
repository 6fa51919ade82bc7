//! Data-free bias correction of quantized weights.
//!
//! Quantization shifts the per-channel mean of the weights and inflates
//! their spread. Both are measured against the original tensor and folded
//! into the affine decode parameters, so the integer codes never change:
//!
//! `Ŵ' = ξ (Ŵ - μ_e) + (1 - ξ) mean(W)`, with `μ_e = mean(Ŵ - W)` and
//! `ξ = std(W) / std(Ŵ)`.
//!
//! The `(1 - ξ) mean(W)` term keeps the corrected mean equal to `mean(W)`
//! when `ξ ≠ 1`; with `ξ = 1` it vanishes and the map is a pure mean shift.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pwlq::PwlqParams;
use crate::quantized::{Encoding, QuantizedTensor};
use crate::tensor::Tensor;
use crate::uniform::QuantParams;

/// Standard deviations below this are treated as a constant channel (`ξ = 1`).
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    MeanOnly,
    MeanAndVariance,
}

impl std::str::FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-only" => Ok(Self::MeanOnly),
            "mean-and-variance" => Ok(Self::MeanAndVariance),
            other => Err(invalid(format!("unknown bias-correction mode '{other}'"))),
        }
    }
}

/// Correction terms of one channel (or of the whole layer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBias {
    /// `μ_e = mean(Ŵ - W)`.
    pub mean_error: f64,
    /// `ξ = std(W) / std(Ŵ)`; 1 in mean-only mode and for constant channels.
    pub scale_ratio: f64,
    /// `mean(W)`, the target mean of the corrected decode.
    pub original_mean: f64,
}

impl ChannelBias {
    pub const IDENTITY: Self = Self { mean_error: 0.0, scale_ratio: 1.0, original_mean: 0.0 };

    fn validate(&self) -> Result<()> {
        if !(self.mean_error.is_finite() && self.original_mean.is_finite()) {
            return Err(invalid("bias-correction terms must be finite"));
        }
        if !(self.scale_ratio.is_finite() && self.scale_ratio > 0.0) {
            return Err(invalid(format!("scale ratio must be positive and finite, got {}", self.scale_ratio)));
        }
        Ok(())
    }

    /// Corrected value of a decoded weight.
    pub fn correct(&self, v: f64) -> f64 {
        self.scale_ratio * (v - self.mean_error) + (1.0 - self.scale_ratio) * self.original_mean
    }

    fn folded_shift(&self, shift: f64) -> f64 {
        self.correct(shift)
    }

    /// Folds the correction into a uniform quantizer's decode parameters.
    ///
    /// The result is meant for decoding existing codes; its range fields
    /// still describe the original clipping range.
    pub fn apply_uniform(&self, params: &QuantParams) -> Result<QuantParams> {
        self.validate()?;
        Ok(QuantParams {
            scale: self.scale_ratio * params.scale,
            offset: self.folded_shift(params.offset),
            ..*params
        })
    }

    /// Folds the correction into every region of a PWLQ encoding; the
    /// channel-level part lands in the sign-independent shift.
    pub fn apply_pwlq(&self, params: &PwlqParams) -> Result<PwlqParams> {
        self.validate()?;
        let xi = self.scale_ratio;
        Ok(PwlqParams {
            regions: params
                .regions
                .iter()
                .map(|q| QuantParams { scale: xi * q.scale, offset: xi * q.offset, ..*q })
                .collect(),
            shift: self.folded_shift(params.shift),
            ..params.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrection {
    pub mode: CorrectionMode,
    /// One entry per parameter set (a single entry for per-layer tensors).
    pub channels: Vec<ChannelBias>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn measure_group(original: &[f64], decoded: &[f64], mode: CorrectionMode) -> ChannelBias {
    let (w_mean, w_std) = mean_std(original.iter().copied());
    let (q_mean, q_std) = mean_std(decoded.iter().copied());
    let scale_ratio = match mode {
        CorrectionMode::MeanOnly => 1.0,
        CorrectionMode::MeanAndVariance if q_std < DEGENERATE_STD || w_std < DEGENERATE_STD => 1.0,
        CorrectionMode::MeanAndVariance => w_std / q_std,
    };
    ChannelBias { mean_error: q_mean - w_mean, scale_ratio, original_mean: w_mean }
}

fn measure_grouped(
    original: &[f32],
    decoded: &[f64],
    ids: &[usize],
    groups: usize,
    mode: CorrectionMode,
) -> Vec<ChannelBias> {
    let mut orig_groups = vec![Vec::new(); groups];
    let mut deq_groups = vec![Vec::new(); groups];
    for ((&w, &q), &g) in original.iter().zip(decoded).zip(ids) {
        orig_groups[g].push(f64::from(w));
        deq_groups[g].push(q);
    }
    orig_groups.iter().zip(&deq_groups).map(|(o, d)| measure_group(o, d, mode)).collect()
}

/// Measures correction terms per channel along `axis`, or for the whole
/// tensor when `axis` is `None`.
pub fn measure_bias(
    original: &Tensor,
    dequantized: &Tensor,
    axis: Option<usize>,
    mode: CorrectionMode,
) -> Result<BiasCorrection> {
    if original.shape() != dequantized.shape() {
        return Err(Error::ShapeMismatch(format!(
            "original {:?} vs dequantized {:?}",
            original.shape(),
            dequantized.shape()
        )));
    }
    let decoded: Vec<f64> = dequantized.data().iter().map(|&v| f64::from(v)).collect();
    let (ids, groups) = match axis {
        None => (vec![0; original.len()], 1),
        Some(a) => (original.channel_ids(a)?, original.shape()[a]),
    };
    Ok(BiasCorrection { mode, channels: measure_grouped(original.data(), &decoded, &ids, groups, mode) })
}

/// Measures the bias of `q` against `original` (using exact `f64` decodes)
/// and returns the tensor with corrected decode parameters.
pub fn correct_tensor(
    original: &Tensor,
    q: &QuantizedTensor,
    mode: CorrectionMode,
) -> Result<(QuantizedTensor, BiasCorrection)> {
    if original.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!("original {:?} vs quantized {:?}", original.shape(), q.shape())));
    }
    let decoded = q.reconstruct();
    let channels = measure_grouped(original.data(), &decoded, &q.param_ids(), q.param_count(), mode);
    let corrected = match q.encoding() {
        Encoding::Uniform { params } => q.with_uniform_params(
            params.iter().zip(&channels).map(|(p, c)| c.apply_uniform(p)).collect::<Result<_>>()?,
        )?,
        Encoding::Pwlq { params, .. } => q.with_pwlq_params(
            params.iter().zip(&channels).map(|(p, c)| c.apply_pwlq(p)).collect::<Result<_>>()?,
        )?,
    };
    Ok((corrected, BiasCorrection { mode, channels }))
}

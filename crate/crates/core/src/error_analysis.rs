//! Closed-form expected squared error of PWLQ under a truncated symmetric
//! model, its derivatives in the breakpoint, and the comparison bound
//! against uniform quantization.
//!
//! With `C = C(b-1)`, `F̂` the truncated CDF and `f̂` its density:
//!
//! ```text
//! E(p)   = C [ (m-p)^2 + m(2p-m)(2F̂(p)-1) ]
//! E'(p)  = 2C [ p - 2m + 2mF̂(p) + m(2p-m) f̂(p) ]
//! E''(p) = 2C [ 1 + 4m f̂(p) + m(2p-m) f̂'(p) ]
//! ```
//!
//! At a stationary point `2mF̂(p*) = 2m - p* + m(m-2p*) f̂(p*)`, which turns
//! the error into `C [ -p*^2 + m p* - m(m-2p*)^2 f̂(p*) ]`.

use serde::{Deserialize, Serialize};

use crate::distribution::DistributionModel;
use crate::error::{invalid, Error, Result};
use crate::uniform::error_constant;

/// Largest tolerated stationarity residual for the optimal-point formula.
pub const STATIONARITY_TOLERANCE: f64 = 1e-6;

fn check_bits(bit_width: u8) -> Result<()> {
    if !(2..=16).contains(&bit_width) {
        return Err(invalid(format!("bit width must be in [2, 16], got {bit_width}")));
    }
    Ok(())
}

fn check_open_range(d: &DistributionModel, p: f64) -> Result<()> {
    if !(p > 0.0 && p < d.bound()) {
        return Err(invalid(format!("breakpoint {p} outside (0, {})", d.bound())));
    }
    Ok(())
}

/// Expected PWLQ error in its simplified single-expression form.
pub fn expected_pwlq_error(d: &DistributionModel, bit_width: u8, p: f64) -> Result<f64> {
    check_bits(bit_width)?;
    check_open_range(d, p)?;
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    let central = 2.0 * d.truncated_cdf(p) - 1.0;
    Ok(c * ((m - p).powi(2) + m * (2.0 * p - m) * central))
}

/// Expected PWLQ error summed piece by piece: tail width squared times tail
/// mass plus center width squared times center mass.
pub fn expected_pwlq_error_by_pieces(d: &DistributionModel, bit_width: u8, p: f64) -> Result<f64> {
    check_bits(bit_width)?;
    check_open_range(d, p)?;
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    let (lo, hi) = (d.truncated_cdf(-p), d.truncated_cdf(p));
    Ok(c * ((m - p).powi(2) * (lo + 1.0 - hi) + p * p * (hi - lo)))
}

/// First and second derivative of [`expected_pwlq_error`] in `p`, for
/// `p ∈ (0, m/2)`.
pub fn pwlq_error_derivatives(d: &DistributionModel, bit_width: u8, p: f64) -> Result<(f64, f64)> {
    check_bits(bit_width)?;
    let m = d.bound();
    if !(p > 0.0 && p < 0.5 * m) {
        return Err(invalid(format!("breakpoint {p} outside (0, {})", 0.5 * m)));
    }
    Ok((first_derivative(d, bit_width, p), second_derivative(d, bit_width, p)))
}

pub(crate) fn first_derivative(d: &DistributionModel, bit_width: u8, p: f64) -> f64 {
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    2.0 * c * (p - 2.0 * m + 2.0 * m * d.truncated_cdf(p) + m * (2.0 * p - m) * d.truncated_pdf(p))
}

fn second_derivative(d: &DistributionModel, bit_width: u8, p: f64) -> f64 {
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    2.0 * c
        * (1.0 + 4.0 * m * d.truncated_pdf(p) + m * (2.0 * p - m) * d.truncated_pdf_derivative(p))
}

/// `2mF̂(p) - (2m - p + m(m-2p) f̂(p))`; zero exactly at a stationary point.
pub fn stationarity_residual(d: &DistributionModel, p: f64) -> f64 {
    let m = d.bound();
    2.0 * m * d.truncated_cdf(p) - (2.0 * m - p + m * (m - 2.0 * p) * d.truncated_pdf(p))
}

/// Error at an optimal breakpoint via the stationarity-substituted formula.
///
/// Fails with [`Error::Precondition`] when `p_star` is not stationary to
/// within [`STATIONARITY_TOLERANCE`].
pub fn optimal_error_closed_form(d: &DistributionModel, bit_width: u8, p_star: f64) -> Result<f64> {
    check_bits(bit_width)?;
    check_open_range(d, p_star)?;
    let residual = stationarity_residual(d, p_star);
    if residual.abs() > STATIONARITY_TOLERANCE {
        return Err(Error::Precondition(format!(
            "breakpoint {p_star} is not stationary (residual {residual:e})"
        )));
    }
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    Ok(c * (-p_star * p_star + m * p_star - m * (m - 2.0 * p_star).powi(2) * d.truncated_pdf(p_star)))
}

/// `C(b-1) / (16 C(b)) = ((2^b - 1) / (2^(b-1) - 1))^2 / 16`, from exact integers.
pub fn bound_ratio(bit_width: u8) -> Result<f64> {
    check_bits(bit_width)?;
    let num = (1u64 << bit_width) - 1;
    let den = (1u64 << (bit_width - 1)) - 1;
    Ok((num * num) as f64 / (16 * den * den) as f64)
}

/// Expected `b`-bit uniform error on `[-m, m]`: `4 C(b) m^2`.
pub fn expected_uniform_symmetric_error(bit_width: u8, bound: f64) -> Result<f64> {
    crate::uniform::expected_uniform_error(bit_width, -bound, bound)
}

fn check_breakpoints(d: &DistributionModel, breakpoints: &[f64]) -> Result<()> {
    if breakpoints.is_empty() {
        return Err(invalid("at least one breakpoint is required"));
    }
    let mut prev = 0.0;
    for &p in breakpoints {
        if !(p > prev && p < d.bound()) {
            return Err(invalid(format!(
                "breakpoints must be strictly increasing inside (0, {}), got {breakpoints:?}",
                d.bound()
            )));
        }
        prev = p;
    }
    Ok(())
}

fn edges(d: &DistributionModel, breakpoints: &[f64]) -> Vec<f64> {
    std::iter::once(0.0).chain(breakpoints.iter().copied()).chain(std::iter::once(d.bound())).collect()
}

/// Expected error for `K` breakpoints: every region contributes its width
/// squared times its probability mass, scaled by `C(b-1)`.
pub fn expected_multi_error(d: &DistributionModel, bit_width: u8, breakpoints: &[f64]) -> Result<f64> {
    check_bits(bit_width)?;
    check_breakpoints(d, breakpoints)?;
    let c = error_constant(bit_width - 1);
    let e = edges(d, breakpoints);
    let sum: f64 = e
        .windows(2)
        .map(|w| (w[1] - w[0]).powi(2) * 2.0 * (d.truncated_cdf(w[1]) - d.truncated_cdf(w[0])))
        .sum();
    Ok(c * sum)
}

/// Gradient of [`expected_multi_error`] with respect to each breakpoint.
pub fn multi_error_gradient(d: &DistributionModel, bit_width: u8, breakpoints: &[f64]) -> Result<Vec<f64>> {
    check_bits(bit_width)?;
    check_breakpoints(d, breakpoints)?;
    let c = error_constant(bit_width - 1);
    let e = edges(d, breakpoints);
    Ok((1..e.len() - 1)
        .map(|j| {
            let (lo, p, hi) = (e[j - 1], e[j], e[j + 1]);
            let f = d.truncated_pdf(p);
            let fp = d.truncated_cdf(p);
            let inner = 4.0 * (p - lo) * (fp - d.truncated_cdf(lo)) + 2.0 * (p - lo).powi(2) * f;
            let outer = 4.0 * (hi - p) * (d.truncated_cdf(hi) - fp) + 2.0 * (hi - p).powi(2) * f;
            c * (inner - outer)
        })
        .collect())
}

/// Analytic and measured error figures for one channel or layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub bit_width: u8,
    pub bound: f64,
    pub breakpoint: Option<f64>,
    pub expected_error: Option<f64>,
    pub first_derivative: Option<f64>,
    pub second_derivative: Option<f64>,
    pub empirical_mse: f64,
    pub uniform_expected_error: f64,
    pub bound_ratio: f64,
}

impl ErrorReport {
    /// Report for a single-breakpoint quantizer with model `d`. Derivatives
    /// are omitted when `p` lies outside `(0, m/2)`.
    pub fn pwlq(d: &DistributionModel, bit_width: u8, p: f64, empirical_mse: f64) -> Result<Self> {
        let derivatives = pwlq_error_derivatives(d, bit_width, p).ok();
        Ok(Self {
            bit_width,
            bound: d.bound(),
            breakpoint: Some(p),
            expected_error: Some(expected_pwlq_error(d, bit_width, p)?),
            first_derivative: derivatives.map(|v| v.0),
            second_derivative: derivatives.map(|v| v.1),
            empirical_mse,
            uniform_expected_error: expected_uniform_symmetric_error(bit_width, d.bound())?,
            bound_ratio: bound_ratio(bit_width)?,
        })
    }

    /// Report for a uniform quantizer on `[-bound, bound]`.
    pub fn uniform(bit_width: u8, bound: f64, empirical_mse: f64) -> Result<Self> {
        Ok(Self {
            bit_width,
            bound,
            breakpoint: None,
            expected_error: None,
            first_derivative: None,
            second_derivative: None,
            empirical_mse,
            uniform_expected_error: expected_uniform_symmetric_error(bit_width, bound)?,
            bound_ratio: bound_ratio(bit_width)?,
        })
    }
}

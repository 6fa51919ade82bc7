//! Functional model of the integer inner-product datapath.
//!
//! Activations decode as `X̂ = s_x X_q + z_x`. Uniform weights are symmetric
//! (`Ŵ = s_w W_q`), so
//!
//! `⟨X̂, Ŵ⟩ = C0 · Σ X_q W_q + C1`, with `C0 = s_x s_w`, `C1 = z_x s_w Σ W_q`.
//!
//! A PWLQ weight in region `j` with sign `σ ∈ {±1}` and magnitude code `q`
//! decodes as `σ (s_j q + z_j)`; its stored signed code is `c = σ q`. Per
//! region the contribution expands to
//!
//! `s_x s_j Σ X_q c + s_x z_j Σ σ X_q + z_x (s_j Σ c + z_j Σ σ)`.
//!
//! The first two sums run on integer accumulators (the second only for tail
//! regions, where `z_j ≠ 0`); the last term depends on the weights alone and
//! is folded offline. With one breakpoint this gives three accumulators and
//! five floating-point constants:
//!
//! - `C2 = s_x s_1`, `C3 = z_x s_1 Σ_{R1} c`
//! - `C4 = s_x s_2`, `C5 = s_x p`, `C6 = z_x (s_2 Σ_{R2} c + p Σ_{R2} σ)`.
//!
//! Integer accumulators are checked against a configurable width so that
//! overflow is reported instead of wrapping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pwlq::PwlqParams;
use crate::quantized::{region_index_bits, Encoding, QuantizedTensor};
use crate::uniform::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatapathConfig {
    /// Signed accumulator width in bits, `2..=64`.
    pub accumulator_bits: u32,
}

impl Default for DatapathConfig {
    fn default() -> Self {
        Self { accumulator_bits: 64 }
    }
}

impl DatapathConfig {
    fn validate(&self) -> Result<()> {
        if !(2..=64).contains(&self.accumulator_bits) {
            return Err(invalid(format!("accumulator width must be in [2, 64], got {}", self.accumulator_bits)));
        }
        Ok(())
    }
}

/// Checked signed accumulator of a fixed width.
#[derive(Debug, Clone, Copy)]
struct Accumulator {
    value: i64,
    bits: u32,
    min: i64,
    max: i64,
}

impl Accumulator {
    fn new(bits: u32) -> Self {
        if bits == 64 {
            Self { value: 0, bits, min: i64::MIN, max: i64::MAX }
        } else {
            Self { value: 0, bits, min: -(1i64 << (bits - 1)), max: (1i64 << (bits - 1)) - 1 }
        }
    }

    fn add(&mut self, v: i64) -> Result<()> {
        match self.value.checked_add(v) {
            Some(n) if (self.min..=self.max).contains(&n) => {
                self.value = n;
                Ok(())
            }
            _ => Err(Error::Overflow(format!(
                "{}-bit accumulator overflowed adding {v} to {}",
                self.bits, self.value
            ))),
        }
    }
}

/// Operation counts and final accumulator state of one inner product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatapathTrace {
    pub length: usize,
    /// Integer multiply-accumulates routed to each region's product accumulator.
    pub macs_per_region: Vec<u64>,
    /// Additions into activation-sum accumulators.
    pub activation_additions: u64,
    pub fp_multiplies: u64,
    pub fp_additions: u64,
    pub fp_constants: usize,
    /// Final product-accumulator values, one per region.
    pub product_accumulators: Vec<i64>,
    /// Final activation-sum accumulator values, one per tail region.
    pub activation_accumulators: Vec<i64>,
    pub region_occupancy: Vec<f64>,
    /// Stored bits per weight (code plus region index).
    pub weight_storage_bits: u32,
}

impl DatapathTrace {
    pub fn total_macs(&self) -> u64 {
        self.macs_per_region.iter().sum()
    }

    pub fn accumulator_count(&self) -> usize {
        self.product_accumulators.len() + self.activation_accumulators.len()
    }
}

fn check_activation(act: &QuantParams) -> Result<()> {
    if !(act.scale.is_finite() && act.offset.is_finite()) {
        return Err(invalid("activation scale and offset must be finite"));
    }
    Ok(())
}

fn check_codes(codes: &[i32], params: &QuantParams, what: &str) -> Result<()> {
    if let Some((i, c)) = codes.iter().enumerate().find(|(_, &c)| !params.contains_code(c)) {
        return Err(Error::Data(format!("{what} code {c} at position {i} outside its domain")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformConstants {
    pub c0: f64,
    pub c1: f64,
}

/// Offline-prepared uniform datapath for one weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformDatapath {
    pub activation: QuantParams,
    pub weight: QuantParams,
    pub constants: UniformConstants,
}

impl UniformDatapath {
    pub fn new(activation: QuantParams, weight: QuantParams, weight_codes: &[i32]) -> Result<Self> {
        check_activation(&activation)?;
        if weight.offset != 0.0 {
            return Err(Error::Precondition(format!(
                "uniform datapath needs symmetric weights (offset 0), got offset {}",
                weight.offset
            )));
        }
        check_codes(weight_codes, &weight, "weight")?;
        let code_sum: i64 = weight_codes.iter().map(|&c| i64::from(c)).sum();
        let constants = UniformConstants {
            c0: activation.scale * weight.scale,
            c1: activation.offset * weight.scale * code_sum as f64,
        };
        Ok(Self { activation, weight, constants })
    }

    pub fn inner_product(&self, xq: &[i32], wq: &[i32], cfg: &DatapathConfig) -> Result<(f64, DatapathTrace)> {
        cfg.validate()?;
        if xq.len() != wq.len() {
            return Err(Error::ShapeMismatch(format!("{} activations vs {} weights", xq.len(), wq.len())));
        }
        check_codes(xq, &self.activation, "activation")?;
        check_codes(wq, &self.weight, "weight")?;
        let mut acc = Accumulator::new(cfg.accumulator_bits);
        for (&x, &w) in xq.iter().zip(wq) {
            acc.add(i64::from(x) * i64::from(w))?;
        }
        let value = self.constants.c0 * acc.value as f64 + self.constants.c1;
        let trace = DatapathTrace {
            length: xq.len(),
            macs_per_region: vec![xq.len() as u64],
            activation_additions: 0,
            fp_multiplies: 1,
            fp_additions: 1,
            fp_constants: 2,
            product_accumulators: vec![acc.value],
            activation_accumulators: vec![],
            region_occupancy: vec![1.0],
            weight_storage_bits: u32::from(self.weight.bit_width),
        };
        Ok((value, trace))
    }
}

/// Encoded PWLQ weight vector: signed codes plus region index and sign bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PwlqWeights {
    pub codes: Vec<i32>,
    pub regions: Vec<u8>,
    pub negative: Vec<bool>,
}

impl PwlqWeights {
    pub fn encode(params: &PwlqParams, values: &[f64]) -> Self {
        let mut w = Self { codes: Vec::new(), regions: Vec::new(), negative: Vec::new() };
        for &v in values {
            let c = params.encode(v);
            w.codes.push(c.signed());
            w.regions.push(c.region);
            w.negative.push(c.negative);
        }
        w
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn validate(&self, params: &PwlqParams) -> Result<()> {
        if self.regions.len() != self.codes.len() || self.negative.len() != self.codes.len() {
            return Err(Error::Data("weights are missing region or sign bits".into()));
        }
        for (i, ((&c, &r), &neg)) in self.codes.iter().zip(&self.regions).zip(&self.negative).enumerate() {
            let region = params
                .regions
                .get(usize::from(r))
                .ok_or_else(|| Error::Data(format!("region {r} at position {i} does not exist")))?;
            if (c < 0 && !neg) || (c > 0 && neg) || !region.contains_code(c.abs()) {
                return Err(Error::Data(format!("weight code {c} at position {i} is inconsistent")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConstants {
    /// `s_x s_j`, multiplies the product accumulator.
    pub product: f64,
    /// `s_x z_j`, multiplies the activation-sum accumulator (zero for the center).
    pub activation: f64,
    /// `z_x (s_j Σ c + z_j Σ σ)`.
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlqConstants {
    pub regions: Vec<RegionConstants>,
}

/// The five constants of the single-breakpoint datapath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleBreakpointConstants {
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
}

impl PwlqConstants {
    /// Floating-point constants actually needed: the center region has no
    /// activation term.
    pub fn fp_constant_count(&self) -> usize {
        2 + 3 * (self.regions.len() - 1)
    }

    pub fn single_breakpoint(&self) -> Option<SingleBreakpointConstants> {
        match self.regions.as_slice() {
            [r1, r2] => Some(SingleBreakpointConstants {
                c2: r1.product,
                c3: r1.constant,
                c4: r2.product,
                c5: r2.activation,
                c6: r2.constant,
            }),
            _ => None,
        }
    }
}

/// Incremental accumulation of the weight-only sums behind the PWLQ
/// constants; supports adding and retracting weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantsBuilder {
    code_sums: Vec<i64>,
    sign_sums: Vec<i64>,
}

impl ConstantsBuilder {
    pub fn new(regions: usize) -> Self {
        Self { code_sums: vec![0; regions], sign_sums: vec![0; regions] }
    }

    pub fn push(&mut self, region: u8, negative: bool, code: i32) {
        let r = usize::from(region);
        self.code_sums[r] += i64::from(code);
        self.sign_sums[r] += if negative { -1 } else { 1 };
    }

    pub fn retract(&mut self, region: u8, negative: bool, code: i32) {
        let r = usize::from(region);
        self.code_sums[r] -= i64::from(code);
        self.sign_sums[r] -= if negative { -1 } else { 1 };
    }

    pub fn finish(&self, activation: &QuantParams, params: &PwlqParams) -> PwlqConstants {
        let (sx, zx) = (activation.scale, activation.offset);
        PwlqConstants {
            regions: params
                .regions
                .iter()
                .enumerate()
                .map(|(j, q)| RegionConstants {
                    product: sx * q.scale,
                    activation: sx * q.offset,
                    constant: zx * (q.scale * self.code_sums[j] as f64 + q.offset * self.sign_sums[j] as f64),
                })
                .collect(),
        }
    }
}

/// Offline-prepared PWLQ datapath for one weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlqDatapath {
    pub activation: QuantParams,
    pub weight: PwlqParams,
    pub constants: PwlqConstants,
}

impl PwlqDatapath {
    pub fn new(activation: QuantParams, weight: PwlqParams, weights: &PwlqWeights) -> Result<Self> {
        check_activation(&activation)?;
        if weight.shift != 0.0 {
            return Err(Error::Precondition(format!(
                "PWLQ datapath needs unshifted weights, got shift {}",
                weight.shift
            )));
        }
        weights.validate(&weight)?;
        let mut builder = ConstantsBuilder::new(weight.regions.len());
        for ((&c, &r), &neg) in weights.codes.iter().zip(&weights.regions).zip(&weights.negative) {
            builder.push(r, neg, c);
        }
        let constants = builder.finish(&activation, &weight);
        Ok(Self { activation, weight, constants })
    }

    pub fn inner_product(&self, xq: &[i32], w: &PwlqWeights, cfg: &DatapathConfig) -> Result<(f64, DatapathTrace)> {
        cfg.validate()?;
        if xq.len() != w.len() {
            return Err(Error::ShapeMismatch(format!("{} activations vs {} weights", xq.len(), w.len())));
        }
        check_codes(xq, &self.activation, "activation")?;
        w.validate(&self.weight)?;
        let regions = self.weight.regions.len();
        let mut products = vec![Accumulator::new(cfg.accumulator_bits); regions];
        // Index 0 is unused: the center region has a zero offset.
        let mut act_sums = vec![Accumulator::new(cfg.accumulator_bits); regions];
        let mut macs = vec![0u64; regions];
        let mut act_adds = 0u64;
        for ((&x, &c), (&r, &neg)) in xq.iter().zip(&w.codes).zip(w.regions.iter().zip(&w.negative)) {
            let r = usize::from(r);
            products[r].add(i64::from(x) * i64::from(c))?;
            macs[r] += 1;
            if r > 0 {
                act_sums[r].add(if neg { -i64::from(x) } else { i64::from(x) })?;
                act_adds += 1;
            }
        }
        let mut value = 0.0;
        for (j, k) in self.constants.regions.iter().enumerate() {
            value += k.product * products[j].value as f64;
            if j > 0 {
                value += k.activation * act_sums[j].value as f64;
            }
            value += k.constant;
        }
        let n = xq.len();
        let tails = regions as u64 - 1;
        let trace = DatapathTrace {
            length: n,
            region_occupancy: macs.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect(),
            macs_per_region: macs,
            activation_additions: act_adds,
            fp_multiplies: regions as u64 + tails,
            fp_additions: 2 * regions as u64 + tails - 1,
            fp_constants: self.constants.fp_constant_count(),
            product_accumulators: products.iter().map(|a| a.value).collect(),
            activation_accumulators: act_sums[1..].iter().map(|a| a.value).collect(),
            weight_storage_bits: u32::from(self.weight.bit_width) + u32::from(region_index_bits(regions)),
        };
        Ok((value, trace))
    }
}

/// Floating-point reference dot product with compensated summation.
pub fn reference_dot(x: &[f64], w: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in x.iter().zip(w) {
        let v = a * b;
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Cost of the PWLQ path relative to the uniform path on the same workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub uniform_macs: u64,
    pub pwlq_macs: u64,
    pub macs_equal: bool,
    pub uniform_accumulators: usize,
    pub pwlq_accumulators: usize,
    pub extra_accumulators: usize,
    pub extra_storage_bits_per_weight: i64,
    pub uniform_fp_constants: usize,
    pub pwlq_fp_constants: usize,
    pub extra_integer_additions: u64,
}

pub fn overhead_report(uniform: &DatapathTrace, pwlq: &DatapathTrace) -> OverheadReport {
    OverheadReport {
        uniform_macs: uniform.total_macs(),
        pwlq_macs: pwlq.total_macs(),
        macs_equal: uniform.total_macs() == pwlq.total_macs(),
        uniform_accumulators: uniform.accumulator_count(),
        pwlq_accumulators: pwlq.accumulator_count(),
        extra_accumulators: pwlq.accumulator_count().saturating_sub(uniform.accumulator_count()),
        extra_storage_bits_per_weight: i64::from(pwlq.weight_storage_bits) - i64::from(uniform.weight_storage_bits),
        uniform_fp_constants: uniform.fp_constants,
        pwlq_fp_constants: pwlq.fp_constants,
        extra_integer_additions: pwlq.activation_additions,
    }
}

/// Splits a quantized weight tensor into rows of `row_len` elements that
/// each use a single parameter set.
fn row_param_ids(q: &QuantizedTensor, row_len: usize) -> Result<Vec<usize>> {
    if row_len == 0 || !q.len().is_multiple_of(row_len) {
        return Err(Error::ShapeMismatch(format!(
            "{} weights do not split into rows of {row_len}",
            q.len()
        )));
    }
    q.param_ids()
        .chunks(row_len)
        .map(|ids| {
            if ids.iter().all(|&i| i == ids[0]) {
                Ok(ids[0])
            } else {
                Err(Error::ShapeMismatch("a weight row spans several parameter sets".into()))
            }
        })
        .collect()
}

/// Per-row inner products of a quantized weight tensor with one quantized
/// activation vector.
pub fn simulate_rows(
    weights: &QuantizedTensor,
    activations: &QuantizedTensor,
    cfg: &DatapathConfig,
) -> Result<Vec<(f64, f64, DatapathTrace)>> {
    let Encoding::Uniform { params: act_params } = activations.encoding() else {
        return Err(invalid("activations must be uniformly quantized"));
    };
    if act_params.len() != 1 {
        return Err(invalid("activations must be quantized per layer"));
    }
    let act = act_params[0];
    let xq = activations.codes();
    let x_hat = activations.reconstruct();
    let n = xq.len();
    let ids = row_param_ids(weights, n)?;
    let w_hat = weights.reconstruct();
    match weights.encoding() {
        Encoding::Uniform { params } => ids
            .iter()
            .enumerate()
            .map(|(row, &pid)| {
                let wq = &weights.codes()[row * n..(row + 1) * n];
                let dp = UniformDatapath::new(act, params[pid], wq)?;
                let (v, t) = dp.inner_product(xq, wq, cfg)?;
                Ok((v, reference_dot(&x_hat, &w_hat[row * n..(row + 1) * n]), t))
            })
            .collect(),
        Encoding::Pwlq { params, regions, negative } => ids
            .iter()
            .enumerate()
            .map(|(row, &pid)| {
                let span = row * n..(row + 1) * n;
                let w = PwlqWeights {
                    codes: weights.codes()[span.clone()].to_vec(),
                    regions: span.clone().map(|i| regions.get(i)).collect(),
                    negative: span.clone().map(|i| negative.get(i) == 1).collect(),
                };
                let dp = PwlqDatapath::new(act, params[pid].clone(), &w)?;
                let (v, t) = dp.inner_product(xq, &w, cfg)?;
                Ok((v, reference_dot(&x_hat, &w_hat[span]), t))
            })
            .collect(),
    }
}

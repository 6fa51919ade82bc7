//! End-to-end workflows: a serializable quantization recipe, the
//! fit → solve → quantize → correct pipeline, the breakpoint perturbation
//! study and the error analysis of a quantized tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{correct_tensor, ChannelBias, CorrectionMode};
use crate::distribution::{DistributionKind, DistributionModel};
use crate::error::{invalid, Error, Result};
use crate::error_analysis::{expected_multi_error, ErrorReport};
use crate::pwlq::{
    breakpoint_sweep, empirical_mse, quantize_pwlq, quantize_pwlq_per_channel, PwlqParams, Scheme, SweepPoint,
};
use crate::quantized::{Encoding, Granularity, QuantizedTensor};
use crate::solver::{
    empirical_grid, perturb_breakpoints, solve_breakpoint, solve_multi, BreakpointMethod, BreakpointSolution,
    SolverConfig,
};
use crate::tensor::{Tensor, TensorStats};
use crate::uniform::{quantize_uniform, quantize_uniform_per_channel, QuantParams};

pub const RECIPE_VERSION: u32 = 1;

/// Grid resolution of the empirical breakpoint search for one breakpoint;
/// multi-breakpoint searches enumerate subsets of a coarser grid.
pub const GRID_RESOLUTION: usize = 1000;
pub const MULTI_GRID_RESOLUTION: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Uniform,
    Pwlq,
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "pwlq" => Ok(Self::Pwlq),
            other => Err(invalid(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub version: u32,
    pub scheme: SchemeKind,
    pub bit_width: u8,
    pub granularity: Granularity,
    pub breakpoint_method: BreakpointMethod,
    pub breakpoints: usize,
    pub bias_correction: Option<CorrectionMode>,
    pub distribution: DistributionKind,
    pub seed: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            version: RECIPE_VERSION,
            scheme: SchemeKind::Pwlq,
            bit_width: 4,
            granularity: Granularity::PerChannel,
            breakpoint_method: BreakpointMethod::GradientDescent,
            breakpoints: 1,
            bias_correction: None,
            distribution: DistributionKind::Gaussian,
            seed: 0,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.version != RECIPE_VERSION {
            return Err(invalid(format!("unsupported recipe version {}", self.version)));
        }
        if !(2..=8).contains(&self.bit_width) {
            return Err(invalid(format!("bit width must be in [2, 8], got {}", self.bit_width)));
        }
        if !(1..=3).contains(&self.breakpoints) {
            return Err(invalid(format!("breakpoint count must be in [1, 3], got {}", self.breakpoints)));
        }
        if self.breakpoint_method == BreakpointMethod::ClosedFormGaussian && self.breakpoints != 1 {
            return Err(invalid("the closed-form breakpoint supports a single breakpoint only"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("invalid recipe: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            method: self.breakpoint_method,
            breakpoints: self.breakpoints,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

/// Per-channel (or per-layer) outcome of [`quantize_tensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub index: usize,
    pub bound: f64,
    pub breakpoints: Vec<f64>,
    pub model: Option<DistributionModel>,
    pub solution: Option<BreakpointSolution>,
    pub mse: f64,
    pub bias: Option<ChannelBias>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationOutcome {
    pub quantized: QuantizedTensor,
    pub channels: Vec<ChannelReport>,
    pub mse: f64,
}

/// Values of every parameter group, in group order.
fn groups(t: &Tensor, granularity: Granularity) -> Result<Vec<Vec<f32>>> {
    match granularity {
        Granularity::PerLayer => Ok(vec![t.data().to_vec()]),
        Granularity::PerChannel => {
            Ok(t.channel_views(t.channel_axis())?.into_iter().map(Tensor::into_data).collect())
        }
    }
}

struct ChannelPlan {
    bound: f64,
    pwlq: Option<PwlqParams>,
    uniform: Option<QuantParams>,
    model: Option<DistributionModel>,
    solution: Option<BreakpointSolution>,
}

fn evenly_spaced(bound: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|j| bound * j as f64 / (k + 1) as f64 * 0.5).collect()
}

/// Finds breakpoints for one group of values with absmax `m > 0`.
fn solve_group(values: &[f32], recipe: &Recipe) -> Result<(Option<DistributionModel>, BreakpointSolution)> {
    let (b, k) = (recipe.bit_width, recipe.breakpoints);
    let grid = |fallback: bool| -> Result<BreakpointSolution> {
        let res = if k == 1 { GRID_RESOLUTION } else { MULTI_GRID_RESOLUTION };
        let mut sol = empirical_grid(values, b, k, res)?;
        sol.fallback = fallback;
        Ok(sol)
    };
    if recipe.breakpoint_method == BreakpointMethod::EmpiricalGrid {
        return Ok((None, grid(false)?));
    }
    let model = match DistributionModel::fit_values(values, recipe.distribution) {
        Ok(d) => d,
        // A channel without spread has no usable model; search the data.
        Err(Error::Degenerate(_) | Error::InvalidArgument(_)) => return Ok((None, grid(true)?)),
        Err(e) => return Err(e),
    };
    let cfg = recipe.solver_config();
    let sol = if k == 1 { solve_breakpoint(&model, b, &cfg)? } else { solve_multi(&model, b, k, &cfg)? };
    Ok((Some(model), sol))
}

fn plan_group(values: &[f32], recipe: &Recipe) -> Result<ChannelPlan> {
    let m = TensorStats::from_values(values)?.absmax;
    let b = recipe.bit_width;
    match recipe.scheme {
        SchemeKind::Uniform => Ok(ChannelPlan {
            bound: m,
            pwlq: None,
            uniform: Some(QuantParams::symmetric(b, m)?),
            model: None,
            solution: None,
        }),
        SchemeKind::Pwlq if m == 0.0 => Ok(ChannelPlan {
            // All-zero group: any geometry decodes every code to 0.
            bound: 0.0,
            pwlq: Some(PwlqParams::new(b, 1.0, evenly_spaced(1.0, recipe.breakpoints))?),
            uniform: None,
            model: None,
            solution: None,
        }),
        SchemeKind::Pwlq => {
            let (model, solution) = solve_group(values, recipe)?;
            Ok(ChannelPlan {
                bound: m,
                pwlq: Some(PwlqParams::new(b, m, solution.breakpoints.clone())?),
                uniform: None,
                model,
                solution: Some(solution),
            })
        }
    }
}

/// Per-group mean squared error between `original` and decoded values.
fn group_mse(original: &[f32], decoded: &[f64], ids: &[usize], groups: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; groups];
    let mut counts = vec![0usize; groups];
    for ((&w, &q), &g) in original.iter().zip(decoded).zip(ids) {
        sums[g] += (q - f64::from(w)).powi(2);
        counts[g] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

/// Quantizes `t` according to `recipe`; channels are solved in parallel
/// and the result is independent of the thread count.
pub fn quantize_tensor(t: &Tensor, recipe: &Recipe) -> Result<QuantizationOutcome> {
    recipe.validate()?;
    let groups = groups(t, recipe.granularity)?;
    let plans: Vec<ChannelPlan> = groups.par_iter().map(|g| plan_group(g, recipe)).collect::<Result<_>>()?;
    let axis = t.channel_axis();
    let quantized = match (recipe.scheme, recipe.granularity) {
        (SchemeKind::Uniform, Granularity::PerLayer) => quantize_uniform(t, plans[0].uniform.as_ref().expect("uniform"))?,
        (SchemeKind::Uniform, Granularity::PerChannel) => {
            quantize_uniform_per_channel(t, axis, plans.iter().map(|p| p.uniform.expect("uniform")).collect())?
        }
        (SchemeKind::Pwlq, Granularity::PerLayer) => quantize_pwlq(t, plans[0].pwlq.as_ref().expect("pwlq"))?,
        (SchemeKind::Pwlq, Granularity::PerChannel) => {
            quantize_pwlq_per_channel(t, axis, plans.iter().map(|p| p.pwlq.clone().expect("pwlq")).collect())?
        }
    };
    let (quantized, bias) = match recipe.bias_correction {
        Some(mode) => {
            let (q, bc) = correct_tensor(t, &quantized, mode)?;
            (q, Some(bc.channels))
        }
        None => (quantized, None),
    };
    let decoded = quantized.reconstruct();
    let mses = group_mse(t.data(), &decoded, &quantized.param_ids(), plans.len());
    let mse = decoded.iter().zip(t.data()).map(|(q, &w)| (q - f64::from(w)).powi(2)).sum::<f64>() / t.len() as f64;
    let channels = plans
        .into_iter()
        .enumerate()
        .map(|(index, p)| ChannelReport {
            index,
            bound: p.bound,
            breakpoints: p.pwlq.map(|w| w.breakpoints).unwrap_or_default(),
            model: p.model,
            solution: p.solution,
            mse: mses[index],
            bias: bias.as_ref().map(|b| b[index]),
        })
        .collect();
    Ok(QuantizationOutcome { quantized, channels, mse })
}

/// 25th, 50th and 75th percentiles (linear interpolation between order
/// statistics) plus the extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("quartiles of an empty set"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self { min: v[0], q1: at(0.25), median: at(0.5), q3: at(0.75), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationLevel {
    pub fraction: f64,
    pub trials: usize,
    pub mse: Quartiles,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub baseline_mse: f64,
    pub levels: Vec<PerturbationLevel>,
}

/// Re-quantizes `t` with every solved breakpoint multiplied by
/// `1 ± fraction` and reports the MSE distribution over seeded trials.
///
/// Trial `i` of level `l` draws from stream `l · trials + i` of the recipe
/// seed, so reports are reproducible and independent of scheduling.
pub fn perturbation_study(t: &Tensor, recipe: &Recipe, levels: &[f64], trials: usize) -> Result<PerturbationReport> {
    recipe.validate()?;
    if recipe.scheme != SchemeKind::Pwlq {
        return Err(invalid("the perturbation study needs the pwlq scheme"));
    }
    if levels.is_empty() {
        return Err(invalid("at least one perturbation level is required"));
    }
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    if let Some(bad) = levels.iter().find(|l| !(0.0..=0.5).contains(*l)) {
        return Err(invalid(format!("perturbation level {bad} outside [0, 0.5]")));
    }
    let groups = groups(t, recipe.granularity)?;
    let plans: Vec<ChannelPlan> = groups.par_iter().map(|g| plan_group(g, recipe)).collect::<Result<_>>()?;
    let b = recipe.bit_width;
    let total = t.len() as f64;
    let weighted = |g: &[f32], mse: f64| mse * g.len() as f64 / total;
    let channel_mse = |g: &[f32], params: &PwlqParams| empirical_mse(g, &Scheme::Pwlq(params.clone()));

    let baseline = groups
        .iter()
        .zip(&plans)
        .map(|(g, p)| Ok(weighted(g, channel_mse(g, p.pwlq.as_ref().expect("pwlq"))?)))
        .sum::<Result<f64>>()?;

    let trial_mse = |stream: u64, fraction: f64| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
        rng.set_stream(stream);
        let mut sum = 0.0;
        for (g, plan) in groups.iter().zip(&plans) {
            let seed: u64 = rng.random();
            let params = plan.pwlq.as_ref().expect("pwlq");
            let mse = match &plan.solution {
                Some(sol) => {
                    let objective = |bps: &[f64]| channel_mse(g, &PwlqParams::new(b, params.bound, bps.to_vec())?);
                    perturb_breakpoints(sol, fraction, seed, objective)?.error
                }
                None => channel_mse(g, params)?,
            };
            sum += weighted(g, mse);
        }
        Ok(sum)
    };

    let levels = levels
        .iter()
        .enumerate()
        .map(|(li, &fraction)| {
            let mses: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|tr| trial_mse((li * trials + tr) as u64, fraction))
                .collect::<Result<_>>()?;
            Ok(PerturbationLevel {
                fraction,
                trials,
                mse: Quartiles::of(&mses)?,
                mean_mse: mses.iter().sum::<f64>() / trials as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationReport { baseline_mse: baseline, levels })
}

/// What [`analyze`] compares the original tensor against.
#[derive(Debug, Clone, Copy)]
pub enum Reconstruction<'a> {
    Quantized(&'a QuantizedTensor),
    /// An already-decoded tensor; grouping and bit width come from the options.
    Dense(&'a Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub distribution: DistributionKind,
    pub sweep_points: usize,
    /// Used for dense reconstructions only.
    pub bit_width: u8,
    /// Used for dense reconstructions only.
    pub granularity: Granularity,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            distribution: DistributionKind::Gaussian,
            sweep_points: 100,
            bit_width: 4,
            granularity: Granularity::PerLayer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAnalysis {
    pub index: usize,
    pub mse: f64,
    pub bound: f64,
    /// Empirical MSE of a symmetric uniform quantizer over `[-m, m]` at the same bit width.
    pub uniform_mse: f64,
    pub expected_error: Option<f64>,
    pub report: Option<ErrorReport>,
    /// Single-breakpoint PWLQ MSE across `(0, m/2)`.
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub bit_width: u8,
    pub scheme: Option<SchemeKind>,
    pub granularity: Granularity,
    pub mse: f64,
    pub channels: Vec<ChannelAnalysis>,
}

impl Analysis {
    /// Sweep curves as CSV (`channel,breakpoint,mse,uniform_mse`).
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("channel,breakpoint,mse,uniform_mse\n");
        for c in &self.channels {
            for p in &c.sweep {
                out.push_str(&format!("{},{:e},{:e},{:e}\n", c.index, p.breakpoint, p.mse, c.uniform_mse));
            }
        }
        out
    }
}

fn analyze_group(
    index: usize,
    original: &[f32],
    decoded: &[f64],
    bit_width: u8,
    encoding: Option<(&Encoding, usize)>,
    opts: &AnalyzeOptions,
) -> Result<ChannelAnalysis> {
    let mse = original.iter().zip(decoded).map(|(&w, q)| (q - f64::from(w)).powi(2)).sum::<f64>()
        / original.len() as f64;
    let m = TensorStats::from_values(original)?.absmax;
    if m == 0.0 {
        return Ok(ChannelAnalysis {
            index,
            mse,
            bound: 0.0,
            uniform_mse: 0.0,
            expected_error: None,
            report: None,
            sweep: Vec::new(),
        });
    }
    let uniform_mse = empirical_mse(original, &Scheme::Uniform(QuantParams::symmetric(bit_width, m)?))?;
    let sweep = if bit_width >= 2 { breakpoint_sweep(original, bit_width, m, opts.sweep_points)? } else { Vec::new() };
    let model = || DistributionModel::fit_values(original, opts.distribution);
    let (expected_error, report) = match encoding {
        Some((Encoding::Pwlq { params, .. }, pid)) => {
            let p = &params[pid];
            match model().and_then(|d| d.with_bound(p.bound)) {
                Ok(d) if p.breakpoints.len() == 1 => {
                    let r = ErrorReport::pwlq(&d, bit_width, p.breakpoints[0], mse)?;
                    (r.expected_error, Some(r))
                }
                Ok(d) => (Some(expected_multi_error(&d, bit_width, &p.breakpoints)?), None),
                Err(_) => (None, None),
            }
        }
        Some((Encoding::Uniform { params }, pid)) => {
            let p = &params[pid];
            let bound = p.range_high.abs().max(p.range_low.abs());
            if bound > 0.0 && bit_width >= 2 {
                let r = ErrorReport::uniform(bit_width, bound, mse)?;
                (Some(r.uniform_expected_error), Some(r))
            } else {
                (None, None)
            }
        }
        None => (None, None),
    };
    Ok(ChannelAnalysis { index, mse, bound: m, uniform_mse, expected_error, report, sweep })
}

/// Error report of `recon` against `original`, per parameter group.
pub fn analyze(original: &Tensor, recon: Reconstruction<'_>, opts: &AnalyzeOptions) -> Result<Analysis> {
    let (shape, decoded, ids, groups, bit_width, granularity, encoding, scheme) = match recon {
        Reconstruction::Quantized(q) => (
            q.shape().to_vec(),
            q.reconstruct(),
            q.param_ids(),
            q.param_count(),
            q.bit_width(),
            q.granularity(),
            Some(q.encoding()),
            Some(if q.is_piecewise() { SchemeKind::Pwlq } else { SchemeKind::Uniform }),
        ),
        Reconstruction::Dense(d) => {
            let (ids, groups) = match opts.granularity {
                Granularity::PerLayer => (vec![0; d.len()], 1),
                Granularity::PerChannel => (d.channel_ids(d.channel_axis())?, d.shape()[d.channel_axis()]),
            };
            (
                d.shape().to_vec(),
                d.data().iter().map(|&v| f64::from(v)).collect(),
                ids,
                groups,
                opts.bit_width,
                opts.granularity,
                None,
                None,
            )
        }
    };
    if shape != original.shape() {
        return Err(Error::ShapeMismatch(format!("original {:?} vs reconstruction {shape:?}", original.shape())));
    }
    let mut orig_groups = vec![Vec::new(); groups];
    let mut dec_groups = vec![Vec::new(); groups];
    for ((&w, &q), &g) in original.data().iter().zip(&decoded).zip(&ids) {
        orig_groups[g].push(w);
        dec_groups[g].push(q);
    }
    let channels = orig_groups
        .par_iter()
        .zip(&dec_groups)
        .enumerate()
        .map(|(i, (o, d))| analyze_group(i, o, d, bit_width, encoding.map(|e| (e, i)), opts))
        .collect::<Result<Vec<_>>>()?;
    let mse = decoded.iter().zip(original.data()).map(|(q, &w)| (q - f64::from(w)).powi(2)).sum::<f64>()
        / original.len() as f64;
    Ok(Analysis { bit_width, scheme, granularity, mse, channels })
}

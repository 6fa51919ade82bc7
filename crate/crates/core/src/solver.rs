//! Breakpoint search.
//!
//! Analytic solvers minimize the closed-form expected error of
//! [`crate::error_analysis`] for a fitted [`DistributionModel`]; the empirical
//! grid search minimizes measured MSE directly and is the oracle the analytic
//! solvers are checked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{DistributionKind, DistributionModel};
use crate::error::{invalid, Error, Result};
use crate::error_analysis::{self, expected_multi_error, multi_error_gradient, stationarity_residual};
use crate::pwlq::{empirical_mse, half_range_grid, PwlqParams, Scheme};
use crate::tensor::TensorStats;
use crate::uniform::error_constant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BreakpointMethod {
    GradientDescent,
    ClosedFormGaussian,
    EmpiricalGrid,
}

impl std::str::FromStr for BreakpointMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient-descent" => Ok(Self::GradientDescent),
            "closed-form-gaussian" | "closed-form" => Ok(Self::ClosedFormGaussian),
            "empirical-grid" => Ok(Self::EmpiricalGrid),
            other => Err(invalid(format!("unknown breakpoint method '{other}'"))),
        }
    }
}

/// Range of `m / σ` on which the closed-form Gaussian breakpoint is trusted.
pub const CLOSED_FORM_RANGE: (f64, f64) = (2.0, 5.0);

/// Largest breakpoint count the multi-breakpoint solver accepts.
pub const MAX_SOLVER_BREAKPOINTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: BreakpointMethod,
    pub max_iterations: usize,
    /// Gradient step as a fraction of `m`, applied to the bit-width-free
    /// objective `E / (C(b-1) m^2)` in units of `p / m`.
    pub step_size: f64,
    /// Convergence threshold on the stationarity residual `E'(p) / (2 C(b-1))`
    /// (single breakpoint) or on the max-norm of the normalized gradient.
    pub tolerance: f64,
    pub grid_resolution: usize,
    pub breakpoints: usize,
    /// Extra randomly initialized starts for the multi-breakpoint solver.
    pub restarts: usize,
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: BreakpointMethod::GradientDescent,
            max_iterations: 10_000,
            step_size: 0.01,
            tolerance: 1e-10,
            grid_resolution: 1000,
            breakpoints: 1,
            restarts: 0,
            perturbation: 0.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("solver tolerance must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid("solver step size must be positive"));
        }
        if self.breakpoints == 0 {
            return Err(invalid("breakpoint count must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.perturbation) {
            return Err(invalid(format!("perturbation fraction {} outside [0, 0.5]", self.perturbation)));
        }
        if self.grid_resolution == 0 {
            return Err(invalid("grid resolution must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSolution {
    pub breakpoints: Vec<f64>,
    pub bound: f64,
    /// Expected error (analytic methods) or measured MSE (empirical grid).
    pub error: f64,
    pub method: BreakpointMethod,
    pub iterations: usize,
    /// Stationarity residual at the returned breakpoint (single-breakpoint
    /// analytic methods).
    pub residual: Option<f64>,
    /// Set when the requested method was unavailable and gradient descent
    /// was used instead.
    #[serde(default)]
    pub fallback: bool,
}

/// Optimal single breakpoint for model `d` at `bit_width` bits.
pub fn solve_breakpoint(d: &DistributionModel, bit_width: u8, cfg: &SolverConfig) -> Result<BreakpointSolution> {
    cfg.validate()?;
    if !(2..=16).contains(&bit_width) {
        return Err(invalid(format!("bit width must be in [2, 16], got {bit_width}")));
    }
    match cfg.method {
        BreakpointMethod::GradientDescent => gradient_descent(d, bit_width, cfg),
        BreakpointMethod::ClosedFormGaussian => {
            let m_over_sigma = d.bound() / d.scale();
            match (d.kind(), closed_form_gaussian(m_over_sigma)) {
                (DistributionKind::Gaussian, Ok(normalized)) => {
                    let p = normalized * d.scale();
                    Ok(BreakpointSolution {
                        breakpoints: vec![p],
                        bound: d.bound(),
                        error: error_analysis::expected_pwlq_error(d, bit_width, p)?,
                        method: BreakpointMethod::ClosedFormGaussian,
                        iterations: 0,
                        residual: Some(stationarity_residual(d, p)),
                        fallback: false,
                    })
                }
                _ => {
                    let mut sol = gradient_descent(d, bit_width, cfg)?;
                    sol.fallback = true;
                    Ok(sol)
                }
            }
        }
        BreakpointMethod::EmpiricalGrid => {
            Err(invalid("the empirical grid needs data; call empirical_grid instead"))
        }
    }
}

/// Closed-form Gaussian approximation of the optimal breakpoint.
///
/// Takes `m / σ` and returns `p* / σ = ln(0.8614 (m/σ) + 0.6079)`. Outside
/// [`CLOSED_FORM_RANGE`] the approximation is not trusted and an error is
/// returned so callers can fall back to gradient descent.
pub fn closed_form_gaussian(m_over_sigma: f64) -> Result<f64> {
    let (lo, hi) = CLOSED_FORM_RANGE;
    if !(lo..=hi).contains(&m_over_sigma) {
        return Err(invalid(format!("m/sigma = {m_over_sigma} outside the validated range [{lo}, {hi}]")));
    }
    Ok((0.8614 * m_over_sigma + 0.6079).ln())
}

fn gradient_descent(d: &DistributionModel, bit_width: u8, cfg: &SolverConfig) -> Result<BreakpointSolution> {
    let m = d.bound();
    let (lo, hi) = (0.01 * m, 0.49 * m);
    // Bit-width-free objective and its derivative in p.
    let objective = |p: f64| (m - p).powi(2) + m * (2.0 * p - m) * (2.0 * d.truncated_cdf(p) - 1.0);
    let slope = |p: f64| 2.0 * stationarity_residual(d, p);

    let mut p = 0.3 * m;
    let mut value = objective(p);
    for iter in 0..cfg.max_iterations {
        let residual = stationarity_residual(d, p);
        if residual.abs() <= cfg.tolerance {
            return Ok(BreakpointSolution {
                breakpoints: vec![p],
                bound: m,
                error: error_analysis::expected_pwlq_error(d, bit_width, p)?,
                method: BreakpointMethod::GradientDescent,
                iterations: iter,
                residual: Some(residual),
                fallback: false,
            });
        }
        // A step of step_size in u = p/m on objective/m^2 moves p by step_size * slope.
        let mut step = cfg.step_size * slope(p);
        let next = loop {
            let candidate = (p - step).clamp(lo, hi);
            let v = objective(candidate);
            if v <= value || step.abs() < 1e-16 * m {
                break (candidate, v);
            }
            step *= 0.5;
        };
        if next.0 == p {
            // Pinned at a projection bound.
            break;
        }
        (p, value) = next;
    }
    Err(Error::NotConverged { iterations: cfg.max_iterations, residual: stationarity_residual(d, p) })
}

/// Optimal `k` breakpoints (`1 ≤ k ≤ 3`) under model `d`.
///
/// Projected gradient descent with backtracking over ordered breakpoint
/// vectors in `(0, m)`. Starts include an even spread and, for `k > 1`, the
/// `k - 1` optimum with a breakpoint appended next to `m` (whose error equals
/// the `k - 1` optimum in the limit), so the achieved error never increases
/// with `k`.
pub fn solve_multi(d: &DistributionModel, bit_width: u8, k: usize, cfg: &SolverConfig) -> Result<BreakpointSolution> {
    cfg.validate()?;
    if k == 0 || k > MAX_SOLVER_BREAKPOINTS {
        return Err(invalid(format!("breakpoint count must be in [1, {MAX_SOLVER_BREAKPOINTS}], got {k}")));
    }
    let m = d.bound();
    let mut starts: Vec<Vec<f64>> = vec![(1..=k).map(|j| 0.6 * m * j as f64 / (k + 1) as f64).collect()];
    if k > 1 {
        let prev = solve_multi(d, bit_width, k - 1, &SolverConfig { restarts: 0, ..cfg.clone() })?;
        let mut warm = prev.breakpoints.clone();
        warm.push(m * (1.0 - 1e-3));
        starts.push(warm);
        let mut split = prev.breakpoints;
        split.insert(0, 0.5 * split[0]);
        starts.push(split);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let mut s: Vec<f64> = (0..k).map(|_| m * rng.random_range(0.02..0.98)).collect();
        s.sort_by(f64::total_cmp);
        starts.push(s);
    }
    let mut best: Option<BreakpointSolution> = None;
    let mut last_err = None;
    for start in starts {
        match solve_multi_from(d, bit_width, start, cfg) {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| sol.error < b.error) {
                    best = Some(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| invalid("no starting point")))
}

fn project_ordered(u: &mut [f64], gap: f64) {
    u.sort_by(f64::total_cmp);
    let k = u.len();
    for (j, v) in u.iter_mut().enumerate() {
        let lo = gap * (j + 1) as f64;
        let hi = 1.0 - gap * (k - j) as f64;
        *v = v.clamp(lo, hi);
    }
    for j in 1..k {
        if u[j] < u[j - 1] + gap {
            u[j] = u[j - 1] + gap;
        }
    }
}

/// Multi-breakpoint descent from a given start.
pub fn solve_multi_from(
    d: &DistributionModel,
    bit_width: u8,
    start: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<BreakpointSolution> {
    let m = d.bound();
    let c = error_constant(bit_width - 1);
    let gap = 1e-6;
    let objective = |u: &[f64]| -> Result<f64> {
        let p: Vec<f64> = u.iter().map(|v| v * m).collect();
        Ok(expected_multi_error(d, bit_width, &p)? / (c * m * m))
    };
    let gradient = |u: &[f64]| -> Result<Vec<f64>> {
        let p: Vec<f64> = u.iter().map(|v| v * m).collect();
        Ok(multi_error_gradient(d, bit_width, &p)?.into_iter().map(|g| g / (c * m)).collect())
    };

    let mut u: Vec<f64> = start.iter().map(|p| p / m).collect();
    project_ordered(&mut u, gap);
    let mut value = objective(&u)?;
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations * u.len() {
        iterations += 1;
        let g = gradient(&u)?;
        // Projected-gradient stationarity: the move a unit step would make.
        let mut probe: Vec<f64> = u.iter().zip(&g).map(|(v, gv)| v - gv).collect();
        project_ordered(&mut probe, gap);
        let pg = probe.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if pg <= cfg.tolerance {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
            project_ordered(&mut cand, gap);
            let v = objective(&cand)?;
            let decrease: f64 = g.iter().zip(cand.iter().zip(&u)).map(|(gv, (a, b))| gv * (b - a)).sum();
            if v <= value - 1e-4 * decrease {
                let moved = cand.iter().zip(&u).any(|(a, b)| a != b);
                u = cand;
                value = v;
                accepted = moved;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No representable descent left: treat as converged at float precision.
            converged = true;
            break;
        }
    }
    if !converged {
        let g = gradient(&u)?;
        let residual = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        return Err(Error::NotConverged { iterations, residual });
    }
    let breakpoints: Vec<f64> = u.iter().map(|v| v * m).collect();
    let residual = (breakpoints.len() == 1).then(|| stationarity_residual(d, breakpoints[0]));
    Ok(BreakpointSolution {
        error: expected_multi_error(d, bit_width, &breakpoints)?,
        breakpoints,
        bound: m,
        method: BreakpointMethod::GradientDescent,
        iterations,
        residual,
        fallback: false,
    })
}

/// Exhaustive search minimizing measured MSE on `values`, with `m = absmax`.
///
/// A single breakpoint is searched on `resolution` points strictly inside
/// `(0, m/2)`; `k > 1` breakpoints on all increasing `k`-subsets of a
/// `resolution`-point grid inside `(0, m)`. Ties keep the earliest
/// (smallest) candidate.
pub fn empirical_grid(values: &[f32], bit_width: u8, k: usize, resolution: usize) -> Result<BreakpointSolution> {
    if resolution == 0 {
        return Err(invalid("grid resolution must be positive"));
    }
    if k == 0 || k > MAX_SOLVER_BREAKPOINTS {
        return Err(invalid(format!("breakpoint count must be in [1, {MAX_SOLVER_BREAKPOINTS}], got {k}")));
    }
    let m = TensorStats::from_values(values)?.absmax;
    if m == 0.0 {
        return Err(Error::Degenerate("empirical grid on an all-zero tensor".into()));
    }
    let grid = if k == 1 {
        half_range_grid(m, resolution)
    } else {
        (1..=resolution).map(|i| m * i as f64 / (resolution + 1) as f64).collect()
    };
    let combos = count_combinations(grid.len(), k);
    if combos > 5_000_000 {
        return Err(invalid(format!("{combos} grid candidates is too many; lower the resolution")));
    }
    // Differences below this are float noise in the decoded values.
    let tie = 1e-20 * m * m;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluated = 0;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let bps: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
        let mse = empirical_mse(values, &Scheme::Pwlq(PwlqParams::new(bit_width, m, bps.clone())?))?;
        evaluated += 1;
        if best.as_ref().is_none_or(|(_, b)| mse < b - tie) {
            best = Some((bps, mse));
        }
        if !next_combination(&mut idx, grid.len()) {
            break;
        }
    }
    let (breakpoints, error) = best.expect("grid is nonempty");
    Ok(BreakpointSolution {
        breakpoints,
        bound: m,
        error,
        method: BreakpointMethod::EmpiricalGrid,
        iterations: evaluated,
        residual: None,
        fallback: false,
    })
}

fn count_combinations(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Multiplies every breakpoint by `1 ± fraction` (independent random sign)
/// and re-evaluates `objective` at the result (also when `fraction` is 0,
/// which leaves the breakpoints untouched).
///
/// Perturbed breakpoints are kept strictly inside `(0, m)` and strictly
/// increasing.
pub fn perturb_breakpoints<F>(sol: &BreakpointSolution, fraction: f64, seed: u64, objective: F) -> Result<BreakpointSolution>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(0.0..=0.5).contains(&fraction) {
        return Err(invalid(format!("perturbation fraction {fraction} outside [0, 0.5]")));
    }
    if fraction == 0.0 {
        return Ok(BreakpointSolution { error: objective(&sol.breakpoints)?, ..sol.clone() });
    }
    let m = sol.bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bps: Vec<f64> = sol
        .breakpoints
        .iter()
        .map(|&p| {
            let factor = if rng.random_bool(0.5) { 1.0 + fraction } else { 1.0 - fraction };
            p * factor
        })
        .collect();
    let mut u: Vec<f64> = bps.iter().map(|p| p / m).collect();
    project_ordered(&mut u, 1e-9);
    bps = u.into_iter().map(|v| v * m).collect();
    Ok(BreakpointSolution {
        error: objective(&bps)?,
        breakpoints: bps,
        residual: None,
        ..sol.clone()
    })
}

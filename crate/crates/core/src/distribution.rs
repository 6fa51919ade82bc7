//! Symmetric bell-shaped models used by the analytic breakpoint solver.
//!
//! The untruncated density and CDF are exposed directly; the solver works
//! with the renormalized truncation to `[-m, m]`,
//! `F̂(r) = (F(r) - F(-m)) / (F(m) - F(-m))`, so that `F̂(-m) = 0` and
//! `F̂(m) = 1` hold exactly.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Tensor, TensorStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Gaussian,
    Laplacian,
}

impl std::str::FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "laplacian" => Ok(Self::Laplacian),
            other => Err(invalid(format!("unknown distribution '{other}'"))),
        }
    }
}

/// Zero-centred Gaussian (`scale = σ`) or Laplacian (`scale = b`) truncated to
/// `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionModel {
    kind: DistributionKind,
    scale: f64,
    bound: f64,
}

impl DistributionModel {
    pub fn new(kind: DistributionKind, scale: f64, bound: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Degenerate(format!("distribution scale must be positive, got {scale}")));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(invalid(format!("truncation bound must be positive, got {bound}")));
        }
        Ok(Self { kind, scale, bound })
    }

    pub fn gaussian(sigma: f64, bound: f64) -> Result<Self> {
        Self::new(DistributionKind::Gaussian, sigma, bound)
    }

    pub fn laplacian(b: f64, bound: f64) -> Result<Self> {
        Self::new(DistributionKind::Laplacian, b, bound)
    }

    /// Moment fit with location pinned to zero: Gaussian takes the population
    /// std of the mean-removed data, Laplacian the mean absolute deviation.
    /// The truncation bound is the data's absolute maximum.
    pub fn fit(t: &Tensor, kind: DistributionKind) -> Result<Self> {
        Self::fit_values(t.data(), kind)
    }

    pub fn fit_values(values: &[f32], kind: DistributionKind) -> Result<Self> {
        let stats = TensorStats::from_values(values)?;
        if stats.absmax == 0.0 {
            return Err(Error::Degenerate("cannot fit a distribution to an all-zero tensor".into()));
        }
        let scale = match kind {
            DistributionKind::Gaussian => stats.std,
            DistributionKind::Laplacian => {
                values.iter().map(|&v| (f64::from(v) - stats.mean).abs()).sum::<f64>()
                    / values.len() as f64
            }
        };
        Self::new(kind, scale, stats.absmax)
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn with_bound(&self, bound: f64) -> Result<Self> {
        Self::new(self.kind, self.scale, bound)
    }

    /// Untruncated density at `r`.
    pub fn pdf(&self, r: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::Gaussian => {
                let z = r / s;
                (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt())
            }
            DistributionKind::Laplacian => (-r.abs() / s).exp() / (2.0 * s),
        }
    }

    /// Derivative of the untruncated density. The Laplacian kink at 0 takes
    /// the right-hand derivative.
    pub fn pdf_derivative(&self, r: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::Gaussian => -r / (s * s) * self.pdf(r),
            DistributionKind::Laplacian => {
                let sign = if r < 0.0 { 1.0 } else { -1.0 };
                sign * self.pdf(r) / s
            }
        }
    }

    /// Untruncated CDF at `r`.
    ///
    /// The Gaussian goes through `erfc` (musl/FreeBSD rational approximations,
    /// relative error near one ulp), evaluated on the tail side so both
    /// halves keep full relative precision.
    pub fn cdf(&self, r: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::Gaussian => 0.5 * libm::erfc(-r / s * FRAC_1_SQRT_2),
            DistributionKind::Laplacian => {
                let half_tail = 0.5 * (-r.abs() / s).exp();
                if r < 0.0 {
                    half_tail
                } else {
                    1.0 - half_tail
                }
            }
        }
    }

    /// Probability mass of the untruncated model inside `[-bound, bound]`.
    pub fn truncated_mass(&self) -> f64 {
        let m = self.bound;
        let s = self.scale;
        match self.kind {
            DistributionKind::Gaussian => libm::erf(m / s * FRAC_1_SQRT_2),
            DistributionKind::Laplacian => -(-m / s).exp_m1(),
        }
    }

    /// Renormalized truncated density `f̂`.
    pub fn truncated_pdf(&self, r: f64) -> f64 {
        if r.abs() > self.bound {
            return 0.0;
        }
        self.pdf(r) / self.truncated_mass()
    }

    pub fn truncated_pdf_derivative(&self, r: f64) -> f64 {
        if r.abs() > self.bound {
            return 0.0;
        }
        self.pdf_derivative(r) / self.truncated_mass()
    }

    /// Renormalized truncated CDF `F̂`.
    pub fn truncated_cdf(&self, r: f64) -> f64 {
        let m = self.bound;
        if r <= -m {
            return 0.0;
        }
        if r >= m {
            return 1.0;
        }
        // Written through the symmetric mass |F(r) - 1/2| to avoid cancellation.
        let centred = match self.kind {
            DistributionKind::Gaussian => 0.5 * libm::erf(r / self.scale * FRAC_1_SQRT_2),
            DistributionKind::Laplacian => -0.5 * (-r.abs() / self.scale).exp_m1() * r.signum(),
        };
        0.5 + centred / self.truncated_mass()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            DistributionKind::Gaussian => {
                Normal::new(0.0, self.scale).expect("scale validated at construction").sample(rng)
            }
            DistributionKind::Laplacian => {
                // Inverse CDF on u in (-1/2, 1/2).
                let u = loop {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    if u > -0.5 {
                        break u;
                    }
                };
                -self.scale * u.signum() * (-2.0 * u.abs()).ln_1p()
            }
        }
    }

    /// `n` i.i.d. draws from the untruncated model, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(invalid("sample count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| self.draw(&mut rng) as f32).collect();
        Tensor::from_vec(data)
    }

    /// `n` draws from the model truncated to `[-bound, bound]` (rejection).
    pub fn sample_truncated(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(invalid("sample count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.bound;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let x = self.draw(&mut rng) as f32;
            if f64::from(x).abs() <= m {
                data.push(x);
            }
        }
        Tensor::from_vec(data)
    }
}

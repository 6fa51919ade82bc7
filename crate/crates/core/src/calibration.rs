//! Activation-range calibration from sampled activation tensors.
//!
//! The range bounds are the medians of the `k` smallest and the `k` largest
//! observed values, which clips isolated outliers while staying inside the
//! observed extrema.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantized::QuantizedTensor;
use crate::tensor::Tensor;
use crate::uniform::{quantize_uniform, QuantParams};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Order statistics over all elements of all samples jointly.
    #[default]
    Pooled,
    /// Order statistics over the per-sample minima and maxima.
    PerSample,
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per-sample" => Ok(Self::PerSample),
            other => Err(invalid(format!("unknown calibration mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRange {
    pub min: f64,
    pub max: f64,
    pub k: usize,
    /// Number of sample tensors seen.
    pub samples: usize,
    /// Number of values the order statistics were taken over.
    pub count: usize,
    /// Set when fewer than `k` values were available and the global
    /// extrema were used instead.
    #[serde(default)]
    pub degraded: bool,
}

impl CalibrationRange {
    /// Activation quantizer over the calibrated range.
    pub fn params(&self, bit_width: u8) -> Result<QuantParams> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(invalid(format!("inverted calibration range [{}, {}]", self.min, self.max)));
        }
        QuantParams::asymmetric(bit_width, self.min, self.max)
    }
}

/// Bounded selection of the `k` smallest and `k` largest values seen.
///
/// Merging is associative and commutative: the retained multisets depend
/// only on the multiset of values pushed, never on order or grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremes {
    k: usize,
    /// Ascending.
    smallest: Vec<f32>,
    /// Descending.
    largest: Vec<f32>,
    count: usize,
}

impl Extremes {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "k must be at least 1");
        Self { k, smallest: Vec::with_capacity(k + 1), largest: Vec::with_capacity(k + 1), count: 0 }
    }

    pub fn push(&mut self, v: f32) {
        self.count += 1;
        if self.smallest.len() < self.k || v < self.smallest[self.k - 1] {
            let at = self.smallest.partition_point(|&x| x <= v);
            self.smallest.insert(at, v);
            self.smallest.truncate(self.k);
        }
        if self.largest.len() < self.k || v > self.largest[self.k - 1] {
            let at = self.largest.partition_point(|&x| x >= v);
            self.largest.insert(at, v);
            self.largest.truncate(self.k);
        }
    }

    pub fn extend(&mut self, values: &[f32]) {
        for &v in values {
            self.push(v);
        }
    }

    pub fn merge(self, other: Self) -> Self {
        assert_eq!(self.k, other.k, "cannot merge selections with different k");
        let k = self.k;
        let merged = |a: Vec<f32>, b: Vec<f32>, before: fn(f32, f32) -> bool| {
            let mut out = Vec::with_capacity(k);
            let (mut i, mut j) = (0, 0);
            while out.len() < k && (i < a.len() || j < b.len()) {
                if j >= b.len() || (i < a.len() && !before(b[j], a[i])) {
                    out.push(a[i]);
                    i += 1;
                } else {
                    out.push(b[j]);
                    j += 1;
                }
            }
            out
        };
        Self {
            k,
            smallest: merged(self.smallest, other.smallest, |x, y| x < y),
            largest: merged(self.largest, other.largest, |x, y| x > y),
            count: self.count + other.count,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Up to `k` smallest values, ascending.
    pub fn smallest(&self) -> &[f32] {
        &self.smallest
    }

    /// Up to `k` largest values, descending.
    pub fn largest(&self) -> &[f32] {
        &self.largest
    }
}

/// Median with the even-length convention of averaging the two central values.
fn median(sorted: &[f32]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        f64::from(sorted[n / 2])
    } else {
        0.5 * (f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2]))
    }
}

/// Calibrates a clipping range from sample tensors.
pub fn calibrate(samples: &[Tensor], k: usize, mode: CalibrationMode) -> Result<CalibrationRange> {
    if samples.is_empty() {
        return Err(invalid("calibration needs at least one sample tensor"));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let extremes = match mode {
        CalibrationMode::Pooled => samples
            .par_iter()
            .map(|t| {
                let mut e = Extremes::new(k);
                e.extend(t.data());
                e
            })
            .reduce(|| Extremes::new(k), Extremes::merge),
        CalibrationMode::PerSample => {
            // The k smallest per-sample minima and k largest per-sample maxima.
            let mut lows = Extremes::new(k);
            let mut highs = Extremes::new(k);
            for t in samples {
                let s = t.stats()?;
                lows.push(s.min as f32);
                highs.push(s.max as f32);
            }
            Extremes { k, smallest: lows.smallest, largest: highs.largest, count: lows.count }
        }
    };
    let count = extremes.count();
    let degraded = count < k;
    let (min, max) = if degraded {
        (f64::from(extremes.smallest[0]), f64::from(extremes.largest[0]))
    } else {
        let mut top = extremes.largest.clone();
        top.reverse();
        (median(&extremes.smallest), median(&top))
    };
    Ok(CalibrationRange { min, max, k, samples: samples.len(), count, degraded })
}

/// Asymmetric unsigned per-layer quantization of an activation tensor,
/// clipping to the calibrated range.
pub fn quantize_activations(t: &Tensor, range: &CalibrationRange, bit_width: u8) -> Result<QuantizedTensor> {
    quantize_uniform(t, &range.params(bit_width)?)
}

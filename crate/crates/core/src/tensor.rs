//! Dense row-major `f32` tensors with an output-channel axis tag.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense tensor of finite `f32` values.
///
/// Immutable after construction; `channel_axis` names the output-channel axis
/// used when a per-channel operation is not given an explicit axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    channel_axis: usize,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::with_channel_axis(shape, data, 0)
    }

    pub fn with_channel_axis(shape: Vec<usize>, data: Vec<f32>, channel_axis: usize) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("tensor rank must be at least 1".into()));
        }
        if let Some(i) = shape.iter().position(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("extent {i} is zero")));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch("element count overflows usize".into()))?;
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        if channel_axis >= shape.len() {
            return Err(invalid(format!(
                "channel axis {channel_axis} out of range for rank {}",
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at element {i}")));
        }
        Ok(Self { shape, data, channel_axis })
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel_axis(&self) -> usize {
        self.channel_axis
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(invalid(format!("axis {axis} out of range for rank {}", self.rank())));
        }
        Ok(())
    }

    /// Maps every flat element index to its index along `axis`.
    pub fn channel_ids(&self, axis: usize) -> Result<Vec<usize>> {
        self.check_axis(axis)?;
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        Ok((0..self.len()).map(|i| (i / inner) % extent).collect())
    }

    /// Flat element indices of each channel along `axis`, in row-major order.
    pub fn channel_indices(&self, axis: usize) -> Result<Vec<Vec<usize>>> {
        self.check_axis(axis)?;
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        Ok((0..extent)
            .map(|c| {
                (0..outer)
                    .flat_map(|o| {
                        let base = o * extent * inner + c * inner;
                        base..base + inner
                    })
                    .collect()
            })
            .collect())
    }

    /// Splits the tensor into `shape[axis]` rank-1 slices, one per channel.
    pub fn channel_views(&self, axis: usize) -> Result<Vec<Tensor>> {
        Ok(self
            .channel_indices(axis)?
            .into_iter()
            .map(|idx| {
                let data: Vec<f32> = idx.iter().map(|&i| self.data[i]).collect();
                Tensor { shape: vec![data.len()], data, channel_axis: 0 }
            })
            .collect())
    }

    /// Inverse of [`Tensor::channel_views`].
    pub fn from_channel_views(views: &[Tensor], shape: Vec<usize>, axis: usize) -> Result<Self> {
        let total: usize = shape.iter().product();
        let mut data = vec![0.0f32; total];
        let template = Tensor::with_channel_axis(shape, data.clone(), axis)?;
        let indices = template.channel_indices(axis)?;
        if indices.len() != views.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} channel views, got {}",
                indices.len(),
                views.len()
            )));
        }
        for (idx, view) in indices.iter().zip(views) {
            if idx.len() != view.len() {
                return Err(Error::ShapeMismatch("channel view length mismatch".into()));
            }
            for (&i, &v) in idx.iter().zip(view.data()) {
                data[i] = v;
            }
        }
        Tensor::with_channel_axis(template.shape, data, axis)
    }

    pub fn stats(&self) -> Result<TensorStats> {
        TensorStats::from_values(&self.data)
    }
}

/// Summary statistics, accumulated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population (divide-by-N) standard deviation.
    pub std: f64,
    pub absmax: f64,
    pub count: usize,
}

impl TensorStats {
    pub fn from_values(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Degenerate("statistics of an empty tensor".into()));
        }
        let n = values.len() as f64;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for &v in values {
            let v = f64::from(v);
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        // Clamp guards the min <= mean <= max invariant against summation rounding.
        let mean = (sum / n).clamp(min, max);
        let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            min,
            max,
            mean,
            std: var.sqrt(),
            absmax: min.abs().max(max.abs()),
            count: values.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_size_mismatch_and_nan() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(Tensor::new(vec![2], vec![0.0, f32::NAN]), Err(Error::Data(_))));
        assert!(matches!(Tensor::new(vec![1], vec![f32::INFINITY]), Err(Error::Data(_))));
    }

    #[test]
    fn channel_views_shapes() {
        let t = Tensor::new(vec![4, 8], (0..32).map(|v| v as f32).collect()).unwrap();
        let rows = t.channel_views(0).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|v| v.len() == 8));
        assert_eq!(rows[1].data()[0], 8.0);
        let cols = t.channel_views(1).unwrap();
        assert_eq!(cols.len(), 8);
        assert!(cols.iter().all(|v| v.len() == 4));
        assert_eq!(cols[2].data(), &[2.0, 10.0, 18.0, 26.0]);

        let r1 = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let views = r1.channel_views(0).unwrap();
        assert_eq!(views.len(), 3);
        assert!(views.iter().all(|v| v.len() == 1));

        assert!(t.channel_views(2).is_err());
    }

    #[test]
    fn channel_ids_match_indices() {
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        for axis in 0..3 {
            let ids = t.channel_ids(axis).unwrap();
            for (c, idx) in t.channel_indices(axis).unwrap().iter().enumerate() {
                assert!(idx.iter().all(|&i| ids[i] == c));
            }
        }
    }

    #[test]
    fn stats_hand_values() {
        let s = TensorStats::from_values(&[-1.0, 0.0, 3.0]).unwrap();
        assert_eq!(s.min, -1.0);
        assert_eq!(s.max, 3.0);
        assert!((s.mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.absmax, 3.0);
        assert_eq!(s.count, 3);

        let c = TensorStats::from_values(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(c.std, 0.0);

        // Brute-force two-pass population std for [-2, 2].
        let xs = [-2.0f64, 2.0];
        let mean = xs.iter().sum::<f64>() / 2.0;
        let oracle = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let s = TensorStats::from_values(&[-2.0, 2.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.std, oracle);
        assert_eq!(s.std, 2.0);

        assert!(matches!(TensorStats::from_values(&[]), Err(Error::Degenerate(_))));
    }
}

//! Integer-coded tensors and the parameters that decode them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pwlq::PwlqParams;
use crate::tensor::Tensor;
use crate::uniform::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerLayer,
    PerChannel,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(Self::PerLayer),
            "per-channel" => Ok(Self::PerChannel),
            other => Err(invalid(format!("unknown granularity '{other}'"))),
        }
    }
}

/// Fixed-width little-endian bit packing, LSB first, padded to a whole byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    width: u8,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedBits {
    pub fn zeros(width: u8, len: usize) -> Self {
        assert!((1..=8).contains(&width), "packed width must be 1..=8 bits");
        Self { width, len, bytes: vec![0; Self::byte_len(width, len)] }
    }

    pub fn from_values(width: u8, values: &[u8]) -> Self {
        let mut bits = Self::zeros(width, values.len());
        for (i, &v) in values.iter().enumerate() {
            bits.set(i, v);
        }
        bits
    }

    pub fn from_bytes(width: u8, len: usize, bytes: Vec<u8>) -> Result<Self> {
        if !(1..=8).contains(&width) {
            return Err(Error::Format(format!("packed width {width} out of range")));
        }
        if bytes.len() != Self::byte_len(width, len) {
            return Err(Error::Format(format!(
                "bitmap of {len} x {width}-bit entries needs {} bytes, found {}",
                Self::byte_len(width, len),
                bytes.len()
            )));
        }
        Ok(Self { width, len, bytes })
    }

    pub fn byte_len(width: u8, len: usize) -> usize {
        (len * usize::from(width)).div_ceil(8)
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> u8 {
        assert!(i < self.len, "index {i} out of bounds ({})", self.len);
        let w = usize::from(self.width);
        let mut v = 0u8;
        for b in 0..w {
            let bit = i * w + b;
            v |= ((self.bytes[bit / 8] >> (bit % 8)) & 1) << b;
        }
        v
    }

    pub fn set(&mut self, i: usize, value: u8) {
        assert!(i < self.len, "index {i} out of bounds ({})", self.len);
        let w = usize::from(self.width);
        assert!(w == 8 || value >> w == 0, "value {value} does not fit in {w} bits");
        for b in 0..w {
            let bit = i * w + b;
            let mask = 1u8 << (bit % 8);
            if (value >> b) & 1 == 1 {
                self.bytes[bit / 8] |= mask;
            } else {
                self.bytes[bit / 8] &= !mask;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Bits needed to index `regions` regions (`⌈log2(regions)⌉`, at least 1).
pub fn region_index_bits(regions: usize) -> u8 {
    let mut bits = 1u8;
    while (1usize << bits) < regions {
        bits += 1;
    }
    bits
}

/// How the integer codes of a [`QuantizedTensor`] decode.
///
/// `params` holds one entry for per-layer tensors and one per channel along
/// the channel axis otherwise. Piecewise encodings always carry the region
/// map and the sign bits; the sign is kept separately because tail-region
/// magnitude 0 decodes to `±p`, which a signed integer cannot distinguish.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Uniform { params: Vec<QuantParams> },
    Pwlq { params: Vec<PwlqParams>, regions: PackedBits, negative: PackedBits },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    channel_axis: usize,
    granularity: Granularity,
    /// Signed codes; for PWLQ `sign(r) × magnitude`.
    codes: Vec<i32>,
    encoding: Encoding,
}

impl QuantizedTensor {
    pub fn new(
        shape: Vec<usize>,
        channel_axis: usize,
        granularity: Granularity,
        codes: Vec<i32>,
        encoding: Encoding,
    ) -> Result<Self> {
        let q = Self { shape, channel_axis, granularity, codes, encoding };
        q.validate()?;
        Ok(q)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channel_axis(&self) -> usize {
        self.channel_axis
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn is_piecewise(&self) -> bool {
        matches!(self.encoding, Encoding::Pwlq { .. })
    }

    pub fn param_count(&self) -> usize {
        match &self.encoding {
            Encoding::Uniform { params } => params.len(),
            Encoding::Pwlq { params, .. } => params.len(),
        }
    }

    pub fn bit_width(&self) -> u8 {
        match &self.encoding {
            Encoding::Uniform { params } => params[0].bit_width,
            Encoding::Pwlq { params, .. } => params[0].bit_width,
        }
    }

    /// Parameter-set index of every element.
    pub fn param_ids(&self) -> Vec<usize> {
        param_ids_for_shape(&self.shape, self.channel_axis, self.granularity)
    }

    fn validate(&self) -> Result<()> {
        let total: usize = self.shape.iter().product();
        if self.shape.is_empty() || self.shape.contains(&0) || total != self.codes.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} does not match {} codes",
                self.shape,
                self.codes.len()
            )));
        }
        if self.channel_axis >= self.shape.len() {
            return Err(invalid(format!("channel axis {} out of range", self.channel_axis)));
        }
        let expected_params = match self.granularity {
            Granularity::PerLayer => 1,
            Granularity::PerChannel => self.shape[self.channel_axis],
        };
        if self.param_count() != expected_params {
            return Err(Error::ShapeMismatch(format!(
                "{:?} tensor needs {expected_params} parameter sets, found {}",
                self.granularity,
                self.param_count()
            )));
        }
        let ids = self.param_ids();
        match &self.encoding {
            Encoding::Uniform { params } => {
                for (i, (&code, &pid)) in self.codes.iter().zip(&ids).enumerate() {
                    if !params[pid].contains_code(code) {
                        return Err(Error::Data(format!("code {code} at element {i} outside its domain")));
                    }
                }
            }
            Encoding::Pwlq { params, regions, negative } => {
                if regions.len() != self.codes.len() || negative.len() != self.codes.len() {
                    return Err(Error::Data("region or sign bitmap length differs from code count".into()));
                }
                let needed = params.iter().map(|p| region_index_bits(p.regions.len())).max().unwrap_or(1);
                if regions.width() < needed {
                    return Err(Error::Data(format!(
                        "region bitmap is {} bits wide, params need {needed}",
                        regions.width()
                    )));
                }
                for (i, (&code, &pid)) in self.codes.iter().zip(&ids).enumerate() {
                    let p = &params[pid];
                    let region = usize::from(regions.get(i));
                    if region >= p.regions.len() {
                        return Err(Error::Data(format!("region {region} at element {i} does not exist")));
                    }
                    let neg = negative.get(i) == 1;
                    if (code < 0 && !neg) || (code > 0 && neg) {
                        return Err(Error::Data(format!("sign bit disagrees with code at element {i}")));
                    }
                    if !p.regions[region].contains_code(code.abs()) {
                        return Err(Error::Data(format!("magnitude {code} at element {i} outside its domain")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Element-wise reconstruction in `f64`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let ids = self.param_ids();
        match &self.encoding {
            Encoding::Uniform { params } => {
                self.codes.iter().zip(&ids).map(|(&c, &pid)| params[pid].dequantize(c)).collect()
            }
            Encoding::Pwlq { params, regions, negative } => self
                .codes
                .iter()
                .zip(&ids)
                .enumerate()
                .map(|(i, (&c, &pid))| {
                    params[pid].decode(usize::from(regions.get(i)), negative.get(i) == 1, c.abs())
                })
                .collect(),
        }
    }

    /// Decoded tensor (`f32` storage).
    pub fn dequantize(&self) -> Result<Tensor> {
        let data = self.reconstruct().into_iter().map(|v| v as f32).collect();
        Tensor::with_channel_axis(self.shape.clone(), data, self.channel_axis)
    }

    /// Same codes, new decode parameters (bias correction).
    pub fn with_uniform_params(&self, params: Vec<QuantParams>) -> Result<Self> {
        match &self.encoding {
            Encoding::Uniform { .. } => Self::new(
                self.shape.clone(),
                self.channel_axis,
                self.granularity,
                self.codes.clone(),
                Encoding::Uniform { params },
            ),
            Encoding::Pwlq { .. } => Err(invalid("tensor is piecewise, not uniform")),
        }
    }

    pub fn with_pwlq_params(&self, params: Vec<PwlqParams>) -> Result<Self> {
        match &self.encoding {
            Encoding::Pwlq { regions, negative, .. } => Self::new(
                self.shape.clone(),
                self.channel_axis,
                self.granularity,
                self.codes.clone(),
                Encoding::Pwlq { params, regions: regions.clone(), negative: negative.clone() },
            ),
            Encoding::Uniform { .. } => Err(invalid("tensor is uniform, not piecewise")),
        }
    }
}

/// Element-to-parameter-set mapping for a row-major shape.
pub(crate) fn param_ids_for_shape(shape: &[usize], channel_axis: usize, granularity: Granularity) -> Vec<usize> {
    let total: usize = shape.iter().product();
    match granularity {
        Granularity::PerLayer => vec![0; total],
        Granularity::PerChannel => {
            let inner: usize = shape[channel_axis + 1..].iter().product();
            let extent = shape[channel_axis];
            (0..total).map(|i| (i / inner) % extent).collect()
        }
    }
}

/// Element-to-parameter-set mapping for a tensor under `granularity`.
pub(crate) fn param_ids_for(t: &Tensor, granularity: Granularity, axis: usize) -> Result<Vec<usize>> {
    match granularity {
        Granularity::PerLayer => Ok(vec![0; t.len()]),
        Granularity::PerChannel => t.channel_ids(axis),
    }
}

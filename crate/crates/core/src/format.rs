//! Binary tensor containers (little-endian throughout).
//!
//! QTNS (real tensors):
//!
//! ```text
//! "QTNS" | u32 version=1 | u32 dtype=0 (f32) | u32 rank | rank × u64 extents
//!        | u32 channel axis | product(extents) × f32 payload
//! ```
//!
//! QTNQ (quantized tensors) shares the header with magic "QTNQ" and
//! dtype 1, followed by a parameter block, one byte per code and, for
//! piecewise tensors, the region and sign bitmaps:
//!
//! ```text
//! u8 scheme (0 uniform, 1 pwlq) | u8 granularity (0 per-layer, 1 per-channel)
//!   | u8 bit width | u8 reserved=0 | u32 parameter-set count | entries
//! uniform entry: f64 r_l | f64 r_u | f64 s | f64 z | u8 signedness (0 symmetric, 1 asymmetric)
//! pwlq entry:    f64 m | f64 shift | u32 K | K × f64 breakpoints
//!                | (K+1) × (f64 lo | f64 hi | f64 s | f64 z)
//! codes:         n × i8 (uniform unsigned codes store their u8 bit pattern)
//! pwlq only:     u8 region width | region bitmap | sign bitmap (LSB first, byte padded)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::pwlq::PwlqParams;
use crate::quantized::{Encoding, Granularity, PackedBits, QuantizedTensor};
use crate::tensor::Tensor;
use crate::uniform::{QuantParams, Signedness};

pub const TENSOR_MAGIC: &[u8; 4] = b"QTNS";
pub const QUANTIZED_MAGIC: &[u8; 4] = b"QTNQ";
pub const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const DTYPE_I8: u32 = 1;

/// Largest bit width whose codes fit the one-byte code storage.
pub const MAX_STORED_BIT_WIDTH: u8 = 8;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

struct Header {
    shape: Vec<usize>,
    channel_axis: usize,
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], dtype: u32, shape: &[usize], channel_axis: usize) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&(channel_axis as u32).to_le_bytes());
}

fn read_header(r: &mut Reader, magic: &[u8; 4], dtype: u32) -> Result<Header> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let found_dtype = r.u32()?;
    if found_dtype != dtype {
        return Err(Error::Format(format!("unsupported dtype code {found_dtype}, expected {dtype}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(Error::Format("rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank.min(64));
    for _ in 0..rank {
        let e = r.u64()?;
        shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?);
    }
    let channel_axis = r.u32()? as usize;
    if channel_axis >= rank {
        return Err(Error::Format(format!("channel axis {channel_axis} out of range for rank {rank}")));
    }
    Ok(Header { shape, channel_axis })
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * t.len());
    write_header(&mut out, TENSOR_MAGIC, DTYPE_F32, t.shape(), t.channel_axis());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let h = read_header(&mut r, TENSOR_MAGIC, DTYPE_F32)?;
    let n = element_count(&h.shape)?;
    let payload = bytes.len() - r.pos;
    if Some(payload) != n.checked_mul(4) {
        return Err(Error::Format(format!(
            "payload of {payload} bytes does not match shape {:?} ({n} × 4 bytes)",
            h.shape
        )));
    }
    let data: Vec<f32> =
        r.take(payload)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at element {i}")));
    }
    if h.shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in shape {:?}", h.shape)));
    }
    Tensor::with_channel_axis(h.shape, data, h.channel_axis)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_tensor(t))?)
}

fn write_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_range(out: &mut Vec<u8>, q: &QuantParams) {
    for v in [q.range_low, q.range_high, q.scale, q.offset] {
        write_f64(out, v);
    }
}

pub fn encode_quantized(q: &QuantizedTensor) -> Result<Vec<u8>> {
    let b = q.bit_width();
    if b > MAX_STORED_BIT_WIDTH {
        return Err(Error::Format(format!("{b}-bit codes do not fit one-byte storage")));
    }
    let mut out = Vec::with_capacity(64 + q.len() * 2);
    write_header(&mut out, QUANTIZED_MAGIC, DTYPE_I8, q.shape(), q.channel_axis());
    let scheme = u8::from(q.is_piecewise());
    let granularity = match q.granularity() {
        Granularity::PerLayer => 0u8,
        Granularity::PerChannel => 1,
    };
    out.extend_from_slice(&[scheme, granularity, b, 0]);
    out.extend_from_slice(&(q.param_count() as u32).to_le_bytes());
    match q.encoding() {
        Encoding::Uniform { params } => {
            for p in params {
                write_range(&mut out, p);
                out.push(match p.signedness {
                    Signedness::SymmetricSigned => 0,
                    Signedness::AsymmetricUnsigned => 1,
                });
            }
            // Unsigned codes up to 255 keep their bit pattern.
            out.extend(q.codes().iter().map(|&c| c as u8));
        }
        Encoding::Pwlq { params, regions, negative } => {
            for p in params {
                write_f64(&mut out, p.bound);
                write_f64(&mut out, p.shift);
                out.extend_from_slice(&(p.breakpoints.len() as u32).to_le_bytes());
                for &bp in &p.breakpoints {
                    write_f64(&mut out, bp);
                }
                for region in &p.regions {
                    write_range(&mut out, region);
                }
            }
            out.extend(q.codes().iter().map(|&c| c as i8 as u8));
            out.push(regions.width());
            out.extend_from_slice(regions.as_bytes());
            out.extend_from_slice(negative.as_bytes());
        }
    }
    Ok(out)
}

fn read_finite(r: &mut Reader) -> Result<f64> {
    let v = r.f64()?;
    if !v.is_finite() {
        return Err(Error::Data("non-finite quantization parameter".into()));
    }
    Ok(v)
}

fn read_region(r: &mut Reader, bit_width: u8, signedness: Signedness) -> Result<QuantParams> {
    let (range_low, range_high, scale, offset) = (read_finite(r)?, read_finite(r)?, read_finite(r)?, read_finite(r)?);
    if !(scale > 0.0) || range_low > range_high {
        return Err(Error::Data(format!("invalid quantizer range [{range_low}, {range_high}] or scale {scale}")));
    }
    Ok(QuantParams { bit_width, range_low, range_high, scale, offset, signedness })
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader::new(bytes);
    let h = read_header(&mut r, QUANTIZED_MAGIC, DTYPE_I8)?;
    let n = element_count(&h.shape)?;
    let (scheme, granularity, b, reserved) = (r.u8()?, r.u8()?, r.u8()?, r.u8()?);
    if reserved != 0 {
        return Err(Error::Format("nonzero reserved byte".into()));
    }
    let granularity = match granularity {
        0 => Granularity::PerLayer,
        1 => Granularity::PerChannel,
        g => return Err(Error::Format(format!("unknown granularity code {g}"))),
    };
    if !(1..=MAX_STORED_BIT_WIDTH).contains(&b) {
        return Err(Error::Format(format!("bit width {b} outside [1, {MAX_STORED_BIT_WIDTH}]")));
    }
    let count = r.u32()? as usize;
    let expected = match granularity {
        Granularity::PerLayer => 1,
        Granularity::PerChannel => h.shape[h.channel_axis],
    };
    if count != expected {
        return Err(Error::Format(format!("{granularity:?} tensor needs {expected} parameter sets, found {count}")));
    }
    let q = match scheme {
        0 => {
            let mut params = Vec::with_capacity(count);
            for _ in 0..count {
                let mut p = read_region(&mut r, b, Signedness::SymmetricSigned)?;
                p.signedness = match r.u8()? {
                    0 => Signedness::SymmetricSigned,
                    1 => Signedness::AsymmetricUnsigned,
                    s => return Err(Error::Format(format!("unknown signedness code {s}"))),
                };
                params.push(p);
            }
            let raw = r.take(n)?;
            let ids = crate::quantized::param_ids_for_shape(&h.shape, h.channel_axis, granularity);
            let codes = raw
                .iter()
                .zip(&ids)
                .map(|(&byte, &pid)| match params[pid].signedness {
                    Signedness::SymmetricSigned => i32::from(byte as i8),
                    Signedness::AsymmetricUnsigned => i32::from(byte),
                })
                .collect();
            QuantizedTensor::new(h.shape, h.channel_axis, granularity, codes, Encoding::Uniform { params })
        }
        1 => {
            if b < 2 {
                return Err(Error::Format("PWLQ needs at least 2 bits".into()));
            }
            let mut params = Vec::with_capacity(count);
            for _ in 0..count {
                let bound = read_finite(&mut r)?;
                let shift = read_finite(&mut r)?;
                let k = r.u32()? as usize;
                if k == 0 || k > crate::pwlq::MAX_BREAKPOINTS {
                    return Err(Error::Format(format!("breakpoint count {k} out of range")));
                }
                let breakpoints = (0..k).map(|_| read_finite(&mut r)).collect::<Result<Vec<_>>>()?;
                // Validate the geometry through the regular constructor, then
                // take the stored (possibly bias-corrected) decode parameters.
                let mut p = PwlqParams::new(b, bound, breakpoints)?;
                for region in p.regions.iter_mut() {
                    *region = read_region(&mut r, b - 1, Signedness::AsymmetricUnsigned)?;
                }
                p.shift = shift;
                params.push(p);
            }
            let codes: Vec<i32> = r.take(n)?.iter().map(|&byte| i32::from(byte as i8)).collect();
            let width = r.u8()?;
            if !(1..=8).contains(&width) {
                return Err(Error::Format(format!("region bitmap width {width} out of range")));
            }
            let regions = PackedBits::from_bytes(width, n, r.take(PackedBits::byte_len(width, n))?.to_vec())?;
            let negative = PackedBits::from_bytes(1, n, r.take(PackedBits::byte_len(1, n))?.to_vec())?;
            QuantizedTensor::new(h.shape, h.channel_axis, granularity, codes, Encoding::Pwlq { params, regions, negative })
        }
        s => return Err(Error::Format(format!("unknown scheme code {s}"))),
    };
    r.finish()?;
    q.map_err(|e| match e {
        Error::ShapeMismatch(m) => Error::Format(m),
        other => other,
    })
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    decode_quantized(&std::fs::read(path)?)
}

pub fn save_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    Ok(std::fs::write(path, encode_quantized(q)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwlq::{quantize_pwlq, quantize_pwlq_per_channel};
    use crate::uniform::{quantize_uniform, quantize_uniform_per_channel};

    fn sample() -> Tensor {
        Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-8, -0.0, 2.75]).unwrap()
    }

    #[test]
    fn tensor_roundtrip_bit_exact() {
        let t = sample();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qtns");
        save_tensor(&path, &sample()).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), sample());
    }

    #[test]
    fn malformed_tensors_rejected() {
        let good = encode_tensor(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_tensor(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_tensor(&bad_version), Err(Error::Format(_))));
        let mut bad_dtype = good.clone();
        bad_dtype[8] = 1;
        assert!(matches!(decode_tensor(&bad_dtype), Err(Error::Format(_))));
        assert!(matches!(decode_tensor(&good[..good.len() - 4]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_tensor(&long), Err(Error::Format(_))));
        let mut nan = good.clone();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&nan), Err(Error::Data(_))));
    }

    #[test]
    fn uniform_quantized_roundtrip() {
        let t = sample();
        for q in [
            quantize_uniform(&t, &QuantParams::symmetric(8, 3.0).unwrap()).unwrap(),
            quantize_uniform(&t, &QuantParams::asymmetric(8, -1.25, 3.0).unwrap()).unwrap(),
            quantize_uniform_per_channel(
                &t,
                0,
                vec![QuantParams::symmetric(4, 3.0).unwrap(), QuantParams::symmetric(4, 2.75).unwrap()],
            )
            .unwrap(),
        ] {
            assert_eq!(decode_quantized(&encode_quantized(&q).unwrap()).unwrap(), q);
        }
    }

    #[test]
    fn pwlq_quantized_roundtrip() {
        let t = sample();
        let single = quantize_pwlq(&t, &PwlqParams::single(4, 3.0, 1.0).unwrap()).unwrap();
        let multi = quantize_pwlq_per_channel(
            &t,
            0,
            vec![
                PwlqParams::new(8, 3.0, vec![0.5, 1.0, 2.0]).unwrap(),
                PwlqParams::new(8, 2.75, vec![0.25, 1.5]).unwrap(),
            ],
        )
        .unwrap();
        for q in [single, multi] {
            let bytes = encode_quantized(&q).unwrap();
            let back = decode_quantized(&bytes).unwrap();
            assert_eq!(back, q);
            let mut truncated = bytes.clone();
            truncated.pop();
            assert!(decode_quantized(&truncated).is_err());
        }
    }

    #[test]
    fn parameter_count_mismatch_rejected() {
        let q = quantize_uniform(&sample(), &QuantParams::symmetric(8, 3.0).unwrap()).unwrap();
        let mut bytes = encode_quantized(&q).unwrap();
        // Header: 4 magic + 4 version + 4 dtype + 4 rank + 2 × 8 extents + 4 axis = 36; then
        // scheme, granularity, bits, reserved.
        bytes[37] = 1;
        assert!(matches!(decode_quantized(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wide_codes_rejected() {
        let q = quantize_uniform(&sample(), &QuantParams::symmetric(12, 3.0).unwrap()).unwrap();
        assert!(matches!(encode_quantized(&q), Err(Error::Format(_))));
    }
}

//! Bit-exact file formats for tensors and emitted images.
//!
//! The tensor container is a single self-describing binary layout used for
//! every array artifact in the pipeline: magic `HYT1`, a dtype code byte
//! (1 = real f64, 2 = complex f64 pairs), a dimension-count byte, the
//! dimensions as little-endian u64, the payload in row-major little-endian
//! order, and a trailing CRC32 of the payload. The CRC makes silent
//! truncation loud. Byte order is little-endian regardless of host.
//!
//! Images are emitted as binary PGM (P5) with a linear clamp-scale to
//! 8 bits, and sampling masks as binary PBM (P4) with 1 = kept cell.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"HYT1";

const DTYPE_REAL: u8 = 1;
const DTYPE_COMPLEX: u8 = 2;
const MAX_NDIM: usize = 8;

/// An n-dimensional array of either real or complex double-precision values.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Real(ArrayD<f64>),
    Complex(ArrayD<Complex64>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Real(a) => a.shape(),
            Tensor::Complex(a) => a.shape(),
        }
    }

    pub fn into_real(self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::Real(a) => Ok(a),
            Tensor::Complex(_) => Err(Error::shape("persist: expected real tensor, found complex")),
        }
    }

    pub fn into_complex(self) -> Result<ArrayD<Complex64>> {
        match self {
            Tensor::Complex(a) => Ok(a),
            Tensor::Real(_) => Err(Error::shape("persist: expected complex tensor, found real")),
        }
    }
}

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_crc_table();

/// CRC32 (IEEE polynomial, reflected) of a byte slice.
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        let idx = ((crc ^ byte as u32) & 0xFF) as usize;
        crc = (crc >> 8) ^ CRC_TABLE[idx];
    }
    crc ^ 0xFFFF_FFFF
}

fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let (dtype, shape) = match tensor {
        Tensor::Real(a) => (DTYPE_REAL, a.shape()),
        Tensor::Complex(a) => (DTYPE_COMPLEX, a.shape()),
    };
    let count: usize = shape.iter().product();
    let elem = if dtype == DTYPE_REAL { 8 } else { 16 };
    let mut out = Vec::with_capacity(4 + 2 + 8 * shape.len() + elem * count + 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &dim in shape {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    let payload_start = out.len();
    match tensor {
        Tensor::Real(a) => {
            for &v in a.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::Complex(a) => {
            for &v in a.as_standard_layout().iter() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
    }
    let crc = crc32(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_tensor(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |check: &str| Error::integrity(format!("persist: {origin}: {check}"));
    if bytes.len() < 6 {
        return Err(fail("file shorter than fixed header"));
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(fail("magic bytes are not HYT1"));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_REAL && dtype != DTYPE_COMPLEX {
        return Err(fail(&format!("unknown dtype code {dtype}")));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(fail(&format!("dimension count {ndim} outside 1..={MAX_NDIM}")));
    }
    let dims_end = 6 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(fail("file truncated inside dimension list"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let raw = u64::from_le_bytes(bytes[6 + 8 * d..6 + 8 * d + 8].try_into().unwrap());
        dims.push(usize::try_from(raw).map_err(|_| fail("dimension exceeds address space"))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("dimension product overflows"))?;
    let elem = if dtype == DTYPE_REAL { 8 } else { 16 };
    let payload_len = count
        .checked_mul(elem)
        .ok_or_else(|| fail("payload size overflows"))?;
    let expected = dims_end + payload_len + 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "file is {} bytes, layout requires {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[dims_end..dims_end + payload_len];
    let stored_crc = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(fail(&format!(
            "payload CRC32 {actual_crc:#010x} does not match stored {stored_crc:#010x}"
        )));
    }
    let shape = IxDyn(&dims);
    if dtype == DTYPE_REAL {
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let raw = payload[8 * i..8 * i + 8].try_into().unwrap();
            values.push(f64::from_le_bytes(raw));
        }
        let array = ArrayD::from_shape_vec(shape, values)
            .map_err(|e| fail(&format!("shape rebuild failed: {e}")))?;
        Ok(Tensor::Real(array))
    } else {
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let re = f64::from_le_bytes(payload[16 * i..16 * i + 8].try_into().unwrap());
            let im = f64::from_le_bytes(payload[16 * i + 8..16 * i + 16].try_into().unwrap());
            values.push(Complex64::new(re, im));
        }
        let array = ArrayD::from_shape_vec(shape, values)
            .map_err(|e| fail(&format!("shape rebuild failed: {e}")))?;
        Ok(Tensor::Complex(array))
    }
}

/// Write a tensor to `path` in the `HYT1` container layout.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor);
    fs::write(path, bytes).map_err(|e| Error::io(format!("persist: writing {}", path.display()), e))
}

/// Read a tensor from `path`, verifying magic, layout, and payload CRC.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("persist: reading {}", path.display()), e))?;
    decode_tensor(&bytes, &path.display().to_string())
}

/// Serialize a tensor to its container byte layout without touching disk.
pub fn tensor_to_bytes(tensor: &Tensor) -> Vec<u8> {
    encode_tensor(tensor)
}

/// Deserialize a tensor from container bytes, verifying integrity.
pub fn tensor_from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor> {
    decode_tensor(bytes, origin)
}

/// Map a finite value in `[lo, hi]` onto an 8-bit gray level.
///
/// Linear clamp-scale with a floor rule, so the exact midpoint lands on 127.
fn gray_level(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).floor() as u8
}

/// Write a real image as a binary 8-bit PGM, clamp-scaling `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: impl AsRef<Path>, image: &ndarray::Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let path = path.as_ref();
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::parameter(format!(
            "persist: pgm scale requires finite hi > lo, got lo={lo}, hi={hi}"
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::parameter("persist: pgm image contains non-finite values"));
    }
    let (h, w) = image.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w);
    for row in image.rows() {
        for &v in row {
            bytes.push(gray_level(v, lo, hi));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("persist: writing {}", path.display()), e))
}

/// Write a boolean mask as a binary PBM (P4), 1 = kept cell.
pub fn write_pbm(path: impl AsRef<Path>, h: usize, w: usize, keep: &[bool]) -> Result<()> {
    let path = path.as_ref();
    if keep.len() != h * w {
        return Err(Error::shape(format!(
            "persist: pbm mask has {} cells, expected {h}x{w}",
            keep.len()
        )));
    }
    let row_bytes = w.div_ceil(8);
    let mut bytes = format!("P4\n{w} {h}\n").into_bytes();
    bytes.reserve(h * row_bytes);
    for r in 0..h {
        let mut packed = vec![0u8; row_bytes];
        for c in 0..w {
            if keep[r * w + c] {
                packed[c / 8] |= 0x80 >> (c % 8);
            }
        }
        bytes.extend_from_slice(&packed);
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("persist: writing {}", path.display()), e))
}

/// Read a binary PBM written by [`write_pbm`].
pub fn read_pbm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("persist: reading {}", path.display()), e))?;
    let fail = |check: &str| Error::integrity(format!("persist: {}: {check}", path.display()));
    let header_end = {
        let mut fields = 0;
        let mut pos = 0;
        while fields < 3 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields += 1;
        }
        if fields < 3 || pos >= bytes.len() {
            return Err(fail("pbm header truncated"));
        }
        pos + 1
    };
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fail("pbm header not ascii"))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P4") {
        return Err(fail("pbm magic is not P4"));
    }
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail("pbm width unreadable"))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail("pbm height unreadable"))?;
    let row_bytes = w.div_ceil(8);
    let data = &bytes[header_end..];
    if data.len() != h * row_bytes {
        return Err(fail(&format!(
            "pbm payload is {} bytes, {h}x{w} requires {}",
            data.len(),
            h * row_bytes
        )));
    }
    let mut keep = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let byte = data[r * row_bytes + c / 8];
            keep[r * w + c] = byte & (0x80 >> (c % 8)) != 0;
        }
    }
    Ok((h, w, keep))
}

/// Write a value as pretty-printed UTF-8 JSON with a trailing newline.
///
/// Struct keys serialize in declaration order, so output is stable.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parameter(format!("persist: serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("persist: writing {}", path.display()), e))
}

/// Read a JSON value written by [`write_json`].
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("persist: reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::integrity(format!("persist: parsing {}: {e}", path.display())))
}

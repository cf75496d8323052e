//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "netpbm",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(malformed(path, "missing P5/P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| malformed(path, format!("header field {text} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(path, "header must end with one whitespace byte"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(path, format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero extent"));
    }
    Ok(Header {
        channels,
        width,
        height,
        offset: pos + 1,
    })
}

/// `[3,h,w]` for P6 or `[1,h,w]` for P5, scaled to [0,1].
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let h = parse_header(bytes, path)?;
    let n = h.channels * h.width * h.height;
    let payload = &bytes[h.offset..];
    if payload.len() < n {
        return Err(malformed(path, format!("payload has {} of {n} bytes", payload.len())));
    }
    // interleaved samples to planar channels
    let plane = h.width * h.height;
    let mut data = vec![T::zero(); n];
    for (i, &b) in payload[..n].iter().enumerate() {
        data[(i % h.channels) * plane + i / h.channels] = T::lit(f64::from(b) / 255.0);
    }
    Tensor::new(vec![h.channels, h.height, h.width], data)
}

fn planes<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        [1, c @ (1 | 3), h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("cannot store {:?} as PPM/PGM", t.shape()))),
    }
}

/// P6 for 3 channels, P5 for 1, quantized by `round(v·255)` after clamping to [0,1].
pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    encode_with(t, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// P5 with every value ≥ 0.5 stored as 255 and the rest as 0.
pub fn encode_mask<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if planes(t)?.0 != 1 {
        return Err(Error::shape(format!("mask must have one channel, got {:?}", t.shape())));
    }
    encode_with(t, |v| if v >= 0.5 { 255 } else { 0 })
}

fn encode_with<T: Real>(t: &Tensor<T>, q: impl Fn(f64) -> u8) -> Result<Vec<u8>> {
    let (c, h, w) = planes(t)?;
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.extend((0..c * plane).map(|i| q(t.data()[(i % c) * plane + i / c].as_f64())));
    Ok(out)
}

pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// A P5 file as a binary `[1,h,w]` tensor (values ≥ 0.5 become 1).
pub fn load_mask<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let t: Tensor<T> = load_image(path)?;
    if t.shape()[0] != 1 {
        return Err(malformed(path, "mask must be a P5 file"));
    }
    Ok(t.map(|v| if v >= T::lit(0.5) { T::one() } else { T::zero() }))
}

pub fn save_image<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn save_mask<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask(t)?).map_err(|e| Error::io(path, e))
}

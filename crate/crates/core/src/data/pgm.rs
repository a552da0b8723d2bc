//! Binary PGM (`P5`, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, ImageError, Result};
use crate::tensor::{Element, Tensor};

/// Decode a P5 byte stream into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::BadMagic(shown));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
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
            return Err(ImageError::Header(format!("missing header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageError::Header(format!("header field {text:?} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::Header("no separator before payload".into())),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(ImageError::Header(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedDepth(maxval));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w * h;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok((w, h, payload[..expected].to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Quantize a value in `[0, 1]` to a byte.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Read a PGM as a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_image<F: Element>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode_pgm(&bytes)?;
    Tensor::new(&[1, h, w], px.iter().map(|&p| F::of(p as f64 / 255.0)).collect())
}

/// Write the trailing two axes of `image` as an 8-bit PGM.
pub fn write_image<F: Element>(image: &Tensor<F>, path: impl AsRef<Path>) -> Result<()> {
    let shape = image.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::Shape(format!(
            "cannot write {shape:?} as a single grayscale image"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let px: Vec<u8> = image.data().iter().map(|v| quantize(v.as_f64())).collect();
    let path = path.as_ref();
    fs::write(path, encode_pgm(w, h, &px)).map_err(|e| Error::io(path, e))
}

//! Binary PPM (P6) and PGM (P5) files with maxval 255.
//!
//! Reading maps byte `p` to `p / 255`; writing clamps to `[0, 1]` and rounds
//! `v · 255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Parses a P5/P6 header, returning (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Pnm(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Pnm("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pnm(format!("malformed header at byte {pos}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pnm("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pnm("missing whitespace after maxval".into()));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Pnm(format!("maxval {maxval} is not 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Pnm(format!("empty image {w}x{h}")));
    }
    Ok((w, h, pos + 1))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Pnm(format!("truncated payload: need {len} bytes")))
}

/// Encodes a `[3, H, W]` image as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let hw = h * w;
    let d = image.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * hw);
    for px in 0..hw {
        for c in 0..3 {
            out.push(quantize(d[c * hw + px]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let hw = h * w;
    let raw = payload(bytes, off, 3 * hw)?;
    let mut data = vec![0.0f32; 3 * hw];
    for px in 0..hw {
        for c in 0..3 {
            data[c * hw + px] = raw[3 * px + c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Encodes raw bytes (label maps) as P5.
pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != width * height {
        return Err(Error::shape(
            "pgm",
            format!("{} bytes for {width}x{height}", bytes.len()),
        ));
    }
    let mut out = header("P5", width, height);
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Decodes a P5 file into (width, height, raw bytes).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    Ok((w, h, payload(bytes, off, w * h)?.to_vec()))
}

/// Quantizes `[0, 1]` gray values to bytes.
pub fn gray_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| quantize(v)).collect()
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(Error::file(path))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(Error::file(path))?)
}

pub fn write_pgm(width: usize, height: usize, bytes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, bytes)?).map_err(Error::file(path))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(Error::file(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_bytes() {
        // 2x2 image, channel c at pixel p = (p + c) / 5
        let img = Tensor::from_fn([3, 2, 2], |i| ((i % 4) + i / 4) as f32 / 5.0);
        let bytes = encode_ppm(&img).unwrap();
        let head = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..head.len()], head);
        assert_eq!(
            &bytes[head.len()..],
            &[0, 51, 102, 51, 102, 153, 102, 153, 204, 153, 204, 255]
        );
    }

    #[test]
    fn zeros_payload() {
        let bytes = encode_ppm(&Tensor::zeros([3, 2, 3])).unwrap();
        assert!(bytes[bytes.len() - 18..].iter().all(|&b| b == 0));
    }

    #[test]
    fn round_trip_bound() {
        let img = Tensor::from_fn([3, 5, 4], |i| (i as f32 * 0.377).fract());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn header_with_comment_and_errors() {
        let ok = b"P5\n# hi\n2 1\n255\n\x07\x09";
        assert_eq!(decode_pgm(ok).unwrap(), (2, 1, vec![7, 9]));
        assert!(decode_pgm(b"P5\n2 1\n15\n\x07\x09").is_err());
        assert!(decode_pgm(b"P5\n2 1\n255\n\x07").is_err());
        assert!(decode_pgm(b"P6\n2 1\n255\n\x07\x09").is_err());
        assert!(decode_pgm(b"P5\n2 x\n255\n").is_err());
    }
}

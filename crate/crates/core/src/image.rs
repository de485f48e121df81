//! Binary PPM (P6) frames and PGM (P5) masks, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Scalar, Tensor};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header, &'a [u8])> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("truncated {magic} header")));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII header".into()))?);
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected magic {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header number `{s}`")));
    let header = Header {
        width: num(fields[1])?,
        height: num(fields[2])?,
        maxval: num(fields[3])?,
    };
    if header.maxval == 0 || header.maxval > 255 {
        return Err(Error::Format(format!("maxval {} is not in 1..=255", header.maxval)));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((header, bytes.get(pos + 1..).unwrap_or(&[])))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm<T: Scalar>(frame: &Tensor<T>) -> Result<Vec<u8>> {
    let [c, h, w] = frame.shape() else {
        return Err(Error::Input(format!("frame must be [3,H,W], got {:?}", frame.shape())));
    };
    if *c != 3 {
        return Err(Error::Input(format!("frame must have 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + i].to_f64().unwrap_or(0.0)));
        }
    }
    Ok(out)
}

/// `[3×H×W]` with samples scaled into `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (hd, raster) = parse_header(bytes, "P6")?;
    let n = hd.width * hd.height;
    if raster.len() < 3 * n {
        return Err(Error::Format(format!("raster has {} bytes, expected {}", raster.len(), 3 * n)));
    }
    let scale = hd.maxval as f64;
    let mut data = vec![T::zero(); 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            data[ch * n + i] = T::lit(raster[3 * i + ch] as f64 / scale);
        }
    }
    Tensor::from_vec([3, hd.height, hd.width], data)
}

/// Set pixels as 255, others 0.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Samples above half of maxval are set.
pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (hd, raster) = parse_header(bytes, "P5")?;
    let n = hd.width * hd.height;
    if raster.len() < n {
        return Err(Error::Format(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    BinaryMask::new(hd.height, hd.width, raster[..n].iter().map(|&v| 2 * v as usize > hd.maxval).collect())
}

pub fn write_ppm<T: Scalar>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    Ok(fs::write(path, encode_ppm(frame)?)?)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ppm_round_trip_is_exact_on_byte_levels() {
        let mut rng = Rng::new(1);
        let frame = Tensor::<f64>::from_fn([3, 5, 7], |_| rng.below(256) as f64 / 255.0);
        let bytes = encode_ppm(&frame).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        let back: Tensor<f64> = decode_ppm(&bytes).unwrap();
        assert!(back.bit_eq(&frame));
    }

    #[test]
    fn pgm_round_trip() {
        let m = BinaryMask::from_fn(4, 6, |y, x| (x + y) % 3 == 0);
        let bytes = encode_pgm(&m);
        assert_eq!(bytes.len(), "P5\n6 4\n255\n".len() + 24);
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn header_comments_and_small_maxval() {
        let mut bytes = b"P5 # mask\n# size\n2 1\n1\n".to_vec();
        bytes.extend([1u8, 0]);
        let m = decode_pgm(&bytes).unwrap();
        assert_eq!(m.bits(), &[true, false]);
    }

    #[test]
    fn malformed_input_is_a_format_error() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm::<f32>(b"P6\n2"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n999\n\0"), Err(Error::Format(_))));
        assert!(encode_ppm(&Tensor::<f32>::zeros([1, 2, 2])).is_err());
    }
}

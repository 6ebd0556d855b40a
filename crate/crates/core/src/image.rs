//! Binary PPM (P6) encoding for `[h × w × 3]` tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub fn encode_ppm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    if image.ndim() != 3 || image.dim(2) != 3 {
        return Err(Error::dim("encode_ppm", image.shape(), &[3]));
    }
    let (h, w) = (image.dim(0), image.dim(1));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        let v = v.to_f64_lossless();
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

/// Nearest-neighbour upscale by an integer factor.
pub fn upscale<S: Scalar>(image: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    if image.ndim() != 3 || factor == 0 {
        return Err(Error::dim("upscale", image.shape(), &[factor]));
    }
    let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
    Ok(Tensor::from_fn(&[h * factor, w * factor, c], |i| {
        let ch = i % c;
        let x = (i / c) % (w * factor) / factor;
        let y = i / c / (w * factor) / factor;
        image.data()[(y * w + x) * c + ch]
    }))
}

/// Parses a binary P6 image with maxval 255 into `[h × w × 3]` in `[0, 1]`.
pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let bad = |m: &str| Error::InvalidArgument(format!("invalid PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = &bytes[pos + 1..];
    if body.len() < w * h * 3 {
        return Err(bad("pixel data is truncated"));
    }
    let data = body[..w * h * 3].iter().map(|&b| S::of(b as f64 / 255.0)).collect();
    Tensor::new(vec![h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let img = Tensor::<f64>::from_fn(&[2, 3, 3], |i| (i * 13 % 256) as f64 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm::<f64>(&bytes).unwrap(), img);
        assert!(decode_ppm::<f64>(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn upscale_repeats_pixels() {
        let img = Tensor::<f64>::from_fn(&[1, 2, 3], |i| i as f64);
        let up = upscale(&img, 2).unwrap();
        assert_eq!(up.shape(), &[2, 4, 3]);
        assert_eq!(&up.data()[..6], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert_eq!(&up.data()[12..15], &[0.0, 1.0, 2.0]);
    }
}

//! Binary Netpbm images: PPM (P6, RGB) and PGM (P5, grayscale), maxval 255.
//! <https://netpbm.sourceforge.net/doc/ppm.html>
//!
//! Decoded images are `[H, W, C]` tensors with values in `[0, 1]` (C = 3 for
//! P6, 1 for P5).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "PNM";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments, then reads one ASCII token.
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(FORMAT, "header ended early")),
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::format(FORMAT, "non-ASCII header"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse::<usize>()
            .map_err(|_| Error::format(FORMAT, format!("bad {what} {tok:?}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(FORMAT, format!("unsupported magic {other:?}"))),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(FORMAT, format!("maxval {maxval} (only 255 is supported)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(FORMAT, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(FORMAT, "missing whitespace after maxval")),
    }
    let raster = &bytes[cur.pos..];
    let expected = width * height * channels;
    if raster.len() != expected {
        return Err(Error::format(
            FORMAT,
            format!("{width}x{height}x{channels} raster needs {expected} bytes, found {}", raster.len()),
        ));
    }
    Tensor::from_vec(
        [height, width, channels],
        raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

fn header(t: &Tensor, comment: Option<&str>) -> Result<(Vec<u8>, usize)> {
    let [h, w, c] = t.hwc()?;
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::shape(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut head = format!("{magic}\n");
    for line in comment.into_iter().flat_map(str::lines) {
        head.push_str("# ");
        head.push_str(line);
        head.push('\n');
    }
    head.push_str(&format!("{w} {h}\n255\n"));
    Ok((head.into_bytes(), h * w * c))
}

/// Quantizes `[0, 1]` values to bytes (`round(v * 255)`, clamped).
/// Lossless for tensors produced by [`decode_pnm`].
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    t.check_finite("PNM pixels")?;
    let (mut out, n) = header(t, None)?;
    out.reserve(n);
    out.extend(t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Maps the tensor's own `[min, max]` onto `[0, 255]`. A constant image
/// becomes mid-gray 128. Each line of `comment` becomes a `#` header line.
pub fn encode_pnm_rescaled(t: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    t.check_finite("PNM pixels")?;
    let (mut out, n) = header(t, comment)?;
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.reserve(n);
    if hi == lo {
        out.extend(std::iter::repeat_n(128u8, n));
    } else {
        let span = hi - lo;
        out.extend(t.data().iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a P6 image; P5 input is an error.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let t = read_pnm(path)?;
    if t.dims()[2] != 3 {
        return Err(Error::format(FORMAT, format!("{} is not a P6 image", path.display())));
    }
    Ok(t)
}

/// Reads a P5 image; P6 input is an error.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let t = read_pnm(path)?;
    if t.dims()[2] != 1 {
        return Err(Error::format(FORMAT, format!("{} is not a P5 image", path.display())));
    }
    Ok(t)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(t: &Tensor, path: &Path) -> Result<()> {
    if t.hwc()?[2] != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {}", t.shape())));
    }
    write_bytes(path, &encode_pnm(t)?)
}

pub fn write_pgm(t: &Tensor, path: &Path) -> Result<()> {
    if t.hwc()?[2] != 1 {
        return Err(Error::shape(format!("PGM needs 1 channel, got {}", t.shape())));
    }
    write_bytes(path, &encode_pnm(t)?)
}

/// Writes a 1- or 3-channel tensor after per-image min-max rescaling.
pub fn write_rescaled(t: &Tensor, path: &Path, comment: Option<&str>) -> Result<()> {
    write_bytes(path, &encode_pnm_rescaled(t, comment)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_p6_header() {
        let t = Tensor::from_fn([2, 2, 3], |i| i as f64 / 11.0).unwrap();
        let bytes = encode_pnm(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }

    #[test]
    fn decode_with_comments() {
        let mut bytes = b"P5\n# made by hand\n3 1 # width height\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.dims(), &[1, 3, 1]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_pnm(b"P6\n1 1\n255\n\0\0").is_err());
        assert!(decode_pnm(b"P6\n1 1\n255\n\0\0\0\0").is_err());
        assert!(decode_pnm(b"P6\nx 1\n255\n\0\0\0").is_err());
        assert!(decode_pnm(b"P6\n1").is_err());
        assert!(decode_pnm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn constant_image_rescales_to_mid_gray() {
        let t = Tensor::full([2, 3, 1], -4.2).unwrap();
        let bytes = encode_pnm_rescaled(&t, None).unwrap();
        assert!(bytes.ends_with(&[128; 6]));
    }

    #[test]
    fn rescale_spans_full_range() {
        let t = Tensor::from_vec([1, 3, 1], vec![-2.0, 0.0, 2.0]).unwrap();
        let bytes = encode_pnm_rescaled(&t, Some("seed=3\nmode=MinP-S")).unwrap();
        assert!(bytes.starts_with(b"P5\n# seed=3\n# mode=MinP-S\n3 1\n255\n"));
        assert!(bytes.ends_with(&[0, 128, 255]));
        assert_eq!(decode_pnm(&bytes).unwrap().dims(), &[1, 3, 1]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let t = Tensor::from_fn([3, 2, 3], |i| (i * 14) as f64 / 255.0).unwrap();
        write_ppm(&t, &path).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), t);
        assert!(read_pgm(&path).is_err());
        assert!(write_pgm(&t, &path).is_err());
    }

    proptest! {
        #[test]
        fn p6_bytes_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let raster: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&raster);
            let t = decode_pnm(&bytes).unwrap();
            prop_assert_eq!(encode_pnm(&t).unwrap(), bytes);
        }
    }
}

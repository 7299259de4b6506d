//! Binary 8-bit PGM (`P5`) and PPM (`P6`) images.

use std::fs;
use std::path::Path;

use crate::error::{FdnError, Result};
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FdnError::format(format!(
                "truncated or malformed header: missing {what}"
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FdnError::format(format!("bad {what}")))
    }
}

/// Decodes a P5/P6 image into a `(1, c, h, w)` tensor with values `/ 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        return Err(FdnError::format("truncated header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(FdnError::format(format!(
                "unsupported image format {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(FdnError::format(format!(
            "maxval {maxval} unsupported (need 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(FdnError::format("truncated header"));
    }
    let raster = &bytes[cur.pos + 1..];
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| FdnError::format("image too large"))?;
    if raster.len() < need {
        return Err(FdnError::format(format!(
            "truncated raster: {} of {need} bytes",
            raster.len()
        )));
    }
    let hw = width * height;
    let mut data = vec![0.0; need];
    for (i, &v) in raster[..need].iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * hw + pixel] = v as f64 / 255.0;
    }
    Tensor::from_vec([1, channels, height, width], data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Encodes the first batch entry of a 1- or 3-channel tensor. Values are
/// clamped to `[0, 1]`, scaled by 255 and rounded to nearest.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let [_, c, h, w] = image.dims();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(FdnError::format(format!("cannot write {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = image.sample(0);
    let hw = h * w;
    out.reserve(c * hw);
    for p in 0..hw {
        for ch in 0..c {
            out.push(to_byte(plane[ch * hw + p]));
        }
    }
    Ok(out)
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as a save/load would.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| to_byte(v) as f64 / 255.0).expect("finite")
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_values() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.dims(), [1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn p6_channels() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n1 # width done\n1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[0.2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_pnm(b"P4\n1 1\n").is_err());
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n1").is_err());
        assert!(decode_pnm(b"").is_err());
    }

    #[test]
    fn encode_round_trip() {
        let t = Tensor::from_vec([1, 3, 1, 2], vec![0.0, 1.0, 0.5, 2.0, -1.0, 0.25]).unwrap();
        let bytes = encode_pnm(&t).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 0, 255, 255, 64]);
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back, quantize(&t));
    }
}

//! Binary netpbm images: P6 (RGB) and P5 (grey), 8-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a P6 or P5 file into `[C, H, W]` with values scaled to `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingImage(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Tensor> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Image(format!("unsupported magic `{m}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported geometry {w}x{h} maxval {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * channels {
        return Err(Error::Image(format!(
            "expected {} raster bytes, found {}",
            w * h * channels,
            raster.len()
        )));
    }
    let scale = maxval as f64;
    let plane = w * h;
    let values = (0..channels * plane)
        .map(|i| {
            let (c, p) = (i / plane, i % plane);
            raster[p * channels + c] as f64 / scale
        })
        .collect();
    Tensor::new(vec![channels, h, w], values)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("[1|3, H, W] image", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 3 { "P6" } else { "P5" }).into_bytes();
    let plane = h * w;
    let v = image.values();
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(v[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Writes a 3-channel image as P6 or a 1-channel image as P5, clamping to
/// `[0, 1]` and rounding to 8 bits.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

/// Writes an `h x w` grid of values in `[0, 1]` as a P5 greyscale image.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let t = Tensor::new(vec![1, height, width], values.to_vec())?;
    write_ppm(path, &t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_values_round_trip_exactly() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| ((i * 37) % 256) as f64 / 255.0);
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_grey() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x00\xff".to_vec();
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.values(), &[0.0, 1.0]);
    }

    #[test]
    fn interleaving_is_channel_last_on_disk() {
        let bytes = b"P6 1 1 255\n\x0a\x14\x1e".to_vec();
        let t = decode(&bytes).unwrap();
        assert_eq!(t.values(), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(decode(b"P3 1 1 255\n\x00").is_err());
        assert!(decode(b"P6 2 2 255\n\x00").is_err());
        assert!(decode(b"P6 2").is_err());
        assert!(encode(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}

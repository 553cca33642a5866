//! Binary PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use super::{Image, ImagingError, Result};

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::Ppm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    if magic != "P6" {
        return Err(ImagingError::Ppm(format!("expected magic P6, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = next_token()?;
        tok.parse().map_err(|_| ImagingError::Ppm(format!("bad {what} {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImagingError::Ppm(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).unwrap_or_default();
    let expected = width * height * 3;
    if data.len() < expected {
        return Err(ImagingError::Ppm(format!("raster has {} bytes, expected {expected}", data.len())));
    }
    let scale = maxval as f32;
    let pixels = data[..expected].iter().map(|&b| (b as f32 / scale).min(1.0)).collect();
    Image::from_pixels(height, width, pixels)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|source| ImagingError::Io { path: path.to_path_buf(), source })?;
    decode_ppm(&bytes).map_err(|e| match e {
        ImagingError::Ppm(msg) => ImagingError::Ppm(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|source| ImagingError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
    }

    proptest! {
        #[test]
        fn quantized_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let bytes: Vec<u8> = (0..h * w * 3).map(|i| (seed.rotate_left(i as u32 % 64) as u8) ^ i as u8).collect();
            let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
            file.extend(&bytes);
            let img = decode_ppm(&file).unwrap();
            prop_assert_eq!(encode_ppm(&img), file);
        }
    }
}

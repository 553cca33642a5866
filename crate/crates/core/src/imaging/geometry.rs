use super::{clamp_unit, Image, ImagingError, Result};

/// Per-edge crop offsets in pixels. Positive values move an edge inward,
/// negative values move it outward over zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CropOffsets {
    pub top: i32,
    pub bottom: i32,
    pub left: i32,
    pub right: i32,
}

impl CropOffsets {
    pub fn is_zero(&self) -> bool {
        *self == CropOffsets::default()
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        for px in row.chunks_exact(3).rev() {
            out.extend_from_slice(px);
        }
    }
    Image::from_raw(h, w, out)
}

/// Bilinear sample with zero contribution from neighbors outside the image.
#[inline]
fn sample_zero_fill(image: &Image, sy: f32, sx: f32) -> [f32; 3] {
    let (h, w) = (image.height() as i64, image.width() as i64);
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let mut acc = [0.0f32; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let y = y0 + dy;
        if y < 0 || y >= h || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let x = x0 + dx;
            if x < 0 || x >= w || wx == 0.0 {
                continue;
            }
            let p = image.pixel(y as usize, x as usize);
            let wgt = wy * wx;
            for c in 0..3 {
                acc[c] += wgt * p[c];
            }
        }
    }
    acc
}

/// Rotates about the image center by `degrees` (counter-clockwise on screen).
/// Output pixels whose source falls outside the image fade to zero.
pub fn rotate(image: &Image, degrees: f32) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let dy = y as f32 - cy;
        for x in 0..w {
            let dx = x as f32 - cx;
            // Inverse map: rotate the output offset back by -theta.
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            out.extend(sample_zero_fill(image, sy, sx).map(clamp_unit));
        }
    }
    Image::from_raw(h, w, out)
}

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(ImagingError::EmptyImage { height: out_h, width: out_w });
    }
    let (h, w) = (image.height(), image.width());
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (image.pixel(y0, x0), image.pixel(y0, x1), image.pixel(y1, x0), image.pixel(y1, x1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                out.push(clamp_unit(top + (bot - top) * fy));
            }
        }
    }
    Ok(Image::from_raw(out_h, out_w, out))
}

/// Cuts the offset region (zero-padded where it leaves the image) and
/// resizes it back to the original shape.
pub fn crop_with_offsets(image: &Image, offsets: CropOffsets) -> Result<Image> {
    if offsets.is_zero() {
        return Ok(image.clone());
    }
    let (h, w) = (image.height() as i64, image.width() as i64);
    let rh = h - offsets.top as i64 - offsets.bottom as i64;
    let rw = w - offsets.left as i64 - offsets.right as i64;
    if rh <= 0 || rw <= 0 {
        return Err(ImagingError::DegenerateCrop { offsets, height: rh, width: rw });
    }
    let mut region = vec![0.0f32; (rh * rw * 3) as usize];
    for ry in 0..rh {
        let sy = ry + offsets.top as i64;
        if sy < 0 || sy >= h {
            continue;
        }
        for rx in 0..rw {
            let sx = rx + offsets.left as i64;
            if sx < 0 || sx >= w {
                continue;
            }
            let dst = ((ry * rw + rx) * 3) as usize;
            region[dst..dst + 3].copy_from_slice(&image.pixel(sy as usize, sx as usize));
        }
    }
    let region = Image::from_raw(rh as usize, rw as usize, region);
    resize_bilinear(&region, h as usize, w as usize)
}

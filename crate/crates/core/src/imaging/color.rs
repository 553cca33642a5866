use super::{clamp_unit, Image};

/// Per-pixel hue, saturation and value, all in the unit interval (hue in `[0, 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

#[inline]
pub(crate) fn rgb_to_hsv_pixel(r: f32, g: f32, b: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, s, v];
    }
    let sector = if max == r {
        let t = (g - b) / delta;
        if t < 0.0 {
            t + 6.0
        } else {
            t
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    [wrap_hue(sector / 6.0), s, v]
}

#[inline]
pub(crate) fn hsv_to_rgb_pixel(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = wrap_hue(h) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match sector as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(clamp_unit)
}

#[inline]
fn wrap_hue(h: f32) -> f32 {
    let w = h.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Hexcone RGB → HSV conversion.
pub fn rgb_to_hsv(image: &Image) -> HsvImage {
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| rgb_to_hsv_pixel(p[0], p[1], p[2]))
        .collect();
    HsvImage { height: image.height(), width: image.width(), pixels }
}

/// Inverse hexcone conversion; results are clamped to `[0, 1]`.
pub fn hsv_to_rgb(hsv: &HsvImage) -> Image {
    let pixels = hsv
        .pixels
        .chunks_exact(3)
        .flat_map(|p| hsv_to_rgb_pixel(p[0], clamp_unit(p[1]), clamp_unit(p[2])))
        .collect();
    Image::from_raw(hsv.height, hsv.width, pixels)
}

/// Shifts hue (wrapping modulo 1) and scales saturation and value (clamped).
pub fn color_jitter(image: &Image, hue_shift: f32, sat_scale: f32, val_scale: f32) -> Image {
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| {
            let [h, s, v] = rgb_to_hsv_pixel(p[0], p[1], p[2]);
            hsv_to_rgb_pixel(
                h + hue_shift,
                (s * sat_scale).clamp(0.0, 1.0),
                (v * val_scale).clamp(0.0, 1.0),
            )
        })
        .collect();
    Image::from_raw(image.height(), image.width(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn px(rgb: [f32; 3]) -> Image {
        Image::from_pixels(1, 1, rgb.to_vec()).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn primaries_and_grays() {
        assert_eq!(rgb_to_hsv(&px([1.0, 0.0, 0.0])).pixels, vec![0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv(&px([0.5, 0.5, 0.5])).pixels, vec![0.0, 0.0, 0.5]);
        let red = hsv_to_rgb(&HsvImage { height: 1, width: 1, pixels: vec![0.0, 1.0, 1.0] });
        assert_eq!(red.pixels(), &[1.0, 0.0, 0.0]);
        for h in [0.0, 0.2, 0.5, 0.99] {
            let g = hsv_to_rgb(&HsvImage { height: 1, width: 1, pixels: vec![h, 0.0, 0.3] });
            assert_eq!(g.pixels(), &[0.3, 0.3, 0.3]);
        }
    }

    #[test]
    fn hue_stays_below_one() {
        // Tiny negative sector arithmetic must not produce hue == 1.
        let hsv = rgb_to_hsv(&px([1.0, 0.0, 1e-9]));
        assert!(hsv.pixels[0] < 1.0 && hsv.pixels[0] >= 0.0);
    }

    #[test]
    fn round_trip_random_pixels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<f32> = (0..3000).map(|_| rng.gen::<f32>()).collect();
        let img = Image::from_pixels(1000, 1, pixels).unwrap();
        let back = hsv_to_rgb(&rgb_to_hsv(&img));
        assert!(close(back.pixels(), img.pixels(), 1e-4));
    }

    #[test]
    fn jitter_identity_and_gray() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pixels: Vec<f32> = (0..300).map(|_| rng.gen::<f32>()).collect();
        let img = Image::from_pixels(10, 10, pixels).unwrap();
        assert!(close(color_jitter(&img, 0.0, 1.0, 1.0).pixels(), img.pixels(), 1e-4));

        let gray = Image::filled(3, 3, [0.4, 0.4, 0.4]).unwrap();
        let j = color_jitter(&gray, 0.37, 1.8, 1.0);
        for p in j.pixels().chunks_exact(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn red_shifted_a_third_is_green() {
        let g = color_jitter(&px([1.0, 0.0, 0.0]), 1.0 / 3.0, 1.0, 1.0);
        assert!(close(g.pixels(), &[0.0, 1.0, 0.0], 1e-4), "{:?}", g.pixels());
    }
}

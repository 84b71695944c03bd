//! Separable Gaussian smoothing with reflected borders.

use super::image::GrayImage;
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps, radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * (sigma as f64) * (sigma as f64);
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / denom).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|&t| (t / sum) as f32).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n` (`... b a | a b c ...`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Gaussian blur on a float plane. `sigma == 0` returns a copy.
pub fn gaussian_blur_f32(data: &[f32], width: usize, height: usize, sigma: f32) -> Result<Vec<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    assert_eq!(data.len(), width * height);
    if sigma == 0.0 {
        return Ok(data.to_vec());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;

    let mut tmp = vec![0f32; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0f32;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * row[reflect(x as i64 + k as i64 - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0f32; data.len()];
    for y in 0..height {
        for (k, &wk) in kernel.iter().enumerate() {
            let sy = reflect(y as i64 + k as i64 - r, height);
            let src = &tmp[sy * width..(sy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    Ok(out)
}

/// Gaussian blur of an 8-bit image; quantized once at the end.
pub fn gaussian_blur(img: &GrayImage, sigma: f32) -> Result<GrayImage> {
    let out = gaussian_blur_f32(&img.to_f32(), img.width(), img.height(), sigma)?;
    GrayImage::from_f32(img.width(), img.height(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct 2-D convolution with an unnormalized-then-normalized 2-D kernel
    /// over an explicitly reflected plane.
    fn direct_blur(data: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as i64;
        let mut k2 = Vec::new();
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                k2.push((dx, dy, v));
                total += v;
            }
        }
        let mirror = |i: i64, n: i64| -> i64 {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - i - 1;
                } else {
                    return i;
                }
            }
        };
        let mut out = vec![0.0; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for &(dx, dy, v) in &k2 {
                    let sx = mirror(x + dx, w as i64);
                    let sy = mirror(y + dy, h as i64);
                    acc += v * data[(sy * w as i64 + sx) as usize] as f64;
                }
                out[(y * w as i64 + x) as usize] = acc / total;
            }
        }
        out
    }

    #[test]
    fn sigma_zero_is_identity() {
        let img = GrayImage::from_fn(13, 9, |x, y| (x * 19 + y * 7) as u8);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn negative_sigma_rejected() {
        let img = GrayImage::new(4, 4, 1);
        assert!(gaussian_blur(&img, -0.5).is_err());
    }

    #[test]
    fn constant_image_preserved() {
        for sigma in [0.3, 1.0, 2.5, 7.0] {
            let img = GrayImage::new(11, 17, 93);
            assert_eq!(gaussian_blur(&img, sigma).unwrap(), img);
        }
    }

    #[test]
    fn impulse_mass_conserved_and_matches_direct_convolution() {
        let (w, h) = (33, 33);
        let mut data = vec![0f32; w * h];
        data[16 * w + 16] = 255.0;
        let out = gaussian_blur_f32(&data, w, h, 2.0).unwrap();
        let sum: f32 = out.iter().sum();
        assert!((sum - 255.0).abs() <= 2.55, "sum {sum}");
        let oracle = direct_blur(&data, w, h, 2.0);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn reflection_near_borders_matches_direct_convolution() {
        let (w, h) = (7, 5);
        let data: Vec<f32> = (0..w * h).map(|i| ((i * 37) % 251) as f32).collect();
        let out = gaussian_blur_f32(&data, w, h, 1.7).unwrap();
        let oracle = direct_blur(&data, w, h, 1.7);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn blur_is_linear_within_quantization(
            seed in prop::collection::vec(0u8..=60, 64),
            scale in 1u8..=4,
            sigma in 0.5f32..3.0,
        ) {
            let img = GrayImage::from_raw(8, 8, seed.clone()).unwrap();
            let scaled = GrayImage::from_raw(8, 8, seed.iter().map(|&v| v * scale).collect()).unwrap();
            let a = gaussian_blur(&scaled, sigma).unwrap();
            let b = gaussian_blur(&img, sigma).unwrap();
            for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
                let diff = (x as f32 - scale as f32 * y as f32).abs();
                prop_assert!(diff <= 0.5 * scale as f32 + 0.5 + 1e-3);
            }
        }
    }
}

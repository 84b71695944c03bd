//! Otsu global thresholding.

use super::image::{BinaryMask, GrayImage};

/// Which side of the threshold counts as foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Polarity {
    /// `pixel > threshold` is foreground (bright objects on a dark board).
    #[default]
    BrightForeground,
    /// `pixel <= threshold` is foreground.
    DarkForeground,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtsuResult {
    pub threshold: u8,
    pub mask: BinaryMask,
}

pub fn histogram(pixels: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &p in pixels {
        hist[p as usize] += 1;
    }
    hist
}

/// Threshold maximizing the between-class variance of a 256-bin histogram.
///
/// Class 0 holds levels `<= t`. Ties go to the smallest `t`. A histogram with
/// a single occupied level returns that level.
pub fn otsu_level(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    if total == 0 {
        return 0;
    }

    // sigma_b^2 * N^2 = (S * n0 - N * s0)^2 / (n0 * n1)
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    let mut best = 0.0f64;
    let mut best_t: Option<u8> = None;
    for (t, &h) in hist.iter().enumerate() {
        n0 += h;
        s0 += t as u64 * h;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (sum_all as i128 * n0 as i128 - total as i128 * s0 as i128) as f64;
        let score = diff * diff / (n0 as f64 * n1 as f64);
        if best_t.is_none() || score > best {
            best = score;
            best_t = Some(t as u8);
        }
    }
    match best_t {
        Some(t) => t,
        // Only one occupied level.
        None => hist.iter().position(|&h| h > 0).unwrap_or(0) as u8,
    }
}

/// Otsu threshold and the resulting foreground mask (`pixel > threshold`).
///
/// A constant image yields `threshold == value` and an empty mask.
pub fn otsu_threshold(img: &GrayImage) -> OtsuResult {
    otsu_threshold_with(img, Polarity::BrightForeground)
}

pub fn otsu_threshold_with(img: &GrayImage, polarity: Polarity) -> OtsuResult {
    let threshold = otsu_level(&histogram(img.pixels()));
    let constant = img.pixels().iter().all(|&p| p == img.pixels()[0]);
    let mask = BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        if constant {
            return false;
        }
        let p = img.get(x, y);
        match polarity {
            Polarity::BrightForeground => p > threshold,
            Polarity::DarkForeground => p <= threshold,
        }
    });
    OtsuResult { threshold, mask }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: exact rational between-class variance for every
    /// candidate threshold, computed from the raw pixel list.
    pub(crate) fn brute_force_otsu(pixels: &[u8]) -> u8 {
        let n = pixels.len() as u128;
        let s: u128 = pixels.iter().map(|&p| p as u128).sum();
        // (numerator, denominator) of the best score so far.
        let mut best: Option<(u128, u128, u8)> = None;
        for t in 0..=255u8 {
            let n0 = pixels.iter().filter(|&&p| p <= t).count() as u128;
            let s0: u128 = pixels.iter().filter(|&&p| p <= t).map(|&p| p as u128).sum();
            let n1 = n - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let d = (s * n0) as i128 - (n * s0) as i128;
            let num = (d * d) as u128;
            let den = n0 * n1;
            let better = match best {
                None => true,
                Some((bn, bd, _)) => num * bd > bn * den,
            };
            if better {
                best = Some((num, den, t));
            }
        }
        best.map(|b| b.2).unwrap_or(pixels[0])
    }

    #[test]
    fn two_level_image_splits_the_halves() {
        let img = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0 } else { 255 });
        let r = otsu_threshold(&img);
        assert!(r.threshold < 255);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(r.mask.get(x, y), x >= 8);
            }
        }
    }

    #[test]
    fn constant_image_is_degenerate_not_error() {
        let img = GrayImage::new(9, 5, 17);
        let r = otsu_threshold(&img);
        assert_eq!(r.threshold, 17);
        assert!(r.mask.is_empty());
    }

    #[test]
    fn inverted_polarity_selects_dark_side() {
        let img = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 10 } else { 200 });
        let r = otsu_threshold_with(&img, Polarity::DarkForeground);
        assert_eq!(r.mask.count(), 128);
        assert!(r.mask.get(0, 0));
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(pixels in prop::collection::vec(any::<u8>(), 1..600)) {
            let n = pixels.len();
            let img = GrayImage::from_raw(n, 1, pixels.clone()).unwrap();
            prop_assert_eq!(otsu_threshold(&img).threshold, brute_force_otsu(&pixels));
        }

        #[test]
        fn matches_exhaustive_search_on_few_levels(
            pixels in prop::collection::vec(prop::sample::select(vec![3u8, 40, 41, 200, 254]), 1..200)
        ) {
            let n = pixels.len();
            let img = GrayImage::from_raw(n, 1, pixels.clone()).unwrap();
            prop_assert_eq!(otsu_threshold(&img).threshold, brute_force_otsu(&pixels));
        }
    }
}

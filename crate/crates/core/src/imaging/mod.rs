//! Low-level imaging primitives shared by every pipeline stage.
//!
//! All functions are pure: they read their inputs and return new values.
//! Intermediate arithmetic is done in floating point; 8-bit quantization
//! happens only when producing a [`GrayImage`].

pub mod blur;
pub mod circle;
pub mod components;
pub mod contour;
pub mod image;
pub mod log;
pub mod otsu;

pub use self::blur::{gaussian_blur, gaussian_blur_f32};
pub use self::circle::{fit_circle, fit_circle_points, CircleFit};
pub use self::components::{connected_components, BoundingBox, Connectivity, LabeledRegions, Region};
pub use self::contour::{trace_contours, Contour};
pub use self::image::{load_image, load_mask, save_image, save_mask, BinaryMask, GrayImage};
pub use self::log::{laplacian_of_gaussian, LogResult};
pub use self::otsu::{otsu_threshold, otsu_threshold_with, OtsuResult, Polarity};

/// Disc of pixel centers within `r` of `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disc {
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, r }
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }

    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x as f64, y as f64))
    }

    pub fn pixel_count(&self, width: usize, height: usize) -> usize {
        self.mask(width, height).count()
    }
}

#[cfg(test)]
mod tests {
    use super::Disc;

    #[test]
    fn radius_20_disc_rasterizes_to_gauss_circle_count() {
        // Lattice points with x^2 + y^2 <= 400.
        let brute = (-20i64..=20)
            .flat_map(|x| (-20i64..=20).map(move |y| (x, y)))
            .filter(|(x, y)| x * x + y * y <= 400)
            .count();
        assert_eq!(brute, 1257);
        assert_eq!(Disc::new(32.0, 32.0, 20.0).pixel_count(64, 64), brute);
        assert!((brute as f64 - std::f64::consts::PI * 400.0).abs() < 1.0);
    }
}

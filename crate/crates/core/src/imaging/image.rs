//! Pixel containers and PNG I/O.

use std::path::Path;

use image::{ColorType, ImageReader};

use crate::error::{Error, Result};

/// 8-bit single-channel image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    /// Creates an image filled with `value`. Panics on a zero dimension.
    pub fn new(width: usize, height: usize, value: u8) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image from a function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut img = Self::new(width, height, 0);
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(x, y);
            }
        }
        img
    }

    /// Quantizes float samples (rounded, clamped to 0..=255).
    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Self::from_raw(width, height, data.iter().map(|&v| quantize(v)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel at signed coordinates, `None` outside the image.
    #[inline]
    pub fn get_checked(&self, x: i64, y: i64) -> Option<u8> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.pixels[y as usize * self.width + x as usize])
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }

    /// Copies the `w`x`h` window at `(x0, y0)`; out-of-bounds pixels become `fill`.
    pub fn window(&self, x0: i64, y0: i64, w: usize, h: usize, fill: u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            self.get_checked(x0 + x as i64, y0 + y as i64).unwrap_or(fill)
        })
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Binary image, row-major, values in {0, 1}.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    #[inline]
    pub fn get_checked(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates in raster order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{} mask",
                self.width, self.height, other.width, other.height
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// {0, 1} -> {0, 255} for storage.
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Any nonzero pixel is foreground.
    pub fn from_image(img: &GrayImage) -> BinaryMask {
        BinaryMask {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p != 0).collect(),
        }
    }
}

/// Loads an 8-bit grayscale PNG (or any format the `image` crate decodes
/// to 8-bit luma). Color and 16-bit inputs are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "unrecognized file signature".into(),
        });
    }
    let decoded = reader.decode().map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    match decoded.color() {
        ColorType::L8 => {}
        other => {
            return Err(Error::NotGrayscale {
                path: path.to_path_buf(),
                found: format!("{other:?}"),
            })
        }
    }
    let luma = decoded.into_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_raw(w as usize, h as usize, luma.into_raw())
}

/// Writes an 8-bit grayscale PNG.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    load_image(path).map(|img| BinaryMask::from_image(&img))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        let img = GrayImage::new(64, 64, 0);
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn slice_sized_image_keeps_dimensions_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let img = GrayImage::from_fn(400, 300, |x, y| ((x * 7 + y * 3) % 256) as u8);
        assert!(img.pixels().contains(&255));
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!((back.width(), back.height()), (400, 300));
        assert_eq!(back, img);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_image("/nonexistent/nope.png").unwrap_err();
        assert!(matches!(err, Error::MissingFile { .. }));
    }

    #[test]
    fn color_png_rejected_with_hint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(8, 8).save(&p).unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::NotGrayscale { .. }));
        assert!(err.to_string().contains("convert"));
    }

    #[test]
    fn garbage_file_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&p).unwrap_err(), Error::UnsupportedFormat { .. }));
    }

    #[test]
    fn mask_stored_as_0_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(10, 7, |x, y| (x + y) % 3 == 0);
        save_mask(&m, &p).unwrap();
        let raw = load_image(&p).unwrap();
        assert!(raw.pixels().iter().all(|&v| v == 0 || v == 255));
        assert_eq!(load_mask(&p).unwrap(), m);
    }
}

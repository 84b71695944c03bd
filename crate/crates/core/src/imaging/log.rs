//! Laplacian-of-Gaussian response and zero-crossing contours.

use super::blur::{gaussian_blur_f32, reflect};
use super::contour::{trace_contours, Contour};
use super::image::{BinaryMask, GrayImage};
use crate::error::{Error, Result};

pub const DEFAULT_LOG_SIGMA: f32 = 2.0;
pub const DEFAULT_LOG_FLOOR: f32 = 1.0;

#[derive(Debug, Clone)]
pub struct LogResult {
    pub width: usize,
    pub height: usize,
    /// Scale-normalized response `sigma^2 * laplacian(G_sigma * I)`, in
    /// luminance units. Bright blobs are negative inside.
    pub response: Vec<f32>,
    /// Zero-crossing pixels (marked on the negative side).
    pub edges: BinaryMask,
    pub contours: Vec<Contour>,
}

pub fn log_response(img: &GrayImage, sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("LoG sigma must be > 0, got {sigma}")));
    }
    let (w, h) = (img.width(), img.height());
    let smooth = gaussian_blur_f32(&img.to_f32(), w, h, sigma)?;
    let at = |x: i64, y: i64| smooth[reflect(y, h) * w + reflect(x, w)];
    let s2 = sigma * sigma;
    let mut out = vec![0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let c = at(x, y);
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * c;
            out[y as usize * w + x as usize] = s2 * lap;
        }
    }
    Ok(out)
}

/// Marks pixel `p` when `response(p) < 0`, some 4-neighbour has a positive
/// response, and the peak `|response|` in the 3x3 neighbourhood of `p`
/// reaches `floor`.
pub fn zero_crossings(response: &[f32], width: usize, height: usize, floor: f32) -> BinaryMask {
    let at = |x: i64, y: i64| -> Option<f32> {
        (x >= 0 && y >= 0 && x < width as i64 && y < height as i64).then(|| response[y as usize * width + x as usize])
    };
    BinaryMask::from_fn(width, height, |x, y| {
        let (x, y) = (x as i64, y as i64);
        if response[y as usize * width + x as usize] >= 0.0 {
            return false;
        }
        let crosses = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|&(dx, dy)| at(x + dx, y + dy).is_some_and(|q| q > 0.0));
        if !crosses {
            return false;
        }
        let mut peak = 0f32;
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(v) = at(x + dx, y + dy) {
                    peak = peak.max(v.abs());
                }
            }
        }
        peak >= floor
    })
}

/// LoG edge map and its contours. `floor` is the minimum local response
/// magnitude at a zero crossing.
pub fn laplacian_of_gaussian(img: &GrayImage, sigma: f32, floor: f32) -> Result<LogResult> {
    let response = log_response(img, sigma)?;
    let edges = zero_crossings(&response, img.width(), img.height(), floor);
    let contours = trace_contours(&edges);
    Ok(LogResult {
        width: img.width(),
        height: img.height(),
        response,
        edges,
        contours,
    })
}

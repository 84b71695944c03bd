//! Slice-wise thresholding, circle detection and the radius-mode filter.

use super::{BallDetection, ExtractionConfig, Source};
use crate::imaging::otsu::{histogram, otsu_level};
use crate::imaging::{connected_components, fit_circle, BinaryMask, Connectivity, GrayImage, Polarity};

/// Outcome of thresholding one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceInfo {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    /// Mean luminance gap between the two Otsu classes.
    pub contrast: f64,
    /// False when the contrast was too low to contain balls; the slice is
    /// then left empty in the mask.
    pub used: bool,
}

/// Non-overlapping `slice_h x slice_w` tiles (partial tiles at the right and
/// bottom edges), each thresholded with its own Otsu level.
pub fn slice_thresholds(board: &GrayImage, cfg: &ExtractionConfig) -> Vec<SliceInfo> {
    let mut out = Vec::new();
    for y0 in (0..board.height()).step_by(cfg.slice_h) {
        for x0 in (0..board.width()).step_by(cfg.slice_w) {
            let w = cfg.slice_w.min(board.width() - x0);
            let h = cfg.slice_h.min(board.height() - y0);
            let tile = board.window(x0 as i64, y0 as i64, w, h, 0);
            let hist = histogram(tile.pixels());
            let t = otsu_level(&hist);
            let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
            for (level, &c) in hist.iter().enumerate() {
                if level <= t as usize {
                    n0 += c;
                    s0 += c * level as u64;
                } else {
                    n1 += c;
                    s1 += c * level as u64;
                }
            }
            let contrast = if n0 == 0 || n1 == 0 {
                0.0
            } else {
                s1 as f64 / n1 as f64 - s0 as f64 / n0 as f64
            };
            out.push(SliceInfo {
                x0,
                y0,
                width: w,
                height: h,
                threshold: t,
                contrast,
                used: contrast >= cfg.min_slice_contrast,
            });
        }
    }
    out
}

/// Per-slice Otsu segmentation, reassembled in place.
pub fn slice_and_threshold(board: &GrayImage, cfg: &ExtractionConfig) -> BinaryMask {
    let mut mask = BinaryMask::new(board.width(), board.height());
    for s in slice_thresholds(board, cfg).into_iter().filter(|s| s.used) {
        for y in s.y0..s.y0 + s.height {
            for x in s.x0..s.x0 + s.width {
                let v = board.get(x, y);
                let fg = match cfg.polarity {
                    Polarity::BrightForeground => v > s.threshold,
                    Polarity::DarkForeground => v <= s.threshold,
                };
                mask.set(x, y, fg);
            }
        }
    }
    mask
}

/// Mode of the radii rounded to whole pixels; ties go to the larger radius.
pub fn radius_mode(radii: &[f64]) -> Option<f64> {
    let mut counts = std::collections::BTreeMap::<i64, usize>::new();
    for &r in radii {
        *counts.entry(r.round() as i64).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(r, _)| r as f64)
}

/// Drops detections with `|r_mode - r| > r_mode / sca`. Returns the kept
/// detections and `r_mode` (None for empty input).
pub fn radius_filter(dets: Vec<BallDetection>, sca: f64) -> (Vec<BallDetection>, Option<f64>) {
    let radii: Vec<f64> = dets.iter().map(|d| d.r).collect();
    let Some(r_mode) = radius_mode(&radii) else {
        return (dets, None);
    };
    let r_thr = r_mode / sca;
    let kept = dets.into_iter().filter(|d| (r_mode - d.r).abs() <= r_thr).collect();
    (kept, Some(r_mode))
}

/// Circle candidates from a segmentation mask, after the shape gates and the
/// radius filter.
pub fn detect_balls(mask: &BinaryMask, cfg: &ExtractionConfig) -> Vec<BallDetection> {
    let labels = connected_components(mask, Connectivity::Eight);
    let mut cands = Vec::new();
    for region in labels.regions.iter().filter(|r| r.area >= cfg.min_ball_area) {
        match fit_circle(&labels, region) {
            Ok(f) if f.residual <= cfg.max_fit_residual && f.r > 0.0 => {
                cands.push(BallDetection::new(f.cx, f.cy, f.r, Source::Detected));
            }
            Ok(f) => log::debug!(
                "rejecting blob at ({:.1}, {:.1}): residual {:.2}",
                f.cx,
                f.cy,
                f.residual
            ),
            Err(e) => log::debug!("rejecting blob {}: {e}", region.label),
        }
    }
    if cands.is_empty() {
        log::warn!("no candidate circles found");
    }
    radius_filter(cands, cfg.sca).0
}

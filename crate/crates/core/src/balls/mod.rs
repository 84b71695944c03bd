//! Solder-ball localisation on board images and fixed-size crop export.
//!
//! Pipeline: slice-wise Otsu, circle fits on connected components, a
//! radius-mode filter, row/column clustering, interpolation of balls missing
//! from the grid, and template refinement of the interpolated positions.

pub mod detect;
pub mod grid;
pub mod refine;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use detect::{detect_balls, radius_filter, radius_mode, slice_and_threshold, slice_thresholds, SliceInfo};
pub use grid::{cluster_grid, interpolate_missing};
pub use refine::refine_by_template;

use crate::error::{Error, Result};
use crate::imaging::{save_image, Disc, GrayImage, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Detected,
    Interpolated,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallDetection {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub source: Source,
    pub row_id: Option<usize>,
    pub col_id: Option<usize>,
    /// Interpolated location before template refinement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_refinement: Option<(f64, f64)>,
    /// Part of the refinement search fell outside the board.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub window_clipped: bool,
}

impl BallDetection {
    pub fn new(cx: f64, cy: f64, r: f64, source: Source) -> Self {
        Self {
            cx,
            cy,
            r,
            source,
            row_id: None,
            col_id: None,
            pre_refinement: None,
            window_clipped: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallGrid {
    pub balls: Vec<BallDetection>,
    /// Indices into `balls`, ordered top to bottom.
    pub rows: Vec<Vec<usize>>,
    /// Indices into `balls`, ordered left to right.
    pub cols: Vec<Vec<usize>>,
    pub d_ref_horizontal: Option<f64>,
    pub d_ref_vertical: Option<f64>,
    pub r_mode: f64,
}

impl BallGrid {
    pub fn empty() -> Self {
        Self {
            balls: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
            d_ref_horizontal: None,
            d_ref_vertical: None,
            r_mode: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub slice_w: usize,
    pub slice_h: usize,
    /// Radius tolerance divisor: keep `|r_mode - r| <= r_mode / sca`.
    pub sca: f64,
    /// Template search range in pixels.
    pub search_range: usize,
    pub crop_size: usize,
    pub polarity: Polarity,
    /// Smallest component considered for circle fitting.
    pub min_ball_area: usize,
    /// Largest RMS boundary residual of an accepted circle fit.
    pub max_fit_residual: f64,
    /// Slices whose two Otsu class means differ by less are treated as
    /// containing no balls.
    pub min_slice_contrast: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            slice_w: 400,
            slice_h: 300,
            sca: 5.0,
            search_range: 5,
            crop_size: 64,
            polarity: Polarity::BrightForeground,
            min_ball_area: 50,
            max_fit_residual: 2.0,
            min_slice_contrast: 20.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slice_w == 0 || self.slice_h == 0 || self.crop_size == 0 || self.search_range == 0 {
            return Err(Error::Config("slice, crop and search sizes must be > 0".into()));
        }
        if !(self.sca > 0.0) || !(self.max_fit_residual > 0.0) {
            return Err(Error::Config("sca and max_fit_residual must be > 0".into()));
        }
        Ok(())
    }
}

/// Full ball localisation on one board.
pub fn extract_balls(board: &GrayImage, cfg: &ExtractionConfig) -> Result<BallGrid> {
    cfg.validate()?;
    let mask = slice_and_threshold(board, cfg);
    let detected = detect_balls(&mask, cfg);
    if detected.is_empty() {
        return Ok(BallGrid::empty());
    }
    let grid = cluster_grid(detected)?;
    if (cfg.crop_size as f64) < 2.0 * grid.r_mode {
        log::warn!(
            "crop size {} is smaller than the ball diameter {}",
            cfg.crop_size,
            2.0 * grid.r_mode
        );
    }
    let missing = interpolate_missing(&grid);
    if missing.is_empty() {
        return Ok(grid);
    }
    let mut all = grid.balls.clone();
    for cand in &missing {
        all.push(refine_by_template(board, &grid, cand, cfg)?);
    }
    for b in &mut all {
        b.row_id = None;
        b.col_id = None;
    }
    cluster_grid(all)
}

/// One exported ball crop.
#[derive(Debug, Clone)]
pub struct BallCrop {
    pub image: GrayImage,
    pub detection: BallDetection,
    /// Ball disc in crop coordinates.
    pub disc: Disc,
}

/// `crop_size`-square windows centred on each ball, zero-padded at the board
/// edges.
pub fn extract_crops(board: &GrayImage, grid: &BallGrid, cfg: &ExtractionConfig) -> Vec<BallCrop> {
    let half = (cfg.crop_size / 2) as i64;
    grid.balls
        .iter()
        .map(|b| {
            let (x0, y0) = (b.cx.round() as i64 - half, b.cy.round() as i64 - half);
            BallCrop {
                image: board.window(x0, y0, cfg.crop_size, cfg.crop_size, 0),
                detection: b.clone(),
                disc: Disc::new(b.cx - x0 as f64, b.cy - y0 as f64, b.r),
            }
        })
        .collect()
}

pub fn crop_file_name(board_id: &str, det: &BallDetection) -> String {
    format!(
        "board_{board_id}_ball_{}_{}.png",
        det.row_id.unwrap_or(0),
        det.col_id.unwrap_or(0)
    )
}

/// Crop record written next to the PNGs so later stages know the disc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub file: String,
    pub board: String,
    pub detection: BallDetection,
    pub disc: Disc,
}

/// Writes `detections.jsonl`, the crop PNGs and `crops.jsonl` into `dir`.
pub fn write_board_outputs(dir: &Path, board_id: &str, crops: &[BallCrop]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let det_path = dir.join(format!("board_{board_id}_detections.jsonl"));
    let crop_path = dir.join(format!("board_{board_id}_crops.jsonl"));
    let mut dets = BufWriter::new(fs::File::create(&det_path).map_err(|e| Error::io(&det_path, e))?);
    let mut recs = BufWriter::new(fs::File::create(&crop_path).map_err(|e| Error::io(&crop_path, e))?);
    for c in crops {
        let file = crop_file_name(board_id, &c.detection);
        save_image(&c.image, dir.join(&file))?;
        serde_json::to_writer(&mut dets, &c.detection)?;
        dets.write_all(b"\n").map_err(|e| Error::io(&det_path, e))?;
        let rec = CropRecord {
            file,
            board: board_id.to_string(),
            detection: c.detection.clone(),
            disc: c.disc,
        };
        serde_json::to_writer(&mut recs, &rec)?;
        recs.write_all(b"\n").map_err(|e| Error::io(&crop_path, e))?;
    }
    dets.flush().map_err(|e| Error::io(&det_path, e))?;
    recs.flush().map_err(|e| Error::io(&crop_path, e))?;
    Ok(())
}

//! Exhaustive SSD template search around interpolated ball positions.

use super::{BallDetection, BallGrid, ExtractionConfig, Source};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Half-width of the template window: the ball plus a thin background ring.
pub fn template_half(r_mode: f64) -> i64 {
    r_mode.ceil() as i64 + 3
}

fn ssd(board: &GrayImage, template: &GrayImage, x0: i64, y0: i64) -> u64 {
    let (w, h) = (template.width(), template.height());
    let mut acc = 0u64;
    for y in 0..h {
        let row = &board.pixels()[(y0 as usize + y) * board.width() + x0 as usize..][..w];
        let trow = &template.pixels()[y * w..(y + 1) * w];
        for (&a, &b) in row.iter().zip(trow) {
            let d = a as i64 - b as i64;
            acc += (d * d) as u64;
        }
    }
    acc
}

/// Moves an interpolated candidate to the offset in `[-SR, SR]^2` whose
/// window best matches (minimum SSD) a template cut around the nearest
/// detected ball. Ties go to the smaller offset, then raster order. Offsets
/// whose window would leave the board are skipped and `window_clipped` is set.
pub fn refine_by_template(
    board: &GrayImage,
    grid: &BallGrid,
    candidate: &BallDetection,
    cfg: &ExtractionConfig,
) -> Result<BallDetection> {
    let nb = grid
        .balls
        .iter()
        .filter(|b| b.source == Source::Detected)
        .min_by(|a, b| {
            let da = (a.cx - candidate.cx).powi(2) + (a.cy - candidate.cy).powi(2);
            let db = (b.cx - candidate.cx).powi(2) + (b.cy - candidate.cy).powi(2);
            da.total_cmp(&db)
        })
        .ok_or_else(|| Error::InvalidArgument("template refinement needs a detected neighbour".into()))?;
    let half = template_half(grid.r_mode);
    let side = (2 * half + 1) as usize;
    let (nx, ny) = (nb.cx.round(), nb.cy.round());
    let template = board.window(nx as i64 - half, ny as i64 - half, side, side, 0);
    let (fx, fy) = (nb.cx - nx, nb.cy - ny);

    let (gx, gy) = (candidate.cx.round() as i64, candidate.cy.round() as i64);
    let sr = cfg.search_range as i64;
    let (bw, bh) = (board.width() as i64, board.height() as i64);
    let mut best: Option<(u64, i64, i64, i64)> = None;
    let mut clipped = false;
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            let (x0, y0) = (gx + dx - half, gy + dy - half);
            if x0 < 0 || y0 < 0 || x0 + side as i64 > bw || y0 + side as i64 > bh {
                clipped = true;
                continue;
            }
            let score = ssd(board, &template, x0, y0);
            let mag = dx * dx + dy * dy;
            if best.is_none_or(|(s, m, _, _)| score < s || (score == s && mag < m)) {
                best = Some((score, mag, dx, dy));
            }
        }
    }
    let mut out = candidate.clone();
    out.pre_refinement = Some((candidate.cx, candidate.cy));
    out.window_clipped = clipped;
    out.source = Source::Refined;
    match best {
        Some((_, _, dx, dy)) => {
            out.cx = (gx + dx) as f64 + fx;
            out.cy = (gy + dy) as f64 + fy;
        }
        None => log::warn!(
            "search window around ({:.1}, {:.1}) lies outside the board; keeping the interpolated location",
            candidate.cx,
            candidate.cy
        ),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balls::grid::cluster_grid;

    fn ball_board(centers: &[(f64, f64)], r: f64, w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let mut v = 40.0;
            for &(cx, cy) in centers {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= r {
                    // Radial shading so SSD has a unique optimum.
                    v = 200.0 - 2.0 * d;
                }
            }
            v as u8
        })
    }

    fn setup(truth: (f64, f64), guess: (f64, f64)) -> (GrayImage, BallGrid, BallDetection) {
        let nb = (60.0, 60.0);
        let board = ball_board(&[nb, truth], 12.0, 200, 120);
        let grid = cluster_grid(vec![BallDetection::new(nb.0, nb.1, 12.0, Source::Detected)]).unwrap();
        let cand = BallDetection::new(guess.0, guess.1, 12.0, Source::Interpolated);
        (board, grid, cand)
    }

    #[test]
    fn known_shift_is_recovered_exactly() {
        let (board, grid, cand) = setup((122.0, 59.0), (120.0, 60.0));
        let r = refine_by_template(&board, &grid, &cand, &ExtractionConfig::default()).unwrap();
        assert_eq!((r.cx - 120.0, r.cy - 60.0), (2.0, -1.0));
        assert_eq!(r.pre_refinement, Some((120.0, 60.0)));
        assert_eq!(r.source, Source::Refined);
        assert!(!r.window_clipped);
    }

    #[test]
    fn exact_guess_stays_put() {
        let (board, grid, cand) = setup((130.0, 62.0), (130.0, 62.0));
        let r = refine_by_template(&board, &grid, &cand, &ExtractionConfig::default()).unwrap();
        assert_eq!((r.cx, r.cy), (130.0, 62.0));
    }

    #[test]
    fn uniform_window_ties_to_zero_offset() {
        let nb = (30.0, 30.0);
        let mut board = GrayImage::new(200, 100, 40);
        let t = ball_board(&[nb], 10.0, 200, 100);
        // Only the neighbour exists; the search area is flat.
        for y in 0..60 {
            for x in 0..60 {
                board.set(x, y, t.get(x, y));
            }
        }
        let grid = cluster_grid(vec![BallDetection::new(nb.0, nb.1, 10.0, Source::Detected)]).unwrap();
        let cand = BallDetection::new(140.3, 50.0, 10.0, Source::Interpolated);
        let r = refine_by_template(&board, &grid, &cand, &ExtractionConfig::default()).unwrap();
        assert_eq!((r.cx, r.cy), (140.0, 50.0));
    }

    #[test]
    fn search_is_clipped_at_the_border() {
        let (board, grid, _) = setup((185.0, 60.0), (185.0, 60.0));
        let cand = BallDetection::new(185.0, 60.0, 12.0, Source::Interpolated);
        let r = refine_by_template(&board, &grid, &cand, &ExtractionConfig::default()).unwrap();
        assert!(r.window_clipped);
        assert!((r.cx - 185.0).abs() <= 5.0 && (r.cy - 60.0).abs() <= 5.0);
    }

    #[test]
    fn offset_never_exceeds_search_range() {
        let (board, grid, cand) = setup((128.0, 52.0), (120.0, 60.0));
        let cfg = ExtractionConfig::default();
        let r = refine_by_template(&board, &grid, &cand, &cfg).unwrap();
        assert!((r.cx - 120.0).abs() <= cfg.search_range as f64);
        assert!((r.cy - 60.0).abs() <= cfg.search_range as f64);
    }
}

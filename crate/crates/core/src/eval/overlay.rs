//! Board overlay: void outlines plus a void-percentage label above each ball.

use crate::balls::BallDetection;
use crate::imaging::GrayImage;

use super::PredictionResult;

/// 3x5 glyphs, one row per entry, bit 2 = leftmost column.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        _ => [0; 5],
    }
}

const SCALE: i64 = 2;
const ADVANCE: i64 = 4 * SCALE;

pub fn label_text(percentage: f64) -> String {
    format!("{percentage:.1}")
}

fn put(img: &mut GrayImage, x: i64, y: i64, v: u8) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set(x as usize, y as usize, v);
    }
}

/// Draws `text` with its top-left corner at `(x0, y0)` on a black box.
pub fn draw_text(img: &mut GrayImage, text: &str, x0: i64, y0: i64) {
    let w = text.chars().count() as i64 * ADVANCE;
    for y in y0 - 1..y0 + 5 * SCALE + 1 {
        for x in x0 - 1..x0 + w {
            put(img, x, y, 0);
        }
    }
    for (i, c) in text.chars().enumerate() {
        let gx = x0 + i as i64 * ADVANCE;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    for sy in 0..SCALE {
                        for sx in 0..SCALE {
                            put(img, gx + col * SCALE + sx, y0 + row as i64 * SCALE + sy, 255);
                        }
                    }
                }
            }
        }
    }
}

/// Copy of `board` with void outlines (white) and percentage labels. Each
/// result's mask is in the coordinates of a `crop_size` crop centred on the
/// rounded ball centre.
pub fn render_overlay(board: &GrayImage, balls: &[(BallDetection, PredictionResult)], crop_size: usize) -> GrayImage {
    let mut img = board.clone();
    let half = (crop_size / 2) as i64;
    for (b, res) in balls {
        let (ox, oy) = (b.cx.round() as i64 - half, b.cy.round() as i64 - half);
        let m = &res.mask;
        for (x, y) in m.coords() {
            let edge = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dx, dy)| !m.get_checked(x as i64 + dx, y as i64 + dy));
            if edge {
                put(&mut img, ox + x as i64, oy + y as i64, 255);
            }
        }
        let text = label_text(res.void_percentage);
        let tw = text.chars().count() as i64 * ADVANCE;
        let ty = (b.cy - b.r).round() as i64 - 5 * SCALE - 4;
        draw_text(&mut img, &text, b.cx.round() as i64 - tw / 2, ty.max(1));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balls::Source;
    use crate::imaging::{BinaryMask, Disc};

    fn result(mask: BinaryMask, pct: f64) -> PredictionResult {
        PredictionResult {
            ball_id: "b".into(),
            region_areas: vec![],
            mask,
            void_percentage: pct,
        }
    }

    #[test]
    fn labels_and_dimensions() {
        let board = GrayImage::new(300, 200, 90);
        let ball = BallDetection::new(150.0, 110.0, 20.0, Source::Detected);
        let out = render_overlay(&board, &[(ball.clone(), result(BinaryMask::new(64, 64), 0.0))], 64);
        assert_eq!((out.width(), out.height()), (300, 200));
        assert_eq!(label_text(0.0), "0.0");
        // No contour: only the label area differs from the board.
        let changed: Vec<(usize, usize)> = (0..200)
            .flat_map(|y| (0..300).map(move |x| (x, y)))
            .filter(|&(x, y)| out.get(x, y) != 90)
            .collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|&(_, y)| (y as f64) < ball.cy - ball.r));

        let void = Disc::new(32.0, 32.0, 5.0).mask(64, 64);
        let out = render_overlay(&board, &[(ball, result(void, 10.0))], 64);
        assert_eq!(label_text(10.0), "10.0");
        assert_eq!(out.get(150, 110), 90);
        assert_eq!(out.get(155, 110), 255);
    }

    #[test]
    fn digits_are_distinct() {
        let all: Vec<[u8; 5]> = "0123456789".chars().map(glyph).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}

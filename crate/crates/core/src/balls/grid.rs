//! Row/column clustering, reference spacing and gap interpolation.

use super::detect::radius_mode;
use super::{BallDetection, BallGrid, Source};
use crate::error::{Error, Result};

/// Groups sorted 1-D positions, starting a new group whenever the gap to
/// the previous value exceeds `gap`. Returns index groups ordered by position.
pub fn cluster_1d(values: &[f64], gap: f64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for i in idx {
        if out.is_empty() || values[i] - prev > gap {
            out.push(Vec::new());
        }
        out.last_mut().expect("group").push(i);
        prev = values[i];
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Consecutive spacings along `key` inside every cluster.
fn spacings(balls: &[BallDetection], clusters: &[Vec<usize>], key: impl Fn(&BallDetection) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for c in clusters {
        let mut pos: Vec<f64> = c.iter().map(|&i| key(&balls[i])).collect();
        pos.sort_by(f64::total_cmp);
        out.extend(pos.windows(2).map(|w| w[1] - w[0]));
    }
    out
}

/// Clusters detections into rows (by `cy`) and columns (by `cx`) with a
/// gap threshold of `r_mode`, and assigns `row_id` / `col_id`.
pub fn cluster_grid(mut balls: Vec<BallDetection>) -> Result<BallGrid> {
    if balls.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster an empty detection list".into()));
    }
    let radii: Vec<f64> = balls.iter().map(|b| b.r).collect();
    let r_mode = radius_mode(&radii).expect("non-empty");
    let ys: Vec<f64> = balls.iter().map(|b| b.cy).collect();
    let xs: Vec<f64> = balls.iter().map(|b| b.cx).collect();
    let rows = cluster_1d(&ys, r_mode);
    let cols = cluster_1d(&xs, r_mode);
    for (ri, row) in rows.iter().enumerate() {
        for &i in row {
            balls[i].row_id = Some(ri);
        }
    }
    for (ci, col) in cols.iter().enumerate() {
        for &i in col {
            balls[i].col_id = Some(ci);
        }
    }
    let d_ref_horizontal = median(spacings(&balls, &rows, |b| b.cx));
    let d_ref_vertical = median(spacings(&balls, &cols, |b| b.cy));
    if balls.len() < 2 {
        log::warn!("single ball: reference spacing undefined");
    }
    Ok(BallGrid {
        balls,
        rows,
        cols,
        d_ref_horizontal,
        d_ref_vertical,
        r_mode,
    })
}

/// Inserts `k - 1` evenly spaced balls wherever a within-cluster gap spans
/// `k = round(d / d_ref) >= 2` reference spacings. Candidates found from
/// both a row and a column gap are merged.
pub fn interpolate_missing(grid: &BallGrid) -> Vec<BallDetection> {
    let mut out: Vec<BallDetection> = Vec::new();
    let mut scan = |clusters: &[Vec<usize>], d_ref: Option<f64>, along_x: bool| {
        let Some(d_ref) = d_ref.filter(|d| *d > 0.0) else {
            return;
        };
        for c in clusters {
            let mut members: Vec<&BallDetection> = c.iter().map(|&i| &grid.balls[i]).collect();
            let key = |b: &BallDetection| if along_x { b.cx } else { b.cy };
            members.sort_by(|a, b| key(a).total_cmp(&key(b)));
            for pair in members.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let k = ((key(b) - key(a)) / d_ref).round() as usize;
                for j in 1..k {
                    let t = j as f64 / k as f64;
                    let (cx, cy) = (a.cx + t * (b.cx - a.cx), a.cy + t * (b.cy - a.cy));
                    let dup = out
                        .iter()
                        .any(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() <= grid.r_mode);
                    if !dup {
                        out.push(BallDetection::new(cx, cy, grid.r_mode, Source::Interpolated));
                    }
                }
            }
        }
    };
    scan(&grid.rows, grid.d_ref_horizontal, true);
    scan(&grid.cols, grid.d_ref_vertical, false);
    out
}

//! Algebraic least-squares circle fitting on region boundaries.

use super::components::{LabeledRegions, Region};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    /// RMS radial distance of the boundary points from the fitted circle.
    pub residual: f64,
}

/// Boundary crack points of a region: the midpoint between each member pixel
/// and every in-image 4-neighbour outside the region. Sides lying on the
/// image border are not boundary evidence and are skipped.
pub fn boundary_points(labels: &LabeledRegions, region: &Region) -> Vec<(f64, f64)> {
    let (w, h) = (labels.width as i64, labels.height as i64);
    let mut pts = Vec::new();
    for &(x, y) in &region.pixels {
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            if labels.label_at(nx as usize, ny as usize) != region.label {
                pts.push((x as f64 + 0.5 * dx as f64, y as f64 + 0.5 * dy as f64));
            }
        }
    }
    pts
}

/// Kåsa fit: minimizes `sum (x^2 + y^2 + D x + E y + F)^2`.
pub fn fit_circle_points(points: &[(f64, f64)]) -> Result<CircleFit> {
    if points.len() < 3 {
        return Err(Error::NonCircular(format!(
            "{} boundary points, need at least 3",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);

    // Centered moments for conditioning.
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    let (mut suuu, mut svvv, mut suvv, mut svuu) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let det = suu * svv - suv * suv;
    let scale = (suu + svv).max(f64::MIN_POSITIVE);
    if det.abs() <= 1e-9 * scale * scale {
        return Err(Error::NonCircular("boundary points are collinear".into()));
    }
    let rhs_u = 0.5 * (suuu + suvv);
    let rhs_v = 0.5 * (svvv + svuu);
    let uc = (rhs_u * svv - rhs_v * suv) / det;
    let vc = (suu * rhs_v - suv * rhs_u) / det;
    let r2 = uc * uc + vc * vc + (suu + svv) / n;
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::NonCircular("non-positive squared radius".into()));
    }
    let (cx, cy, r) = (uc + mx, vc + my, r2.sqrt());
    let residual = (points
        .iter()
        .map(|&(x, y)| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
            d * d
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(CircleFit { cx, cy, r, residual })
}

/// Fits a circle to the boundary of one labeled region.
pub fn fit_circle(labels: &LabeledRegions, region: &Region) -> Result<CircleFit> {
    if region.area < 5 {
        return Err(Error::NonCircular(format!(
            "region area {} is below the minimum of 5",
            region.area
        )));
    }
    fit_circle_points(&boundary_points(labels, region))
}

//! Compositing of circular voids into a ball crop.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{SampleParams, SynthSample};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur_f32, BinaryMask, Disc, GrayImage};

/// Adds the voids in `params` that fit inside `ball` to `crop`.
///
/// Each kept void raises the pixels within `VR` of its centre by `VI`, then
/// adds zero-mean Gaussian noise of variance `VN` there; where voids overlap
/// the later one wins. Afterwards the band `|d - VR| <= VB` around each void
/// (clipped to the ball) is replaced by a Gaussian blur of sigma `VB`.
/// Pixels outside every void and band keep their source value exactly.
pub fn render_voids<R: Rng + ?Sized>(
    crop: &GrayImage,
    ball: &Disc,
    params: SampleParams,
    rng: &mut R,
) -> Result<SynthSample> {
    let (w, h) = (crop.width(), crop.height());
    let kept: Vec<bool> = params.voids.iter().map(|v| v.inside(ball)).collect();
    let mut work: Vec<f32> = crop.to_f32();
    let mut touched = vec![false; w * h];
    let mut mask = BinaryMask::new(w, h);

    // Owner of each pixel: index of the last kept void covering it.
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (i, v) in params.voids.iter().enumerate().filter(|(i, _)| kept[*i]) {
        let d = v.disc();
        for y in 0..h {
            for x in 0..w {
                if d.contains(x as f64, y as f64) {
                    owner[y * w + x] = Some(i);
                    mask.set(x, y, true);
                }
            }
        }
    }
    // Noise streams are drawn per void in void order, raster order inside.
    let mut noise: Vec<f32> = vec![0.0; w * h];
    for (i, v) in params.voids.iter().enumerate().filter(|(i, _)| kept[*i]) {
        if v.vn <= 0.0 {
            continue;
        }
        let dist = Normal::new(0.0, v.vn.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in 0..w * h {
            if owner[p] == Some(i) {
                noise[p] = dist.sample(rng) as f32;
            }
        }
    }
    for p in 0..w * h {
        if let Some(i) = owner[p] {
            work[p] += params.voids[i].vi as f32 + noise[p];
            touched[p] = true;
        }
    }
    for v in params.voids.iter().zip(&kept).filter(|(_, k)| **k).map(|(v, _)| v) {
        if v.vb <= 0.0 {
            continue;
        }
        let blurred = gaussian_blur_f32(&work, w, h, v.vb as f32)?;
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - v.vx).powi(2) + (y as f64 - v.vy).powi(2)).sqrt();
                if (d - v.vr as f64).abs() <= v.vb && ball.contains(x as f64, y as f64) {
                    work[y * w + x] = blurred[y * w + x];
                    touched[y * w + x] = true;
                }
            }
        }
    }
    let mut image = crop.clone();
    for (p, px) in image.pixels_mut().iter_mut().enumerate() {
        if touched[p] {
            *px = work[p].round().clamp(0.0, 255.0) as u8;
        }
    }
    let rejected_voids = kept.iter().filter(|k| !**k).count();
    Ok(SynthSample {
        image,
        mask,
        params,
        kept,
        rejected_voids,
        seed: 0,
        source: 0,
        disc: *ball,
    })
}

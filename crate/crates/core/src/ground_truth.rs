//! Void / non-void labelling of ball crops.
//!
//! Candidate voids come either from closed LoG zero-crossing contours or from
//! externally drawn masks. A candidate counts as a void only when its mean
//! luminance exceeds that of a thin surrounding ring by at least `thr_min`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balls::CropRecord;
use crate::error::{Error, Result};
use crate::imaging::log::{DEFAULT_LOG_FLOOR, DEFAULT_LOG_SIGMA};
use crate::imaging::{
    connected_components, fit_circle, laplacian_of_gaussian, load_image, load_mask, otsu_threshold, BinaryMask,
    Connectivity, Contour, Disc, GrayImage,
};
use crate::manifest::{read_jsonl, VoidClass};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthConfig {
    pub thr_min: f64,
    pub log_sigma: f32,
    pub log_floor: f32,
    /// Width of the background ring around a void.
    pub ring_width: usize,
    /// LoG contours are kept only within `r - rim_margin` of the ball centre,
    /// which removes the ball's own edge response.
    pub rim_margin: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            thr_min: 6.0,
            log_sigma: DEFAULT_LOG_SIGMA,
            log_floor: DEFAULT_LOG_FLOOR,
            ring_width: 3,
            rim_margin: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    AutoLog,
    ManualMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoidRegion {
    pub label: usize,
    pub pixels: Vec<(usize, usize)>,
    pub i_void: f64,
    pub i_bg: f64,
    pub valid: bool,
}

impl VoidRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallLabel {
    pub ball_id: String,
    pub class: VoidClass,
    pub regions: Vec<VoidRegion>,
    pub source: AnnotationSource,
    /// LoG contours that did not close; reported, never auto-closed.
    pub open_contours: usize,
}

impl BallLabel {
    /// Union of the valid regions.
    pub fn void_mask(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        for r in self.regions.iter().filter(|r| r.valid) {
            for &(x, y) in &r.pixels {
                m.set(x, y, true);
            }
        }
        m
    }
}

/// LoG contours lying inside the ball, excluding its rim. Pixels outside the
/// ball are replaced by the median ball luminance first so the ball edge
/// itself produces no response.
pub fn contours_from_log(crop: &GrayImage, ball: &Disc, cfg: &GroundTruthConfig) -> Result<Vec<Contour>> {
    let mut inside: Vec<u8> =
        BinaryMask::from_fn(crop.width(), crop.height(), |x, y| ball.contains(x as f64, y as f64))
            .coords()
            .map(|(x, y)| crop.get(x, y))
            .collect();
    let filled = if inside.is_empty() {
        crop.clone()
    } else {
        let mid = inside.len() / 2;
        let median = *inside.select_nth_unstable(mid).1;
        GrayImage::from_fn(crop.width(), crop.height(), |x, y| {
            if ball.contains(x as f64, y as f64) {
                crop.get(x, y)
            } else {
                median
            }
        })
    };
    let res = laplacian_of_gaussian(&filled, cfg.log_sigma, cfg.log_floor)?;
    let inner = Disc::new(ball.cx, ball.cy, ball.r - cfg.rim_margin);
    let edges = BinaryMask::from_fn(crop.width(), crop.height(), |x, y| {
        res.edges.get(x, y) && inner.contains(x as f64, y as f64)
    });
    Ok(crate::imaging::trace_contours(&edges))
}

fn mean_over(crop: &GrayImage, pixels: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in pixels {
        s += crop.get(x, y) as f64;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// `(I_void, I_BG)` for `region`. The background ring is the chessboard
/// dilation of the region by `ring_width`, minus the region, clipped to the
/// ball and excluding every pixel of `all_voids`. An empty ring falls back to
/// the remaining ball pixels, then to the region itself.
pub fn region_intensities(
    crop: &GrayImage,
    ball: &Disc,
    region: &[(usize, usize)],
    all_voids: &BinaryMask,
    ring_width: usize,
) -> (f64, f64) {
    let (w, h) = (crop.width(), crop.height());
    let i_void = mean_over(crop, region.iter().copied()).unwrap_or(0.0);
    let mut in_region = BinaryMask::new(w, h);
    for &(x, y) in region {
        in_region.set(x, y, true);
    }
    let rw = ring_width as i64;
    let mut ring = BinaryMask::new(w, h);
    for &(x, y) in region {
        for dy in -rw..=rw {
            for dx in -rw..=rw {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !in_region.get(nx, ny) && !all_voids.get(nx, ny) && ball.contains(nx as f64, ny as f64) {
                    ring.set(nx, ny, true);
                }
            }
        }
    }
    let i_bg = mean_over(crop, ring.coords())
        .or_else(|| {
            mean_over(
                crop,
                (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| {
                    ball.contains(x as f64, y as f64) && !all_voids.get(x, y) && !in_region.get(x, y)
                }),
            )
        })
        .unwrap_or(i_void);
    (i_void, i_bg)
}

/// Candidate void pixel sets for a crop.
#[derive(Debug, Clone)]
pub enum Annotation<'a> {
    Contours(&'a [Contour]),
    Mask(&'a BinaryMask),
}

/// Applies the validity test to each candidate and labels the ball.
pub fn classify_ball(
    ball_id: &str,
    crop: &GrayImage,
    ball: &Disc,
    annotation: Annotation<'_>,
    cfg: &GroundTruthConfig,
) -> Result<BallLabel> {
    let (w, h) = (crop.width(), crop.height());
    let (candidates, source, open) = match annotation {
        Annotation::Contours(cs) => {
            let regions: Vec<Vec<(usize, usize)>> = cs
                .iter()
                .filter(|c| c.closed)
                .map(|c| c.filled(w, h).coords().collect())
                .collect();
            (
                regions,
                AnnotationSource::AutoLog,
                cs.iter().filter(|c| !c.closed).count(),
            )
        }
        Annotation::Mask(m) => {
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "mask is {}x{}, crop is {w}x{h}",
                    m.width(),
                    m.height()
                )));
            }
            let labels = connected_components(m, Connectivity::Eight);
            (
                labels.regions.into_iter().map(|r| r.pixels).collect(),
                AnnotationSource::ManualMask,
                0,
            )
        }
    };
    let mut all = BinaryMask::new(w, h);
    for &(x, y) in candidates.iter().flatten() {
        all.set(x, y, true);
    }
    let regions: Vec<VoidRegion> = candidates
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| {
            let (i_void, i_bg) = region_intensities(crop, ball, &pixels, &all, cfg.ring_width);
            VoidRegion {
                label: i + 1,
                pixels,
                i_void,
                i_bg,
                valid: i_void - i_bg >= cfg.thr_min,
            }
        })
        .collect();
    let class = if regions.iter().any(|r| r.valid) {
        VoidClass::Void
    } else {
        VoidClass::NonVoid
    };
    Ok(BallLabel {
        ball_id: ball_id.to_string(),
        class,
        regions,
        source,
        open_contours: open,
    })
}

/// LoG path end to end.
pub fn label_with_log(ball_id: &str, crop: &GrayImage, ball: &Disc, cfg: &GroundTruthConfig) -> Result<BallLabel> {
    let contours = contours_from_log(crop, ball, cfg)?;
    classify_ball(ball_id, crop, ball, Annotation::Contours(&contours), cfg)
}

/// Ball disc for a crop without an extraction record: circle fit of the
/// largest Otsu component, else the inscribed disc.
pub fn estimate_disc(crop: &GrayImage) -> Disc {
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    let fallback = Disc::new((w - 1.0) / 2.0, (h - 1.0) / 2.0, (w.min(h) - 1.0) / 2.0);
    let labels = connected_components(&otsu_threshold(crop).mask, Connectivity::Eight);
    labels
        .regions
        .iter()
        .max_by_key(|r| r.area)
        .and_then(|r| fit_circle(&labels, r).ok())
        .map(|f| Disc::new(f.cx, f.cy, f.r))
        .unwrap_or(fallback)
}

/// A crop image on disk with its ball disc.
#[derive(Debug, Clone)]
pub struct CropEntry {
    pub id: String,
    pub path: PathBuf,
    pub disc: Disc,
}

/// PNG crops in `dir`, with discs taken from any `*_crops.jsonl` records
/// written by ball extraction, else estimated from the crop.
pub fn list_crops(dir: &Path) -> Result<Vec<CropEntry>> {
    let mut discs: HashMap<String, Disc> = HashMap::new();
    let mut pngs = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if name.ends_with("_crops.jsonl") {
            for rec in read_jsonl::<CropRecord>(&path)? {
                discs.insert(rec.file, rec.disc);
            }
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            pngs.insert(name, path);
        }
    }
    pngs.into_iter()
        .map(|(name, path)| {
            let disc = match discs.get(&name) {
                Some(d) => *d,
                None => estimate_disc(&load_image(&path)?),
            };
            let id = Path::new(&name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&name)
                .to_string();
            Ok(CropEntry { id, path, disc })
        })
        .collect()
}

/// Labels every crop in `crop_dir` from the same-named mask in `mask_dir`.
pub fn import_manual_masks(
    crop_dir: &Path,
    mask_dir: &Path,
    cfg: &GroundTruthConfig,
) -> Result<Vec<(CropEntry, BallLabel)>> {
    let crops = list_crops(crop_dir)?;
    let names: std::collections::HashSet<_> = crops
        .iter()
        .filter_map(|c| c.path.file_name().map(|n| n.to_os_string()))
        .collect();
    for entry in fs::read_dir(mask_dir).map_err(|e| Error::io(mask_dir, e))? {
        let path = entry.map_err(|e| Error::io(mask_dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && !path.file_name().is_some_and(|n| names.contains(n)) {
            return Err(Error::Dataset(format!(
                "orphan mask {} has no matching crop",
                path.display()
            )));
        }
    }
    crops
        .into_iter()
        .map(|c| {
            let mask_path = mask_dir.join(c.path.file_name().expect("file name"));
            if !mask_path.is_file() {
                return Err(Error::Dataset(format!("no mask for crop {}", c.path.display())));
            }
            let crop = load_image(&c.path)?;
            let mask = load_mask(&mask_path)?;
            let label = classify_ball(&c.id, &crop, &c.disc, Annotation::Mask(&mask), cfg).map_err(|e| match e {
                Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{}: {m}", mask_path.display())),
                other => other,
            })?;
            Ok((c, label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub area: usize,
    #[serde(rename = "I_void")]
    pub i_void: f64,
    #[serde(rename = "I_BG")]
    pub i_bg: f64,
    pub valid: bool,
}

/// Labels manifest row; also readable as a dataset manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub ball_id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub class: VoidClass,
    pub regions: Vec<RegionRecord>,
    pub source: AnnotationSource,
    pub open_contours: usize,
    pub disc: Disc,
    pub split: crate::manifest::Split,
    pub origin: crate::manifest::Origin,
}

impl LabelRecord {
    pub fn new(entry: &CropEntry, label: &BallLabel, mask: Option<PathBuf>) -> Self {
        Self {
            id: label.ball_id.clone(),
            ball_id: label.ball_id.clone(),
            image: entry.path.clone(),
            mask,
            class: label.class,
            regions: label
                .regions
                .iter()
                .map(|r| RegionRecord {
                    area: r.area(),
                    i_void: r.i_void,
                    i_bg: r.i_bg,
                    valid: r.valid,
                })
                .collect(),
            source: label.source,
            open_contours: label.open_contours,
            disc: entry.disc,
            split: crate::manifest::Split::Train,
            origin: crate::manifest::Origin::Real,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_mask;
    use crate::synth::{render_voids, SampleParams, VoidParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BALL: Disc = Disc {
        cx: 32.0,
        cy: 32.0,
        r: 20.0,
    };

    fn ball_crop(level: u8) -> GrayImage {
        GrayImage::from_fn(
            64,
            64,
            |x, y| if BALL.contains(x as f64, y as f64) { level } else { 30 },
        )
    }

    fn with_void(mut img: GrayImage, d: Disc, offset: u8) -> GrayImage {
        for y in 0..64 {
            for x in 0..64 {
                if d.contains(x as f64, y as f64) {
                    let v = img.get(x, y);
                    img.set(x, y, v + offset);
                }
            }
        }
        img
    }

    fn cfg() -> GroundTruthConfig {
        GroundTruthConfig::default()
    }

    #[test]
    fn uniform_ball_has_no_contours() {
        assert!(contours_from_log(&ball_crop(100), &BALL, &cfg()).unwrap().is_empty());
        let l = label_with_log("b", &ball_crop(100), &BALL, &cfg()).unwrap();
        assert_eq!(l.class, VoidClass::NonVoid);
    }

    #[test]
    fn interior_void_gives_one_closed_contour() {
        let d = Disc::new(30.0, 33.0, 5.0);
        let img = with_void(ball_crop(100), d, 9);
        let cs = contours_from_log(&img, &BALL, &cfg()).unwrap();
        assert_eq!(cs.len(), 1);
        assert!(cs[0].closed);
        let l = label_with_log("b", &img, &BALL, &cfg()).unwrap();
        assert_eq!(l.class, VoidClass::Void);
        assert_eq!(l.source, AnnotationSource::AutoLog);
    }

    #[test]
    fn void_cut_by_the_rim_restriction_is_open() {
        // Void straddling the inner restriction circle.
        let d = Disc::new(48.0, 32.0, 4.0);
        let img = with_void(ball_crop(100), d, 30);
        let cs = contours_from_log(&img, &BALL, &cfg()).unwrap();
        assert!(!cs.is_empty());
        assert!(cs.iter().all(|c| !c.closed));
        let l = label_with_log("b", &img, &BALL, &cfg()).unwrap();
        assert_eq!((l.class, l.open_contours > 0), (VoidClass::NonVoid, true));
    }

    #[test]
    fn constructed_intensities() {
        let d = Disc::new(32.0, 32.0, 4.0);
        let img = with_void(ball_crop(100), d, 10);
        let px: Vec<_> = d.mask(64, 64).coords().collect();
        let (iv, ib) = region_intensities(&img, &BALL, &px, &d.mask(64, 64), 3);
        assert_eq!((iv, ib), (110.0, 100.0));
    }

    #[test]
    fn validity_boundary() {
        let d = Disc::new(32.0, 32.0, 4.0);
        let mask = d.mask(64, 64);
        for (offset, valid) in [(5u8, false), (6, true), (7, true)] {
            let img = with_void(ball_crop(100), d, offset);
            let l = classify_ball("b", &img, &BALL, Annotation::Mask(&mask), &cfg()).unwrap();
            assert_eq!(l.regions[0].valid, valid, "offset {offset}");
            let class = if valid { VoidClass::Void } else { VoidClass::NonVoid };
            assert_eq!(l.class, class);
        }
    }

    #[test]
    fn ring_excludes_other_voids() {
        let (a, b) = (Disc::new(26.0, 32.0, 3.0), Disc::new(37.0, 32.0, 3.0));
        let img = with_void(with_void(ball_crop(100), a, 8), b, 40);
        let both = a.mask(64, 64).union(&b.mask(64, 64)).unwrap();
        let l = classify_ball("b", &img, &BALL, Annotation::Mask(&both), &cfg()).unwrap();
        assert_eq!(l.regions.len(), 2);
        for r in &l.regions {
            assert_eq!(r.i_bg, 100.0);
        }
    }

    #[test]
    fn region_filling_ball_uses_fallback() {
        let mask = BALL.mask(64, 64);
        let img = ball_crop(100);
        let l = classify_ball("b", &img, &BALL, Annotation::Mask(&mask), &cfg()).unwrap();
        assert_eq!(l.regions[0].i_bg, 100.0);
        assert!(!l.regions[0].valid);
    }

    #[test]
    fn manual_mask_cases() {
        let img = ball_crop(100);
        let empty = BinaryMask::new(64, 64);
        let l = classify_ball("b", &img, &BALL, Annotation::Mask(&empty), &cfg()).unwrap();
        assert_eq!((l.class, l.regions.len()), (VoidClass::NonVoid, 0));
        let two = Disc::new(25.0, 30.0, 2.0)
            .mask(64, 64)
            .union(&Disc::new(40.0, 35.0, 3.0).mask(64, 64))
            .unwrap();
        let l = classify_ball("b", &img, &BALL, Annotation::Mask(&two), &cfg()).unwrap();
        assert_eq!(l.regions.len(), 2);
        let tiny = BinaryMask::from_fn(64, 64, |x, y| (30..32).contains(&x) && (30..32).contains(&y));
        let l = classify_ball("b", &img, &BALL, Annotation::Mask(&tiny), &cfg()).unwrap();
        assert_eq!(l.regions[0].area(), 4);
        assert!(classify_ball("b", &img, &BALL, Annotation::Mask(&BinaryMask::new(32, 32)), &cfg()).is_err());
    }

    #[test]
    fn validity_is_monotone_in_offset() {
        let d = Disc::new(36.0, 30.0, 3.0);
        let mask = d.mask(64, 64);
        let flags: Vec<bool> = (0..20u8)
            .map(|o| {
                let img = with_void(ball_crop(100), d, o);
                classify_ball("b", &img, &BALL, Annotation::Mask(&mask), &cfg())
                    .unwrap()
                    .regions[0]
                    .valid
            })
            .collect();
        let first = flags.iter().position(|v| *v).unwrap();
        assert!(flags[first..].iter().all(|v| *v));
        assert_eq!(first, 6);
    }

    #[test]
    fn synthetic_masks_agree_with_labels() {
        let crop = ball_crop(110);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for vi in 6..=9 {
            let p = SampleParams {
                vc: 2,
                voids: vec![
                    VoidParams {
                        vr: 3,
                        vi,
                        vb: 0.0,
                        vn: 0.0,
                        vx: 27.0,
                        vy: 30.0,
                    },
                    VoidParams {
                        vr: 5,
                        vi,
                        vb: 0.0,
                        vn: 0.0,
                        vx: 38.0,
                        vy: 36.0,
                    },
                ],
            };
            let s = render_voids(&crop, &BALL, p, &mut rng).unwrap();
            let l = classify_ball("b", &s.image, &BALL, Annotation::Mask(&s.mask), &cfg()).unwrap();
            assert_eq!(l.class, VoidClass::Void);
            assert!(l.regions.iter().all(|r| r.valid));
        }
    }

    #[test]
    fn estimated_disc_matches_drawn_ball() {
        let d = estimate_disc(&ball_crop(100));
        assert!((d.cx - 32.0).abs() < 0.5 && (d.cy - 32.0).abs() < 0.5 && (d.r - 20.0).abs() < 1.0);
    }

    #[test]
    fn import_pairs_by_filename_and_rejects_orphans() {
        let crops = tempfile::tempdir().unwrap();
        let masks = tempfile::tempdir().unwrap();
        let d = Disc::new(32.0, 32.0, 4.0);
        crate::imaging::save_image(&with_void(ball_crop(100), d, 12), crops.path().join("a.png")).unwrap();
        crate::imaging::save_image(&ball_crop(100), crops.path().join("b.png")).unwrap();
        save_mask(&d.mask(64, 64), masks.path().join("a.png")).unwrap();
        save_mask(&BinaryMask::new(64, 64), masks.path().join("b.png")).unwrap();
        let out = import_manual_masks(crops.path(), masks.path(), &cfg()).unwrap();
        let classes: Vec<_> = out
            .iter()
            .map(|(_, l)| (l.ball_id.clone(), l.class, l.source))
            .collect();
        assert_eq!(
            classes,
            vec![
                ("a".to_string(), VoidClass::Void, AnnotationSource::ManualMask),
                ("b".to_string(), VoidClass::NonVoid, AnnotationSource::ManualMask)
            ]
        );
        save_mask(&BinaryMask::new(64, 64), masks.path().join("c.png")).unwrap();
        assert!(matches!(
            import_manual_masks(crops.path(), masks.path(), &cfg()),
            Err(Error::Dataset(_))
        ));
        fs::remove_file(masks.path().join("c.png")).unwrap();
        save_mask(&BinaryMask::new(32, 32), masks.path().join("b.png")).unwrap();
        match import_manual_masks(crops.path(), masks.path(), &cfg()) {
            Err(Error::DimensionMismatch(m)) => assert!(m.contains("b.png")),
            other => panic!("{other:?}"),
        }
    }
}

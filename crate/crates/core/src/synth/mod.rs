//! Synthetic void augmentation of non-void ball crops, plus a synthetic
//! board generator for exercising ball extraction.

pub mod board;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use board::{synthesize_board, BoardSpec};
pub use render::render_voids;

use crate::error::{Error, Result};
use crate::imaging::{save_image, save_mask, BinaryMask, Disc, GrayImage};
use crate::manifest::{write_jsonl, DatasetRecord, Origin, Split, VoidClass};

/// Default minimum void-over-background contrast used by the ground-truth
/// validity test; generated voids are expected to clear it.
pub const DEFAULT_THR_MIN: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vc_min: usize,
    pub vc_max: usize,
    /// Void radius range, pixels.
    pub vr_min: u32,
    pub vr_max: u32,
    /// Additive brightness offset range, luminance levels.
    pub vi_min: i32,
    pub vi_max: i32,
    /// Edge blur sigma range, pixels. Zero disables blurring.
    pub vb_min: f64,
    pub vb_max: f64,
    /// Noise variance range, luminance squared. Zero disables noise.
    pub vn_min: f64,
    pub vn_max: f64,
    pub i_max: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
    /// Redraw samples whose voids were all rejected instead of keeping them
    /// as negatives.
    pub resample_empty: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vc_min: 1,
            vc_max: 4,
            vr_min: 2,
            vr_max: 7,
            vi_min: 6,
            vi_max: 9,
            vb_min: 2.0,
            vb_max: 3.0,
            vn_min: 1.0,
            vn_max: 2.0,
            i_max: 20_000,
            height: 64,
            width: 64,
            master_seed: 0,
            resample_empty: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.vc_min == 0 || self.vc_min > self.vc_max {
            return bad("need 1 <= VC_min <= VC_max");
        }
        if self.vr_min == 0 || self.vr_min > self.vr_max {
            return bad("need 1 <= VR_min <= VR_max");
        }
        if self.vi_min < 1 || self.vi_min > self.vi_max {
            return bad("need 1 <= VI_min <= VI_max");
        }
        for (name, lo, hi) in [("VB", self.vb_min, self.vb_max), ("VN", self.vn_min, self.vn_max)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(&format!("need 0 <= {name}_min <= {name}_max"));
            }
        }
        if self.height == 0 || self.width == 0 {
            return bad("H and W must be > 0");
        }
        Ok(())
    }

    /// Non-fatal configuration problems.
    pub fn warnings(&self, thr_min: f64) -> Vec<String> {
        let mut w = Vec::new();
        if (self.vi_min as f64) < thr_min {
            w.push(format!(
                "VI_min = {} is below Thr_min = {thr_min}; some generated voids will fail the validity test",
                self.vi_min
            ));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoidParams {
    pub vr: u32,
    pub vi: i32,
    pub vb: f64,
    pub vn: f64,
    pub vx: f64,
    pub vy: f64,
}

impl VoidParams {
    pub fn disc(&self) -> Disc {
        Disc::new(self.vx, self.vy, self.vr as f64)
    }

    /// Whole void disc lies inside the ball.
    pub fn inside(&self, ball: &Disc) -> bool {
        ((self.vx - ball.cx).powi(2) + (self.vy - ball.cy).powi(2)).sqrt() + self.vr as f64 <= ball.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub vc: usize,
    pub voids: Vec<VoidParams>,
}

/// Draws VC, then VC values of each of VR, VI, VB, VN, VX, VY in turn.
pub fn sample_params<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> SampleParams {
    let vc = rng.random_range(cfg.vc_min..=cfg.vc_max);
    let vr: Vec<u32> = (0..vc).map(|_| rng.random_range(cfg.vr_min..=cfg.vr_max)).collect();
    let vi: Vec<i32> = (0..vc).map(|_| rng.random_range(cfg.vi_min..=cfg.vi_max)).collect();
    let mut real = |lo: f64, hi: f64| -> Vec<f64> {
        (0..vc)
            .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    };
    let vb = real(cfg.vb_min, cfg.vb_max);
    let vn = real(cfg.vn_min, cfg.vn_max);
    let vx = real(0.0, cfg.width as f64);
    let vy = real(0.0, cfg.height as f64);
    let voids = (0..vc)
        .map(|i| VoidParams {
            vr: vr[i],
            vi: vi[i],
            vb: vb[i],
            vn: vn[i],
            vx: vx[i],
            vy: vy[i],
        })
        .collect();
    SampleParams { vc, voids }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub params: SampleParams,
    /// Per void: survived the ball-boundary test.
    pub kept: Vec<bool>,
    pub rejected_voids: usize,
    pub seed: u64,
    /// Index of the source crop in the pool.
    pub source: usize,
    /// Ball disc of the source crop.
    pub disc: Disc,
}

/// A non-void ball crop and its disc in crop coordinates.
#[derive(Debug, Clone)]
pub struct SourceCrop {
    pub image: GrayImage,
    pub disc: Disc,
}

/// Per-sample seed derived from the master seed and the sample index.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over a combination of both inputs.
    let mut z = master_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_RESAMPLE: usize = 1000;

/// One sample, fully determined by `(pool, cfg, index)`.
pub fn generate_sample(pool: &[SourceCrop], cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    if pool.is_empty() {
        return Err(Error::Dataset("empty crop pool".into()));
    }
    let seed = sample_seed(cfg.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    loop {
        let source = rng.random_range(0..pool.len());
        let crop = &pool[source];
        if crop.image.width() != cfg.width || crop.image.height() != cfg.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {source} is {}x{}, expected {}x{}",
                crop.image.width(),
                crop.image.height(),
                cfg.width,
                cfg.height
            )));
        }
        let params = sample_params(cfg, &mut rng);
        let mut s = render_voids(&crop.image, &crop.disc, params, &mut rng)?;
        attempts += 1;
        if s.mask.is_empty() && cfg.resample_empty && attempts < MAX_RESAMPLE {
            continue;
        }
        s.seed = seed;
        s.source = source;
        return Ok(s);
    }
}

/// `cfg.i_max` samples, generated in parallel. Callers should surface
/// [`SynthConfig::warnings`] themselves.
pub fn generate_dataset(pool: &[SourceCrop], cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    if cfg.i_max == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Dataset("empty crop pool".into()));
    }
    (0..cfg.i_max)
        .into_par_iter()
        .map(|i| generate_sample(pool, cfg, i))
        .collect()
}

/// Manifest row for a synthetic sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthRecord {
    #[serde(flatten)]
    pub record: DatasetRecord,
    pub seed: u64,
    pub source: usize,
    pub disc: Disc,
    pub params: SampleParams,
    pub kept: Vec<bool>,
    pub rejected_voids: usize,
}

pub fn sample_id(index: usize) -> String {
    format!("syn_{index:06}")
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.jsonl`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], split: Split) -> Result<PathBuf> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
        let id = sample_id(i);
        save_image(&s.image, img_dir.join(format!("{id}.png")))?;
        save_mask(&s.mask, mask_dir.join(format!("{id}.png")))
    })?;
    let rows: Vec<SynthRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let id = sample_id(i);
            SynthRecord {
                record: DatasetRecord {
                    image: PathBuf::from(format!("images/{id}.png")),
                    mask: Some(PathBuf::from(format!("masks/{id}.png"))),
                    class: Some(if s.mask.is_empty() {
                        VoidClass::NonVoid
                    } else {
                        VoidClass::Void
                    }),
                    split,
                    origin: Origin::Synthetic,
                    id,
                },
                seed: s.seed,
                source: s.source,
                disc: s.disc,
                params: s.params.clone(),
                kept: s.kept.clone(),
                rejected_voids: s.rejected_voids,
            }
        })
        .collect();
    let manifest = dir.join("manifest.jsonl");
    write_jsonl(&manifest, &rows)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<SourceCrop> {
        let disc = Disc::new(32.0, 32.0, 20.0);
        let image = GrayImage::from_fn(64, 64, |x, y| if disc.contains(x as f64, y as f64) { 120 } else { 30 });
        vec![SourceCrop { image, disc }]
    }

    #[test]
    fn fixed_count_range() {
        let cfg = SynthConfig {
            vc_min: 1,
            vc_max: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = sample_params(&cfg, &mut rng);
            assert_eq!((p.vc, p.voids.len()), (1, 1));
        }
    }

    #[test]
    fn count_frequencies_are_uniform() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut hist = [0usize; 5];
        for _ in 0..n {
            hist[sample_params(&cfg, &mut rng).vc] += 1;
        }
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        for &h in &hist[1..] {
            assert!((h as f64 / n as f64 - 0.25).abs() <= 4.0 * sigma, "{hist:?}");
        }
        assert_eq!(hist[0], 0);
    }

    #[test]
    fn params_are_within_ranges_and_deterministic() {
        let cfg = SynthConfig::default();
        let a = sample_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            for v in sample_params(&cfg, &mut rng).voids {
                assert!((2..=7).contains(&v.vr) && (6..=9).contains(&v.vi));
                assert!((2.0..3.0).contains(&v.vb) && (1.0..2.0).contains(&v.vn));
                assert!((0.0..64.0).contains(&v.vx) && (0.0..64.0).contains(&v.vy));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig {
            vr_min: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let low = SynthConfig {
            vi_min: 4,
            ..Default::default()
        };
        assert_eq!(low.warnings(DEFAULT_THR_MIN).len(), 1);
        assert!(SynthConfig::default().warnings(DEFAULT_THR_MIN).is_empty());
    }

    #[test]
    fn empty_dataset_and_empty_pool() {
        let cfg = SynthConfig {
            i_max: 0,
            ..Default::default()
        };
        assert!(generate_dataset(&[], &cfg).unwrap().is_empty());
        let cfg = SynthConfig {
            i_max: 3,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&[], &cfg), Err(Error::Dataset(_))));
    }

    #[test]
    fn generation_is_deterministic_and_order_independent() {
        let cfg = SynthConfig {
            i_max: 40,
            master_seed: 77,
            ..Default::default()
        };
        let a = generate_dataset(&pool(), &cfg).unwrap();
        let b = generate_dataset(&pool(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_sample(&pool(), &cfg, 17).unwrap(), a[17]);
        assert_ne!(a[0].seed, a[1].seed);
    }

    #[test]
    fn resample_policy_removes_empty_samples() {
        let cfg = SynthConfig {
            i_max: 60,
            resample_empty: true,
            ..Default::default()
        };
        assert!(generate_dataset(&pool(), &cfg)
            .unwrap()
            .iter()
            .all(|s| !s.mask.is_empty()));
    }

    #[test]
    fn written_dataset_is_byte_identical_on_rerun() {
        let cfg = SynthConfig {
            i_max: 12,
            master_seed: 9,
            ..Default::default()
        };
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            write_dataset(d.path(), &generate_dataset(&pool(), &cfg).unwrap(), Split::Train).unwrap();
        }
        for rel in ["manifest.jsonl", "images/syn_000003.png", "masks/syn_000011.png"] {
            assert_eq!(
                fs::read(dirs[0].path().join(rel)).unwrap(),
                fs::read(dirs[1].path().join(rel)).unwrap()
            );
        }
        let recs = crate::manifest::read_manifest(&dirs[0].path().join("manifest.jsonl")).unwrap();
        assert_eq!(recs.len(), 12);
    }
}

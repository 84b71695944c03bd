//! Post-processing of probability maps and scoring against ground truth.

pub mod overlay;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use overlay::render_overlay;

use crate::error::{Error, Result};
use crate::imaging::{connected_components, BinaryMask, Connectivity, Disc, Region};
use crate::segnet::ProbMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Probabilities strictly above this are void.
    pub threshold: f32,
    /// Regions smaller than this are discarded.
    pub a_min: usize,
    pub iou_min: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            a_min: 9,
            iou_min: 0.3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "eval.threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return Err(Error::Config(format!(
                "eval.iou_min must be in (0, 1], got {}",
                self.iou_min
            )));
        }
        Ok(())
    }
}

pub fn binarize(prob: &ProbMap, threshold: f32) -> BinaryMask {
    BinaryMask::from_fn(prob.width, prob.height, |x, y| prob.get(x, y) > threshold)
}

/// 8-connected regions with `area >= a_min`.
pub fn filter_regions(mask: &BinaryMask, a_min: usize) -> Vec<Region> {
    connected_components(mask, Connectivity::Eight)
        .regions
        .into_iter()
        .filter(|r| r.area >= a_min)
        .collect()
}

fn regions_mask(width: usize, height: usize, regions: &[Region]) -> BinaryMask {
    let mut m = BinaryMask::new(width, height);
    for &(x, y) in regions.iter().flat_map(|r| &r.pixels) {
        m.set(x, y, true);
    }
    m
}

/// Percentage of the ball's rasterized disc covered by `mask`. Void pixels
/// outside the disc are not counted.
pub fn void_percentage(mask: &BinaryMask, ball: &Disc) -> Result<f64> {
    let disc = ball.mask(mask.width(), mask.height());
    let area = disc.count();
    if area == 0 {
        return Err(Error::InvalidArgument("ball disc covers no pixels".into()));
    }
    let void = mask.intersection(&disc)?.count();
    Ok(100.0 * void as f64 / area as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub ball_id: String,
    /// Retained regions only.
    pub mask: BinaryMask,
    pub region_areas: Vec<usize>,
    pub void_percentage: f64,
}

/// Binarize, drop small regions and quantify.
pub fn postprocess(ball_id: &str, prob: &ProbMap, ball: &Disc, cfg: &EvalConfig) -> Result<PredictionResult> {
    let regions = filter_regions(&binarize(prob, cfg.threshold), cfg.a_min);
    let mask = regions_mask(prob.width, prob.height, &regions);
    Ok(PredictionResult {
        ball_id: ball_id.to_string(),
        void_percentage: void_percentage(&mask, ball)?,
        region_areas: regions.iter().map(|r| r.area).collect(),
        mask,
    })
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision / recall / F1 from counts. Undefined ratios are reported as 0
/// with the matching flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl Scores {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| {
            if den > 0 {
                (num as f64 / den as f64, false)
            } else {
                (0.0, true)
            }
        };
        let (precision, pu) = ratio(tp, tp + fp);
        let (recall, ru) = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_from(precision, recall),
            precision_undefined: pu,
            recall_undefined: ru,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl Counts {
    pub fn scores(&self) -> Scores {
        Scores::from_counts(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallMatch {
    pub ball_id: String,
    pub regions: Counts,
    pub pixels: Counts,
    /// IoU of each matched pair.
    pub matched_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub region: Scores,
    pub pixel: Scores,
    pub matching: String,
    pub iou_min: f64,
    pub a_min: usize,
    pub threshold: f32,
    pub balls: Vec<BallMatch>,
}

fn iou(a: &Region, b: &Region, width: usize) -> f64 {
    if a.bbox.x_max < b.bbox.x_min
        || b.bbox.x_max < a.bbox.x_min
        || a.bbox.y_max < b.bbox.y_min
        || b.bbox.y_max < a.bbox.y_min
    {
        return 0.0;
    }
    let set: std::collections::HashSet<usize> = a.pixels.iter().map(|&(x, y)| y * width + x).collect();
    let inter = b
        .pixels
        .iter()
        .filter(|&&(x, y)| set.contains(&(y * width + x)))
        .count();
    inter as f64 / (a.area + b.area - inter) as f64
}

/// One-to-one greedy matching of regions by descending IoU.
pub fn match_ball(ball_id: &str, pred: &BinaryMask, gt: &BinaryMask, iou_min: f64) -> Result<BallMatch> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch(format!(
            "{ball_id}: prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let w = pred.width();
    let p = connected_components(pred, Connectivity::Eight).regions;
    let g = connected_components(gt, Connectivity::Eight).regions;
    let mut pairs = Vec::new();
    for (i, pr) in p.iter().enumerate() {
        for (j, gr) in g.iter().enumerate() {
            let v = iou(pr, gr, w);
            if v >= iou_min {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut pu, mut gu) = (vec![false; p.len()], vec![false; g.len()]);
    let mut matched_iou = Vec::new();
    for (v, i, j) in pairs {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            matched_iou.push(v);
        }
    }
    let tp = matched_iou.len() as u64;
    let inter = pred.intersection(gt)?.count() as u64;
    Ok(BallMatch {
        ball_id: ball_id.to_string(),
        regions: Counts {
            tp,
            fp: p.len() as u64 - tp,
            fn_: g.len() as u64 - tp,
        },
        pixels: Counts {
            tp: inter,
            fp: pred.count() as u64 - inter,
            fn_: gt.count() as u64 - inter,
        },
        matched_iou,
    })
}

/// Scores `(ball_id, post-processed prediction, ground truth)` triples.
pub fn match_and_score(items: &[(String, BinaryMask, BinaryMask)], cfg: &EvalConfig) -> Result<EvalReport> {
    let balls: Vec<BallMatch> = items
        .par_iter()
        .map(|(id, p, g)| match_ball(id, p, g, cfg.iou_min))
        .collect::<Result<_>>()?;
    let (r, px) = balls.iter().fold((Counts::default(), Counts::default()), |(r, p), b| {
        (r + b.regions, p + b.pixels)
    });
    Ok(EvalReport {
        name: None,
        region: r.scores(),
        pixel: px.scores(),
        matching: format!("greedy one-to-one, IoU >= {}", cfg.iou_min),
        iou_min: cfg.iou_min,
        a_min: cfg.a_min,
        threshold: cfg.threshold,
        balls,
    })
}

/// Row labels of the three training compositions compared in the report.
pub const REPORT_ROWS: [&str; 3] = [
    "Train_Real_Test_Real",
    "Train_Syn_Test_Real",
    "Train_Real_Syn_Test_Real",
];

/// Aligned text table with region- and pixel-level scores per report.
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!(
        "{:<width$}  {:>9}  {:>6}  {:>8}  {:>9}  {:>9}  {:>8}\n",
        "Method", "Precision", "Recall", "F1 Score", "Pixel P", "Pixel R", "Pixel F1"
    );
    for (name, r) in rows {
        out += &format!(
            "{:<width$}  {:>9.2}  {:>6.2}  {:>8.2}  {:>9.2}  {:>9.2}  {:>8.2}\n",
            name, r.region.precision, r.region.recall, r.region.f1, r.pixel.precision, r.pixel.recall, r.pixel.f1
        );
    }
    out
}

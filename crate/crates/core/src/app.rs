//! Command implementations behind the `voidscan` binary.
//!
//! Each command reads its inputs, writes its outputs plus an effective-config
//! snapshot into the output location, and returns a small summary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balls::{extract_balls, extract_crops, write_board_outputs, BallDetection, CropRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    filter_regions, format_table, match_and_score, postprocess, render_overlay, EvalReport, PredictionResult,
};
use crate::ground_truth::{estimate_disc, import_manual_masks, label_with_log, list_crops, LabelRecord};
use crate::imaging::{load_image, load_mask, save_image, save_mask, BinaryMask, Disc};
use crate::manifest::{read_jsonl, read_manifest, write_jsonl, DatasetRecord, Split, VoidClass};
use crate::segnet::{
    train_classifier, train_classifier_split, train_unet, train_unet_split, EpochRecord, LabeledCrop, NetworkParams,
    SegSample, Stage, TrainOutcome,
};
use crate::synth::{generate_dataset, write_dataset, SourceCrop};

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractSummary {
    pub boards: usize,
    pub balls: usize,
    pub refined: usize,
}

/// Ball extraction over one board file or every PNG in a directory.
pub fn extract_balls_cmd(cfg: &RunConfig, board: &Path, out: &Path) -> Result<ExtractSummary> {
    cfg.extract.validate()?;
    let boards: Vec<PathBuf> = if board.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(board)
            .map_err(|e| Error::io(board, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_png(p))
            .collect();
        v.sort();
        v
    } else if board.is_file() {
        vec![board.to_path_buf()]
    } else {
        return Err(Error::MissingFile {
            path: board.to_path_buf(),
        });
    };
    if boards.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no boards found in {}",
            board.display()
        )));
    }
    let mut summary = ExtractSummary {
        boards: boards.len(),
        balls: 0,
        refined: 0,
    };
    for path in &boards {
        let img = load_image(path)?;
        let grid = extract_balls(&img, &cfg.extract)?;
        let crops = extract_crops(&img, &grid, &cfg.extract);
        write_board_outputs(out, &stem(path), &crops)?;
        let refined = grid
            .balls
            .iter()
            .filter(|b| b.source == crate::balls::Source::Refined)
            .count();
        log::info!("{}: {} balls ({} refined)", path.display(), grid.balls.len(), refined);
        summary.balls += grid.balls.len();
        summary.refined += refined;
    }
    cfg.snapshot(out)?;
    Ok(summary)
}

/// Labels crops with LoG contours, or from manual masks when `masks` is set.
/// Writes the labels manifest to `out` and valid-void masks beside it.
pub fn label_cmd(cfg: &RunConfig, crops: &Path, masks: Option<&Path>, out: &Path) -> Result<usize> {
    let crops = absolute(crops)?;
    let labelled = match masks {
        Some(m) => import_manual_masks(&crops, m, &cfg.label)?,
        None => list_crops(&crops)?
            .into_par_iter()
            .map(|c| {
                let img = load_image(&c.path)?;
                let l = label_with_log(&c.id, &img, &c.disc, &cfg.label)?;
                Ok((c, l))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let dir = parent_dir(out);
    let mask_dir_name = format!("{}_masks", stem(out));
    let mask_dir = dir.join(&mask_dir_name);
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut rows = Vec::with_capacity(labelled.len());
    for (entry, label) in &labelled {
        let img = load_image(&entry.path)?;
        let file = format!("{}.png", entry.id);
        save_mask(&label.void_mask(img.width(), img.height()), mask_dir.join(&file))?;
        rows.push(LabelRecord::new(
            entry,
            label,
            Some(Path::new(&mask_dir_name).join(file)),
        ));
    }
    write_jsonl(out, &rows)?;
    cfg.snapshot(&dir)?;
    let voids = rows.iter().filter(|r| r.class == VoidClass::Void).count();
    log::info!(
        "labelled {} crops: {voids} void, {} non-void",
        rows.len(),
        rows.len() - voids
    );
    Ok(rows.len())
}

/// Manifest row with the optional fields any stage may need.
#[derive(Debug, Clone, Deserialize)]
struct LooseRecord {
    id: String,
    image: PathBuf,
    #[serde(default)]
    mask: Option<PathBuf>,
    #[serde(default)]
    class: Option<VoidClass>,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    disc: Option<Disc>,
}

/// A crop to process, from a directory or a manifest.
#[derive(Debug, Clone)]
pub struct CropItem {
    pub id: String,
    pub path: PathBuf,
    pub disc: Disc,
    pub class: Option<VoidClass>,
    pub split: Option<Split>,
}

/// Crops from a directory of PNGs or from any JSON-lines manifest.
pub fn load_crop_items(src: &Path) -> Result<Vec<CropItem>> {
    if src.is_dir() {
        return Ok(list_crops(src)?
            .into_iter()
            .map(|c| CropItem {
                id: c.id,
                path: c.path,
                disc: c.disc,
                class: None,
                split: None,
            })
            .collect());
    }
    let base = parent_dir(src);
    read_jsonl::<LooseRecord>(src)?
        .into_iter()
        .map(|r| {
            let path = if r.image.is_absolute() {
                r.image
            } else {
                base.join(r.image)
            };
            let disc = match r.disc {
                Some(d) => d,
                None => estimate_disc(&load_image(&path)?),
            };
            Ok(CropItem {
                id: r.id,
                path,
                disc,
                class: r.class,
                split: r.split,
            })
        })
        .collect()
}

/// Synthetic dataset from non-void crops. A manifest source is filtered to
/// its `non_void` rows; every crop in a directory source is used.
pub fn synth_cmd(cfg: &RunConfig, crops: &Path, out: &Path, split: Split) -> Result<usize> {
    cfg.synth.validate()?;
    for w in cfg.synth.warnings(cfg.label.thr_min) {
        log::warn!("{w}");
    }
    let items = load_crop_items(crops)?;
    let pool: Vec<SourceCrop> = items
        .iter()
        .filter(|c| c.class != Some(VoidClass::Void))
        .map(|c| {
            Ok(SourceCrop {
                image: load_image(&c.path)?,
                disc: c.disc,
            })
        })
        .collect::<Result<_>>()?;
    if pool.is_empty() && cfg.synth.i_max > 0 {
        return Err(Error::Dataset(format!(
            "no non-void crops found in {}",
            crops.display()
        )));
    }
    let samples = generate_dataset(&pool, &cfg.synth)?;
    write_dataset(out, &samples, split)?;
    cfg.snapshot(out)?;
    let empty = samples.iter().filter(|s| s.mask.is_empty()).count();
    log::info!("wrote {} samples ({empty} without kept voids)", samples.len());
    Ok(samples.len())
}

fn log_epoch(stage: Stage) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| match r.val_loss {
        Some(v) => log::info!(
            "{stage} epoch {}: train {:.5} val {:.5} ({:.0}s)",
            r.epoch,
            r.train_loss,
            v,
            r.wall_time
        ),
        None => log::info!(
            "{stage} epoch {}: train {:.5} ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.wall_time
        ),
    }
}

/// Trains one stage from a dataset manifest. Rows with `split = val` form
/// the validation set; without any, a fraction of the training rows is held
/// out. `test` rows are ignored.
pub fn train_cmd(
    cfg: &RunConfig,
    stage: Stage,
    manifest: &Path,
    out: &Path,
    encoder: Option<&Path>,
) -> Result<TrainOutcome> {
    let recs = read_manifest(manifest)?;
    let train: Vec<&DatasetRecord> = recs.iter().filter(|r| r.split == Split::Train).collect();
    let val: Vec<&DatasetRecord> = recs.iter().filter(|r| r.split == Split::Val).collect();
    if train.is_empty() {
        return Err(Error::Dataset(format!("{} has no train rows", manifest.display())));
    }
    let outcome = match stage {
        Stage::Classifier => {
            let load = |rs: &[&DatasetRecord]| -> Result<Vec<LabeledCrop>> {
                rs.iter()
                    .map(|r| {
                        let class = r
                            .class
                            .ok_or_else(|| Error::Dataset(format!("row {:?} has no class label", r.id)))?;
                        Ok(LabeledCrop {
                            image: load_image(&r.image)?,
                            void: class == VoidClass::Void,
                        })
                    })
                    .collect()
            };
            let (tr, va) = (load(&train)?, load(&val)?);
            if va.is_empty() {
                train_classifier(&tr, &cfg.classifier, log_epoch(stage))?
            } else {
                train_classifier_split(&tr, &va, &cfg.classifier, log_epoch(stage))?
            }
        }
        Stage::Unet => {
            let enc = match encoder {
                Some(p) => {
                    let ck = NetworkParams::load(p)?;
                    if ck.network.stage() != Stage::Classifier {
                        return Err(Error::Checkpoint(format!(
                            "{} is not a classifier checkpoint",
                            p.display()
                        )));
                    }
                    Some(ck.network)
                }
                None => {
                    log::warn!("no classifier checkpoint given; the U-Net encoder starts from random weights");
                    None
                }
            };
            let load = |rs: &[&DatasetRecord]| -> Result<Vec<SegSample>> {
                rs.iter()
                    .map(|r| {
                        let mask = r
                            .mask
                            .as_ref()
                            .ok_or_else(|| Error::Dataset(format!("row {:?} has no mask", r.id)))?;
                        Ok(SegSample {
                            image: load_image(&r.image)?,
                            mask: load_mask(mask)?,
                        })
                    })
                    .collect()
            };
            let (tr, va) = (load(&train)?, load(&val)?);
            if va.is_empty() {
                train_unet(&tr, &cfg.unet, enc.as_ref(), log_epoch(stage))?
            } else {
                train_unet_split(&tr, &va, &cfg.unet, enc.as_ref(), log_epoch(stage))?
            }
        }
    };
    outcome.params.save(out)?;
    cfg.snapshot(&parent_dir(out))?;
    log::info!("best epoch {} saved to {}", outcome.best_epoch, out.display());
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
    pub class: VoidClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub void_percentage: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region_areas: Vec<usize>,
    pub disc: Disc,
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Runs a checkpoint over crops. U-Net checkpoints write post-processed masks
/// and void percentages; classifier checkpoints write void scores. With
/// `board`, an annotated overlay of that board is written too.
pub fn infer_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    crops: &Path,
    out: &Path,
    split: Option<Split>,
    board: Option<&Path>,
) -> Result<usize> {
    cfg.eval.validate()?;
    let net = NetworkParams::load(ckpt)?.network;
    let items: Vec<CropItem> = load_crop_items(crops)?
        .into_iter()
        .filter(|c| split.is_none() || c.split == split)
        .collect();
    let images = items.iter().map(|c| load_image(&c.path)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(items.len());
    let mut results: HashMap<String, PredictionResult> = HashMap::new();
    match net.stage() {
        Stage::Unet => {
            let mask_dir = out.join("masks");
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            for (chunk_items, chunk_imgs) in items.chunks(64).zip(images.chunks(64)) {
                let maps = net.predict_maps(chunk_imgs)?;
                for (c, map) in chunk_items.iter().zip(&maps) {
                    let res = postprocess(&c.id, map, &c.disc, &cfg.eval)?;
                    let rel = PathBuf::from(format!("masks/{}.png", c.id));
                    save_mask(&res.mask, out.join(&rel))?;
                    rows.push(PredictionRecord {
                        id: c.id.clone(),
                        image: c.path.clone(),
                        mask: Some(rel),
                        score: None,
                        class: if res.region_areas.is_empty() {
                            VoidClass::NonVoid
                        } else {
                            VoidClass::Void
                        },
                        void_percentage: Some(res.void_percentage),
                        region_areas: res.region_areas.clone(),
                        disc: c.disc,
                    });
                    results.insert(c.id.clone(), res);
                }
            }
        }
        Stage::Classifier => {
            let scores = net.predict_scores(&images)?;
            for (c, s) in items.iter().zip(scores) {
                rows.push(PredictionRecord {
                    id: c.id.clone(),
                    image: c.path.clone(),
                    mask: None,
                    score: Some(s),
                    class: if s > cfg.eval.threshold {
                        VoidClass::Void
                    } else {
                        VoidClass::NonVoid
                    },
                    void_percentage: None,
                    region_areas: Vec::new(),
                    disc: c.disc,
                });
            }
        }
    }
    write_jsonl(&out.join(PREDICTIONS_FILE), &rows)?;
    if let Some(board_path) = board {
        if net.stage() != Stage::Unet {
            return Err(Error::InvalidArgument("an overlay needs a U-Net checkpoint".into()));
        }
        let id = stem(board_path);
        let rec_path = crops.join(format!("board_{id}_crops.jsonl"));
        let recs: Vec<CropRecord> = read_jsonl(&rec_path)?;
        let balls: Vec<(BallDetection, PredictionResult)> = recs
            .into_iter()
            .filter_map(|r| {
                let rid = stem(Path::new(&r.file));
                results.remove(&rid).map(|res| (r.detection, res))
            })
            .collect();
        let overlay = render_overlay(&load_image(board_path)?, &balls, cfg.extract.crop_size);
        save_image(&overlay, out.join(format!("overlay_{id}.png")))?;
    }
    cfg.snapshot(out)?;
    log::info!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(rows.len())
}

/// Scores predicted masks against ground-truth masks matched by id. Writes
/// `eval.json` and `eval.txt` into `out`.
pub fn evaluate_cmd(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path, name: Option<&str>) -> Result<EvalReport> {
    cfg.eval.validate()?;
    let pred_file = if pred.is_dir() {
        pred.join(PREDICTIONS_FILE)
    } else {
        pred.to_path_buf()
    };
    let masks_of = |file: &Path| -> Result<HashMap<String, PathBuf>> {
        let base = parent_dir(file);
        read_jsonl::<LooseRecord>(file)?
            .into_iter()
            .map(|r| {
                let m = r
                    .mask
                    .ok_or_else(|| Error::Dataset(format!("{}: row {:?} has no mask", file.display(), r.id)))?;
                Ok((r.id, if m.is_absolute() { m } else { base.join(m) }))
            })
            .collect()
    };
    let preds = masks_of(&pred_file)?;
    let gts = masks_of(gt)?;
    let mut ids: Vec<&String> = preds.keys().collect();
    ids.sort();
    if let Some(missing) = ids.iter().find(|id| !gts.contains_key(**id)) {
        return Err(Error::Dataset(format!("prediction {missing:?} has no ground truth")));
    }
    let unpredicted = gts.len() - ids.len();
    if unpredicted > 0 {
        log::warn!("{unpredicted} ground-truth rows have no prediction and are not scored");
    }
    let items = ids
        .par_iter()
        .map(|id| {
            let p = load_mask(&preds[*id])?;
            let regions = filter_regions(&p, cfg.eval.a_min);
            let mut kept = BinaryMask::new(p.width(), p.height());
            for &(x, y) in regions.iter().flat_map(|r| &r.pixels) {
                kept.set(x, y, true);
            }
            Ok(((*id).clone(), kept, load_mask(&gts[*id])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = match_and_score(&items, &cfg.eval)?;
    report.name = name.map(str::to_string);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("eval.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let label = name.unwrap_or("eval").to_string();
    let txt = out.join("eval.txt");
    fs::write(&txt, format_table(&[(label, &report)])).map_err(|e| Error::io(&txt, e))?;
    cfg.snapshot(out)?;
    log::info!(
        "region P {:.3} R {:.3} F1 {:.3}; pixel F1 {:.3}",
        report.region.precision,
        report.region.recall,
        report.region.f1,
        report.pixel.f1
    );
    Ok(report)
}

/// Joins evaluation reports into one comparison table written to `out`.
/// Row labels come from `labels`, else each report's name, else its file
/// name.
pub fn report_cmd(evals: &[PathBuf], labels: Option<&[String]>, out: &Path) -> Result<String> {
    if evals.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one evaluation file".into(),
        ));
    }
    if let Some(l) = labels {
        if l.len() != evals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} evaluation files",
                l.len(),
                evals.len()
            )));
        }
    }
    let reports = evals
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("eval.json") } else { p.clone() };
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            Ok((file, serde_json::from_str::<EvalReport>(&text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(String, &EvalReport)> = reports
        .iter()
        .enumerate()
        .map(|(i, (file, r))| {
            let label = labels
                .map(|l| l[i].clone())
                .or_else(|| r.name.clone())
                .unwrap_or_else(|| {
                    let parent = file.parent().map(stem).unwrap_or_default();
                    if stem(file) == "eval" && !parent.is_empty() {
                        parent
                    } else {
                        stem(file)
                    }
                });
            (label, r)
        })
        .collect();
    let table = format_table(&rows);
    let dir = parent_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    fs::write(out, &table).map_err(|e| Error::io(out, e))?;
    Ok(table)
}

//! Flat `key = value` run configuration with dotted keys.
//!
//! Every tunable constant is addressable, e.g. `extract.SR = 5` or
//! `synth.VC_max = 4`. Keys are matched case-insensitively; unknown keys are
//! errors. [`RunConfig::snapshot`] writes the effective settings back in the
//! same format so a run can be repeated from its output directory.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::balls::ExtractionConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::ground_truth::GroundTruthConfig;
use crate::imaging::Polarity;
use crate::segnet::{Architecture, TrainConfig};
use crate::synth::SynthConfig;

pub const SNAPSHOT_FILE: &str = "effective_config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub extract: ExtractionConfig,
    pub label: GroundTruthConfig,
    pub synth: SynthConfig,
    pub arch: ArchPreset,
    pub classifier: TrainConfig,
    pub unet: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            extract: ExtractionConfig::default(),
            label: GroundTruthConfig::default(),
            synth: SynthConfig::default(),
            arch: ArchPreset::Full,
            classifier: TrainConfig::classifier(),
            unet: TrainConfig::unet(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

const TRAIN_KEYS: [&str; 8] = [
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "val_fraction",
    "patience",
    "target_loss",
    "micro_batch",
];

fn set_train(t: &mut TrainConfig, key: &str, sub: &str, v: &str) -> Result<bool> {
    match sub {
        "lr" => t.lr = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "epochs" => t.epochs = parse(key, v)?,
        "seed" => t.seed = parse(key, v)?,
        "val_fraction" => t.val_fraction = parse(key, v)?,
        "patience" => t.patience = parse_opt(key, v)?,
        "target_loss" => t.target_loss = parse_opt(key, v)?,
        "micro_batch" => t.micro_batch = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_pairs(prefix: &str, t: &TrainConfig) -> Vec<(String, String)> {
    let vals = [
        t.lr.to_string(),
        t.batch_size.to_string(),
        t.epochs.to_string(),
        t.seed.to_string(),
        t.val_fraction.to_string(),
        opt_str(&t.patience),
        opt_str(&t.target_loss),
        t.micro_batch.to_string(),
    ];
    TRAIN_KEYS
        .iter()
        .zip(vals)
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
}

impl RunConfig {
    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchPreset::Full => Architecture::default(),
            ArchPreset::Tiny => Architecture::miniature(self.synth.width),
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key.trim().to_ascii_lowercase();
        let v = v.trim();
        let (section, sub) = k
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} has no section")))?;
        let e = &mut self.extract;
        let s = &mut self.synth;
        let known = match (section, sub) {
            ("extract", "slice_w") => {
                e.slice_w = parse(key, v)?;
                true
            }
            ("extract", "slice_h") => {
                e.slice_h = parse(key, v)?;
                true
            }
            ("extract", "sca") => {
                e.sca = parse(key, v)?;
                true
            }
            ("extract", "sr") => {
                e.search_range = parse(key, v)?;
                true
            }
            ("extract", "crop_size") => {
                e.crop_size = parse(key, v)?;
                true
            }
            ("extract", "polarity") => {
                e.polarity = match v.to_ascii_lowercase().as_str() {
                    "bright" => Polarity::BrightForeground,
                    "dark" => Polarity::DarkForeground,
                    _ => return Err(Error::Config(format!("{key}: expected bright or dark, got {v:?}"))),
                };
                true
            }
            ("extract", "min_ball_area") => {
                e.min_ball_area = parse(key, v)?;
                true
            }
            ("extract", "max_fit_residual") => {
                e.max_fit_residual = parse(key, v)?;
                true
            }
            ("extract", "min_slice_contrast") => {
                e.min_slice_contrast = parse(key, v)?;
                true
            }
            ("label", "thr_min") => {
                self.label.thr_min = parse(key, v)?;
                true
            }
            ("label", "log_sigma") => {
                self.label.log_sigma = parse(key, v)?;
                true
            }
            ("label", "log_floor") => {
                self.label.log_floor = parse(key, v)?;
                true
            }
            ("label", "ring_width") => {
                self.label.ring_width = parse(key, v)?;
                true
            }
            ("label", "rim_margin") => {
                self.label.rim_margin = parse(key, v)?;
                true
            }
            ("synth", "vc_min") => {
                s.vc_min = parse(key, v)?;
                true
            }
            ("synth", "vc_max") => {
                s.vc_max = parse(key, v)?;
                true
            }
            ("synth", "vr_min") => {
                s.vr_min = parse(key, v)?;
                true
            }
            ("synth", "vr_max") => {
                s.vr_max = parse(key, v)?;
                true
            }
            ("synth", "vi_min") => {
                s.vi_min = parse(key, v)?;
                true
            }
            ("synth", "vi_max") => {
                s.vi_max = parse(key, v)?;
                true
            }
            ("synth", "vb_min") => {
                s.vb_min = parse(key, v)?;
                true
            }
            ("synth", "vb_max") => {
                s.vb_max = parse(key, v)?;
                true
            }
            ("synth", "vn_min") => {
                s.vn_min = parse(key, v)?;
                true
            }
            ("synth", "vn_max") => {
                s.vn_max = parse(key, v)?;
                true
            }
            ("synth", "i_max") => {
                s.i_max = parse(key, v)?;
                true
            }
            ("synth", "h") => {
                s.height = parse(key, v)?;
                true
            }
            ("synth", "w") => {
                s.width = parse(key, v)?;
                true
            }
            ("synth", "master_seed") => {
                s.master_seed = parse(key, v)?;
                true
            }
            ("synth", "resample_empty") => {
                s.resample_empty = parse(key, v)?;
                true
            }
            ("model", "arch") => {
                self.arch = match v.to_ascii_lowercase().as_str() {
                    "full" => ArchPreset::Full,
                    "tiny" => ArchPreset::Tiny,
                    _ => return Err(Error::Config(format!("{key}: expected full or tiny, got {v:?}"))),
                };
                true
            }
            ("classifier", sub) => set_train(&mut self.classifier, key, sub, v)?,
            ("unet", sub) => set_train(&mut self.unet, key, sub, v)?,
            ("eval", "threshold") => {
                self.eval.threshold = parse(key, v)?;
                true
            }
            ("eval", "a_min") => {
                self.eval.a_min = parse(key, v)?;
                true
            }
            ("eval", "iou_min") => {
                self.eval.iou_min = parse(key, v)?;
                true
            }
            _ => false,
        };
        if !known {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        let arch = self.architecture();
        self.classifier.arch = arch.clone();
        self.unet.arch = arch;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.extract.validate()?;
        self.synth.validate()?;
        self.classifier.validate()?;
        self.unet.validate()?;
        self.eval.validate()?;
        if !(self.label.log_sigma > 0.0) || self.label.ring_width == 0 {
            return Err(Error::Config("label.log_sigma and label.ring_width must be > 0".into()));
        }
        Ok(())
    }

    /// All keys with their effective values, in a stable order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let e = &self.extract;
        let s = &self.synth;
        let mut out: Vec<(String, String)> = [
            ("extract.slice_w", e.slice_w.to_string()),
            ("extract.slice_h", e.slice_h.to_string()),
            ("extract.sca", e.sca.to_string()),
            ("extract.SR", e.search_range.to_string()),
            ("extract.crop_size", e.crop_size.to_string()),
            (
                "extract.polarity",
                match e.polarity {
                    Polarity::BrightForeground => "bright".into(),
                    Polarity::DarkForeground => "dark".into(),
                },
            ),
            ("extract.min_ball_area", e.min_ball_area.to_string()),
            ("extract.max_fit_residual", e.max_fit_residual.to_string()),
            ("extract.min_slice_contrast", e.min_slice_contrast.to_string()),
            ("label.Thr_min", self.label.thr_min.to_string()),
            ("label.log_sigma", self.label.log_sigma.to_string()),
            ("label.log_floor", self.label.log_floor.to_string()),
            ("label.ring_width", self.label.ring_width.to_string()),
            ("label.rim_margin", self.label.rim_margin.to_string()),
            ("synth.VC_min", s.vc_min.to_string()),
            ("synth.VC_max", s.vc_max.to_string()),
            ("synth.VR_min", s.vr_min.to_string()),
            ("synth.VR_max", s.vr_max.to_string()),
            ("synth.VI_min", s.vi_min.to_string()),
            ("synth.VI_max", s.vi_max.to_string()),
            ("synth.VB_min", s.vb_min.to_string()),
            ("synth.VB_max", s.vb_max.to_string()),
            ("synth.VN_min", s.vn_min.to_string()),
            ("synth.VN_max", s.vn_max.to_string()),
            ("synth.I_max", s.i_max.to_string()),
            ("synth.H", s.height.to_string()),
            ("synth.W", s.width.to_string()),
            ("synth.master_seed", s.master_seed.to_string()),
            ("synth.resample_empty", s.resample_empty.to_string()),
            (
                "model.arch",
                match self.arch {
                    ArchPreset::Full => "full".into(),
                    ArchPreset::Tiny => "tiny".into(),
                },
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(train_pairs("classifier", &self.classifier));
        out.extend(train_pairs("unet", &self.unet));
        out.push(("eval.threshold".into(), self.eval.threshold.to_string()));
        out.push(("eval.A_min".into(), self.eval.a_min.to_string()));
        out.push(("eval.iou_min".into(), self.eval.iou_min.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes the effective configuration into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SNAPSHOT_FILE);
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }
}

//! `voidscan` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use voidscan::app;
use voidscan::config::RunConfig;
use voidscan::manifest::Split;
use voidscan::segnet::Stage;
use voidscan::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "voidscan",
    version,
    about = "Void detection in BGA solder balls from X-ray images"
)]
struct Cli {
    /// Resolve all relative paths against this directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set synth.I_max=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// More log output (-v info is the default, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Classifier,
    Unet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Locate solder balls on board images and export fixed-size crops.
    ExtractBalls {
        /// Board PNG or a directory of board PNGs.
        #[arg(long)]
        board: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label crops as void / non-void (LoG contours, or manual masks).
    Label {
        #[arg(long)]
        crops: PathBuf,
        /// Directory of masks named like the crops.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Labels manifest to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic void dataset from non-void crops.
    Synth {
        /// Crop directory or labels manifest.
        #[arg(long)]
        crops: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split recorded in the generated manifest.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Redraw samples whose voids were all rejected.
        #[arg(long)]
        resample_empty: bool,
    },
    /// Train the encoder classifier or the U-Net.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to write (a JSON sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        /// Classifier checkpoint whose encoder initializes the U-Net.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Run a checkpoint over crops.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Crop directory or manifest.
        #[arg(long)]
        crops: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only manifest rows of this split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Board image to annotate (crops must come from extract-balls).
        #[arg(long)]
        board: Option<PathBuf>,
    },
    /// Score predictions against ground-truth masks.
    Evaluate {
        /// Prediction directory or predictions manifest.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth manifest with masks.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label used in reports.
        #[arg(long)]
        name: Option<String>,
    },
    /// Combine evaluation reports into one comparison table.
    Report {
        #[arg(long = "eval", required = true, num_args = 1..)]
        evals: Vec<PathBuf>,
        /// Comma-separated row labels, one per evaluation.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(dir) = &cli.workdir {
        std::env::set_current_dir(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::ExtractBalls { board, out } => {
            let s = app::extract_balls_cmd(&cfg, &board, &out)?;
            println!("{} boards, {} balls ({} refined)", s.boards, s.balls, s.refined);
        }
        Command::Label { crops, masks, out } => {
            let n = app::label_cmd(&cfg, &crops, masks.as_deref(), &out)?;
            println!("{n} crops labelled");
        }
        Command::Synth {
            crops,
            out,
            split,
            resample_empty,
        } => {
            cfg.synth.resample_empty |= resample_empty;
            let n = app::synth_cmd(&cfg, &crops, &out, split.into())?;
            println!("{n} samples written");
        }
        Command::Train {
            stage,
            manifest,
            out,
            encoder,
        } => {
            let stage = match stage {
                StageArg::Classifier => Stage::Classifier,
                StageArg::Unet => Stage::Unet,
            };
            let o = app::train_cmd(&cfg, stage, &manifest, &out, encoder.as_deref())?;
            let last = o.history.last().map_or(f64::NAN, |r| r.train_loss);
            println!(
                "{} epochs, best epoch {}, final train loss {last:.5}",
                o.history.len(),
                o.best_epoch
            );
        }
        Command::Infer {
            ckpt,
            crops,
            out,
            split,
            board,
        } => {
            let n = app::infer_cmd(&cfg, &ckpt, &crops, &out, split.map(Into::into), board.as_deref())?;
            println!("{n} crops processed");
        }
        Command::Evaluate { pred, gt, out, name } => {
            let r = app::evaluate_cmd(&cfg, &pred, &gt, &out, name.as_deref())?;
            println!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                r.region.precision, r.region.recall, r.region.f1
            );
        }
        Command::Report { evals, labels, out } => {
            print!("{}", app::report_cmd(&evals, labels.as_deref(), Path::new(&out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0 | 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

//! Command-line surface. Configuration comes from `--config` (or defaults),
//! then `--set key=value` overrides, then command flags; later sources win.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, StageSel};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "crowdtrack", version, about = "Crowd counting, head localization and tracking on frame sequences")]
pub struct Cli {
    /// key=value run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic training and test scenes.
    Synth {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// People per scene (scene.people).
        #[arg(long)]
        people: Option<usize>,
        /// Scene seed (scene.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the network and write a checkpoint plus a per-step loss log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Stage-one checkpoint to continue from (stage 2 only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Loss log CSV; defaults to `<ckpt>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Ablation variant (model.variant).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Write counts, detections, offsets and density maps for each scene.
    Infer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Link detections into tracks with the min-cost-flow tracker.
    Track {
        /// Prediction directory written by `infer`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ignore predicted offsets and link raw positions.
        #[arg(long)]
        no_offsets: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Ground-truth data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction directory with counts.csv and detections.csv.
        #[arg(long)]
        pred: PathBuf,
        /// Directory with tracks.csv when separate from --pred.
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// key=value report file; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a density map (PGM) or tracks (PPM).
    Render {
        #[arg(long, conflicts_with = "tracks", required_unless_present = "tracks")]
        density: Option<PathBuf>,
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        height: usize,
        /// Grayscale frame drawn under the tracks.
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train shared stage one, then each configured variant, and report.
    Experiment {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Usage(format!("missing --{name} (or paths.{name} in the config)")))
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Synth { out_dir, people, seed } => {
            let mut flags = Vec::new();
            if let Some(p) = people {
                flags.push(format!("scene.people={p}"));
            }
            if let Some(s) = seed {
                flags.push(format!("scene.seed={s}"));
            }
            cfg.apply_overrides(&flags)?;
            cfg.validate()?;
            let out = required(out_dir, &paths.out, "out")?;
            commands::synth(&cfg, &out)
        }
        Command::Train { data, stage, init, ckpt, log, variant } => {
            if let Some(v) = variant {
                cfg.apply_overrides(&[format!("model.variant={v}")])?;
            }
            cfg.validate()?;
            let data = required(data, &paths.data, "data")?;
            let ckpt = required(ckpt, &paths.ckpt, "ckpt")?;
            let log = log.unwrap_or_else(|| {
                let mut s = ckpt.as_os_str().to_owned();
                s.push(".loss.csv");
                PathBuf::from(s)
            });
            let sel = match stage {
                StageArg::One => StageSel::One,
                StageArg::Two => StageSel::Two,
                StageArg::Both => StageSel::Both,
            };
            commands::train(&cfg, &data, sel, init.as_deref(), &ckpt, &log).map(|_| ())
        }
        Command::Infer { ckpt, data, out } => {
            cfg.validate()?;
            let ckpt = required(ckpt, &paths.ckpt, "ckpt")?;
            let data = required(data, &paths.data, "data")?;
            let out = required(out, &paths.out, "out")?;
            commands::infer_cmd(&cfg, &ckpt, &data, &out)
        }
        Command::Track { data, out, no_offsets } => {
            cfg.validate()?;
            let data = required(data, &paths.data, "data")?;
            let out = required(out, &paths.out, "out")?;
            let offsets = !no_offsets && cfg.experiment.model.ablation.association_active();
            commands::track_cmd(&cfg, &data, &out, offsets)
        }
        Command::Eval { data, pred, tracks, out } => {
            let data = required(data, &paths.data, "data")?;
            let report = commands::eval(&data, &pred, tracks.as_deref())?;
            print!("{}", report.to_table());
            match out {
                Some(p) => std::fs::write(&p, report.to_key_values()).map_err(|e| Error::io(&p, e)),
                None => Ok(()),
            }
        }
        Command::Render {
            density,
            tracks,
            width,
            height,
            background,
            out,
        } => match (density, tracks) {
            (Some(d), _) => commands::render_density(&d, &out),
            (None, Some(t)) => commands::render_tracks(&t, width, height, background.as_deref(), &out),
            (None, None) => Err(Error::Usage("render needs --density or --tracks".into())),
        },
        Command::Experiment { out } => {
            cfg.validate()?;
            let out = required(out, &paths.out, "out")?;
            let outcome = commands::experiment(&cfg, &out, &mut |line| eprintln!("{line}"))?;
            for v in &outcome.variants {
                println!("variant {}", v.ablation.name().unwrap_or("custom"));
                print!("{}", v.report.to_table());
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and maps failures to a single
/// `error[kind]: ...` line on stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_owned();
            eprintln!("{}", Error::Usage(first).report_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}

//! Command-line front end: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod images;
pub mod train;
pub mod verify;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fdn_core::data::{save_image, synth, SigmaPolicy};
use fdn_core::{FdnError, Rng};

use crate::config::Config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fdn", version, about = "Flow-based image denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise an image file or every image in a directory.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of clean images with matching names; prints PSNR.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Add synthetic noise to clean images, denoise and report PSNR/SSIM.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        /// Noise level on the 0-255 scale.
        #[arg(
            long,
            conflicts_with = "sigma_range",
            required_unless_present = "sigma_range"
        )]
        sigma: Option<f64>,
        /// `lo,hi`: a level drawn uniformly per image.
        #[arg(long)]
        sigma_range: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate noisy variants of a clean image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Noise mixing weight in [0, 1]; drawn per sample when omitted.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Run the numerical self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write procedurally generated textured-blob images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Maps a library error to an exit status.
pub fn exit_code(e: &FdnError) -> i32 {
    match e {
        FdnError::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn parse_sigma(sigma: Option<f64>, range: Option<&str>) -> Result<SigmaPolicy, FdnError> {
    let policy = match (sigma, range) {
        (Some(s), None) => SigmaPolicy::Fixed(s),
        (None, Some(r)) => {
            let (lo, hi) = config::parse_range(r)
                .ok_or_else(|| FdnError::Config(format!("bad --sigma-range {r:?}")))?;
            SigmaPolicy::Blind(lo, hi)
        }
        _ => {
            return Err(FdnError::Config(
                "give exactly one of --sigma and --sigma-range".into(),
            ))
        }
    };
    let ok = match policy {
        SigmaPolicy::Fixed(s) => s >= 0.0,
        SigmaPolicy::Blind(lo, hi) => 0.0 <= lo && lo <= hi,
    };
    if !ok {
        return Err(FdnError::Config(format!("invalid noise level {policy:?}")));
    }
    Ok(policy)
}

/// Executes a parsed command; returns the exit status.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result: Result<i32, FdnError> = (|| match cli.command {
        Command::Train { config, resume } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| FdnError::Config(format!("cannot read {}: {e}", config.display())))?;
            let config = Config::parse(&text)?;
            train::run(config, resume.as_deref(), out)?;
            Ok(EXIT_OK)
        }
        Command::Denoise {
            ckpt,
            input,
            out: dir,
            gt,
        } => {
            let s = commands::denoise_cmd(&ckpt, &input, &dir, gt.as_deref(), out, err)?;
            Ok(if s.written.is_empty() {
                EXIT_RUNTIME
            } else {
                EXIT_OK
            })
        }
        Command::Eval {
            ckpt,
            clean,
            sigma,
            sigma_range,
            seed,
        } => {
            let policy = parse_sigma(sigma, sigma_range.as_deref())?;
            commands::eval_cmd(&ckpt, &clean, policy, seed, out)?;
            Ok(EXIT_OK)
        }
        Command::Sample {
            ckpt,
            input,
            count,
            alpha,
            seed,
            out: dir,
        } => {
            if let Some(a) = alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(FdnError::Config(format!(
                        "--alpha must be in [0, 1], got {a}"
                    )));
                }
            }
            commands::sample_cmd(&ckpt, &input, count, alpha, seed, &dir, out)?;
            Ok(EXIT_OK)
        }
        Command::Check {
            seed,
            corrupt_gradient,
        } => {
            let opts = verify::CheckOptions {
                corrupt_gradient,
                ..verify::CheckOptions::new(seed)
            };
            let results = verify::run_checks(&opts, out)?;
            Ok(if verify::all_passed(&results).is_ok() {
                EXIT_OK
            } else {
                EXIT_RUNTIME
            })
        }
        Command::Synth {
            out: dir,
            count,
            size,
            channels,
            seed,
        } => {
            if channels != 1 && channels != 3 {
                return Err(FdnError::Config("--channels must be 1 or 3".into()));
            }
            std::fs::create_dir_all(&dir)?;
            let mut rng = Rng::new(seed);
            let ext = if channels == 1 { "pgm" } else { "ppm" };
            for i in 0..count {
                let im = synth::textured_blob(size, channels, &mut rng);
                save_image(dir.join(format!("blob_{i:05}.{ext}")), &im)?;
            }
            writeln!(out, "wrote {count} images to {}", dir.display())?;
            Ok(EXIT_OK)
        }
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

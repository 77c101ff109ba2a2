//! `revmark` command line front end. Failures print `<ErrorName>: <detail>` on
//! stderr and exit with status 1; usage errors exit with status 2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use revmark::error::{Error, Result};
use revmark::experiments::{
    ablate_penalty, ablate_z_reg, penalty_config, penalty_grid, toy_config, traces_of, PENALTY_GRID,
};
use revmark::harness::bitstr::{bits_to_bytes, bits_to_hex, bytes_to_bits, parse_hex_bits};
use revmark::harness::imageio::{list_images, read_image, write_image};
use revmark::harness::sweep::{parse_grid, run_sweep, SweepImage};
use revmark::harness::write_csv;
use revmark::iflow::{load_checkpoint, save_checkpoint, IIWNParams};
use revmark::pipeline::{embed, extract, recover};
use revmark::training::{synthetic_scenes, write_metrics_csv, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "revmark", version, about = "Robust reversible image watermarking")]
struct Cli {
    /// Seed for training, watermark generation and random distortions.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Cover directory; synthetic covers are generated when absent.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "model.iiwn")]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Watermark a cover.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Hex digits, or a path to a file holding the raw bits.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read the watermark from a possibly distorted stego; prints hex.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Restore the exact cover and watermark from an unmodified stego.
    Recover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_cover: PathBuf,
        #[arg(long)]
        out_bits: PathBuf,
    },
    /// Robustness sweep over a directory; timings go to `<csv>.timing.csv`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "identity,jpeg:50,blur:1.5:7,dropout:0.3")]
        noise: String,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train paired runs that differ in one loss weight.
    Ablate {
        #[arg(value_enum)]
        kind: Ablation,
        /// Base config. When absent: the toy config, on rail-touching covers
        /// for the penalty and trace ablations.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Penalty,
    ZReg,
    TraceLambdaW,
}

fn load_model(path: &Path) -> Result<IIWNParams> {
    load_checkpoint(BufReader::new(File::open(path)?))
}

fn read_bits(arg: &str, m: usize) -> Result<Vec<bool>> {
    let path = Path::new(arg);
    if path.is_file() {
        bytes_to_bits(&std::fs::read(path)?, m)
    } else {
        parse_hex_bits(arg, m)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_toml(&std::fs::read_to_string(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            images,
            out,
            metrics,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let covers = match images {
                Some(dir) => list_images(&dir)?
                    .iter()
                    .map(|p| read_image(p))
                    .collect::<Result<Vec<_>>>()?,
                None => synthetic_scenes(
                    cfg.train_images,
                    cfg.image_side,
                    cfg.channels,
                    cfg.cover_swing,
                    cfg.seed,
                ),
            };
            let mut trainer = Trainer::new(cfg)?;
            let rows = trainer.run(&covers, |m| {
                eprintln!(
                    "epoch {:4} loss {:.4e} acc {:.4} psnr {:.2} lambda_w {:.4e}",
                    m.epoch, m.total, m.acc, m.psnr, m.lambda_w
                )
            })?;
            if let Some(path) = metrics {
                write_metrics_csv(&rows, create(&path)?)?;
            }
            let mut w = create(&out)?;
            save_checkpoint(&trainer.params, &mut w)?;
            w.flush()?;
        }
        Command::Embed {
            model,
            input,
            bits,
            out,
        } => {
            let theta = load_model(&model)?;
            let bits = read_bits(&bits, theta.geometry.bits())?;
            let art = embed(&read_image(&input)?, &bits, &theta)?;
            write_image(&out, &art.stego)?;
            println!(
                "aux_bits={} z_bits={} o_bits={} overflow_count={} z_min={} z_max={} rdh_threshold={}",
                art.aux_bits, art.z_bits, art.o_bits, art.overflow_count, art.z_min, art.z_max, art.rdh_threshold
            );
        }
        Command::Extract { model, input } => {
            let theta = load_model(&model)?;
            let (bits, _) = extract(&read_image(&input)?, &theta)?;
            println!("{}", bits_to_hex(&bits));
        }
        Command::Recover {
            model,
            input,
            out_cover,
            out_bits,
        } => {
            let theta = load_model(&model)?;
            let (cover, bits) = recover(&read_image(&input)?, &theta)?;
            write_image(&out_cover, &cover)?;
            std::fs::write(&out_bits, bits_to_bytes(&bits))?;
            println!("{}", bits_to_hex(&bits));
        }
        Command::Eval { model, dir, noise, csv } => {
            let theta = load_model(&model)?;
            let grid = parse_grid(&noise)?;
            let images = list_images(&dir)?
                .iter()
                .map(|p| {
                    Ok(SweepImage {
                        id: file_name(p),
                        image: read_image(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if images.is_empty() {
                return Err(Error::BadParams(format!("no images in {}", dir.display())));
            }
            let (rows, timings) = run_sweep(&theta, &images, &grid, cli.seed.unwrap_or(0));
            write_csv(&rows, create(&csv)?)?;
            write_csv(&timings, create(&csv.with_extension("timing.csv"))?)?;
        }
        Command::Ablate {
            kind,
            config,
            seeds,
            csv,
        } => {
            let base = match (config, kind) {
                (Some(path), _) => load_config(&path, None)?,
                (None, Ablation::ZReg) => toy_config(),
                (None, _) => penalty_config(),
            };
            let out = create(&csv)?;
            match kind {
                Ablation::Penalty => write_csv(&ablate_penalty(&base, &seeds, &PENALTY_GRID)?, out)?,
                Ablation::ZReg => write_csv(&ablate_z_reg(&base, &seeds)?, out)?,
                Ablation::TraceLambdaW => {
                    let runs = penalty_grid(&base, &seeds, &PENALTY_GRID)?;
                    write_csv(&traces_of(&base, &runs)?, out)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}

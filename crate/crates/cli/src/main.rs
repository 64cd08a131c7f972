use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use unblur::checkpoint::Checkpoint;
use unblur::config::Ablation;
use unblur::data::io::{load_descriptor, load_pairs, load_png, save_descriptor, save_png, write_atomic, write_pairs};
use unblur::data::{split_unpaired, synthetic_pairs, ScenePair, UnpairedSplit};
use unblur::eval::{eval_dataset, eval_pairs};
use unblur::train::{prepare_data, train_stage1, train_stage2, InferenceModel};
use unblur::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "unblur", version, about = "Unpaired deblurring with diffusion-generated texture priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (flat `key = value`); desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a procedural blurry/sharp corpus and its manifest.
    MakeSynthetic(Common),
    /// Splits a paired manifest into scene-disjoint blurry and sharp subsets.
    SplitData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Paired manifest; the synthetic corpus from the config otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Saved split descriptor to reproduce.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Continues from a stage-one checkpoint (`--checkpoint`).
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Restores one PNG.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Scores a paired test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Trains and evaluates configurations with one component removed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Component to remove, or `all`.
        #[arg(long, default_value = "all")]
        name: String,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn require_checkpoint(c: &Common) -> Result<Checkpoint> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    Checkpoint::load(path)
}

/// Training split from a manifest (optionally pinned to a descriptor) or
/// from the synthetic corpus.
fn training_split(cfg: &Config, seed: u64, manifest: Option<&Path>, split: Option<&Path>) -> Result<UnpairedSplit> {
    let Some(manifest) = manifest else {
        return Ok(prepare_data(cfg, seed)?.0);
    };
    let pairs = load_pairs(manifest)?;
    match split {
        Some(path) => {
            let desc = load_descriptor(path)?;
            let s = split_unpaired(&pairs, desc.ratio, desc.seed)?;
            if s.descriptor() != desc {
                return Err(Error::Data(format!("{} does not describe a split of this manifest", path.display())));
            }
            Ok(s)
        }
        None => split_unpaired(&pairs, (cfg.data.ratio, 1.0 - cfg.data.ratio), seed),
    }
}

fn ablation_run(cfg: &Config, seed: u64, out: &Path, holdout: &[ScenePair], split: &UnpairedSplit) -> Result<(f64, f64, f64)> {
    let s1 = train_stage1(cfg, split, seed, Some(out))?;
    let ck = if cfg.ablation.diffusion {
        train_stage2(cfg, split, &s1.checkpoint()?, seed, Some(out))?.checkpoint()?
    } else {
        s1.checkpoint()?
    };
    let report = eval_pairs(holdout, &InferenceModel::from_checkpoint(&ck)?, seed)?;
    report.write(out)?;
    Ok((report.mean_psnr, report.mean_ssim, report.median_psnr_gain()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic(c) => {
            let cfg = load_config(&c)?;
            let pairs = synthetic_pairs(cfg.data.count, cfg.data.size, &cfg.data.blur_spec(), c.seed)?;
            let manifest = write_pairs(&c.out, &pairs)?;
            println!("{}", manifest.display());
        }
        Command::SplitData { common: c, manifest } => {
            let cfg = load_config(&c)?;
            let pairs = load_pairs(&manifest)?;
            let split = split_unpaired(&pairs, (cfg.data.ratio, 1.0 - cfg.data.ratio), c.seed)?;
            let desc = split.descriptor();
            save_descriptor(&c.out.join("split.json"), &desc)?;
            println!("{} blurry, {} sharp", desc.blurry_count, desc.sharp_count);
        }
        Command::TrainStage1 { common: c, manifest, split } => {
            let cfg = load_config(&c)?;
            let split = training_split(&cfg, c.seed, manifest.as_deref(), split.as_deref())?;
            let st = train_stage1(&cfg, &split, c.seed, Some(&c.out))?;
            info!("stage one finished at step {}", st.step);
        }
        Command::TrainStage2 { common: c, manifest, split } => {
            let ck = require_checkpoint(&c)?;
            let mut cfg = match &c.config {
                Some(p) => Config::load(p)?,
                None => Config::parse(&ck.meta.config)?,
            };
            cfg.apply_overrides(&c.overrides)?;
            let split = training_split(&cfg, c.seed, manifest.as_deref(), split.as_deref())?;
            let st = train_stage2(&cfg, &split, &ck, c.seed, Some(&c.out))?;
            info!("stage two finished at step {}", st.step);
        }
        Command::Infer { common: c, input } => {
            let model = InferenceModel::from_checkpoint(&require_checkpoint(&c)?)?;
            let restored = model.restore_image(&load_png(&input)?, c.seed)?;
            let target = if c.out.extension().is_some_and(|e| e == "png") {
                c.out.clone()
            } else {
                c.out.join(input.file_name().unwrap_or_default())
            };
            save_png(&target, &restored)?;
            println!("{}", target.display());
        }
        Command::Eval { common: c, manifest } => {
            let model = InferenceModel::from_checkpoint(&require_checkpoint(&c)?)?;
            let report = eval_dataset(&manifest, &model, c.seed)?;
            report.write(&c.out)?;
            println!("PSNR {:.3} dB  SSIM {:.4}  ({} images)", report.mean_psnr, report.mean_ssim, report.images.len());
            if report.skipped_fraction() > 0.1 {
                return Err(Error::Data(format!("{} of the images could not be read", report.skipped.len())));
            }
        }
        Command::Ablate { common: c, name } => {
            let base = load_config(&c)?;
            let names: Vec<&str> = if name == "all" {
                std::iter::once("full").chain(Ablation::NAMES).collect()
            } else {
                vec![name.as_str()]
            };
            let (split, holdout) = prepare_data(&base, c.seed)?;
            let mut csv = String::from("ablation,psnr,ssim,median_gain\n");
            for n in names {
                let mut cfg = base.clone();
                cfg.ablation = if n == "full" { Ablation::default() } else { Ablation::without(n)? };
                let (p, s, g) = ablation_run(&cfg, c.seed, &c.out.join(n), &holdout, &split)?;
                println!("{n}: PSNR {p:.3} SSIM {s:.4} gain {g:.3}");
                csv.push_str(&format!("{n},{p},{s},{g}\n"));
            }
            write_atomic(&c.out.join("ablation.csv"), csv.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use actnet::engine::commands::{eval_run, export_masks, gen_data, gradcheck_run, train_run};
use actnet::engine::config::RunConfig;
use actnet::{Error, OpKind, Result};

#[derive(Parser)]
#[command(name = "actnet", version, about = "Multi-task RGB-D gesture recognition on synthetic clips")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Attach the multi-scale decoder during training.
    #[arg(long, global = true)]
    msd: Option<Toggle>,
    #[arg(long, global = true)]
    lambda_local: Option<f64>,
    #[arg(long, global = true)]
    lambda_global: Option<f64>,
    /// Binarize depth targets: values strictly above the threshold become foreground.
    #[arg(long, global = true)]
    binarize_threshold: Option<u8>,
    #[arg(long, global = true)]
    sampler: Option<Sampler>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Any configuration key, e.g. `--set train.epochs=5`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Uniform,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and validation clip sets.
    GenData {
        /// Overwrite an existing data set.
        #[arg(long)]
        force: bool,
    },
    /// Train and write logs plus final and best checkpoints.
    Train,
    /// Evaluate a checkpoint on the validation clips.
    Eval,
    /// Finite-difference check of every differentiable op and a small model.
    Gradcheck {
        /// Corrupt the backward pass of one op family.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write RGB, depth target and both predicted masks for one clip.
    ExportMasks {
        /// Index of the validation clip.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Output directory; defaults to `<out_dir>/masks`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(s) = cli.seed {
        set("seed", s.to_string())?;
    }
    if let Some(m) = cli.msd {
        set("model.msd", matches!(m, Toggle::On).to_string())?;
    }
    if let Some(l) = cli.lambda_local {
        set("loss.local", l.to_string())?;
    }
    if let Some(l) = cli.lambda_global {
        set("loss.global", l.to_string())?;
    }
    if let Some(t) = cli.binarize_threshold {
        set("depth.binarize_threshold", t.to_string())?;
    }
    if let Some(s) = cli.sampler {
        set("sampler.mode", if matches!(s, Sampler::Dense) { "dense" } else { "uniform" }.to_string())?;
    }
    if let Some(d) = &cli.data_dir {
        set("data.dir", d.display().to_string())?;
    }
    if let Some(d) = &cli.out_dir {
        set("out.dir", d.display().to_string())?;
    }
    if let Some(c) = &cli.checkpoint {
        set("checkpoint", c.display().to_string())?;
    }
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData { force } => {
            let (train, val) = gen_data(&cfg, *force)?;
            println!("wrote {train} train and {val} validation clips to {}", cfg.data_dir.display());
        }
        Command::Train => {
            let (outcome, files) = train_run(&cfg)?;
            if let Some(last) = outcome.epochs.last() {
                println!("final epoch {}: loss {:.4}, train acc {:.4}", last.epoch, last.total, last.train_acc);
            }
            if let Some((epoch, acc, _)) = &outcome.best {
                println!("best validation accuracy {acc:.4} at epoch {epoch}");
            }
            println!("checkpoints: {} {}", files.final_ckpt.display(), files.best_ckpt.display());
        }
        Command::Eval => print!("{}", eval_run(&cfg)?.to_text()),
        Command::Gradcheck { fault } => {
            let fault = match fault {
                Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::config(format!("unknown op family {name:?}")))?),
                None => None,
            };
            let reports = gradcheck_run(fault)?;
            for r in &reports {
                println!("{r}");
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
            println!("all {} checks passed", reports.len());
        }
        Command::ExportMasks { clip, out } => {
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.join("masks"));
            let files = export_masks(&cfg, *clip, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use bmn::config::{PathsConfig, RunConfig};
use bmn::gradcheck::{Corruption, GradcheckProfile};
use bmn::{pipeline, BmnError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmn", version, about = "Boundary-matching temporal action proposals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; profile defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory (the dataset root for gen-synthetic).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, BmnError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.output = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/validation dataset.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Number of training videos; the validation split gets a quarter as many.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Train on the training split and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode proposals for the validation split into a CSV file.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configured checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute AR@AN and AUC for a proposal CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the proposals written by `infer`.
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Defaults to the validation annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `scaled` (T=16, D=8) or `tiny`.
        #[arg(long, default_value = "scaled")]
        profile: GradcheckProfile,
        /// Consecutive seeds to check, starting at the configured seed.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Bias the analytic gradient of one suite (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool, BmnError> {
    match cli.command {
        Command::GenSynthetic { common, videos } => {
            let mut cfg = common.load()?;
            if let Some(out) = &common.out {
                let output = cfg.paths.output.clone();
                cfg.paths = PathsConfig {
                    output,
                    ..PathsConfig::under(out, out)
                };
            }
            if let Some(n) = videos {
                cfg.synthetic.train_videos = n;
                cfg.synthetic.val_videos = n / 4;
            }
            let s = pipeline::gen_synthetic(&cfg)?;
            println!(
                "train: {} videos, {} instances -> {}",
                s.train_videos,
                s.train_instances,
                cfg.paths.train.features.display()
            );
            println!(
                "val: {} videos, {} instances -> {}",
                s.val_videos,
                s.val_instances,
                cfg.paths.val.features.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let out = pipeline::train_model(&cfg, resume.as_deref())?;
            for e in &out.report.epochs {
                println!(
                    "epoch {:>3}  tem {:.5}  pem {:.5}  total {:.5}",
                    e.epoch, e.tem, e.pem, e.total
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Infer { common, checkpoint } => {
            let cfg = common.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
            let rows = pipeline::infer(&cfg, &ckpt)?;
            println!("{} proposals -> {}", rows.len(), cfg.paths.proposals().display());
        }
        Command::Eval {
            common,
            proposals,
            annotations,
        } => {
            let cfg = common.load()?;
            let proposals = proposals.unwrap_or_else(|| cfg.paths.proposals());
            let annotations = annotations.unwrap_or_else(|| cfg.paths.val.annotations.clone());
            let m = pipeline::evaluate(&cfg, &proposals, &annotations)?;
            for an in ["1", "10", "100"] {
                println!("AR@{an:<4} {:.4}", m.ar_at[an]);
            }
            println!("AUC     {:.2}", m.auc);
        }
        Command::Gradcheck {
            common,
            profile,
            repeats,
            corrupt,
        } => {
            let cfg = common.load()?;
            let corrupt = corrupt.map_or_else(Corruption::none, |name| Corruption::of(&name));
            let runs = pipeline::gradcheck(profile, cfg.seed, repeats, &corrupt)?;
            let mut failed = 0;
            let mut total = 0;
            for (seed, results) in &runs {
                for r in results {
                    println!("seed {seed:<4} {r}");
                    total += 1;
                    failed += usize::from(!r.passed);
                }
            }
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| BmnError::Config(format!("{}: {e}", out.display())))?;
                let path = out.join("gradcheck.json");
                let json = serde_json::to_string_pretty(&runs).expect("results serialize");
                std::fs::write(&path, json).map_err(|e| BmnError::Io { path, source: e })?;
            }
            println!("{} of {total} checks passed", total - failed);
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

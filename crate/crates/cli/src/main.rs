use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use afcn_cli::commands::{
    cmd_attend, cmd_eval, cmd_extract, cmd_gradcheck, cmd_synth, cmd_train, FoldSelection, Split,
};
use afcn_cli::config::RunConfig;
use afcn_core::data::SynthConfig;
use afcn_core::gradcheck::SUITE_TOLERANCE;
use afcn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "afcn", version, about = "Attention FCN speech emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        min_seconds: f64,
        #[arg(long, default_value_t = 3.0)]
        max_seconds: f64,
    },
    /// Compute spectrogram caches for every manifest entry.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `manifest` from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `cache_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one fold or all of them.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// May contain `{fold}`.
        #[arg(long)]
        checkpoint: String,
        #[arg(long, default_value = "0")]
        fold: FoldSelection,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention weights of one utterance as CSV and PGM heatmaps.
    Attend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            per_class,
            min_seconds,
            max_seconds,
        } => {
            let cfg = SynthConfig {
                per_class,
                min_seconds,
                max_seconds,
                ..SynthConfig::default()
            };
            cmd_synth(&cfg, seed, &out)?;
            Ok(true)
        }
        Command::Extract { config, manifest, out } => {
            let cfg = load_config(&config, None)?;
            let manifest = manifest
                .or_else(|| cfg.manifest.clone())
                .ok_or_else(|| Error::Config("no manifest given".into()))?;
            let out = out
                .or_else(|| cfg.cache_dir.clone())
                .ok_or_else(|| Error::Config("no output directory given".into()))?;
            let summary = cmd_extract(&cfg, &manifest, &out)?;
            for (id, e) in &summary.failures {
                eprintln!("failed: {id}: {e}");
            }
            println!(
                "{} written, {} up to date, {} failed",
                summary.written,
                summary.skipped,
                summary.failures.len()
            );
            Ok(summary.failures.is_empty())
        }
        Command::Train { config, fold, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let s = cmd_train(&cfg, fold, &out)?;
            println!(
                "{} epochs, best epoch {}, checkpoint {}",
                s.epochs,
                s.best_epoch,
                s.checkpoint.display()
            );
            Ok(true)
        }
        Command::Eval {
            config,
            checkpoint,
            fold,
            split,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            for r in cmd_eval(&cfg, &checkpoint, fold, split, &out)? {
                println!("fold {}: wa {:.4} ua {:.4}", r.fold, r.wa, r.ua);
            }
            Ok(true)
        }
        Command::Attend {
            config,
            checkpoint,
            wav,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let o = cmd_attend(&cfg, &checkpoint, &wav, &out)?;
            println!(
                "{}\n{}\n{}",
                o.alpha_csv.display(),
                o.attention_pgm.display(),
                o.spectrogram_pgm.display()
            );
            Ok(true)
        }
        Command::Gradcheck {
            seed,
            corrupt_backward,
        } => {
            let reports = cmd_gradcheck(seed, corrupt_backward)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.passed(SUITE_TOLERANCE);
                ok &= pass;
                println!("{} {r}", if pass { "PASS" } else { "FAIL" });
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("AFCN_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("AFCN_THREADS: {e}");
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}

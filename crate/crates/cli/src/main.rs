mod commands;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "elf", version, about = "Two-stage image deraining: data, training, inference and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic rainy/clean PNG pairs and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Background generator: ramp, checker, blobs or mixed.
        #[arg(long, default_value = "mixed")]
        kind: String,
        /// Run config whose `[rain]` section sets the base rain model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rain overrides, e.g. `streaks=3000,angle=70:110,length=8:20`.
        #[arg(long)]
        rain: Option<String>,
    },
    /// Train a model; writes checkpoints, loss curve and resolved config to `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint and optimizer state in `--out`.
        #[arg(long)]
        resume: bool,
        /// Config override `section.key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Derain one image or every PNG in a directory.
    Derain {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to `config.toml` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write sub-sampled predictions and fused feature maps.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Per-image PSNR/SSIM of a checkpoint on a dataset, as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in 64-bit.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Parameter count and per-module breakdown.
    Params {
        #[arg(long, default_value = "ELF")]
        variant: String,
        /// Name components to group by.
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Luma-histogram correlation between images and their down-up versions.
    Histcheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        factor: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, count, size, seed, kind, config, rain } => {
            commands::synth(&out, count, size, seed, &kind, config.as_deref(), rain.as_deref())
        }
        Command::Train { config, data, out, resume, overrides } => {
            commands::train(config.as_deref(), &data, &out, resume, &overrides)
        }
        Command::Derain { ckpt, config, input, out, dump_intermediates } => {
            commands::derain(&ckpt, config.as_deref(), &input, &out, dump_intermediates)
        }
        Command::Eval { ckpt, config, data, out } => commands::eval(&ckpt, config.as_deref(), &data, out.as_deref()),
        Command::Gradcheck { scope, tolerance, per_tensor, seed } => {
            commands::gradcheck(&scope, tolerance, per_tensor, seed)
        }
        Command::Params { variant, depth } => commands::params(&variant, depth),
        Command::Histcheck { data, factor } => commands::histcheck(&data, factor),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

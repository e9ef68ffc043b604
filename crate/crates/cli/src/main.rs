mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msnet_core::cssl::DecMode;
use msnet_core::Error;

use crate::config::{RunConfig, SEED_ENV};

/// Size-aware SAR aircraft classification: synthetic data, size extraction,
/// contrastive pretraining and linear evaluation.
///
/// Settings resolve as flags > config file > built-in defaults. The seed falls back to
/// MSNET_SEED when neither a flag nor the file sets it. Exit codes: 0 success, 1 data or
/// I/O error, 2 configuration or usage error, 3 numeric abort.
#[derive(Parser, Debug)]
#[command(name = "msnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file of `key = value` settings; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default to the full-length schedule (300 pretrain, 200 probe epochs) instead of the
    /// desk defaults (30 and 50).
    #[arg(long, global = true)]
    full_scale: bool,
    /// Run seed [default: MSNET_SEED, else 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mini-batch size [default: 32].
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Base learning rate [default: 0.01].
    #[arg(long, global = true)]
    base_lr: Option<f64>,
    /// Key-encoder momentum coefficient m [default: 0.999].
    #[arg(long, global = true)]
    momentum: Option<f64>,
    /// InfoNCE temperature [default: 0.07].
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Negative queue length K [default: 1024].
    #[arg(long, global = true)]
    queue_size: Option<usize>,
    /// Consistency term: pairwise, class-sets or off [default: pairwise].
    #[arg(long, global = true, value_parser = parse_dec_mode)]
    dec_mode: Option<DecMode>,
    /// Encoder input side in pixels [default: 64 (desk)].
    #[arg(long, global = true)]
    input_size: Option<usize>,
    /// Replace SAEM bottlenecks with plain 3x3 convolutions.
    #[arg(long, global = true)]
    no_saem: bool,
    /// Disable the size-information branch.
    #[arg(long, global = true)]
    no_sieb: bool,
}

fn parse_dec_mode(s: &str) -> Result<DecMode, String> {
    match s {
        "pairwise" => Ok(DecMode::Pairwise),
        "class-sets" | "class_sets" => Ok(DecMode::ClassSets),
        "off" => Ok(DecMode::Off),
        _ => Err(format!("unknown mode {s:?} (pairwise, class-sets, off)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a long-tailed training set and a balanced test set of synthetic slices.
    Synth(commands::SynthArgs),
    /// Estimate fuselage length and wingspan from scattering points.
    ExtractSize(commands::ExtractArgs),
    /// Contrastive pretraining of the encoder.
    Pretrain(commands::PretrainArgs),
    /// Linear probes on frozen embeddings at several label fractions.
    Probe(commands::ProbeArgs),
    /// Evaluate a trained probe on a manifest.
    Eval(commands::EvalArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck,
    /// Write |alpha|, |beta| and log|alpha/beta| of every SAEM block.
    ReportRatios(commands::RatiosArgs),
}

impl Common {
    fn resolve(&self, fallback_file: Option<PathBuf>) -> msnet_core::Result<RunConfig> {
        let file = self.config.clone().or(fallback_file);
        let mut c = RunConfig::layered(self.full_scale, file.as_deref(), std::env::var(SEED_ENV).ok())?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            c.base_lr = v;
        }
        if let Some(v) = self.momentum {
            c.momentum = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.queue_size {
            c.queue_size = v;
        }
        if let Some(v) = self.dec_mode {
            c.dec_mode = v;
        }
        if let Some(v) = self.input_size {
            c.input_size = v;
        }
        if self.no_saem {
            c.use_saem = false;
        }
        if self.no_sieb {
            c.use_sieb = false;
        }
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Io { .. } | Error::DegenerateSize(_) | Error::State(_) => 1,
        Error::Config(_) | Error::Argument(_) | Error::Dimension { .. } => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cli.common.resolve(None).and_then(|c| commands::synth(a, &c)),
        Command::ExtractSize(a) => commands::extract_size(a),
        Command::Pretrain(a) => cli.common.resolve(None).and_then(|c| commands::pretrain(a, c)),
        Command::Probe(a) => cli.common.resolve(commands::sidecar_config(&a.checkpoint)).and_then(|c| commands::probe(a, c)),
        Command::Eval(a) => cli.common.resolve(commands::sidecar_config(&a.checkpoint)).and_then(|c| commands::eval(a, &c)),
        Command::Gradcheck => cli.common.resolve(None).and_then(|c| commands::gradcheck(&c)),
        Command::ReportRatios(a) => cli.common.resolve(commands::sidecar_config(&a.checkpoint)).and_then(|c| commands::report_ratios(a, &c)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

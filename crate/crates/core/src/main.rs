use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mast::frontend::{MelConfig, SynthSpec};
use mast::harness::{
    featurize, render_shapes, run_eval, run_pretrain, run_probe, run_train, write_synthetic, RunConfig,
};
use mast::{Error, Result};

/// Multiscale audio spectrogram transformer: training, pretraining and probing on CPU.
///
/// Any config key can be overridden with a flag of the same dotted name,
/// for example `--ssl.tau 0.1` or `--optim.epochs=2`.
#[derive(Parser, Debug)]
#[command(name = "mast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-block and per-stage shapes of the configured model.
    Shapes {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic harmonic-stack task as feature files and manifests.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Test samples, drawn after the training ones.
        #[arg(long, default_value_t = 200)]
        test_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
    },
    /// Turn class-directory WAV files into log-mel feature files and a manifest.
    Featurize {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining; writes a student/teacher checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Supervised training of the whole network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Linear probe on a frozen encoder; omit the checkpoint for a random-init encoder.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of a trained classifier checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let Some(v) = it.next() else {
                    return Err(Error::Config(format!("--{flag} needs a value")));
                };
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| Error::Config(format!("--{k}: {e}")))?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MAST_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MAST_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    let no_overrides = |name: &str| -> Result<()> {
        match overrides.first() {
            Some((k, _)) => Err(Error::Config(format!("{name} takes no config override, got --{k}"))),
            None => Ok(()),
        }
    };
    match command {
        Command::Shapes { config } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            print!("{}", render_shapes(&cfg.model)?);
        }
        Command::GenSynth { out, n, test_n, seed, sigma } => {
            no_overrides("gen-synth")?;
            let spec = SynthSpec {
                seed,
                noise_sigma: sigma,
                ..SynthSpec::default()
            };
            let (train, test) = write_synthetic(&out, &spec, n, test_n)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Featurize { wav_dir, out } => {
            no_overrides("featurize")?;
            let manifest = featurize(&wav_dir, &out, &MelConfig::default())?;
            println!("wrote {}", manifest.display());
        }
        Command::Pretrain { config } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let out = run_pretrain(&cfg)?;
            let first = out.losses.first().copied().unwrap_or(f32::NAN);
            let last = out.losses.last().copied().unwrap_or(f32::NAN);
            println!("pretrained {} steps, loss {first:.4} -> {last:.4}", out.losses.len());
        }
        Command::Train { config } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let s = run_train(&cfg)?;
            print!("trained {} steps, final train loss {:.4}", s.steps, s.final_train_loss);
            match s.test {
                Some(e) => println!(", test loss {:.4}, test accuracy {:.4}", e.loss, e.accuracy),
                None => println!(),
            }
        }
        Command::Probe { config, checkpoint } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let acc = run_probe(&cfg, checkpoint.as_deref())?;
            println!("probe accuracy {acc:.4}");
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let e = run_eval(&cfg, &checkpoint)?;
            println!("loss {:.4}, accuracy {:.4}", e.loss, e.accuracy);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli.command, &overrides)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

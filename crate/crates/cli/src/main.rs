use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsdiff::checkpoint::Checkpoint;
use tsdiff::config::Config;
use tsdiff::data::{load_jsonl, save_jsonl};
use tsdiff::error::{Error, ErrorClass, Result};
use tsdiff::metrics::evaluate;
use tsdiff::oracles::{generate, OracleKind, OracleSpec};
use tsdiff::sampler::synthesize;
use tsdiff::training::{metrics_path, train};

#[derive(Parser, Debug)]
#[command(name = "tsdiff", version, about = "Generative modelling of irregular, incomplete event sequences")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Oracle {
    Homogeneous,
    Sinusoidal,
    Hawkes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a dataset from a ground-truth point process.
    Datagen {
        #[arg(long, value_enum)]
        oracle: Oracle,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "TSDIFF_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        /// Time correlation per feature; the list length sets the dimension.
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        rho: Vec<f64>,
        /// Per-cell probability of hiding a value.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, default_value_t = 2.0)]
        rate: f64,
        #[arg(long, default_value_t = 3.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.5)]
        amp: f64,
        #[arg(long, default_value_t = 10.0)]
        period: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// Fit a model; writes a checkpoint and a per-epoch metrics CSV next to it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "TSDIFF_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Config override, `key=value`; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Draw sequences from a trained model.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "TSDIFF_SEED", default_value_t = 0)]
        seed: u64,
        /// Also sample which values are observed.
        #[arg(long)]
        emit_missing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score data under a model and, with `--synth`, compare against samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        if !tsdiff::exec::set_threads(n) {
            log::warn!("thread pool already initialised; --threads ignored");
        }
    }
    match cli.command {
        Command::Datagen { oracle, n, seed, out, horizon, rho, missing, rate, mu, amp, period, alpha, beta } => {
            let kind = match oracle {
                Oracle::Homogeneous => OracleKind::Homogeneous { rate },
                Oracle::Sinusoidal => OracleKind::Sinusoidal { mu, amp, period },
                Oracle::Hawkes => OracleKind::Hawkes { mu, alpha, beta },
            };
            let spec = OracleSpec { kind, horizon, rho, missing_rate: missing };
            let ds = generate(&spec, n, seed)?;
            save_jsonl(&ds, &out)?;
            println!("wrote {} sequences ({} events) to {}", ds.len(), ds.event_count(), out.display());
        }
        Command::Train { config, data, out, seed, epochs, overrides } => {
            let mut cfg = match config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got `{o}`")))?;
                cfg.set(0, k.trim(), v.trim()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let ds = load_jsonl(&data)?;
            let trainer = train(&ds, &cfg, &out)?;
            println!(
                "trained {} epochs; checkpoint {}, metrics {}",
                trainer.epoch,
                out.display(),
                metrics_path(&out).display()
            );
        }
        Command::Synth { ckpt, n, seed, emit_missing, out } => {
            let model = Checkpoint::load(&ckpt)?.restore()?;
            let (ds, stats) = synthesize(&model, n, seed, emit_missing)?;
            save_jsonl(&ds, &out)?;
            println!(
                "wrote {} sequences ({} events) to {}; acceptance {:.3}, bound violations {}",
                ds.len(),
                ds.event_count(),
                out.display(),
                stats.acceptance_rate(),
                stats.violations
            );
        }
        Command::Eval { ckpt, data, synth, out } => {
            let model = Checkpoint::load(&ckpt)?.restore()?;
            let real = load_jsonl(&data)?;
            let fake = synth.map(load_jsonl).transpose()?;
            let report = evaluate(&model, &real, fake.as_ref())?;
            report.save_json(&out)?;
            report.write_prd_csv(BufWriter::new(File::create(sibling(&out, ".prd.csv"))?))?;
            report.write_duration_csv(BufWriter::new(File::create(sibling(&out, ".durations.csv"))?))?;
            println!("temporal {:.4}, feature {:.4}, tfc {:.4}", report.temporal, report.feature, report.tfc);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("error[usage]: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.class() {
                ErrorClass::Usage => ("usage", 1),
                ErrorClass::Data => ("data", 2),
                ErrorClass::Numerical => ("numerical", 3),
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}

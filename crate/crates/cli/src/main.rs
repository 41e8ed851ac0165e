//! `imupose`: synthesize a corpus, train, estimate offline or streamed,
//! evaluate and calibrate.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 bad input
//! data, 4 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use imupose::pipeline::{
    cmd_calibrate, cmd_estimate, cmd_evaluate, cmd_stream, cmd_synthesize, cmd_train, CalibrateArgs, PipelineConfig,
    PipelineError, StreamArgs,
};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "imupose", version, about = "Upper-body pose estimation from four IMUs")]
struct Cli {
    /// Pipeline config (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides whether estimates are refined with the physics module.
    #[arg(long, global = true, value_enum)]
    physics: Option<Switch>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic motion and IMU corpus to `paths.corpus`.
    Synthesize,
    /// Train on the corpus and write weights and the loss log.
    Train {
        /// Fine-tune these weights instead of starting from random ones.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Estimate poses for a whole IMU recording.
    Estimate {
        imu: PathBuf,
        /// Output motion file.
        out: PathBuf,
        /// Torque CSV; next to the output by default.
        #[arg(long)]
        torques: Option<PathBuf>,
    },
    /// Replay an IMU recording in real time and print poses as they are emitted.
    Stream {
        imu: PathBuf,
        /// Write the stream here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-frame latency and compute time CSV.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Compare predicted motion files (or a directory of them) with ground truth.
    Evaluate { pred: PathBuf, gt: PathBuf },
    /// Compute a calibration record from an IMU frame held in a known pose.
    Calibrate {
        imu: PathBuf,
        /// Motion file whose first frame is the held pose; the seated base pose by default.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// IMU frame to calibrate on.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Record path; `paths.calibration` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.physics {
        cfg.physics = matches!(p, Switch::On);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Synthesize => {
            let out = cmd_synthesize(&cfg)?;
            for (kind, n) in &out.manifest.counts {
                info!("{kind}: {n} sequences");
            }
            println!("{} sequences in {}", out.manifest.entries.len(), out.dir.display());
        }
        Command::Train { from } => {
            let out = cmd_train(&cfg, from.as_deref())?;
            println!(
                "{} windows, {} epochs, final loss {:.6e}, weights {:016x} -> {}",
                out.windows,
                out.report.epochs(),
                out.report.final_loss(),
                out.weights_hash,
                cfg.paths.weights.display()
            );
        }
        Command::Estimate { imu, out, torques } => {
            let res = cmd_estimate(&cfg, imu, out, torques.as_deref())?;
            println!("{} frames -> {}", res.estimation.frames.len(), out.display());
            if let Some(t) = &res.torque_csv {
                println!(
                    "torques -> {} (max KKT residual {:.2e}, {} fallbacks)",
                    t.display(),
                    res.estimation.max_kkt_residual(),
                    res.estimation.fallback_count()
                );
            }
        }
        Command::Stream { imu, out, timing } => {
            let args = StreamArgs { imu, timing_csv: timing.as_deref() };
            let report = match out {
                Some(p) => {
                    let file = File::create(p).map_err(|e| PipelineError::Io { path: p.display().to_string(), source: e })?;
                    let mut w = BufWriter::new(file);
                    let r = cmd_stream(&cfg, &args, &mut w)?;
                    w.flush().map_err(|e| PipelineError::Io { path: p.display().to_string(), source: e })?;
                    r
                }
                None => cmd_stream(&cfg, &args, &mut std::io::stdout().lock())?,
            };
            eprintln!(
                "{} frames, latency {} frames, compute mean {:.2} ms max {:.2} ms, {} underruns",
                report.frames.len(),
                report.latency_frames().map_or("variable".to_string(), |l| l.to_string()),
                report.mean_compute() * 1e3,
                report.max_compute() * 1e3,
                report.underruns
            );
        }
        Command::Evaluate { pred, gt } => {
            let out = cmd_evaluate(&cfg, pred, gt)?;
            print!("{}", out.report.to_table());
            println!("report -> {}", out.csv.display());
        }
        Command::Calibrate { imu, reference, frame, out } => {
            let args = CalibrateArgs { imu, reference: reference.as_deref(), frame: *frame, out: out.as_deref() };
            let (_, path) = cmd_calibrate(&cfg, &args)?;
            println!("calibration -> {}", path.display());
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
            let code = e.exit_code();
            eprintln!("error[{code}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}

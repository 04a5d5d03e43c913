use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use facerig_cli::commands::{self, parse_weights, parse_widths, ReplayArgs, TrainOptions};
use facerig_cli::demo::{write_demo, DemoSpec};
use facerig_cli::error::{CliError, CliResult, EXIT_USAGE};
use facerig_cli::replay::Sink;
use facerig_cli::service::{self, ServiceConfig, DEFAULT_FRAME_QUEUE};
use facerig_core::retrieval::DEFAULT_K;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Widths(Vec<usize>);

fn widths(s: &str) -> Result<Widths, String> {
    parse_widths(s).map(Widths)
}

/// Real-time facial expression retargeting.
#[derive(Parser)]
#[command(name = "facerig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Mini-batch size.
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch loss CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl TrainFlags {
    fn options(self, hidden: Vec<usize>) -> TrainOptions {
        TrainOptions {
            hidden,
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            report: self.report,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the adaption network from a blendshape stream and the primary
    /// character's controller track.
    TrainAdaption {
        /// Blendshape stream, one `{"t","w"}` record per line.
        #[arg(long)]
        frames: PathBuf,
        /// Controller track, one `{"t","char","v","stale"}` record per line.
        #[arg(long)]
        truth: PathBuf,
        /// Character to read from the truth file; the first one by default.
        #[arg(long)]
        character: Option<String>,
        /// Hidden layer widths.
        #[arg(long, default_value = "256,256", value_parser = widths)]
        hidden: Widths,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a primary-to-secondary controller map.
    TrainSecondary {
        /// Primary controller track.
        #[arg(long)]
        input: PathBuf,
        /// Secondary controller track, aligned with the input.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        character: Option<String>,
        #[arg(long, default_value = "128,128", value_parser = widths)]
        hidden: Widths,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match every human expression to a character expression.
    BuildPairs {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Emotional shortlist size.
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pace a recorded stream through the pipeline into a sink.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// File path, `-` for stdout, or `tcp://host:port`.
        #[arg(long)]
        out: String,
        /// Frames per second; 0 replays as fast as possible.
        #[arg(long, default_value_t = 24.0)]
        fps: f64,
        /// Forward input records without retargeting.
        #[arg(long)]
        raw: bool,
        /// Only emit this character's records.
        #[arg(long)]
        character: Option<String>,
    },
    /// Run the live service until interrupted.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7701")]
        control_listen: SocketAddr,
        #[arg(long, default_value_t = 1000)]
        metrics_interval_ms: u64,
        #[arg(long, default_value_t = DEFAULT_FRAME_QUEUE)]
        queue: usize,
        /// Never drop frames; block ingestion instead.
        #[arg(long)]
        lossless: bool,
    },
    /// Compare two output streams.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Compose a mesh from blendshape weights and write it as OBJ.
    Compose {
        #[arg(long)]
        rig: PathBuf,
        /// Comma-separated weights, one per delta shape.
        #[arg(long, conflicts_with = "weights_file")]
        weights: Option<String>,
        /// JSON array of weights.
        #[arg(long)]
        weights_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture a neutral calibration profile from a stream window.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic demo session.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        #[arg(long, default_value_t = 100)]
        controllers: usize,
        #[arg(long, default_value_t = 500)]
        records: usize,
        #[arg(long, default_value_t = 24.0)]
        fps: f64,
    },
}

fn run(command: Command) -> CliResult<Value> {
    match command {
        Command::TrainAdaption {
            frames,
            truth,
            character,
            hidden,
            train,
            out,
        } => {
            let opts = train.options(hidden.0);
            eprintln!("{}", opts.echo());
            commands::train_adaption(&frames, &truth, character.as_deref(), &out, &opts)
        }
        Command::TrainSecondary {
            input,
            target,
            character,
            hidden,
            train,
            out,
        } => {
            let opts = train.options(hidden.0);
            eprintln!("{}", opts.echo());
            commands::train_secondary(&input, &target, character.as_deref(), &out, &opts)
        }
        Command::BuildPairs { query, target, k, out } => commands::build_pairs(&query, &target, k, &out),
        Command::Replay {
            input,
            manifest,
            out,
            fps,
            raw,
            character,
        } => {
            let sink: Sink = out.parse()?;
            let report = commands::replay(&ReplayArgs {
                input: &input,
                manifest: manifest.as_deref(),
                sink: &sink,
                fps,
                raw,
                character: character.as_deref(),
            })?;
            let summary = serde_json::to_value(report).expect("report serializes");
            if sink == Sink::Stdout {
                eprintln!("{summary}");
                return Ok(Value::Null);
            }
            Ok(summary)
        }
        Command::Serve {
            manifest,
            listen,
            control_listen,
            metrics_interval_ms,
            queue,
            lossless,
        } => {
            let config = ServiceConfig {
                metrics_interval: Duration::from_millis(metrics_interval_ms),
                frame_queue: queue,
                lossless,
                ..ServiceConfig::new(listen, control_listen, manifest)
            };
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed))
                .map_err(|e| CliError::Failed(format!("cannot install signal handler: {e}")))?;
            let metrics = service::serve(&config, stop)?;
            Ok(json!({ "metrics": metrics }))
        }
        Command::Eval { pred, truth } => commands::eval(&pred, &truth),
        Command::Compose {
            rig,
            weights,
            weights_file,
            out,
        } => {
            let w = match (weights, weights_file) {
                (Some(s), None) => parse_weights(&s).map_err(CliError::Usage)?,
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|source| facerig_core::Error::Io { path: p.clone(), source })?;
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of numbers: {e}", p.display())))?
                }
                _ => return Err(CliError::Usage("give --weights or --weights-file".into())),
            };
            commands::compose(&rig, &w, &out)
        }
        Command::Calibrate {
            input,
            start,
            frames,
            out,
        } => commands::calibrate_cmd(&input, start, frames, &out),
        Command::Synth {
            out,
            seed,
            frames,
            controllers,
            records,
            fps,
        } => {
            let spec = DemoSpec {
                seed,
                frames,
                controllers,
                records,
                fps,
            };
            Ok(serde_json::to_value(write_demo(&out, &spec)?).expect("summary serializes"))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIENCAP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().to_owned();
            eprintln!("{}", CliError::Usage(first.trim_start_matches("error: ").to_owned()).to_line());
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli.command) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

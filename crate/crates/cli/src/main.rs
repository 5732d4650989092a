use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elign::trainer::{
    self, export_traces, noise_ablation, scale_sweep, zero_shot_swap, RunCheckpoint, TrainConfig,
};
use serde_json::{json, Value};

/// Environment variable naming the root under which run directories are
/// created when `--out` is not given.
const OUTPUT_ROOT_VAR: &str = "ELIGN_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "elign", version, about = "Train and evaluate decentralized particle-world agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and write its directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Greedy evaluation of a trained run.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate teams assembled from agents of different runs.
    ZeroShot {
        /// Run directories; at least two.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task overrides applied to the first run's config.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a noiseless baseline and one run per noise level.
    NoiseAblation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        sigmas: Vec<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train one run per team size.
    ScaleSweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write greedy episodes of a trained run as JSON lines.
    ExportTraces {
        #[command(flatten)]
        eval: EvalArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML or JSON config (`.json`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output directory; defaults to a name under $ELIGN_OUTPUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long)]
    episode_length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task overrides, e.g. `symmetry_breaking=true` or `tau=inf`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("output directory {} already exists and is not empty (use --force)", .0.display())]
    OutputExists(PathBuf),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] elign::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::OutputExists(_) => "output_exists",
            CliError::Output { .. } => "io",
            CliError::Core(e) => match e {
                elign::Error::InvalidSpec(_) => "invalid_spec",
                elign::Error::InvalidTask(_) => "invalid_task",
                elign::Error::InvalidConfig(_) | elign::Error::TomlDe(_) | elign::Error::Json(_) => {
                    "invalid_config"
                }
                elign::Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
                elign::Error::MalformedCheckpoint { .. } => "malformed_checkpoint",
                elign::Error::Io { .. } => "io",
                _ => "internal",
            },
        }
    }

    /// 1 for problems the user can fix, 2 for everything else.
    fn exit_code(&self) -> u8 {
        if self.kind() == "internal" {
            2
        } else {
            1
        }
    }
}

fn error_record(kind: &str, code: u8, message: &str) -> String {
    json!({ "status": "error", "kind": kind, "exit_code": code, "message": message }).to_string()
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig::load(&args.config)?.with_overrides(&args.overrides)?)
}

fn output_dir(args: &OutputArgs, verb: &str, config: &TrainConfig) -> Result<PathBuf, CliError> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            root.join(format!(
                "{verb}-{}-{}-seed{}",
                config.task.kind.name(),
                config.reward_mode.name(),
                config.seed()
            ))
        }
    };
    let occupied = dir
        .read_dir()
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(false);
    if occupied && !args.force {
        return Err(CliError::OutputExists(dir));
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Output {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Checkpoint plus the task to evaluate it on.
fn load_for_eval(args: &EvalArgs) -> Result<(RunCheckpoint, TrainConfig), CliError> {
    let ckpt = RunCheckpoint::load(&args.checkpoint)?;
    let config = ckpt.config.with_overrides(&args.overrides)?;
    Ok((ckpt, config))
}

fn execute(command: Command) -> Result<Value, CliError> {
    match command {
        Command::Train { config, output } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(&output, "train", &cfg)?;
            let outcome = trainer::run(cfg, Some(&dir))?;
            let last = outcome.reports.last().expect("at least one epoch");
            Ok(json!({
                "run_dir": dir,
                "epochs_run": outcome.reports.len(),
                "stop_reason": outcome.stop_reason,
                "best_eval_reward": outcome.trainer.best_eval_reward(),
                "final_eval": last.eval,
            }))
        }
        Command::Eval { eval } => {
            let (ckpt, cfg) = load_for_eval(&eval)?;
            let length = eval.episode_length.unwrap_or(cfg.episode_length);
            let metrics = trainer::evaluate(&ckpt, &cfg.task, eval.episodes, length, eval.seed)?;
            Ok(json!({
                "checkpoint": eval.checkpoint,
                "task": cfg.task,
                "metrics": metrics,
            }))
        }
        Command::ZeroShot {
            checkpoints,
            episodes,
            seed,
            overrides,
        } => {
            let runs = checkpoints
                .iter()
                .map(|p| RunCheckpoint::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = runs[0].config.with_overrides(&overrides)?;
            let report = zero_shot_swap(&runs, &cfg.task, episodes, cfg.episode_length, seed)?;
            Ok(json!({ "checkpoints": checkpoints, "report": report }))
        }
        Command::NoiseAblation {
            config,
            sigmas,
            output,
        } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(&output, "noise-ablation", &cfg)?;
            let rows = noise_ablation(&cfg, &sigmas, Some(&dir))?;
            let value = json!({ "out_dir": dir, "rows": rows });
            write_json(&dir.join("ablation.json"), &value)?;
            Ok(value)
        }
        Command::ScaleSweep {
            config,
            counts,
            output,
        } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(&output, "scale-sweep", &cfg)?;
            let rows = scale_sweep(&cfg, &counts, Some(&dir))?;
            let value = json!({ "out_dir": dir, "rows": rows });
            write_json(&dir.join("scale_sweep.json"), &value)?;
            Ok(value)
        }
        Command::ExportTraces { eval, out } => {
            let (ckpt, cfg) = load_for_eval(&eval)?;
            let length = eval.episode_length.unwrap_or(cfg.episode_length);
            let lines = match &out {
                Some(path) => {
                    let file = File::create(path).map_err(|e| CliError::Output {
                        path: path.clone(),
                        source: e,
                    })?;
                    let mut w = BufWriter::new(file);
                    let n = export_traces(&ckpt, &cfg.task, eval.episodes, length, eval.seed, &mut w)?;
                    w.flush().map_err(|e| CliError::Output {
                        path: path.clone(),
                        source: e,
                    })?;
                    n
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    let n = export_traces(&ckpt, &cfg.task, eval.episodes, length, eval.seed, &mut lock)?;
                    // stdout carries the traces, so the summary goes to stderr
                    eprintln!("{}", json!({ "records": n }));
                    return Ok(Value::Null);
                }
            };
            Ok(json!({ "out": out, "records": lines }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("{}", error_record("usage", 1, &e.kind().to_string()));
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            eprintln!("{}", error_record(e.kind(), code, &e.to_string()));
            ExitCode::from(code)
        }
    }
}

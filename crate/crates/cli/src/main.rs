//! `snnetc`: synthesize data, train, evaluate, check gradients and dump
//! per-timestep output distributions.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Every error line
//! starts with `error:`.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use snnetc_core::config::{ConfigError, DataSource, RunConfig};
use snnetc_core::data::{save_dataset, synth_generate, Dataset, Sample};
use snnetc_core::engine::{
    consistency_report, dump_distributions, eval_per_timestep, load_checkpoint, metrics_header,
    save_checkpoint, train_with, Checkpoint, EngineError, Model, Trainer,
};
use snnetc_core::gradcheck::{run_gradcheck_suite, ANALYTIC_TOLERANCE};

#[derive(Parser)]
#[command(
    name = "snnetc",
    version,
    about = "Spiking network training with temporal consistency"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key=value` config file; defaults apply when omitted.
    #[arg(long, alias = "spec")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set etc.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset dump to evaluate on instead of the checkpoint's data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and save it.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes config, metrics log and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset dump written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `runs/<unix time>-seed<seed>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long, conflicts_with_all = ["config", "overrides", "data"])]
        resume: Option<PathBuf>,
    },
    /// Test accuracy when only the first eval_T input slices are simulated.
    Eval {
        #[command(flatten)]
        source: CheckpointArgs,
        /// Repeatable; defaults to every T from 1 to the trained T.
        #[arg(long = "eval-t")]
        eval_t: Vec<usize>,
    },
    /// Check autodiff against the closed-form loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Write per-timestep output distributions of test samples as CSV.
    DumpDist {
        #[command(flatten)]
        source: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of test samples, taken from the start of the test split.
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Temporal consistency of a trained model on the test set.
    Consistency {
        #[command(flatten)]
        source: CheckpointArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::NotFound(path) => {
                Failure::Usage(format!("config not found: {}", path.display()))
            }
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig, Failure> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(match &args.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::parse("", &overrides)?,
    })
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset, Failure> {
    let source = match data {
        Some(path) => DataSource::File(path.to_path_buf()),
        None => cfg.data.clone(),
    };
    source.load(cfg.network.timesteps).map_err(Failure::runtime)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn synth(config: &ConfigArgs, out: &Path) -> CliResult {
    let cfg = load_config(config, &[])?;
    let spec = cfg
        .synth_spec()
        .ok_or_else(|| Failure::Usage("synth needs data.source=synth".into()))?;
    let dataset = synth_generate(spec).map_err(Failure::runtime)?;
    save_dataset(&dataset, &cfg.to_canonical_text(), out).map_err(Failure::runtime)?;
    println!(
        "wrote {} ({} train, {} test)",
        out.display(),
        dataset.train.len(),
        dataset.test.len()
    );
    Ok(())
}

fn default_out_dir(seed: u64) -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("{secs}-seed{seed}"))
}

fn train(
    config: &ConfigArgs,
    data: Option<&Path>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> CliResult {
    let (mut trainer, dataset) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(Failure::runtime)?;
            let dataset = load_data(&ckpt.config, None)?;
            (
                Trainer::from_checkpoint(ckpt).map_err(Failure::runtime)?,
                dataset,
            )
        }
        None => {
            let extra: Vec<String> = data
                .map(|p| {
                    vec![
                        "data.source=file".into(),
                        format!("data.file={}", p.display()),
                    ]
                })
                .unwrap_or_default();
            let cfg = load_config(config, &extra)?;
            let dataset = load_data(&cfg, None)?;
            (Trainer::new(cfg).map_err(Failure::runtime)?, dataset)
        }
    };
    let cfg = trainer.config().clone();
    let dir = out_dir.map_or_else(|| default_out_dir(cfg.seed), Path::to_path_buf);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("config.cfg"), &cfg.to_canonical_text())?;

    let log_path = dir.join("metrics.jsonl");
    let fresh = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    let io_err = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", log_path.display()));
    if fresh {
        writeln!(log, "{}", metrics_header(&cfg)).map_err(io_err)?;
    }

    let result = train_with(&mut trainer, &dataset, |t, m| {
        let io = |reason: String| EngineError::Io {
            path: dir.display().to_string(),
            reason,
        };
        writeln!(log, "{}", m.to_json_line()).map_err(|e| io(e.to_string()))?;
        if cfg.save_every > 0 && t.epoch() % cfg.save_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", t.epoch()));
            save_checkpoint(&t.checkpoint(), path).map_err(|e| io(e.to_string()))?;
        }
        eprintln!(
            "epoch {} loss {:.4} test acc {:.4}",
            m.epoch, m.loss_total, m.test_acc_full_t
        );
        Ok(())
    });
    let metrics = result.map_err(Failure::runtime)?;
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&trainer.checkpoint(), &final_path).map_err(Failure::runtime)?;
    match metrics.last() {
        Some(m) => println!(
            "trained {} epochs; test acc {:.4}; run dir {}",
            metrics.len(),
            m.test_acc_full_t,
            dir.display()
        ),
        None => println!("no epochs to run; run dir {}", dir.display()),
    }
    Ok(())
}

fn open_model(source: &CheckpointArgs) -> Result<(Checkpoint, Model, Dataset), Failure> {
    let ckpt = load_checkpoint(&source.checkpoint).map_err(Failure::runtime)?;
    let model = Model::from_checkpoint(&ckpt).map_err(Failure::runtime)?;
    let dataset = load_data(&ckpt.config, source.data.as_deref())?;
    Ok((ckpt, model, dataset))
}

fn eval(source: &CheckpointArgs, eval_t: &[usize]) -> CliResult {
    let (_, model, dataset) = open_model(source)?;
    let trained = model.timesteps();
    let ts: Vec<usize> = if eval_t.is_empty() {
        (1..=trained).collect()
    } else {
        eval_t.to_vec()
    };
    if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > trained) {
        return Err(Failure::Usage(format!(
            "--eval-t {bad} outside 1..={trained}"
        )));
    }
    for t in ts {
        let acc = eval_per_timestep(&model, &dataset.test, t).map_err(Failure::runtime)?;
        println!("{}", serde_json::json!({ "eval_T": t, "accuracy": acc }));
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> CliResult {
    let summary =
        run_gradcheck_suite(seed, instances, &Default::default()).map_err(Failure::runtime)?;
    println!("ce_max_rel_error {:e}", summary.ce_max_rel_error);
    println!("etc_max_rel_error {:e}", summary.etc_max_rel_error);
    println!("etc_max_fd_rel_error {:e}", summary.etc_max_fd_rel_error);
    if summary.passed {
        println!("gradcheck passed (tolerance {ANALYTIC_TOLERANCE:e})");
        Ok(())
    } else {
        Err(Failure::Runtime("gradcheck failed".into()))
    }
}

fn dump(source: &CheckpointArgs, out: &Path, samples: usize) -> CliResult {
    let (_, model, dataset) = open_model(source)?;
    let chosen: Vec<(usize, &Sample)> = dataset.test.iter().take(samples).enumerate().collect();
    dump_distributions(&model, &chosen, out).map_err(Failure::runtime)?;
    println!("wrote {} samples to {}", chosen.len(), out.display());
    Ok(())
}

fn consistency(source: &CheckpointArgs) -> CliResult {
    let (ckpt, model, dataset) = open_model(source)?;
    let report = consistency_report(
        &model,
        &dataset.test,
        ckpt.config.etc.tau,
        ckpt.config.batch_size,
    )
    .map_err(Failure::runtime)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            eprint!("error: {text}");
            return 1;
        }
    };
    let result = match &cli.command {
        Command::Synth { config, out } => synth(config, out),
        Command::Train {
            config,
            data,
            out_dir,
            resume,
        } => train(
            config,
            data.as_deref(),
            out_dir.as_deref(),
            resume.as_deref(),
        ),
        Command::Eval { source, eval_t } => eval(source, eval_t),
        Command::Gradcheck { seed, instances } => gradcheck(*seed, *instances),
        Command::DumpDist {
            source,
            out,
            samples,
        } => dump(source, out, *samples),
        Command::Consistency { source } => consistency(source),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

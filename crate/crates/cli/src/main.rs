use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use srseg::config::{parse_config, OutputFormat, RunConfigFile};
use srseg::data::{generate_dataset, read_dataset, write_dataset};
use srseg::report::{parse_ablation_csv, render_markdown};
use srseg::suite::{run_suite, SuiteEntry, SuiteSettings};
use srseg::train::{ablate, default_grid, evaluate, train};
use srseg::{Model, Precision};

/// Multi-exit segmentation with layer-wise self-distillation.
#[derive(Debug, Parser)]
#[command(name = "srseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    B32,
    #[value(name = "64")]
    B64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and eval splits of the synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Receives `train/` and `eval/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, value_enum, default_value = "64")]
        precision: Bits,
        /// Check a single operation.
        #[arg(long)]
        op: Option<String>,
    },
    /// Train one model and evaluate it on the eval split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on a dataset directory.
    Eval {
        /// Parameter file; `config.json` must sit next to it.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the five toggle rows over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Seeds `train.seed`, `train.seed + 1`, ...
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel runs; capped by SR_NUM_THREADS.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Render an ablation CSV as a Markdown table on stdout.
    Report {
        input: PathBuf,
        #[arg(long)]
        no_timestamp: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: srseg::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime { .. } | CliError::Failed(_) => 2,
        }
    }
}

trait Context<T> {
    fn context(self, msg: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<srseg::Error>> Context<T> for Result<T, E> {
    fn context(self, msg: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            context: msg(),
            source: e.into(),
        })
    }
}

/// Configuration problems are the caller's to fix, so they count as usage errors.
fn load_config(path: &Path) -> Result<RunConfigFile, CliError> {
    parse_config(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).context(|| format!("creating {}", path.display()))
}

fn timestamp() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

fn gen_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    for (name, ds) in [("train", cfg.dataset.clone()), ("eval", cfg.dataset.eval_split())] {
        let dir = out.join(name);
        write_dataset(&dir, &ds, &generate_dataset(&ds)).context(|| format!("writing {}", dir.display()))?;
        println!("{name}: {} samples in {}", ds.count, dir.display());
    }
    Ok(())
}

fn gradcheck(bits: Bits, op: Option<&str>) -> Result<(), CliError> {
    let precision = match bits {
        Bits::B32 => Precision::F32,
        Bits::B64 => Precision::F64,
    };
    let settings = SuiteSettings::for_precision(precision);
    let entries: Vec<SuiteEntry> = match precision {
        Precision::F64 => run_suite::<f64>(op, &settings),
        Precision::F32 => run_suite::<f32>(op, &settings),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "precision {} eps {:e} tolerance {:e}",
        precision.bits(),
        settings.eps,
        settings.tolerance
    );
    println!(
        "{:<22} {:>6} {:>8} {:>12} {:>12}  status",
        "op", "cases", "checked", "max_rel", "max_abs"
    );
    for e in &entries {
        println!(
            "{:<22} {:>6} {:>8} {:>12.3e} {:>12.3e}  {}",
            e.op,
            e.cases,
            e.report.checked,
            e.report.max_rel_error,
            e.report.max_abs_error,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed).count();
    match (precision, failed) {
        (_, 0) => Ok(()),
        (Precision::F32, n) => {
            println!("{n} op(s) above tolerance at 32-bit; single precision results are informational");
            Ok(())
        }
        (Precision::F64, n) => Err(CliError::Failed(format!(
            "{n} op(s) exceed tolerance {:e}",
            settings.tolerance
        ))),
    }
}

fn train_cmd(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    create_dir(&out)?;
    let train_set = generate_dataset(&cfg.dataset);
    let eval_set = generate_dataset(&cfg.dataset.eval_split());
    let model = Model::build(&cfg.model, cfg.train.seed).context(|| "building model".into())?;
    let (model, log) = train(model, &train_set, Some(&eval_set), &cfg.train)
        .context(|| format!("training with seed {}", cfg.train.seed))?;
    let metrics = log.final_metrics.as_ref().expect("eval set given");
    write(&out.join("config.json"), cfg.to_json())?;
    model
        .save(&out.join("model.srtn"))
        .context(|| format!("saving model to {}", out.display()))?;
    if cfg.output.wants(OutputFormat::Csv) {
        write(&out.join("log.csv"), log.to_csv())?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        let json = serde_json::to_string_pretty(metrics).expect("metrics serialize");
        write(&out.join("metrics.json"), json)?;
    }
    println!(
        "seed {} mIoU {:.2}% pixel accuracy {:.4} ({} steps, {:.1}s)",
        cfg.train.seed,
        100.0 * metrics.miou,
        metrics.pixel_accuracy,
        log.steps.len(),
        log.wall_clock_secs
    );
    Ok(())
}

fn eval_cmd(model_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let config_path = model_path.parent().unwrap_or(Path::new(".")).join("config.json");
    let cfg = load_config(&config_path)?;
    let mut model = Model::<f32>::build(&cfg.model, 0).context(|| "building model".into())?;
    model
        .load(model_path)
        .context(|| format!("loading {}", model_path.display()))?;
    let (_, samples) = read_dataset(data).context(|| format!("reading {}", data.display()))?;
    let metrics = evaluate(&model, &samples, cfg.train.batch_size).context(|| "evaluating".into())?;
    create_dir(out)?;
    write(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )?;
    println!(
        "{} samples: mIoU {:.2}% pixel accuracy {:.4}",
        samples.len(),
        100.0 * metrics.miou,
        metrics.pixel_accuracy
    );
    Ok(())
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("SR_NUM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "SR_NUM_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn ablate_cmd(
    config: &Path,
    seeds: u64,
    out: Option<PathBuf>,
    jobs: usize,
    no_timestamp: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let jobs = thread_cap()?.map_or(jobs, |cap| jobs.min(cap)).max(1);
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    create_dir(&out)?;
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.train.seed + k).collect();
    let table = ablate(&cfg.ablation_setup(), &default_grid(), &seed_list, jobs).context(|| "ablation".into())?;
    let ts = (!no_timestamp).then(timestamp);
    let md = render_markdown(&table.rows, ts.as_deref());
    if cfg.output.wants(OutputFormat::Csv) {
        write(&out.join("ablation.csv"), table.to_csv())?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write(
            &out.join("ablation.json"),
            serde_json::to_string_pretty(&table).expect("table serializes"),
        )?;
    }
    if cfg.output.wants(OutputFormat::Markdown) {
        write(&out.join("ablation.md"), &md)?;
    }
    print!("{md}");
    eprintln!(
        "{} runs on {} worker(s) in {:.1}s",
        5 * seeds,
        table.workers,
        table.wall_clock_secs
    );
    Ok(())
}

fn report_cmd(input: &Path, no_timestamp: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(input).context(|| format!("reading {}", input.display()))?;
    let rows = parse_ablation_csv(&text).context(|| input.display().to_string())?;
    let ts = (!no_timestamp).then(timestamp);
    print!("{}", render_markdown(&rows, ts.as_deref()));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Gradcheck { precision, op } => gradcheck(precision, op.as_deref()),
        Command::Train { config, seed, out } => train_cmd(&config, seed, out),
        Command::Eval { model, data, out } => eval_cmd(&model, &data, &out),
        Command::Ablate {
            config,
            seeds,
            out,
            jobs,
            no_timestamp,
        } => ablate_cmd(&config, seeds, out, jobs, no_timestamp),
        Command::Report { input, no_timestamp } => report_cmd(&input, no_timestamp),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
    }

    fn srseg(args: &[&str]) -> u8 {
        execute(std::iter::once("srseg").chain(args.iter().copied()))
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn read_json(p: PathBuf) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(srseg(&["no-such-command"]), 1);
        assert_eq!(srseg(&["gradcheck", "--op", "warp"]), 1);
        assert_eq!(srseg(&["gradcheck", "--precision", "16"]), 1);
        assert_eq!(srseg(&["train", "--config", "/nonexistent.json"]), 1);
        assert_eq!(srseg(&["--help"]), 0);
        assert_eq!(srseg(&["gradcheck", "--op", "relu"]), 0);
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.json");
        fs::write(&cfg, r#"{"train": {"epochs": 2, "lr": 0.1}}"#).unwrap();
        match load_config(&cfg) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("train.lr"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(srseg(&["train", "--config", s(&cfg)]), 1);
    }

    #[test]
    fn train_then_eval_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let (run, data, eval_out) = (dir.path().join("run"), dir.path().join("data"), dir.path().join("eval"));
        assert_eq!(srseg(&["train", "--config", s(&smoke()), "--out", s(&run)]), 0);
        for f in ["config.json", "model.srtn", "log.csv", "metrics.json"] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(srseg(&["gen-data", "--config", s(&smoke()), "--out", s(&data)]), 0);
        let model = run.join("model.srtn");
        let code = srseg(&[
            "eval",
            "--model",
            s(&model),
            "--data",
            s(&data.join("eval")),
            "--out",
            s(&eval_out),
        ]);
        assert_eq!(code, 0);
        let (trained, evaluated) = (
            read_json(run.join("metrics.json")),
            read_json(eval_out.join("metrics.json")),
        );
        assert_eq!(trained["miou"], evaluated["miou"]);
        assert_eq!(trained["confusion"], evaluated["confusion"]);

        // a truncated parameter file is a runtime failure
        let bytes = fs::read(&model).unwrap();
        fs::write(&model, &bytes[..bytes.len() / 2]).unwrap();
        let code = srseg(&[
            "eval",
            "--model",
            s(&model),
            "--data",
            s(&data.join("eval")),
            "--out",
            s(&eval_out),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn ablation_outputs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, out) = (smoke(), dir.path().join("abl"));
        std::env::remove_var("SR_NUM_THREADS");
        let args = [
            "ablate",
            "--config",
            s(&cfg),
            "--seeds",
            "2",
            "--out",
            s(&out),
            "--jobs",
            "2",
        ];
        assert_eq!(srseg(&[&args[..], &["--no-timestamp"]].concat()), 0);
        let md = fs::read_to_string(out.join("ablation.md")).unwrap();
        let rows = parse_ablation_csv(&fs::read_to_string(out.join("ablation.csv")).unwrap()).unwrap();
        assert_eq!(render_markdown(&rows, None), md);
        assert_eq!(md.lines().filter(|l| l.starts_with('|')).count(), 2 + 5);
        let table = read_json(out.join("ablation.json"));
        assert_eq!(table["rows"].as_array().unwrap().len(), 5);
        assert_eq!(table["workers"], 2);
        assert_eq!(srseg(&["report", s(&out.join("ablation.csv")), "--no-timestamp"]), 0);

        std::env::set_var("SR_NUM_THREADS", "zero");
        let code = srseg(&args);
        std::env::remove_var("SR_NUM_THREADS");
        assert_eq!(code, 1);
    }
}

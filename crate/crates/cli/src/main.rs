//! `jdatt`: data generation, teacher training, distillation, evaluation
//! and benchmarking driven by one TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config or usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jdatt_core::config::{ConfigError, RunConfig};
use jdatt_core::distill::{LossRecord, Teachers, TrainMode};
use jdatt_core::evalkit::EvalReport;
use jdatt_core::nets::{checkpoint_digest, save_checkpoint};
use jdatt_core::pipeline::{self, NamedSystem, PipelineError};

#[derive(Parser)]
#[command(name = "jdatt", version, about = "Joint restoration/detection distillation under simulated turbulence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.student.epochs=4`; wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunsArgs {
    /// Parent of the per-invocation run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Easy,
    Medium,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Separate,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the train and held-out splits into a dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace the `[sim]` section with a named degradation preset.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the restoration and detection teachers.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Distill student models from frozen teachers.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long)]
        data: PathBuf,
        /// Run directory of `train-teacher`.
        #[arg(long)]
        teachers: PathBuf,
        /// Overrides `train.student.mode`.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Score systems on the held-out split and write a report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long)]
        data: PathBuf,
        /// `distorted` or `NAME=RUN_DIR`; repeatable.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
    },
    /// Time systems and write `bench.json`.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runs: RunsArgs,
        /// `distorted` or `NAME=RUN_DIR`; repeatable.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
    },
    /// Merge an eval report with bench latencies into a new report.
    Report {
        #[command(flatten)]
        runs: RunsArgs,
        /// Directory holding `report.json`.
        #[arg(long)]
        eval: PathBuf,
        /// A `bench.json` file or its run directory; repeatable.
        #[arg(long)]
        bench: Vec<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// `JDATT_THREADS` caps the worker pool.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("JDATT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("JDATT_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime("thread pool"))
}

fn load_config(args: &ConfigArgs, preset: Option<Preset>) -> Result<RunConfig, CliError> {
    let preset = preset.map(|p| match p {
        Preset::Easy => "easy",
        Preset::Medium => "medium",
        Preset::Hard => "hard",
    });
    Ok(match &args.config {
        Some(path) => RunConfig::load(path, preset, &args.overrides)?,
        None => RunConfig::parse("", preset, &args.overrides)?,
    })
}

/// A fresh directory `<utc timestamp>-seed<master>-<command>`; never reused.
fn create_run_dir(root: &Path, seed: u64, command: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root).map_err(runtime(&format!("create {}", root.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{seed}-{command}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(runtime(&format!("create {}", dir.display()))(e)),
        }
    }
    unreachable!("unbounded search")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(runtime(&format!("write {}", path.display())))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_file(&dir.join("config.toml"), cfg.resolved().to_toml())
}

/// Marks every file of a completed run read-only.
fn seal(dir: &Path) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(runtime("seal run"))? {
        let path = entry.map_err(runtime("seal run"))?.path();
        if path.is_file() {
            let mut perm = fs::metadata(&path).map_err(runtime("seal run"))?.permissions();
            perm.set_readonly(true);
            fs::set_permissions(&path, perm).map_err(runtime("seal run"))?;
        }
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

/// JSON-lines loss log that remembers the first write failure.
struct LossLog {
    out: BufWriter<fs::File>,
    failed: Option<std::io::Error>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        let f = fs::File::create(path).map_err(runtime(&format!("create {}", path.display())))?;
        Ok(Self {
            out: BufWriter::new(f),
            failed: None,
        })
    }

    fn record(&mut self, r: &LossRecord) {
        if self.failed.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("record serialises");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.failed = Some(e);
        }
        if r.step.is_multiple_of(50) {
            eprintln!("{:?} step {} epoch {} loss {:.5}", r.phase, r.step, r.epoch, r.loss_total);
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.failed {
            return Err(runtime("write loss log")(e));
        }
        self.out.flush().map_err(runtime("write loss log"))
    }
}

fn parse_system(spec: &str) -> Result<NamedSystem, CliError> {
    if spec == "distorted" {
        return Ok(NamedSystem::distorted());
    }
    let (name, dir) = spec
        .split_once('=')
        .filter(|(n, d)| !n.is_empty() && !d.is_empty())
        .ok_or_else(|| CliError::Config(format!("system '{spec}' is neither 'distorted' nor NAME=RUN_DIR")))?;
    Ok(NamedSystem::from_run_dir(name, Path::new(dir))?)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { cfg, out, preset, force } => {
            let cfg = load_config(&cfg, preset)?;
            let occupied = out.is_dir() && fs::read_dir(&out).map_err(runtime("read out dir"))?.next().is_some();
            if occupied && !force {
                return Err(CliError::Runtime(format!(
                    "{} is not empty; pass --force to overwrite",
                    out.display()
                )));
            }
            for split in [pipeline::TRAIN_SPLIT, pipeline::VAL_SPLIT] {
                let dir = out.join(split);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(runtime(&format!("clear {}", dir.display())))?;
                }
            }
            let (train, val) = pipeline::generate_splits(&cfg)?;
            pipeline::write_splits(&train, &val, &out)?;
            echo_config(&out, &cfg)?;
            println!("wrote {} train and {} val sequences to {}", train.len(), val.len(), out.display());
            Ok(())
        }
        Command::TrainTeacher { cfg, runs, data } => {
            let cfg = load_config(&cfg, None)?;
            let train = pipeline::load_split(&data, pipeline::TRAIN_SPLIT)?;
            let dir = create_run_dir(&runs.runs, cfg.master_seed, "teacher")?;
            echo_config(&dir, &cfg)?;
            let mut log = LossLog::create(&dir.join("train_log.jsonl"))?;
            let run = pipeline::train_teacher_pair(&cfg, &train, &mut |r| log.record(r))?;
            log.finish()?;
            save_checkpoint(&run.restorer, &dir.join(pipeline::TEACHER_RESTORER_FILE)).map_err(PipelineError::from)?;
            save_checkpoint(&run.detector, &dir.join(pipeline::TEACHER_DETECTOR_FILE)).map_err(PipelineError::from)?;
            seal(&dir)
        }
        Command::Distill { cfg, runs, data, teachers, mode } => {
            let mut cfg = load_config(&cfg, None)?;
            if let Some(m) = mode {
                cfg.train.student.mode = match m {
                    Mode::Joint => TrainMode::Joint,
                    Mode::Separate => TrainMode::Separate,
                };
            }
            let t_r = pipeline::load_model(&teachers.join(pipeline::TEACHER_RESTORER_FILE), "teacher restorer checkpoint (run train-teacher first)")?;
            let t_d = pipeline::load_model(&teachers.join(pipeline::TEACHER_DETECTOR_FILE), "teacher detector checkpoint (run train-teacher first)")?;
            let train = pipeline::load_split(&data, pipeline::TRAIN_SPLIT)?;
            let mode_name = match cfg.train.student.mode {
                TrainMode::Separate => "separate",
                _ => "joint",
            };
            let dir = create_run_dir(&runs.runs, cfg.master_seed, mode_name)?;
            echo_config(&dir, &cfg)?;
            let mut log = LossLog::create(&dir.join("train_log.jsonl"))?;
            let teachers_ref = Teachers {
                restorer: &t_r,
                detector: &t_d,
            };
            let state = pipeline::distill(&cfg, cfg.train.student.mode, &train, teachers_ref, &mut |r| log.record(r))?;
            log.finish()?;
            save_checkpoint(&state.restorer, &dir.join(pipeline::STUDENT_RESTORER_FILE)).map_err(PipelineError::from)?;
            save_checkpoint(&state.detector, &dir.join(pipeline::STUDENT_DETECTOR_FILE)).map_err(PipelineError::from)?;
            let digests = serde_json::json!({
                "teacher_restorer": checkpoint_digest(&t_r),
                "teacher_detector": checkpoint_digest(&t_d),
            });
            write_file(&dir.join("teacher_digests.json"), format!("{digests:#}\n"))?;
            seal(&dir)
        }
        Command::Eval { cfg, runs, data, systems } => {
            let cfg = load_config(&cfg, None)?;
            let systems = systems.iter().map(|s| parse_system(s)).collect::<Result<Vec<_>, _>>()?;
            let val = pipeline::load_split(&data, pipeline::VAL_SPLIT)?;
            let report = pipeline::evaluate_systems(&cfg, &val, &systems)?;
            let dir = create_run_dir(&runs.runs, cfg.master_seed, "eval")?;
            echo_config(&dir, &cfg)?;
            report.write(&dir).map_err(PipelineError::from)?;
            print_table(&report);
            seal(&dir)
        }
        Command::Bench { cfg, runs, systems } => {
            let cfg = load_config(&cfg, None)?;
            let systems = systems.iter().map(|s| parse_system(s)).collect::<Result<Vec<_>, _>>()?;
            let latency = pipeline::bench_systems(&cfg, &systems)?;
            let dir = create_run_dir(&runs.runs, cfg.master_seed, "bench")?;
            echo_config(&dir, &cfg)?;
            let text = serde_json::to_string_pretty(&latency).expect("latency serialises");
            write_file(&dir.join("bench.json"), text + "\n")?;
            for (name, l) in &latency {
                println!("{name}: {l:?}");
            }
            seal(&dir)
        }
        Command::Report { runs, eval, bench } => {
            let path = eval.join("report.json");
            let text = fs::read_to_string(&path).map_err(runtime(&format!("read {}", path.display())))?;
            let mut report: EvalReport = serde_json::from_str(&text).map_err(runtime(&format!("parse {}", path.display())))?;
            for b in bench {
                let file = if b.is_dir() { b.join("bench.json") } else { b };
                let text = fs::read_to_string(&file).map_err(runtime(&format!("read {}", file.display())))?;
                let latency: BTreeMap<String, BTreeMap<String, f64>> =
                    serde_json::from_str(&text).map_err(runtime(&format!("parse {}", file.display())))?;
                report.merge_latency(&latency);
            }
            let seed = report.metadata.get("master_seed").and_then(|v| v.as_u64()).unwrap_or(0);
            let dir = create_run_dir(&runs.runs, seed, "report")?;
            report.write(&dir).map_err(PipelineError::from)?;
            print_table(&report);
            seal(&dir)
        }
    }
}

fn print_table(report: &EvalReport) {
    println!("{:<14} {:>9} {:>7} {:>9} {:>10} {:>11}", "system", "psnr_dB", "ssim", "mAP", "params", "latency_ms");
    for r in &report.rows {
        let map = r.map_50_95.map(|m| format!("{:.2}%", 100.0 * m)).unwrap_or_else(|| "-".into());
        let lat = r.latency_ms.get("total").map(|l| format!("{l:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<14} {:>9.3} {:>7.4} {:>9} {:>10} {:>11}",
            r.system,
            r.psnr_mean,
            r.ssim_mean,
            map,
            r.param_counts.get("total").copied().unwrap_or(0),
            lat
        );
    }
}

//! The `psl` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a
//! run fails (I/O, divergence, failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use crate::config::{self, ConfigError, RunConfig};
use crate::data::{self, DataError, Dataset};
use crate::encoder::Checkpoint;
use crate::eval::EvalReport;
use crate::gradcheck;
use crate::plot::{self, Series};
use crate::trainer::{self, TrainError};

#[derive(Parser, Debug)]
#[command(name = "psl", version, about = "Pairwise similarity learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file: flat `key = value` text or JSON (a manifest.json works).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key (`data.seed` for gen-data).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Worker threads for grid cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic dataset as CSV.
    GenData(Common),
    /// Train one model and write its run log and checkpoint.
    Train(Common),
    /// Evaluate `input.checkpoint` on the test split.
    Eval(Common),
    /// Train every cell of the `ablation` grid.
    Ablate(AblateArgs),
    /// Finite-difference check of every analytic gradient.
    GradCheck(Common),
    /// Render the ROC curves of `input.reports` as SVG.
    PlotRoc(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::GradCheck(_) => "grad-check",
            Command::PlotRoc(_) => "plot-roc",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::GradCheck(c)
            | Command::PlotRoc(c) => c,
            Command::Ablate(a) => &a.common,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Usage(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_config() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) | DataError::Invalid(_) | DataError::Split(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn manifest(&mut self, command: &str, cfg: &RunConfig) -> Result<(), Failure> {
        let doc = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg.to_value(),
            "outputs": self.files,
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        self.write("manifest.json", text + "\n")
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    match &cfg.data.path {
        Some(p) => Ok(data::load_csv(Path::new(p))?),
        None => Ok(data::generate(&cfg.data.spec)?),
    }
}

fn read_report(path: &Path) -> Result<EvalReport, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if let Ok(r) = EvalReport::from_json(&text) {
        return Ok(r);
    }
    // a run summary carries its held-out report
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    v.get("test_report")
        .and_then(|r| serde_json::from_value(r.clone()).ok())
        .ok_or_else(|| Failure::Invalid(format!("{}: not an evaluation report", path.display())))
}

fn run_command(cmd: &Command, jobs: usize) -> Result<Vec<String>, Failure> {
    let common = cmd.common();
    let mut cfg = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        if matches!(cmd, Command::GenData(_)) {
            cfg.data.spec.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    let mut out = Output::create(&common.out)?;
    let mut stdout = Vec::new();
    match cmd {
        Command::GenData(_) => {
            let ds = data::generate(&cfg.data.spec)?;
            out.write("data.csv", data::to_csv(&ds))?;
            stdout.push(format!("wrote {} rows to {}", ds.len(), out.dir.join("data.csv").display()));
        }
        Command::Train(_) => {
            let ds = load_dataset(&cfg)?;
            let outcome = trainer::train(&cfg.train, &ds)?;
            let mut log = outcome.log;
            log.checkpoint = Some("checkpoint.bin".into());
            out.write("checkpoint.bin", outcome.model.checkpoint().to_bytes())?;
            out.write("steps.jsonl", log.steps_jsonl())?;
            out.write("summary.json", log.summary_json() + "\n")?;
            out.write("report.json", log.test_report.to_json() + "\n")?;
            stdout.push(format!("test eer {:.6}", log.test_report.eer));
        }
        Command::Eval(_) => {
            let ckpt_path = cfg
                .input
                .checkpoint
                .as_ref()
                .ok_or_else(|| Failure::Invalid("eval needs `input.checkpoint`".into()))?;
            let ckpt = Checkpoint::load(Path::new(ckpt_path)).map_err(|e| io_err(Path::new(ckpt_path), e))?;
            let ds = load_dataset(&cfg)?;
            let report = trainer::evaluate_checkpoint(&cfg.train, &ckpt, &ds)?;
            out.write("report.json", report.to_json() + "\n")?;
            let csv = format!("{}\n{}\n", EvalReport::csv_header(&cfg.train.eval.far_targets), report.csv_row());
            out.write("report.csv", csv)?;
            stdout.push(format!("eer {:.6}", report.eer));
        }
        Command::Ablate(_) => {
            let ds = load_dataset(&cfg)?;
            let rows = trainer::ablate(&cfg.ablation, &cfg.train, &ds, jobs)?;
            out.write("ablation.csv", trainer::ablation_csv(&rows, &cfg.train.eval.far_targets))?;
            out.write("ablation.json", serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n")?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            stdout.push(format!("{} cells, {} failed", rows.len(), failed));
        }
        Command::GradCheck(_) => {
            let results = gradcheck::run_all(cfg.train.seed)?;
            for r in &results {
                stdout.push(format!(
                    "{:<40} {:>12.3e}  {}",
                    r.name,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                ));
            }
            out.write("gradcheck.json", serde_json::to_string_pretty(&results).expect("results serialize") + "\n")?;
            out.manifest(cmd.name(), &cfg)?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                for line in &stdout {
                    println!("{line}");
                }
                return Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))));
            }
            return Ok(stdout);
        }
        Command::PlotRoc(_) => {
            if cfg.input.reports.is_empty() {
                return Err(Failure::Invalid("plot-roc needs `input.reports`".into()));
            }
            let mut reports = Vec::new();
            for p in &cfg.input.reports {
                reports.push(read_report(Path::new(p))?);
            }
            let names: Vec<String> = if cfg.input.names.is_empty() {
                cfg.input
                    .reports
                    .iter()
                    .map(|p| {
                        let path = Path::new(p);
                        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        match path.parent().and_then(|d| d.file_name()) {
                            Some(dir) if matches!(stem.as_str(), "report" | "summary") => {
                                dir.to_string_lossy().into_owned()
                            }
                            _ => stem,
                        }
                    })
                    .collect()
            } else {
                cfg.input.names.clone()
            };
            let series: Vec<Series> =
                names.iter().zip(&reports).map(|(n, r)| Series { name: n, points: &r.roc }).collect();
            let svg = plot::roc_svg(&series).map_err(|e| Failure::Invalid(e.to_string()))?;
            out.write("roc.svg", svg)?;
        }
    }
    out.manifest(cmd.name(), &cfg)?;
    Ok(stdout)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let jobs = match &cli.command {
        Command::Ablate(a) => a.jobs,
        _ => 1,
    };
    match run_command(&cli.command, jobs) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(f) => {
            eprintln!("psl {}: {}", cli.command.name(), f.message());
            if let Failure::Usage(_) = f {
                let mut cmd = Cli::command();
                cmd.build();
                let usage = match cmd.find_subcommand_mut(cli.command.name()) {
                    Some(sub) => sub.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("{usage}");
            }
            f.code()
        }
    }
}

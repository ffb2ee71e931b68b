//! `restem`: run experiments, evaluate checkpoints, merge results.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or usage,
//! 3 missing or corrupt artifact, 4 schema version mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use serde_json::Value;

use restem_core::emloop::{run_experiment, ExperimentConfig, MANIFEST_SCHEMA_VERSION};
use restem_core::eval::{evaluate, EvalConfig, PassAtKConfig, VoteConfig};
use restem_core::io::{write_atomic, write_json_atomic};
use restem_core::seqpolicy::{load_checkpoint_expecting, DecodeParams};
use restem_core::tasks::{lab_vocab, read_problem_set, Split};
use restem_core::Error;

const RUNTIME: u8 = 1;
const CONFIG: u8 = 2;
const ARTIFACT: u8 = 3;
const SCHEMA: u8 = 4;

#[derive(Parser)]
#[command(name = "restem", version, about = "Expectation-maximization self-training on toy tasks")]
struct Cli {
    /// Worker threads for sampling and evaluation. Results do not depend on it.
    #[arg(long, global = true, env = "RESTEM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Experiment directory to create or overwrite.
        #[arg(long, env = "RESTEM_OUT_DIR")]
        out: PathBuf,
        /// Replace the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a problem split.
    Eval {
        checkpoint: PathBuf,
        /// An experiment directory, or a problems.jsonl file.
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output length limit; read from the experiment config when omitted.
        #[arg(long)]
        max_len: Option<usize>,
        /// Greedy accuracy. Implied when no other metric is requested.
        #[arg(long)]
        greedy: bool,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        pass_at_k: Vec<u64>,
        /// Samples per problem for pass@k.
        #[arg(long, default_value_t = 64)]
        n: u64,
        /// Majority vote over this many samples per problem.
        #[arg(long)]
        vote: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path. The pass@k CSV goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge experiment directories into one tidy CSV.
    Report {
        dirs: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    Warmup,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::Warmup => Split::Warmup,
        }
    }
}

/// An error and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => CONFIG,
        Error::Schema { .. } => SCHEMA,
        Error::Checkpoint { .. } | Error::VocabMismatch { .. } | Error::Io { .. } | Error::Json(_) => ARTIFACT,
        Error::InvalidArgument(_) | Error::TrainingDiverged { .. } | Error::Generation(_) => RUNTIME,
    }
}

fn core(e: Error) -> Failure {
    fail(code_of(&e), e.into())
}

trait OrFail<T> {
    fn or_fail(self, code: u8, what: impl Fn() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self, code: u8, what: impl Fn() -> String) -> Result<T, Failure> {
        self.map_err(|e| fail(code, e.into().context(what())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME);
        }
    }
    let outcome = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed),
        Command::Eval {
            checkpoint,
            task,
            split,
            max_len,
            greedy,
            pass_at_k,
            n,
            vote,
            seed,
            out,
        } => cmd_eval(EvalArgs {
            checkpoint,
            task,
            split: split.into(),
            max_len,
            greedy,
            pass_at_k,
            n,
            vote,
            seed,
            out,
        }),
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Outcome {
    let bytes = std::fs::read(config).or_fail(CONFIG, || format!("reading {}", config.display()))?;
    // Validate up front so config problems never surface as runtime errors.
    let text = std::str::from_utf8(&bytes).or_fail(CONFIG, || format!("{} is not UTF-8", config.display()))?;
    ExperimentConfig::from_json(text).map_err(|e| fail(CONFIG, anyhow::Error::from(e).context(config.display().to_string())))?;
    let summary = run_experiment(&bytes, out, seed).map_err(|e| {
        let code = code_of(&e);
        fail(code, anyhow::Error::from(e).context(format!("experiment {}", config.display())))
    })?;
    let m = &summary.manifest;
    println!(
        "{} finished in {:.1}s: {} run(s), {} record(s) in {}",
        m.experiment_id,
        m.elapsed_secs,
        m.runs.len(),
        summary.records.len().max(summary.exact.len()),
        out.display()
    );
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    task: PathBuf,
    split: Split,
    max_len: Option<usize>,
    greedy: bool,
    pass_at_k: Vec<u64>,
    n: u64,
    vote: Option<usize>,
    seed: u64,
    out: PathBuf,
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (problems_path, config_path) = if a.task.is_dir() {
        (a.task.join("problems.jsonl"), Some(a.task.join("config.json")))
    } else {
        (a.task.clone(), None)
    };
    let max_len = match (a.max_len, &config_path) {
        (Some(m), _) => m,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).or_fail(ARTIFACT, || format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::from_json(&text).map_err(core)?;
            cfg.generation.as_ref().map(|g| g.decode.max_len).ok_or_else(|| {
                fail(CONFIG, anyhow!("{} has no generation settings; pass --max-len", path.display()))
            })?
        }
        (None, None) => return Err(fail(CONFIG, anyhow!("--max-len is required with a problems file"))),
    };
    let vocab = lab_vocab();
    let policy = load_checkpoint_expecting(&a.checkpoint, vocab).map_err(core)?;
    let set = read_problem_set(&problems_path).map_err(core)?;
    let problems = set.split(a.split);
    if problems.is_empty() {
        return Err(fail(CONFIG, anyhow!("split {:?} of {} is empty", a.split, problems_path.display())));
    }
    let decode = DecodeParams::full_support(vocab.size(), max_len);
    let config = EvalConfig {
        max_len,
        greedy: a.greedy || (a.pass_at_k.is_empty() && a.vote.is_none()),
        pass_at_k: (!a.pass_at_k.is_empty()).then(|| PassAtKConfig {
            n: a.n,
            ks: a.pass_at_k.clone(),
            decode,
        }),
        majority_vote: a.vote.map(|n| VoteConfig { n, decode }),
    };
    let split_name = serde_json::to_value(a.split).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let report = evaluate(&policy, &policy.checkpoint_id(), problems, &split_name, &config, a.seed).map_err(core)?;
    write_json_atomic(&a.out, &report).map_err(core)?;
    if let Some(curve) = &report.pass_at_k {
        write_atomic(&csv_beside(&a.out), curve.to_csv().as_bytes()).map_err(core)?;
    }
    if let Some(acc) = report.greedy_accuracy {
        println!("greedy accuracy {acc:.4} on {} problems", problems.len());
    }
    if let Some(curve) = &report.pass_at_k {
        for p in &curve.points {
            println!("pass@{} {:.4}", p.k, p.value);
        }
    }
    if let Some(v) = &report.majority_vote {
        println!("majority vote ({} samples) {:.4}", v.samples, v.accuracy);
    }
    Ok(())
}

/// `report.json` becomes `report-pass_at_k.csv`.
fn csv_beside(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}-pass_at_k.csv"))
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Outcome {
    if dirs.is_empty() {
        return Err(fail(CONFIG, anyhow!("report needs at least one experiment directory")));
    }
    let mut csv = String::from("experiment,mode,master_seed,run,iteration,metric,value\n");
    for dir in dirs {
        append_rows(dir, &mut csv)?;
    }
    match out {
        Some(path) => write_atomic(path, csv.as_bytes()).map_err(core),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn read_json_value(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).or_fail(ARTIFACT, || format!("reading {}", path.display()))?;
    serde_json::from_str(&text).or_fail(ARTIFACT, || format!("parsing {}", path.display()))
}

/// One row per record and numeric field. Works for both the sampled and the
/// exact record layouts.
fn append_rows(dir: &Path, csv: &mut String) -> Outcome {
    let manifest_path = dir.join("manifest.json");
    let manifest = read_json_value(&manifest_path)?;
    let version = manifest.get("schema_version").and_then(Value::as_u64);
    if version != Some(u64::from(MANIFEST_SCHEMA_VERSION)) {
        return Err(fail(
            SCHEMA,
            anyhow!(
                "{}: schema version {} (expected {MANIFEST_SCHEMA_VERSION})",
                manifest_path.display(),
                version.map_or("missing".to_string(), |v| v.to_string())
            ),
        ));
    }
    let field = |name: &str| -> String {
        match manifest.get(name) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => String::new(),
        }
    };
    let (experiment, mode, seed) = (field("experiment_id"), field("mode"), field("master_seed"));

    let records_path = dir.join("iterations.jsonl");
    let text = std::fs::read_to_string(&records_path).or_fail(ARTIFACT, || format!("reading {}", records_path.display()))?;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: serde_json::Map<String, Value> =
            serde_json::from_str(line).or_fail(ARTIFACT, || format!("{} line {}", records_path.display(), line_no + 1))?;
        let run = row.get("run").and_then(Value::as_str).unwrap_or_default();
        let iteration = row.get("iteration").and_then(Value::as_u64).unwrap_or_default();
        for (metric, value) in &row {
            if metric == "iteration" {
                continue;
            }
            if let Some(v) = value.as_f64() {
                csv.push_str(&format!("{experiment},{mode},{seed},{run},{iteration},{metric},{v}\n"));
            }
        }
    }
    Ok(())
}

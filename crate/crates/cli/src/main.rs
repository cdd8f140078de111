use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dial::checkpoint::{load_checkpoint, save_checkpoint};
use dial::config::{ExperimentConfig, Variant};
use dial::eval::{ablation_tsv, evaluate, export_embeddings, retention_tsv, run_ablation, source_retention};
use dial::gradcheck::run_suite;
use dial::trainer::{resume, train};
use dial::Error;
use serde_json::json;

/// Adversarial domain adaptation with center losses.
#[derive(Parser)]
#[command(name = "dial", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as four CSV files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model; writes a checkpoint and a JSONL report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "report.jsonl")]
        report: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, requires = "start_epoch")]
        resume_from: Option<PathBuf>,
        #[arg(long, requires = "resume_from")]
        start_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint; prints JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the four-variant ladder over several seeds.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, default_value = "ablation.tsv")]
        tsv: PathBuf,
        #[arg(long, default_value = "ablation.json")]
        json: PathBuf,
    },
    /// Source-test accuracy without and with the adversarial term.
    Retention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, default_value = "retention.tsv")]
        tsv: PathBuf,
        #[arg(long, default_value = "retention.json")]
        json: PathBuf,
    },
    /// Write encoded features of every split as CSV (plus SVG when d = 2).
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Config file plus flags overriding its keys.
#[derive(Args)]
struct Common {
    /// TOML file with `[data]` and `[train]` tables; defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct Seeds {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(Failure::Usage)?,
            None => ExperimentConfig::default(),
        };
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.variant {
            t.variant = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.optimizer.lr = v;
        }
        if let Some(v) = self.threshold {
            t.threshold = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        t.validate().map_err(Failure::Usage)?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes `<path>.config.toml` next to a non-JSON artifact.
fn echo_config(path: &Path, cfg: &ExperimentConfig) -> Result<(), Error> {
    let mut name = path.as_os_str().to_owned();
    name.push(".config.toml");
    write(Path::new(&name), &cfg.to_toml_string())
}

fn to_json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { common, out_dir } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            data.write_csv_dir(&out_dir)?;
            write(&out_dir.join("dataset.config.toml"), &cfg.to_toml_string())?;
            println!(
                "wrote {} source_train, {} source_test, {} target_train, {} target_test rows to {}",
                data.source_train.len(),
                data.source_test.len(),
                data.target_train.len(),
                data.target_test.len(),
                out_dir.display()
            );
        }
        Command::Train { common, checkpoint, report, resume_from, start_epoch } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            let out = match (resume_from, start_epoch) {
                (Some(path), Some(epoch)) => resume(&data, &cfg.train, &path, epoch)?,
                _ => train(&data, &cfg.train)?,
            };
            save_checkpoint(&out.params, &out.centers, &checkpoint)?;
            echo_config(&checkpoint, &cfg)?;
            write(&report, &out.report.to_jsonl())?;
            echo_config(&report, &cfg)?;
            if let Some(last) = out.report.last() {
                println!(
                    "epochs={} stop={:?} source_test_acc={:.4} target_test_acc={:.4}",
                    out.report.records.len(),
                    out.report.stop_reason,
                    last.source_test_acc,
                    last.target_test_acc
                );
            }
        }
        Command::Eval { common, checkpoint, out } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            let (params, _) = load_checkpoint(&checkpoint)?;
            let summary = evaluate(&params, &data, cfg.train.threshold, cfg.train.seed)?;
            let text = to_json(&json!({ "config": cfg, "summary": summary }));
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Ablation { common, seeds, tsv, json } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            let results = run_ablation(&data, &cfg.train, &seeds.seeds).map_err(Failure::Usage)?;
            let table = ablation_tsv(&results);
            write(&tsv, &table)?;
            echo_config(&tsv, &cfg)?;
            write(&json, &to_json(&json!({ "config": cfg, "seeds": seeds.seeds, "results": results })))?;
            print!("{table}");
        }
        Command::Retention { common, seeds, tsv, json } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            let report = source_retention(&data, &cfg.train, &seeds.seeds).map_err(Failure::Usage)?;
            let table = retention_tsv(&report);
            write(&tsv, &table)?;
            echo_config(&tsv, &cfg)?;
            write(&json, &to_json(&json!({ "config": cfg, "report": report })))?;
            print!("{table}");
        }
        Command::ExportEmbeddings { common, checkpoint, out } => {
            let cfg = common.load()?;
            let data = cfg.data.build()?;
            let (params, _) = load_checkpoint(&checkpoint)?;
            let export = export_embeddings(&params, &data, &out)?;
            echo_config(&out, &cfg)?;
            println!("wrote {} rows to {}", export.rows, export.csv.display());
            if let Some(svg) = export.svg {
                println!("wrote {}", svg.display());
            }
        }
        Command::GradCheck { draws, seed, tolerance } => {
            let report = run_suite(draws, seed)?;
            for c in &report.cases {
                println!("{:<30} draws={:<3} entries={:<6} max_rel_err={:.3e}", c.name, c.draws, c.entries, c.max_rel_err);
            }
            println!("max_rel_err={:.3e}", report.max_rel_err);
            if !report.passed(tolerance) {
                return Err(Failure::Runtime(Error::Consistency(format!(
                    "max relative error {:.3e} is not below {tolerance:e}",
                    report.max_rel_err
                ))));
            }
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) {
    let message = message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error: kind={kind} message=\"{message}\"");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            error_line("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

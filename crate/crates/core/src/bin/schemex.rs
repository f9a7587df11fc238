use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use schemex::gateway::{Gateway, GatewayConfig, MockScript};
use schemex::pipeline::{self, corpus_files, PipelineError, RunConfig};
use schemex::schema::generate_schema;

#[derive(Parser)]
#[command(name = "schemex", version, about = "Schema-guided extraction over parsed scientific documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate, embed and index Document JSON files into a store file.
    Ingest {
        /// Document files (single JSON object, array or JSON lines); `-` reads stdin.
        /// Defaults to the configured corpus directory.
        docs: Vec<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Store file to write. Defaults to `<output_dir>/store.json`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run the extraction loop for every document of the corpus.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge extraction records into the unified table.
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Score the unified table against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Ingest, extract, aggregate and evaluate in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Schema utilities.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Check a schema file.
    Validate { file: PathBuf },
    /// Draft a schema from a natural-language instruction.
    Generate {
        #[arg(long)]
        instruction: String,
        /// Gateway settings are taken from this run configuration.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock_script: Option<PathBuf>,
        /// Write the schema here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn with_jobs(mut cfg: RunConfig, jobs: Option<usize>) -> Result<RunConfig, PipelineError> {
    if let Some(j) = jobs {
        cfg.jobs = j;
        cfg.check()?;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Ingest { docs, config, store } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let files = match (&cfg, docs.is_empty()) {
                (_, false) => docs,
                (Some(c), true) => corpus_files(&c.corpus_dir)?,
                (None, true) => return Err(PipelineError::Config("give document files or --config".into())),
            };
            let embedder = cfg.as_ref().map(|c| c.embedder.clone()).unwrap_or_default();
            let store = store
                .or_else(|| cfg.as_ref().map(|c| c.paths().store))
                .unwrap_or_else(|| PathBuf::from("store.json"));
            let summary = pipeline::cmd_ingest(&files, &embedder, &store)?;
            for (doc, n) in &summary.per_document {
                println!("{doc}\t{n}");
            }
            println!("{} documents, {} entries -> {}", summary.documents, summary.entries, store.display());
        }
        Command::Extract { common, store, jobs } => {
            let cfg = with_jobs(common.load()?, jobs)?;
            let paths = cfg.paths();
            let store = store.unwrap_or_else(|| paths.store.clone());
            let n = pipeline::cmd_extract(&cfg, &store, &paths)?;
            println!("{n} records -> {}", paths.records.display());
        }
        Command::Aggregate { common, records } => {
            let cfg = common.load()?;
            let paths = cfg.paths();
            let records = records.unwrap_or_else(|| paths.records.clone());
            let n = pipeline::cmd_aggregate(&cfg, &records, &paths)?;
            println!("{n} rows -> {}", paths.table.display());
        }
        Command::Evaluate {
            common,
            table,
            ground_truth,
        } => {
            let cfg = common.load()?;
            let paths = cfg.paths();
            let table = table.unwrap_or_else(|| paths.table.clone());
            pipeline::cmd_evaluate(&cfg, &table, ground_truth.as_deref(), &paths)?;
            print!("{}", read_back(&paths.metrics_text));
        }
        Command::Run { common, jobs } => {
            let cfg = with_jobs(common.load()?, jobs)?;
            let summary = pipeline::run(&cfg)?;
            println!(
                "{} documents, {} entries, {} records, {} rows",
                summary.ingest.documents, summary.ingest.entries, summary.records, summary.rows
            );
            if summary.report.is_some() {
                print!("{}", read_back(&cfg.paths().metrics_text));
            }
        }
        Command::Schema { command } => schema(command)?,
    }
    Ok(())
}

fn read_back(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_default()
}

fn schema(cmd: SchemaCommand) -> Result<(), PipelineError> {
    match cmd {
        SchemaCommand::Validate { file } => {
            let s = pipeline::load_schema(&file)?;
            println!(
                "{}: ok ({} fields, keys: {})",
                s.schema_id,
                s.fields.len(),
                s.key_names().join(", ")
            );
        }
        SchemaCommand::Generate {
            instruction,
            config,
            mock_script,
            out,
        } => {
            let (gateway, profile) = match config {
                Some(p) => {
                    let mut cfg = RunConfig::load(&p)?;
                    if mock_script.is_some() {
                        cfg.mock_script = mock_script;
                    }
                    (cfg.gateway()?, cfg.profile().to_string())
                }
                None => {
                    let script = mock_script
                        .map(|p| MockScript::load(&p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))))
                        .transpose()?;
                    let gc = GatewayConfig::mock_only();
                    let profile = gc.default_profile().unwrap_or("mock").to_string();
                    (Gateway::from_config(&gc, script.as_ref()), profile)
                }
            };
            let generated = generate_schema(&instruction, &gateway, &profile)
                .map_err(|e| PipelineError::Gateway(e.to_string()))?;
            let mut text = serde_json::to_string_pretty(&generated.schema.to_json()).expect("serializable");
            text.push('\n');
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

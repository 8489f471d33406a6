//! Batch front-end: ingest the local corpora and run the three-layer
//! pipeline over a list of contract addresses.
//!
//! Exit codes: 0 on success (whatever the verdicts), 2 on input errors,
//! 3 on data conflicts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use upc_core::chainquery::LoupeFixture;
use upc_core::datastore::{IngestError, Store};
use upc_core::model::Address;
use upc_core::pipeline::{analyze_address, Summary};
use upc_core::proxy::ProxyDetectOptions;
use upc_core::upgradeability::AnalysisOptions;

/// Directory pointed at by this variable provides default corpus paths:
/// traces.jsonl, contracts.jsonl, decompiled/, loupe.jsonl.
const STORE_ENV: &str = "UPC_SENTINEL_STORE";

const EXIT_INPUT: u8 = 2;
const EXIT_CONFLICT: u8 = 3;

#[derive(Parser)]
#[command(name = "upc", version, about = "Upgradeability proxy contract detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpora and print ingest counts.
    Ingest(IngestArgs),
    /// Run the three-layer pipeline over the given addresses.
    Detect(DetectArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Line-delimited JSON trace records.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Line-delimited JSON contract records.
    #[arg(long)]
    contracts: Option<PathBuf>,
    /// Directory of <bytecode_hash>.pan / .failed files.
    #[arg(long)]
    decompiled: Option<PathBuf>,
    /// Line-delimited loupe fixture {diamond, selector, facet}.
    #[arg(long)]
    loupe: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct DetectArgs {
    /// Contract addresses to analyze.
    addresses: Vec<String>,
    /// File with one address per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report file, one JSON record per address in input order.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Recursion cap for chained-proxy analysis.
    #[arg(long, default_value_t = 3)]
    max_depth: u32,
    /// Also consider reverted traces.
    #[arg(long)]
    include_failed_traces: bool,
    /// Disable the empty-calldata delegation match.
    #[arg(long)]
    strict_nonempty_selector: bool,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Byte-reproducible reports: timings move to a sidecar file.
    #[arg(long)]
    deterministic: bool,
    /// Print only the summary table; write no per-address records.
    #[arg(long)]
    summary_only: bool,
}

struct ResolvedCorpus {
    traces: PathBuf,
    contracts: PathBuf,
    decompiled: PathBuf,
    loupe: Option<PathBuf>,
}

fn resolve_corpus(args: &CorpusArgs, allow_env: bool) -> Result<ResolvedCorpus, String> {
    if let (Some(t), Some(c), Some(d)) = (&args.traces, &args.contracts, &args.decompiled) {
        return Ok(ResolvedCorpus {
            traces: t.clone(),
            contracts: c.clone(),
            decompiled: d.clone(),
            loupe: args.loupe.clone(),
        });
    }
    if allow_env {
        if let Ok(dir) = std::env::var(STORE_ENV) {
            let dir = PathBuf::from(dir);
            let loupe = dir.join("loupe.jsonl");
            return Ok(ResolvedCorpus {
                traces: args.traces.clone().unwrap_or_else(|| dir.join("traces.jsonl")),
                contracts: args.contracts.clone().unwrap_or_else(|| dir.join("contracts.jsonl")),
                decompiled: args.decompiled.clone().unwrap_or_else(|| dir.join("decompiled")),
                loupe: args.loupe.clone().or_else(|| loupe.exists().then_some(loupe)),
            });
        }
    }
    Err(format!(
        "--traces, --contracts and --decompiled are required (or set {STORE_ENV} to a store directory)"
    ))
}

fn ingest_exit(err: &IngestError) -> u8 {
    match err {
        IngestError::Conflict { .. } => EXIT_CONFLICT,
        _ => EXIT_INPUT,
    }
}

fn load_store(corpus: &ResolvedCorpus) -> Result<(Store, LoupeFixture, String), u8> {
    let (store, summary) =
        Store::ingest(&corpus.traces, &corpus.contracts, &corpus.decompiled).map_err(|e| {
            eprintln!("error: {e}");
            ingest_exit(&e)
        })?;
    let loupe = match &corpus.loupe {
        Some(path) => LoupeFixture::load(path).map_err(|e| {
            eprintln!("error: {e}");
            EXIT_INPUT
        })?,
        None => LoupeFixture::empty(),
    };
    let summary_json = serde_json::to_string(&summary).expect("summary serializes");
    Ok((store, loupe, summary_json))
}

fn run_ingest(args: IngestArgs) -> Result<(), u8> {
    let corpus = resolve_corpus(&args.corpus, true).map_err(|msg| {
        eprintln!("error: {msg}");
        EXIT_INPUT
    })?;
    let (_, _, summary) = load_store(&corpus)?;
    println!("{summary}");
    Ok(())
}

fn collect_addresses(args: &DetectArgs) -> Result<Vec<Address>, u8> {
    let mut texts: Vec<String> = args.addresses.clone();
    if let Some(input) = &args.input {
        let content = fs::read_to_string(input).map_err(|e| {
            eprintln!("error: cannot read {}: {e}", input.display());
            EXIT_INPUT
        })?;
        texts.extend(content.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
    }
    if texts.is_empty() {
        eprintln!("error: no addresses given (positional or --input)");
        return Err(EXIT_INPUT);
    }
    let mut addresses = Vec::with_capacity(texts.len());
    for text in texts {
        match Address::parse(&text) {
            Ok(a) => addresses.push(a),
            Err(e) => {
                eprintln!("error: {e}");
                return Err(EXIT_INPUT);
            }
        }
    }
    Ok(addresses)
}

fn run_detect(args: DetectArgs) -> Result<(), u8> {
    let corpus = resolve_corpus(&args.corpus, true).map_err(|msg| {
        eprintln!("error: {msg}");
        EXIT_INPUT
    })?;
    let addresses = collect_addresses(&args)?;
    if args.out.is_none() && !args.summary_only {
        eprintln!("error: --out is required unless --summary-only is set");
        return Err(EXIT_INPUT);
    }
    let (store, loupe, _) = load_store(&corpus)?;

    let opts = AnalysisOptions {
        max_depth: args.max_depth,
        proxy: ProxyDetectOptions {
            include_failed_traces: args.include_failed_traces,
            strict_nonempty_selector: args.strict_nonempty_selector,
        },
    };

    let jobs = args.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| {
        eprintln!("error: {e}");
        EXIT_INPUT
    })?;

    let mut records = pool.install(|| {
        use rayon::prelude::*;
        addresses
            .par_iter()
            .map(|a| analyze_address(a, &store, &loupe, &opts))
            .collect::<Vec<_>>()
    });

    let mut summary = Summary::default();
    for r in &records {
        summary.add(r);
    }

    if !args.summary_only {
        let out_path = args.out.as_ref().expect("checked above");
        let mut sidecar_lines = Vec::new();
        let mut lines = String::new();
        for record in &mut records {
            if args.deterministic {
                if let Some(t) = record.strip_timings() {
                    sidecar_lines.push(format!(
                        r#"{{"address":"{}","timings":{}}}"#,
                        record.address,
                        serde_json::to_string(&t).expect("timings serialize")
                    ));
                }
            }
            lines.push_str(&serde_json::to_string(record).expect("record serializes"));
            lines.push('\n');
        }
        write_file(out_path, &lines)?;
        if args.deterministic {
            let sidecar = sidecar_path(out_path);
            write_file(&sidecar, &(sidecar_lines.join("\n") + "\n"))?;
        }
    }

    print!("{}", summary.render());
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timings.jsonl");
    out.with_file_name(name)
}

fn write_file(path: &Path, content: &str) -> Result<(), u8> {
    let mut file = fs::File::create(path).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_INPUT
    })?;
    file.write_all(content.as_bytes()).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_INPUT
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => run_ingest(args),
        Command::Detect(args) => run_detect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

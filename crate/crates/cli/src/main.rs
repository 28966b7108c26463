use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use apifill_core::AdvMethod;
use apifill_core::corpus::pairs_to_jsonl;
use apifill_core::metrics::format_table;
use apifill_core::pipeline::{cmd_complete, cmd_eval, cmd_prepare, cmd_sweep, cmd_train, Overrides};
use apifill_core::RunConfig;
use apifill_core::synth::{ambiguous_corpus, desk_corpus, desk_library, overfit_corpus};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Complete API names from a natural-language query and a known prefix.
#[derive(Parser, Debug)]
#[command(name = "apifill", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML, or JSON with a `.json` extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Adversarial method: none, fgsm, fgm, pgd or atcom.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<AdvMethod>,
    /// Perturbation budget.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Adversarial iterations per batch.
    #[arg(long = "k-adv", global = true)]
    k_adv: Option<usize>,
    /// Weight of the L1-normalized direction in the combined perturbation.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Beam width used when decoding.
    #[arg(long = "beam-width", global = true)]
    beam_width: Option<usize>,
    /// File of valid API names, one per line.
    #[arg(long = "api-library", global = true)]
    api_library: Option<PathBuf>,
    /// Directory for all artifacts of a run.
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,
    /// Query/API pairs as JSON lines.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the corpus, train the vocabulary and write prompted datasets.
    Prepare,
    /// Train on prepared data and keep the best-validation checkpoint.
    Train,
    /// Score the test split, with and without the library filter.
    Eval {
        /// Known prefix length in words for every query; random if unset.
        #[arg(long = "prefix-words")]
        prefix_words: Option<usize>,
        /// Print the aligned table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Rank completions for one query.
    Complete {
        #[arg(long)]
        query: String,
        /// Known leading words of the API, dot separated.
        #[arg(long, default_value = "")]
        prefix: String,
        /// Number of candidates to print.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Train and evaluate every configured method and prefix mode.
    Sweep {
        /// Iteration counts tried for pgd and atcom, comma separated.
        #[arg(long = "k-values", value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        #[arg(long = "methods", value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<AdvMethod>>,
        #[arg(long = "max-epochs")]
        max_epochs: Option<usize>,
        #[arg(long)]
        table: bool,
    },
    /// Print the fully resolved configuration as TOML.
    Config,
    /// Write a generated corpus (and optionally its API library).
    GenCorpus {
        #[arg(long, value_enum, default_value_t = CorpusKind::Desk)]
        kind: CorpusKind,
        /// Pairs for `desk`, queries for `ambiguous`; ignored for `overfit`.
        #[arg(long, default_value_t = 300)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusKind {
    Desk,
    Overfit,
    Ambiguous,
}

fn parse_method(s: &str) -> Result<AdvMethod, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = AdvMethod::ALL.iter().map(|m| m.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            method: self.method,
            epsilon: self.epsilon,
            k_adv: self.k_adv,
            alpha: self.alpha,
            beam_width: self.beam_width,
            api_library: self.api_library.clone(),
            out_dir: self.out_dir.clone(),
            corpus: self.corpus.clone(),
        });
        if let Some(lib) = &cfg.paths.api_library {
            if !lib.is_file() {
                bail!("API library {} does not exist", lib.display());
            }
        }
        Ok(cfg)
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_atomic(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn gen_corpus(kind: CorpusKind, size: usize, seed: u64, out: &PathBuf, library: Option<&PathBuf>) -> Result<()> {
    let pairs = match kind {
        CorpusKind::Desk => desk_corpus(size, seed),
        CorpusKind::Overfit => overfit_corpus(seed),
        CorpusKind::Ambiguous => ambiguous_corpus(size, seed),
    };
    write_atomic(out, &pairs_to_jsonl(&pairs))?;
    if let Some(lib) = library {
        let mut names = desk_library(seed);
        names.extend(pairs.iter().map(|p| p.api.clone()));
        names.sort();
        names.dedup();
        write_atomic(lib, &(names.join("\n") + "\n"))?;
    }
    print_json(&serde_json::json!({
        "corpus": out,
        "pairs": pairs.len(),
        "library": library,
    }))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.common.resolve()?;
    match cli.command {
        Command::Prepare => print_json(&cmd_prepare(&cfg)?),
        Command::Train => print_json(&cmd_train(&cfg)?),
        Command::Eval { prefix_words, table } => {
            if prefix_words.is_some() {
                cfg.eval.prefix_words = prefix_words;
            }
            let out = cmd_eval(&cfg)?;
            if table {
                emit(&format_table(&out.reports))
            } else {
                print_json(&out)
            }
        }
        Command::Complete { query, prefix, top } => print_json(&cmd_complete(&cfg, &query, &prefix, top)?),
        Command::Sweep {
            k_values,
            methods,
            max_epochs,
            table,
        } => {
            if let Some(k) = k_values {
                cfg.sweep.k_values = k;
            }
            if let Some(m) = methods {
                cfg.sweep.methods = m;
            }
            if max_epochs.is_some() {
                cfg.sweep.max_epochs = max_epochs;
            }
            let out = cmd_sweep(&cfg)?;
            if table {
                emit(&out.table())
            } else {
                print_json(&out)
            }
        }
        Command::Config => {
            cfg.validate()?;
            emit(&cfg.to_toml())
        }
        Command::GenCorpus {
            kind,
            size,
            out,
            library,
        } => gen_corpus(kind, size, cfg.seed, &out, library.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their source text; skip repeats.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

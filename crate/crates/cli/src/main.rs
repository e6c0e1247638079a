mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{parse_override, Override};

#[derive(Debug, Parser)]
#[command(name = "commer", version, about = "Train and evaluate compress-and-merge personalization on a frozen backbone")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file; its keys mirror the config struct of the subcommand.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lora.rank=16`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<Override>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Task {
    Skill,
    Knowledge,
    /// Multi-document auto-encoding examples over a generic corpus.
    Pretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    /// Perplexity against prompt tokens per method, with the budget crossover.
    Tradeoff,
    /// Power-law fit of perplexity against the document count.
    Scaling,
    /// Train/test document-count generalization matrix.
    Matrix,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset as train/val/test JSONL.
    GenData {
        task: Task,
        #[arg(long)]
        users: Option<usize>,
        /// Documents per user (skill), per example (knowledge) or the most
        /// per example (pretrain).
        #[arg(long)]
        docs: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a backbone on next-token prediction and freeze it.
    PretrainBackbone {
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// One epoch of ComMer multi-document auto-encoding pretraining.
    Pretrain {
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Output of `gen-data pretrain`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune one method; writes ckpt.bin and trace.csv.
    Train {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start the trainable tensors from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run directory; defaults to the config path without its extension.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained run; writes results.csv.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Test-time document counts; defaults to the training count.
        #[arg(long, value_delimiter = ',')]
        n_docs: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also decode greedily and score ROUGE-L.
        #[arg(long)]
        rouge: bool,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        /// Seed of the per-example document selection.
        #[arg(long, default_value_t = 0)]
        doc_seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<run>/eval`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Per-user compression stores.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Greedy generation for one instruction.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        x: String,
        /// Raw documents to compress and merge. Repeatable.
        #[arg(long)]
        doc: Vec<String>,
        /// Use a stored aggregate instead of raw documents.
        #[arg(long, requires = "user")]
        store_root: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
    },
    /// Aggregate results.csv files found under a runs directory.
    Report {
        kind: ReportKind,
        #[arg(long)]
        runs: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "commer")]
        method: String,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value = "quality against prompt budget")]
        title: String,
    },
}

#[derive(Debug, Subcommand)]
enum StoreCmd {
    /// Compress documents and fold them into a user's running mean.
    Add {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        doc: Vec<String>,
        /// Files whose whole contents are one document each.
        #[arg(long)]
        doc_file: Vec<PathBuf>,
        /// Keep document texts so the store can be audited.
        #[arg(long)]
        retain_text: bool,
    },
    Show {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        user: String,
    },
    /// Recompress retained texts and compare with the stored mean.
    Audit {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("COMMER_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("COMMER_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    threads()?;
    match cmd {
        Cmd::GenData { task, users, docs, out, common } => commands::gen_data(task, users, docs, &out, &common),
        Cmd::PretrainBackbone { out, common } => commands::pretrain_backbone(&out, &common),
        Cmd::Pretrain { backbone, data, out, common } => commands::pretrain(backbone, data, out, &common),
        Cmd::Train { backbone, data, init, out, common } => commands::train(backbone, data, init, out, &common),
        Cmd::Eval { run, n_docs, split, rouge, max_new_tokens, doc_seed, data, out } => {
            commands::eval(&run, &n_docs, &split, rouge.then_some(max_new_tokens), doc_seed, data, out)
        }
        Cmd::Store(StoreCmd::Add { root, user, run, doc, doc_file, retain_text }) => {
            commands::store_add(&root, &user, &run, doc, &doc_file, retain_text)
        }
        Cmd::Store(StoreCmd::Show { root, user }) => commands::store_show(&root, &user),
        Cmd::Store(StoreCmd::Audit { root, user, run, tolerance }) => commands::store_audit(&root, &user, &run, tolerance),
        Cmd::Generate { run, x, doc, store_root, user, max_new_tokens } => {
            commands::generate(&run, &x, &doc, store_root.as_deref().zip(user.as_deref()), max_new_tokens)
        }
        Cmd::Report { kind, runs, out, method, m, title } => commands::report(kind, &runs, &out, &method, m, &title),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blue_core::pipeline::{
    encode_stats, generate_synthetic, load_jsonl, load_pretrained, pretrain, save_pretrained, split_dataset,
    write_embeddings, write_history_csv, write_jsonl, RunConfig,
};
use blue_core::preprocess::preprocess_all;
use blue_core::tasks::{build_msts_sets, embed_trajectories, eval_msts, finetune_classify, finetune_tte, EpochRecord};
use blue_core::Trajectory;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "blue", version, about = "Trajectory representation learning with blurred encoding")]
struct Cli {
    /// Seed for every component; overrides the seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file (see `blue config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Fail on the first malformed input line instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print every config key with its effective value.
    Config,
    /// Drift removal, redundancy reduction and length filters.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average and maximum sequence length at each pyramid level.
    EncodeStats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Reconstruction pretraining; writes the best-epoch checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV. Defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fine-tune a pretrained encoder on a downstream task.
    Finetune {
        task: Task,
        #[command(flatten)]
        io: FinetuneIo,
    },
    /// Evaluate a pretrained encoder.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// One representation vector per trajectory.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// Config file with `synth.*` keys, applied after `--config`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    /// Travel time estimation.
    Tte,
    /// Trajectory classification by label.
    Cls,
}

#[derive(Args)]
struct FinetuneIo {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-epoch metric CSV. Defaults to `<ckpt>.<task>.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalKind {
    /// Most-similar-trajectory search with downsampled query variants.
    Msts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n_query: Option<usize>,
        #[arg(long)]
        n_db: Option<usize>,
        #[arg(long)]
        drop_ratio: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn load(path: &Path, strict: bool) -> Result<Vec<Trajectory>> {
    let report = load_jsonl(path, strict).with_context(|| format!("loading {}", path.display()))?;
    if !report.skipped.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.skipped.len());
    }
    log::info!("{}: {} trajectories", path.display(), report.trajectories.len());
    Ok(report.trajectories)
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// `epoch,train_loss,<metrics...>` with metric columns in name order.
fn write_records_csv<M: serde::Serialize>(path: &Path, records: &[EpochRecord<M>]) -> Result<()> {
    let rows: Vec<serde_json::Map<String, Value>> = records
        .iter()
        .map(|r| match serde_json::to_value(r) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(other) => bail!("epoch record serialized to {other}"),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_>>()?;
    let mut cols = vec!["epoch".to_string(), "train_loss".to_string()];
    if let Some(first) = rows.first() {
        cols.extend(first.keys().filter(|k| !cols.contains(k)).cloned().collect::<Vec<_>>());
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{}", cols.join(","))?;
    for row in &rows {
        let cells: Vec<String> = cols.iter().map(|c| row.get(c).map_or(String::new(), Value::to_string)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let strict = cli.strict;
    match cli.command {
        Command::Config => print!("{}", cfg.render()),
        Command::Preprocess { input, out } => {
            let trajs = load(&input, strict)?;
            let n_in = trajs.len();
            let kept = preprocess_all(trajs, &cfg.preprocess, cfg.precisions);
            write_jsonl(&out, &kept)?;
            log::info!("kept {} of {n_in} trajectories", kept.len());
            print_json(&json!({ "input": n_in, "kept": kept.len() }))?;
        }
        Command::EncodeStats { input } => {
            let trajs = load(&input, strict)?;
            print_json(&serde_json::to_value(encode_stats(&trajs, cfg.precisions)?)?)?;
        }
        Command::Pretrain { data, out, history } => {
            let trajs = load(&data, strict)?;
            let [train, val, test] = split_dataset(&trajs, cfg.train.split, cfg.train.seed);
            let outcome = pretrain(&train, &val, &cfg.model, &cfg.train, cfg.d_max, cfg.precisions)?;
            save_pretrained(&out, &outcome.best)?;
            let history = history.unwrap_or_else(|| out.with_extension("csv"));
            write_history_csv(&history, &outcome.history)?;
            print_json(&json!({
                "checkpoint": out,
                "history": history,
                "n_train": train.len(),
                "n_val": val.len(),
                "n_test": test.len(),
                "best_epoch": outcome.best.card.best_epoch,
                "best_loss": outcome.best.card.best_loss,
            }))?;
        }
        Command::Finetune { task, io } => {
            let pre = load_pretrained(&io.ckpt)?;
            let trajs = load(&io.data, strict)?;
            let [train, _, test] = split_dataset(&trajs, cfg.train.split, cfg.train.seed);
            let card = &pre.card;
            let (name, report) = match task {
                Task::Tte => {
                    let o = finetune_tte(&pre.model, card.bbox, card.precisions, &train, &test, &cfg.finetune)?;
                    let path = io.history.clone().unwrap_or_else(|| io.ckpt.with_extension("tte.csv"));
                    write_records_csv(&path, &o.history)?;
                    ("tte", serde_json::to_value(o.report)?)
                }
                Task::Cls => {
                    let o = finetune_classify(&pre.model, card.bbox, card.precisions, &train, &test, &cfg.finetune)?;
                    let path = io.history.clone().unwrap_or_else(|| io.ckpt.with_extension("cls.csv"));
                    write_records_csv(&path, &o.history)?;
                    ("cls", serde_json::to_value(o.report)?)
                }
            };
            print_json(&json!({ "task": name, "n_train": train.len(), "n_test": test.len(), "report": report }))?;
        }
        Command::Eval {
            kind: EvalKind::Msts { ckpt, data, n_query, n_db, drop_ratio },
        } => {
            let pre = load_pretrained(&ckpt)?;
            let trajs = load(&data, strict)?;
            let n_query = n_query.unwrap_or(cfg.msts.n_query);
            let n_db = n_db.unwrap_or(cfg.msts.n_db);
            let drop_ratio = drop_ratio.unwrap_or(cfg.msts.drop_ratio);
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let sets = build_msts_sets(&trajs, n_query, n_db, drop_ratio, seed)?;
            let card = &pre.card;
            let batch = cfg.train.batch_size;
            let q = embed_trajectories(&pre.model, &sets.queries, &card.bbox, card.precisions, batch)?;
            let db = embed_trajectories(&pre.model, &sets.database, &card.bbox, card.precisions, batch)?;
            let r = eval_msts(&q, &db, &sets.truth)?;
            print_json(&json!({
                "mr": r.mr,
                "hr1": r.hr1,
                "hr5": r.hr5,
                "n_query": n_query,
                "n_db": n_db,
                "seed": seed,
            }))?;
        }
        Command::Embed { ckpt, input, out } => {
            let pre = load_pretrained(&ckpt)?;
            let trajs = load(&input, strict)?;
            let card = &pre.card;
            let vectors = embed_trajectories(&pre.model, &trajs, &card.bbox, card.precisions, cfg.train.batch_size)?;
            let ids: Vec<String> = trajs.iter().map(|t| t.id.clone()).collect();
            write_embeddings(&out, &ids, &vectors)?;
            print_json(&json!({ "count": vectors.len(), "d": card.model.d, "out": out }))?;
        }
        Command::Synth { spec, out } => {
            let mut cfg = cfg;
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply(&text).with_context(|| format!("in {}", path.display()))?;
                if let Some(seed) = cli.seed {
                    cfg.synth.seed = seed;
                }
            }
            let trajs = generate_synthetic(&cfg.synth)?;
            write_jsonl(&out, &trajs)?;
            print_json(&json!({ "count": trajs.len(), "seed": cfg.synth.seed, "out": out }))?;
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

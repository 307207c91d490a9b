use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use forgekey_core::checkpoint::write_atomic;
use forgekey_core::datagen::{generate, sample_forget};
use forgekey_core::harness::{accuracy, evaluate_unlearning};
use forgekey_core::inference::{predict_batch, FusionStrategy, StrategyKind};
use forgekey_core::{trainer, Checkpoint, Dataset, Error, Result, Split};

mod config;
mod export;

use config::{seed_override, RunConfig};

#[derive(Parser)]
#[command(name = "forgekey", version, about = "Exemplar-memory classifier with zero-shot unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and its exemplar memory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave these ids out of training entirely (a retrain oracle).
        #[arg(long)]
        forget_ids: Option<PathBuf>,
    },
    /// Delete memory entries; model weights are left untouched.
    Unlearn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        forget_ids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn, then report TA/RA/FA, MIA AUROC and the gap to an oracle.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forget_ids: PathBuf,
        #[arg(long, default_value = "ensemble")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write CSV and SVG artifacts.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        kind: ExportKind,
        #[arg(long)]
        out: PathBuf,
        /// Required for `neighbors`.
        #[arg(long)]
        forget_ids: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        /// Test samples added to the forget ids as `neighbors` queries.
        #[arg(long, default_value_t = 16)]
        test_queries: usize,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Ensemble,
    Softmax,
    Rank,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Ensemble => Self::Ensemble,
            StrategyArg::Softmax => Self::SoftmaxToken,
            StrategyArg::Rank => Self::RankToken,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Tokens2d,
    Neighbors,
    Curves,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Range(_) | Error::Contract(_) => 2,
        Error::Data(_) | Error::UnknownId(_) | Error::StaleSample(_) | Error::EmptyInput(_) | Error::EmptyMemory => 3,
        Error::Format(_) => 4,
        _ => 1,
    }
}

fn read_ids(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read ids file {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: `{}` is not a sample id", path.display(), n + 1, l.trim())))
        })
        .collect()
}

fn write_ids(path: &Path, ids: &[u64]) -> Result<()> {
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    write_atomic(path, text.as_bytes())
}

fn import(dir: &Path) -> Result<Dataset> {
    Dataset::import(dir).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read dataset {}: {io}", dir.display())),
        other => other,
    })
}

fn train(config: &Path, out: &Path, forget_ids: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = match &cfg.run.data_dir {
        Some(dir) => import(dir)?,
        None => generate(&cfg.run.data)?,
    };
    if let Some(dir) = &cfg.run.data_out {
        data.export(dir)?;
    }
    if let Some(path) = &cfg.run.forget_out {
        write_ids(path, &sample_forget(&data, cfg.run.forget_rate, cfg.run.stratified, cfg.train.seed)?)?;
    }
    let data = match forget_ids {
        Some(p) => data.without(&read_ids(p)?)?,
        None => data,
    };

    let start = Instant::now();
    let ckpt = trainer::train_with(&cfg.train, &data, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val {:.2}%  lr {:.2e}  p_s {:.4}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_acc,
            r.lr,
            r.p_s_probe,
            start.elapsed().as_secs_f64()
        )
    })?;
    ckpt.save(out)?;
    let csv = cfg.run.history_csv.clone().unwrap_or_else(|| out.with_extension("csv"));
    write_atomic(&csv, ckpt.history_csv().as_bytes())?;

    let val = data.split_ids(Split::Val);
    if !val.is_empty() {
        let images = val.iter().map(|&id| data.image(id)).collect::<Result<Vec<_>>>()?;
        let preds = predict_batch(images.into_iter(), &ckpt.params, &ckpt.encoder, &ckpt.memory, &cfg.fusion())?;
        let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
        let labels = val.iter().map(|&id| data.label(id)).collect::<Result<Vec<_>>>()?;
        println!("val accuracy {:.2}% ({:?}, k={})", accuracy(&classes, &labels)?, cfg.run.strategy, cfg.run.k);
    }
    println!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

fn unlearn(ckpt: &Path, forget_ids: &Path, out: &Path) -> Result<()> {
    let mut c = Checkpoint::load(ckpt)?;
    let ids = read_ids(forget_ids)?;
    let start = Instant::now();
    let removed = c.memory.delete(&ids)?;
    let secs = start.elapsed().as_secs_f64();
    c.save(out)?;
    println!("deleted {removed} entries in {secs:.6} s ({} live)", c.memory.live_count());
    Ok(())
}

fn eval(
    ckpt: &Path,
    oracle: Option<&Path>,
    data: &Path,
    forget_ids: &Path,
    strategy: FusionStrategy,
    report: Option<&Path>,
) -> Result<()> {
    strategy.validate()?;
    let method = Checkpoint::load(ckpt)?;
    let oracle = oracle.map(Checkpoint::load).transpose()?;
    let data = import(data)?;
    export::check_shape(&method, &data)?;
    let forget = read_ids(forget_ids)?;
    let seed = seed_override()?.unwrap_or(method.config.seed);
    let r = evaluate_unlearning(&method, oracle.as_ref(), &data, &forget, &strategy, seed)?;
    let json = r.to_json();
    if let Some(path) = report {
        write_atomic(path, format!("{json}\n").as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let spec = config::load_spec(spec)?;
    let data = generate(&spec)?;
    data.export(out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        data.len(),
        data.split_ids(Split::Train).len(),
        data.split_ids(Split::Val).len(),
        data.split_ids(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, forget_ids } => train(&config, &out, forget_ids.as_deref()),
        Command::Unlearn { ckpt, forget_ids, out } => unlearn(&ckpt, &forget_ids, &out),
        Command::Eval { ckpt, oracle, data, forget_ids, strategy, k, tau, report } => eval(
            &ckpt,
            oracle.as_deref(),
            &data,
            &forget_ids,
            FusionStrategy { kind: strategy.into(), k, tau },
            report.as_deref(),
        ),
        Command::Export { ckpt, data, kind, out, forget_ids, k, tau, test_queries } => {
            let c = Checkpoint::load(&ckpt)?;
            std::fs::create_dir_all(&out)?;
            let need_data = || -> Result<Dataset> {
                import(data.as_deref().ok_or_else(|| Error::Config("--data is required for this export".into()))?)
            };
            let rows = match kind {
                ExportKind::Tokens2d => export::tokens2d(&c, &need_data()?, &out)?,
                ExportKind::Neighbors => {
                    let ids = forget_ids
                        .as_deref()
                        .ok_or_else(|| Error::Config("--forget-ids is required for neighbors".into()))?;
                    let strategy = FusionStrategy { kind: StrategyKind::Ensemble, k, tau };
                    strategy.validate()?;
                    export::neighbors(&c, &need_data()?, &read_ids(ids)?, &strategy, test_queries, &out)?
                }
                ExportKind::Curves => export::curves(&c, &out)?,
            };
            println!("exported {rows} rows to {}", out.display());
            Ok(())
        }
        Command::GenData { spec, out } => gen_data(&spec, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipegnn::batching::SplitStrategy;
use pipegnn::harness::{self, check_grad, resolve_dataset, write_benchmark, Mode, ProbeKind, RunConfig};
use pipegnn::Error;

/// Pipeline-parallel GAT training and benchmarking.
#[derive(Parser, Debug)]
#[command(name = "pipegnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write report.json and epochs.csv.
    Train(RunArgs),
    /// Run single mode plus a grid of chunk counts and strategies.
    Benchmark(BenchArgs),
    /// Finite-difference gradient check of a layer.
    CheckGrad {
        /// gat, model or mlp.
        #[arg(long, default_value = "gat")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print dataset statistics and split sizes.
    Inspect {
        #[arg(long)]
        dataset: String,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or `synthetic[:seed]`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// single or pipeline. Giving --balance or --chunks implies pipeline.
    #[arg(long)]
    mode: Option<String>,
    /// Layers per device, e.g. 1,2,1,2.
    #[arg(long, value_delimiter = ',')]
    balance: Option<Vec<usize>>,
    #[arg(long)]
    chunks: Option<usize>,
    /// sequential or random_permuted.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rebuild_delay_ms: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    balance: Option<Vec<usize>>,
    /// Chunk counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    chunks: Vec<usize>,
    /// Strategies to sweep.
    #[arg(long, value_delimiter = ',', default_value = "sequential")]
    strategy: Vec<String>,
    #[arg(long)]
    rebuild_delay_ms: Option<f64>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

fn read_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_config(a: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = &a.balance {
        cfg.pipeline.balance = b.clone();
        cfg.mode = Mode::Pipeline;
    }
    if let Some(c) = a.chunks {
        cfg.pipeline.chunks = c;
        cfg.mode = Mode::Pipeline;
    }
    if let Some(m) = &a.mode {
        cfg.mode = match m.as_str() {
            "single" => Mode::Single,
            "pipeline" => Mode::Pipeline,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        };
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(d) = a.rebuild_delay_ms {
        cfg.rebuild_delay_ms = d;
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if cfg.dataset.is_empty() {
        return Err(Error::Config("no dataset given (use --dataset)".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &RunArgs) -> Result<(), Error> {
    let cfg = run_config(a)?;
    let r = harness::train(&cfg)?;
    println!(
        "{} {} chunks={} epochs={}: loss {:.4}, train {:.4}, val {:.4}, test {:.4}",
        r.dataset,
        cfg.mode,
        cfg.effective_chunks(),
        r.epochs.len(),
        r.train_loss,
        r.train_acc,
        r.val_acc,
        r.test_acc
    );
    println!(
        "epoch 1 {:.4} s, epochs 2+ {:.4} s, avg {:.4} s; rebuilds/epoch {}; edge retention {:.4}",
        r.epoch1_s, r.epochs_rest_s, r.avg_epoch_s, r.rebuilds_per_epoch, r.edge_retention
    );
    if let Some(out) = &cfg.out {
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn benchmark(a: &BenchArgs) -> Result<(), Error> {
    let base = run_config(&RunArgs {
        config: a.config.clone(),
        dataset: a.dataset.clone(),
        epochs: a.epochs,
        seed: a.seed,
        mode: Some("single".into()),
        balance: None,
        chunks: None,
        strategy: None,
        rebuild_delay_ms: a.rebuild_delay_ms,
        out: None,
    })?;
    let strategies: Vec<SplitStrategy> = a.strategy.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    if a.chunks.contains(&0) {
        return Err(Error::InvalidChunks { chunks: 0, n: 0 });
    }
    let mut grid = vec![base.clone()];
    for &strategy in &strategies {
        for &chunks in &a.chunks {
            let mut cfg = base.clone();
            cfg.mode = Mode::Pipeline;
            cfg.strategy = strategy;
            cfg.pipeline.chunks = chunks;
            if let Some(b) = &a.balance {
                cfg.pipeline.balance = b.clone();
            }
            grid.push(cfg);
        }
    }
    let outcome = harness::benchmark(&grid)?;
    write_benchmark(&outcome, &a.out)?;
    println!("{:<9} {:>7} {:<15} {:>9} {:>7} {:>7} {:>7} {:>9}", "mode", "chunks", "strategy", "avg_s", "train", "val", "test", "retention");
    for row in &outcome.rows {
        match &row.error {
            Some(e) => println!("{:<9} {:>7} {:<15} failed: {e}", row.framework_mode, row.chunks, row.strategy),
            None => println!(
                "{:<9} {:>7} {:<15} {:>9.4} {:>7.4} {:>7.4} {:>7.4} {:>9.4}",
                row.framework_mode,
                row.chunks,
                row.strategy,
                row.avg_epoch_s.unwrap_or(f64::NAN),
                row.train_acc.unwrap_or(f64::NAN),
                row.val_acc.unwrap_or(f64::NAN),
                row.test_acc.unwrap_or(f64::NAN),
                row.edge_retention.unwrap_or(f64::NAN)
            ),
        }
    }
    println!("tables written to {}", a.out.display());
    Ok(())
}

fn check(layer: &str, seed: u64) -> Result<bool, Error> {
    let kind: ProbeKind = layer.parse()?;
    let gc = check_grad(kind, seed)?;
    println!(
        "{layer}: max relative error {:.3e} over {} entries",
        gc.max_rel_err, gc.entries
    );
    Ok(gc.max_rel_err < 1e-4)
}

fn inspect(dataset: &str) -> Result<(), Error> {
    let ds = resolve_dataset(dataset)?;
    let g = ds.graph();
    let (tr, va, te) = ds.split_sizes();
    println!("name: {}", ds.name());
    println!("n={} m(undirected)={} C={}", ds.num_nodes(), ds.edge_file_entries(), ds.num_classes());
    println!("distinct undirected edges after dedup: {}", g.num_undirected_edges());
    println!("stored entries incl. self-loops: {}", g.num_entries());
    println!("features: {}", ds.num_features());
    println!("splits: train={tr} val={va} test={te}");
    Ok(())
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIPEGNN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Inspect { dataset } => inspect(dataset),
        Command::CheckGrad { layer, seed } => match check(layer, *seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}

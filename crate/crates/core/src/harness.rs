//! Training loop, run reports and benchmark grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::batching::{partition_ids, SplitPlan, SplitStrategy};
use crate::dataset::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gat::{GatLayer, HeadMode};
use crate::model::{BatchTuple, GatModelConfig, Layer, LayerSeq, RebuildSpan, StepCtx};
use crate::nn::{grad_check, masked_nll_loss, Adam, AdamConfig, Differentiable, GradCheck, Param};
use crate::rng::RngStream;
use crate::pipeline::{bubble_stats, partition_model, BubbleStats, Pipeline, PipelineConfig, RebuildStats};
use crate::synth::CitationLike;
use crate::tensor::Tensor2D;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Pipeline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Pipeline => "pipeline",
        })
    }
}

/// Everything that determines a run. Serialized as JSON for `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory, or `synthetic[:seed]` for the built-in generator.
    pub dataset: String,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub pipeline: PipelineConfig,
    pub strategy: SplitStrategy,
    pub adam: AdamConfig,
    pub model: GatModelConfig,
    /// Sleep added to every sub-graph rebuild, in milliseconds.
    pub rebuild_delay_ms: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            epochs: 300,
            seed: 0,
            mode: Mode::Single,
            pipeline: PipelineConfig {
                balance: vec![1, 2, 1, 2],
                chunks: 1,
            },
            strategy: SplitStrategy::Sequential,
            adam: AdamConfig::default(),
            model: GatModelConfig::default(),
            rebuild_delay_ms: 0.0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.pipeline.chunks == 0 {
            return Err(Error::InvalidChunks { chunks: 0, n: 0 });
        }
        if !(self.rebuild_delay_ms >= 0.0 && self.rebuild_delay_ms.is_finite()) {
            return Err(Error::Config(format!("rebuild_delay_ms = {}", self.rebuild_delay_ms)));
        }
        if self.model.hidden_heads == 0 || self.model.hidden_dim == 0 || self.model.out_heads == 0 {
            return Err(Error::Config("head counts and widths must be positive".into()));
        }
        Ok(())
    }

    /// Chunk count actually used; single mode never splits.
    pub fn effective_chunks(&self) -> usize {
        match self.mode {
            Mode::Single => 1,
            Mode::Pipeline => self.pipeline.chunks,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            strategy: self.strategy,
            chunks: self.effective_chunks(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_ms: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub dataset: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub epoch1_s: f64,
    /// Total time of epochs 2..E.
    pub epochs_rest_s: f64,
    /// Mean time of epochs 2..E, or of epoch 1 when E = 1.
    pub avg_epoch_s: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub edge_retention: f64,
    pub rebuilds: RebuildStats,
    pub rebuilds_per_epoch: f64,
    /// Per-device bubble of the last epoch; absent in single mode.
    pub bubble: Option<BubbleStats>,
    /// Mean over epochs of the device-averaged bubble fraction.
    pub bubble_frac: Option<f64>,
}

impl RunReport {
    /// Mean epoch time recomputed from the records.
    pub fn recompute_avg_epoch_s(&self) -> f64 {
        let t: Vec<f64> = self.epochs.iter().map(|e| e.wall_ms / 1e3).collect();
        if t.len() == 1 {
            t[0]
        } else {
            t[1..].iter().sum::<f64>() / (t.len() - 1) as f64
        }
    }
}

/// Argmax-match rate over the masked rows; ties go to the lowest class.
pub fn accuracy(logp: &Tensor2D, labels: &[i64], mask: &[bool]) -> Result<f64> {
    if labels.len() != logp.rows() || mask.len() != logp.rows() {
        return Err(Error::shape("accuracy", "labels and mask must cover every row"));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for (i, (&m, &l)) in mask.iter().zip(labels).enumerate() {
        if !m {
            continue;
        }
        total += 1;
        let row = logp.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best as i64 == l {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hit as f64 / total as f64)
}

/// Loads a dataset directory, or generates one for `synthetic[:seed]`.
pub fn resolve_dataset(name: &str) -> Result<Dataset> {
    if let Some(rest) = name.strip_prefix("synthetic") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic seed {s:?}")))?,
            None if rest.is_empty() => 0,
            None => return load_dataset(name),
        };
        return CitationLike::default().generate(seed);
    }
    load_dataset(name)
}

enum Engine {
    Single(LayerSeq),
    Pipe(Pipeline),
}

impl Engine {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Engine::Single(s) => s.params_mut(),
            Engine::Pipe(p) => p.params_mut(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Engine::Single(s) => s.params(),
            Engine::Pipe(p) => p.params(),
        }
    }

    fn predict(&self, feats: &Tensor2D, seed: u64) -> Result<Tensor2D> {
        match self {
            Engine::Single(s) => s.predict(feats, seed),
            Engine::Pipe(p) => p.predict(feats, seed),
        }
    }
}

fn param_norms(engine: &Engine) -> String {
    engine
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| format!("p{i}: |w|={:.3e} |g|={:.3e}", p.value.frobenius_norm(), p.grad.frobenius_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains on the dataset named in `cfg` and writes the report if `cfg.out`
/// is set.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = resolve_dataset(&cfg.dataset)?;
    let report = train_on(&ds, cfg)?;
    if let Some(out) = &cfg.out {
        write_report(&report, out)?;
    }
    Ok(report)
}

/// Trains on an already loaded dataset.
pub fn train_on(ds: &Dataset, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let graph = Arc::new(ds.graph().clone());
    let seq = LayerSeq::gat(&cfg.model, Arc::clone(&graph), ds.num_features(), ds.num_classes(), cfg.seed)?;
    let mut engine = match cfg.mode {
        Mode::Single => Engine::Single(seq),
        Mode::Pipeline => Engine::Pipe(partition_model(seq, &cfg.pipeline.balance)?),
    };
    let plan = cfg.split_plan();
    let edge_retention = graph.edge_retention(&partition_ids(ds.num_nodes(), &plan)?)?;
    let batch = BatchTuple::full(ds.features().clone());
    let mut adam = Adam::new(cfg.adam);
    let delay = Duration::from_secs_f64(cfg.rebuild_delay_ms / 1e3);

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut rebuilds = RebuildStats::default();
    let mut bubble = None;
    let mut bubble_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let ctx = StepCtx {
            seed: cfg.seed,
            step: epoch as u64,
            training: true,
            rebuild_delay: delay,
        };
        let start = Instant::now();
        let loss = match &mut engine {
            Engine::Single(seq) => {
                seq.zero_grad();
                let mut spans: Vec<RebuildSpan> = Vec::new();
                let (out, caches) = seq.forward(batch.clone(), &ctx, &mut spans)?;
                let (loss, dlogp) = masked_nll_loss(&out.feats, ds.labels(), ds.train_mask())?;
                seq.backward(&caches, &dlogp)?;
                rebuilds.count += spans.len();
                rebuilds.total_s += spans.iter().map(|s| (s.end - s.start).as_secs_f64()).sum::<f64>();
                loss
            }
            Engine::Pipe(pipe) => {
                pipe.zero_grad();
                let rep = pipe.step(&batch, ds.labels(), ds.train_mask(), &plan, &ctx)?;
                rebuilds.add(&rep.rebuilds);
                let b = bubble_stats(&rep.timeline)?;
                bubble_sum += b.mean();
                bubble = Some(b);
                rep.loss
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                diagnostic: param_norms(&engine),
            });
        }
        adam.step(&mut engine.params_mut())?;
        let wall = start.elapsed();

        let logp = engine.predict(ds.features(), cfg.seed)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            wall_ms: wall.as_secs_f64() * 1e3,
            train_loss: loss,
            train_acc: accuracy(&logp, ds.labels(), ds.train_mask())?,
            val_acc: accuracy(&logp, ds.labels(), ds.val_mask())?,
        };
        log::debug!(
            "epoch {:>4} loss {:.4} train {:.4} val {:.4} ({:.1} ms)",
            rec.epoch,
            rec.train_loss,
            rec.train_acc,
            rec.val_acc,
            rec.wall_ms
        );
        records.push(rec);
    }

    let logp = engine.predict(ds.features(), cfg.seed)?;
    let test_acc = accuracy(&logp, ds.labels(), ds.test_mask())?;
    let last = records.last().expect("epochs >= 1").clone();
    let epoch1_s = records[0].wall_ms / 1e3;
    let epochs_rest_s: f64 = records[1..].iter().map(|r| r.wall_ms / 1e3).sum();
    let mut report = RunReport {
        version: VERSION.to_string(),
        dataset: ds.name().to_string(),
        config: cfg.clone(),
        epochs: records,
        epoch1_s,
        epochs_rest_s,
        avg_epoch_s: 0.0,
        train_loss: last.train_loss,
        train_acc: last.train_acc,
        val_acc: last.val_acc,
        test_acc,
        edge_retention,
        rebuilds,
        rebuilds_per_epoch: rebuilds.count as f64 / cfg.epochs as f64,
        bubble_frac: bubble.as_ref().map(|_| bubble_sum / cfg.epochs as f64),
        bubble,
    };
    report.avg_epoch_s = report.recompute_avg_epoch_s();
    log::info!(
        "{} {} chunks={} seed={}: test acc {:.4}, val acc {:.4}, {:.4} s/epoch",
        report.dataset,
        cfg.mode,
        cfg.effective_chunks(),
        cfg.seed,
        report.test_acc,
        report.val_acc,
        report.avg_epoch_s
    );
    Ok(report)
}

/// Writes `report.json` and `epochs.csv` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join("epochs.csv"))?;
    for r in &report.epochs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub framework_mode: String,
    pub balance: String,
    pub chunks: usize,
    pub strategy: String,
    pub epoch1_s: Option<f64>,
    pub epochs_rest_s: Option<f64>,
    pub avg_epoch_s: Option<f64>,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub edge_retention: Option<f64>,
    pub rebuilds: Option<usize>,
    pub bubble_frac: Option<f64>,
    /// Failure message for runs that did not finish.
    pub error: Option<String>,
}

impl BenchRow {
    fn key(cfg: &RunConfig) -> (String, String, usize, String) {
        let balance = match cfg.mode {
            Mode::Single => String::new(),
            Mode::Pipeline => cfg
                .pipeline
                .balance
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        };
        (cfg.mode.to_string(), balance, cfg.effective_chunks(), cfg.strategy.to_string())
    }

    pub fn from_report(r: &RunReport) -> Self {
        let (framework_mode, balance, chunks, strategy) = Self::key(&r.config);
        Self {
            framework_mode,
            balance,
            chunks,
            strategy,
            epoch1_s: Some(r.epoch1_s),
            epochs_rest_s: Some(r.epochs_rest_s),
            avg_epoch_s: Some(r.avg_epoch_s),
            train_loss: Some(r.train_loss),
            train_acc: Some(r.train_acc),
            val_acc: Some(r.val_acc),
            test_acc: Some(r.test_acc),
            edge_retention: Some(r.edge_retention),
            rebuilds: Some(r.rebuilds.count),
            bubble_frac: r.bubble_frac,
            error: None,
        }
    }

    pub fn failed(cfg: &RunConfig, err: &Error) -> Self {
        let (framework_mode, balance, chunks, strategy) = Self::key(cfg);
        Self {
            framework_mode,
            balance,
            chunks,
            strategy,
            epoch1_s: None,
            epochs_rest_s: None,
            avg_epoch_s: None,
            train_loss: None,
            train_acc: None,
            val_acc: None,
            test_acc: None,
            edge_retention: None,
            rebuilds: None,
            bubble_frac: None,
            error: Some(err.to_string()),
        }
    }
}

pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub reports: Vec<Option<RunReport>>,
}

/// Runs every config; a failing run becomes an error row and the grid
/// carries on. Datasets are loaded once per distinct name.
pub fn benchmark(grid: &[RunConfig]) -> Result<BenchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("benchmark grid is empty".into()));
    }
    let mut cache: Vec<(String, Dataset)> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len());
    let mut reports = Vec::with_capacity(grid.len());
    for cfg in grid {
        let ds = match cache.iter().position(|(k, _)| *k == cfg.dataset) {
            Some(i) => Ok(&cache[i].1),
            None => match resolve_dataset(&cfg.dataset) {
                Ok(ds) => {
                    cache.push((cfg.dataset.clone(), ds));
                    Ok(&cache.last().unwrap().1)
                }
                Err(e) => Err(e),
            },
        };
        let result = ds.and_then(|ds| train_on(ds, cfg));
        match result {
            Ok(r) => {
                rows.push(BenchRow::from_report(&r));
                reports.push(Some(r));
            }
            Err(e) => {
                log::warn!("run {:?} failed: {e}", BenchRow::key(cfg));
                rows.push(BenchRow::failed(cfg, &e));
                reports.push(None);
            }
        }
    }
    Ok(BenchOutcome { rows, reports })
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    run: usize,
    framework_mode: String,
    chunks: usize,
    strategy: String,
    epoch: usize,
    train_loss: f64,
    train_acc: f64,
    val_acc: f64,
}

/// Writes `benchmark.csv` and the per-epoch `curves.csv` into `dir`.
pub fn write_benchmark(outcome: &BenchOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("benchmark.csv"))?;
    for row in &outcome.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    for (run, (row, rep)) in outcome.rows.iter().zip(&outcome.reports).enumerate() {
        let Some(rep) = rep else { continue };
        for e in &rep.epochs {
            w.serialize(CurvePoint {
                run,
                framework_mode: row.framework_mode.clone(),
                chunks: row.chunks,
                strategy: row.strategy.clone(),
                epoch: e.epoch,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                val_acc: e.val_acc,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Layers `check-grad` knows how to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Gat,
    Model,
    Mlp,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gat" => Ok(ProbeKind::Gat),
            "model" => Ok(ProbeKind::Model),
            "mlp" => Ok(ProbeKind::Mlp),
            other => Err(Error::Config(format!("unknown layer {other:?} (expected gat, model or mlp)"))),
        }
    }
}

struct SeqProbe {
    seq: LayerSeq,
    x: Tensor2D,
    labels: Vec<i64>,
    mask: Vec<bool>,
    ctx: StepCtx,
}

impl Differentiable for SeqProbe {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.seq.params_mut()
    }

    fn objective(&mut self, with_grad: bool) -> Result<f64> {
        let (out, caches) = self.seq.forward(BatchTuple::full(self.x.clone()), &self.ctx, &mut Vec::new())?;
        let (loss, d) = masked_nll_loss(&out.feats, &self.labels, &self.mask)?;
        if with_grad {
            self.seq.backward(&caches, &d)?;
        }
        Ok(loss)
    }
}

/// Finite-difference check of one layer kind on a random 8-node graph, with
/// dropout active but its masks frozen by the fixed step.
pub fn check_grad(kind: ProbeKind, seed: u64) -> Result<GradCheck> {
    use rand::Rng;
    let mut rng = RngStream::new(seed, 0xc4ec).chacha();
    let n = 8;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((u, v));
            }
        }
    }
    let graph = Arc::new(crate::graph::Graph::from_edges(n, &edges)?);
    let (d, c) = (4, 3);
    let x = Tensor2D::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..c) as i64).collect();
    let small = GatModelConfig {
        hidden_heads: 2,
        hidden_dim: 3,
        out_heads: 2,
        input_dropout: 0.3,
        hidden_dropout: 0.3,
        attn_dropout: 0.3,
        ..GatModelConfig::default()
    };
    let seq = match kind {
        ProbeKind::Gat => {
            let mut r = RngStream::new(seed, 0x9a7).chacha();
            let layer = GatLayer::new(d, 2, c, HeadMode::Mean, 0.3, 0.2, true, &mut r)?;
            LayerSeq::new(vec![Layer::Gat(layer), Layer::LogSoftmax], graph)?
        }
        ProbeKind::Model => LayerSeq::gat(&small, graph, d, c, seed)?,
        ProbeKind::Mlp => LayerSeq::mlp(&[d, 5, 5, c], graph, seed)?,
    };
    let mut probe = SeqProbe {
        seq,
        x,
        labels,
        mask: vec![true; n],
        ctx: StepCtx::train(seed, 1),
    };
    grad_check(&mut probe, 1e-5)
}

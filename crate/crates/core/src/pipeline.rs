//! GPipe-style execution of a layer sequence split across simulated devices.
//!
//! Each partition runs on its own scoped worker thread for the duration of a
//! step. Micro-batches enter partition 0 in order, flow forward through
//! bounded channels, and reach the coordinator, which computes every
//! micro-batch loss once all forwards are in. Gradients then drain backwards
//! in reverse micro-batch order. Parameter gradients are summed in place by
//! the owning worker; nothing is updated inside a step.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batching::{split_mask, split_microbatches, SplitPlan};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{input_grad_needed, BatchTuple, Layer, LayerCache, LayerSeq, RebuildSpan, StepCtx};
use crate::nn::{masked_nll_loss_normalized, Param};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of consecutive layers on each device.
    pub balance: Vec<usize>,
    pub chunks: usize,
}

impl PipelineConfig {
    pub fn devices(&self) -> usize {
        self.balance.len()
    }
}

/// A contiguous slice of the model owned by one device.
#[derive(Debug, Clone)]
pub struct Partition {
    pub device: usize,
    /// Index of the first owned layer in the full model.
    pub start: usize,
    layers: Vec<Layer>,
    need_dx: Vec<bool>,
}

impl Partition {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn forward(
        &self,
        graph: &Graph,
        batch: BatchTuple,
        ctx: &StepCtx,
        spans: &mut Vec<RebuildSpan>,
    ) -> Result<(BatchTuple, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = batch;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(self.start + i, graph, cur, ctx, spans)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    fn backward(&mut self, caches: &[LayerCache], grad: Option<Tensor2D>) -> Result<Option<Tensor2D>> {
        let mut grad = grad;
        for i in (0..self.layers.len()).rev() {
            let Some(dy) = grad else { return Ok(None) };
            grad = self.layers[i].backward(&caches[i], &dy, self.need_dx[i])?;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fwd,
    Rebuild,
    Bwd,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub mb: usize,
    /// Seconds since the start of the step.
    pub start: f64,
    pub end: f64,
}

/// Wall-clock record of one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub devices: Vec<Vec<Event>>,
    /// Loss computation on the coordinator, between the two phases.
    pub coordinator: Vec<Event>,
}

impl Timeline {
    fn span(&self, device: usize, kind: EventKind, mb: usize) -> Option<(f64, f64)> {
        let evs: Vec<&Event> = self.devices[device]
            .iter()
            .filter(|e| e.mb == mb && (e.kind == kind || (kind == EventKind::Fwd && e.kind == EventKind::Rebuild)))
            .collect();
        let start = evs.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
        let end = evs.iter().map(|e| e.end).fold(f64::NEG_INFINITY, f64::max);
        (!evs.is_empty()).then_some((start, end))
    }

    /// Checks that events on a device never overlap and that every
    /// micro-batch visits devices in forward order, then in reverse.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(format!("timeline: {msg}")));
        for (d, evs) in self.devices.iter().enumerate() {
            let mut sorted = evs.clone();
            sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in sorted.windows(2) {
                if w[0].end > w[1].start {
                    return bad(format!("device {d}: {:?} overlaps {:?}", w[0], w[1]));
                }
            }
        }
        let mbs = self
            .devices
            .iter()
            .flatten()
            .map(|e| e.mb + 1)
            .max()
            .unwrap_or(0);
        for mb in 0..mbs {
            for d in 1..self.devices.len() {
                if let (Some((_, prev_end)), Some((start, _))) =
                    (self.span(d - 1, EventKind::Fwd, mb), self.span(d, EventKind::Fwd, mb))
                {
                    if prev_end > start {
                        return bad(format!("forward of micro-batch {mb} starts on device {d} too early"));
                    }
                }
                if let (Some((_, next_end)), Some((start, _))) =
                    (self.span(d, EventKind::Bwd, mb), self.span(d - 1, EventKind::Bwd, mb))
                {
                    if next_end > start {
                        return bad(format!("backward of micro-batch {mb} starts on device {} too early", d - 1));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleStats {
    /// Idle share of the makespan per device.
    pub bubble_fraction: Vec<f64>,
    pub makespan: f64,
}

impl BubbleStats {
    pub fn mean(&self) -> f64 {
        self.bubble_fraction.iter().sum::<f64>() / self.bubble_fraction.len().max(1) as f64
    }
}

/// Idle time per device over the step's makespan. Time the coordinator
/// spends on the loss is a barrier no device can work through, so it is not
/// counted as idle.
pub fn bubble_stats(t: &Timeline) -> Result<BubbleStats> {
    let all = || t.devices.iter().flatten().chain(&t.coordinator);
    if t.devices.iter().all(Vec::is_empty) {
        return Err(Error::EmptyTimeline);
    }
    let start = all().map(|e| e.start).fold(f64::INFINITY, f64::min);
    let end = all().map(|e| e.end).fold(f64::NEG_INFINITY, f64::max);
    let makespan = end - start;
    let barrier: f64 = t.coordinator.iter().map(|e| e.end - e.start).sum();
    let bubble_fraction = t
        .devices
        .iter()
        .map(|evs| {
            if makespan <= 0.0 {
                return 0.0;
            }
            let busy: f64 = evs.iter().map(|e| e.end - e.start).sum();
            ((makespan - barrier - busy) / makespan).max(0.0)
        })
        .collect();
    Ok(BubbleStats {
        bubble_fraction,
        makespan,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RebuildStats {
    pub count: usize,
    pub total_s: f64,
}

impl RebuildStats {
    pub fn add(&mut self, other: &RebuildStats) {
        self.count += other.count;
        self.total_s += other.total_s;
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub microbatch_losses: Vec<f64>,
    pub timeline: Timeline,
    pub rebuilds: RebuildStats,
}

/// The partitioned model.
#[derive(Debug, Clone)]
pub struct Pipeline {
    parts: Vec<Partition>,
    graph: Arc<Graph>,
}

/// Splits `seq` into contiguous slices of `balance[d]` layers.
pub fn partition_model(seq: LayerSeq, balance: &[usize]) -> Result<Pipeline> {
    let invalid = |reason: String| Error::InvalidBalance {
        balance: balance.to_vec(),
        reason,
    };
    if balance.is_empty() {
        return Err(invalid("no devices".into()));
    }
    if let Some(d) = balance.iter().position(|&b| b == 0) {
        return Err(invalid(format!("device {d} would own no layers")));
    }
    let total: usize = balance.iter().sum();
    if total != seq.len() {
        return Err(invalid(format!("covers {total} layers, model has {}", seq.len())));
    }
    let (layers, graph) = seq.into_parts();
    let need = input_grad_needed(&layers);
    let mut it = layers.into_iter();
    let mut parts = Vec::with_capacity(balance.len());
    let mut start = 0;
    for (device, &b) in balance.iter().enumerate() {
        parts.push(Partition {
            device,
            start,
            layers: it.by_ref().take(b).collect(),
            need_dx: need[start..start + b].to_vec(),
        });
        start += b;
    }
    Ok(Pipeline { parts, graph })
}

type FwdMsg = (usize, BatchTuple);
type BwdMsg = (usize, Option<Tensor2D>);

/// Why a worker stopped early.
enum Failure {
    Own(Error),
    /// A neighbour hung up first.
    Disconnected,
}

struct WorkerLinks {
    fwd_in: Receiver<FwdMsg>,
    fwd_out: SyncSender<FwdMsg>,
    bwd_in: Receiver<BwdMsg>,
    bwd_out: SyncSender<BwdMsg>,
}

fn secs(t0: Instant, t: Instant) -> f64 {
    t.duration_since(t0).as_secs_f64()
}

fn run_worker(
    part: &mut Partition,
    graph: &Graph,
    ctx: &StepCtx,
    chunks: usize,
    t0: Instant,
    links: WorkerLinks,
) -> std::result::Result<(Vec<Event>, RebuildStats), Failure> {
    let mut events = Vec::new();
    let mut rebuilds = RebuildStats::default();
    let mut caches: Vec<Option<Vec<LayerCache>>> = vec![None; chunks];
    for _ in 0..chunks {
        let (mb, batch) = links.fwd_in.recv().map_err(|_| Failure::Disconnected)?;
        let start = Instant::now();
        let mut spans = Vec::new();
        let (out, c) = part.forward(graph, batch, ctx, &mut spans).map_err(Failure::Own)?;
        let end = Instant::now();
        caches[mb] = Some(c);
        // Split the forward span around its rebuilds so events never overlap.
        let mut cursor = start;
        for s in &spans {
            events.push(Event {
                kind: EventKind::Fwd,
                mb,
                start: secs(t0, cursor),
                end: secs(t0, s.start),
            });
            events.push(Event {
                kind: EventKind::Rebuild,
                mb,
                start: secs(t0, s.start),
                end: secs(t0, s.end),
            });
            rebuilds.count += 1;
            rebuilds.total_s += s.end.duration_since(s.start).as_secs_f64();
            cursor = s.end;
        }
        events.push(Event {
            kind: EventKind::Fwd,
            mb,
            start: secs(t0, cursor),
            end: secs(t0, end),
        });
        links.fwd_out.send((mb, out)).map_err(|_| Failure::Disconnected)?;
    }
    for _ in 0..chunks {
        let (mb, grad) = links.bwd_in.recv().map_err(|_| Failure::Disconnected)?;
        let start = Instant::now();
        let c = caches[mb]
            .take()
            .ok_or_else(|| Failure::Own(Error::shape("pipeline", format!("no cache for micro-batch {mb}"))))?;
        let dx = part.backward(&c, grad).map_err(Failure::Own)?;
        drop(c);
        events.push(Event {
            kind: EventKind::Bwd,
            mb,
            start: secs(t0, start),
            end: secs(t0, Instant::now()),
        });
        links.bwd_out.send((mb, dx)).map_err(|_| Failure::Disconnected)?;
    }
    Ok((events, rebuilds))
}

impl Pipeline {
    pub fn partitions(&self) -> &[Partition] {
        &self.parts
    }

    pub fn devices(&self) -> usize {
        self.parts.len()
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.parts
            .iter_mut()
            .flat_map(|p| p.layers.iter_mut().flat_map(Layer::params_mut))
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.parts
            .iter()
            .flat_map(|p| p.layers.iter().flat_map(Layer::params))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Reassembles the single-sequence model.
    pub fn into_seq(self) -> Result<LayerSeq> {
        let layers = self.parts.into_iter().flat_map(|p| p.layers).collect();
        LayerSeq::new(layers, self.graph)
    }

    /// Evaluation-mode log-probabilities for every node, run on the caller's
    /// thread partition by partition.
    pub fn predict(&self, feats: &Tensor2D, seed: u64) -> Result<Tensor2D> {
        let ctx = StepCtx::eval(seed);
        let mut cur = BatchTuple::full(feats.clone());
        let mut spans = Vec::new();
        for p in &self.parts {
            cur = p.forward(&self.graph, cur, &ctx, &mut spans)?.0;
        }
        Ok(cur.feats)
    }

    /// One fill-drain pass over `batch`. The loss of each micro-batch is its
    /// masked NLL sum divided by the global masked count, so micro-batch
    /// losses add up to the full-batch mean and their gradients add up
    /// without rescaling. Gradients are accumulated into `Param::grad`.
    pub fn step(
        &mut self,
        batch: &BatchTuple,
        labels: &[i64],
        mask: &[bool],
        plan: &SplitPlan,
        ctx: &StepCtx,
    ) -> Result<StepReport> {
        let micro = split_microbatches(batch, plan)?;
        let chunks = micro.len();
        let total = batch.node_ids.iter().filter(|&&i| mask[i]).count();
        if total == 0 {
            return Err(Error::EmptyMask);
        }
        let views: Vec<_> = micro.iter().map(|m| split_mask(mask, labels, &m.node_ids)).collect();
        let d = self.parts.len();
        let t0 = Instant::now();

        let mut fwd_tx = Vec::with_capacity(d + 1);
        let mut fwd_rx = Vec::with_capacity(d + 1);
        let mut bwd_tx = Vec::with_capacity(d + 1);
        let mut bwd_rx = Vec::with_capacity(d + 1);
        for _ in 0..=d {
            let (t, r) = sync_channel::<FwdMsg>(chunks);
            fwd_tx.push(Some(t));
            fwd_rx.push(Some(r));
            let (t, r) = sync_channel::<BwdMsg>(chunks);
            bwd_tx.push(Some(t));
            bwd_rx.push(Some(r));
        }
        // Forward channel k feeds device k (channel d feeds the coordinator);
        // backward channel k feeds device k - 1 (channel 0 feeds the coordinator).
        let to_first = fwd_tx[0].take().unwrap();
        let from_last = fwd_rx[d].take().unwrap();
        let to_last = bwd_tx[d].take().unwrap();
        let from_first = bwd_rx[0].take().unwrap();

        let graph = Arc::clone(&self.graph);
        let ctx = *ctx;
        let mut losses = vec![0.0; chunks];
        let mut coordinator = Vec::new();
        let mut coord_err: Option<Error> = None;

        let results: Vec<thread::Result<std::result::Result<(Vec<Event>, RebuildStats), Failure>>> =
            thread::scope(|s| {
                let mut handles = Vec::with_capacity(d);
                for (k, part) in self.parts.iter_mut().enumerate() {
                    let links = WorkerLinks {
                        fwd_in: fwd_rx[k].take().unwrap(),
                        fwd_out: fwd_tx[k + 1].take().unwrap(),
                        bwd_in: bwd_rx[k + 1].take().unwrap(),
                        bwd_out: bwd_tx[k].take().unwrap(),
                    };
                    let graph = &graph;
                    handles.push(
                        thread::Builder::new()
                            .name(format!("device-{k}"))
                            .spawn_scoped(s, move || run_worker(part, graph, &ctx, chunks, t0, links))
                            .expect("spawn pipeline worker"),
                    );
                }

                let run = || -> std::result::Result<(), Option<Error>> {
                    for (mb, b) in micro.into_iter().enumerate() {
                        to_first.send((mb, b)).map_err(|_| None)?;
                    }
                    drop(to_first);
                    let mut outputs: Vec<Option<Tensor2D>> = vec![None; chunks];
                    for _ in 0..chunks {
                        let (mb, out) = from_last.recv().map_err(|_| None)?;
                        outputs[mb] = Some(out.feats);
                    }
                    let start = Instant::now();
                    let mut grads = Vec::with_capacity(chunks);
                    for (mb, out) in outputs.iter().enumerate() {
                        let v = &views[mb];
                        let out = out.as_ref().expect("every micro-batch returns");
                        let (loss, g) = masked_nll_loss_normalized(out, &v.labels, &v.mask, total).map_err(Some)?;
                        losses[mb] = loss;
                        grads.push(g);
                    }
                    coordinator.push(Event {
                        kind: EventKind::Loss,
                        mb: 0,
                        start: secs(t0, start),
                        end: secs(t0, Instant::now()),
                    });
                    for mb in (0..chunks).rev() {
                        let g = std::mem::replace(&mut grads[mb], Tensor2D::zeros(0, 0));
                        to_last.send((mb, Some(g))).map_err(|_| None)?;
                    }
                    for _ in 0..chunks {
                        from_first.recv().map_err(|_| None)?;
                    }
                    Ok(())
                };
                if let Err(Some(e)) = run() {
                    coord_err = Some(e);
                }
                // Hang up so that blocked workers unwind.
                drop(to_last);
                drop(from_first);
                drop(from_last);
                handles.into_iter().map(|h| h.join()).collect()
            });

        let mut timeline = Timeline {
            devices: Vec::with_capacity(d),
            coordinator,
        };
        let mut rebuilds = RebuildStats::default();
        let mut first_failure: Option<Error> = None;
        let mut disconnected = None;
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(Ok((events, rb))) => {
                    timeline.devices.push(events);
                    rebuilds.add(&rb);
                }
                Ok(Err(Failure::Own(e))) => {
                    first_failure.get_or_insert(Error::Worker {
                        device: k,
                        msg: e.to_string(),
                    });
                }
                Ok(Err(Failure::Disconnected)) => {
                    disconnected.get_or_insert(k);
                }
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panicked".into());
                    first_failure.get_or_insert(Error::Worker {
                        device: k,
                        msg: format!("panicked: {msg}"),
                    });
                }
            }
        }
        if let Some(e) = first_failure.or(coord_err) {
            return Err(e);
        }
        if let Some(k) = disconnected {
            return Err(Error::Worker {
                device: k,
                msg: "channel closed unexpectedly".into(),
            });
        }
        Ok(StepReport {
            loss: losses.iter().sum(),
            microbatch_losses: losses,
            timeline,
            rebuilds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GatModelConfig;
    use crate::nn::masked_nll_loss;
    use crate::tensor::max_rel_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cycle(n: usize) -> Arc<Graph> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Arc::new(Graph::from_edges(n, &edges).unwrap())
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn small_cfg() -> GatModelConfig {
        GatModelConfig {
            hidden_heads: 2,
            hidden_dim: 4,
            out_heads: 2,
            ..GatModelConfig::default()
        }
    }

    struct Problem {
        batch: BatchTuple,
        labels: Vec<i64>,
        mask: Vec<bool>,
    }

    fn problem(n: usize, d: usize, c: usize, seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Problem {
            batch: BatchTuple::full(random(n, d, seed + 1)),
            labels: (0..n).map(|_| rng.random_range(0..c) as i64).collect(),
            mask: (0..n).map(|i| i % 3 != 1).collect(),
        }
    }

    fn plain_grads(seq: &mut LayerSeq, p: &Problem, ctx: &StepCtx) -> (f64, Vec<Tensor2D>) {
        seq.zero_grad();
        let (out, caches) = seq.forward(p.batch.clone(), ctx, &mut Vec::new()).unwrap();
        let (loss, d) = masked_nll_loss(&out.feats, &p.labels, &p.mask).unwrap();
        seq.backward(&caches, &d).unwrap();
        (loss, seq.params().iter().map(|q| q.grad.clone()).collect())
    }

    fn pipe_grads(pipe: &mut Pipeline, p: &Problem, plan: &SplitPlan, ctx: &StepCtx) -> (StepReport, Vec<Tensor2D>) {
        pipe.zero_grad();
        let rep = pipe.step(&p.batch, &p.labels, &p.mask, plan, ctx).unwrap();
        (rep, pipe.params().iter().map(|q| q.grad.clone()).collect())
    }

    #[test]
    fn listing_balance_slices() {
        let seq = LayerSeq::gat(&small_cfg(), cycle(4), 3, 2, 0).unwrap();
        let pipe = partition_model(seq, &[1, 2, 1, 2]).unwrap();
        let names: Vec<Vec<&str>> = pipe
            .partitions()
            .iter()
            .map(|p| p.layers().iter().map(Layer::name).collect())
            .collect();
        assert_eq!(
            names,
            vec![vec!["dropout"], vec!["gat", "elu"], vec!["dropout"], vec!["gat", "log_softmax"]]
        );
        let seq = LayerSeq::gat(&small_cfg(), cycle(4), 3, 2, 0).unwrap();
        let pipe = partition_model(seq, &[3, 3]).unwrap();
        assert_eq!(pipe.partitions()[1].start, 3);
        assert_eq!(pipe.partitions()[1].layers().len(), 3);
    }

    #[test]
    fn bad_balances() {
        let mk = || LayerSeq::gat(&small_cfg(), cycle(4), 3, 2, 0).unwrap();
        assert!(matches!(partition_model(mk(), &[2, 2, 1]), Err(Error::InvalidBalance { .. })));
        assert!(partition_model(mk(), &[3, 0, 3]).is_err());
        assert!(partition_model(mk(), &[]).is_err());
    }

    #[test]
    fn single_partition_matches_plain_path_exactly() {
        let g = cycle(9);
        let p = problem(9, 3, 2, 1);
        let ctx = StepCtx::train(5, 3);
        let mut seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 2).unwrap();
        let (loss, want) = plain_grads(&mut seq, &p, &ctx);
        let mut pipe = partition_model(seq, &[6]).unwrap();
        let (rep, got) = pipe_grads(&mut pipe, &p, &SplitPlan::sequential(1), &ctx);
        assert_eq!(rep.loss.to_bits(), loss.to_bits());
        assert_eq!(got, want);
        assert_eq!(rep.rebuilds.count, 2);
    }

    #[test]
    fn placement_does_not_change_gradients() {
        let g = cycle(10);
        let p = problem(10, 3, 2, 3);
        let ctx = StepCtx::train(6, 1);
        let mut seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 4).unwrap();
        let (loss, want) = plain_grads(&mut seq, &p, &ctx);
        let mut pipe = partition_model(seq, &[1, 2, 1, 2]).unwrap();
        let (rep, got) = pipe_grads(&mut pipe, &p, &SplitPlan::sequential(1), &ctx);
        assert!((rep.loss - loss).abs() <= 1e-12 * loss.abs());
        for (a, b) in got.iter().zip(&want) {
            assert!(max_rel_diff(a, b, 1e-12) < 1e-12);
        }
        rep.timeline.validate().unwrap();
    }

    #[test]
    fn mlp_gradients_independent_of_chunks() {
        let g = cycle(13);
        let p = problem(13, 4, 3, 5);
        let ctx = StepCtx::train(7, 0);
        let mut seq = LayerSeq::mlp(&[4, 6, 5, 3], g, 6).unwrap();
        let (loss, want) = plain_grads(&mut seq, &p, &ctx);
        let mut pipe = partition_model(seq, &[2, 2, 2]).unwrap();
        for chunks in [2, 4] {
            let (rep, got) = pipe_grads(&mut pipe, &p, &SplitPlan::sequential(chunks), &ctx);
            assert!((rep.loss - loss).abs() <= 1e-10 * loss.abs());
            for (a, b) in got.iter().zip(&want) {
                assert!(max_rel_diff(a, b, 1e-12) < 1e-10);
            }
            assert_eq!(rep.rebuilds.count, 0);
            rep.timeline.validate().unwrap();
        }
    }

    #[test]
    fn cut_edges_change_gat_gradients() {
        let g = cycle(8);
        let p = problem(8, 3, 2, 7);
        let ctx = StepCtx::eval(0);
        let mut seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 8).unwrap();
        let (_, want) = plain_grads(&mut seq, &p, &ctx);
        let mut pipe = partition_model(seq, &[1, 2, 1, 2]).unwrap();
        let (rep, got) = pipe_grads(&mut pipe, &p, &SplitPlan::sequential(2), &ctx);
        let diff = got
            .iter()
            .zip(&want)
            .map(|(a, b)| max_rel_diff(a, b, 1e-12))
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "max difference {diff}");
        assert_eq!(rep.rebuilds.count, 4);
    }

    #[test]
    fn micro_batch_losses_sum_to_step_loss() {
        let g = cycle(12);
        let p = problem(12, 3, 2, 9);
        let seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 10).unwrap();
        let mut pipe = partition_model(seq, &[3, 3]).unwrap();
        let rep = pipe
            .step(&p.batch, &p.labels, &p.mask, &SplitPlan::sequential(3), &StepCtx::train(1, 1))
            .unwrap();
        assert_eq!(rep.microbatch_losses.len(), 3);
        assert_eq!(rep.loss, rep.microbatch_losses.iter().sum::<f64>());
        rep.timeline.validate().unwrap();
        assert_eq!(rep.timeline.devices.len(), 2);
    }

    #[test]
    fn worker_error_reports_device() {
        let g = cycle(6);
        let p = problem(6, 3, 2, 11);
        let seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 12).unwrap();
        let mut pipe = partition_model(seq, &[1, 2, 1, 2]).unwrap();
        // Wrong feature width fails in the first GAT layer, on device 1.
        let bad = BatchTuple::full(Tensor2D::zeros(6, 5));
        let err = pipe
            .step(&bad, &p.labels, &p.mask, &SplitPlan::sequential(2), &StepCtx::train(0, 0))
            .unwrap_err();
        assert!(matches!(err, Error::Worker { device: 1, .. }), "{err}");
    }

    fn ev(kind: EventKind, mb: usize, start: f64, end: f64) -> Event {
        Event { kind, mb, start, end }
    }

    #[test]
    fn bubble_geometry() {
        let one = Timeline {
            devices: vec![vec![ev(EventKind::Fwd, 0, 0.0, 1.0), ev(EventKind::Bwd, 0, 1.5, 2.5)]],
            coordinator: vec![ev(EventKind::Loss, 0, 1.0, 1.5)],
        };
        assert_eq!(bubble_stats(&one).unwrap().bubble_fraction, vec![0.0]);

        let two = Timeline {
            devices: vec![
                vec![ev(EventKind::Fwd, 0, 0.0, 1.0), ev(EventKind::Bwd, 0, 3.0, 4.0)],
                vec![ev(EventKind::Fwd, 0, 1.0, 2.0), ev(EventKind::Bwd, 0, 2.0, 3.0)],
            ],
            coordinator: vec![ev(EventKind::Loss, 0, 2.0, 2.0)],
        };
        let b = bubble_stats(&two).unwrap();
        assert_eq!(b.makespan, 4.0);
        assert_eq!(b.bubble_fraction, vec![0.5, 0.5]);
        two.validate().unwrap();

        let overlap = Timeline {
            devices: vec![vec![ev(EventKind::Fwd, 0, 0.0, 1.0), ev(EventKind::Fwd, 1, 0.5, 1.5)]],
            coordinator: vec![],
        };
        assert!(overlap.validate().is_err());
        assert!(matches!(bubble_stats(&Timeline::default()), Err(Error::EmptyTimeline)));
    }
}

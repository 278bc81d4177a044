//! Layer sequences over `(node_ids, feats)` batch tuples.
//!
//! Every layer maps a [`BatchTuple`] to a [`BatchTuple`] with the same node
//! ids. Graph layers rebuild their graph from the root graph and the batch's
//! node ids on each call, so a micro-batch only sees the edges inside it.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{GatCache, GatLayer, HeadMode};
use crate::graph::{check_node_set, Graph};
use crate::nn::{self, Param};
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTuple {
    pub node_ids: Vec<usize>,
    pub feats: Tensor2D,
}

impl BatchTuple {
    pub fn new(node_ids: Vec<usize>, feats: Tensor2D) -> Result<Self> {
        check_node_set(&node_ids, usize::MAX)?;
        if feats.rows() != node_ids.len() {
            return Err(Error::shape(
                "batch",
                format!("{} feature rows for {} node ids", feats.rows(), node_ids.len()),
            ));
        }
        Ok(Self { node_ids, feats })
    }

    /// All nodes `0..feats.rows()`.
    pub fn full(feats: Tensor2D) -> Self {
        Self {
            node_ids: (0..feats.rows()).collect(),
            feats,
        }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Affine map `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Tensor2D::from_fn(in_dim, out_dim, |_, _| rng.random_range(-bound..bound));
        let b = Tensor2D::from_fn(1, out_dim, |_, _| rng.random_range(-0.1..0.1));
        Self {
            weight: Param::new(w),
            bias: Param::new(b),
        }
    }

    fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut y = x.matmul(&self.weight.value)?;
        for r in 0..y.rows() {
            for (o, &b) in y.row_mut(r).iter_mut().zip(self.bias.value.row(0)) {
                *o += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dropout { p: f64 },
    Gat(GatLayer),
    Elu,
    LeakyRelu { slope: f64 },
    LogSoftmax,
    Linear(Linear),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Dropout { mask: Tensor2D },
    Gat(Box<GatCache>),
    Input(Tensor2D),
    Output(Tensor2D),
}

/// Start and end of one sub-graph rebuild.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebuildSpan {
    pub start: Instant,
    pub end: Instant,
}

/// Per-step settings shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCtx {
    pub seed: u64,
    pub step: u64,
    pub training: bool,
    /// Extra sleep inside every sub-graph rebuild.
    pub rebuild_delay: Duration,
}

impl StepCtx {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            training: true,
            rebuild_delay: Duration::ZERO,
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self {
            seed,
            step: 0,
            training: false,
            rebuild_delay: Duration::ZERO,
        }
    }

    /// Random stream of layer `index` for this step.
    pub fn layer_rng(&self, index: usize) -> RngStream {
        RngStream::new(self.seed, index as u64).fork(self.step)
    }
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dropout { .. } => "dropout",
            Layer::Gat(_) => "gat",
            Layer::Elu => "elu",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::LogSoftmax => "log_softmax",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Gat(_) | Layer::Linear(_))
    }

    pub fn is_graph_layer(&self) -> bool {
        matches!(self, Layer::Gat(_))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Gat(g) => g.params_mut(),
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Gat(g) => g.params(),
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    /// Input and output widths; `None` for width-preserving layers.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Gat(g) => Some((g.in_dim(), g.out_dim())),
            Layer::Linear(l) => Some((l.weight.value.rows(), l.weight.value.cols())),
            _ => None,
        }
    }

    /// Runs layer `index` of the model on `batch`.
    pub fn forward(
        &self,
        index: usize,
        root: &Graph,
        batch: BatchTuple,
        ctx: &StepCtx,
        rebuilds: &mut Vec<RebuildSpan>,
    ) -> Result<(BatchTuple, LayerCache)> {
        let BatchTuple { node_ids, feats } = batch;
        let (out, cache) = match self {
            Layer::Dropout { p } => {
                let (y, mask) = nn::dropout_rows(&feats, *p, &ctx.layer_rng(index), &node_ids, ctx.training)?;
                (y, LayerCache::Dropout { mask })
            }
            Layer::Gat(g) => {
                let start = Instant::now();
                let sub = root.induced_subgraph(&node_ids)?;
                if !ctx.rebuild_delay.is_zero() {
                    std::thread::sleep(ctx.rebuild_delay);
                }
                rebuilds.push(RebuildSpan {
                    start,
                    end: Instant::now(),
                });
                let (y, cache) = g.forward(&sub, &feats, ctx.training, &ctx.layer_rng(index))?;
                (y, LayerCache::Gat(Box::new(cache)))
            }
            Layer::Elu => (nn::elu(&feats), LayerCache::Input(feats)),
            Layer::LeakyRelu { slope } => (nn::leaky_relu(&feats, *slope), LayerCache::Input(feats)),
            Layer::LogSoftmax => {
                let y = nn::log_softmax_rows(&feats);
                (y.clone(), LayerCache::Output(y))
            }
            Layer::Linear(l) => (l.forward(&feats)?, LayerCache::Input(feats)),
        };
        Ok((BatchTuple { node_ids, feats: out }, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, cache: &LayerCache, dy: &Tensor2D, need_dx: bool) -> Result<Option<Tensor2D>> {
        let stale = || Error::shape("backward", "cache does not belong to this layer");
        match (self, cache) {
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => Ok(Some(dy.hadamard(mask)?)),
            (Layer::Gat(g), LayerCache::Gat(c)) => {
                let grads = g.backward(c, dy, need_dx)?;
                g.accumulate(&grads)?;
                Ok(grads.d_feats)
            }
            (Layer::Elu, LayerCache::Input(x)) => Ok(Some(nn::elu_backward(x, dy)?)),
            (Layer::LeakyRelu { slope }, LayerCache::Input(x)) => {
                Ok(Some(nn::leaky_relu_backward(x, dy, *slope)?))
            }
            (Layer::LogSoftmax, LayerCache::Output(y)) => Ok(Some(nn::log_softmax_backward(y, dy)?)),
            (Layer::Linear(l), LayerCache::Input(x)) => {
                l.weight.accumulate(&x.matmul_tn(dy)?)?;
                l.bias.accumulate(&dy.sum_rows())?;
                Ok(if need_dx { Some(dy.matmul_nt(&l.weight.value)?) } else { None })
            }
            _ => Err(stale()),
        }
    }
}

/// `need[i]` is true when some layer before `i` has parameters, i.e. when
/// layer `i` must propagate a gradient to its input.
pub fn input_grad_needed(layers: &[Layer]) -> Vec<bool> {
    let mut seen = false;
    layers
        .iter()
        .map(|l| {
            let need = seen;
            seen |= l.has_params();
            need
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    LeakyRelu,
}

/// Hyperparameters of the two-layer GAT classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatModelConfig {
    pub hidden_heads: usize,
    pub hidden_dim: usize,
    pub out_heads: usize,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub attn_dropout: f64,
    pub leaky_slope: f64,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for GatModelConfig {
    fn default() -> Self {
        Self {
            hidden_heads: 8,
            hidden_dim: 8,
            out_heads: 8,
            input_dropout: 0.6,
            hidden_dropout: 0.6,
            attn_dropout: 0.6,
            leaky_slope: 0.2,
            activation: Activation::Elu,
            bias: false,
        }
    }
}

/// An ordered stack of layers plus the root graph that graph layers rebuild
/// their sub-graphs from.
#[derive(Debug, Clone)]
pub struct LayerSeq {
    layers: Vec<Layer>,
    graph: Arc<Graph>,
}

impl LayerSeq {
    pub fn new(layers: Vec<Layer>, graph: Arc<Graph>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            if let Some((din, dout)) = l.dims() {
                if let Some(w) = width {
                    if w != din {
                        return Err(Error::shape(
                            "layer_seq",
                            format!("layer {i} ({}) expects width {din}, previous output is {w}", l.name()),
                        ));
                    }
                }
                width = Some(dout);
            }
            if let Layer::Dropout { p } = l {
                nn::check_probability(*p)?;
            }
        }
        Ok(Self { layers, graph })
    }

    /// `[Dropout, GAT(concat), activation, Dropout, GAT(mean), LogSoftmax]`.
    pub fn gat(cfg: &GatModelConfig, graph: Arc<Graph>, in_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, u64::MAX).chacha();
        let first = GatLayer::new(
            in_dim,
            cfg.hidden_heads,
            cfg.hidden_dim,
            HeadMode::Concat,
            cfg.attn_dropout,
            cfg.leaky_slope,
            cfg.bias,
            &mut rng,
        )?;
        let second = GatLayer::new(
            cfg.hidden_heads * cfg.hidden_dim,
            cfg.out_heads,
            classes,
            HeadMode::Mean,
            cfg.attn_dropout,
            cfg.leaky_slope,
            cfg.bias,
            &mut rng,
        )?;
        let act = match cfg.activation {
            Activation::Elu => Layer::Elu,
            Activation::LeakyRelu => Layer::LeakyRelu { slope: cfg.leaky_slope },
        };
        Self::new(
            vec![
                Layer::Dropout { p: cfg.input_dropout },
                Layer::Gat(first),
                act,
                Layer::Dropout { p: cfg.hidden_dropout },
                Layer::Gat(second),
                Layer::LogSoftmax,
            ],
            graph,
        )
    }

    /// Graph-free classifier `Linear, ELU, …, Linear, LogSoftmax` through
    /// the widths in `dims`.
    pub fn mlp(dims: &[usize], graph: Arc<Graph>, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let mut rng = RngStream::new(seed, u64::MAX).chacha();
        let mut layers = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            if k > 0 {
                layers.push(Layer::Elu);
            }
            layers.push(Layer::Linear(Linear::new(w[0], w[1], &mut rng)));
        }
        layers.push(Layer::LogSoftmax);
        Self::new(layers, graph)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_parts(self) -> (Vec<Layer>, Arc<Graph>) {
        (self.layers, self.graph)
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(
        &self,
        batch: BatchTuple,
        ctx: &StepCtx,
        rebuilds: &mut Vec<RebuildSpan>,
    ) -> Result<(BatchTuple, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = batch;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(i, &self.graph, cur, ctx, rebuilds)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`.
    pub fn backward(&mut self, caches: &[LayerCache], d_out: &Tensor2D) -> Result<()> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape("backward", format!("{} caches for {} layers", caches.len(), self.layers.len())));
        }
        let need = input_grad_needed(&self.layers);
        let mut grad = Some(d_out.clone());
        for i in (0..self.layers.len()).rev() {
            let Some(dy) = grad else { break };
            grad = self.layers[i].backward(&caches[i], &dy, need[i])?;
        }
        Ok(())
    }

    /// Evaluation-mode log-probabilities for every node of the root graph.
    pub fn predict(&self, feats: &Tensor2D, seed: u64) -> Result<Tensor2D> {
        let (out, _) = self.forward(BatchTuple::full(feats.clone()), &StepCtx::eval(seed), &mut Vec::new())?;
        Ok(out.feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, masked_nll_loss, Differentiable};
    use crate::tensor::max_rel_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cycle(n: usize) -> Arc<Graph> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Arc::new(Graph::from_edges(n, &edges).unwrap())
    }

    fn small_cfg() -> GatModelConfig {
        GatModelConfig {
            hidden_heads: 2,
            hidden_dim: 3,
            out_heads: 2,
            ..GatModelConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn listing_layout() {
        let seq = LayerSeq::gat(&GatModelConfig::default(), cycle(5), 10, 3, 0).unwrap();
        let names: Vec<_> = seq.layers().iter().map(Layer::name).collect();
        assert_eq!(names, ["dropout", "gat", "elu", "dropout", "gat", "log_softmax"]);
        assert_eq!(seq.layers()[1].dims(), Some((10, 64)));
        assert_eq!(seq.layers()[4].dims(), Some((64, 3)));
        assert_eq!(input_grad_needed(seq.layers()), [false, false, true, true, true, true]);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![
            Layer::Linear(Linear::new(3, 4, &mut rng)),
            Layer::Linear(Linear::new(5, 2, &mut rng)),
        ];
        assert!(LayerSeq::new(layers, cycle(3)).is_err());
    }

    #[test]
    fn two_rebuilds_per_pass() {
        let seq = LayerSeq::gat(&small_cfg(), cycle(6), 4, 2, 1).unwrap();
        let mut spans = Vec::new();
        seq.forward(BatchTuple::full(random(6, 4, 2)), &StepCtx::train(0, 0), &mut spans)
            .unwrap();
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn full_batch_matches_direct_root_graph() {
        let g = cycle(7);
        let seq = LayerSeq::gat(&small_cfg(), g.clone(), 3, 2, 3).unwrap();
        let x = random(7, 3, 4);
        let ctx = StepCtx::train(9, 2);
        let (out, _) = seq.forward(BatchTuple::full(x.clone()), &ctx, &mut Vec::new()).unwrap();

        let ids: Vec<usize> = (0..7).collect();
        let mut h = x;
        for (i, layer) in seq.layers().iter().enumerate() {
            h = match layer {
                Layer::Dropout { p } => nn::dropout_rows(&h, *p, &ctx.layer_rng(i), &ids, true).unwrap().0,
                Layer::Gat(gl) => gl.forward(&g, &h, true, &ctx.layer_rng(i)).unwrap().0,
                Layer::Elu => nn::elu(&h),
                Layer::LogSoftmax => nn::log_softmax_rows(&h),
                _ => unreachable!(),
            };
        }
        assert_eq!(out.feats, h);
    }

    #[test]
    fn half_cycle_batch_equals_model_on_induced_subgraph() {
        let g = cycle(4);
        let seq = LayerSeq::gat(&small_cfg(), g.clone(), 3, 2, 5).unwrap();
        let x = random(4, 3, 6);
        let ctx = StepCtx::train(1, 1);
        let batch = BatchTuple::new(vec![0, 1], x.slice_rows(0, 2)).unwrap();
        let (out, _) = seq.forward(batch, &ctx, &mut Vec::new()).unwrap();

        // The 2-node sub-graph as a root graph of its own, with node ids kept
        // global so the dropout draws line up.
        let sub = Arc::new(g.induced_subgraph(&[0, 1]).unwrap());
        let (layers, _) = seq.clone().into_parts();
        let direct = LayerSeq::new(layers, sub).unwrap();
        let (want, _) = direct
            .forward(BatchTuple::full(x.slice_rows(0, 2)), &ctx, &mut Vec::new())
            .unwrap();
        assert_eq!(out.feats, want.feats);
    }

    #[test]
    fn permutation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < 0.35 {
                    edges.push((u, v));
                }
            }
        }
        let perm: Vec<usize> = vec![3, 7, 0, 5, 1, 6, 2, 4];
        let g = Arc::new(Graph::from_edges(n, &edges).unwrap());
        let pe: Vec<_> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let pg = Arc::new(Graph::from_edges(n, &pe).unwrap());
        let seq = LayerSeq::gat(&small_cfg(), g, 3, 2, 8).unwrap();
        let (layers, _) = seq.clone().into_parts();
        let pseq = LayerSeq::new(layers, pg).unwrap();
        let x = random(n, 3, 9);
        let mut px = Tensor2D::zeros(n, 3);
        for i in 0..n {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let y = seq.predict(&x, 0).unwrap();
        let py = pseq.predict(&px, 0).unwrap();
        for i in 0..n {
            for c in 0..2 {
                assert!((y.get(i, c) - py.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    struct SeqObjective {
        seq: LayerSeq,
        x: Tensor2D,
        labels: Vec<i64>,
        mask: Vec<bool>,
    }

    impl Differentiable for SeqObjective {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.seq.params_mut()
        }
        fn objective(&mut self, with_grad: bool) -> Result<f64> {
            let ctx = StepCtx::train(4, 3);
            let (out, caches) = self.seq.forward(BatchTuple::full(self.x.clone()), &ctx, &mut Vec::new())?;
            let (loss, dlogp) = masked_nll_loss(&out.feats, &self.labels, &self.mask)?;
            if with_grad {
                self.seq.backward(&caches, &dlogp)?;
            }
            Ok(loss)
        }
    }

    #[test]
    fn end_to_end_grad_check_with_frozen_dropout() {
        let g = cycle(6);
        let cfg = GatModelConfig {
            input_dropout: 0.3,
            hidden_dropout: 0.3,
            attn_dropout: 0.3,
            ..small_cfg()
        };
        let mut obj = SeqObjective {
            seq: LayerSeq::gat(&cfg, g, 3, 2, 10).unwrap(),
            x: random(6, 3, 11),
            labels: vec![0, 1, 1, 0, 1, 0],
            mask: vec![true, true, false, true, true, true],
        };
        let gc = grad_check(&mut obj, 1e-5).unwrap();
        assert!(gc.max_rel_err < 1e-4, "{gc:?}");

        let mut mlp = SeqObjective {
            seq: LayerSeq::mlp(&[3, 5, 4, 2], cycle(6), 12).unwrap(),
            x: random(6, 3, 13),
            labels: vec![0, 1, 1, 0, 1, 0],
            mask: vec![true; 6],
        };
        let gc = grad_check(&mut mlp, 1e-5).unwrap();
        assert!(gc.max_rel_err < 1e-6, "{gc:?}");
    }

    #[test]
    fn eval_is_deterministic_and_ignores_step() {
        let seq = LayerSeq::gat(&small_cfg(), cycle(5), 3, 2, 14).unwrap();
        let x = random(5, 3, 15);
        let a = seq.predict(&x, 1).unwrap();
        let b = seq.predict(&x, 2).unwrap();
        assert_eq!(a, b);
        let rows: f64 = (0..5).map(|r| a.row(r).iter().map(|v| v.exp()).sum::<f64>()).sum();
        assert!(max_rel_diff(&Tensor2D::filled(1, 1, rows), &Tensor2D::filled(1, 1, 5.0), 1.0) < 1e-12);
    }
}

//! Multi-head graph attention convolution.
//!
//! For head `k` with projection `z = x·W_k`, each edge `j → i` gets the logit
//! `e_ij = LeakyReLU(⟨a_dst_k, z_i⟩ + ⟨a_src_k, z_j⟩)`, which equals
//! `aᵀ[z_i ‖ z_j]` with `a = [a_dst_k ; a_src_k]` but costs one dot product
//! per node instead of one per edge. Coefficients `α_ij` are the softmax of
//! `e_ij` over the in-neighbourhood of `i`, optionally dropped out, and
//! `h_i = Σ_j α_ij z_j`. Heads are concatenated or averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{check_probability, Param};
use crate::rng::RngStream;
use crate::tensor::{dot, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Concat,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    /// `d_in × (heads·head_dim)`; head `k` owns columns `k·head_dim..`.
    pub weight: Param,
    /// `heads × head_dim`, applied to the source (neighbour) projection.
    pub attn_src: Param,
    /// `heads × head_dim`, applied to the destination (centre) projection.
    pub attn_dst: Param,
    pub bias: Option<Param>,
    heads: usize,
    head_dim: usize,
    mode: HeadMode,
    attn_dropout: f64,
    leaky_slope: f64,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct GatCache {
    graph: Graph,
    input: Tensor2D,
    z: Tensor2D,
    /// Pre-activation logits, `[entry · heads + head]`.
    raw: Vec<f64>,
    /// Softmax coefficients before dropout, same layout.
    alpha: Vec<f64>,
    /// Attention dropout multipliers, same layout; `None` when inactive.
    drop: Option<Vec<f64>>,
}

impl GatCache {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Coefficient of the `entry`-th CSR entry for `head`, before dropout.
    pub fn alpha(&self, entry: usize, head: usize, heads: usize) -> f64 {
        self.alpha[entry * heads + head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatGrads {
    pub d_feats: Option<Tensor2D>,
    pub weight: Tensor2D,
    pub attn_src: Tensor2D,
    pub attn_dst: Tensor2D,
    pub bias: Option<Tensor2D>,
}

fn xavier(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor2D {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl GatLayer {
    /// Glorot-uniform initialised layer; the bias, when enabled, starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        mode: HeadMode,
        attn_dropout: f64,
        leaky_slope: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = xavier(in_dim, heads * head_dim, in_dim, heads * head_dim, rng);
        let attn_src = xavier(heads, head_dim, head_dim, 1, rng);
        let attn_dst = xavier(heads, head_dim, head_dim, 1, rng);
        let out = match mode {
            HeadMode::Concat => heads * head_dim,
            HeadMode::Mean => head_dim,
        };
        let bias = bias.then(|| Tensor2D::zeros(1, out));
        Self::from_params(weight, attn_src, attn_dst, bias, mode, attn_dropout, leaky_slope)
    }

    pub fn from_params(
        weight: Tensor2D,
        attn_src: Tensor2D,
        attn_dst: Tensor2D,
        bias: Option<Tensor2D>,
        mode: HeadMode,
        attn_dropout: f64,
        leaky_slope: f64,
    ) -> Result<Self> {
        check_probability(attn_dropout)?;
        let (heads, head_dim) = attn_src.shape();
        if heads == 0 || head_dim == 0 {
            return Err(Error::shape("gat", "need at least one head of width ≥ 1"));
        }
        if attn_dst.shape() != (heads, head_dim) || weight.cols() != heads * head_dim {
            return Err(Error::shape(
                "gat",
                format!(
                    "weight {:?}, attn_src {:?}, attn_dst {:?}",
                    weight.shape(),
                    attn_src.shape(),
                    attn_dst.shape()
                ),
            ));
        }
        let out = match mode {
            HeadMode::Concat => heads * head_dim,
            HeadMode::Mean => head_dim,
        };
        if let Some(b) = &bias {
            if b.shape() != (1, out) {
                return Err(Error::shape("gat", format!("bias {:?}, expected (1, {out})", b.shape())));
            }
        }
        Ok(Self {
            weight: Param::new(weight),
            attn_src: Param::new(attn_src),
            attn_dst: Param::new(attn_dst),
            bias: bias.map(Param::new),
            heads,
            head_dim,
            mode,
            attn_dropout,
            leaky_slope,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        match self.mode {
            HeadMode::Concat => self.heads * self.head_dim,
            HeadMode::Mean => self.head_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight, &mut self.attn_src, &mut self.attn_dst];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight, &self.attn_src, &self.attn_dst];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    /// Attention dropout draws come from `rng.fork(head).fork(dst).uniform_at(src)`
    /// with root-graph node ids, so an edge's mask does not depend on which
    /// sub-graph it appears in.
    pub fn forward(
        &self,
        g: &Graph,
        feats: &Tensor2D,
        training: bool,
        rng: &RngStream,
    ) -> Result<(Tensor2D, GatCache)> {
        if feats.rows() != g.n() || feats.cols() != self.in_dim() {
            return Err(Error::shape(
                "gat_forward",
                format!(
                    "features {:?} for {} nodes and input width {}",
                    feats.shape(),
                    g.n(),
                    self.in_dim()
                ),
            ));
        }
        let heads = self.heads;
        let hd = self.head_dim;
        let n = g.n();
        let z = feats.matmul(&self.weight.value)?;

        let mut s_src = vec![0.0; n * heads];
        let mut s_dst = vec![0.0; n * heads];
        for i in 0..n {
            let zi = z.row(i);
            for k in 0..heads {
                let zk = &zi[k * hd..(k + 1) * hd];
                s_src[i * heads + k] = dot(self.attn_src.value.row(k), zk);
                s_dst[i * heads + k] = dot(self.attn_dst.value.row(k), zk);
            }
        }

        let entries = g.num_entries();
        let mut raw = vec![0.0; entries * heads];
        let mut alpha = vec![0.0; entries * heads];
        let dropping = training && self.attn_dropout > 0.0;
        let mut drop = dropping.then(|| vec![0.0; entries * heads]);
        let keep = 1.0 / (1.0 - self.attn_dropout);
        let head_streams: Vec<RngStream> = (0..heads).map(|k| rng.fork(k as u64)).collect();
        let ids = g.node_ids();
        let row_ptr = g.row_ptr();
        let col_idx = g.col_idx();

        let mut h = Tensor2D::zeros(n, heads * hd);
        for i in 0..n {
            let (lo, hi) = (row_ptr[i], row_ptr[i + 1]);
            assert!(hi > lo, "node {i} has an empty neighbourhood");
            for k in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for e in lo..hi {
                    let j = col_idx[e];
                    let r = s_dst[i * heads + k] + s_src[j * heads + k];
                    raw[e * heads + k] = r;
                    let a = if r > 0.0 { r } else { self.leaky_slope * r };
                    alpha[e * heads + k] = a;
                    max = max.max(a);
                }
                let mut sum = 0.0;
                for e in lo..hi {
                    let v = (alpha[e * heads + k] - max).exp();
                    alpha[e * heads + k] = v;
                    sum += v;
                }
                for e in lo..hi {
                    alpha[e * heads + k] /= sum;
                }
                if let Some(drop) = &mut drop {
                    let stream = head_streams[k].fork(ids[i] as u64);
                    for e in lo..hi {
                        let src = ids[col_idx[e]] as u64;
                        drop[e * heads + k] = if stream.uniform_at(src) >= self.attn_dropout {
                            keep
                        } else {
                            0.0
                        };
                    }
                }
                let hi_row = &mut h.row_mut(i)[k * hd..(k + 1) * hd];
                for e in lo..hi {
                    let mut w = alpha[e * heads + k];
                    if let Some(drop) = &drop {
                        w *= drop[e * heads + k];
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let zj = &z.row(col_idx[e])[k * hd..(k + 1) * hd];
                    for (o, &v) in hi_row.iter_mut().zip(zj) {
                        *o += w * v;
                    }
                }
            }
        }

        let mut out = match self.mode {
            HeadMode::Concat => h,
            HeadMode::Mean => {
                let inv = 1.0 / heads as f64;
                Tensor2D::from_fn(n, hd, |i, c| {
                    (0..heads).map(|k| h.get(i, k * hd + c)).sum::<f64>() * inv
                })
            }
        };
        if let Some(b) = &self.bias {
            for i in 0..n {
                for (o, &bv) in out.row_mut(i).iter_mut().zip(b.value.row(0)) {
                    *o += bv;
                }
            }
        }
        let cache = GatCache {
            graph: g.clone(),
            input: feats.clone(),
            z,
            raw,
            alpha,
            drop,
        };
        Ok((out, cache))
    }

    /// Exact gradients of the forward pass recorded in `cache`.
    pub fn backward(&self, cache: &GatCache, d_out: &Tensor2D, need_dx: bool) -> Result<GatGrads> {
        let g = &cache.graph;
        let n = g.n();
        let heads = self.heads;
        let hd = self.head_dim;
        if d_out.shape() != (n, self.out_dim()) || cache.z.shape() != (n, heads * hd) {
            return Err(Error::shape(
                "gat_backward",
                format!("d_out {:?} for {} nodes, output width {}", d_out.shape(), n, self.out_dim()),
            ));
        }
        let dh = match self.mode {
            HeadMode::Concat => d_out.clone(),
            HeadMode::Mean => {
                let inv = 1.0 / heads as f64;
                Tensor2D::from_fn(n, heads * hd, |i, c| d_out.get(i, c % hd) * inv)
            }
        };
        let z = &cache.z;
        let row_ptr = g.row_ptr();
        let col_idx = g.col_idx();
        let mut dz = Tensor2D::zeros(n, heads * hd);
        let mut ds_src = vec![0.0; n * heads];
        let mut ds_dst = vec![0.0; n * heads];
        let mut d_alpha = Vec::new();
        for i in 0..n {
            let (lo, hi) = (row_ptr[i], row_ptr[i + 1]);
            for k in 0..heads {
                let dhi = &dh.row(i)[k * hd..(k + 1) * hd];
                d_alpha.clear();
                let mut weighted = 0.0;
                for e in lo..hi {
                    let j = col_idx[e];
                    let idx = e * heads + k;
                    let mult = cache.drop.as_ref().map_or(1.0, |d| d[idx]);
                    let a_eff = cache.alpha[idx] * mult;
                    let zj = &z.row(j)[k * hd..(k + 1) * hd];
                    let da = dot(dhi, zj) * mult;
                    d_alpha.push(da);
                    weighted += cache.alpha[idx] * da;
                    if a_eff != 0.0 {
                        let dzj = &mut dz.row_mut(j)[k * hd..(k + 1) * hd];
                        for (o, &v) in dzj.iter_mut().zip(dhi) {
                            *o += a_eff * v;
                        }
                    }
                }
                for (t, e) in (lo..hi).enumerate() {
                    let idx = e * heads + k;
                    let de = cache.alpha[idx] * (d_alpha[t] - weighted);
                    let dr = if cache.raw[idx] > 0.0 { de } else { self.leaky_slope * de };
                    ds_dst[i * heads + k] += dr;
                    ds_src[col_idx[e] * heads + k] += dr;
                }
            }
        }

        let mut d_attn_src = Tensor2D::zeros(heads, hd);
        let mut d_attn_dst = Tensor2D::zeros(heads, hd);
        for j in 0..n {
            for k in 0..heads {
                let cs = ds_src[j * heads + k];
                let cd = ds_dst[j * heads + k];
                if cs == 0.0 && cd == 0.0 {
                    continue;
                }
                let a_src = self.attn_src.value.row(k);
                let a_dst = self.attn_dst.value.row(k);
                for c in 0..hd {
                    let zc = z.get(j, k * hd + c);
                    d_attn_src.data_mut()[k * hd + c] += cs * zc;
                    d_attn_dst.data_mut()[k * hd + c] += cd * zc;
                    dz.data_mut()[j * heads * hd + k * hd + c] += cs * a_src[c] + cd * a_dst[c];
                }
            }
        }

        let weight = cache.input.matmul_tn(&dz)?;
        let d_feats = if need_dx {
            Some(dz.matmul_nt(&self.weight.value)?)
        } else {
            None
        };
        let bias = self.bias.as_ref().map(|_| d_out.sum_rows());
        Ok(GatGrads {
            d_feats,
            weight,
            attn_src: d_attn_src,
            attn_dst: d_attn_dst,
            bias,
        })
    }

    /// Adds `grads` into the parameter gradients.
    pub fn accumulate(&mut self, grads: &GatGrads) -> Result<()> {
        self.weight.accumulate(&grads.weight)?;
        self.attn_src.accumulate(&grads.attn_src)?;
        self.attn_dst.accumulate(&grads.attn_dst)?;
        if let (Some(b), Some(db)) = (&mut self.bias, &grads.bias) {
            b.accumulate(db)?;
        }
        Ok(())
    }
}

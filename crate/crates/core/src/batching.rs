//! Micro-batch splitting of a batch tuple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BatchTuple;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Contiguous blocks in input order.
    Sequential,
    /// Seeded shuffle of the rows, then contiguous blocks; each block is
    /// re-sorted so node ids stay increasing.
    RandomPermuted,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(SplitStrategy::Sequential),
            "random_permuted" | "random-permuted" => Ok(SplitStrategy::RandomPermuted),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected sequential or random_permuted)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitStrategy::Sequential => "sequential",
            SplitStrategy::RandomPermuted => "random_permuted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub chunks: usize,
    /// Shuffle seed for `RandomPermuted`.
    pub seed: u64,
}

impl SplitPlan {
    pub fn sequential(chunks: usize) -> Self {
        Self {
            strategy: SplitStrategy::Sequential,
            chunks,
            seed: 0,
        }
    }
}

/// Row ranges of `chunks` blocks over `n` rows, larger blocks first.
pub fn chunk_ranges(n: usize, chunks: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if chunks < 1 || chunks > n {
        return Err(Error::InvalidChunks { chunks, n });
    }
    let base = n / chunks;
    let extra = n % chunks;
    let mut start = 0;
    Ok((0..chunks)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Row positions (into the input batch) of every micro-batch, each sorted.
pub fn split_rows(n: usize, plan: &SplitPlan) -> Result<Vec<Vec<usize>>> {
    let ranges = chunk_ranges(n, plan.chunks)?;
    let order: Vec<usize> = match plan.strategy {
        SplitStrategy::Sequential => (0..n).collect(),
        SplitStrategy::RandomPermuted => {
            use rand::seq::SliceRandom;
            let mut rng = RngStream::new(plan.seed, 0x5b117).chacha();
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng);
            v
        }
    };
    Ok(ranges
        .into_iter()
        .map(|r| {
            let mut rows = order[r].to_vec();
            rows.sort_unstable();
            rows
        })
        .collect())
}

/// Splits a batch into micro-batches, slicing features in lockstep.
pub fn split_microbatches(batch: &BatchTuple, plan: &SplitPlan) -> Result<Vec<BatchTuple>> {
    let rows = split_rows(batch.len(), plan)?;
    Ok(rows
        .iter()
        .map(|r| BatchTuple {
            node_ids: r.iter().map(|&i| batch.node_ids[i]).collect(),
            feats: batch.feats.select_rows(r),
        })
        .collect())
}

/// Loss view of one micro-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMask {
    pub mask: Vec<bool>,
    pub labels: Vec<i64>,
    pub count: usize,
    /// `count / global masked count`, or 0 for an empty global mask.
    pub weight: f64,
}

pub fn split_mask(global_mask: &[bool], labels: &[i64], node_ids: &[usize]) -> LocalMask {
    let total = global_mask.iter().filter(|&&m| m).count();
    let mask: Vec<bool> = node_ids.iter().map(|&i| global_mask[i]).collect();
    let count = mask.iter().filter(|&&m| m).count();
    LocalMask {
        labels: node_ids.iter().map(|&i| labels[i]).collect(),
        weight: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        mask,
        count,
    }
}

/// Node-id sets of every micro-batch, for edge-retention reporting.
pub fn partition_ids(n: usize, plan: &SplitPlan) -> Result<Vec<Vec<usize>>> {
    split_rows(n, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor2D;

    fn batch(n: usize) -> BatchTuple {
        BatchTuple::full(Tensor2D::from_fn(n, 2, |r, c| (r * 10 + c) as f64))
    }

    #[test]
    fn remainder_first_sizes() {
        let parts = split_microbatches(&batch(10), &SplitPlan::sequential(4)).unwrap();
        let ids: Vec<Vec<usize>> = parts.iter().map(|p| p.node_ids.clone()).collect();
        assert_eq!(ids, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(parts[2].feats.row(1), &[70.0, 71.0]);
    }

    #[test]
    fn one_chunk_is_passthrough() {
        let b = batch(5);
        assert_eq!(split_microbatches(&b, &SplitPlan::sequential(1)).unwrap(), vec![b]);
    }

    #[test]
    fn bad_chunk_counts() {
        assert!(matches!(
            split_microbatches(&batch(3), &SplitPlan::sequential(0)),
            Err(Error::InvalidChunks { chunks: 0, n: 3 })
        ));
        assert!(split_microbatches(&batch(3), &SplitPlan::sequential(4)).is_err());
    }

    #[test]
    fn concatenation_reconstructs_input() {
        let b = batch(11);
        let parts = split_microbatches(&b, &SplitPlan::sequential(3)).unwrap();
        let feats = Tensor2D::concat_rows(&parts.iter().map(|p| p.feats.clone()).collect::<Vec<_>>()).unwrap();
        let ids: Vec<usize> = parts.iter().flat_map(|p| p.node_ids.clone()).collect();
        assert_eq!(BatchTuple { node_ids: ids, feats }, b);
    }

    #[test]
    fn permuted_blocks_partition_and_stay_sorted() {
        let plan = SplitPlan {
            strategy: SplitStrategy::RandomPermuted,
            chunks: 3,
            seed: 4,
        };
        let parts = split_microbatches(&batch(20), &plan).unwrap();
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.node_ids.clone()).collect();
        for p in &parts {
            assert!(p.node_ids.windows(2).all(|w| w[0] < w[1]));
        }
        assert_ne!(parts[0].node_ids, (0..7).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn mask_weights() {
        let labels = vec![0, 1, 0, 1];
        let full = [true; 4];
        let a = split_mask(&full, &labels, &[0, 1]);
        let b = split_mask(&full, &labels, &[2, 3]);
        assert_eq!((a.weight, b.weight), (0.5, 0.5));

        let mask = [true, false, false, false];
        let empty = split_mask(&mask, &labels, &[2, 3]);
        assert_eq!((empty.count, empty.weight), (0, 0.0));
        assert_eq!(empty.labels, vec![0, 1]);
    }

    #[test]
    fn sequential_cycle_split_halves_retention() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let parts = partition_ids(4, &SplitPlan::sequential(2)).unwrap();
        assert_eq!(g.edge_retention(&parts).unwrap(), 0.5);
    }
}

//! Seeded synthetic datasets for tests and benchmarks.
//!
//! `citation_like` draws a contextual stochastic block model: labels uniform
//! over classes in random index order, sparse bag-of-words features biased
//! towards a per-class vocabulary, and edges that stay inside a class with
//! probability `homophily`. It has the shape of the Planetoid citation
//! graphs (sparse features, few labeled nodes, homophilous edges) without
//! being a stand-in for any of them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::graph::Graph;
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone)]
pub struct CitationLike {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    pub words_per_node: usize,
    /// Probability that a word comes from the node's class vocabulary.
    pub topic_strength: f64,
    pub avg_degree: f64,
    pub homophily: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CitationLike {
    fn default() -> Self {
        Self {
            nodes: 600,
            classes: 4,
            features: 200,
            words_per_node: 12,
            topic_strength: 0.35,
            avg_degree: 4.0,
            homophily: 0.85,
            train_per_class: 20,
            val: 150,
            test: 300,
        }
    }
}

impl CitationLike {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = RngStream::new(seed, 0x5e7).chacha();
        let n = self.nodes;
        let c = self.classes;
        let labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..c) as i64).collect();

        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }

        let vocab = (self.features / c).max(1);
        let mut features = Tensor2D::zeros(n, self.features);
        for i in 0..n {
            let class = labels[i] as usize;
            let mut words = Vec::with_capacity(self.words_per_node);
            for _ in 0..self.words_per_node {
                let w = if rng.random::<f64>() < self.topic_strength {
                    (class * vocab + rng.random_range(0..vocab)) % self.features
                } else {
                    rng.random_range(0..self.features)
                };
                words.push(w);
            }
            words.sort_unstable();
            words.dedup();
            let weight = 1.0 / words.len() as f64;
            for w in words {
                features.set(i, w, weight);
            }
        }

        let m = (n as f64 * self.avg_degree / 2.0).round() as usize;
        let mut edges = Vec::with_capacity(m);
        while edges.len() < m {
            let u = rng.random_range(0..n);
            let v = if rng.random::<f64>() < self.homophily {
                let peers = &by_class[labels[u] as usize];
                peers[rng.random_range(0..peers.len())]
            } else {
                rng.random_range(0..n)
            };
            if u != v {
                edges.push((u, v));
            }
        }
        let graph = Graph::from_edges(n, &edges)?;

        let mut train = vec![false; n];
        let mut val = vec![false; n];
        let mut test = vec![false; n];
        let mut taken = vec![false; n];
        for members in &by_class {
            for &i in members.iter().take(self.train_per_class) {
                train[i] = true;
                taken[i] = true;
            }
        }
        let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        rest.shuffle(&mut rng);
        for (k, &i) in rest.iter().enumerate() {
            if k < self.val {
                val[i] = true;
            } else if k < self.val + self.test {
                test[i] = true;
            }
        }
        Dataset::new("citation-like", graph, features, labels, c, train, val, test)
    }
}

/// Ring of `n` nodes split into `classes` contiguous arcs. Features are a
/// noisy one-hot of the class, so neighbourhood averaging helps.
pub fn ring(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = RngStream::new(seed, 0x417).chacha();
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let graph = Graph::from_edges(n, &edges)?;
    let labels: Vec<i64> = (0..n).map(|i| (i * classes / n) as i64).collect();
    let features = Tensor2D::from_fn(n, classes, |i, c| {
        let hot = if labels[i] as usize == c { 1.0 } else { 0.0 };
        hot + noise * rng.random_range(-1.0..1.0)
    });
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for i in 0..n {
        match i % 4 {
            0 => train[i] = true,
            1 => val[i] = true,
            _ => test[i] = true,
        }
    }
    Dataset::new("ring", graph, features, labels, classes, train, val, test)
}

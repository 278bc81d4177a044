//! Immutable CSR graph storage and node-induced sub-graphs.
//!
//! Row `i` lists the sources `j` of edges `j → i`; since every graph built
//! here is symmetric this is also the out-neighbour list. Graphs are kept in
//! canonical form (rows strictly increasing, self-loop on every node), so two
//! graphs are equal exactly when their arrays are equal.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Graph {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Local index → id in the root graph.
    node_ids: Vec<usize>,
}

impl Graph {
    /// Builds a canonical graph from an undirected edge list: edges are
    /// symmetrized and deduplicated, and a self-loop is added to every node.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut degree = vec![1usize; n];
        for &(u, v) in edges {
            for id in [u, v] {
                if id >= n {
                    return Err(Error::NodeOutOfRange {
                        id: id as i64,
                        n,
                        context: format!("edge ({u}, {v})"),
                    });
                }
            }
            if u != v {
                degree[u] += 1;
                degree[v] += 1;
            }
        }
        let mut adj: Vec<Vec<usize>> = degree.iter().map(|&d| Vec::with_capacity(d)).collect();
        for (i, row) in adj.iter_mut().enumerate() {
            row.push(i);
        }
        for &(u, v) in edges {
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(&row);
            row_ptr.push(col_idx.len());
        }
        Ok(Graph {
            n,
            row_ptr,
            col_idx,
            node_ids: (0..n).collect(),
        })
    }

    /// Wraps raw CSR arrays, checking every invariant.
    pub fn from_csr(
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        node_ids: Option<Vec<usize>>,
    ) -> Result<Graph> {
        let n = row_ptr.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidGraph("row_ptr must have at least one entry".into())
        })?;
        let g = Graph {
            n,
            row_ptr,
            col_idx,
            node_ids: node_ids.unwrap_or_else(|| (0..n).collect()),
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks the CSR, symmetry and self-loop invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        if self.row_ptr.len() != self.n + 1 {
            return bad(format!("row_ptr has length {}, expected {}", self.row_ptr.len(), self.n + 1));
        }
        if self.row_ptr[0] != 0 || self.row_ptr[self.n] != self.col_idx.len() {
            return bad("row_ptr must start at 0 and end at the entry count".into());
        }
        if self.node_ids.len() != self.n {
            return bad(format!("{} node ids for {} nodes", self.node_ids.len(), self.n));
        }
        for i in 0..self.n {
            if self.row_ptr[i] > self.row_ptr[i + 1] {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let row = self.neighbors(i);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} is not strictly increasing"));
            }
            if let Some(&j) = row.iter().find(|&&j| j >= self.n) {
                return bad(format!("row {i} references node {j}"));
            }
            if row.binary_search(&i).is_err() {
                return bad(format!("node {i} has no self-loop"));
            }
            for &j in row {
                if !self.has_edge(i, j) {
                    return bad(format!("edge {j} -> {i} has no reverse"));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored directed entries, self-loops included.
    pub fn num_entries(&self) -> usize {
        self.col_idx.len()
    }

    /// Number of distinct undirected non-loop edges.
    pub fn num_undirected_edges(&self) -> usize {
        (self.col_idx.len() - self.num_self_loops()) / 2
    }

    fn num_self_loops(&self) -> usize {
        (0..self.n)
            .filter(|&i| self.neighbors(i).binary_search(&i).is_ok())
            .count()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        dst < self.n && self.neighbors(dst).binary_search(&src).is_ok()
    }

    /// Sub-graph over `nodes` (sorted, unique, local ids of `self`) keeping
    /// exactly the edges with both endpoints inside. Nodes are re-indexed
    /// `0..nodes.len()` in order and `node_ids` maps back to root ids.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        check_node_set(nodes, self.n)?;
        let mut local = vec![usize::MAX; self.n];
        for (k, &v) in nodes.iter().enumerate() {
            local[v] = k;
        }
        let mut row_ptr = Vec::with_capacity(nodes.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for &v in nodes {
            // Ascending global ids map to ascending local ids, so rows stay sorted.
            col_idx.extend(
                self.neighbors(v)
                    .iter()
                    .map(|&j| local[j])
                    .filter(|&j| j != usize::MAX),
            );
            row_ptr.push(col_idx.len());
        }
        Ok(Graph {
            n: nodes.len(),
            row_ptr,
            col_idx,
            node_ids: nodes.iter().map(|&v| self.node_ids[v]).collect(),
        })
    }

    /// Fraction of non-loop edges that survive inside the induced sub-graphs
    /// of `parts`, which must partition `0..n`.
    pub fn edge_retention(&self, parts: &[Vec<usize>]) -> Result<f64> {
        let mut owner = vec![usize::MAX; self.n];
        for (p, part) in parts.iter().enumerate() {
            for &v in part {
                if v >= self.n {
                    return Err(Error::NotAPartition(format!("node {v} out of range")));
                }
                if owner[v] != usize::MAX {
                    return Err(Error::NotAPartition(format!("node {v} appears twice")));
                }
                owner[v] = p;
            }
        }
        if let Some(v) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::NotAPartition(format!("node {v} is not covered")));
        }
        let mut total = 0usize;
        let mut kept = 0usize;
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                if i != j {
                    total += 1;
                    if owner[i] == owner[j] {
                        kept += 1;
                    }
                }
            }
        }
        if total == 0 {
            return Ok(1.0);
        }
        Ok(kept as f64 / total as f64)
    }
}

/// Requires `nodes` strictly increasing and below `n`.
pub fn check_node_set(nodes: &[usize], n: usize) -> Result<()> {
    if let Some(w) = nodes.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::InvalidNodeSet(format!(
            "ids must be strictly increasing, found {} then {}",
            w[0], w[1]
        )));
    }
    if let Some(&last) = nodes.last() {
        if last >= n {
            return Err(Error::InvalidNodeSet(format!("id {last} out of range for {n} nodes")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    fn cycle(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn path_csr_by_hand() {
        let g = path(4);
        // Degrees with self-loops: 2, 3, 3, 2.
        assert_eq!(g.row_ptr(), &[0, 2, 5, 8, 10]);
        assert_eq!(g.col_idx(), &[0, 1, 0, 1, 2, 1, 2, 3, 2, 3]);
        assert_eq!(g.num_undirected_edges(), 3);
        g.validate().unwrap();
    }

    #[test]
    fn no_edges_gives_only_self_loops() {
        let g = Graph::from_edges(3, &[]).unwrap();
        assert_eq!(g.num_entries(), 3);
        assert_eq!(g.row_ptr(), &[0, 1, 2, 3]);
        assert_eq!(g.num_undirected_edges(), 0);
    }

    #[test]
    fn duplicates_and_reversed_pairs_collapse() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 0), (0, 1), (2, 2)]).unwrap();
        assert_eq!(g.num_undirected_edges(), 1);
        assert_eq!(g, Graph::from_edges(3, &[(1, 0)]).unwrap());
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(matches!(
            Graph::from_edges(2, &[(0, 2)]),
            Err(Error::NodeOutOfRange { id: 2, .. })
        ));
    }

    #[test]
    fn full_set_induction_is_identity() {
        let g = cycle(6);
        assert_eq!(g.induced_subgraph(&(0..6).collect::<Vec<_>>()).unwrap(), g);
    }

    #[test]
    fn cut_path_keeps_only_loops() {
        let g = path(3);
        let s = g.induced_subgraph(&[0, 2]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.row_ptr(), &[0, 1, 2]);
        assert_eq!(s.col_idx(), &[0, 1]);
        assert_eq!(s.node_ids(), &[0, 2]);
        s.validate().unwrap();
    }

    #[test]
    fn bad_node_sets_rejected() {
        let g = path(4);
        assert!(g.induced_subgraph(&[2, 1]).is_err());
        assert!(g.induced_subgraph(&[1, 1]).is_err());
        assert!(g.induced_subgraph(&[0, 4]).is_err());
        assert_eq!(g.induced_subgraph(&[]).unwrap().n(), 0);
    }

    #[test]
    fn retention_examples() {
        let g = cycle(4);
        assert_eq!(g.edge_retention(&[vec![0, 1, 2, 3]]).unwrap(), 1.0);
        assert_eq!(g.edge_retention(&[vec![0, 1], vec![2, 3]]).unwrap(), 0.5);
        assert!(g.edge_retention(&[vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(g.edge_retention(&[vec![0, 1], vec![2]]).is_err());
    }

    #[test]
    fn from_csr_rejects_broken_invariants() {
        // Missing self-loop on node 1.
        assert!(Graph::from_csr(vec![0, 1, 1], vec![0], None).is_err());
        // Asymmetric.
        assert!(Graph::from_csr(vec![0, 2, 3], vec![0, 1, 1], None).is_err());
        // Unsorted row.
        assert!(Graph::from_csr(vec![0, 2, 4], vec![1, 0, 0, 1], None).is_err());
        let ok = Graph::from_csr(vec![0, 2, 4], vec![0, 1, 0, 1], None).unwrap();
        assert_eq!(ok, Graph::from_edges(2, &[(0, 1)]).unwrap());
    }
}

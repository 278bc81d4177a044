//! Node-classification datasets and the on-disk directory format.
//!
//! A dataset directory holds five UTF-8 text files:
//!
//! | file           | contents                                                   |
//! |----------------|------------------------------------------------------------|
//! | `meta.json`    | `{"name", "num_nodes", "num_features", "num_classes"}`     |
//! | `features.csv` | one row of `num_features` comma-separated floats per node  |
//! | `labels.csv`   | one integer per node, `-1` for unlabeled                   |
//! | `edges.csv`    | one `u,v` pair per line, 0-based, undirected               |
//! | `splits.csv`   | one of `train`, `val`, `test`, `none` per node             |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    graph: Graph,
    features: Tensor2D,
    labels: Vec<i64>,
    num_classes: usize,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
    edge_file_entries: usize,
}

impl Dataset {
    /// Assembles and validates a dataset.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        graph: Graph,
        features: Tensor2D,
        labels: Vec<i64>,
        num_classes: usize,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<Dataset> {
        let n = graph.n();
        if features.rows() != n {
            return Err(Error::shape(
                "dataset",
                format!("{} feature rows for {n} nodes", features.rows()),
            ));
        }
        for (what, len) in [
            ("labels", labels.len()),
            ("train_mask", train_mask.len()),
            ("val_mask", val_mask.len()),
            ("test_mask", test_mask.len()),
        ] {
            if len != n {
                return Err(Error::shape("dataset", format!("{what} has length {len}, expected {n}")));
            }
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes as i64 || label < -1 {
                return Err(Error::LabelOutOfRange {
                    node,
                    label,
                    num_classes,
                });
            }
        }
        for node in 0..n {
            let hits = [train_mask[node], val_mask[node], test_mask[node]]
                .iter()
                .filter(|&&b| b)
                .count();
            if hits > 1 {
                return Err(Error::OverlappingMasks { node });
            }
            if hits == 1 && labels[node] < 0 {
                return Err(Error::UnlabeledMaskedNode { node });
            }
        }
        let edge_file_entries = graph.num_undirected_edges();
        Ok(Dataset {
            name: name.into(),
            graph,
            features,
            labels,
            num_classes,
            train_mask,
            val_mask,
            test_mask,
            edge_file_entries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.n()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    /// Lines in the source `edges.csv` (duplicates and reversed pairs
    /// included); for in-memory datasets, the number of undirected edges.
    pub fn edge_file_entries(&self) -> usize {
        self.edge_file_entries
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (count(&self.train_mask), count(&self.val_mask), count(&self.test_mask))
    }

    fn split_of(&self, i: usize) -> Split {
        if self.train_mask[i] {
            Split::Train
        } else if self.val_mask[i] {
            Split::Val
        } else if self.test_mask[i] {
            Split::Test
        } else {
            Split::None
        }
    }
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::MissingFile(p));
    }
    Ok(p)
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path)?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = require(dir, "meta.json")?;
    let features_path = require(dir, "features.csv")?;
    let labels_path = require(dir, "labels.csv")?;
    let edges_path = require(dir, "edges.csv")?;
    let splits_path = require(dir, "splits.csv")?;

    let meta: Meta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))?;
    let n = meta.num_nodes;
    let d = meta.num_features;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&features_path)?;
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::RaggedFeatures {
                row,
                got: record.len(),
                expected: d,
            });
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(&features_path, row + 1, format!("bad float {field:?}")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(&features_path, rows, format!("{rows} feature rows, meta says {n}")));
    }
    let features = Tensor2D::from_vec(n, d, data)?;

    let mut labels = Vec::with_capacity(n);
    for (line, text) in lines(&labels_path)? {
        let text = text?;
        let t = text.trim();
        if t.is_empty() {
            continue;
        }
        let label: i64 = t
            .parse()
            .map_err(|_| parse_err(&labels_path, line, format!("bad label {t:?}")))?;
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            &labels_path,
            labels.len(),
            format!("{} labels, meta says {n}", labels.len()),
        ));
    }

    let mut edges = Vec::new();
    for (line, text) in lines(&edges_path)? {
        let text = text?;
        let t = text.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split(',');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&edges_path, line, format!("expected `u,v`, got {t:?}")));
        };
        let parse = |s: &str| -> Result<usize> {
            let v: i64 = s
                .trim()
                .parse()
                .map_err(|_| parse_err(&edges_path, line, format!("bad node id {s:?}")))?;
            if v < 0 || v as usize >= n {
                return Err(Error::NodeOutOfRange {
                    id: v,
                    n,
                    context: format!("{}:{line}", edges_path.display()),
                });
            }
            Ok(v as usize)
        };
        edges.push((parse(a)?, parse(b)?));
    }

    let mut splits = Vec::with_capacity(n);
    for (line, text) in lines(&splits_path)? {
        let text = text?;
        let t = text.trim();
        if t.is_empty() {
            continue;
        }
        splits.push(match t {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "none" => Split::None,
            other => return Err(parse_err(&splits_path, line, format!("unknown split {other:?}"))),
        });
    }
    if splits.len() != n {
        return Err(parse_err(
            &splits_path,
            splits.len(),
            format!("{} split entries, meta says {n}", splits.len()),
        ));
    }

    let graph = Graph::from_edges(n, &edges)?;
    let mask = |s: Split| splits.iter().map(|&x| x == s).collect::<Vec<_>>();
    let mut ds = Dataset::new(
        meta.name,
        graph,
        features,
        labels,
        meta.num_classes,
        mask(Split::Train),
        mask(Split::Val),
        mask(Split::Test),
    )?;
    ds.edge_file_entries = edges.len();
    Ok(ds)
}

/// Writes `ds` in the directory format; `load_dataset` reads it back equal.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let meta = Meta {
        name: ds.name.clone(),
        num_nodes: ds.num_nodes(),
        num_features: ds.num_features(),
        num_classes: ds.num_classes,
    };
    serde_json::to_writer_pretty(File::create(dir.join("meta.json"))?, &meta)?;

    let mut w = BufWriter::new(File::create(dir.join("features.csv"))?);
    for r in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("labels.csv"))?);
    for l in &ds.labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("edges.csv"))?);
    for i in 0..ds.graph.n() {
        for &j in ds.graph.neighbors(i) {
            if i < j {
                writeln!(w, "{i},{j}")?;
            }
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("splits.csv"))?);
    for i in 0..ds.num_nodes() {
        let s = match ds.split_of(i) {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        };
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

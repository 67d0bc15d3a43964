//! Dataset directories and the synthetic benchmark generator.
//!
//! A dataset directory holds four tab-separated text files without headers:
//!
//! | file            | line format                                   |
//! |-----------------|-----------------------------------------------|
//! | `meta.tsv`      | `num_nodes  num_classes  multi_label(0\|1)`   |
//! | `edges.tsv`     | `u  v`                                        |
//! | `features.tsv`  | `node_id  f1 ... fd` (optional)               |
//! | `subgraphs.tsv` | `split  ids,comma,separated  labels,comma`    |
//!
//! Node ids must already be dense in `[0, num_nodes)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{load_edge_list, CsrGraph, FeatureMatrix, Split, SubgraphDataset, SubgraphInstance};
use crate::io::{read_to_string, write_atomic};
use crate::rng::{Domain, RngStream};

pub const META_FILE: &str = "meta.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const SUBGRAPHS_FILE: &str = "subgraphs.tsv";

/// Smallest accepted `num_subgraphs` for [`generate_synthetic`].
pub const MIN_SYNTHETIC_SUBGRAPHS: usize = 20;

/// Largest fringe size drawn by the generator; labels flip at
/// [`SYNTHETIC_LABEL_THRESHOLD`].
pub const SYNTHETIC_MAX_FRINGE: usize = 6;
pub const SYNTHETIC_LABEL_THRESHOLD: usize = 4;

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_id_list(path: &Path, line: usize, field: &str) -> Result<Vec<usize>> {
    field
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_error(path, line, format!("bad id {s:?}")))
        })
        .collect()
}

struct Meta {
    num_nodes: usize,
    num_classes: usize,
    multi_label: bool,
}

fn load_meta(path: &Path) -> Result<Meta> {
    let text = read_to_string(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| parse_error(path, 1, "empty meta file"))?;
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(parse_error(path, 1, "expected num_nodes, num_classes, multi_label"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_error(path, 1, format!("bad integer {s:?}")))
    };
    let multi_label = match fields[2] {
        "0" => false,
        "1" => true,
        other => {
            return Err(parse_error(
                path,
                1,
                format!("multi_label must be 0 or 1, got {other:?}"),
            ))
        }
    };
    Ok(Meta {
        num_nodes: num(fields[0])?,
        num_classes: num(fields[1])?,
        multi_label,
    })
}

fn load_features(path: &Path, num_nodes: usize) -> Result<FeatureMatrix> {
    let text = read_to_string(path)?;
    let mut dim = None;
    let mut values = Vec::new();
    let mut seen = vec![false; num_nodes];
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(num_nodes);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line_no, "bad node id"))?;
        if id >= num_nodes {
            return Err(parse_error(path, line_no, format!("node id {id} out of range")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(parse_error(path, line_no, format!("duplicate row for node {id}")));
        }
        let row = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(path, line_no, format!("bad feature value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("expected {d} features, found {}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push((id, row));
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidDataset(format!("no feature row for node {missing}")));
    }
    let dim = dim.unwrap_or(0);
    if dim == 0 {
        return Err(Error::InvalidDataset("feature rows are empty".into()));
    }
    rows.sort_unstable_by_key(|(id, _)| *id);
    for (_, row) in rows {
        values.extend(row);
    }
    FeatureMatrix::new(num_nodes, dim, values)
}

fn load_subgraphs(path: &Path) -> Result<Vec<SubgraphInstance>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_error(path, line_no, "expected split, node ids, labels"));
        }
        let split: Split = fields[0]
            .trim()
            .parse()
            .map_err(|e: String| parse_error(path, line_no, e))?;
        let nodes = parse_id_list(path, line_no, fields[1])?;
        let labels = parse_id_list(path, line_no, fields[2])?;
        out.push(SubgraphInstance::new(nodes, labels, split));
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
///
/// Without `features.tsv` every node gets a single constant-1 feature.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SubgraphDataset> {
    let dir = dir.as_ref();
    let meta = load_meta(&dir.join(META_FILE))?;
    let graph = load_edge_list(dir.join(EDGES_FILE), meta.num_nodes)?;
    let features_path = dir.join(FEATURES_FILE);
    let features = if features_path.exists() {
        load_features(&features_path, meta.num_nodes)?
    } else {
        FeatureMatrix::constant(meta.num_nodes)
    };
    let instances = load_subgraphs(&dir.join(SUBGRAPHS_FILE))?;
    SubgraphDataset::new(graph, features, instances, meta.num_classes, meta.multi_label)
}

fn join_ids(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{id}").unwrap();
    }
    s
}

/// Writes all four dataset files into `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &SubgraphDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = format!(
        "{}\t{}\t{}\n",
        ds.graph.num_nodes(),
        ds.num_classes,
        u8::from(ds.multi_label)
    );

    let mut edges = String::new();
    for (u, v) in ds.graph.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }

    let mut features = String::new();
    for u in 0..ds.features.rows() {
        write!(features, "{u}").unwrap();
        for v in ds.features.row(u) {
            write!(features, "\t{v}").unwrap();
        }
        features.push('\n');
    }

    let mut subgraphs = String::new();
    for inst in &ds.instances {
        writeln!(
            subgraphs,
            "{}\t{}\t{}",
            inst.split,
            join_ids(&inst.node_ids),
            join_ids(&inst.labels)
        )
        .unwrap();
    }

    write_atomic(dir.join(META_FILE), meta.as_bytes())?;
    write_atomic(dir.join(EDGES_FILE), edges.as_bytes())?;
    write_atomic(dir.join(FEATURES_FILE), features.as_bytes())?;
    write_atomic(dir.join(SUBGRAPHS_FILE), subgraphs.as_bytes())?;
    Ok(())
}

/// Fringe size drawn for each synthetic subgraph, in instance order.
///
/// Sizes cycle through `1..=6` and are then shuffled, so every size (and so
/// both labels) occurs whenever there are at least 20 subgraphs.
pub fn synthetic_fringe_sizes(num_subgraphs: usize, seed: u64) -> Vec<usize> {
    let mut sizes: Vec<usize> = (0..num_subgraphs).map(|i| 1 + i % SYNTHETIC_MAX_FRINGE).collect();
    let mut rng = RngStream::keyed(Domain::Synthetic, seed, 0, 0, 0);
    sizes.shuffle(&mut rng);
    sizes
}

/// Generates the planted-triangle benchmark.
///
/// Each subgraph is a triangle whose three nodes are all adjacent to `b`
/// private fringe nodes, `b` in `1..=6`. The label is `1` iff `b >= 4`, so it
/// depends only on what surrounds the subgraph: every subgraph induces the
/// same triangle and all features are the constant 1. Splits are 80/10/10.
pub fn generate_synthetic(num_subgraphs: usize, seed: u64) -> Result<SubgraphDataset> {
    if num_subgraphs < MIN_SYNTHETIC_SUBGRAPHS {
        return Err(Error::config(
            "num_subgraphs",
            format!("must be at least {MIN_SYNTHETIC_SUBGRAPHS}, got {num_subgraphs}"),
        ));
    }
    let fringe = synthetic_fringe_sizes(num_subgraphs, seed);

    let mut edges = Vec::new();
    let mut instances = Vec::with_capacity(num_subgraphs);
    let mut next = 0usize;
    for &b in &fringe {
        let clique = [next, next + 1, next + 2];
        next += 3;
        edges.extend([(clique[0], clique[1]), (clique[1], clique[2]), (clique[0], clique[2])]);
        for f in next..next + b {
            edges.extend(clique.iter().map(|&c| (c, f)));
        }
        next += b;
        let label = usize::from(b >= SYNTHETIC_LABEL_THRESHOLD);
        instances.push(SubgraphInstance::new(clique.to_vec(), vec![label], Split::Train));
    }

    let mut order: Vec<usize> = (0..num_subgraphs).collect();
    order.shuffle(&mut RngStream::keyed(Domain::Synthetic, seed, 1, 0, 0));
    let n_train = num_subgraphs * 8 / 10;
    let n_val = num_subgraphs / 10;
    for (rank, &i) in order.iter().enumerate() {
        instances[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let graph = CsrGraph::from_edges(next, edges)?;
    let features = FeatureMatrix::constant(next);
    SubgraphDataset::new(graph, features, instances, 2, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::induced_subgraph;

    #[test]
    fn synthetic_contract() {
        let ds = generate_synthetic(20, 7).unwrap();
        assert_eq!(ds.instances.len(), 20);
        assert!(ds.instances.iter().all(|s| s.node_ids.len() == 3));
        let labels: Vec<usize> = ds.instances.iter().map(|s| s.labels[0]).collect();
        assert!(labels.contains(&0) && labels.contains(&1));
        ds.graph.validate().unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            assert!(!ds.split_indices(split).is_empty());
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(generate_synthetic(40, 3).unwrap(), generate_synthetic(40, 3).unwrap());
        assert_ne!(generate_synthetic(40, 3).unwrap(), generate_synthetic(40, 4).unwrap());
    }

    #[test]
    fn synthetic_labels_follow_fringe_threshold() {
        let ds = generate_synthetic(60, 11).unwrap();
        let fringe = synthetic_fringe_sizes(60, 11);
        for (inst, &b) in ds.instances.iter().zip(&fringe) {
            let external = ds.graph.degree(inst.node_ids[0]) - 2;
            assert_eq!(external, b);
            assert_eq!(inst.labels[0], usize::from(b >= 4));
            let sub = induced_subgraph(&ds.graph, &inst.node_ids).unwrap();
            assert_eq!(sub.num_edges(), 3);
        }
        assert!(fringe.contains(&4));
    }

    #[test]
    fn too_few_subgraphs() {
        assert!(generate_synthetic(10, 0).is_err());
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(20, 1).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn minimal_dataset_without_features() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), "3\t1\t0\n").unwrap();
        fs::write(dir.path().join(EDGES_FILE), "0\t1\n1\t2\n0\t2\n").unwrap();
        fs::write(dir.path().join(SUBGRAPHS_FILE), "train\t0,1\t0\n").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.instances.len(), 1);
        assert_eq!(ds.features, FeatureMatrix::constant(3));
    }

    #[test]
    fn unknown_node_and_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), "3\t2\t0\n").unwrap();
        fs::write(dir.path().join(EDGES_FILE), "0\t1\n").unwrap();
        fs::write(dir.path().join(SUBGRAPHS_FILE), "train\t0,9\t0\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::NodeOutOfRange { id: 9, .. })
        ));
        fs::write(dir.path().join(SUBGRAPHS_FILE), "train\t0,1\t2\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn ragged_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), "2\t1\t0\n").unwrap();
        fs::write(dir.path().join(EDGES_FILE), "0\t1\n").unwrap();
        fs::write(dir.path().join(SUBGRAPHS_FILE), "train\t0\t0\n").unwrap();
        fs::write(dir.path().join(FEATURES_FILE), "0\t1\t2\n1\t3\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 2, .. })));
    }
}

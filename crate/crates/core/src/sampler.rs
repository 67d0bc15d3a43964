//! Exact and random-walk-sparsified subgraph neighborhoods, plus the
//! per-epoch view schedules used during training.
//!
//! A *view* is one sampled neighborhood node set for one subgraph. Three
//! strategies decide where views come from:
//!
//! * [`Strategy::Ov`] samples a fresh view per training subgraph every epoch.
//! * [`Strategy::Pv`] samples `n_v` views per subgraph once and trains on all
//!   of them every epoch.
//! * [`Strategy::Pov`] samples `n_v` views once and trains on a random
//!   `n_ve`-subset of them each epoch.
//!
//! All randomness comes from [`RngStream`]s keyed by
//! `(base_seed, subgraph, view, epoch)`, so stores and schedules are
//! reproducible and independent of thread count.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{CsrGraph, Split, SubgraphDataset, SubgraphInstance};
use crate::io::{read_to_string, write_atomic};
use crate::rng::{Domain, RngStream};

/// Epoch key reserved for evaluation-time sampling under OV.
pub const EVAL_EPOCH: i64 = -1;

/// Nodes outside `subgraph` within `h` hops of it, sorted.
///
/// Multi-source BFS from every subgraph node, truncated at depth `h`.
pub fn exact_neighborhood(g: &CsrGraph, subgraph: &[usize], h: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; g.num_nodes()];
    let mut queue = VecDeque::new();
    for &s in subgraph {
        if depth[s] == usize::MAX {
            depth[s] = 0;
            queue.push_back(s);
        }
    }
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        if depth[u] == h {
            continue;
        }
        for &v in g.neighbors(u) {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                out.push(v);
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    out
}

/// One sampled neighborhood of one subgraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodView {
    pub subgraph_index: usize,
    /// Sorted, disjoint from the subgraph's own nodes.
    pub node_ids: Vec<usize>,
    pub h: usize,
    pub k: usize,
}

impl NeighborhoodView {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Upper bound on the size of any view: each of the `k` walks from each
/// subgraph node visits at most `h` new nodes.
pub fn view_size_bound(subgraph_len: usize, h: usize, k: usize) -> usize {
    subgraph_len * h * k
}

/// Runs `k` simple random walks of `h` steps from every node of `s` and keeps
/// the visited nodes that are not in `s`.
///
/// Walks may wander back into the subgraph; those nodes are dropped at the
/// end rather than avoided. A walk from an isolated node stops immediately.
pub fn sample_view(
    g: &CsrGraph,
    s: &SubgraphInstance,
    subgraph_index: usize,
    h: usize,
    k: usize,
    rng: &mut RngStream,
) -> NeighborhoodView {
    let mut visited = Vec::with_capacity(s.node_ids.len() * h * k);
    for &root in &s.node_ids {
        for _ in 0..k {
            let mut cur = root;
            for _ in 0..h {
                let nbrs = g.neighbors(cur);
                if nbrs.is_empty() {
                    break;
                }
                cur = nbrs[rng.index(nbrs.len())];
                visited.push(cur);
            }
        }
    }
    visited.sort_unstable();
    visited.dedup();
    visited.retain(|&v| !s.contains(v));
    NeighborhoodView {
        subgraph_index,
        node_ids: visited,
        h,
        k,
    }
}

fn keyed_view(
    ds: &SubgraphDataset,
    params: &ViewParams,
    subgraph_index: usize,
    view_index: usize,
    epoch: i64,
) -> NeighborhoodView {
    let mut rng = RngStream::keyed(
        Domain::Walk,
        params.base_seed,
        subgraph_index as u64,
        view_index as u64,
        epoch,
    );
    sample_view(
        &ds.graph,
        &ds.instances[subgraph_index],
        subgraph_index,
        params.h,
        params.k,
        &mut rng,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Online views: fresh samples every epoch.
    Ov,
    /// Precomputed views, all used every epoch.
    Pv,
    /// Precomputed views, a random subset used each epoch.
    Pov,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ov => "ov",
            Strategy::Pv => "pv",
            Strategy::Pov => "pov",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ov" => Ok(Strategy::Ov),
            "pv" => Ok(Strategy::Pv),
            "pov" => Ok(Strategy::Pov),
            other => Err(format!("unknown strategy {other:?} (expected ov, pv or pov)")),
        }
    }
}

/// Everything that determines a view store and its schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    pub strategy: Strategy,
    pub n_v: usize,
    pub n_ve: usize,
    pub h: usize,
    pub k: usize,
    /// Views drawn per subgraph at evaluation time under OV.
    pub n_eval: usize,
    pub base_seed: u64,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            strategy: Strategy::Pov,
            n_v: 20,
            n_ve: 5,
            h: 1,
            k: 1,
            n_eval: 5,
            base_seed: 0,
        }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::config("h", "walk length must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "walks per node must be at least 1"));
        }
        match self.strategy {
            Strategy::Ov => {
                if self.n_eval == 0 {
                    return Err(Error::config("n_eval", "must be at least 1"));
                }
            }
            Strategy::Pv => {
                if self.n_v == 0 {
                    return Err(Error::config("n_v", "must be at least 1"));
                }
            }
            Strategy::Pov => {
                if self.n_v == 0 {
                    return Err(Error::config("n_v", "must be at least 1"));
                }
                if self.n_ve == 0 || self.n_ve > self.n_v {
                    return Err(Error::config(
                        "n_ve",
                        format!("must satisfy 1 <= n_ve <= n_v = {}, got {}", self.n_v, self.n_ve),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Precomputed views (PV/POV) or just the parameters (OV).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStore {
    params: ViewParams,
    views: Vec<Vec<NeighborhoodView>>,
}

/// Builds the view store for every instance of `ds`, all splits included.
pub fn build_view_store(ds: &SubgraphDataset, params: &ViewParams) -> Result<ViewStore> {
    params.validate()?;
    let views = match params.strategy {
        Strategy::Ov => Vec::new(),
        Strategy::Pv | Strategy::Pov => (0..ds.instances.len())
            .into_par_iter()
            .map(|i| (0..params.n_v).map(|j| keyed_view(ds, params, i, j, 0)).collect())
            .collect(),
    };
    Ok(ViewStore {
        params: params.clone(),
        views,
    })
}

impl ViewStore {
    pub fn params(&self) -> &ViewParams {
        &self.params
    }

    /// Total number of stored views.
    pub fn len(&self) -> usize {
        self.views.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored views of one subgraph (empty under OV).
    pub fn views_of(&self, subgraph_index: usize) -> &[NeighborhoodView] {
        self.views.get(subgraph_index).map_or(&[], Vec::as_slice)
    }

    /// Indices into [`Self::views_of`] used for `subgraph_index` at `epoch`
    /// under POV, in ascending order.
    pub fn pov_subset(&self, subgraph_index: usize, epoch: usize) -> Vec<usize> {
        let mut rng = RngStream::keyed(
            Domain::ViewSubset,
            self.params.base_seed,
            subgraph_index as u64,
            0,
            epoch as i64,
        );
        let mut picked = index::sample(&mut rng, self.params.n_v, self.params.n_ve).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Training `(subgraph, view)` pairs for one epoch, grouped by subgraph
    /// in dataset order.
    pub fn epoch_views<'a>(&'a self, ds: &SubgraphDataset, epoch: usize) -> Vec<(usize, Cow<'a, NeighborhoodView>)> {
        let train = ds.split_indices(Split::Train);
        let mut out = Vec::new();
        for i in train {
            match self.params.strategy {
                Strategy::Ov => {
                    out.push((i, Cow::Owned(keyed_view(ds, &self.params, i, 0, epoch as i64))));
                }
                Strategy::Pv => {
                    out.extend(self.views[i].iter().map(|v| (i, Cow::Borrowed(v))));
                }
                Strategy::Pov => {
                    out.extend(
                        self.pov_subset(i, epoch)
                            .into_iter()
                            .map(|j| (i, Cow::Borrowed(&self.views[i][j]))),
                    );
                }
            }
        }
        out
    }

    /// Views whose class probabilities are averaged when predicting
    /// `subgraph_index`.
    pub fn eval_views<'a>(&'a self, ds: &SubgraphDataset, subgraph_index: usize) -> Vec<Cow<'a, NeighborhoodView>> {
        match self.params.strategy {
            Strategy::Ov => (0..self.params.n_eval)
                .map(|j| Cow::Owned(keyed_view(ds, &self.params, subgraph_index, j, EVAL_EPOCH)))
                .collect(),
            Strategy::Pv | Strategy::Pov => self.views[subgraph_index].iter().map(Cow::Borrowed).collect(),
        }
    }

    /// Serializes stored views as `subgraph<TAB>view<TAB>ids` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, views) in self.views.iter().enumerate() {
            for (j, v) in views.iter().enumerate() {
                write!(s, "{i}\t{j}\t").unwrap();
                for (n, id) in v.node_ids.iter().enumerate() {
                    if n > 0 {
                        s.push(',');
                    }
                    write!(s, "{id}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Loads a cache written by [`Self::save_tsv`].
    ///
    /// The file must hold exactly `n_v` views for every instance of `ds`, with
    /// node sets in range, disjoint from their subgraph, and within the size
    /// bound. Walk length and count are not recorded in the file and are taken
    /// from `params`.
    pub fn load_tsv(path: impl AsRef<Path>, ds: &SubgraphDataset, params: &ViewParams) -> Result<ViewStore> {
        params.validate()?;
        let path = path.as_ref();
        if params.strategy == Strategy::Ov {
            return Ok(ViewStore {
                params: params.clone(),
                views: Vec::new(),
            });
        }
        let text = read_to_string(path)?;
        let n = ds.instances.len();
        let mut views: Vec<Vec<Option<NeighborhoodView>>> = vec![vec![None; params.n_v]; n];
        for (line_idx, line) in text.lines().enumerate() {
            let line_no = line_idx + 1;
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: m,
            };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err("expected subgraph, view, node ids".into()));
            }
            let i: usize = fields[0].parse().map_err(|_| err("bad subgraph index".into()))?;
            let j: usize = fields[1].parse().map_err(|_| err("bad view index".into()))?;
            if i >= n || j >= params.n_v {
                return Err(err(format!(
                    "view ({i},{j}) outside {n} subgraphs x {} views",
                    params.n_v
                )));
            }
            let mut ids = Vec::new();
            if !fields[2].is_empty() {
                for t in fields[2].split(',') {
                    ids.push(t.parse::<usize>().map_err(|_| err(format!("bad node id {t:?}")))?);
                }
            }
            ids.sort_unstable();
            ids.dedup();
            let inst = &ds.instances[i];
            for &id in &ids {
                if id >= ds.graph.num_nodes() {
                    return Err(Error::NodeOutOfRange {
                        id,
                        num_nodes: ds.graph.num_nodes(),
                    });
                }
                if inst.contains(id) {
                    return Err(Error::OverlappingView { subgraph: i, node: id });
                }
            }
            if ids.len() > view_size_bound(inst.node_ids.len(), params.h, params.k) {
                return Err(err(format!("view ({i},{j}) exceeds the size bound")));
            }
            views[i][j] = Some(NeighborhoodView {
                subgraph_index: i,
                node_ids: ids,
                h: params.h,
                k: params.k,
            });
        }
        let views = views
            .into_iter()
            .enumerate()
            .map(|(i, vs)| {
                vs.into_iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| Error::InvalidDataset(format!("view cache lacks view {j} of subgraph {i}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewStore {
            params: params.clone(),
            views,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::graph::FeatureMatrix;

    fn path(n: usize) -> CsrGraph {
        CsrGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    fn inst(nodes: &[usize]) -> SubgraphInstance {
        SubgraphInstance::new(nodes.to_vec(), vec![0], Split::Train)
    }

    #[test]
    fn exact_on_path_and_triangle() {
        let g = path(5);
        assert_eq!(exact_neighborhood(&g, &[2], 1), vec![1, 3]);
        assert_eq!(exact_neighborhood(&g, &[2], 2), vec![0, 1, 3, 4]);
        assert_eq!(exact_neighborhood(&g, &[2], 0), Vec::<usize>::new());
        let tri = CsrGraph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(exact_neighborhood(&tri, &[0, 1], 1), vec![2]);
    }

    #[test]
    fn star_center_hits_one_leaf() {
        let star = CsrGraph::from_edges(6, (1..6).map(|l| (0, l))).unwrap();
        for seed in 0..20 {
            let mut rng = RngStream::keyed(Domain::Walk, seed, 0, 0, 0);
            let v = sample_view(&star, &inst(&[0]), 0, 1, 1, &mut rng);
            assert_eq!(v.len(), 1);
            assert!((1..6).contains(&v.node_ids[0]));
        }
    }

    #[test]
    fn isolated_subgraph_has_empty_view() {
        let g = CsrGraph::from_edges(3, [(1, 2)]).unwrap();
        let mut rng = RngStream::keyed(Domain::Walk, 0, 0, 0, 0);
        assert!(sample_view(&g, &inst(&[0]), 0, 5, 3, &mut rng).is_empty());
    }

    #[test]
    fn same_key_same_view() {
        let g = path(30);
        let s = inst(&[10, 11]);
        let a = sample_view(&g, &s, 0, 4, 2, &mut RngStream::keyed(Domain::Walk, 9, 0, 3, 2));
        let b = sample_view(&g, &s, 0, 4, 2, &mut RngStream::keyed(Domain::Walk, 9, 0, 3, 2));
        assert_eq!(a, b);
    }

    fn synthetic_params(strategy: Strategy, n_v: usize, n_ve: usize) -> ViewParams {
        ViewParams {
            strategy,
            n_v,
            n_ve,
            base_seed: 5,
            ..ViewParams::default()
        }
    }

    #[test]
    fn store_sizes() {
        let ds = generate_synthetic(20, 1).unwrap();
        let pv = build_view_store(&ds, &synthetic_params(Strategy::Pv, 5, 1)).unwrap();
        assert_eq!(pv.len(), 100);
        let ov = build_view_store(&ds, &synthetic_params(Strategy::Ov, 5, 1)).unwrap();
        assert_eq!(ov.len(), 0);
        let pov = build_view_store(&ds, &synthetic_params(Strategy::Pov, 20, 5)).unwrap();
        assert!((0..20).all(|i| pov.views_of(i).len() == 20));
        let train = ds.split_indices(Split::Train).len();
        assert_eq!(pov.epoch_views(&ds, 3).len(), 5 * train);
        assert_eq!(pov.eval_views(&ds, 0).len(), 20);
        assert_eq!(ov.eval_views(&ds, 0).len(), 5);
    }

    #[test]
    fn invalid_pov_params_rejected() {
        let ds = generate_synthetic(20, 1).unwrap();
        let err = build_view_store(&ds, &synthetic_params(Strategy::Pov, 20, 25)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref key, .. } if key == "n_ve"));
        assert!(build_view_store(&ds, &synthetic_params(Strategy::Pov, 20, 0)).is_err());
    }

    #[test]
    fn pv_epoch_counts_and_order() {
        let g = path(12);
        let instances = vec![inst(&[1]), inst(&[5]), inst(&[9])];
        let ds = SubgraphDataset::new(g, FeatureMatrix::constant(12), instances, 1, false).unwrap();
        let store = build_view_store(&ds, &synthetic_params(Strategy::Pv, 4, 1)).unwrap();
        let pairs = store.epoch_views(&ds, 0);
        assert_eq!(pairs.len(), 12);
        let order: Vec<usize> = pairs.iter().map(|(i, _)| *i).collect();
        assert_eq!(order, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(pairs, store.epoch_views(&ds, 7));
    }

    #[test]
    fn ov_keyed_by_epoch() {
        let ds = generate_synthetic(40, 2).unwrap();
        let store = build_view_store(&ds, &synthetic_params(Strategy::Ov, 1, 1)).unwrap();
        assert_eq!(store.epoch_views(&ds, 4), store.epoch_views(&ds, 4));
        let differs = (1..10).any(|e| store.epoch_views(&ds, 0) != store.epoch_views(&ds, e));
        assert!(differs);
        assert_eq!(store.eval_views(&ds, 3), store.eval_views(&ds, 3));
    }

    #[test]
    fn tsv_cache_roundtrip() {
        let ds = generate_synthetic(20, 3).unwrap();
        let params = synthetic_params(Strategy::Pov, 4, 2);
        let store = build_view_store(&ds, &params).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        store.save_tsv(f.path()).unwrap();
        assert_eq!(ViewStore::load_tsv(f.path(), &ds, &params).unwrap(), store);

        let bigger = ViewParams { n_v: 5, ..params };
        assert!(ViewStore::load_tsv(f.path(), &ds, &bigger).is_err());
    }

    #[test]
    fn tsv_cache_rejects_overlap() {
        let ds = generate_synthetic(20, 3).unwrap();
        let params = synthetic_params(Strategy::Pv, 1, 1);
        let store = build_view_store(&ds, &params).unwrap();
        let s0 = ds.instances[0].node_ids[0];
        let tsv = store.to_tsv();
        let mut lines: Vec<String> = tsv.lines().map(String::from).collect();
        lines[0] = format!("0\t0\t{s0}");
        let text = lines.join("\n");
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        assert!(matches!(
            ViewStore::load_tsv(f.path(), &ds, &params),
            Err(Error::OverlappingView { subgraph: 0, .. })
        ));
    }
}

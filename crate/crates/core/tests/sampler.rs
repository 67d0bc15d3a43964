use std::collections::{BTreeSet, VecDeque};

use ssnp::graph::{CsrGraph, FeatureMatrix, Split, SubgraphDataset, SubgraphInstance};
use ssnp::rng::{Domain, RngStream};
use ssnp::sampler::{build_view_store, exact_neighborhood, sample_view, view_size_bound, Strategy, ViewParams};

/// Independent oracle: single-source BFS distances from every subgraph node,
/// minimized, then filtered by `1 <= d <= h`.
fn oracle(g: &CsrGraph, s: &[usize], h: usize) -> Vec<usize> {
    let n = g.num_nodes();
    let mut best = vec![usize::MAX; n];
    for &src in s {
        let mut dist = vec![usize::MAX; n];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (b, d) in best.iter_mut().zip(dist) {
            *b = (*b).min(d);
        }
    }
    (0..n).filter(|&v| best[v] >= 1 && best[v] <= h).collect()
}

fn erdos_renyi(n: usize, p: f64, rng: &mut RngStream) -> CsrGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.unit() < p {
                edges.push((u, v));
            }
        }
    }
    CsrGraph::from_edges(n, edges).unwrap()
}

fn random_subgraph(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let size = 1 + rng.index(5.min(n));
    let mut nodes = BTreeSet::new();
    while nodes.len() < size {
        nodes.insert(rng.index(n));
    }
    nodes.into_iter().collect()
}

#[test]
fn exact_neighborhood_matches_oracle_and_views_are_bounded_subsets() {
    let mut rng = RngStream::keyed(Domain::Aux, 2024, 0, 0, 0);
    for trial in 0..100 {
        let n = 2 + rng.index(199);
        let p = [0.01, 0.05, 0.1][trial % 3];
        let g = erdos_renyi(n, p, &mut rng);
        g.validate().unwrap();
        let nodes = random_subgraph(n, &mut rng);
        let s = SubgraphInstance::new(nodes.clone(), vec![0], Split::Train);
        for h in [1, 2, 5] {
            let exact = exact_neighborhood(&g, &nodes, h);
            assert_eq!(exact, oracle(&g, &nodes, h), "trial {trial}, h {h}");
            for k in [1, 3] {
                for view_index in 0..5 {
                    let mut walk = RngStream::keyed(Domain::Walk, trial as u64, 0, view_index, 0);
                    let view = sample_view(&g, &s, 0, h, k, &mut walk);
                    assert!(view.node_ids.windows(2).all(|w| w[0] < w[1]));
                    assert!(view.node_ids.iter().all(|v| exact.binary_search(v).is_ok()));
                    assert!(view.node_ids.iter().all(|v| !s.contains(*v)));
                    assert!(view.len() <= view_size_bound(nodes.len(), h, k));
                }
            }
        }
    }
}

/// Path 0-1-2-3-4 with the subgraph {2}. Every 2-hop neighbor is hit by a
/// single walk with probability at least 1/4, so 1000 epochs miss one with
/// probability below 4·(3/4)^1000.
#[test]
fn online_views_cover_the_neighborhood() {
    let g = CsrGraph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
    let ds = SubgraphDataset::new(
        g,
        FeatureMatrix::constant(5),
        vec![SubgraphInstance::new(vec![2], vec![0], Split::Train)],
        1,
        false,
    )
    .unwrap();
    let params = ViewParams {
        strategy: Strategy::Ov,
        h: 2,
        ..ViewParams::default()
    };
    let store = build_view_store(&ds, &params).unwrap();
    let mut union = BTreeSet::new();
    for epoch in 0..1000 {
        for (_, v) in store.epoch_views(&ds, epoch) {
            union.extend(v.node_ids.iter().copied());
        }
    }
    let exact = exact_neighborhood(&ds.graph, &[2], 2);
    assert_eq!(union.into_iter().collect::<Vec<_>>(), exact);
}

fn random_dataset(seed: u64) -> SubgraphDataset {
    let mut rng = RngStream::keyed(Domain::Aux, seed, 0, 0, 0);
    let n = 120;
    let g = erdos_renyi(n, 0.05, &mut rng);
    let instances = (0..30)
        .map(|i| {
            let split = [Split::Train, Split::Train, Split::Val][i % 3];
            SubgraphInstance::new(random_subgraph(n, &mut rng), vec![i % 2], split)
        })
        .collect();
    SubgraphDataset::new(g, FeatureMatrix::constant(n), instances, 2, false).unwrap()
}

fn params(strategy: Strategy, n_v: usize, n_ve: usize) -> ViewParams {
    ViewParams {
        strategy,
        n_v,
        n_ve,
        h: 2,
        k: 2,
        n_eval: 3,
        base_seed: 11,
    }
}

type EpochIds = Vec<(usize, Vec<usize>)>;

fn epoch_ids(store: &ssnp::sampler::ViewStore, ds: &SubgraphDataset, epoch: usize) -> EpochIds {
    store
        .epoch_views(ds, epoch)
        .into_iter()
        .map(|(i, v)| (i, v.node_ids.clone()))
        .collect()
}

#[test]
fn pov_with_all_views_equals_pv() {
    let ds = random_dataset(1);
    let pv = build_view_store(&ds, &params(Strategy::Pv, 6, 6)).unwrap();
    let pov = build_view_store(&ds, &params(Strategy::Pov, 6, 6)).unwrap();
    for epoch in 0..10 {
        assert_eq!(epoch_ids(&pv, &ds, epoch), epoch_ids(&pov, &ds, epoch));
    }
}

#[test]
fn online_views_replay_per_epoch() {
    let ds = random_dataset(2);
    let a = build_view_store(&ds, &params(Strategy::Ov, 1, 1)).unwrap();
    let b = build_view_store(&ds, &params(Strategy::Ov, 1, 1)).unwrap();
    let mut distinct = BTreeSet::new();
    for epoch in 0..10 {
        let ids = epoch_ids(&a, &ds, epoch);
        assert_eq!(ids, epoch_ids(&b, &ds, epoch));
        distinct.insert(ids);
    }
    assert!(distinct.len() > 1, "online views never changed");
}

#[test]
fn training_instances_per_epoch() {
    let ds = random_dataset(3);
    let train = ds.split_indices(Split::Train).len();
    let pv = build_view_store(&ds, &params(Strategy::Pv, 7, 3)).unwrap();
    let pov = build_view_store(&ds, &params(Strategy::Pov, 7, 3)).unwrap();
    let ov = build_view_store(&ds, &params(Strategy::Ov, 7, 3)).unwrap();
    for epoch in 0..5 {
        assert_eq!(pv.epoch_views(&ds, epoch).len(), 7 * train);
        assert_eq!(pov.epoch_views(&ds, epoch).len(), 3 * train);
        assert_eq!(ov.epoch_views(&ds, epoch).len(), train);
    }
    assert_eq!(pv.len(), 7 * ds.instances.len());
    assert!(ov.is_empty());
    assert_eq!(ov.eval_views(&ds, 0).len(), 3);
}

#[test]
fn pov_subsets_are_distinct_and_change() {
    let ds = random_dataset(4);
    let store = build_view_store(&ds, &params(Strategy::Pov, 20, 5)).unwrap();
    let mut seen = BTreeSet::new();
    for epoch in 0..20 {
        let subset = store.pov_subset(0, epoch);
        assert_eq!(subset.len(), 5);
        assert!(subset.windows(2).all(|w| w[0] < w[1]));
        assert!(subset.iter().all(|&j| j < 20));
        seen.insert(subset);
    }
    assert!(seen.len() > 1);
}

#[test]
fn store_is_independent_of_thread_count() {
    let ds = random_dataset(5);
    let p = params(Strategy::Pov, 8, 2);
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| build_view_store(&ds, &p).unwrap());
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| build_view_store(&ds, &p).unwrap());
    assert_eq!(serial, parallel);
    assert_eq!(serial.to_tsv(), parallel.to_tsv());
    for epoch in 0..3 {
        assert_eq!(epoch_ids(&serial, &ds, epoch), epoch_ids(&parallel, &ds, epoch));
    }
}

#[test]
fn view_cache_roundtrip() {
    let ds = random_dataset(6);
    let p = params(Strategy::Pv, 4, 4);
    let store = build_view_store(&ds, &p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("views.tsv");
    store.save_tsv(&path).unwrap();
    assert_eq!(ssnp::sampler::ViewStore::load_tsv(&path, &ds, &p).unwrap(), store);
}

//! 1-WL color refinement and a search for marked subgraph pairs that
//! neighborhood pooling separates but subgraph-only pooling does not.
//!
//! Signatures are sorted color multisets rather than hashes, so two
//! signatures are equal exactly when the multisets are.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::{softmax, PoolKind, Tape};
use crate::error::Result;
use crate::graph::{CsrGraph, FeatureMatrix, Split, SubgraphInstance};
use crate::model::{LayerKind, ModelConfig, SsnpModel};
use crate::rng::{Domain, RngStream};
use crate::sampler::{exact_neighborhood, NeighborhoodView};
use crate::train::AdamState;

/// Largest graph the exhaustive search accepts.
pub const MAX_SEARCH_NODES: usize = 10;

/// Probability of the true class both instances must reach for a trained
/// model to count as separating a pair.
pub const SEPARATION_THRESHOLD: f64 = 0.6;

/// Color ids shared by every graph refined against it. Id 0 is the uniform
/// initial color.
#[derive(Debug, Clone, Default)]
pub struct ColorDictionary {
    ids: HashMap<(u32, Vec<u32>), u32>,
}

impl ColorDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    fn id(&mut self, old: u32, mut neighbors: Vec<u32>) -> u32 {
        neighbors.sort_unstable();
        let next = self.ids.len() as u32 + 1;
        *self.ids.entry((old, neighbors)).or_insert(next)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlColoring {
    pub colors: Vec<u32>,
    pub iteration: usize,
}

/// Colorings after `0..=iters` rounds, refined against `dict`.
pub fn wl_history(g: &CsrGraph, iters: usize, dict: &mut ColorDictionary) -> Vec<WlColoring> {
    let mut out = vec![WlColoring {
        colors: vec![0; g.num_nodes()],
        iteration: 0,
    }];
    for t in 1..=iters {
        let prev = &out[t - 1].colors;
        let colors = (0..g.num_nodes())
            .map(|u| dict.id(prev[u], g.neighbors(u).iter().map(|&v| prev[v]).collect()))
            .collect();
        out.push(WlColoring { colors, iteration: t });
    }
    out
}

/// Coloring after `iters` rounds against a shared dictionary.
pub fn wl_refine_with(g: &CsrGraph, iters: usize, dict: &mut ColorDictionary) -> WlColoring {
    wl_history(g, iters, dict).pop().expect("history has iteration 0")
}

/// Coloring after `iters` rounds with a private dictionary.
pub fn wl_refine(g: &CsrGraph, iters: usize) -> WlColoring {
    wl_refine_with(g, iters, &mut ColorDictionary::new())
}

/// Sorted color multisets over a subgraph and over its exact neighborhood.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignaturePair {
    pub subgraph_sig: Vec<u32>,
    pub neighborhood_sig: Vec<u32>,
}

pub fn signatures(g: &CsrGraph, s: &[usize], h: usize, coloring: &WlColoring) -> SignaturePair {
    let multiset = |nodes: &[usize]| {
        let mut v: Vec<u32> = nodes.iter().map(|&u| coloring.colors[u]).collect();
        v.sort_unstable();
        v
    };
    SignaturePair {
        subgraph_sig: multiset(s),
        neighborhood_sig: multiset(&exact_neighborhood(g, s, h)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distinguishability {
    /// Subgraph-only multisets differ.
    pub plain: bool,
    /// Subgraph or neighborhood multisets differ.
    pub snp: bool,
}

/// Compares two marked graphs after `iters` rounds of shared refinement.
pub fn distinguishability(
    g1: &CsrGraph,
    s1: &[usize],
    g2: &CsrGraph,
    s2: &[usize],
    h: usize,
    iters: usize,
) -> Distinguishability {
    let mut dict = ColorDictionary::new();
    let c1 = wl_refine_with(g1, iters, &mut dict);
    let c2 = wl_refine_with(g2, iters, &mut dict);
    let a = signatures(g1, s1, h, &c1);
    let b = signatures(g2, s2, h, &c2);
    Distinguishability {
        plain: a.subgraph_sig != b.subgraph_sig,
        snp: a != b,
    }
}

/// Two non-isomorphic marked subgraphs of small graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub g1: CsrGraph,
    pub s1: Vec<usize>,
    pub g2: CsrGraph,
    pub s2: Vec<usize>,
    pub h: usize,
    pub iters: usize,
}

fn pair_index(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Every permutation of `0..n` (Heap's algorithm).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// For each permutation, where each edge slot goes.
fn edge_maps(n: usize, perms: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let pairs = pair_index(n);
    let slot: HashMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    perms
        .iter()
        .map(|p| {
            pairs
                .iter()
                .map(|&(i, j)| {
                    let (a, b) = (p[i].min(p[j]), p[i].max(p[j]));
                    slot[&(a, b)]
                })
                .collect()
        })
        .collect()
}

fn permute_bits(mask: u64, map: &[usize]) -> u64 {
    let mut out = 0u64;
    let mut m = mask;
    while m != 0 {
        let b = m.trailing_zeros() as usize;
        out |= 1 << map[b];
        m &= m - 1;
    }
    out
}

fn graph_from_mask(n: usize, mask: u64) -> CsrGraph {
    let edges = pair_index(n)
        .into_iter()
        .enumerate()
        .filter(|(k, _)| mask >> k & 1 == 1)
        .map(|(_, e)| e);
    CsrGraph::from_edges(n, edges).expect("ids in range")
}

fn is_connected(g: &CsrGraph) -> bool {
    let n = g.num_nodes();
    if n == 0 {
        return false;
    }
    exact_neighborhood(g, &[0], n).len() + 1 == n
}

fn bits_to_nodes(mask: u64) -> Vec<usize> {
    (0..64).filter(|b| mask >> b & 1 == 1).collect()
}

/// Canonical representatives of connected `n`-node graphs, as edge masks
/// (the smallest mask in each isomorphism class), ascending.
fn canonical_graphs(n: usize, emaps: &[Vec<usize>]) -> Vec<u64> {
    let slots = n * n.saturating_sub(1) / 2;
    (0u64..1 << slots)
        .into_par_iter()
        .filter(|&mask| is_connected(&graph_from_mask(n, mask)) && emaps.iter().all(|m| permute_bits(mask, m) >= mask))
        .collect()
}

fn search_graph(
    n: usize,
    mask: u64,
    perms: &[Vec<usize>],
    emaps: &[Vec<usize>],
    h: usize,
    iters: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let g = graph_from_mask(n, mask);
    let autos: Vec<&Vec<usize>> = perms
        .iter()
        .zip(emaps)
        .filter(|(_, m)| permute_bits(mask, m) == mask)
        .map(|(p, _)| p)
        .collect();
    let node_maps: Vec<Vec<usize>> = autos.iter().map(|p| p.to_vec()).collect();
    // One subset per orbit of the automorphism group, by size then mask.
    let mut reps: Vec<u64> = (1u64..(1 << n) - 1)
        .filter(|&s| node_maps.iter().all(|p| permute_bits(s, p) >= s))
        .collect();
    reps.sort_by_key(|&s| (s.count_ones(), s));

    let history = wl_history(&g, iters, &mut ColorDictionary::new());
    let sigs: Vec<Vec<SignaturePair>> = reps
        .iter()
        .map(|&s| {
            let nodes = bits_to_nodes(s);
            history.iter().map(|c| signatures(&g, &nodes, h, c)).collect()
        })
        .collect();
    for a in 0..reps.len() {
        for b in a + 1..reps.len() {
            if reps[a].count_ones() != reps[b].count_ones() {
                break;
            }
            let plain_fails = (1..=iters).all(|t| sigs[a][t].subgraph_sig == sigs[b][t].subgraph_sig);
            let snp_succeeds = (1..=iters).any(|t| sigs[a][t] != sigs[b][t]);
            if plain_fails && snp_succeeds {
                return Some((bits_to_nodes(reps[a]), bits_to_nodes(reps[b])));
            }
        }
    }
    None
}

/// Searches connected graphs of up to `max_nodes` nodes, smallest first, for
/// two non-isomorphic marked subgraphs of the same graph whose subgraph
/// color multisets agree at every iteration `1..=iters` while the pair
/// signature differs at some iteration.
///
/// Graphs are visited in increasing order of their canonical edge mask and
/// checked in parallel; the first match in that order is returned.
pub fn find_counterexample(max_nodes: usize, h: usize, iters: usize) -> Option<Counterexample> {
    assert!(
        max_nodes <= MAX_SEARCH_NODES,
        "search is limited to {MAX_SEARCH_NODES} nodes"
    );
    if iters == 0 {
        return None;
    }
    for n in 2..=max_nodes {
        let perms = permutations(n);
        let emaps = edge_maps(n, &perms);
        let graphs = canonical_graphs(n, &emaps);
        let found = graphs
            .par_iter()
            .find_map_first(|&mask| search_graph(n, mask, &perms, &emaps, h, iters).map(|p| (mask, p)));
        if let Some((mask, (s1, s2))) = found {
            let g = graph_from_mask(n, mask);
            return Some(Counterexample {
                g1: g.clone(),
                s1,
                g2: g,
                s2,
                h,
                iters,
            });
        }
    }
    None
}

fn edge_list(g: &CsrGraph) -> String {
    g.edges().map(|(u, v)| format!("{u}-{v}")).collect::<Vec<_>>().join(" ")
}

impl Counterexample {
    /// Edge lists, marked sets and per-iteration signatures.
    pub fn report(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "graph 1: {} nodes, edges {}",
            self.g1.num_nodes(),
            edge_list(&self.g1)
        )
        .unwrap();
        writeln!(s, "  subgraph S1 = {:?}", self.s1).unwrap();
        writeln!(
            s,
            "  neighborhood (h={}) = {:?}",
            self.h,
            exact_neighborhood(&self.g1, &self.s1, self.h)
        )
        .unwrap();
        writeln!(
            s,
            "graph 2: {} nodes, edges {}",
            self.g2.num_nodes(),
            edge_list(&self.g2)
        )
        .unwrap();
        writeln!(s, "  subgraph S2 = {:?}", self.s2).unwrap();
        writeln!(
            s,
            "  neighborhood (h={}) = {:?}",
            self.h,
            exact_neighborhood(&self.g2, &self.s2, self.h)
        )
        .unwrap();
        let mut dict = ColorDictionary::new();
        let h1 = wl_history(&self.g1, self.iters, &mut dict);
        let h2 = wl_history(&self.g2, self.iters, &mut dict);
        for t in 0..=self.iters {
            let a = signatures(&self.g1, &self.s1, self.h, &h1[t]);
            let b = signatures(&self.g2, &self.s2, self.h, &h2[t]);
            writeln!(s, "iteration {t}:").unwrap();
            writeln!(
                s,
                "  S1 colors {:?}  neighborhood colors {:?}",
                a.subgraph_sig, a.neighborhood_sig
            )
            .unwrap();
            writeln!(
                s,
                "  S2 colors {:?}  neighborhood colors {:?}",
                b.subgraph_sig, b.neighborhood_sig
            )
            .unwrap();
            writeln!(
                s,
                "  plain distinguishes: {}  neighborhood pooling distinguishes: {}",
                a.subgraph_sig != b.subgraph_sig,
                a != b
            )
            .unwrap();
        }
        s
    }

    /// Both marked graphs as clusters of one undirected DOT graph; marked
    /// nodes are filled.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph counterexample {\n  node [shape=circle];\n");
        for (c, (g, marked)) in [(&self.g1, &self.s1), (&self.g2, &self.s2)].into_iter().enumerate() {
            let p = if c == 0 { "a" } else { "b" };
            writeln!(s, "  subgraph cluster_{c} {{\n    label=\"S{}\";", c + 1).unwrap();
            for u in 0..g.num_nodes() {
                let style = if marked.contains(&u) {
                    " [style=filled, fillcolor=pink]"
                } else {
                    ""
                };
                writeln!(s, "    {p}{u} [label=\"{u}\"]{style};").unwrap();
            }
            for (u, v) in g.edges() {
                writeln!(s, "    {p}{u} -- {p}{v};").unwrap();
            }
            s.push_str("  }\n");
        }
        s.push_str("}\n");
        s
    }
}

/// True-class probabilities of the two instances under each trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSeparation {
    pub ssnp: [f64; 2],
    pub plain: [f64; 2],
}

impl ModelSeparation {
    pub fn ssnp_separates(&self) -> bool {
        self.ssnp.iter().all(|&p| p >= SEPARATION_THRESHOLD)
    }

    pub fn plain_separates(&self) -> bool {
        self.plain.iter().all(|&p| p >= SEPARATION_THRESHOLD)
    }
}

/// Steps of full-batch Adam used by [`verify_with_models`].
pub const VERIFY_STEPS: usize = 300;
pub const VERIFY_LR: f64 = 0.01;

/// Trains a two-layer GCN with sum pooling to tell the two marked subgraphs
/// apart, once with neighborhood pooling and once with the neighborhood half
/// zeroed. The base graph is the disjoint union of both graphs; views are the
/// exact neighborhoods.
pub fn verify_with_models(cx: &Counterexample, seed: u64) -> Result<ModelSeparation> {
    let n1 = cx.g1.num_nodes();
    let edges: Vec<(usize, usize)> = cx
        .g1
        .edges()
        .chain(cx.g2.edges().map(|(u, v)| (u + n1, v + n1)))
        .collect();
    let graph = CsrGraph::from_edges(n1 + cx.g2.num_nodes(), edges)?;
    let features = FeatureMatrix::constant(graph.num_nodes());
    let s2: Vec<usize> = cx.s2.iter().map(|&u| u + n1).collect();
    let instances = [
        SubgraphInstance::new(cx.s1.clone(), vec![0], Split::Train),
        SubgraphInstance::new(s2, vec![1], Split::Train),
    ];
    let views: Vec<NeighborhoodView> = instances
        .iter()
        .enumerate()
        .map(|(i, s)| NeighborhoodView {
            subgraph_index: i,
            node_ids: exact_neighborhood(&graph, &s.node_ids, cx.h),
            h: cx.h,
            k: 0,
        })
        .collect();
    let batch: Vec<(&SubgraphInstance, &NeighborhoodView)> = instances.iter().zip(&views).collect();
    let targets: Vec<&SubgraphInstance> = instances.iter().collect();

    let run = |ablate: bool| -> Result<[f64; 2]> {
        let config = ModelConfig {
            layer_kind: LayerKind::Gcn,
            num_layers: 2,
            hidden_dim: 16,
            pool: PoolKind::Sum,
            dropout: 0.0,
            input_dim: 1,
            num_classes: 2,
            multi_label: false,
            ablate_neighborhood: ablate,
            normalized_aggregation: false,
        };
        let mut model = SsnpModel::new(config, seed)?;
        let mut adam = AdamState::new(&model.params);
        let mut rng = RngStream::keyed(Domain::Dropout, seed, 0, 0, 0);
        for _ in 0..VERIFY_STEPS {
            model.params.zero_grad();
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &graph, &features, &batch, true, &mut rng)?;
            let loss = model.loss(&mut tape, logits, &targets)?;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, VERIFY_LR)?;
        }
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &graph, &features, &batch, false, &mut rng)?;
        let logits = tape.value(logits)?;
        Ok([softmax(logits.row(0))[0], softmax(logits.row(1))[1]])
    };
    Ok(ModelSeparation {
        ssnp: run(false)?,
        plain: run(true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(n: usize) -> CsrGraph {
        CsrGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap()
    }

    fn path3() -> CsrGraph {
        CsrGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn regular_graph_stays_uniform() {
        for iters in 0..4 {
            let c = wl_refine(&cycle(6), iters);
            assert!(c.colors.iter().all(|&x| x == c.colors[0]));
        }
    }

    #[test]
    fn path_endpoints_share_color() {
        let c = wl_refine(&path3(), 1);
        assert_eq!(c.colors[0], c.colors[2]);
        assert_ne!(c.colors[0], c.colors[1]);
        assert_eq!(wl_refine(&path3(), 0).colors, vec![0, 0, 0]);
    }

    #[test]
    fn full_subgraph_has_empty_neighborhood() {
        let g = path3();
        let c = wl_refine(&g, 2);
        let sig = signatures(&g, &[0, 1, 2], 1, &c);
        assert!(sig.neighborhood_sig.is_empty());
        assert_eq!(sig, signatures(&g, &[0, 1, 2], 1, &c));
    }

    #[test]
    fn cycle_pair_separated_only_by_neighborhood() {
        let g = cycle(5);
        let d = distinguishability(&g, &[0, 1], &g, &[0, 2], 1, 2);
        assert_eq!(
            d,
            Distinguishability {
                plain: false,
                snp: true
            }
        );
    }

    #[test]
    fn relabeling_is_invisible() {
        let g = CsrGraph::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 3)]).unwrap();
        let perm = [3, 5, 0, 1, 4, 2];
        let pg = CsrGraph::from_edges(6, g.edges().map(|(u, v)| (perm[u], perm[v]))).unwrap();
        let s = [1, 2];
        let ps: Vec<usize> = s.iter().map(|&u| perm[u]).collect();
        for iters in 0..4 {
            let d = distinguishability(&g, &s, &pg, &ps, 1, iters);
            assert_eq!(
                d,
                Distinguishability {
                    plain: false,
                    snp: false
                }
            );
        }
    }

    #[test]
    fn heap_permutations_are_complete() {
        let mut p = permutations(4);
        assert_eq!(p.len(), 24);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 24);
    }

    #[test]
    fn canonical_graph_counts() {
        // Connected graphs up to isomorphism on 1..=5 nodes: 1, 1, 2, 6, 21.
        for (n, expected) in [(2, 1), (3, 2), (4, 6), (5, 21)] {
            let perms = permutations(n);
            let emaps = edge_maps(n, &perms);
            assert_eq!(canonical_graphs(n, &emaps).len(), expected, "n={n}");
        }
    }

    #[test]
    fn search_finds_small_witness() {
        let cx = find_counterexample(8, 1, 2).expect("witness exists");
        assert!(cx.g1.num_nodes() <= 8);
        for t in 1..=2 {
            assert!(!distinguishability(&cx.g1, &cx.s1, &cx.g2, &cx.s2, 1, t).plain);
        }
        assert!(distinguishability(&cx.g1, &cx.s1, &cx.g2, &cx.s2, 1, 2).snp);
        assert!(cx.report().contains("iteration 2"));
        assert!(cx.to_dot().starts_with("graph counterexample {"));
    }
}

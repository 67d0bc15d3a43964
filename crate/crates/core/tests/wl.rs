use ssnp::graph::CsrGraph;
use ssnp::rng::{Domain, RngStream};
use ssnp::sampler::exact_neighborhood;
use ssnp::wl::{distinguishability, find_counterexample};

fn random_marked_graph(rng: &mut RngStream) -> (CsrGraph, Vec<usize>) {
    let n = 3 + rng.index(4);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.unit() < 0.45 {
                edges.push((u, v));
            }
        }
    }
    let g = CsrGraph::from_edges(n, edges).unwrap();
    let size = 1 + rng.index(2);
    let mut s: Vec<usize> = Vec::new();
    while s.len() < size {
        let u = rng.index(n);
        if !s.contains(&u) {
            s.push(u);
        }
    }
    s.sort_unstable();
    (g, s)
}

#[test]
fn refinement_is_monotone_and_snp_dominates() {
    let mut rng = RngStream::keyed(Domain::Aux, 77, 0, 0, 0);
    let mut plain_hits = 0;
    for _ in 0..400 {
        let (g1, s1) = random_marked_graph(&mut rng);
        let (g2, s2) = random_marked_graph(&mut rng);
        for h in [1, 2] {
            let mut plain_seen = false;
            let mut snp_seen = false;
            for t in 0..=4 {
                let d = distinguishability(&g1, &s1, &g2, &s2, h, t);
                assert!(d.snp || !d.plain, "plain without snp at t={t}");
                assert!(d.plain || !plain_seen, "plain lost at t={t}");
                assert!(d.snp || !snp_seen, "snp lost at t={t}");
                plain_seen |= d.plain;
                snp_seen |= d.snp;
            }
            plain_hits += usize::from(plain_seen);
        }
    }
    assert!(plain_hits > 0);
}

#[test]
fn witness_within_budget() {
    let cx = find_counterexample(8, 1, 2).expect("no witness with at most 8 nodes");
    assert!(cx.g1.num_nodes() <= 8 && cx.g2.num_nodes() <= 8);
    assert!(cx.iters <= 2);
    assert_eq!(cx.s1.len(), cx.s2.len());
    for t in 1..=cx.iters {
        assert!(!distinguishability(&cx.g1, &cx.s1, &cx.g2, &cx.s2, 1, t).plain);
    }
    assert!(distinguishability(&cx.g1, &cx.s1, &cx.g2, &cx.s2, 1, cx.iters).snp);
    let n1 = exact_neighborhood(&cx.g1, &cx.s1, 1);
    let n2 = exact_neighborhood(&cx.g2, &cx.s2, 1);
    assert!(!n1.is_empty() || !n2.is_empty());
    assert!(cx.report().contains("neighborhood pooling distinguishes: true"));
    assert!(cx.to_dot().starts_with("graph"));
}

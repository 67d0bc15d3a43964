use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use ssnp::dataset::{generate_synthetic, load_dataset, write_dataset};
use ssnp::gradcheck::{model_gradient_check, GRAD_CHECK_TOLERANCE};
use ssnp::graph::{Split, SubgraphDataset};
use ssnp::io::write_atomic;
use ssnp::model::LayerKind;
use ssnp::rng::{Domain, RngStream};
use ssnp::sampler::{
    build_view_store, exact_neighborhood, sample_view, view_size_bound, Strategy, ViewParams, ViewStore,
};
use ssnp::train::{evaluate_with_store, train_with_store, Checkpoint};
use ssnp::wl::{find_counterexample, verify_with_models, MAX_SEARCH_NODES};

use crate::{EvalArgs, Failure, GenArgs, GradCheckArgs, SampleArgs, TrainArgs, WlDemoArgs};

pub(crate) fn gen(a: GenArgs) -> Result<(), Failure> {
    let ds = generate_synthetic(a.num_subgraphs, a.seed)?;
    write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} subgraphs, {} nodes, {} edges to {}",
        ds.instances.len(),
        ds.graph.num_nodes(),
        ds.graph.num_edges(),
        a.out.display()
    );
    Ok(())
}

fn ids(v: &[usize]) -> String {
    let mut s = String::new();
    for (i, id) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{id}").unwrap();
    }
    s
}

pub(crate) fn sample(a: SampleArgs) -> Result<(), Failure> {
    if a.h == 0 || a.k == 0 {
        return Err(Failure::invalid("h and k must be at least 1"));
    }
    let ds = load_dataset(&a.data)?;
    let Some(s) = ds.instances.get(a.subgraph) else {
        return Err(Failure::invalid(format!(
            "subgraph index {} out of range for {} subgraphs",
            a.subgraph,
            ds.instances.len()
        )));
    };
    let exact = exact_neighborhood(&ds.graph, &s.node_ids, a.h);
    let bound = view_size_bound(s.node_ids.len(), a.h, a.k);
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "subgraph {} ({}): nodes [{}] labels [{}]",
        a.subgraph,
        s.split,
        ids(&s.node_ids),
        ids(&s.labels)
    )?;
    writeln!(
        out,
        "exact neighborhood h={}: {} nodes [{}]",
        a.h,
        exact.len(),
        ids(&exact)
    )?;
    writeln!(out, "view size bound {}*{}*{} = {}", s.node_ids.len(), a.h, a.k, bound)?;
    for j in 0..a.views {
        let mut rng = RngStream::keyed(Domain::Walk, a.seed, a.subgraph as u64, j as u64, 0);
        let v = sample_view(&ds.graph, s, a.subgraph, a.h, a.k, &mut rng);
        writeln!(out, "view {j}: {} nodes [{}]", v.len(), ids(&v.node_ids))?;
    }
    Ok(())
}

/// Loads the view cache when it exists, otherwise builds the store and
/// writes the cache.
fn view_store(ds: &SubgraphDataset, params: &ViewParams, cache: Option<&Path>) -> Result<ViewStore, Failure> {
    match cache {
        Some(path) if path.exists() => Ok(ViewStore::load_tsv(path, ds, params)?),
        Some(path) => {
            let store = build_view_store(ds, params)?;
            if params.strategy != Strategy::Ov {
                store.save_tsv(path)?;
            }
            Ok(store)
        }
        None => Ok(build_view_store(ds, params)?),
    }
}

pub(crate) fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.config.run_spec()?.resolve()?;
    let ds = load_dataset(&a.data)?;
    let store = view_store(&ds, &cfg.view_params(), a.views_cache.as_deref())?;

    let mut buffered = String::new();
    let mut write_error = None;
    let stdout = io::stdout();
    let outcome = train_with_store(&ds, &cfg, &store, |rec| {
        let line = rec.to_json_line(a.timings);
        if a.metrics.is_some() {
            buffered.push_str(&line);
            buffered.push('\n');
        } else if write_error.is_none() {
            let mut out = stdout.lock();
            if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    if let Some(path) = &a.metrics {
        write_atomic(path, buffered.as_bytes())?;
    }
    if let Some(path) = &a.checkpoint {
        outcome.checkpoint.save(path)?;
    }

    let test = evaluate_with_store(&outcome.checkpoint, &ds, Split::Test, &store)?;
    let summary = format!(
        "epochs {} best_epoch {} val_micro_f1 {:.4} test_micro_f1 {:.4}",
        outcome.records.len(),
        outcome.checkpoint.best_epoch,
        outcome.checkpoint.best_val_micro_f1,
        test.micro_f1
    );
    // Keep standard output pure JSONL when it carries the metrics.
    if a.metrics.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

pub(crate) fn eval(a: EvalArgs) -> Result<(), Failure> {
    let split: Split = a.split.parse().map_err(Failure::Invalid)?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let store = view_store(&ds, &checkpoint.config.view_params(), a.views_cache.as_deref())?;
    let report = evaluate_with_store(&checkpoint, &ds, split, &store)?;
    if let Some(path) = &a.predictions {
        let mut tsv = String::from("index\tpredicted\tprobabilities\n");
        for ((i, pred), probs) in report
            .indices
            .iter()
            .zip(&report.predictions)
            .zip(&report.probabilities)
        {
            let probs: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
            writeln!(tsv, "{i}\t{}\t{}", ids(pred), probs.join(",")).unwrap();
        }
        write_atomic(path, tsv.as_bytes())?;
    }
    println!(
        "split {} instances {} loss {:.6} micro_f1 {:.4}",
        split,
        report.indices.len(),
        report.loss,
        report.micro_f1
    );
    Ok(())
}

pub(crate) fn wl_demo(a: WlDemoArgs) -> Result<(), Failure> {
    if a.max_nodes > MAX_SEARCH_NODES {
        return Err(Failure::invalid(format!("max_nodes is capped at {MAX_SEARCH_NODES}")));
    }
    if a.iters == 0 || a.h == 0 {
        return Err(Failure::invalid("h and iters must be at least 1"));
    }
    let Some(cx) = find_counterexample(a.max_nodes, a.h, a.iters) else {
        return Err(Failure::Threshold(format!(
            "no pair found with at most {} nodes, h={}, {} iterations",
            a.max_nodes, a.h, a.iters
        )));
    };
    print!("{}", cx.report());
    if let Some(path) = &a.dot {
        write_atomic(path, cx.to_dot().as_bytes())?;
    }
    if a.no_models {
        return Ok(());
    }
    let sep = verify_with_models(&cx, a.seed)?;
    println!(
        "trained models, true-class probability: ssnp {:.3} {:.3}  plain {:.3} {:.3}",
        sep.ssnp[0], sep.ssnp[1], sep.plain[0], sep.plain[1]
    );
    println!(
        "ssnp separates: {}  plain separates: {}",
        sep.ssnp_separates(),
        sep.plain_separates()
    );
    if !sep.ssnp_separates() || sep.plain_separates() {
        return Err(Failure::Threshold(
            "trained models do not match the color-refinement result".into(),
        ));
    }
    Ok(())
}

pub(crate) fn grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Failure::invalid("trials must be at least 1"));
    }
    let kinds = match &a.layer_kind {
        Some(k) => vec![k.parse::<LayerKind>().map_err(Failure::Invalid)?],
        None => vec![LayerKind::Mlp, LayerKind::Gcn, LayerKind::Nn],
    };
    let mut worst = 0.0f64;
    let mut out = io::stdout().lock();
    for kind in kinds {
        let report = model_gradient_check(kind, a.trials, a.seed)?;
        for p in &report.params {
            writeln!(
                out,
                "{kind}\t{}\t{} entries\tmax_rel_error {:.3e}",
                p.name, p.entries, p.max_rel_error
            )?;
        }
        let e = report.max_rel_error();
        writeln!(out, "{kind}\tmax_rel_error {e:.3e} over {} trials", a.trials)?;
        worst = worst.max(e);
    }
    let pass = worst < GRAD_CHECK_TOLERANCE;
    writeln!(
        out,
        "{} max_rel_error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:e})",
        if pass { "PASS" } else { "FAIL" }
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("max relative error {worst:.3e}")))
    }
}

//! Finite-difference check of the full model on small random instances.

use crate::autodiff::{gradient_check, GradCheckReport, PoolKind, Tape, Var};
use crate::error::Result;
use crate::graph::{CsrGraph, FeatureMatrix, Split, SubgraphInstance};
use crate::model::{LayerKind, ModelConfig, SsnpModel};
use crate::rng::{Domain, RngStream};
use crate::sampler::{sample_view, NeighborhoodView};

pub const TRIAL_NODES: usize = 12;
pub const TRIAL_EDGE_PROB: f64 = 0.3;
pub const TRIAL_FEATURES: usize = 3;
pub const TRIAL_CLASSES: usize = 3;
pub const TRIAL_SUBGRAPHS: usize = 4;

/// Largest relative error accepted by the `grad-check` command.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// A random 12-node instance with every parameter drawn from `[-1, 1]`.
///
/// Odd seeds use mean pooling and degree-normalized aggregation, even seeds
/// sum pooling and plain sums. Dropout is off.
pub struct Trial {
    pub graph: CsrGraph,
    pub features: FeatureMatrix,
    pub instances: Vec<SubgraphInstance>,
    pub views: Vec<NeighborhoodView>,
    pub model: SsnpModel,
}

impl Trial {
    pub fn new(layer_kind: LayerKind, seed: u64) -> Result<Self> {
        let mut rng = RngStream::keyed(Domain::Aux, seed, 0, 0, 0);
        let n = TRIAL_NODES;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.unit() < TRIAL_EDGE_PROB {
                    edges.push((u, v));
                }
            }
        }
        let graph = CsrGraph::from_edges(n, edges)?;
        let values = (0..n * TRIAL_FEATURES).map(|_| 2.0 * rng.unit() - 1.0).collect();
        let features = FeatureMatrix::new(n, TRIAL_FEATURES, values)?;

        let mut instances = Vec::new();
        let mut views = Vec::new();
        for i in 0..TRIAL_SUBGRAPHS {
            let size = 2 + rng.index(3);
            let mut nodes = Vec::new();
            while nodes.len() < size {
                let u = rng.index(n);
                if !nodes.contains(&u) {
                    nodes.push(u);
                }
            }
            let s = SubgraphInstance::new(nodes, vec![rng.index(TRIAL_CLASSES)], Split::Train);
            views.push(sample_view(&graph, &s, i, 2, 2, &mut rng));
            instances.push(s);
        }

        let odd = seed % 2 == 1;
        let config = ModelConfig {
            layer_kind,
            num_layers: 2,
            hidden_dim: 4,
            pool: if odd { PoolKind::Mean } else { PoolKind::Sum },
            dropout: 0.0,
            input_dim: TRIAL_FEATURES,
            num_classes: TRIAL_CLASSES,
            multi_label: false,
            ablate_neighborhood: false,
            normalized_aggregation: odd,
        };
        let mut model = SsnpModel::new(config, seed)?;
        for p in model.params.iter_mut() {
            for x in p.value.data_mut() {
                *x = 2.0 * rng.unit() - 1.0;
            }
        }
        Ok(Trial {
            graph,
            features,
            instances,
            views,
            model,
        })
    }

    /// Compares analytic and central-difference gradients for every
    /// parameter.
    pub fn check(self) -> Result<GradCheckReport> {
        let Trial {
            graph,
            features,
            instances,
            views,
            model,
        } = self;
        let batch: Vec<(&SubgraphInstance, &NeighborhoodView)> = instances.iter().zip(&views).collect();
        let targets: Vec<&SubgraphInstance> = instances.iter().collect();
        fn forward<'g>(
            m: &SsnpModel,
            tape: &mut Tape<'g>,
            graph: &'g CsrGraph,
            features: &FeatureMatrix,
            batch: &[(&SubgraphInstance, &NeighborhoodView)],
            targets: &[&SubgraphInstance],
        ) -> Result<Var> {
            let mut rng = RngStream::keyed(Domain::Dropout, 0, 0, 0, 0);
            let logits = m.forward(tape, graph, features, batch, false, &mut rng)?;
            m.loss(tape, logits, targets)
        }
        let SsnpModel { config, mut params, .. } = model;
        gradient_check(
            &mut params,
            |params| {
                let m = SsnpModel::from_params(config.clone(), params.clone())?;
                let mut tape = Tape::new();
                let loss = forward(&m, &mut tape, &graph, &features, &batch, &targets)?;
                tape.backward(loss, params)
            },
            |params| {
                let m = SsnpModel::from_params(config.clone(), params.clone())?;
                let mut tape = Tape::new();
                let loss = forward(&m, &mut tape, &graph, &features, &batch, &targets)?;
                Ok(tape.value(loss)?.get(0, 0))
            },
        )
    }
}

/// Runs `trials` seeded trials (`seed..seed + trials`) and merges their
/// reports.
pub fn model_gradient_check(layer_kind: LayerKind, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { params: Vec::new() };
    for t in 0..trials as u64 {
        report.merge(Trial::new(layer_kind, seed + t)?.check()?);
    }
    Ok(report)
}

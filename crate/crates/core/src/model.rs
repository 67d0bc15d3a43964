//! Transformation layers, the SSNP pooling head and the linear classifier.
//!
//! The forward pass runs in three stages:
//!
//! 1. A stack of transformation layers maps the feature matrix of the whole
//!    base graph to node embeddings `Z` (one row per node). Layers are either
//!    graph-agnostic MLP layers, GCN-style sum-aggregation layers, or nested
//!    network layers (linear + ELU, closed-neighborhood sum, graph
//!    normalization, dropout, then a linear map of the result concatenated
//!    with the layer input).
//! 2. For each `(subgraph, view)` pair, `Z` is pooled over the subgraph's
//!    nodes and over the view's nodes with the same pooling function, and
//!    the two rows are concatenated.
//! 3. A single affine layer maps the pooled representation to class logits.
//!
//! Step 1 is shared by every pair in a batch. Matrices multiply on the
//! right, so a layer computes `H·W` with nodes as rows.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Matrix, ParamId, ParamStore, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{CsrGraph, FeatureMatrix, SubgraphInstance};
use crate::rng::{Domain, RngStream};
use crate::sampler::NeighborhoodView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Mlp,
    Gcn,
    /// Nested network convolution.
    Nn,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Mlp => "mlp",
            LayerKind::Gcn => "gcn",
            LayerKind::Nn => "nn",
        })
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(LayerKind::Mlp),
            "gcn" => Ok(LayerKind::Gcn),
            "nn" => Ok(LayerKind::Nn),
            other => Err(format!("unknown layer kind {other:?} (expected mlp, gcn or nn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layer_kind: LayerKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Applied to both the subgraph and its neighborhood.
    pub pool: PoolKind,
    pub dropout: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub multi_label: bool,
    /// Zero the neighborhood half of the pooled representation, leaving a
    /// plain subgraph-pooling model.
    pub ablate_neighborhood: bool,
    /// Use degree-normalized instead of plain sum aggregation.
    pub normalized_aggregation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layer_kind: LayerKind::Mlp,
            num_layers: 2,
            hidden_dim: 64,
            pool: PoolKind::Sum,
            dropout: 0.5,
            input_dim: 1,
            num_classes: 2,
            multi_label: false,
            ablate_neighborhood: false,
            normalized_aggregation: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.num_layers) {
            return Err(Error::config(
                "num_layers",
                format!("must be 1, 2 or 3, got {}", self.num_layers),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(
                "dropout",
                format!("must be in [0, 1), got {}", self.dropout),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        Ok(())
    }

    /// Width of the pooled representation fed to the classifier.
    pub fn pooled_dim(&self) -> usize {
        match self.pool {
            PoolKind::Size => 2,
            _ => 2 * self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerParams {
    Mlp {
        weight: ParamId,
        bias: ParamId,
    },
    Gcn {
        weight: ParamId,
    },
    Nn {
        w1: ParamId,
        gamma: ParamId,
        beta: ParamId,
        alpha: ParamId,
        w2: ParamId,
    },
}

/// A configured model together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsnpModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Vec<LayerParams>,
    cls_weight: ParamId,
    cls_bias: ParamId,
}

fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (2.0 * rng.unit() - 1.0) * limit).collect();
    Matrix::new(rows, cols, data).expect("sized to fit")
}

fn lookup(params: &ParamStore, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
}

/// Parameter names and shapes for `config`, in registration order.
fn param_layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let h = config.hidden_dim;
    let mut out = Vec::new();
    for l in 0..config.num_layers {
        let d_in = if l == 0 { config.input_dim } else { h };
        match config.layer_kind {
            LayerKind::Mlp => {
                out.push((format!("layer{l}.weight"), d_in, h));
                out.push((format!("layer{l}.bias"), 1, h));
            }
            LayerKind::Gcn => out.push((format!("layer{l}.weight"), d_in, h)),
            LayerKind::Nn => {
                out.push((format!("layer{l}.w1"), d_in, h));
                out.push((format!("layer{l}.norm.gamma"), 1, h));
                out.push((format!("layer{l}.norm.beta"), 1, h));
                out.push((format!("layer{l}.norm.alpha"), 1, h));
                out.push((format!("layer{l}.w2"), h + d_in, h));
            }
        }
    }
    out.push(("classifier.weight".into(), config.pooled_dim(), config.num_classes));
    out.push(("classifier.bias".into(), 1, config.num_classes));
    out
}

impl SsnpModel {
    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::keyed(Domain::Init, seed, 0, 0, 0);
        let mut params = ParamStore::new();
        for (name, rows, cols) in param_layout(&config) {
            let init = if name.ends_with(".bias") || name.ends_with(".beta") {
                Matrix::zeros(rows, cols)
            } else if name.ends_with(".gamma") || name.ends_with(".alpha") {
                Matrix::filled(rows, cols, 1.0)
            } else {
                glorot(rows, cols, &mut rng)
            };
            params.add(name, init)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, checking names and shapes against
    /// the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, rows, cols) in &layout {
            let p = params.get(lookup(&params, name)?);
            if p.value.shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    p.value.shape(),
                    (rows, cols)
                )));
            }
        }
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let id = |suffix: &str| lookup(&params, &format!("layer{l}.{suffix}"));
            layers.push(match config.layer_kind {
                LayerKind::Mlp => LayerParams::Mlp {
                    weight: id("weight")?,
                    bias: id("bias")?,
                },
                LayerKind::Gcn => LayerParams::Gcn { weight: id("weight")? },
                LayerKind::Nn => LayerParams::Nn {
                    w1: id("w1")?,
                    gamma: id("norm.gamma")?,
                    beta: id("norm.beta")?,
                    alpha: id("norm.alpha")?,
                    w2: id("w2")?,
                },
            });
        }
        let cls_weight = lookup(&params, "classifier.weight")?;
        let cls_bias = lookup(&params, "classifier.bias")?;
        Ok(SsnpModel {
            config,
            params,
            layers,
            cls_weight,
            cls_bias,
        })
    }

    /// Node embeddings for the whole base graph.
    ///
    /// Under MLP and GCN, dropout is applied to the input of every layer
    /// after the first; nested network layers apply it inside the layer,
    /// after normalization.
    pub fn forward_transform<'g>(
        &self,
        tape: &mut Tape<'g>,
        graph: &'g CsrGraph,
        features: &FeatureMatrix,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if features.rows() != graph.num_nodes() || features.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward_transform",
                left: (graph.num_nodes(), self.config.input_dim),
                right: (features.rows(), features.cols()),
            });
        }
        let x = Matrix::new(features.rows(), features.cols(), features.values().to_vec())?;
        let mut h = tape.constant(x)?;
        let p = self.config.dropout;
        let norm_agg = self.config.normalized_aggregation;
        for (l, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                LayerParams::Mlp { weight, bias } => {
                    if l > 0 {
                        h = tape.dropout(h, p, training, rng)?;
                    }
                    let w = tape.param(&self.params, weight)?;
                    let b = tape.param(&self.params, bias)?;
                    let lin = tape.matmul(h, w)?;
                    let lin = tape.add_row(lin, b)?;
                    tape.elu(lin)?
                }
                LayerParams::Gcn { weight } => {
                    if l > 0 {
                        h = tape.dropout(h, p, training, rng)?;
                    }
                    let w = tape.param(&self.params, weight)?;
                    let agg = tape.spmm_self(graph, h, norm_agg)?;
                    let lin = tape.matmul(agg, w)?;
                    tape.elu(lin)?
                }
                LayerParams::Nn {
                    w1,
                    gamma,
                    beta,
                    alpha,
                    w2,
                } => {
                    let w1 = tape.param(&self.params, w1)?;
                    let inner = tape.matmul(h, w1)?;
                    let inner = tape.elu(inner)?;
                    let agg = tape.spmm_self(graph, inner, norm_agg)?;
                    let (g, b, a) = (
                        tape.param(&self.params, gamma)?,
                        tape.param(&self.params, beta)?,
                        tape.param(&self.params, alpha)?,
                    );
                    let normed = tape.graph_norm(agg, g, b, a)?;
                    let dropped = tape.dropout(normed, p, training, rng)?;
                    let cat = tape.concat_cols(dropped, h)?;
                    let w2 = tape.param(&self.params, w2)?;
                    tape.matmul(cat, w2)?
                }
            };
        }
        Ok(h)
    }

    /// Pooled representation of each `(subgraph, neighborhood)` pair, one row
    /// per pair: `pool(Z[subgraph]) ⊕ pool(Z[neighborhood])`.
    pub fn pool_pairs(&self, tape: &mut Tape<'_>, z: Var, pairs: &[(&[usize], &[usize])]) -> Result<Var> {
        let subgraphs: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let neighborhoods: Vec<&[usize]> = pairs.iter().map(|p| p.1).collect();
        let pooled_s = tape.segment_pool(z, &subgraphs, self.config.pool)?;
        let pooled_n = if self.config.ablate_neighborhood {
            let (rows, cols) = tape.shape(pooled_s)?;
            tape.constant(Matrix::zeros(rows, cols))?
        } else {
            tape.segment_pool(z, &neighborhoods, self.config.pool)?
        };
        tape.concat_cols(pooled_s, pooled_n)
    }

    /// SSNP readout for one subgraph and one of its views.
    pub fn ssnp_pool(&self, tape: &mut Tape<'_>, z: Var, s: &SubgraphInstance, view: &NeighborhoodView) -> Result<Var> {
        check_disjoint(s, view)?;
        self.pool_pairs(tape, z, &[(&s.node_ids, &view.node_ids)])
    }

    /// Class logits `q · W + b` for each row of `q`.
    pub fn classify(&self, tape: &mut Tape<'_>, q: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.cls_weight)?;
        let b = tape.param(&self.params, self.cls_bias)?;
        let width = tape.shape(q)?.1;
        if width != self.config.pooled_dim() {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: (1, self.config.pooled_dim()),
                right: (1, width),
            });
        }
        let lin = tape.matmul(q, w)?;
        tape.add_row(lin, b)
    }

    /// Logits for a batch of `(subgraph, view)` pairs, sharing one
    /// transformation of the base graph.
    pub fn forward<'g>(
        &self,
        tape: &mut Tape<'g>,
        graph: &'g CsrGraph,
        features: &FeatureMatrix,
        batch: &[(&SubgraphInstance, &NeighborhoodView)],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        for (s, v) in batch {
            check_disjoint(s, v)?;
        }
        let z = self.forward_transform(tape, graph, features, training, rng)?;
        let pairs: Vec<(&[usize], &[usize])> = batch
            .iter()
            .map(|(s, v)| (s.node_ids.as_slice(), v.node_ids.as_slice()))
            .collect();
        let q = self.pool_pairs(tape, z, &pairs)?;
        self.classify(tape, q)
    }

    /// Cross-entropy for single-label data, binary cross-entropy over all
    /// classes for multi-label data.
    pub fn loss(&self, tape: &mut Tape<'_>, logits: Var, batch: &[&SubgraphInstance]) -> Result<Var> {
        if self.config.multi_label {
            tape.bce_with_logits(logits, &multi_hot(batch, self.config.num_classes))
        } else {
            let targets: Vec<usize> = batch.iter().map(|s| s.labels[0]).collect();
            tape.softmax_cross_entropy(logits, &targets)
        }
    }
}

/// One row per instance with a 1 at each of its labels.
pub fn multi_hot(batch: &[&SubgraphInstance], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(batch.len(), num_classes);
    for (r, s) in batch.iter().enumerate() {
        for &l in &s.labels {
            m.set(r, l, 1.0);
        }
    }
    m
}

fn check_disjoint(s: &SubgraphInstance, view: &NeighborhoodView) -> Result<()> {
    match view.node_ids.iter().find(|&&v| s.contains(v)) {
        Some(&node) => Err(Error::OverlappingView {
            subgraph: view.subgraph_index,
            node,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use approx::assert_abs_diff_eq;

    fn view(nodes: &[usize]) -> NeighborhoodView {
        NeighborhoodView {
            subgraph_index: 0,
            node_ids: nodes.to_vec(),
            h: 1,
            k: 1,
        }
    }

    fn inst(nodes: &[usize]) -> SubgraphInstance {
        SubgraphInstance::new(nodes.to_vec(), vec![0], Split::Train)
    }

    fn pool_model(pool: PoolKind) -> SsnpModel {
        SsnpModel::new(
            ModelConfig {
                hidden_dim: 1,
                pool,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn ssnp_pool_counts() {
        let m = pool_model(PoolKind::Sum);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::filled(6, 1, 1.0)).unwrap();
        let q = m.ssnp_pool(&mut tape, z, &inst(&[0, 1, 2]), &view(&[3, 4])).unwrap();
        assert_eq!(tape.value(q).unwrap().data(), &[3.0, 2.0]);
        let q = m.ssnp_pool(&mut tape, z, &inst(&[0, 1, 2]), &view(&[])).unwrap();
        assert_eq!(tape.value(q).unwrap().data(), &[3.0, 0.0]);
    }

    #[test]
    fn size_pool_ignores_values() {
        let m = pool_model(PoolKind::Size);
        let mut tape = Tape::new();
        let z = tape
            .constant(Matrix::from_rows(&[[5.0], [-2.0], [7.0], [0.5]]))
            .unwrap();
        let q = m.ssnp_pool(&mut tape, z, &inst(&[0]), &view(&[1, 2, 3])).unwrap();
        assert_eq!(tape.value(q).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn overlapping_view_rejected() {
        let m = pool_model(PoolKind::Sum);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::filled(4, 1, 1.0)).unwrap();
        let err = m.ssnp_pool(&mut tape, z, &inst(&[0, 1]), &view(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::OverlappingView { node: 1, .. }));
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let mut m = pool_model(PoolKind::Sum);
        let w = m.params.id("classifier.weight").unwrap();
        m.params.value_mut(w).fill(0.0);
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::from_rows(&[[0.3, -1.2]])).unwrap();
        let logits = m.classify(&mut tape, q).unwrap();
        assert_eq!(tape.value(logits).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn classifier_softmax_value() {
        let mut m = pool_model(PoolKind::Sum);
        let w = m.params.id("classifier.weight").unwrap();
        *m.params.value_mut(w) = Matrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]);
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        let logits = m.classify(&mut tape, q).unwrap();
        let p = crate::autodiff::softmax(tape.value(logits).unwrap().row(0));
        // e / (e + e⁻¹) = 1 / (1 + e⁻²)
        assert_abs_diff_eq!(p[0], 0.880_797_077_977_882_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.119_202_922_022_117_6, epsilon = 1e-12);
    }

    #[test]
    fn classify_width_mismatch() {
        let m = pool_model(PoolKind::Sum);
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(m.classify(&mut tape, q), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gcn_single_layer_on_edgeless_graph_is_elu_of_input() {
        let config = ModelConfig {
            layer_kind: LayerKind::Gcn,
            num_layers: 1,
            hidden_dim: 1,
            ..ModelConfig::default()
        };
        let mut m = SsnpModel::new(config, 0).unwrap();
        let w = m.params.id("layer0.weight").unwrap();
        *m.params.value_mut(w) = Matrix::filled(1, 1, 1.0);
        let g = CsrGraph::empty(2);
        let x = FeatureMatrix::new(2, 1, vec![1.0, -2.0]).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::keyed(Domain::Dropout, 0, 0, 0, 0);
        let z = m.forward_transform(&mut tape, &g, &x, false, &mut rng).unwrap();
        assert_eq!(tape.value(z).unwrap().data(), &[1.0, (-2.0f64).exp_m1()]);
    }

    #[test]
    fn layout_shapes() {
        let config = ModelConfig {
            layer_kind: LayerKind::Nn,
            num_layers: 2,
            hidden_dim: 4,
            input_dim: 3,
            num_classes: 5,
            ..ModelConfig::default()
        };
        let m = SsnpModel::new(config, 1).unwrap();
        let shape = |n: &str| m.params.value(m.params.id(n).unwrap()).shape();
        assert_eq!(shape("layer0.w1"), (3, 4));
        assert_eq!(shape("layer0.w2"), (7, 4));
        assert_eq!(shape("layer1.w2"), (8, 4));
        assert_eq!(shape("classifier.weight"), (8, 5));

        let size_cfg = ModelConfig {
            pool: PoolKind::Size,
            ..ModelConfig::default()
        };
        let m = SsnpModel::new(size_cfg, 1).unwrap();
        assert_eq!(
            m.params.value(m.params.id("classifier.weight").unwrap()).shape(),
            (2, 2)
        );
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let m = SsnpModel::new(ModelConfig::default(), 0).unwrap();
        let other = ModelConfig {
            hidden_dim: 8,
            ..ModelConfig::default()
        };
        assert!(SsnpModel::from_params(other, m.params.clone()).is_err());
        assert!(SsnpModel::from_params(ModelConfig::default(), m.params).is_ok());
    }
}

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::rng::RngStream;

/// Numerical floor inside the graph-normalization square root.
pub const GRAPH_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Order-invariant readout over a node set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Sum,
    Mean,
    Max,
    /// The node count; carries no gradient.
    Size,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Sum => "sum",
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
            PoolKind::Size => "size",
        })
    }
}

impl FromStr for PoolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(PoolKind::Sum),
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            "size" => Ok(PoolKind::Size),
            other => Err(format!("unknown pooling {other:?} (expected sum, mean, max or size)")),
        }
    }
}

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

enum Op<'g> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Spmm {
        input: Var,
        graph: &'g CsrGraph,
        scale: Option<Vec<f64>>,
    },
    Elu(Var),
    GraphNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        alpha: Var,
        centered: Matrix,
        normalized: Matrix,
        std: Vec<f64>,
        mean: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Var, Var),
    SegmentPool {
        x: Var,
        groups: Vec<Vec<usize>>,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    /// Losses store their input gradient, computed during the forward pass.
    Loss {
        logits: Var,
        grad: Matrix,
    },
}

struct Node<'g> {
    value: Matrix,
    requires_grad: bool,
    op: Op<'g>,
}

/// Records matrix operations for one forward pass and replays them in
/// reverse to accumulate parameter gradients.
///
/// A tape is single-use: [`Tape::backward`] consumes the recording, after
/// which every [`Var`] from that pass is detached.
pub struct Tape<'g> {
    id: u64,
    nodes: Vec<Node<'g>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape {
            id: fresh_tape_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::DetachedTensor)
        }
    }

    fn node(&self, v: Var) -> &Node<'g> {
        &self.nodes[v.index]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Matrix, requires_grad: bool, op: Op<'g>) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Current value of `v`.
    pub fn value(&self, v: Var) -> Result<&Matrix> {
        self.check(v)?;
        Ok(&self.node(v).value)
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        Ok(self.value(v)?.shape())
    }

    /// Records a constant with no gradient.
    pub fn constant(&mut self, m: Matrix) -> Result<Var> {
        self.push("constant", m, false, Op::Leaf)
    }

    /// Records a parameter; its gradient is accumulated into the store on
    /// backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), true, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul(bv);
        let rg = self.needs(a) || self.needs(b);
        self.push("matmul", out, rg, Op::MatMul(a, b))
    }

    /// Adds the `1×n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (&self.node(x).value, &self.node(bias).value);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        self.push("add_row", out, rg, Op::AddRow(x, bias))
    }

    /// Sum over each node's closed neighborhood: `out[u] = x[u] + Σ_{v~u} x[v]`.
    ///
    /// With `normalized`, each term is weighted by
    /// `1 / sqrt((deg(u)+1)(deg(v)+1))`. Both forms are symmetric operators,
    /// so the backward pass applies the same aggregation to the gradient.
    pub fn spmm_self(&mut self, graph: &'g CsrGraph, x: Var, normalized: bool) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        if xv.rows() != graph.num_nodes() {
            return Err(Error::ShapeMismatch {
                op: "spmm_self",
                left: (graph.num_nodes(), graph.num_nodes()),
                right: xv.shape(),
            });
        }
        let scale = normalized.then(|| {
            (0..graph.num_nodes())
                .map(|u| 1.0 / ((graph.degree(u) + 1) as f64).sqrt())
                .collect::<Vec<_>>()
        });
        let out = aggregate(graph, xv, scale.as_deref());
        let rg = self.needs(x);
        self.push("spmm_self", out, rg, Op::Spmm { input: x, graph, scale })
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp_m1() })
            .collect();
        let out = Matrix::new(xv.rows(), xv.cols(), data)?;
        let rg = self.needs(x);
        self.push("elu", out, rg, Op::Elu(x))
    }

    /// Per-column normalization over all rows with a learnable mean
    /// coefficient: `γ (x − α μ) / sqrt(σ² + ε) + β`, where `σ²` is the mean
    /// of `(x − α μ)²`. `gamma`, `beta` and `alpha` are `1×d`.
    pub fn graph_norm(&mut self, x: Var, gamma: Var, beta: Var, alpha: Var) -> Result<Var> {
        for v in [x, gamma, beta, alpha] {
            self.check(v)?;
        }
        let xv = &self.node(x).value;
        let (n, d) = xv.shape();
        for p in [gamma, beta, alpha] {
            let pv = &self.node(p).value;
            if pv.shape() != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "graph_norm",
                    left: (1, d),
                    right: pv.shape(),
                });
            }
        }
        if n == 0 {
            return Err(Error::ShapeMismatch {
                op: "graph_norm",
                left: (1, d),
                right: (0, d),
            });
        }
        let (g, b, a) = (
            self.node(gamma).value.data(),
            self.node(beta).value.data(),
            self.node(alpha).value.data(),
        );
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut centered = xv.clone();
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, c) in centered.row_mut(r).iter_mut().enumerate() {
                *c -= a[j] * mean[j];
                var[j] += *c * *c;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64 + GRAPH_NORM_EPS).sqrt()).collect();
        let mut normalized = centered.clone();
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let xhat = centered.get(r, j) / std[j];
                normalized.set(r, j, xhat);
                out.set(r, j, g[j] * xhat + b[j]);
            }
        }
        let rg = [x, gamma, beta, alpha].iter().any(|&v| self.needs(v));
        self.push(
            "graph_norm",
            out,
            rg,
            Op::GraphNorm {
                x,
                gamma,
                beta,
                alpha,
                centered,
                normalized,
                std,
                mean,
            },
        )
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(
                "dropout",
                format!("probability must be in [0, 1), got {p}"),
            ));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = &self.node(x).value;
        let mask: Vec<f64> = (0..xv.data().len())
            .map(|_| if rng.unit() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Matrix::new(xv.rows(), xv.cols(), data)?;
        let rg = self.needs(x);
        self.push("dropout", out, rg, Op::Dropout { x, mask })
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let rg = self.needs(a) || self.needs(b);
        self.push("concat_cols", out, rg, Op::Concat(a, b))
    }

    /// One output row per group, pooling the rows of `x` listed in it.
    ///
    /// Empty groups give a zero row. `Size` yields a single column holding
    /// the group size. Max routes its gradient to the first maximal member.
    pub fn segment_pool(&mut self, x: Var, groups: &[&[usize]], kind: PoolKind) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        let (n, d) = xv.shape();
        for g in groups {
            if let Some(&id) = g.iter().find(|&&id| id >= n) {
                return Err(Error::NodeOutOfRange { id, num_nodes: n });
            }
        }
        if kind == PoolKind::Size {
            let sizes = groups.iter().map(|g| g.len() as f64).collect();
            return self.push("segment_pool", Matrix::new(groups.len(), 1, sizes)?, false, Op::Leaf);
        }
        let mut out = Matrix::zeros(groups.len(), d);
        let mut argmax = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                if kind == PoolKind::Max {
                    argmax.extend(std::iter::repeat_n(usize::MAX, d));
                }
                continue;
            }
            let row = out.row_mut(gi);
            match kind {
                PoolKind::Sum | PoolKind::Mean => {
                    for &id in *g {
                        for (o, v) in row.iter_mut().zip(xv.row(id)) {
                            *o += v;
                        }
                    }
                    if kind == PoolKind::Mean {
                        let inv = 1.0 / g.len() as f64;
                        row.iter_mut().for_each(|o| *o *= inv);
                    }
                }
                PoolKind::Max => {
                    for (j, o) in row.iter_mut().enumerate() {
                        let mut best = g[0];
                        for &id in &g[1..] {
                            if xv.get(id, j) > xv.get(best, j) {
                                best = id;
                            }
                        }
                        *o = xv.get(best, j);
                        argmax.push(best);
                    }
                }
                PoolKind::Size => unreachable!(),
            }
        }
        let rg = self.needs(x);
        let groups = groups.iter().map(|g| g.to_vec()).collect();
        self.push(
            "segment_pool",
            out,
            rg,
            Op::SegmentPool {
                x,
                groups,
                kind,
                argmax,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.node(x).value.sum();
        let rg = self.needs(x);
        self.push("sum_all", Matrix::filled(1, 1, s), rg, Op::SumAll(x))
    }

    /// Mean over rows of `−log softmax(logits)[target]`, via the
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = &self.node(logits).value;
        let (b, c) = lv.shape();
        if targets.len() != b || b == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: (b, c),
                right: (targets.len(), 1),
            });
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(b, c);
        for (r, &t) in targets.iter().enumerate() {
            let probs = softmax(lv.row(r));
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            let g = grad.row_mut(r);
            for (j, p) in probs.into_iter().enumerate() {
                g[j] = (p - f64::from(u8::from(j == t))) / b as f64;
            }
        }
        let rg = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            Matrix::filled(1, 1, loss / b as f64),
            rg,
            Op::Loss { logits, grad },
        )
    }

    /// Mean over all entries of the stable binary cross-entropy
    /// `max(x,0) − x·t + log(1 + exp(−|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Matrix) -> Result<Var> {
        self.check(logits)?;
        let lv = &self.node(logits).value;
        if lv.shape() != targets.shape() || lv.data().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: lv.shape(),
                right: targets.shape(),
            });
        }
        let count = lv.data().len() as f64;
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(lv.rows(), lv.cols());
        for ((g, &x), &t) in grad.data_mut().iter_mut().zip(lv.data()).zip(targets.data()) {
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            *g = (sigmoid(x) - t) / count;
        }
        let rg = self.needs(logits);
        self.push(
            "bce_with_logits",
            Matrix::filled(1, 1, loss / count),
            rg,
            Op::Loss { logits, grad },
        )
    }

    /// Reverse pass from the scalar `loss`, accumulating into the gradient
    /// buffers of every parameter reached. Consumes the recording.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        self.check(loss)?;
        let (rows, cols) = self.node(loss).value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.index + 1);
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, m: Matrix| {
                if self.nodes[v.index].requires_grad {
                    match &mut grads[v.index] {
                        Some(acc) => acc.add_assign(&m),
                        slot @ None => *slot = Some(m),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                    send(*a, g.matmul_t(bv));
                    send(*b, av.t_matmul(&g));
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*bias, gb);
                    send(*x, g);
                }
                Op::Spmm { input, graph, scale } => {
                    send(*input, aggregate(graph, &g, scale.as_deref()));
                }
                Op::Elu(x) => {
                    let xv = &self.nodes[x.index].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { g * v.exp() })
                        .collect();
                    send(*x, Matrix::new(g.rows(), g.cols(), data)?);
                }
                Op::GraphNorm {
                    x,
                    gamma,
                    beta,
                    alpha,
                    centered,
                    normalized,
                    std,
                    mean,
                } => {
                    let (n, d) = g.shape();
                    let gam = self.nodes[gamma.index].value.data();
                    let alp = self.nodes[alpha.index].value.data();
                    let mut d_gamma = Matrix::zeros(1, d);
                    let mut d_beta = Matrix::zeros(1, d);
                    let mut d_alpha = Matrix::zeros(1, d);
                    let mut d_x = Matrix::zeros(n, d);
                    for j in 0..d {
                        let mut dot = 0.0;
                        for r in 0..n {
                            let gr = g.get(r, j);
                            d_gamma.data_mut()[j] += gr * normalized.get(r, j);
                            d_beta.data_mut()[j] += gr;
                            dot += gr * gam[j] * centered.get(r, j);
                        }
                        let s = std[j];
                        let coef = dot / (n as f64 * s * s * s);
                        let mut dc_sum = 0.0;
                        for r in 0..n {
                            let dc = g.get(r, j) * gam[j] / s - centered.get(r, j) * coef;
                            d_x.set(r, j, dc);
                            dc_sum += dc;
                        }
                        let shift = alp[j] * dc_sum / n as f64;
                        for r in 0..n {
                            d_x.set(r, j, d_x.get(r, j) - shift);
                        }
                        d_alpha.data_mut()[j] = -mean[j] * dc_sum;
                    }
                    send(*gamma, d_gamma);
                    send(*beta, d_beta);
                    send(*alpha, d_alpha);
                    send(*x, d_x);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    send(*x, Matrix::new(g.rows(), g.cols(), data)?);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[a.index].value.cols();
                    let cb = g.cols() - ca;
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::SegmentPool {
                    x,
                    groups,
                    kind,
                    argmax,
                } => {
                    let (n, d) = self.nodes[x.index].value.shape();
                    let mut gx = Matrix::zeros(n, d);
                    for (gi, grp) in groups.iter().enumerate() {
                        match kind {
                            PoolKind::Sum | PoolKind::Mean => {
                                let w = if *kind == PoolKind::Mean && !grp.is_empty() {
                                    1.0 / grp.len() as f64
                                } else {
                                    1.0
                                };
                                for &id in grp {
                                    for (o, v) in gx.row_mut(id).iter_mut().zip(g.row(gi)) {
                                        *o += w * v;
                                    }
                                }
                            }
                            PoolKind::Max => {
                                for j in 0..d {
                                    let src = argmax[gi * d + j];
                                    if src != usize::MAX {
                                        let cur = gx.get(src, j);
                                        gx.set(src, j, cur + g.get(gi, j));
                                    }
                                }
                            }
                            PoolKind::Size => {}
                        }
                    }
                    send(*x, gx);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.nodes[x.index].value.shape();
                    send(*x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Loss { logits, grad } => {
                    send(*logits, grad.scale(g.get(0, 0)));
                }
            }
        }
        self.nodes.clear();
        self.id = fresh_tape_id();
        Ok(())
    }
}

fn aggregate(graph: &CsrGraph, x: &Matrix, scale: Option<&[f64]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for u in 0..graph.num_nodes() {
        let su = scale.map_or(1.0, |s| s[u]);
        let row = out.row_mut(u);
        for (o, v) in row.iter_mut().zip(x.row(u)) {
            *o += su * su * v;
        }
        for &v in graph.neighbors(u) {
            let w = scale.map_or(1.0, |s| su * s[v]);
            for (o, xv) in row.iter_mut().zip(x.row(v)) {
                *o += w * xv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

//! Dense-matrix reverse-mode differentiation.
//!
//! Values are row-major `f64` matrices. A [`Tape`] records each operation
//! with whatever it needs for the reverse pass; [`Tape::backward`] walks the
//! record backwards once and deposits gradients into a [`ParamStore`].
//! Besides the usual dense kernels the tape knows the graph-specific pieces
//! a message-passing model needs: closed-neighborhood aggregation over a
//! [`CsrGraph`](crate::graph::CsrGraph), per-column graph normalization, and
//! segment pooling over node sets.
//!
//! ```
//! use ssnp::autodiff::{Matrix, ParamStore, Tape};
//!
//! let mut params = ParamStore::new();
//! let w = params.add("w", Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&params, w).unwrap();
//! let loss = tape.sum_all(wv).unwrap();
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params.grad(w), &Matrix::filled(2, 2, 1.0));
//! ```

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, softmax, PoolKind, Tape, Var, GRAPH_NORM_EPS};

use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradient magnitudes below this (per unit of loss) are compared in
/// absolute rather than relative terms. Central differences at [`FD_STEP`]
/// on a loss of size `L` carry up to about `L·1e-9` of rounding noise, so a
/// relative tolerance of `1e-4` cannot resolve gradients much smaller than
/// `L·1e-5`.
pub const FD_ABS_FLOOR: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative, with the
/// denominator floored at [`FD_ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, FD_ABS_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error found for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        for p in other.params {
            match self.params.iter_mut().find(|q| q.name == p.name) {
                Some(q) => {
                    q.max_rel_error = q.max_rel_error.max(p.max_rel_error);
                    q.entries += p.entries;
                }
                None => self.params.push(p),
            }
        }
    }
}

/// Compares the gradients produced by `loss_and_backward` against central
/// differences of `loss` for every entry of every parameter.
///
/// `loss_and_backward` must leave the analytic gradients in the store; the
/// store's gradients are zeroed first. Parameter values are restored after
/// each probe. The absolute floor is [`FD_ABS_FLOOR`] times `max(1, |loss|)`
/// at the unperturbed point.
pub fn gradient_check<F, G>(params: &mut ParamStore, mut loss_and_backward: F, mut loss: G) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<()>,
    G: FnMut(&ParamStore) -> Result<f64>,
{
    let floor = FD_ABS_FLOOR * loss(params)?.abs().max(1.0);
    params.zero_grad();
    loss_and_backward(params)?;
    let analytic: Vec<Matrix> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport { params: Vec::new() };
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut worst = 0.0f64;
        let n = grad.data().len();
        for e in 0..n {
            let orig = params.value(id).data()[e];
            params.value_mut(id).data_mut()[e] = orig + FD_STEP;
            let up = loss(params)?;
            params.value_mut(id).data_mut()[e] = orig - FD_STEP;
            let down = loss(params)?;
            params.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error_floored(grad.data()[e], numeric, floor));
        }
        report.params.push(ParamCheck {
            name: params.get(id).name.clone(),
            max_rel_error: worst,
            entries: n,
        });
    }
    Ok(report)
}

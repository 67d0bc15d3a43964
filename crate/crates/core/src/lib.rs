//! Subgraph classification with stochastic subgraph neighborhood pooling.
//!
//! A subgraph (a labeled node set inside a large base graph) is represented
//! by pooling node embeddings over the subgraph *and* over a random-walk
//! sample of the nodes around it, then classifying the concatenation. Node
//! embeddings are computed once per step over the whole base graph, so no
//! per-subgraph extraction is ever needed.
//!
//! Module map:
//!
//! * [`graph`], [`dataset`]: CSR base graph, subgraph datasets, file formats
//!   and the synthetic benchmark.
//! * [`sampler`]: exact and sampled neighborhoods and the OV/PV/POV view
//!   schedules.
//! * [`autodiff`]: the tape-based differentiation engine.
//! * [`model`]: transformation layers, pooling head, classifier.
//! * [`train`]: optimizer, scheduler, metrics, training and evaluation.
//! * [`wl`]: color refinement and the expressiveness search.
//!
//! The `book/` directory at the repository root walks through each piece;
//! its code listings are compiled and run as doctests of this crate.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod wl;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/neighborhoods.md")]
    mod neighborhoods {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/expressiveness.md")]
    mod expressiveness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

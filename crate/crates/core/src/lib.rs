//! Pooling of variable-size point sets to fixed-size ones by a Wasserstein
//! gradient flow on the entropy-regularized optimal-transport objective.
//!
//! The crate is layered bottom-up:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`measures`] | weighted point sets and ground costs |
//! | [`sinkhorn`] | log-domain Sinkhorn solver, couplings, Sinkhorn divergence |
//! | [`grad`] | envelope-theorem gradients with respect to support positions |
//! | [`flow`] | the pooling flow itself (forward pass) |
//! | [`implicit`] | second-order probes, implicit and unrolled backward passes, conditioning |
//! | [`graphs`] | TU-format datasets, SGC propagation, SortPool baseline |
//! | [`pipeline`] | end-to-end classifier with cross-validated training |
//!
//! ```
//! use flowpool::flow::{flowpool, init_reference, FlowParams};
//! use ndarray::array;
//!
//! let y = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
//! let x0 = init_reference(2, 2, 7);
//! let pooled = flowpool(y.view(), x0.view(), &FlowParams::default()).unwrap();
//! assert_eq!(pooled.x_star.dim(), (2, 2));
//! ```

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod grad;
pub mod graphs;
pub mod implicit;
pub mod linalg;
pub mod measures;
pub mod pipeline;
pub mod sinkhorn;

pub use error::{Error, Result};

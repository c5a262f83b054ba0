//! Maximal flat subbundles of connections on vector bundles.
//!
//! Given a connection over a coordinate chart, [`flag::derived_flag`]
//! computes the nested chain of curvature kernels and second-fundamental-form
//! kernels whose stable limit is the largest subbundle through which local
//! parallel sections pass. `frobenius` then integrates those sections
//! explicitly, and `metric` applies the construction to symmetric 2-tensors
//! to decide whether a tangent-bundle connection is locally metric.

pub mod bundle;
pub mod exprfield;
pub mod fixtures;
pub mod flag;
pub mod frobenius;
pub mod linalg;
pub mod metric;
pub mod stencil;

pub use bundle::{Chart, Connection, SectionField};
pub use exprfield::ScalarField;

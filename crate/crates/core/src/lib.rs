//! Validity-preserving l0 adversarial examples for models trained on
//! heterogeneous tabular data.
//!
//! The attack crafts perturbations against a differentiable surrogate
//! `C ∘ f` (a metric-learned embedding `f` followed by a one-neuron task
//! solver `C`) and transfers them to tree-based targets. Immutable features
//! are masked, every perturbed coordinate is projected back onto the support
//! of its marginal, and outputs are audited for class-conditional
//! consistency.

pub mod attack;
pub mod consistency;
pub mod dataset;
pub mod diff;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod schema;
pub mod surrogate;
pub mod synth;
pub mod trees;

pub use dataset::{Dataset, Sample};
pub use error::{Error, Result};
pub use schema::{
    check_feasibility, mutable_count, parse_schema, Constraint, FeatureKind, FeatureSpec, LabelSpace, Schema, Task,
};

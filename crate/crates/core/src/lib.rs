//! Reentrant self-organizing maps.
//!
//! Two unimodal Kohonen maps are trained without labels, labeled from a small
//! subset, and linked by sparse bidirectional lateral synapses learned with
//! Hebb or Oja rules. The synapses support divergence (labeling one map
//! through the other) and convergence (multimodal classification). The
//! [`grid`] module simulates the cellular Iterative Grid that computes the
//! same winners with neighbor-only communication.

pub mod association;
pub mod data;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod inference;
pub mod labeling;
pub mod rng;
pub mod som;
pub mod synthetic;

pub use association::{associate, Association, LateralSynapses, LearningRule, PruneSpec};
pub use data::{FeatureMatrix, PairedDataset};
pub use error::{Error, Result};
pub use experiments::{ExperimentSpec, RunRecord};
pub use inference::{ConvergenceConfig, GlobalDecision};
pub use labeling::LabeledSom;
pub use som::{ActivationField, GridMetric, SomGrid, TrainSchedule};

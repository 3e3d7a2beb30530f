//! Certified ℓ∞-robust networks: architectures, training, certification,
//! and executable constructions.
//!
//! The crate implements four 1-Lipschitz architecture families — standard
//! weight-constrained nets, MaxMin/GroupSort nets, ℓ∞-distance nets, and
//! SortNets with geometric order-statistic weights — together with:
//!
//! * margin-based robustness certification, interval bound propagation for a
//!   non-Lipschitz MLP head, and PGD empirical evaluation;
//! * the full training recipe for stochastic SortNets (Bernoulli-max
//!   estimator, ℓp-relaxed maxima, mixed cross-entropy/hinge losses,
//!   mean-shift normalization, Adam with constraint projection);
//! * constructive expressivity results as code (Boolean functions and order
//!   statistics as two-layer ℓ∞-nets, Batcher MaxMin sorting networks,
//!   tight symmetric classifiers) and empirical checks of the matching
//!   impossibility bounds;
//! * MNIST/Boolean dataset handling and a CLI (`lipcert`) wiring it all
//!   into reproducible jobs.

pub mod certify;
pub mod constructions;
pub mod data;
pub mod error;
pub mod network;
pub mod numeric;
pub mod parallel;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use network::{ActKind, Layer, Network, SortWeights};
pub use numeric::Tensor;
pub use rng::RandomSource;

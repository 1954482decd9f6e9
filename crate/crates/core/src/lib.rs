//! Engine for steering synthetic training-image dataset expansion.

pub mod bench;
pub mod corpus;
pub mod evaluate;
pub mod hierarchy;
pub mod metrics;
pub mod projection;
pub mod providers;
pub mod refine;
pub mod scalar;
pub mod theory;

pub use scalar::Scalar;

/// Precision used by the service and the command line.
pub type Real = f64;
pub type Corpus = corpus::Corpus<Real>;
pub type ImageRecord = corpus::ImageRecord<Real>;
pub type LabelRecord = corpus::LabelRecord<Real>;
pub type Layout = projection::Layout<Real>;
pub type LabelTree = hierarchy::LabelTree<Real>;
pub type Network = projection::Network<Real>;
pub type FeedbackTarget = refine::FeedbackTarget<Real>;

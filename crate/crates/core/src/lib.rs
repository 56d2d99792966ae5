//! Two-phase (portal-venous + arterial) CT tumor segmentation.
//!
//! The crate is self-contained: a small tensor engine with reverse-mode
//! autodiff ([`graph`]), the spatial phase-aggregation block ([`sam`]), the
//! confidence-guided refinement head ([`urim`]), the two-stream network
//! ([`net`]), a seeded two-phase phantom generator with the usual CT
//! preprocessing ([`phantom`]), segmentation metrics ([`metrics`]) and the
//! training / evaluation / ablation harness ([`train`]).

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod rng;
pub mod sam;
pub mod tensor;
pub mod train;
pub mod urim;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use metrics::{CaseMetrics, MetricsReport};
pub use net::{FusionMode, ForwardOutputs, Network, NetworkConfig};
pub use params::{ParamId, ParamStore};
pub use phantom::{PhaseCaseSample, PhantomCase, PhantomParams};
pub use rng::Rng;
pub use sam::ResponseMaps;
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, Variant};
pub use urim::ConfidenceMap;
pub use volume::Volume;

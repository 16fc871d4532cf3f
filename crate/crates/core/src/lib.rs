//! Personalized federated learning for probabilistic load forecasting.
//!
//! Clients exchange parameter differences with a server that keeps a consensus
//! model and a learnable graph-attention mixture-of-experts aggregator. The
//! aggregator turns every client's output-head delta into a personalized update
//! that is shipped back alongside the consensus parameters.

pub mod aggregator;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod metrics;
pub mod numeric;
pub mod params;
pub mod protocol;

pub use error::{Error, Result};
pub use params::{ClientId, DeltaUpdate, LayerKind, LayerSpec, Layout, ParameterVector};

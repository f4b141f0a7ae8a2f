//! Deterministic simulator for federated training with layer-wise adaptive
//! local steps, plus the baseline protocols it is compared against.
//!
//! Every source of randomness is a keyed ChaCha stream (see [`rng`]), and
//! server aggregation reduces in client-id order, so a run is a pure
//! function of its configuration and seed regardless of thread count.

pub mod bench;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use federation::{FederationConfig, ProtocolKind, RoundMetrics, Simulation};
pub use params::{FlatStat, LayeredParams, Layout};

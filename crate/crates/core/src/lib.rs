//! Energy-aware opportunistic federated learning.
//!
//! A device that needs a model asks nearby peers for theirs against an
//! incentive, averages what it receives, fine-tunes on its own data and
//! stops as soon as the model is accurate enough, the battery runs low, or a
//! round cap is hit. The crate holds the classifier, aggregation, the
//! requester and collaborator state machines, time/energy accounting, a
//! simulated and a TCP transport, dataset tooling, CFL/DFL/cloud-only
//! baselines and the experiment runner behind the `enfed` binary.

pub mod aggregate;
pub mod baselines;
pub mod datasets;
pub mod energy;
pub mod experiment;
pub mod nn;
pub mod protocol;
pub mod transport;

use std::fmt;

/// Identifier of a device in a run. The requester is conventionally 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "device-{}", self.0)
    }
}

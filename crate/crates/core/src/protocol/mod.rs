//! The opportunistic exchange: a requester soliciting trained models from
//! nearby collaborators, written as sans-IO state machines that simulated and
//! TCP drivers feed with events.

mod collaborator;
mod requester;
mod simulate;
mod tcp;

pub use collaborator::{Collaborator, CollaboratorPolicy, CollaboratorStats};
pub use requester::{Checkpoint, Requester, RequesterReport};
pub use simulate::{simulate_enfed, CollaboratorSetup, EnfedSim, SimRun, TraceEntry};
pub use tcp::{run_requester_tcp, serve_collaborator_tcp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::datasets::DataError;
use crate::energy::EnergyError;
use crate::nn::{Hyperparams, NnError};
use crate::transport::{ProtocolMessage, SimError, WireError};
use crate::DeviceId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("simulation exceeded {0} events")]
    EventBudget(usize),
}

impl ProtocolError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            ProtocolError::Nn(NnError::Diverged { .. })
                | ProtocolError::Aggregate(AggregateError::Nn(NnError::Diverged { .. }))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequesterConfig {
    #[serde(default = "default_app_id")]
    pub app_id: String,
    /// Target test accuracy in (0, 1].
    pub desired_accuracy: f64,
    pub max_collaborators: usize,
    pub max_rounds: u32,
    /// Percent.
    pub battery_min: f64,
    #[serde(default)]
    pub incentive: f64,
    /// Simulated seconds a collaborator has to answer, per collection phase.
    pub response_timeout: f64,
    #[serde(default = "default_split")]
    pub train_ratio: f64,
    pub hyperparams: Hyperparams,
}

fn default_app_id() -> String {
    "enfed".into()
}

fn default_split() -> f64 {
    0.8
}

impl RequesterConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if !(self.desired_accuracy > 0.0 && self.desired_accuracy <= 1.0) {
            return bad(format!("desired_accuracy {} not in (0, 1]", self.desired_accuracy));
        }
        if self.max_collaborators == 0 {
            return bad("max_collaborators must be at least 1".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1".into());
        }
        // 100 is allowed: it forces a stop after the first model arrives.
        if !(0.0..=100.0).contains(&self.battery_min) {
            return bad(format!("battery_min {} not in [0, 100]", self.battery_min));
        }
        if !(self.incentive >= 0.0 && self.incentive.is_finite()) {
            return bad(format!("incentive {} must be non-negative", self.incentive));
        }
        if !(self.response_timeout > 0.0) {
            return bad(format!("response_timeout {} must be positive", self.response_timeout));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio {} not in (0, 1)", self.train_ratio));
        }
        self.hyperparams.validate()?;
        Ok(())
    }
}

/// Why a run that aggregated at least once ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AccuracyReached,
    BatteryLow,
    MaxRoundsReached,
    /// Every remaining collaborator missed a round deadline.
    CollaboratorsLost,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::AccuracyReached => "accuracy_reached",
            StopReason::BatteryLow => "battery_low",
            StopReason::MaxRoundsReached => "max_rounds_reached",
            StopReason::CollaboratorsLost => "collaborators_lost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed(StopReason),
    NoCollaborators,
}

impl RunOutcome {
    pub fn label(self) -> &'static str {
        match self {
            RunOutcome::Completed(r) => r.as_str(),
            RunOutcome::NoCollaborators => "no_collaborators",
        }
    }
}

/// Inputs to a device state machine.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Start,
    Deliver { from: DeviceId, msg: ProtocolMessage },
    /// Bytes from `from` that did not decode.
    Malformed { from: DeviceId, error: WireError },
    Timer { id: u64 },
}

/// Outputs of a device state machine. `at` is the sender's local clock.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: DeviceId, msg: ProtocolMessage, at: f64 },
    SetTimer { id: u64, at: f64 },
}

/// Messages the requester sent or processed, by type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageCounts {
    pub request: u64,
    pub accept: u64,
    pub reject: u64,
    pub model_update: u64,
    pub pull_request: u64,
    pub close: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.request + self.accept + self.reject + self.model_update + self.pull_request + self.close
    }
}

pub const CLOSE_DONE: &str = "done";
pub const CLOSE_TIMEOUT: &str = "timeout";
pub const CLOSE_PROTOCOL_ERROR: &str = "protocol-error";

/// How a device prices its own work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySetup {
    pub cost: crate::energy::CostModel,
    pub profile: crate::energy::PowerProfile,
    pub clock: crate::energy::ClockMode,
}

impl Default for EnergySetup {
    fn default() -> Self {
        Self {
            cost: Default::default(),
            profile: Default::default(),
            clock: crate::energy::ClockMode::Simulated,
        }
    }
}

/// `(rows, cols)` per layer implied by a hyperparameter set.
pub(crate) fn expected_shape(hp: &Hyperparams) -> Vec<(usize, usize)> {
    hp.layer_sizes.windows(2).map(|p| (p[1], p[0])).collect()
}

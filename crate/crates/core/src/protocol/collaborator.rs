use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{expected_shape, Action, EnergySetup, Event, ProtocolError, CLOSE_PROTOCOL_ERROR};
use crate::aggregate::ModelBundle;
use crate::datasets::Dataset;
use crate::energy::{timed, EnergyLedger, Phase, Work};
use crate::nn::{fit, Hyperparams, ModelWeights};
use crate::transport::ProtocolMessage;
use crate::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollaboratorPolicy {
    /// Accepts a request iff the offered incentive is at least this.
    pub reserve_price: f64,
    /// Fine-tune on local data before answering each pull request.
    #[serde(default)]
    pub retrain_between_rounds: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollaboratorStats {
    pub requests: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub models_sent: u64,
    pub pulls: u64,
    pub closes_received: u64,
    pub protocol_errors: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Conn {
    accepted: bool,
    closed: bool,
    last_round: u32,
}

/// A nearby device holding a trained model.
#[derive(Debug)]
pub struct Collaborator {
    id: DeviceId,
    policy: CollaboratorPolicy,
    model: ModelWeights,
    data: Dataset,
    hp: Hyperparams,
    energy: EnergySetup,
    ledger: EnergyLedger,
    clock: f64,
    conns: BTreeMap<DeviceId, Conn>,
    stats: CollaboratorStats,
}

impl Collaborator {
    pub fn new(
        id: DeviceId,
        policy: CollaboratorPolicy,
        model: ModelWeights,
        data: Dataset,
        hp: Hyperparams,
        energy: EnergySetup,
    ) -> Result<Self, ProtocolError> {
        if !(policy.reserve_price >= 0.0 && policy.reserve_price.is_finite()) {
            return Err(ProtocolError::Config(format!("reserve price {} must be non-negative", policy.reserve_price)));
        }
        model.validate()?;
        if model.shape() != expected_shape(&hp) {
            return Err(ProtocolError::Config(format!("collaborator {id} model does not match the hyperparameters")));
        }
        Ok(Self {
            id,
            policy,
            model,
            data,
            hp,
            energy,
            ledger: EnergyLedger::default(),
            clock: 0.0,
            conns: BTreeMap::new(),
            stats: CollaboratorStats::default(),
        })
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn model(&self) -> &ModelWeights {
        &self.model
    }

    pub fn stats(&self) -> CollaboratorStats {
        self.stats
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// True once every connection this device has seen is closed.
    pub fn all_closed(&self) -> bool {
        self.conns.values().all(|c| c.closed)
    }

    pub fn handle(&mut self, event: Event, now: f64) -> Result<Vec<Action>, ProtocolError> {
        self.clock = self.clock.max(now);
        let mut out = Vec::new();
        match event {
            Event::Start | Event::Timer { .. } => {}
            Event::Malformed { from, .. } => self.protocol_error(from, &mut out)?,
            Event::Deliver { from, msg } => {
                if self.conns.get(&from).is_some_and(|c| c.closed) {
                    return Ok(out);
                }
                match msg {
                    ProtocolMessage::Request { incentive, .. } => self.on_request(from, incentive, &mut out)?,
                    ProtocolMessage::PullRequest { round } => self.on_pull(from, round, &mut out)?,
                    ProtocolMessage::Close { .. } => {
                        self.stats.closes_received += 1;
                        self.conns.entry(from).or_default().closed = true;
                    }
                    ProtocolMessage::Accept { .. } | ProtocolMessage::Reject { .. } | ProtocolMessage::ModelUpdate { .. } => {
                        self.protocol_error(from, &mut out)?
                    }
                }
            }
        }
        Ok(out)
    }

    fn send(&mut self, to: DeviceId, msg: ProtocolMessage, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let secs = self
            .energy
            .cost
            .duration(&Work::Transfer { bytes: msg.wire_len(), bandwidth: self.energy.cost.local_bandwidth })?;
        self.ledger.charge(Phase::Send, secs, &self.energy.profile)?;
        if matches!(msg, ProtocolMessage::ModelUpdate { .. }) {
            self.stats.models_sent += 1;
        }
        out.push(Action::Send { to, msg, at: self.clock });
        Ok(())
    }

    fn model_update(&self, round: u32) -> ProtocolMessage {
        ProtocolMessage::ModelUpdate {
            round,
            bundle: ModelBundle { source: self.id, weights: self.model.clone(), round },
        }
    }

    fn on_request(&mut self, from: DeviceId, incentive: f64, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        if self.conns.contains_key(&from) {
            return Ok(());
        }
        self.stats.requests += 1;
        if incentive >= self.policy.reserve_price {
            self.stats.accepted += 1;
            self.conns.insert(from, Conn { accepted: true, closed: false, last_round: 0 });
            self.send(from, ProtocolMessage::Accept { device_id: self.id }, out)?;
            let update = self.model_update(0);
            self.send(from, update, out)?;
        } else {
            self.stats.rejected += 1;
            self.conns.insert(from, Conn { accepted: false, closed: true, last_round: 0 });
            self.send(from, ProtocolMessage::Reject { device_id: self.id }, out)?;
        }
        Ok(())
    }

    fn on_pull(&mut self, from: DeviceId, round: u32, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let Some(conn) = self.conns.get(&from).copied().filter(|c| c.accepted) else {
            return self.protocol_error(from, out);
        };
        if round < conn.last_round {
            return self.protocol_error(from, out);
        }
        self.stats.pulls += 1;
        if self.policy.retrain_between_rounds {
            let mut hp = self.hp.clone();
            hp.seed = hp.seed.wrapping_add(round as u64);
            let work = Work::LocalTrain {
                epochs: hp.epochs,
                samples: self.data.len(),
                batch_size: hp.batch_size,
                params: self.model.param_count(),
            };
            let (fitted, secs) = timed(self.energy.clock, &self.energy.cost, &work, || fit(&self.model, &self.data, &hp))?;
            self.model = fitted?.weights;
            self.ledger.charge(Phase::LocalTrain, secs, &self.energy.profile)?;
            self.clock += secs;
        }
        self.conns.insert(from, Conn { last_round: round, ..conn });
        let update = self.model_update(round);
        self.send(from, update, out)
    }

    fn protocol_error(&mut self, from: DeviceId, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.stats.protocol_errors += 1;
        let conn = self.conns.entry(from).or_default();
        if conn.closed {
            return Ok(());
        }
        conn.closed = true;
        self.send(from, ProtocolMessage::Close { reason: CLOSE_PROTOCOL_ERROR.into() }, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_generate;
    use crate::nn::init_mlp;
    use crate::transport::WireError;

    fn hp() -> Hyperparams {
        Hyperparams { layer_sizes: vec![3, 4, 2], epochs: 2, batch_size: 4, learning_rate: 0.01, seed: 1 }
    }

    fn collaborator(reserve: f64, retrain: bool) -> Collaborator {
        let policy = CollaboratorPolicy { reserve_price: reserve, retrain_between_rounds: retrain };
        let data = synth_generate(2, 10, 3, 3.0, 1).unwrap();
        Collaborator::new(DeviceId(5), policy, init_mlp(&hp()).unwrap(), data, hp(), EnergySetup::default()).unwrap()
    }

    fn request(incentive: f64) -> Event {
        Event::Deliver {
            from: DeviceId(0),
            msg: ProtocolMessage::Request { app_id: "a".into(), incentive, round_cap: 3 },
        }
    }

    fn sent(actions: &[Action]) -> Vec<ProtocolMessage> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { msg, .. } => Some(msg.clone()),
                _ => None,
            })
            .collect()
    }

    fn pull(round: u32) -> Event {
        Event::Deliver { from: DeviceId(0), msg: ProtocolMessage::PullRequest { round } }
    }

    #[test]
    fn accepts_at_or_above_reserve() {
        let mut c = collaborator(3.0, false);
        let out = sent(&c.handle(request(5.0), 0.0).unwrap());
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], ProtocolMessage::Accept { device_id: DeviceId(5) });
        assert!(matches!(&out[1], ProtocolMessage::ModelUpdate { round: 0, bundle } if bundle.source == DeviceId(5)));

        let mut c = collaborator(3.0, false);
        assert_eq!(sent(&c.handle(request(3.0), 0.0).unwrap())[0], ProtocolMessage::Accept { device_id: DeviceId(5) });
    }

    #[test]
    fn rejects_below_reserve_and_never_sends_a_model() {
        let mut c = collaborator(3.0, false);
        assert_eq!(sent(&c.handle(request(2.0), 0.0).unwrap()), vec![ProtocolMessage::Reject { device_id: DeviceId(5) }]);
        assert!(sent(&c.handle(pull(1), 1.0).unwrap()).is_empty());
        assert_eq!(c.stats().models_sent, 0);
    }

    #[test]
    fn without_retraining_pulls_return_identical_bytes() {
        let mut c = collaborator(0.0, false);
        c.handle(request(1.0), 0.0).unwrap();
        let a = sent(&c.handle(pull(1), 1.0).unwrap());
        let b = sent(&c.handle(pull(2), 2.0).unwrap());
        let bytes = |m: &ProtocolMessage| match m {
            ProtocolMessage::ModelUpdate { bundle, .. } => crate::transport::encode_model(&bundle.weights),
            _ => panic!("expected a model"),
        };
        assert_eq!(bytes(&a[0]), bytes(&b[0]));
    }

    #[test]
    fn retraining_changes_the_model_and_costs_time() {
        let mut c = collaborator(0.0, true);
        c.handle(request(1.0), 0.0).unwrap();
        let before = c.model().clone();
        let out = c.handle(pull(1), 1.0).unwrap();
        assert_ne!(c.model(), &before);
        assert!(c.clock() > 1.0);
        assert!(matches!(&out[0], Action::Send { at, .. } if *at == c.clock()));
    }

    #[test]
    fn garbage_gets_a_protocol_error_close() {
        let mut c = collaborator(0.0, false);
        let err = Event::Malformed { from: DeviceId(0), error: WireError::UnknownMsgType(9) };
        assert_eq!(
            sent(&c.handle(err, 0.0).unwrap()),
            vec![ProtocolMessage::Close { reason: CLOSE_PROTOCOL_ERROR.into() }]
        );
        assert!(c.handle(request(1.0), 0.0).unwrap().is_empty());
    }

    #[test]
    fn close_is_terminal() {
        let mut c = collaborator(0.0, false);
        c.handle(request(1.0), 0.0).unwrap();
        c.handle(Event::Deliver { from: DeviceId(0), msg: ProtocolMessage::Close { reason: "done".into() } }, 1.0)
            .unwrap();
        assert!(c.all_closed());
        assert!(c.handle(pull(1), 2.0).unwrap().is_empty());
        assert_eq!(c.stats().closes_received, 1);
    }
}

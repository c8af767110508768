use std::collections::BTreeSet;

use super::{
    expected_shape, Action, EnergySetup, Event, MessageCounts, ProtocolError, RequesterConfig, RunOutcome,
    StopReason, CLOSE_DONE, CLOSE_PROTOCOL_ERROR, CLOSE_TIMEOUT,
};
use crate::aggregate::{average_weights, ModelBundle};
use crate::datasets::{split, Dataset};
use crate::energy::{check_battery, timed, BatteryCheck, BatteryState, EnergyLedger, Phase, Work};
use crate::nn::{accuracy_score, classification_report, fit, mean_loss, ClassificationReport, ModelWeights};
use crate::transport::ProtocolMessage;
use crate::DeviceId;

/// State after one aggregate-fit-evaluate cycle. Round 0 is the aggregation
/// of the initially collected models.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub battery_percent: f64,
    pub models: usize,
    pub clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequesterReport {
    /// `None` while the run is still in progress.
    pub outcome: Option<RunOutcome>,
    pub model: Option<ModelWeights>,
    /// Models gathered in the collection phase (N_c).
    pub collaborators: usize,
    /// Pull rounds completed after the initial aggregation.
    pub rounds_executed: u32,
    /// Training loss after each aggregation, initial one included.
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Set when the battery guard fired while models were still arriving.
    pub battery_tripped_in_collection: bool,
    pub ledger: EnergyLedger,
    pub battery: BatteryState,
    pub battery_min: f64,
    pub desired_accuracy: f64,
    pub max_rounds: u32,
    pub counts: MessageCounts,
    pub metrics: Option<ClassificationReport>,
    pub dropped: Vec<DeviceId>,
    pub peers: usize,
    pub clock: f64,
}

#[derive(Debug)]
enum Stage {
    Idle,
    Collecting,
    Round { round: u32, pending: BTreeSet<DeviceId>, bundles: Vec<ModelBundle> },
    Done,
}

/// The device that wants a model. Feed it events; it answers with actions.
#[derive(Debug)]
pub struct Requester {
    id: DeviceId,
    peers: Vec<DeviceId>,
    cfg: RequesterConfig,
    energy: EnergySetup,
    train: Dataset,
    test: Dataset,
    battery: BatteryState,
    ledger: EnergyLedger,
    counts: MessageCounts,
    clock: f64,
    stage: Stage,
    timer_seq: u64,
    active_timer: Option<u64>,
    acked: BTreeSet<DeviceId>,
    rejected: BTreeSet<DeviceId>,
    collected: Vec<ModelBundle>,
    /// Collaborators still in play, in arrival order.
    connected: Vec<DeviceId>,
    dropped: Vec<DeviceId>,
    battery_tripped: bool,
    model: Option<ModelWeights>,
    rounds_executed: u32,
    loss_trace: Vec<f64>,
    checkpoints: Vec<Checkpoint>,
    outcome: Option<RunOutcome>,
    metrics: Option<ClassificationReport>,
}

impl Requester {
    /// Splits `data` into train/test with `split_seed`.
    pub fn new(
        id: DeviceId,
        peers: Vec<DeviceId>,
        cfg: RequesterConfig,
        data: &Dataset,
        split_seed: u64,
        energy: EnergySetup,
        battery: BatteryState,
    ) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        if peers.is_empty() {
            return Err(ProtocolError::Config("requester has no nearby devices".into()));
        }
        if peers.contains(&id) || peers.iter().collect::<BTreeSet<_>>().len() != peers.len() {
            return Err(ProtocolError::Config("peer list has duplicates or the requester itself".into()));
        }
        if data.dim() != cfg.hyperparams.inputs() {
            return Err(ProtocolError::Config(format!(
                "data has {} features, model expects {}",
                data.dim(),
                cfg.hyperparams.inputs()
            )));
        }
        let (train, test) = split(data, cfg.train_ratio, split_seed)?;
        Ok(Self {
            id,
            peers,
            cfg,
            energy,
            train,
            test,
            battery,
            ledger: EnergyLedger::default(),
            counts: MessageCounts::default(),
            clock: 0.0,
            stage: Stage::Idle,
            timer_seq: 0,
            active_timer: None,
            acked: BTreeSet::new(),
            rejected: BTreeSet::new(),
            collected: Vec::new(),
            connected: Vec::new(),
            dropped: Vec::new(),
            battery_tripped: false,
            model: None,
            rounds_executed: 0,
            loss_trace: Vec::new(),
            checkpoints: Vec::new(),
            outcome: None,
            metrics: None,
        })
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        matches!(self.stage, Stage::Done)
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn report(&self) -> RequesterReport {
        let mut battery = self.battery;
        battery.refresh(&self.ledger);
        RequesterReport {
            outcome: self.outcome,
            model: self.model.clone(),
            collaborators: self.collected.len(),
            rounds_executed: self.rounds_executed,
            loss_trace: self.loss_trace.clone(),
            checkpoints: self.checkpoints.clone(),
            battery_tripped_in_collection: self.battery_tripped,
            ledger: self.ledger,
            battery,
            battery_min: self.cfg.battery_min,
            desired_accuracy: self.cfg.desired_accuracy,
            max_rounds: self.cfg.max_rounds,
            counts: self.counts,
            metrics: self.metrics,
            dropped: self.dropped.clone(),
            peers: self.peers.len(),
            clock: self.clock,
        }
    }

    pub fn handle(&mut self, event: Event, now: f64) -> Result<Vec<Action>, ProtocolError> {
        self.clock = self.clock.max(now);
        let mut out = Vec::new();
        match (&self.stage, event) {
            (Stage::Done, _) => {}
            (Stage::Idle, Event::Start) => self.broadcast(&mut out)?,
            (Stage::Idle, _) => {}
            (_, Event::Start) => {}
            (_, Event::Timer { id }) => {
                if self.active_timer == Some(id) {
                    self.active_timer = None;
                    self.on_deadline(&mut out)?;
                }
            }
            (_, Event::Deliver { from, msg }) => {
                if self.peers.contains(&from) {
                    self.on_message(from, msg, &mut out)?;
                }
            }
            (_, Event::Malformed { from, .. }) => {
                if self.peers.contains(&from) {
                    self.on_protocol_error(from, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    fn send(&mut self, to: DeviceId, msg: ProtocolMessage, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.charge_transfer(Phase::Send, &msg)?;
        let counter = match &msg {
            ProtocolMessage::Request { .. } => &mut self.counts.request,
            ProtocolMessage::PullRequest { .. } => &mut self.counts.pull_request,
            ProtocolMessage::Close { .. } => &mut self.counts.close,
            ProtocolMessage::Accept { .. } => &mut self.counts.accept,
            ProtocolMessage::Reject { .. } => &mut self.counts.reject,
            ProtocolMessage::ModelUpdate { .. } => &mut self.counts.model_update,
        };
        *counter += 1;
        out.push(Action::Send { to, msg, at: self.clock });
        Ok(())
    }

    fn charge_transfer(&mut self, phase: Phase, msg: &ProtocolMessage) -> Result<(), ProtocolError> {
        let secs = self
            .energy
            .cost
            .duration(&Work::Transfer { bytes: msg.wire_len(), bandwidth: self.energy.cost.local_bandwidth })?;
        self.ledger.charge(phase, secs, &self.energy.profile)?;
        Ok(())
    }

    fn arm_timer(&mut self, out: &mut Vec<Action>) {
        self.timer_seq += 1;
        self.active_timer = Some(self.timer_seq);
        out.push(Action::SetTimer { id: self.timer_seq, at: self.clock + self.cfg.response_timeout });
    }

    fn broadcast(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.stage = Stage::Collecting;
        for to in self.peers.clone() {
            let msg = ProtocolMessage::Request {
                app_id: self.cfg.app_id.clone(),
                incentive: self.cfg.incentive,
                round_cap: self.cfg.max_rounds,
            };
            self.send(to, msg, out)?;
        }
        self.arm_timer(out);
        Ok(())
    }

    fn on_message(&mut self, from: DeviceId, msg: ProtocolMessage, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        match msg {
            ProtocolMessage::Accept { .. } | ProtocolMessage::Reject { .. } => {
                if !self.acked.insert(from) {
                    return Ok(());
                }
                self.charge_transfer(Phase::Recv, &msg)?;
                if matches!(msg, ProtocolMessage::Accept { .. }) {
                    self.counts.accept += 1;
                } else {
                    self.counts.reject += 1;
                    self.rejected.insert(from);
                    if matches!(self.stage, Stage::Collecting) && self.all_answered() {
                        self.finish_collection(out)?;
                    }
                }
            }
            ProtocolMessage::ModelUpdate { round, bundle } => match &self.stage {
                Stage::Collecting => self.collect_initial(from, bundle, out)?,
                Stage::Round { round: current, pending, .. } => {
                    if round == *current && pending.contains(&from) {
                        self.collect_round(from, round, bundle, out)?;
                    }
                }
                _ => {}
            },
            // Requester-bound traffic never carries these.
            ProtocolMessage::Request { .. } | ProtocolMessage::PullRequest { .. } | ProtocolMessage::Close { .. } => {}
        }
        Ok(())
    }

    fn shape_ok(&self, w: &ModelWeights) -> bool {
        w.validate().is_ok() && w.shape() == expected_shape(&self.cfg.hyperparams)
    }

    fn collect_initial(
        &mut self,
        from: DeviceId,
        bundle: ModelBundle,
        out: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        let seen = self.collected.iter().any(|b| b.source == from);
        if seen || self.rejected.contains(&from) || self.collected.len() >= self.cfg.max_collaborators {
            return Ok(());
        }
        if !self.shape_ok(&bundle.weights) {
            return self.on_protocol_error(from, out);
        }
        let msg = ProtocolMessage::ModelUpdate { round: 0, bundle };
        self.charge_transfer(Phase::Recv, &msg)?;
        self.counts.model_update += 1;
        let ProtocolMessage::ModelUpdate { bundle, .. } = msg else { unreachable!() };
        if self.collected.is_empty() {
            let secs = self.energy.cost.duration(&Work::Init)?;
            self.ledger.charge(Phase::Init, secs, &self.energy.profile)?;
            self.clock += secs;
            self.model = Some(bundle.weights.clone());
        }
        self.collected.push(ModelBundle { source: from, ..bundle });
        self.connected.push(from);
        if check_battery(&self.battery, &self.ledger, self.cfg.battery_min) == BatteryCheck::StopNow {
            self.battery_tripped = true;
            return self.finish_collection(out);
        }
        if self.collected.len() == self.cfg.max_collaborators || self.all_answered() {
            self.finish_collection(out)?;
        }
        Ok(())
    }

    fn collect_round(
        &mut self,
        from: DeviceId,
        round: u32,
        bundle: ModelBundle,
        out: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        if !self.shape_ok(&bundle.weights) {
            return self.on_protocol_error(from, out);
        }
        let msg = ProtocolMessage::ModelUpdate { round, bundle };
        self.charge_transfer(Phase::Recv, &msg)?;
        self.counts.model_update += 1;
        let ProtocolMessage::ModelUpdate { bundle, .. } = msg else { unreachable!() };
        let finished = match &mut self.stage {
            Stage::Round { pending, bundles, .. } => {
                pending.remove(&from);
                bundles.push(ModelBundle { source: from, ..bundle });
                pending.is_empty()
            }
            _ => false,
        };
        if finished {
            self.active_timer = None;
            self.complete_round(out)?;
        }
        Ok(())
    }

    fn all_answered(&self) -> bool {
        self.peers
            .iter()
            .all(|p| self.rejected.contains(p) || self.collected.iter().any(|b| b.source == *p))
    }

    /// A peer that sent garbage is treated as one that never answered.
    fn on_protocol_error(&mut self, from: DeviceId, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        match &self.stage {
            Stage::Collecting => {
                if self.collected.iter().any(|b| b.source == from) || !self.rejected.insert(from) {
                    return Ok(());
                }
                self.send(from, ProtocolMessage::Close { reason: CLOSE_PROTOCOL_ERROR.into() }, out)?;
                if self.all_answered() {
                    self.finish_collection(out)?;
                }
            }
            Stage::Round { .. } => {
                if !self.connected.contains(&from) {
                    return Ok(());
                }
                self.drop_collaborator(from, CLOSE_PROTOCOL_ERROR, out)?;
                let finished = match &mut self.stage {
                    Stage::Round { pending, .. } => {
                        pending.remove(&from);
                        pending.is_empty()
                    }
                    _ => false,
                };
                if finished {
                    self.active_timer = None;
                    self.complete_round(out)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn drop_collaborator(&mut self, who: DeviceId, reason: &str, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.connected.retain(|c| *c != who);
        self.dropped.push(who);
        self.send(who, ProtocolMessage::Close { reason: reason.into() }, out)
    }

    fn on_deadline(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        match &mut self.stage {
            Stage::Collecting => self.finish_collection(out),
            Stage::Round { pending, .. } => {
                let late: Vec<DeviceId> =
                    self.connected.iter().copied().filter(|c| pending.contains(c)).collect();
                pending.clear();
                for who in late {
                    self.drop_collaborator(who, CLOSE_TIMEOUT, out)?;
                }
                self.complete_round(out)
            }
            _ => Ok(()),
        }
    }

    fn finish_collection(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.active_timer = None;
        if self.collected.is_empty() {
            self.outcome = Some(RunOutcome::NoCollaborators);
            self.stage = Stage::Done;
            return Ok(());
        }
        let bundles = std::mem::take(&mut self.collected);
        let result = self.aggregate_and_fit(&bundles, 0);
        self.collected = bundles;
        result?;
        if self.battery_tripped {
            return self.finish(StopReason::BatteryLow, out);
        }
        self.decide(0, out)
    }

    fn complete_round(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let Stage::Round { round, bundles, .. } = std::mem::replace(&mut self.stage, Stage::Collecting) else {
            return Ok(());
        };
        if bundles.is_empty() {
            return self.finish(StopReason::CollaboratorsLost, out);
        }
        self.aggregate_and_fit(&bundles, round)?;
        self.rounds_executed = round;
        self.decide(round, out)
    }

    /// Averages `bundles`, fine-tunes on the local training split and
    /// evaluates on the local test split.
    fn aggregate_and_fit(&mut self, bundles: &[ModelBundle], round: u32) -> Result<(), ProtocolError> {
        let params = bundles[0].weights.param_count();
        let hp = {
            let mut hp = self.cfg.hyperparams.clone();
            hp.seed = hp.seed.wrapping_add(round as u64);
            hp
        };
        let agg_work = Work::Aggregate { models: bundles.len(), params };
        let (averaged, t_agg) = timed(self.energy.clock, &self.energy.cost, &agg_work, || average_weights(bundles))?;
        let averaged = averaged?;
        self.ledger.charge(Phase::Aggregate, t_agg, &self.energy.profile)?;
        self.clock += t_agg;

        let fit_work = Work::LocalTrain {
            epochs: hp.epochs,
            samples: self.train.len(),
            batch_size: hp.batch_size,
            params,
        };
        let (fitted, t_loc) = timed(self.energy.clock, &self.energy.cost, &fit_work, || fit(&averaged, &self.train, &hp))?;
        let fitted = fitted?;
        self.ledger.charge(Phase::LocalTrain, t_loc, &self.energy.profile)?;
        self.clock += t_loc;

        let loss = mean_loss(&fitted.weights, &self.train)?;
        let accuracy = accuracy_score(&fitted.weights, &self.test)?;
        self.loss_trace.push(loss);
        self.model = Some(fitted.weights);
        self.checkpoints.push(Checkpoint {
            round,
            accuracy,
            loss,
            battery_percent: self.battery.battery_after(&self.ledger),
            models: bundles.len(),
            clock: self.clock,
        });
        Ok(())
    }

    /// Stop guards in priority order: accuracy, battery, round cap.
    fn decide(&mut self, round: u32, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let accuracy = self.checkpoints.last().map(|c| c.accuracy).unwrap_or(0.0);
        if accuracy >= self.cfg.desired_accuracy {
            return self.finish(StopReason::AccuracyReached, out);
        }
        if check_battery(&self.battery, &self.ledger, self.cfg.battery_min) == BatteryCheck::StopNow {
            return self.finish(StopReason::BatteryLow, out);
        }
        if round >= self.cfg.max_rounds {
            return self.finish(StopReason::MaxRoundsReached, out);
        }
        let next = round + 1;
        let pending: BTreeSet<DeviceId> = self.connected.iter().copied().collect();
        self.stage = Stage::Round { round: next, pending, bundles: Vec::new() };
        for to in self.connected.clone() {
            self.send(to, ProtocolMessage::PullRequest { round: next }, out)?;
        }
        self.arm_timer(out);
        Ok(())
    }

    fn finish(&mut self, reason: StopReason, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.active_timer = None;
        for to in self.connected.clone() {
            self.send(to, ProtocolMessage::Close { reason: CLOSE_DONE.into() }, out)?;
        }
        if let Some(model) = &self.model {
            self.metrics = Some(classification_report(model, &self.test)?);
        }
        self.outcome = Some(RunOutcome::Completed(reason));
        self.stage = Stage::Done;
        Ok(())
    }
}

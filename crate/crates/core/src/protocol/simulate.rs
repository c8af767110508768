use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{
    Action, Collaborator, CollaboratorPolicy, CollaboratorStats, EnergySetup, Event, ProtocolError, Requester,
    RequesterConfig, RequesterReport,
};
use crate::datasets::Dataset;
use crate::energy::BatteryState;
use crate::nn::ModelWeights;
use crate::transport::{decode_message, encode_message, LinkParams, MsgType, SendOutcome, SimNet, SimNetConfig};
use crate::DeviceId;

/// One nearby device: its policy, its already-trained model and the data it
/// fine-tunes on when asked to.
#[derive(Debug, Clone)]
pub struct CollaboratorSetup {
    pub policy: CollaboratorPolicy,
    pub model: ModelWeights,
    pub data: Dataset,
    /// Overrides the default link in both directions.
    pub link: Option<LinkParams>,
}

/// Everything a simulated run needs. The requester is `DeviceId(0)`;
/// collaborator `i` is `DeviceId(i + 1)`.
#[derive(Debug, Clone)]
pub struct EnfedSim {
    pub requester: RequesterConfig,
    pub requester_data: Dataset,
    pub split_seed: u64,
    pub collaborators: Vec<CollaboratorSetup>,
    pub net: SimNetConfig,
    pub energy: EnergySetup,
    pub battery: BatteryState,
    pub max_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub sent_at: f64,
    pub from: DeviceId,
    pub to: DeviceId,
    pub msg_type: MsgType,
    pub bytes: usize,
    /// `None` when the network dropped the frame.
    pub deliver_at: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: RequesterReport,
    pub trace: Vec<TraceEntry>,
    pub collaborator_stats: Vec<(DeviceId, CollaboratorStats)>,
}

#[derive(Debug, PartialEq)]
struct Timer {
    at: f64,
    seq: u64,
    id: u64,
}

impl Eq for Timer {}
impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timer {
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

enum Device {
    Requester(Box<Requester>),
    Collaborator(Box<Collaborator>),
}

/// Runs one requester against its collaborators over a [`SimNet`] until no
/// events remain. At equal times network deliveries go before timers.
pub fn simulate_enfed(sim: &EnfedSim) -> Result<SimRun, ProtocolError> {
    let requester_id = DeviceId(0);
    let ids: Vec<DeviceId> = (1..=sim.collaborators.len() as u32).map(DeviceId).collect();
    let mut net = SimNet::new(sim.net, std::iter::once(requester_id).chain(ids.iter().copied()))?;
    for (setup, &id) in sim.collaborators.iter().zip(&ids) {
        if let Some(link) = setup.link {
            net.set_link(requester_id, id, link)?;
            net.set_link(id, requester_id, link)?;
        }
    }
    let mut devices: Vec<Device> = Vec::with_capacity(ids.len() + 1);
    devices.push(Device::Requester(Box::new(Requester::new(
        requester_id,
        ids.clone(),
        sim.requester.clone(),
        &sim.requester_data,
        sim.split_seed,
        sim.energy,
        sim.battery,
    )?)));
    for (setup, &id) in sim.collaborators.iter().zip(&ids) {
        devices.push(Device::Collaborator(Box::new(Collaborator::new(
            id,
            setup.policy,
            setup.model.clone(),
            setup.data.clone(),
            sim.requester.hyperparams.clone(),
            sim.energy,
        )?)));
    }

    let mut timers: BinaryHeap<Timer> = BinaryHeap::new();
    let mut timer_seq = 0u64;
    let mut trace = Vec::new();

    let mut apply = |from: DeviceId,
                     actions: Vec<Action>,
                     net: &mut SimNet,
                     timers: &mut BinaryHeap<Timer>|
     -> Result<(), ProtocolError> {
        for action in actions {
            match action {
                Action::Send { to, msg, at } => {
                    let bytes = encode_message(&msg)?;
                    let len = bytes.len();
                    let outcome = net.send(from, to, bytes, at)?;
                    trace.push(TraceEntry {
                        sent_at: at,
                        from,
                        to,
                        msg_type: msg.msg_type(),
                        bytes: len,
                        deliver_at: match outcome {
                            SendOutcome::Scheduled { deliver_at } => Some(deliver_at),
                            SendOutcome::Dropped => None,
                        },
                    });
                }
                Action::SetTimer { id, at } => {
                    timer_seq += 1;
                    timers.push(Timer { at, seq: timer_seq, id });
                }
            }
        }
        Ok(())
    };

    let start = match &mut devices[0] {
        Device::Requester(r) => r.handle(Event::Start, 0.0)?,
        Device::Collaborator(_) => unreachable!(),
    };
    apply(requester_id, start, &mut net, &mut timers)?;

    let mut events = 0usize;
    loop {
        let take_timer = match (net.peek_time(), timers.peek()) {
            (None, None) => break,
            (Some(_), None) => false,
            (None, Some(_)) => true,
            (Some(t_net), Some(t)) => t.at < t_net,
        };
        events += 1;
        if events > sim.max_events {
            return Err(ProtocolError::EventBudget(sim.max_events));
        }
        if take_timer {
            let timer = timers.pop().expect("peeked");
            if let Device::Requester(r) = &mut devices[0] {
                let actions = r.handle(Event::Timer { id: timer.id }, timer.at)?;
                apply(requester_id, actions, &mut net, &mut timers)?;
            }
            continue;
        }
        let delivery = net.step().expect("peeked");
        let event = match decode_message(&delivery.bytes) {
            Ok(msg) => Event::Deliver { from: delivery.from, msg },
            Err(error) => Event::Malformed { from: delivery.from, error },
        };
        let actions = match &mut devices[delivery.to.0 as usize] {
            Device::Requester(r) => r.handle(event, delivery.time)?,
            Device::Collaborator(c) => c.handle(event, delivery.time)?,
        };
        apply(delivery.to, actions, &mut net, &mut timers)?;
    }

    let mut report = None;
    let mut collaborator_stats = Vec::new();
    for device in &devices {
        match device {
            Device::Requester(r) => report = Some(r.report()),
            Device::Collaborator(c) => collaborator_stats.push((c.id(), c.stats())),
        }
    }
    Ok(SimRun { report: report.expect("requester present"), trace, collaborator_stats })
}

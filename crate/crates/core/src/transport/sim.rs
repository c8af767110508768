use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// One-way propagation delay in seconds.
    pub latency: f64,
    /// Bytes per second; `inf` means transfer time is zero.
    pub bandwidth: f64,
    #[serde(default)]
    pub drop_probability: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { latency: 0.005, bandwidth: 1e6, drop_probability: 0.0 }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.latency >= 0.0
            && self.latency.is_finite()
            && self.bandwidth > 0.0
            && !self.bandwidth.is_nan()
            && (0.0..=1.0).contains(&self.drop_probability);
        if ok {
            Ok(())
        } else {
            Err(SimError::BadLink(format!("{self:?}")))
        }
    }

    pub fn transfer_seconds(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimNetConfig {
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("no link from {0} to itself")]
    SelfLink(DeviceId),
    #[error("invalid link parameters {0}")]
    BadLink(String),
    #[error("send stamped at {at} but the network clock is already at {now}")]
    InThePast { at: f64, now: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub seq: u64,
    pub from: DeviceId,
    pub to: DeviceId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SendOutcome {
    Scheduled { deliver_at: f64 },
    Dropped,
}

#[derive(Debug)]
struct Pending(Delivery);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Reversed so BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.time.total_cmp(&self.0.time).then(other.0.seq.cmp(&self.0.seq))
    }
}

/// Discrete-event network over a full mesh of registered devices.
#[derive(Debug)]
pub struct SimNet {
    default_link: LinkParams,
    overrides: BTreeMap<(DeviceId, DeviceId), LinkParams>,
    devices: BTreeSet<DeviceId>,
    queue: BinaryHeap<Pending>,
    last_delivery: BTreeMap<(DeviceId, DeviceId), f64>,
    rng: ChaCha8Rng,
    seq: u64,
    now: f64,
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

impl SimNet {
    pub fn new(cfg: SimNetConfig, devices: impl IntoIterator<Item = DeviceId>) -> Result<Self, SimError> {
        cfg.link.validate()?;
        Ok(Self {
            default_link: cfg.link,
            overrides: BTreeMap::new(),
            devices: devices.into_iter().collect(),
            queue: BinaryHeap::new(),
            last_delivery: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            seq: 0,
            now: 0.0,
            sent: 0,
            dropped: 0,
            delivered: 0,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn add_device(&mut self, id: DeviceId) {
        self.devices.insert(id);
    }

    /// Overrides one direction of a link.
    pub fn set_link(&mut self, from: DeviceId, to: DeviceId, params: LinkParams) -> Result<(), SimError> {
        self.check_link(from, to)?;
        params.validate()?;
        self.overrides.insert((from, to), params);
        Ok(())
    }

    pub fn link(&self, from: DeviceId, to: DeviceId) -> Result<LinkParams, SimError> {
        self.check_link(from, to)?;
        Ok(self.overrides.get(&(from, to)).copied().unwrap_or(self.default_link))
    }

    fn check_link(&self, from: DeviceId, to: DeviceId) -> Result<(), SimError> {
        for d in [from, to] {
            if !self.devices.contains(&d) {
                return Err(SimError::UnknownDevice(d));
            }
        }
        if from == to {
            return Err(SimError::SelfLink(from));
        }
        Ok(())
    }

    /// Queues `bytes` for delivery at `at + latency + len / bandwidth`, later
    /// if needed to keep the link FIFO. Every send draws exactly one value
    /// from the drop stream, whatever the link's drop probability.
    pub fn send(&mut self, from: DeviceId, to: DeviceId, bytes: Vec<u8>, at: f64) -> Result<SendOutcome, SimError> {
        let link = self.link(from, to)?;
        if at < self.now {
            return Err(SimError::InThePast { at, now: self.now });
        }
        self.sent += 1;
        let coin: f64 = self.rng.random();
        if coin < link.drop_probability {
            self.dropped += 1;
            return Ok(SendOutcome::Dropped);
        }
        let mut deliver_at = at + link.latency + link.transfer_seconds(bytes.len());
        if let Some(&prev) = self.last_delivery.get(&(from, to)) {
            deliver_at = deliver_at.max(prev);
        }
        self.last_delivery.insert((from, to), deliver_at);
        self.seq += 1;
        self.queue.push(Pending(Delivery { time: deliver_at, seq: self.seq, from, to, bytes }));
        Ok(SendOutcome::Scheduled { deliver_at })
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|p| p.0.time)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Pops the next delivery and advances the clock to its time.
    pub fn step(&mut self) -> Option<Delivery> {
        let Pending(d) = self.queue.pop()?;
        self.now = d.time;
        self.delivered += 1;
        Some(d)
    }
}

//! Per-phase time and energy accounting, battery depletion and the analytic
//! cost model used for simulated durations.
//!
//! Training time is the sum of five phase buckets (initialization,
//! requesting, receiving, local training, aggregation). Computation energy
//! is each computation bucket times its power draw; communication energy is
//! the send and receive buckets times the radio powers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("negative or non-finite duration {0}")]
    BadDuration(f64),
    #[error("unknown phase `{0}`")]
    UnknownPhase(String),
    #[error("invalid work descriptor: {0}")]
    BadWork(String),
    #[error("invalid battery: {0}")]
    BadBattery(String),
    #[error("wall-clock durations can only be taken around the work itself")]
    WallNeedsWork,
}

/// Power draw in watts for each phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerProfile {
    pub init: f64,
    pub local: f64,
    pub aggregate: f64,
    pub send: f64,
    pub recv: f64,
}

impl PowerProfile {
    pub fn uniform(watts: f64) -> Self {
        Self { init: watts, local: watts, aggregate: watts, send: watts, recv: watts }
    }

    pub fn watts(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Init => self.init,
            Phase::LocalTrain => self.local,
            Phase::Aggregate => self.aggregate,
            Phase::Send => self.send,
            Phase::Recv => self.recv,
        }
    }
}

impl Default for PowerProfile {
    /// 5 W for every phase.
    fn default() -> Self {
        Self::uniform(5.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Init,
    Send,
    Recv,
    LocalTrain,
    Aggregate,
}

impl FromStr for Phase {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "init" => Ok(Phase::Init),
            "send" => Ok(Phase::Send),
            "recv" => Ok(Phase::Recv),
            "local_train" => Ok(Phase::LocalTrain),
            "aggregate" => Ok(Phase::Aggregate),
            other => Err(EnergyError::UnknownPhase(other.to_string())),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Send => "send",
            Phase::Recv => "recv",
            Phase::LocalTrain => "local_train",
            Phase::Aggregate => "aggregate",
        })
    }
}

/// Seconds per phase and the joules they cost. Only ever grows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyLedger {
    pub t_init: f64,
    pub t_com1: f64,
    pub t_com2: f64,
    pub t_loc: f64,
    pub t_agg: f64,
    pub e_comp: f64,
    pub e_comm: f64,
}

impl EnergyLedger {
    pub fn charge(&mut self, phase: Phase, duration: f64, profile: &PowerProfile) -> Result<(), EnergyError> {
        if !(duration >= 0.0 && duration.is_finite()) {
            return Err(EnergyError::BadDuration(duration));
        }
        let joules = duration * profile.watts(phase);
        match phase {
            Phase::Init => self.t_init += duration,
            Phase::Send => self.t_com1 += duration,
            Phase::Recv => self.t_com2 += duration,
            Phase::LocalTrain => self.t_loc += duration,
            Phase::Aggregate => self.t_agg += duration,
        }
        match phase {
            Phase::Send | Phase::Recv => self.e_comm += joules,
            _ => self.e_comp += joules,
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        self.t_init + self.t_com1 + self.t_com2 + self.t_loc + self.t_agg
    }

    pub fn total_energy(&self) -> f64 {
        self.e_comp + self.e_comm
    }

    /// Energy buckets recomputed from the time buckets.
    pub fn expected_energy(&self, profile: &PowerProfile) -> (f64, f64) {
        (
            profile.init * self.t_init + profile.local * self.t_loc + profile.aggregate * self.t_agg,
            profile.send * self.t_com1 + profile.recv * self.t_com2,
        )
    }
}

pub fn total_energy(ledger: &EnergyLedger) -> f64 {
    ledger.total_energy()
}

/// Remaining charge, depleted linearly by the energy drawn against a fixed
/// joule capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryState {
    pub capacity_joules: f64,
    pub initial_percent: f64,
    pub current_percent: f64,
}

impl BatteryState {
    pub fn new(capacity_joules: f64, initial_percent: f64) -> Result<Self, EnergyError> {
        if !(capacity_joules > 0.0 && capacity_joules.is_finite()) {
            return Err(EnergyError::BadBattery(format!("capacity {capacity_joules} J")));
        }
        if !(0.0..=100.0).contains(&initial_percent) {
            return Err(EnergyError::BadBattery(format!("initial level {initial_percent}%")));
        }
        Ok(Self { capacity_joules, initial_percent, current_percent: initial_percent })
    }

    /// `B_0 - 100 * E / capacity`, clamped to `[0, 100]`.
    pub fn battery_after(&self, ledger: &EnergyLedger) -> f64 {
        (self.initial_percent - 100.0 * ledger.total_energy() / self.capacity_joules).clamp(0.0, 100.0)
    }

    pub fn refresh(&mut self, ledger: &EnergyLedger) {
        self.current_percent = self.battery_after(ledger);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatteryCheck {
    Continue,
    StopNow,
}

/// `StopNow` iff the level implied by the ledger is strictly below
/// `battery_min` percent.
pub fn check_battery(battery: &BatteryState, ledger: &EnergyLedger, battery_min: f64) -> BatteryCheck {
    if battery.battery_after(ledger) < battery_min {
        BatteryCheck::StopNow
    } else {
        BatteryCheck::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Simulated,
    Wall,
}

/// Constants turning work descriptors into simulated seconds. They are
/// configuration, not measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Flat cost of installing the first received model.
    pub init_seconds: f64,
    /// Seconds per (mini-batch x parameter) of local training.
    pub train_seconds_per_batch_param: f64,
    /// Seconds per (model x parameter) of averaging.
    pub aggregate_seconds_per_param: f64,
    /// Seconds per (sample x parameter) of inference.
    pub inference_seconds_per_sample_param: f64,
    /// Device-to-device link, bytes per second.
    pub local_bandwidth: f64,
    /// Device-to-server link, bytes per second.
    pub server_bandwidth: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            init_seconds: 0.01,
            train_seconds_per_batch_param: 1e-6,
            aggregate_seconds_per_param: 1e-7,
            inference_seconds_per_sample_param: 1e-8,
            local_bandwidth: 1e6,
            server_bandwidth: 1e5,
        }
    }
}

/// What a phase has to do, in the units the cost model prices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Work {
    Init,
    Transfer { bytes: usize, bandwidth: f64 },
    LocalTrain { epochs: usize, samples: usize, batch_size: usize, params: usize },
    Aggregate { models: usize, params: usize },
    Inference { samples: usize, params: usize },
}

impl Work {
    pub fn phase(&self) -> Option<Phase> {
        match self {
            Work::Init => Some(Phase::Init),
            Work::LocalTrain { .. } => Some(Phase::LocalTrain),
            Work::Aggregate { .. } => Some(Phase::Aggregate),
            Work::Transfer { .. } | Work::Inference { .. } => None,
        }
    }
}

impl CostModel {
    /// Analytic duration. Local training scales as
    /// `epochs * (samples / batch) * params`, aggregation as
    /// `models * params`, transfers as `bytes / bandwidth`.
    pub fn duration(&self, work: &Work) -> Result<f64, EnergyError> {
        let secs = match *work {
            Work::Init => self.init_seconds,
            Work::Transfer { bytes, bandwidth } => {
                if !(bandwidth > 0.0) {
                    return Err(EnergyError::BadWork(format!("bandwidth {bandwidth}")));
                }
                bytes as f64 / bandwidth
            }
            Work::LocalTrain { epochs, samples, batch_size, params } => {
                if epochs == 0 || samples == 0 || batch_size == 0 || params == 0 {
                    return Err(EnergyError::BadWork(format!("{work:?}")));
                }
                let batch = batch_size.min(samples);
                epochs as f64 * (samples as f64 / batch as f64) * params as f64
                    * self.train_seconds_per_batch_param
            }
            Work::Aggregate { models, params } => {
                if models == 0 || params == 0 {
                    return Err(EnergyError::BadWork(format!("{work:?}")));
                }
                models as f64 * params as f64 * self.aggregate_seconds_per_param
            }
            Work::Inference { samples, params } => {
                if params == 0 {
                    return Err(EnergyError::BadWork(format!("{work:?}")));
                }
                samples as f64 * params as f64 * self.inference_seconds_per_sample_param
            }
        };
        if !(secs >= 0.0 && secs.is_finite()) {
            return Err(EnergyError::BadDuration(secs));
        }
        Ok(secs)
    }
}

/// Simulated duration of `work`. Wall mode has nothing to measure here; use
/// [`timed`].
pub fn measure_phase(mode: ClockMode, cost: &CostModel, work: &Work) -> Result<f64, EnergyError> {
    match mode {
        ClockMode::Simulated => cost.duration(work),
        ClockMode::Wall => Err(EnergyError::WallNeedsWork),
    }
}

/// Runs `f` and reports its duration: analytic in simulated mode, elapsed
/// time in wall mode.
pub fn timed<T>(
    mode: ClockMode,
    cost: &CostModel,
    work: &Work,
    f: impl FnOnce() -> T,
) -> Result<(T, f64), EnergyError> {
    match mode {
        ClockMode::Simulated => {
            let secs = cost.duration(work)?;
            Ok((f(), secs))
        }
        ClockMode::Wall => {
            let start = Instant::now();
            let out = f();
            Ok((out, start.elapsed().as_secs_f64()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn local_training_at_five_watts() {
        let mut l = EnergyLedger::default();
        l.charge(Phase::LocalTrain, 2.0, &PowerProfile::default()).unwrap();
        assert_eq!(l.e_comp, 10.0);
        assert_eq!(l.t_loc, 2.0);
    }

    #[test]
    fn zero_duration_is_a_no_op() {
        let mut l = EnergyLedger::default();
        l.charge(Phase::Send, 0.0, &PowerProfile::default()).unwrap();
        assert_eq!(l, EnergyLedger::default());
        assert!(l.charge(Phase::Send, -1.0, &PowerProfile::default()).is_err());
    }

    #[test]
    fn totals() {
        assert_eq!(EnergyLedger::default().total_energy(), 0.0);
        let l = EnergyLedger { e_comp: 38.05, ..Default::default() };
        assert_eq!(total_energy(&l), 38.05);
    }

    #[test]
    fn phase_names() {
        assert_eq!("local_train".parse::<Phase>().unwrap(), Phase::LocalTrain);
        assert!(matches!("sleep".parse::<Phase>(), Err(EnergyError::UnknownPhase(_))));
        for p in [Phase::Init, Phase::Send, Phase::Recv, Phase::LocalTrain, Phase::Aggregate] {
            assert_eq!(p.to_string().parse::<Phase>().unwrap(), p);
        }
    }

    #[test]
    fn battery_depletes_linearly() {
        let b = BatteryState::new(10_000.0, 25.0).unwrap();
        let l = EnergyLedger { e_comp: 600.0, ..Default::default() };
        assert!((b.battery_after(&l) - 19.0).abs() < 1e-12);
        assert_eq!(check_battery(&b, &l, 20.0), BatteryCheck::StopNow);
        assert_eq!(b.battery_after(&EnergyLedger::default()), 25.0);
        let drained = EnergyLedger { e_comm: 2_500.0, ..Default::default() };
        assert_eq!(b.battery_after(&drained), 0.0);
        let over = EnergyLedger { e_comm: 9_000.0, ..Default::default() };
        assert_eq!(b.battery_after(&over), 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let l = EnergyLedger::default();
        let low = BatteryState::new(1000.0, 19.9).unwrap();
        assert_eq!(check_battery(&low, &l, 20.0), BatteryCheck::StopNow);
        let edge = BatteryState::new(1000.0, 20.0).unwrap();
        assert_eq!(check_battery(&edge, &l, 20.0), BatteryCheck::Continue);
    }

    #[test]
    fn cost_model_is_linear() {
        let c = CostModel::default();
        let t = |epochs| {
            c.duration(&Work::LocalTrain { epochs, samples: 100, batch_size: 32, params: 500 }).unwrap()
        };
        assert_eq!(t(20), 2.0 * t(10));
        let agg = |models| c.duration(&Work::Aggregate { models, params: 500 }).unwrap();
        assert!((agg(5) / agg(1) - 5.0).abs() < 1e-12);
        let tx = c.duration(&Work::Transfer { bytes: 1_000, bandwidth: f64::INFINITY }).unwrap();
        assert_eq!(tx, 0.0);
        assert!(c.duration(&Work::LocalTrain { epochs: 0, samples: 1, batch_size: 1, params: 1 }).is_err());
    }

    #[test]
    fn wall_mode_measures_the_closure() {
        let c = CostModel::default();
        assert_eq!(measure_phase(ClockMode::Wall, &c, &Work::Init), Err(EnergyError::WallNeedsWork));
        let (v, secs) = timed(ClockMode::Wall, &c, &Work::Init, || 7).unwrap();
        assert_eq!(v, 7);
        assert!(secs >= 0.0);
        let (_, sim) = timed(ClockMode::Simulated, &c, &Work::Init, || ()).unwrap();
        assert_eq!(sim, c.init_seconds);
    }

    proptest! {
        #[test]
        fn ledger_energy_matches_term_sum(durations in proptest::collection::vec((0usize..5, 0.0f64..100.0), 0..40)) {
            let profile = PowerProfile { init: 1.5, local: 4.0, aggregate: 2.5, send: 7.0, recv: 3.0 };
            let phases = [Phase::Init, Phase::Send, Phase::Recv, Phase::LocalTrain, Phase::Aggregate];
            let mut l = EnergyLedger::default();
            let mut sums = [0.0f64; 5];
            let mut prev = l;
            for (p, d) in durations {
                l.charge(phases[p], d, &profile).unwrap();
                sums[p] += d;
                prop_assert!(l.total_time() >= prev.total_time() && l.total_energy() >= prev.total_energy());
                prev = l;
            }
            let oracle = 1.5 * sums[0] + 7.0 * sums[1] + 3.0 * sums[2] + 4.0 * sums[3] + 2.5 * sums[4];
            prop_assert!((l.total_energy() - oracle).abs() <= 1e-9 * oracle.max(1.0));
            let (comp, comm) = l.expected_energy(&profile);
            prop_assert!((l.e_comp - comp).abs() <= 1e-9 * comp.max(1.0));
            prop_assert!((l.e_comm - comm).abs() <= 1e-9 * comm.max(1.0));
        }
    }
}

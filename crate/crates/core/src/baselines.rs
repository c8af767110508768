//! Reference flows on the same model, data and cost machinery: centralized
//! FL through a server, decentralized full-mesh FL, and cloud-only inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{average_weights, AggregateError, ModelBundle};
use crate::datasets::{split, DataError, Dataset};
use crate::energy::{timed, BatteryState, EnergyError, EnergyLedger, Phase, Work};
use crate::nn::{
    accuracy_score, classification_report, fit, init_mlp, mean_loss, ClassificationReport, Hyperparams, ModelWeights,
    NnError,
};
use crate::protocol::{EnergySetup, StopReason};
use crate::transport::{blob_len, LinkParams};
use crate::DeviceId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
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
}

impl BaselineError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            BaselineError::Nn(NnError::Diverged { .. })
                | BaselineError::Aggregate(AggregateError::Nn(NnError::Diverged { .. }))
        )
    }
}

/// Shared settings of the round-based baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: u32,
    /// Stop early once device 0's test accuracy reaches this.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    pub hyperparams: Hyperparams,
    #[serde(default = "default_ratio")]
    pub train_ratio: f64,
}

fn default_ratio() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudConfig {
    pub link: LinkParams,
    /// Server inference is this many times faster than the device.
    #[serde(default = "default_speed")]
    pub server_speed_factor: f64,
}

fn default_speed() -> f64 {
    1.0
}

/// Outcome of a baseline run, costed from device 0's point of view.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    /// `None` for the cloud-only flow, which has no rounds.
    pub stop_reason: Option<StopReason>,
    pub rounds_executed: u32,
    pub model: ModelWeights,
    pub metrics: ClassificationReport,
    pub ledger: EnergyLedger,
    pub battery: BatteryState,
    /// Device 0's training loss before the first round and after each one.
    pub loss_trace: Vec<f64>,
    /// Model transfers per round, all devices included.
    pub messages_per_round: Vec<u64>,
    pub uploads_per_round: Vec<u64>,
    pub broadcasts_per_round: Vec<u64>,
    pub response_time: Option<f64>,
}

impl BaselineReport {
    pub fn model_messages(&self) -> u64 {
        self.messages_per_round.iter().sum()
    }
}

fn validate(cfg: &FlConfig, partitions: &[Dataset], min: usize) -> Result<(), BaselineError> {
    cfg.hyperparams.validate()?;
    if cfg.rounds == 0 {
        return Err(BaselineError::Config("rounds must be at least 1".into()));
    }
    if partitions.len() < min {
        return Err(BaselineError::Config(format!("need at least {min} devices, got {}", partitions.len())));
    }
    if let Some(t) = cfg.target_accuracy {
        if !(t > 0.0 && t <= 1.0) {
            return Err(BaselineError::Config(format!("target accuracy {t} not in (0, 1]")));
        }
    }
    if partitions.iter().any(|p| p.dim() != cfg.hyperparams.inputs()) {
        return Err(BaselineError::Config("partition width does not match the model input".into()));
    }
    Ok(())
}

fn round_hp(hp: &Hyperparams, round: u32, device: usize) -> Hyperparams {
    let mut hp = hp.clone();
    hp.seed = hp.seed.wrapping_add(round as u64 * 1000 + device as u64);
    hp
}

fn transfer(ledger: &mut EnergyLedger, energy: &EnergySetup, phase: Phase, bytes: usize, bandwidth: f64) -> Result<(), BaselineError> {
    let secs = energy.cost.duration(&Work::Transfer { bytes, bandwidth })?;
    ledger.charge(phase, secs, &energy.profile)?;
    Ok(())
}

/// Bytes of one model on the wire, framed as a model update.
fn model_message_bytes(w: &ModelWeights) -> usize {
    5 + 12 + blob_len(w)
}

struct Device0 {
    train: Dataset,
    test: Dataset,
}

fn device0(cfg: &FlConfig, partitions: &[Dataset], split_seed: u64) -> Result<Device0, BaselineError> {
    let (train, test) = split(&partitions[0], cfg.train_ratio, split_seed)?;
    Ok(Device0 { train, test })
}

fn reached(cfg: &FlConfig, accuracy: f64) -> bool {
    cfg.target_accuracy.is_some_and(|t| accuracy >= t)
}

/// Centralized FL. Device 0 keeps a test split; the rest of every partition
/// trains. Each round all clients fit from the global model, upload to the
/// server over `server_link`, and receive the average back.
pub fn run_cfl(
    cfg: &FlConfig,
    partitions: &[Dataset],
    init: &ModelWeights,
    split_seed: u64,
    energy: &EnergySetup,
    battery: BatteryState,
) -> Result<BaselineReport, BaselineError> {
    validate(cfg, partitions, 2)?;
    let d0 = device0(cfg, partitions, split_seed)?;
    let train_sets: Vec<&Dataset> = std::iter::once(&d0.train).chain(&partitions[1..]).collect();
    let n = train_sets.len();
    let bw = energy.cost.server_bandwidth;
    let mut ledger = EnergyLedger::default();
    ledger.charge(Phase::Init, energy.cost.duration(&Work::Init)?, &energy.profile)?;

    let mut global = init.clone();
    let mut loss_trace = vec![mean_loss(&global, &d0.train)?];
    let (mut uploads, mut broadcasts, mut messages) = (Vec::new(), Vec::new(), Vec::new());
    let mut stop = StopReason::MaxRoundsReached;
    let mut rounds = 0;
    for round in 1..=cfg.rounds {
        let mut bundles = Vec::with_capacity(n);
        for (i, data) in train_sets.iter().enumerate() {
            let hp = round_hp(&cfg.hyperparams, round, i);
            let work = Work::LocalTrain {
                epochs: hp.epochs,
                samples: data.len(),
                batch_size: hp.batch_size,
                params: global.param_count(),
            };
            let (fitted, secs) = timed(energy.clock, &energy.cost, &work, || fit(&global, data, &hp))?;
            if i == 0 {
                ledger.charge(Phase::LocalTrain, secs, &energy.profile)?;
            }
            bundles.push(ModelBundle { source: DeviceId(i as u32), weights: fitted?.weights, round });
        }
        let bytes = model_message_bytes(&global);
        transfer(&mut ledger, energy, Phase::Send, bytes, bw)?;
        global = average_weights(&bundles)?;
        transfer(&mut ledger, energy, Phase::Recv, bytes, bw)?;
        uploads.push(n as u64);
        broadcasts.push(n as u64);
        messages.push(2 * n as u64);
        loss_trace.push(mean_loss(&global, &d0.train)?);
        rounds = round;
        if reached(cfg, accuracy_score(&global, &d0.test)?) {
            stop = StopReason::AccuracyReached;
            break;
        }
    }
    finish(global, &d0.test, ledger, battery, Some(stop), rounds, loss_trace, messages, uploads, broadcasts, None)
}

/// Decentralized FL over a full mesh. Each round every node fits its own
/// model, sends it to all peers, and replaces it with the average of all
/// models, its own included (node order fixes the summation order).
pub fn run_dfl(
    cfg: &FlConfig,
    partitions: &[Dataset],
    inits: &[ModelWeights],
    split_seed: u64,
    energy: &EnergySetup,
    battery: BatteryState,
) -> Result<BaselineReport, BaselineError> {
    validate(cfg, partitions, 2)?;
    if inits.len() != partitions.len() {
        return Err(BaselineError::Config("need one initial model per node".into()));
    }
    let d0 = device0(cfg, partitions, split_seed)?;
    let train_sets: Vec<&Dataset> = std::iter::once(&d0.train).chain(&partitions[1..]).collect();
    let n = train_sets.len();
    let bw = energy.cost.local_bandwidth;
    let mut ledger = EnergyLedger::default();
    ledger.charge(Phase::Init, energy.cost.duration(&Work::Init)?, &energy.profile)?;

    let mut models: Vec<ModelWeights> = inits.to_vec();
    let mut loss_trace = vec![mean_loss(&models[0], &d0.train)?];
    let mut messages = Vec::new();
    let mut stop = StopReason::MaxRoundsReached;
    let mut rounds = 0;
    for round in 1..=cfg.rounds {
        let mut bundles = Vec::with_capacity(n);
        for (i, data) in train_sets.iter().enumerate() {
            let hp = round_hp(&cfg.hyperparams, round, i);
            let work = Work::LocalTrain {
                epochs: hp.epochs,
                samples: data.len(),
                batch_size: hp.batch_size,
                params: models[i].param_count(),
            };
            let (fitted, secs) = timed(energy.clock, &energy.cost, &work, || fit(&models[i], data, &hp))?;
            if i == 0 {
                ledger.charge(Phase::LocalTrain, secs, &energy.profile)?;
            }
            bundles.push(ModelBundle { source: DeviceId(i as u32), weights: fitted?.weights, round });
        }
        let bytes = model_message_bytes(&models[0]);
        for _ in 1..n {
            transfer(&mut ledger, energy, Phase::Send, bytes, bw)?;
            transfer(&mut ledger, energy, Phase::Recv, bytes, bw)?;
        }
        messages.push((n * (n - 1)) as u64);
        let agg_work = Work::Aggregate { models: n, params: models[0].param_count() };
        let (averaged, secs) = timed(energy.clock, &energy.cost, &agg_work, || average_weights(&bundles))?;
        ledger.charge(Phase::Aggregate, secs, &energy.profile)?;
        // Every node averages the same set in the same order.
        let averaged = averaged?;
        models = vec![averaged; n];
        loss_trace.push(mean_loss(&models[0], &d0.train)?);
        rounds = round;
        if reached(cfg, accuracy_score(&models[0], &d0.test)?) {
            stop = StopReason::AccuracyReached;
            break;
        }
    }
    let model = models.swap_remove(0);
    finish(model, &d0.test, ledger, battery, Some(stop), rounds, loss_trace, messages, Vec::new(), Vec::new(), None)
}

/// Time for the device to get predictions for `samples` rows of width `dim`
/// from a server: upload the features, infer remotely, download one label
/// per row. Latency is paid once each way.
pub fn cloud_response_time(
    cloud: &CloudConfig,
    energy: &EnergySetup,
    samples: usize,
    dim: usize,
    params: usize,
) -> Result<f64, BaselineError> {
    if !(cloud.server_speed_factor > 0.0) {
        return Err(BaselineError::Config("server speed factor must be positive".into()));
    }
    let up = energy.cost.duration(&Work::Transfer { bytes: samples * dim * 4, bandwidth: cloud.link.bandwidth })?;
    let down = energy.cost.duration(&Work::Transfer { bytes: samples * 4, bandwidth: cloud.link.bandwidth })?;
    let infer = energy.cost.duration(&Work::Inference { samples, params })? / cloud.server_speed_factor;
    Ok(cloud.link.latency + up + infer + cloud.link.latency + down)
}

/// Cloud-only flow: the device ships its test features to a server whose
/// model was trained on the pooled data of every device, and gets labels
/// back. Only transfers land on the device ledger.
pub fn run_cloud_only(
    cloud: &CloudConfig,
    hp: &Hyperparams,
    partitions: &[Dataset],
    train_ratio: f64,
    split_seed: u64,
    energy: &EnergySetup,
    battery: BatteryState,
) -> Result<BaselineReport, BaselineError> {
    hp.validate()?;
    cloud.link.validate().map_err(|e| BaselineError::Config(e.to_string()))?;
    if partitions.is_empty() {
        return Err(BaselineError::Config("no data".into()));
    }
    let (train0, test) = split(&partitions[0], train_ratio, split_seed)?;
    let pooled_parts: Vec<&Dataset> = std::iter::once(&train0).chain(&partitions[1..]).collect();
    let pooled = Dataset::concat(&pooled_parts)?;
    let server = fit(&init_mlp(hp)?, &pooled, hp)?.weights;

    let mut ledger = EnergyLedger::default();
    transfer(&mut ledger, energy, Phase::Send, test.len() * test.dim() * 4, cloud.link.bandwidth)?;
    transfer(&mut ledger, energy, Phase::Recv, test.len() * 4, cloud.link.bandwidth)?;
    let response = cloud_response_time(cloud, energy, test.len(), test.dim(), server.param_count())?;
    let loss_trace = vec![mean_loss(&server, &pooled)?];
    finish(server, &test, ledger, battery, None, 0, loss_trace, Vec::new(), Vec::new(), Vec::new(), Some(response))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: ModelWeights,
    test: &Dataset,
    ledger: EnergyLedger,
    mut battery: BatteryState,
    stop_reason: Option<StopReason>,
    rounds_executed: u32,
    loss_trace: Vec<f64>,
    messages_per_round: Vec<u64>,
    uploads_per_round: Vec<u64>,
    broadcasts_per_round: Vec<u64>,
    response_time: Option<f64>,
) -> Result<BaselineReport, BaselineError> {
    battery.refresh(&ledger);
    Ok(BaselineReport {
        stop_reason,
        rounds_executed,
        metrics: classification_report(&model, test)?,
        model,
        ledger,
        battery,
        loss_trace,
        messages_per_round,
        uploads_per_round,
        broadcasts_per_round,
        response_time,
    })
}

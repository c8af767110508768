//! Experiment configuration and scenario orchestration behind the CLI.

mod metrics;
mod report;

pub use metrics::{metrics_to_csv, read_metrics, render_table, write_atomic, write_metrics, RunMetrics, COLUMNS};
pub use report::{read_report_rows, reduction_percent, render_report, report_files, ReportRow, REPORT_FIELDS};

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{run_cfl, run_cloud_only, run_dfl, BaselineError, CloudConfig, FlConfig};
use crate::datasets::{
    load_csv, partition, split, synth_generate, CsvSchema, DataError, Dataset, MinMaxScaler, PartitionMode,
};
use crate::energy::{BatteryState, ClockMode, CostModel, EnergyError, PowerProfile, Work};
use crate::nn::{fit, init_mlp, Hyperparams, ModelWeights};
use crate::protocol::{
    run_requester_tcp, serve_collaborator_tcp, simulate_enfed, Collaborator, CollaboratorPolicy, CollaboratorSetup,
    EnergySetup, EnfedSim, ProtocolError, Requester, RequesterConfig, RequesterReport, RunOutcome,
};
use crate::transport::{LinkParams, SimNetConfig};
use crate::DeviceId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("io: {0}")]
    Io(String),
}

impl RunError {
    pub fn is_divergence(&self) -> bool {
        match self {
            RunError::Protocol(e) => e.is_divergence(),
            RunError::Baseline(e) => e.is_divergence(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RunError::Config(_)
                | RunError::Schema(_)
                | RunError::Protocol(ProtocolError::Config(_))
                | RunError::Baseline(BaselineError::Config(_))
        )
    }

    /// Process exit status: 2 for configuration problems, 4 for divergence,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else if self.is_divergence() {
            4
        } else {
            1
        }
    }
}

pub const EXIT_NO_COLLABORATORS: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Enfed,
    Cfl,
    Dfl,
    Cloud,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Enfed => "enfed",
            Scenario::Cfl => "cfl",
            Scenario::Dfl => "dfl",
            Scenario::Cloud => "cloud",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        /// `calorie` or `harsense`.
        preset: String,
        normalize: Option<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// Device 0 is the requester (or the reported device in baselines).
    pub devices: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default)]
    pub link: LinkParams,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Iid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 32], epochs: 100, batch_size: 32, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnfedSection {
    pub app_id: String,
    pub desired_accuracy: f64,
    pub max_collaborators: usize,
    pub max_rounds: u32,
    pub battery_min: f64,
    pub incentive: f64,
    pub response_timeout: f64,
    /// Cycled over the collaborators.
    pub reserve_prices: Vec<f64>,
    pub retrain_between_rounds: bool,
    pub train_ratio: f64,
}

impl Default for EnfedSection {
    fn default() -> Self {
        Self {
            app_id: "enfed".into(),
            desired_accuracy: 0.95,
            max_collaborators: 5,
            max_rounds: 10,
            battery_min: 20.0,
            incentive: 1.0,
            response_timeout: 5.0,
            reserve_prices: vec![0.0],
            retrain_between_rounds: false,
            train_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub rounds: u32,
    pub target_accuracy: Option<f64>,
    pub cloud: CloudConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            rounds: 10,
            target_accuracy: Some(0.95),
            cloud: CloudConfig {
                link: LinkParams { latency: 0.05, bandwidth: 1e6, drop_probability: 0.0 },
                server_speed_factor: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatterySection {
    pub capacity_joules: f64,
    pub initial_percent: f64,
}

impl Default for BatterySection {
    fn default() -> Self {
        Self { capacity_joules: 50_000.0, initial_percent: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// One run per value of the requester's collaborator cap.
    pub collaborators: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcpSection {
    /// Collaborator addresses, device 1 first.
    pub peers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    pub dataset: DatasetSource,
    pub topology: Topology,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub enfed: EnfedSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub power: PowerProfile,
    #[serde(default)]
    pub battery: BatterySection,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub tcp: Option<TcpSection>,
}

fn default_clock() -> ClockMode {
    ClockMode::Simulated
}

/// Independent per-purpose seed from the master seed: the first word of the
/// ChaCha8 stream numbered `stream`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

mod streams {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const NET: u64 = 4;
    pub const INIT: u64 = 5;
    pub const REQUESTER: u64 = 6;
    pub const BASELINE: u64 = 7;
    pub const DEVICE: u64 = 1000;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DatasetSource::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.topology.devices < 2 {
            return bad(format!("topology.devices is {}, need at least 2", self.topology.devices));
        }
        self.topology.link.validate().map_err(|e| RunError::Config(e.to_string()))?;
        match &self.dataset {
            DatasetSource::Synthetic { classes, per_class, dim, separation } => {
                if *classes < 2 || *per_class == 0 || *dim == 0 || !(*separation > 0.0 && separation.is_finite()) {
                    return bad("synthetic dataset needs classes >= 2, per_class >= 1, dim >= 1, separation > 0".into());
                }
            }
            DatasetSource::Csv { preset, .. } => {
                if CsvSchema::preset(preset).is_none() {
                    return bad(format!("unknown csv preset `{preset}` (expected calorie or harsense)"));
                }
            }
        }
        if self.model.hidden.contains(&0) || self.model.epochs == 0 || self.model.batch_size == 0 {
            return bad("model hidden widths, epochs and batch_size must be positive".into());
        }
        if !(self.model.learning_rate >= 0.0 && self.model.learning_rate.is_finite()) {
            return bad(format!("model.learning_rate {} must be non-negative", self.model.learning_rate));
        }
        if self.enfed.reserve_prices.is_empty() {
            return bad("enfed.reserve_prices must not be empty".into());
        }
        self.requester_config(self.enfed.max_collaborators, self.hyperparams(2, 2, 0))
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.baseline.rounds == 0 {
            return bad("baseline.rounds must be at least 1".into());
        }
        BatteryState::new(self.battery.capacity_joules, self.battery.initial_percent)
            .map_err(|e| RunError::Config(e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.collaborators.is_empty() || s.collaborators.contains(&0) {
                return bad("sweep.collaborators must list positive counts".into());
            }
            if self.scenario != Scenario::Enfed {
                return bad("sweep is only defined for the enfed scenario".into());
            }
            if self.tcp.is_some() {
                return bad("sweep is not supported over tcp".into());
            }
        }
        if let Some(t) = &self.tcp {
            if self.scenario != Scenario::Enfed {
                return bad("tcp transport is only defined for the enfed scenario".into());
            }
            if t.peers.len() != self.topology.devices - 1 {
                return bad(format!("tcp.peers lists {} addresses for {} collaborators", t.peers.len(), self.topology.devices - 1));
            }
        }
        Ok(())
    }

    fn hyperparams(&self, inputs: usize, classes: usize, seed: u64) -> Hyperparams {
        let mut layer_sizes = vec![inputs];
        layer_sizes.extend(&self.model.hidden);
        layer_sizes.push(classes);
        Hyperparams {
            layer_sizes,
            epochs: self.model.epochs,
            batch_size: self.model.batch_size,
            learning_rate: self.model.learning_rate,
            seed,
        }
    }

    fn requester_config(&self, max_collaborators: usize, hyperparams: Hyperparams) -> RequesterConfig {
        let e = &self.enfed;
        RequesterConfig {
            app_id: e.app_id.clone(),
            desired_accuracy: e.desired_accuracy,
            max_collaborators,
            max_rounds: e.max_rounds,
            battery_min: e.battery_min,
            incentive: e.incentive,
            response_timeout: e.response_timeout,
            train_ratio: e.train_ratio,
            hyperparams,
        }
    }

    fn energy(&self) -> EnergySetup {
        EnergySetup { cost: self.cost, profile: self.power, clock: self.clock }
    }

    fn battery_state(&self) -> Result<BatteryState, RunError> {
        Ok(BatteryState::new(self.battery.capacity_joules, self.battery.initial_percent)?)
    }
}

/// Data, partitions and the shared initial model for one seed.
#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub partitions: Vec<Dataset>,
    pub hyperparams: Hyperparams,
    pub init: ModelWeights,
    pub split_seed: u64,
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, bool), RunError> {
    Ok(match &cfg.dataset {
        DatasetSource::Synthetic { classes, per_class, dim, separation } => (
            synth_generate(*classes, *per_class, *dim, *separation, derive_seed(seed, streams::DATA))?,
            false,
        ),
        DatasetSource::Csv { path, preset, normalize } => {
            let schema = CsvSchema::preset(preset).ok_or_else(|| RunError::Config(format!("unknown preset {preset}")))?;
            let normalize = normalize.unwrap_or(schema.normalize);
            (load_csv(path, &schema)?, normalize)
        }
    })
}

/// Builds the dataset, partitions it over the devices and, for CSV data,
/// min-max scales every partition with bounds fitted on the training rows
/// only (device 0's test split excluded).
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Workload, RunError> {
    let (data, normalize) = load_dataset(cfg, seed)?;
    let mut partitions =
        partition(&data, cfg.topology.devices, cfg.topology.partition, derive_seed(seed, streams::PARTITION))?;
    let split_seed = derive_seed(seed, streams::SPLIT);
    if normalize {
        let (train0, _) = split(&partitions[0], cfg.enfed.train_ratio, split_seed)?;
        let mut fit_rows: Vec<&Dataset> = vec![&train0];
        fit_rows.extend(&partitions[1..]);
        let scaler = MinMaxScaler::fit(&Dataset::concat(&fit_rows)?);
        partitions = partitions.iter().map(|p| scaler.transform(p)).collect();
    }
    let hyperparams = cfg.hyperparams(data.dim(), data.class_count(), derive_seed(seed, streams::INIT));
    hyperparams.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let init = init_mlp(&hyperparams).map_err(|e| RunError::Config(e.to_string()))?;
    Ok(Workload { seed, partitions, hyperparams, init, split_seed })
}

fn device_hp(w: &Workload, device: usize) -> Hyperparams {
    let mut hp = w.hyperparams.clone();
    hp.seed = derive_seed(w.seed, streams::DEVICE + device as u64);
    hp
}

/// Collaborator `device` (1-based) as it stands before the run: the shared
/// initial model fitted on its own partition.
pub fn build_collaborator(cfg: &ExperimentConfig, w: &Workload, device: usize) -> Result<Collaborator, RunError> {
    let hp = device_hp(w, device);
    let model = fit(&w.init, &w.partitions[device], &hp).map_err(ProtocolError::from)?.weights;
    let policy = CollaboratorPolicy {
        reserve_price: cfg.enfed.reserve_prices[(device - 1) % cfg.enfed.reserve_prices.len()],
        retrain_between_rounds: cfg.enfed.retrain_between_rounds,
    };
    Ok(Collaborator::new(DeviceId(device as u32), policy, model, w.partitions[device].clone(), hp, cfg.energy())?)
}

fn requester_hp(w: &Workload) -> Hyperparams {
    let mut hp = w.hyperparams.clone();
    hp.seed = derive_seed(w.seed, streams::REQUESTER);
    hp
}

/// Inference on the requester's own test rows, priced by the cost model.
fn local_response_time(cfg: &ExperimentConfig, samples: usize, params: usize) -> Result<f64, RunError> {
    Ok(cfg.cost.duration(&Work::Inference { samples, params })?)
}

fn test_rows(cfg: &ExperimentConfig, w: &Workload) -> Result<usize, RunError> {
    Ok(split(&w.partitions[0], cfg.enfed.train_ratio, w.split_seed)?.1.len())
}

pub fn enfed_sim(cfg: &ExperimentConfig, w: &Workload, max_collaborators: usize) -> Result<EnfedSim, RunError> {
    let mut collaborators = Vec::with_capacity(cfg.topology.devices - 1);
    for device in 1..cfg.topology.devices {
        let hp = device_hp(w, device);
        let model = fit(&w.init, &w.partitions[device], &hp).map_err(ProtocolError::from)?.weights;
        collaborators.push(CollaboratorSetup {
            policy: CollaboratorPolicy {
                reserve_price: cfg.enfed.reserve_prices[(device - 1) % cfg.enfed.reserve_prices.len()],
                retrain_between_rounds: cfg.enfed.retrain_between_rounds,
            },
            model,
            data: w.partitions[device].clone(),
            link: None,
        });
    }
    Ok(EnfedSim {
        requester: cfg.requester_config(max_collaborators, requester_hp(w)),
        requester_data: w.partitions[0].clone(),
        split_seed: w.split_seed,
        collaborators,
        net: SimNetConfig { link: cfg.topology.link, seed: derive_seed(w.seed, streams::NET) },
        energy: cfg.energy(),
        battery: cfg.battery_state()?,
        max_events: 1_000_000,
    })
}

fn enfed_metrics(cfg: &ExperimentConfig, w: &Workload, report: &RequesterReport) -> Result<RunMetrics, RunError> {
    let response = match &report.model {
        Some(m) => Some(local_response_time(cfg, test_rows(cfg, w)?, m.param_count())?),
        None => None,
    };
    Ok(RunMetrics::from_requester(w.seed, report, response))
}

/// Runs `scenario` on a prepared workload. `max_collaborators` overrides the
/// configured cap (used by sweeps).
pub fn run_scenario(
    cfg: &ExperimentConfig,
    w: &Workload,
    scenario: Scenario,
    max_collaborators: Option<usize>,
) -> Result<RunMetrics, RunError> {
    let energy = cfg.energy();
    let battery = cfg.battery_state()?;
    let fl = FlConfig {
        rounds: cfg.baseline.rounds,
        target_accuracy: cfg.baseline.target_accuracy,
        hyperparams: {
            let mut hp = w.hyperparams.clone();
            hp.seed = derive_seed(w.seed, streams::BASELINE);
            hp
        },
        train_ratio: cfg.enfed.train_ratio,
    };
    let peers = cfg.topology.devices - 1;
    match scenario {
        Scenario::Enfed => {
            let n_max = max_collaborators.unwrap_or(cfg.enfed.max_collaborators);
            if let Some(tcp) = &cfg.tcp {
                return run_enfed_tcp(cfg, w, n_max, tcp);
            }
            let run = simulate_enfed(&enfed_sim(cfg, w, n_max)?)?;
            enfed_metrics(cfg, w, &run.report)
        }
        Scenario::Cfl => {
            let r = run_cfl(&fl, &w.partitions, &w.init, w.split_seed, &energy, battery)?;
            let resp = local_response_time(cfg, test_rows(cfg, w)?, r.model.param_count())?;
            Ok(RunMetrics::from_baseline("cfl", w.seed, peers, &r, Some(resp)))
        }
        Scenario::Dfl => {
            let inits = vec![w.init.clone(); w.partitions.len()];
            let r = run_dfl(&fl, &w.partitions, &inits, w.split_seed, &energy, battery)?;
            let resp = local_response_time(cfg, test_rows(cfg, w)?, r.model.param_count())?;
            Ok(RunMetrics::from_baseline("dfl", w.seed, peers, &r, Some(resp)))
        }
        Scenario::Cloud => {
            let r = run_cloud_only(
                &cfg.baseline.cloud,
                &fl.hyperparams,
                &w.partitions,
                cfg.enfed.train_ratio,
                w.split_seed,
                &energy,
                battery,
            )?;
            Ok(RunMetrics::from_baseline("cloud", w.seed, peers, &r, None))
        }
    }
}

fn run_enfed_tcp(cfg: &ExperimentConfig, w: &Workload, n_max: usize, tcp: &TcpSection) -> Result<RunMetrics, RunError> {
    let mut peers = Vec::new();
    for (i, addr) in tcp.peers.iter().enumerate() {
        let addr: SocketAddr = addr.parse().map_err(|_| RunError::Config(format!("bad peer address {addr}")))?;
        peers.push((DeviceId(i as u32 + 1), addr));
    }
    let mut requester = Requester::new(
        DeviceId(0),
        peers.iter().map(|p| p.0).collect(),
        cfg.requester_config(n_max, requester_hp(w)),
        &w.partitions[0],
        w.split_seed,
        cfg.energy(),
        cfg.battery_state()?,
    )?;
    let report = run_requester_tcp(&mut requester, &peers)?;
    enfed_metrics(cfg, w, &report)
}

/// Serves collaborator `device` of the experiment on `listener` for one
/// requester connection.
pub fn serve_device(cfg: &ExperimentConfig, seed: u64, device: usize, listener: &TcpListener) -> Result<(), RunError> {
    if device == 0 || device >= cfg.topology.devices {
        return Err(RunError::Config(format!("device {device} is not a collaborator (1..{})", cfg.topology.devices)));
    }
    let w = prepare(cfg, seed)?;
    let mut c = build_collaborator(cfg, &w, device)?;
    serve_collaborator_tcp(listener, DeviceId(0), &mut c)?;
    Ok(())
}

/// All rows a config asks for: one run, or one per sweep value.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RunMetrics>, RunError> {
    let w = prepare(cfg, seed)?;
    match &cfg.sweep {
        Some(s) => s.collaborators.iter().map(|&n| run_scenario(cfg, &w, cfg.scenario, Some(n))).collect(),
        None => Ok(vec![run_scenario(cfg, &w, cfg.scenario, None)?]),
    }
}

pub fn any_without_collaborators(rows: &[RunMetrics]) -> bool {
    rows.iter().any(|r| r.stop_reason == RunOutcome::NoCollaborators.label())
}

/// Per-device class histograms, one line per device.
pub fn inspect_partitions(cfg: &ExperimentConfig, seed: u64) -> Result<String, RunError> {
    let w = prepare(cfg, seed)?;
    let mut out = String::new();
    for (i, p) in w.partitions.iter().enumerate() {
        let hist = p.class_histogram();
        let cells: Vec<String> = hist.iter().map(|h| h.to_string()).collect();
        out.push_str(&format!("device {i:>3}: rows={:<6} classes=[{}]\n", p.len(), cells.join(", ")));
    }
    Ok(out)
}

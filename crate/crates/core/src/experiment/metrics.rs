use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::baselines::BaselineReport;
use crate::energy::EnergyLedger;
use crate::nn::ClassificationReport;
use crate::protocol::RequesterReport;

/// One row of a metrics file. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub stop_reason: String,
    pub rounds_executed: u32,
    pub collaborators: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub t_init: f64,
    pub t_com1: f64,
    pub t_com2: f64,
    pub t_loc: f64,
    pub t_agg: f64,
    pub time_total: f64,
    pub e_comp: f64,
    pub e_comm: f64,
    pub energy_total: f64,
    pub battery_final: f64,
    pub msg_request: u64,
    pub msg_accept: u64,
    pub msg_reject: u64,
    pub msg_model_update: u64,
    pub msg_pull_request: u64,
    pub msg_close: u64,
    pub response_time: Option<f64>,
    /// Training loss per aggregation, `;`-separated.
    pub loss_trace: String,
}

pub const COLUMNS: &[&str] = &[
    "scenario",
    "seed",
    "stop_reason",
    "rounds_executed",
    "collaborators",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "t_init",
    "t_com1",
    "t_com2",
    "t_loc",
    "t_agg",
    "time_total",
    "e_comp",
    "e_comm",
    "energy_total",
    "battery_final",
    "msg_request",
    "msg_accept",
    "msg_reject",
    "msg_model_update",
    "msg_pull_request",
    "msg_close",
    "response_time",
    "loss_trace",
];

fn join_trace(trace: &[f64]) -> String {
    trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

impl RunMetrics {
    fn base(scenario: &str, seed: u64, ledger: &EnergyLedger, battery_final: f64, report: Option<ClassificationReport>) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            stop_reason: String::new(),
            rounds_executed: 0,
            collaborators: 0,
            accuracy: report.map(|r| r.accuracy),
            precision: report.map(|r| r.precision),
            recall: report.map(|r| r.recall),
            f1: report.map(|r| r.f1),
            t_init: ledger.t_init,
            t_com1: ledger.t_com1,
            t_com2: ledger.t_com2,
            t_loc: ledger.t_loc,
            t_agg: ledger.t_agg,
            time_total: ledger.total_time(),
            e_comp: ledger.e_comp,
            e_comm: ledger.e_comm,
            energy_total: ledger.total_energy(),
            battery_final,
            msg_request: 0,
            msg_accept: 0,
            msg_reject: 0,
            msg_model_update: 0,
            msg_pull_request: 0,
            msg_close: 0,
            response_time: None,
            loss_trace: String::new(),
        }
    }

    pub fn from_requester(seed: u64, r: &RequesterReport, response_time: Option<f64>) -> Self {
        let mut m = Self::base("enfed", seed, &r.ledger, r.battery.current_percent, r.metrics);
        m.stop_reason = r.outcome.map(|o| o.label()).unwrap_or("incomplete").into();
        m.rounds_executed = r.rounds_executed;
        m.collaborators = r.collaborators;
        m.msg_request = r.counts.request;
        m.msg_accept = r.counts.accept;
        m.msg_reject = r.counts.reject;
        m.msg_model_update = r.counts.model_update;
        m.msg_pull_request = r.counts.pull_request;
        m.msg_close = r.counts.close;
        m.response_time = response_time;
        m.loss_trace = join_trace(&r.loss_trace);
        m
    }

    pub fn from_baseline(scenario: &str, seed: u64, peers: usize, r: &BaselineReport, response_time: Option<f64>) -> Self {
        let mut m = Self::base(scenario, seed, &r.ledger, r.battery.current_percent, Some(r.metrics));
        m.stop_reason = r.stop_reason.map(|s| s.as_str()).unwrap_or("none").into();
        m.rounds_executed = r.rounds_executed;
        m.collaborators = peers;
        m.msg_model_update = r.model_messages();
        m.response_time = r.response_time.or(response_time);
        m.loss_trace = join_trace(&r.loss_trace);
        m
    }

    pub fn loss_values(&self) -> Vec<f64> {
        self.loss_trace.split(';').filter(|s| !s.is_empty()).filter_map(|s| s.parse().ok()).collect()
    }
}

pub fn metrics_to_csv(rows: &[RunMetrics]) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| RunError::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(COLUMNS).map_err(|e| RunError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| RunError::Io(e.to_string()))
}

/// Writes next to `path` and renames into place, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| RunError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn write_metrics(path: &Path, rows: &[RunMetrics]) -> Result<(), RunError> {
    write_atomic(path, &metrics_to_csv(rows)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunMetrics>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| RunError::Io(format!("{}: {e}", path.display()))))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Human-readable summary, one block per row.
pub fn render_table(rows: &[RunMetrics]) -> String {
    let mut out = String::new();
    for m in rows {
        let lines = [
            ("scenario", m.scenario.clone()),
            ("seed", m.seed.to_string()),
            ("stop reason", m.stop_reason.clone()),
            ("rounds executed", m.rounds_executed.to_string()),
            ("collaborators", m.collaborators.to_string()),
            ("accuracy", opt(m.accuracy)),
            ("precision (macro)", opt(m.precision)),
            ("recall (macro)", opt(m.recall)),
            ("f1 (macro)", opt(m.f1)),
            ("time total [s]", format!("{:.6}", m.time_total)),
            ("energy total [J]", format!("{:.6}", m.energy_total)),
            ("battery final [%]", format!("{:.4}", m.battery_final)),
            ("response time [s]", opt(m.response_time)),
            (
                "messages",
                format!(
                    "request={} accept={} reject={} model={} pull={} close={}",
                    m.msg_request, m.msg_accept, m.msg_reject, m.msg_model_update, m.msg_pull_request, m.msg_close
                ),
            ),
        ];
        for (k, v) in lines {
            out.push_str(&format!("{k:<20} {v}\n"));
        }
        out.push('\n');
    }
    out
}

//! Scripted multi-user runs, event logs, replay and reports.

mod client;
mod log;
mod realtime;
mod report;
mod runner;
mod scenario;
mod sweep;

pub use client::{ClientIssue, ReceivedRecord, RequestTrace, ScriptedClient, SentRecord};
pub use log::{
    ns_to_secs, replay, secs_to_ns, Direction, EventLog, LogEvent, LoggedConfig, LoggedInput, ReplayOutcome,
    LOG_VERSION,
};
pub use realtime::{run_realtime, RealtimeOutcome};
pub use report::{
    bandwidth_account, BandwidthReport, ChannelUsage, LatencyReport, LatencyRow, ObjectUsage, Stats,
    CLOUD_DEPENDENT_ROWS, INTERACTION_SYNC_ROW, RESPONSE_SYNC_ROW, TOTAL_ROW,
};
pub use runner::{
    run_virtual, ModelSource, RunOptions, SimOutcome, SimServices, StalenessProbe, StalenessSample, UploadAudit,
};
pub use scenario::{
    Action, ActionKind, CameraSpec, ClientSpec, ConsentPolicy, PoseSpec, Scenario, ServerSpec, SCENARIO_VERSION,
};
pub use sweep::{registration_sweep, SweepCell, SweepTable, SWEEP_CSV_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("log: {0}")]
    Log(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

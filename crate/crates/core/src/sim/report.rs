use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::client::ScriptedClient;
use super::log::{ns_to_secs, Direction, EventLog, LogEvent};
use crate::privacy::RequestId;
use crate::protocol::FrameType;
use crate::server::STAGE_ROWS;

pub const TOTAL_ROW: &str = "Total w/o Confirm";
pub const RESPONSE_SYNC_ROW: &str = "Response Synchronization";
pub const INTERACTION_SYNC_ROW: &str = "Interaction Synchronization";

/// Rows whose real counterpart depends on a commercial cloud model or on
/// speech components that are not part of this system.
pub const CLOUD_DEPENDENT_ROWS: [&str; 4] = ["Initial Stage", "Refined Stage", "Transcription", "Text to Speech"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two samples.
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Self { mean, std, median, count: n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyRow {
    pub name: String,
    pub stats: Option<Stats>,
    #[serde(default)]
    pub stubbed: bool,
    #[serde(default)]
    pub cloud_dependent: bool,
}

/// Speak-to-action decomposition plus both synchronization latencies, all in
/// seconds. A row without samples has `stats: None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyReport {
    pub speak_to_action: Vec<LatencyRow>,
    pub response_sync: Option<Stats>,
    pub interaction_sync: Option<Stats>,
    #[serde(skip)]
    pub interaction_samples: Vec<f64>,
}

impl LatencyReport {
    /// Builds the report from what the scripted clients observed.
    ///
    /// Communication is what the requester waited beyond the stages the
    /// server measured. Response sync is a pseudo user's receipt of a
    /// broadcast minus the requester's. Interaction sync pairs each record a
    /// pseudo user received with the send of the identical bytes.
    pub fn from_clients(clients: &[ScriptedClient]) -> Self {
        let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut stubbed: BTreeMap<&str, bool> = BTreeMap::new();
        let mut executed: BTreeMap<RequestId, f64> = BTreeMap::new();
        for c in clients {
            for t in &c.requests {
                let (Some(done), Some(id)) = (t.executed_at, t.request_id) else {
                    continue;
                };
                if t.rows.is_empty() {
                    continue;
                }
                executed.insert(id, done);
                let waited = done - t.issued_at;
                let mut server_side = 0.0;
                let mut confirm = 0.0;
                for r in &t.rows {
                    let name = STAGE_ROWS.iter().find(|n| **n == r.name).copied().unwrap_or("?");
                    rows.entry(name).or_default().push(r.seconds);
                    *stubbed.entry(name).or_default() |= r.stubbed;
                    server_side += r.seconds;
                    if r.name == STAGE_ROWS[2] {
                        confirm = r.seconds;
                    }
                }
                rows.entry(STAGE_ROWS[6]).or_default().push((waited - server_side).max(0.0));
                rows.entry(TOTAL_ROW).or_default().push(waited - confirm);
            }
        }
        let mut speak_to_action: Vec<LatencyRow> = STAGE_ROWS
            .iter()
            .chain(std::iter::once(&TOTAL_ROW))
            .map(|name| LatencyRow {
                name: (*name).to_owned(),
                stats: rows.get(name).and_then(|v| Stats::of(v)),
                stubbed: stubbed.get(name).copied().unwrap_or(false),
                cloud_dependent: CLOUD_DEPENDENT_ROWS.contains(name),
            })
            .collect();
        if executed.is_empty() {
            for r in &mut speak_to_action {
                r.stats = None;
            }
        }

        let mut response = Vec::new();
        let mut interaction = Vec::new();
        let mut sends: HashMap<[u8; 48], Vec<f64>> = HashMap::new();
        for c in clients {
            for s in &c.sent_records {
                sends.entry(s.bytes).or_default().push(s.at);
            }
        }
        for p in clients.iter().filter(|c| c.is_pseudo()) {
            for (id, seen) in &p.broadcasts_seen {
                if let Some(done) = executed.get(id) {
                    response.push(seen - done);
                }
            }
            for r in &p.received_records {
                let sent = sends
                    .get(&r.bytes)
                    .and_then(|v| v.iter().copied().filter(|t| *t <= r.at).max_by(f64::total_cmp));
                if let Some(t) = sent {
                    interaction.push(r.at - t);
                }
            }
        }
        Self {
            speak_to_action,
            response_sync: Stats::of(&response),
            interaction_sync: Stats::of(&interaction),
            interaction_samples: interaction,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<30} {:>10} {:>10} {:>10} {:>7}  note", "Latency Type", "mean (s)", "std (s)", "median", "n");
        let fmt = |out: &mut String, name: &str, s: &Option<Stats>, note: &str| {
            let _ = match s {
                Some(s) => writeln!(
                    out,
                    "{:<30} {:>10.6} {:>10.6} {:>10.6} {:>7}  {note}",
                    name, s.mean, s.std, s.median, s.count
                ),
                None => writeln!(out, "{:<30} {:>10} {:>10} {:>10} {:>7}  {note}", name, "-", "-", "-", 0),
            };
        };
        for r in &self.speak_to_action {
            let note = match (r.stubbed, r.cloud_dependent) {
                (true, _) => "not implemented, reported as 0",
                (false, true) => "mock delay; real value depends on a cloud model",
                _ => "",
            };
            fmt(&mut out, &r.name, &r.stats, note);
        }
        fmt(&mut out, RESPONSE_SYNC_ROW, &self.response_sync, "");
        fmt(&mut out, INTERACTION_SYNC_ROW, &self.interaction_sync, "");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("latencyType,mean,std,median,count\n");
        let mut row = |name: &str, s: &Option<Stats>| {
            if let Some(s) = s {
                let _ = writeln!(out, "{name},{},{},{},{}", s.mean, s.std, s.median, s.count);
            }
        };
        for r in &self.speak_to_action {
            row(&r.name, &r.stats);
        }
        row(RESPONSE_SYNC_ROW, &self.response_sync);
        row(INTERACTION_SYNC_ROW, &self.interaction_sync);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChannelUsage {
    pub frames: u64,
    pub wire_bytes: u64,
    pub payload_bytes: u64,
    pub bytes_per_second: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectUsage {
    /// Records the owner sent.
    pub records: u64,
    pub records_per_second: f64,
    /// Most records sent in any one-second window.
    pub peak_per_second: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BandwidthReport {
    pub duration: f64,
    /// Keyed by `"{direction}/{channel}"`, e.g. `uplink/sync`.
    pub channels: BTreeMap<String, ChannelUsage>,
    pub objects: BTreeMap<u32, ObjectUsage>,
}

/// Exact byte accounting from a log's deliveries.
pub fn bandwidth_account(log: &EventLog) -> BandwidthReport {
    let duration = ns_to_secs(log.duration_ns());
    let mut channels: BTreeMap<String, ChannelUsage> = BTreeMap::new();
    let mut sends: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for e in &log.events {
        let LogEvent::Deliver {
            t,
            dir,
            frame_type,
            wire_bytes,
            records,
            ..
        } = e
        else {
            continue;
        };
        let channel = if *frame_type == FrameType::Sync as u8 { "sync" } else { "control" };
        let d = match dir {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        };
        let u = channels.entry(format!("{d}/{channel}")).or_default();
        u.frames += 1;
        u.wire_bytes += *wire_bytes as u64;
        u.payload_bytes += (*wire_bytes - crate::protocol::FRAME_HEADER_LEN) as u64;
        if *dir == Direction::Uplink {
            for id in records {
                sends.entry(*id).or_default().push(*t);
            }
        }
    }
    for u in channels.values_mut() {
        u.bytes_per_second = if duration > 0.0 { u.payload_bytes as f64 / duration } else { 0.0 };
    }
    let objects = sends
        .into_iter()
        .map(|(id, times)| {
            let mut peak = 0;
            let mut lo = 0;
            for hi in 0..times.len() {
                while times[hi] - times[lo] >= 1_000_000_000 {
                    lo += 1;
                }
                peak = peak.max(hi - lo + 1);
            }
            let usage = ObjectUsage {
                records: times.len() as u64,
                records_per_second: if duration > 0.0 { times.len() as f64 / duration } else { 0.0 },
                peak_per_second: peak as u64,
            };
            (id, usage)
        })
        .collect();
    BandwidthReport {
        duration,
        channels,
        objects,
    }
}

impl BandwidthReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("duration {:.3} s\n", self.duration);
        let _ = writeln!(out, "{:<18} {:>8} {:>12} {:>12} {:>12}", "channel", "frames", "wire bytes", "payload", "payload B/s");
        for (k, u) in &self.channels {
            let _ = writeln!(
                out,
                "{:<18} {:>8} {:>12} {:>12} {:>12.1}",
                k, u.frames, u.wire_bytes, u.payload_bytes, u.bytes_per_second
            );
        }
        let _ = writeln!(out, "{:<8} {:>8} {:>12} {:>12}", "object", "records", "records/s", "peak/s");
        for (id, o) in &self.objects {
            let _ = writeln!(out, "{:<8} {:>8} {:>12.2} {:>12}", id, o.records, o.records_per_second, o.peak_per_second);
        }
        out
    }
}

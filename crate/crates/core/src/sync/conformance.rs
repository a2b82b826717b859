//! Golden wire fixtures and randomized round-trip checks.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{decode_batch, SyncRecord, RECORD_SIZE};
use crate::protocol::{Frame, FrameType};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoldenRecord {
    pub name: String,
    pub hex: String,
    pub object_id: u32,
    pub position: [f32; 3],
    pub rotation: [f32; 4],
    pub scale: [f32; 3],
    pub events: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoldenFrame {
    pub name: String,
    pub hex: String,
    pub frame_type: u8,
    pub payload_hex: String,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoldenSet {
    #[serde(default, rename = "record")]
    pub records: Vec<GoldenRecord>,
    #[serde(default, rename = "frame")]
    pub frames: Vec<GoldenFrame>,
    #[serde(default)]
    pub reject_lengths: Vec<usize>,
}

impl GoldenSet {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            out.push_str(&format!("{mark} {}", c.name));
            if !c.detail.is_empty() {
                out.push_str(&format!(": {}", c.detail));
            }
            out.push('\n');
        }
        out
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn check_record(g: &GoldenRecord) -> Result<(), String> {
    let bytes = hex::decode(&g.hex).map_err(|e| e.to_string())?;
    let r = SyncRecord::decode(&bytes).map_err(|e| e.to_string())?;
    let fields_match = r.object_id == g.object_id
        && same_bits(&r.position, &g.position)
        && same_bits(&r.rotation, &g.rotation)
        && same_bits(&r.scale, &g.scale)
        && r.events == g.events;
    if !fields_match {
        return Err(format!("decoded {r:?}"));
    }
    if r.encode().as_slice() != bytes.as_slice() {
        return Err("re-encoding differs".into());
    }
    Ok(())
}

fn check_frame(g: &GoldenFrame) -> Result<(), String> {
    let bytes = hex::decode(&g.hex).map_err(|e| e.to_string())?;
    let payload = hex::decode(&g.payload_hex).map_err(|e| e.to_string())?;
    let f = Frame::decode(&bytes).map_err(|e| e.to_string())?;
    if f.kind as u8 != g.frame_type || f.payload != payload {
        return Err(format!("decoded {f:?}"));
    }
    if f.encode() != bytes {
        return Err("re-encoding differs".into());
    }
    if f.kind == FrameType::Sync {
        decode_batch(&f.payload).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// A record with unit rotation, positive scale and defined event bits.
pub fn random_record(rng: &mut ChaCha8Rng) -> SyncRecord {
    let mut q = [0f32; 4];
    loop {
        for v in &mut q {
            *v = rng.random_range(-1.0..1.0);
        }
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.1 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    SyncRecord {
        object_id: rng.random(),
        position: [0; 3].map(|_| rng.random_range(-100.0..100.0)),
        rotation: q,
        scale: [0; 3].map(|_| rng.random_range(0.01..10.0)),
        events: rng.random_range(0..8),
    }
}

/// Golden decode and re-encode, `trials` random round trips, and length
/// rejection.
pub fn run_conformance(set: &GoldenSet, trials: usize, seed: u64) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    for g in &set.records {
        report.push(format!("record {}", g.name), check_record(g));
    }
    for g in &set.frames {
        report.push(format!("frame {}", g.name), check_frame(g));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roundtrips = (0..trials).try_for_each(|i| {
        let r = random_record(&mut rng);
        let bytes = r.encode();
        let back = SyncRecord::decode(&bytes).map_err(|e| format!("trial {i}: {e}"))?;
        if back != r || back.encode() != bytes {
            return Err(format!("trial {i}: {r:?} came back as {back:?}"));
        }
        let mut raw = [0u8; RECORD_SIZE];
        rng.fill(&mut raw[..]);
        let any = SyncRecord::decode(&raw).map_err(|e| format!("trial {i}: {e}"))?;
        if any.encode() != raw {
            return Err(format!("trial {i}: arbitrary bytes did not survive"));
        }
        Ok(())
    });
    report.push(format!("{trials} random round trips"), roundtrips);
    let rejects = set.reject_lengths.iter().try_for_each(|&n| {
        let bytes = vec![0u8; n];
        if SyncRecord::decode(&bytes).is_ok() {
            return Err(format!("{n}-byte record accepted"));
        }
        if (n % RECORD_SIZE != 0 || n == 0)
            && decode_batch(&bytes).is_ok() {
                return Err(format!("{n}-byte batch accepted"));
            }
        Ok(())
    });
    report.push("non-48-byte lengths rejected", rejects);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_golden_set_passes() {
        let set = GoldenSet::load(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/wire/golden.toml")).unwrap();
        assert!(set.records.len() >= 5);
        let r = run_conformance(&set, 200, 1);
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn tampered_fixture_fails() {
        let mut set = GoldenSet::load(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/wire/golden.toml")).unwrap();
        set.records[0].object_id += 1;
        set.reject_lengths = vec![48];
        let r = run_conformance(&set, 0, 1);
        assert!(!r.passed());
        assert_eq!(r.checks.iter().filter(|c| !c.passed).count(), 2);
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Envelope, Frame, FrameDecoder, FrameType};
use crate::colocation::UserId;
use crate::sync::decode_batch;

/// Outcome of checking a captured byte stream against the framed protocol.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamReport {
    pub bytes: usize,
    pub control_frames: usize,
    pub sync_frames: usize,
    pub sync_records: usize,
    pub errors: Vec<String>,
}

impl StreamReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Default)]
struct Checker {
    report: StreamReport,
    last_seq: BTreeMap<UserId, u64>,
    session: Option<String>,
}

impl Checker {
    fn frame(&mut self, index: usize, f: &Frame) {
        match f.kind {
            FrameType::Control => {
                self.report.control_frames += 1;
                let env = match Envelope::from_frame(f) {
                    Ok(e) => e,
                    Err(e) => {
                        self.report.errors.push(format!("frame {index}: {e}"));
                        return;
                    }
                };
                match &self.session {
                    None => self.session = Some(env.session_id.clone()),
                    Some(s) if *s != env.session_id => self
                        .report
                        .errors
                        .push(format!("frame {index}: session {} after {s}", env.session_id)),
                    _ => {}
                }
                if let Some(prev) = self.last_seq.insert(env.sender_id.clone(), env.seq) {
                    if env.seq <= prev {
                        self.report.errors.push(format!(
                            "frame {index}: seq {} from {} not above {prev}",
                            env.seq, env.sender_id
                        ));
                    }
                }
            }
            FrameType::Sync => {
                self.report.sync_frames += 1;
                match decode_batch(&f.payload) {
                    Ok(records) => {
                        self.report.sync_records += records.len();
                        for r in &records {
                            if let Err(e) = r.validate() {
                                self.report.errors.push(format!("frame {index}: object {}: {e}", r.object_id));
                            }
                        }
                    }
                    Err(e) => self.report.errors.push(format!("frame {index}: {e}")),
                }
            }
        }
    }
}

/// Checks one direction of a connection: framing, control envelopes,
/// per-sender sequence order, one session id, and sync batch layout.
pub fn validate_stream(bytes: &[u8]) -> StreamReport {
    let mut c = Checker::default();
    c.report.bytes = bytes.len();
    let mut d = FrameDecoder::new();
    d.push(bytes);
    let mut index = 0;
    loop {
        match d.next_frame() {
            Ok(Some(f)) => {
                c.frame(index, &f);
                index += 1;
            }
            Ok(None) => {
                if d.buffered() > 0 {
                    c.report.errors.push(format!("{} trailing bytes form no frame", d.buffered()));
                }
                break;
            }
            Err(e) => {
                c.report.errors.push(format!("frame {index}: {e}"));
                break;
            }
        }
    }
    c.report
}

/// Same checks over already separated frames.
pub fn validate_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> StreamReport {
    let mut c = Checker::default();
    for (i, f) in frames.into_iter().enumerate() {
        c.report.bytes += f.wire_len();
        c.frame(i, f);
    }
    c.report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use crate::protocol::{ControlBody, Sequencer};
    use crate::sync::{encode_batch, SyncRecord};

    fn stream() -> Vec<u8> {
        let mut s = Sequencer::new("s", UserId::from("a"));
        let mut out = Vec::new();
        s.stamp(ControlBody::Hello { keyword: None, pseudo_for: None, environment: None }).to_frame().encode_into(&mut out);
        let rec = SyncRecord::from_pose(1, &Pose::from_position(Vec3::new(1.0, 2.0, 3.0)), 0);
        Frame::sync(encode_batch(&[rec, rec])).encode_into(&mut out);
        s.stamp(ControlBody::Claim { object_id: 1 }).to_frame().encode_into(&mut out);
        out
    }

    #[test]
    fn valid_stream() {
        let r = validate_stream(&stream());
        assert!(r.is_valid(), "{:?}", r.errors);
        assert_eq!((r.control_frames, r.sync_frames, r.sync_records), (2, 1, 2));
    }

    #[test]
    fn detects_bad_sync_length_and_truncation() {
        let mut b = stream();
        Frame::sync(vec![0u8; 47]).encode_into(&mut b);
        assert_eq!(validate_stream(&b).errors.len(), 1);
        let mut t = stream();
        t.pop();
        assert!(!validate_stream(&t).is_valid());
    }

    #[test]
    fn detects_sequence_regression() {
        let mut s = Sequencer::new("s", UserId::from("a"));
        let a = s.stamp(ControlBody::Claim { object_id: 1 });
        let b = s.stamp(ControlBody::Claim { object_id: 1 });
        let r = validate_frames(&[b.to_frame(), a.to_frame()]);
        assert_eq!(r.errors.len(), 1);
        assert!(r.errors[0].contains("seq 1"));
    }

    #[test]
    fn detects_bad_json() {
        let r = validate_frames(&[Frame::control(b"{oops".to_vec())]);
        assert!(!r.is_valid());
    }
}

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BBox, Detection, PrivacyError};

/// Object detector adapter: frame reference → detections.
pub trait Detector: Send + Sync {
    fn detect(&self, frame_ref: &str) -> Result<Vec<Detection>, PrivacyError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFrame {
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
}

/// Deterministic detector backed by a scenario file.
///
/// ```text
/// # comment
/// frame desk-01 640 480
/// keyboard 327.80 352.12 66.47 66.03 589.13 638.21 0.91
/// id card 100 100 80 90 120 110 0.77
/// ```
///
/// The last seven tokens of a detection line are numeric, so labels may
/// contain spaces. Unknown frames yield no detections. A `crop x y w h`
/// line records the region a model asked for; the detector ignores it and
/// [`super::PrivacyCorpus`] reads it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockDetector {
    frames: BTreeMap<String, ScriptedFrame>,
}

impl MockDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_ref: impl Into<String>, frame: ScriptedFrame) {
        self.frames.insert(frame_ref.into(), frame);
    }

    pub fn frame(&self, frame_ref: &str) -> Option<&ScriptedFrame> {
        self.frames.get(frame_ref)
    }

    pub fn frames(&self) -> impl Iterator<Item = (&String, &ScriptedFrame)> {
        self.frames.iter()
    }

    pub fn parse(text: &str) -> Result<Self, PrivacyError> {
        let mut out = Self::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens[0] == "crop" {
                continue;
            }
            if tokens[0] == "frame" {
                let [_, id, w, h] = tokens[..] else {
                    return Err(PrivacyError::Parse(format!("line {lineno}: expected `frame <id> <width> <height>`")));
                };
                let dim = |s: &str| {
                    s.parse::<u32>()
                        .map_err(|_| PrivacyError::Parse(format!("line {lineno}: bad dimension {s:?}")))
                };
                let frame = ScriptedFrame {
                    width: dim(w)?,
                    height: dim(h)?,
                    detections: Vec::new(),
                };
                if out.frames.insert(id.to_owned(), frame).is_some() {
                    return Err(PrivacyError::Parse(format!("line {lineno}: duplicate frame {id}")));
                }
                current = Some(id.to_owned());
                continue;
            }
            let id = current
                .as_ref()
                .ok_or_else(|| PrivacyError::Parse(format!("line {lineno}: detection before any frame header")))?;
            if tokens.len() < 8 {
                return Err(PrivacyError::Parse(format!(
                    "line {lineno}: expected `label cx cy l t r b conf`"
                )));
            }
            let split = tokens.len() - 7;
            let mut nums = [0.0f64; 7];
            for (slot, tok) in nums.iter_mut().zip(&tokens[split..]) {
                *slot = tok
                    .parse()
                    .map_err(|_| PrivacyError::Parse(format!("line {lineno}: bad number {tok:?}")))?;
            }
            let [cx, cy, l, t, r, b, c] = nums;
            let det = Detection::new(tokens[..split].join(" "), (cx, cy), BBox::new(l, t, r, b), c);
            det.validate()
                .map_err(|e| PrivacyError::Parse(format!("line {lineno}: {e}")))?;
            out.frames.get_mut(id).expect("header inserted").detections.push(det);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrivacyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PrivacyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

impl Detector for MockDetector {
    fn detect(&self, frame_ref: &str) -> Result<Vec<Detection>, PrivacyError> {
        Ok(self.frames.get(frame_ref).map(|f| f.detections.clone()).unwrap_or_default())
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    frame: &'a str,
}

#[derive(Deserialize)]
struct DetectResponse {
    #[serde(default)]
    detections: Vec<Detection>,
    #[serde(default)]
    error: Option<String>,
}

struct ProcessIo {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Talks to a long-running detector process over standard streams.
///
/// Each request is one JSON line `{"frame": "<ref>"}`; each reply is one
/// JSON line `{"detections": [...]}` or `{"error": "..."}`.
pub struct ExternalProcessDetector {
    io: Mutex<ProcessIo>,
}

impl ExternalProcessDetector {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, PrivacyError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PrivacyError::Detector(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self {
            io: Mutex::new(ProcessIo {
                _child: child,
                stdin,
                stdout,
            }),
        })
    }
}

impl Drop for ProcessIo {
    fn drop(&mut self) {
        let _ = self._child.kill();
        let _ = self._child.wait();
    }
}

impl Detector for ExternalProcessDetector {
    fn detect(&self, frame_ref: &str) -> Result<Vec<Detection>, PrivacyError> {
        let mut io = self.io.lock().map_err(|_| PrivacyError::Detector("detector poisoned".into()))?;
        let mut line = serde_json::to_string(&DetectRequest { frame: frame_ref }).expect("serializable");
        line.push('\n');
        io.stdin
            .write_all(line.as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| PrivacyError::Detector(format!("write: {e}")))?;
        let mut reply = String::new();
        let n = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| PrivacyError::Detector(format!("read: {e}")))?;
        if n == 0 {
            return Err(PrivacyError::Detector("detector closed its output".into()));
        }
        let resp: DetectResponse =
            serde_json::from_str(&reply).map_err(|e| PrivacyError::Detector(format!("bad reply: {e}")))?;
        if let Some(err) = resp.error {
            return Err(PrivacyError::Detector(err));
        }
        for d in &resp.detections {
            d.validate()?;
        }
        Ok(resp.detections)
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use super::{summarize_audits, AuditSummary, Detection, MockDetector, PrivacyError, PrivacyPolicy, Rect};

/// Captured frames with their detections and, where a model asked for
/// one, the crop region. Stored in the detector script format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyCorpus {
    pub detector: MockDetector,
    pub crops: BTreeMap<String, Rect>,
}

impl PrivacyCorpus {
    pub fn parse(text: &str) -> Result<Self, PrivacyError> {
        let detector = MockDetector::parse(text)?;
        let mut crops = BTreeMap::new();
        let mut current: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.first() {
                Some(&"frame") => current = tokens.get(1).copied(),
                Some(&"crop") => {
                    let bad = || PrivacyError::Parse(format!("line {}: expected `crop x y width height`", i + 1));
                    let id = current.ok_or_else(bad)?;
                    let v = tokens[1..]
                        .iter()
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad())?;
                    let [x, y, w, h] = v[..] else { return Err(bad()) };
                    if crops.insert(id.to_owned(), Rect::new(x, y, w, h)).is_some() {
                        return Err(PrivacyError::Parse(format!("line {}: second crop for {id}", i + 1)));
                    }
                }
                _ => {}
            }
        }
        Ok(Self { detector, crops })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrivacyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PrivacyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Frames in id order, each with its crop.
    pub fn frames(&self) -> Vec<(String, Vec<Detection>, Option<Rect>)> {
        self.detector
            .frames()
            .map(|(id, f)| (id.clone(), f.detections.clone(), self.crops.get(id).copied()))
            .collect()
    }

    pub fn audit(&self, policy: &PrivacyPolicy) -> AuditSummary {
        let frames: Vec<_> = self.frames().into_iter().map(|(_, d, c)| (d, c)).collect();
        summarize_audits(&frames, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::PrivacyLevel;

    const TEXT: &str = "frame a 100 100\nid card 10 10 0 0 20 20 0.9\ncup 80 80 70 70 90 90 0.8\ncrop 60 60 40 40\nframe b 100 100\nface 50 50 40 40 60 60 0.9\n";

    #[test]
    fn crops_attach_to_their_frame() {
        let c = PrivacyCorpus::parse(TEXT).unwrap();
        assert_eq!(c.crops.len(), 1);
        assert_eq!(c.crops["a"], Rect::new(60.0, 60.0, 40.0, 40.0));
        assert_eq!(c.detector.frame("a").unwrap().detections.len(), 2);
    }

    #[test]
    fn audit_counts_before_and_after() {
        let s = PrivacyCorpus::parse(TEXT).unwrap().audit(&PrivacyPolicy::twelve_category());
        assert_eq!(s.frames, 2);
        assert_eq!(s.original[&PrivacyLevel::HighlySensitive], 1.0);
        assert_eq!(s.cropped[&PrivacyLevel::HighlySensitive], 0.0);
        assert_eq!(s.cropped[&PrivacyLevel::Insensitive], 0.5);
    }

    #[test]
    fn malformed_crop_is_rejected() {
        assert!(PrivacyCorpus::parse("crop 1 2 3 4\n").is_err());
        assert!(PrivacyCorpus::parse("frame a 10 10\ncrop 1 2 3\n").is_err());
    }
}

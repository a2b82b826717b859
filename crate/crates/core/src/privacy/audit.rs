use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{iou, Detection, PrivacyError, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PrivacyLevel {
    Insensitive,
    MaybeSensitive,
    HighlySensitive,
}

impl PrivacyLevel {
    pub const ALL: [PrivacyLevel; 3] = [
        PrivacyLevel::Insensitive,
        PrivacyLevel::MaybeSensitive,
        PrivacyLevel::HighlySensitive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PrivacyLevel::Insensitive => "Insensitive",
            PrivacyLevel::MaybeSensitive => "Maybe sensitive",
            PrivacyLevel::HighlySensitive => "Highly sensitive",
        }
    }
}

/// Label → sensitivity, total via `default_level`. Labels compare case-insensitively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrivacyPolicy {
    pub levels: BTreeMap<String, PrivacyLevel>,
    pub default_level: PrivacyLevel,
}

impl Default for PrivacyPolicy {
    fn default() -> Self {
        Self::twelve_category()
    }
}

impl PrivacyPolicy {
    /// The twelve object categories of the privacy study, with detector
    /// label aliases for each.
    pub fn twelve_category() -> Self {
        use PrivacyLevel::*;
        let table: &[(&[&str], PrivacyLevel)] = &[
            (&["cup", "mug"], Insensitive),
            (&["desk", "dining table", "table"], Insensitive),
            (&["chair"], Insensitive),
            (&["book"], Insensitive),
            (&["bag", "backpack", "handbag"], MaybeSensitive),
            (&["laptop", "cell phone", "phone"], MaybeSensitive),
            (&["monitor", "tv"], MaybeSensitive),
            (&["lab equipment", "microscope", "oscilloscope"], MaybeSensitive),
            (&["face", "person"], HighlySensitive),
            (&["medicine", "medical record"], HighlySensitive),
            (&["id card", "driver's license"], HighlySensitive),
            (&["mail", "letter", "statement"], HighlySensitive),
        ];
        let levels = table
            .iter()
            .flat_map(|(names, lvl)| names.iter().map(move |n| (n.to_string(), *lvl)))
            .collect();
        Self {
            levels,
            default_level: MaybeSensitive,
        }
    }

    pub fn level_of(&self, label: &str) -> PrivacyLevel {
        self.levels
            .get(&label.to_lowercase())
            .copied()
            .unwrap_or(self.default_level)
    }

    /// Parses a TOML table of the form `defaultLevel = "..."` plus
    /// `[levels]` entries mapping labels to levels.
    pub fn from_toml(text: &str) -> Result<Self, PrivacyError> {
        let mut p: PrivacyPolicy = toml::from_str(text).map_err(|e| PrivacyError::Parse(e.to_string()))?;
        p.levels = p.levels.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrivacyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PrivacyError::Io(e.to_string()))?;
        Self::from_toml(&text)
    }
}

/// Whether at least one object of each sensitivity level is visible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LevelPresence {
    pub insensitive_present: bool,
    pub maybe_present: bool,
    pub highly_present: bool,
}

impl LevelPresence {
    pub fn get(&self, level: PrivacyLevel) -> bool {
        match level {
            PrivacyLevel::Insensitive => self.insensitive_present,
            PrivacyLevel::MaybeSensitive => self.maybe_present,
            PrivacyLevel::HighlySensitive => self.highly_present,
        }
    }

    fn set(&mut self, level: PrivacyLevel) {
        match level {
            PrivacyLevel::Insensitive => self.insensitive_present = true,
            PrivacyLevel::MaybeSensitive => self.maybe_present = true,
            PrivacyLevel::HighlySensitive => self.highly_present = true,
        }
    }
}

/// Detections that remain visible in `crop`: any positive-area overlap counts.
pub fn detections_in_crop<'a>(detections: &'a [Detection], crop: &Rect) -> Vec<&'a Detection> {
    detections
        .iter()
        .filter(|d| iou(&d.bbox.to_rect(), crop) > 0.0)
        .collect()
}

/// Level presence over the whole frame (`crop = None`) or over the crop.
pub fn privacy_audit(detections: &[Detection], crop: Option<&Rect>, policy: &PrivacyPolicy) -> LevelPresence {
    let mut out = LevelPresence::default();
    let visible: Vec<&Detection> = match crop {
        None => detections.iter().collect(),
        Some(r) => detections_in_crop(detections, r),
    };
    for d in visible {
        out.set(policy.level_of(&d.label));
    }
    out
}

/// Fraction of frames with at least one object per level, before and after cropping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditSummary {
    pub frames: usize,
    pub original: BTreeMap<PrivacyLevel, f64>,
    pub cropped: BTreeMap<PrivacyLevel, f64>,
}

/// Aggregates per-frame audits. Frames without a crop contribute nothing
/// to the cropped column, since no image leaves the edge for them.
pub fn summarize_audits(frames: &[(Vec<Detection>, Option<Rect>)], policy: &PrivacyPolicy) -> AuditSummary {
    let n = frames.len();
    let mut orig = BTreeMap::new();
    let mut crop = BTreeMap::new();
    for lvl in PrivacyLevel::ALL {
        orig.insert(lvl, 0usize);
        crop.insert(lvl, 0usize);
    }
    for (dets, rect) in frames {
        let before = privacy_audit(dets, None, policy);
        let after = match rect {
            Some(r) => privacy_audit(dets, Some(r), policy),
            None => LevelPresence::default(),
        };
        for lvl in PrivacyLevel::ALL {
            *orig.get_mut(&lvl).expect("init") += before.get(lvl) as usize;
            *crop.get_mut(&lvl).expect("init") += after.get(lvl) as usize;
        }
    }
    let frac = |m: BTreeMap<PrivacyLevel, usize>| {
        m.into_iter()
            .map(|(k, v)| (k, if n == 0 { 0.0 } else { v as f64 / n as f64 }))
            .collect()
    };
    AuditSummary {
        frames: n,
        original: frac(orig),
        cropped: frac(crop),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CropTrial {
    pub expected: Option<Rect>,
    pub returned: Option<Rect>,
}

/// IoU above which a returned crop counts as correct.
pub const CROP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CropMetrics {
    /// Over trials expecting a crop; 0 when there are none.
    pub crop_recall: f64,
    /// Over trials expecting no crop; 0 when there are none.
    pub crop_fallout: f64,
    pub crop_expected: usize,
    pub none_expected: usize,
}

pub fn crop_metrics(trials: &[CropTrial]) -> Result<CropMetrics, PrivacyError> {
    if trials.is_empty() {
        return Err(PrivacyError::Metric("no trials".into()));
    }
    let mut hits = 0usize;
    let mut crop_expected = 0usize;
    let mut false_crops = 0usize;
    let mut none_expected = 0usize;
    for t in trials {
        match (&t.expected, &t.returned) {
            (Some(e), r) => {
                crop_expected += 1;
                if r.is_some_and(|r| iou(e, &r) > CROP_IOU_THRESHOLD) {
                    hits += 1;
                }
            }
            (None, r) => {
                none_expected += 1;
                if r.is_some() {
                    false_crops += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(CropMetrics {
        crop_recall: ratio(hits, crop_expected),
        crop_fallout: ratio(false_crops, none_expected),
        crop_expected,
        none_expected,
    })
}

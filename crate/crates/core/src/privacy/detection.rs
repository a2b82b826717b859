use std::cmp::Ordering;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{PrivacyError, Rect};

/// Axis-aligned pixel box, `left < right`, `top < bottom`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0)
    }

    pub fn to_rect(&self) -> Rect {
        Rect::new(self.left, self.top, self.width(), self.height())
    }

    /// The box grown by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    /// Closed containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left && x <= self.right && y >= self.top && y <= self.bottom
    }
}

/// One object-detector result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    /// Pixel `(x, y)`.
    pub center: (f64, f64),
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(label: impl Into<String>, center: (f64, f64), bbox: BBox, confidence: f64) -> Self {
        Self {
            label: label.into(),
            center,
            bbox,
            confidence,
        }
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        let b = &self.bbox;
        if !(b.left < b.right && b.top < b.bottom) {
            return Err(PrivacyError::InvalidDetection(format!("{}: empty box", self.label)));
        }
        let (x, y) = self.center;
        let slack = BBox::new(b.left - 1.0, b.top - 1.0, b.right + 1.0, b.bottom + 1.0);
        if !slack.contains(x, y) {
            return Err(PrivacyError::InvalidDetection(format!("{}: center outside box", self.label)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PrivacyError::InvalidDetection(format!("{}: confidence out of range", self.label)));
        }
        Ok(())
    }

    /// The canonical one-line summary, two decimals everywhere.
    pub fn describe(&self) -> String {
        let b = &self.bbox;
        format!(
            "{}, center ({:.2}, {:.2}), box ({:.2}, {:.2}, {:.2}, {:.2}), confidence {:.2}",
            self.label, self.center.0, self.center.1, b.left, b.top, b.right, b.bottom, self.confidence
        )
    }
}

/// Textual field-of-view summary handed to the language model in place of pixels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameDescription {
    pub lines: Vec<String>,
}

impl FrameDescription {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.label.cmp(&b.label))
        .then_with(|| a.bbox.left.total_cmp(&b.bbox.left))
}

/// One line per detection, highest confidence first; ties by label, then left edge.
pub fn describe_frame(detections: &[Detection]) -> FrameDescription {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    FrameDescription {
        lines: sorted.into_iter().map(Detection::describe).collect(),
    }
}

fn line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"(-?\d+\.\d{2})";
        Regex::new(&format!(
            r"^(.+), center \({num}, {num}\), box \({num}, {num}, {num}, {num}\), confidence {num}$"
        ))
        .expect("valid regex")
    })
}

/// Inverse of [`Detection::describe`], up to the two-decimal rounding.
pub fn parse_description_line(line: &str) -> Result<Detection, PrivacyError> {
    let caps = line_regex()
        .captures(line)
        .ok_or_else(|| PrivacyError::Parse(format!("not a detection line: {line}")))?;
    let n = |i: usize| caps[i].parse::<f64>().expect("regex guarantees a number");
    Ok(Detection {
        label: caps[1].to_owned(),
        center: (n(2), n(3)),
        bbox: BBox::new(n(4), n(5), n(6), n(7)),
        confidence: n(8),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keyboard() -> Detection {
        Detection::new("keyboard", (327.80, 352.12), BBox::new(66.47, 66.03, 589.13, 638.21), 0.91)
    }

    #[test]
    fn keyboard_line_matches_listing() {
        assert_eq!(
            describe_frame(&[keyboard()]).lines,
            vec!["keyboard, center (327.80, 352.12), box (66.47, 66.03, 589.13, 638.21), confidence 0.91"]
        );
    }

    #[test]
    fn empty_frame_has_no_lines() {
        assert!(describe_frame(&[]).is_empty());
    }

    #[test]
    fn ordering_by_confidence_label_left() {
        let mut low = keyboard();
        low.confidence = 0.8;
        low.label = "aaa".into();
        let mut high = keyboard();
        high.confidence = 0.9;
        let d = describe_frame(&[low.clone(), high]);
        assert!(d.lines[0].ends_with("confidence 0.90"));

        let mut b = keyboard();
        b.label = "book".into();
        let mut b2 = b.clone();
        b2.bbox.left = 10.0;
        let d = describe_frame(&[keyboard(), b.clone(), b2]);
        assert!(d.lines[0].starts_with("book, center") && d.lines[0].contains("box (10.00"));
        assert!(d.lines[1].starts_with("book,"));
        assert!(d.lines[2].starts_with("keyboard,"));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_description_line("keyboard at 3,4").is_err());
    }

    #[test]
    fn detection_validation() {
        assert!(keyboard().validate().is_ok());
        let mut bad = keyboard();
        bad.bbox.right = bad.bbox.left;
        assert!(bad.validate().is_err());
        let mut far = keyboard();
        far.center = (0.0, 0.0);
        assert!(far.validate().is_err());
    }

    #[test]
    fn scaled_box_about_center() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0).scaled(1.5);
        assert_eq!(b, BBox::new(-2.5, -5.0, 12.5, 25.0));
    }

    proptest! {
        #[test]
        fn describe_then_parse_recovers_values(
            label in "[a-z][a-z ]{0,12}[a-z]",
            l in 0.0f64..1000.0, t in 0.0f64..1000.0,
            w in 1.0f64..500.0, h in 1.0f64..500.0,
            c in 0.0f64..=1.0,
        ) {
            let bbox = BBox::new(l, t, l + w, t + h);
            let d = Detection::new(label.clone(), bbox.center(), bbox, c);
            let back = parse_description_line(&d.describe()).unwrap();
            prop_assert_eq!(back.label, label);
            let tol = 0.005 + 1e-9;
            prop_assert!((back.center.0 - d.center.0).abs() <= tol);
            prop_assert!((back.center.1 - d.center.1).abs() <= tol);
            prop_assert!((back.bbox.left - l).abs() <= tol);
            prop_assert!((back.bbox.bottom - (t + h)).abs() <= tol);
            prop_assert!((back.confidence - c).abs() <= tol);
        }
    }
}
